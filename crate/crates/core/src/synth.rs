//! Procedural multi-lane road scenes with exact lane labels.
//!
//! Straight road, fixed camera: the task is lateral position classification,
//! so curvature would add rendering complexity without changing what the
//! labels encode. Frames are a perspective projection of an asphalt strip
//! with solid border lines, dashed internal dividers whose phase advances
//! with travel, gray occluder boxes, and an ambient brightness factor that
//! scales every intensity before 8-bit quantization. Everything is a pure
//! function of `(spec, frame_index)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::brightness::Image;
use crate::conventions::{LaneLabel, MAX_LANES};
use crate::error::err_invalid;
use crate::rng::Rng;
use crate::{math, Result};

pub const LANE_WIDTH_M: f64 = 4.0;
pub const CAMERA_HEIGHT_M: f64 = 3.2;
pub const LINE_HALF_WIDTH_M: f64 = 0.09;
pub const DASH_PERIOD_M: f64 = 6.0;
pub const DASH_ON_M: f64 = 3.0;
pub const SPEED_M_PER_FRAME: f64 = 1.8;

const SKY_RGB: [f64; 3] = [128.0, 165.0, 205.0];
const GRASS_RGB: [f64; 3] = [40.0, 150.0, 45.0];
const ASPHALT_RGB: [f64; 3] = [70.0, 70.0, 78.0];
const LINE_RGB: [f64; 3] = [240.0, 240.0, 230.0];

/// Ambient override for a frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrightnessInterval {
    pub start: usize,
    pub end: usize,
    pub ambient: u8,
}

/// Full description of one synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub lane_count: u8,
    pub frames: usize,
    /// Ego-lane change points `(frame, lane)`; the first entry must sit at
    /// frame 0 and consecutive lanes differ by exactly one.
    pub ego_schedule: Vec<(usize, u8)>,
    /// Ambient level outside any override interval.
    pub base_ambient: u8,
    pub brightness_profile: Vec<BrightnessInterval>,
    /// 0..1, scales the number of occluder boxes.
    pub occlusion_density: f64,
    pub width: usize,
    pub height: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lane_count == 0 || self.lane_count > MAX_LANES {
            return Err(err_invalid!("scene", "lane_count {} out of 1..=8", self.lane_count));
        }
        if self.frames == 0 || self.width < 16 || self.height < 16 {
            return Err(err_invalid!("scene", "degenerate dimensions"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_density) {
            return Err(err_invalid!("scene", "occlusion density {} out of [0,1]", self.occlusion_density));
        }
        match self.ego_schedule.first() {
            Some(&(0, lane)) if (1..=self.lane_count).contains(&lane) => {}
            _ => return Err(err_invalid!("scene", "ego schedule must start at frame 0 with a valid lane")),
        }
        for pair in self.ego_schedule.windows(2) {
            let (f0, l0) = pair[0];
            let (f1, l1) = pair[1];
            if f1 <= f0 {
                return Err(err_invalid!("scene", "schedule frames must increase: {f0} then {f1}"));
            }
            if (l1 as i16 - l0 as i16).abs() != 1 {
                return Err(err_invalid!("scene", "lane change {l0} -> {l1} must step by exactly one"));
            }
            if !(1..=self.lane_count).contains(&l1) {
                return Err(err_invalid!("scene", "lane {l1} out of 1..={}", self.lane_count));
            }
        }
        let mut intervals = self.brightness_profile.clone();
        intervals.sort_by_key(|iv| iv.start);
        for iv in &intervals {
            if iv.end <= iv.start {
                return Err(err_invalid!("scene", "empty brightness interval {iv:?}"));
            }
        }
        for pair in intervals.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(err_invalid!("scene", "overlapping brightness intervals"));
            }
        }
        Ok(())
    }

    /// Ego lane at a frame: the last change point at or before it.
    pub fn ego_lane_at(&self, frame: usize) -> u8 {
        let mut lane = self.ego_schedule[0].1;
        for &(f, l) in &self.ego_schedule {
            if f <= frame {
                lane = l;
            }
        }
        lane
    }

    /// Ambient level at a frame.
    pub fn ambient_at(&self, frame: usize) -> u8 {
        for iv in &self.brightness_profile {
            if (iv.start..iv.end).contains(&frame) {
                return iv.ambient;
            }
        }
        self.base_ambient
    }
}

/// Camera/projection state for one frame.
struct Geometry {
    focal: f64,
    horizon: f64,
    cam_x: f64,
    half_width: f64,
}

impl Geometry {
    fn of(spec: &SceneSpec, frame_index: usize, ego_lane: u8) -> Geometry {
        // Lateral jitter and sway stay well inside half a lane so the label
        // implied by the camera position never flips.
        let mut rng = Rng::derive(spec.seed, 1);
        let jitter = rng.range_f64(-0.8, 0.8);
        let sway_amp = rng.range_f64(0.02, 0.10);
        let sway_period = rng.range_f64(16.0, 40.0);
        let sway_phase = rng.next_f64();
        let sway = sway_amp
            * math::sin(core::f64::consts::TAU * (frame_index as f64 / sway_period + sway_phase));
        Geometry {
            focal: 0.45 * spec.width as f64,
            horizon: 0.25 * spec.height as f64,
            cam_x: (ego_lane as f64 - 0.5) * LANE_WIDTH_M + jitter + sway,
            half_width: spec.width as f64 / 2.0,
        }
    }

    /// Ground depth seen at a pixel row center, `None` above the horizon.
    fn depth_at_row(&self, y: usize) -> Option<f64> {
        let dy = (y as f64 + 0.5) - self.horizon;
        if dy <= 0.5 {
            None
        } else {
            Some(self.focal * CAMERA_HEIGHT_M / dy)
        }
    }

    /// Screen column of a world lateral offset at a given depth.
    fn screen_x(&self, world_x: f64, z: f64) -> f64 {
        self.half_width + self.focal * (world_x - self.cam_x) / z
    }
}

/// Analytic screen columns of all lane boundaries (0..=lane_count) at an
/// image row, or `None` above the horizon. Exposed so rasterization can be
/// cross-checked against the geometry that produced it.
pub fn boundary_screen_positions(
    spec: &SceneSpec,
    frame_index: usize,
    ego_lane: u8,
    row: usize,
) -> Option<Vec<f64>> {
    let geom = Geometry::of(spec, frame_index, ego_lane);
    let z = geom.depth_at_row(row)?;
    Some(
        (0..=spec.lane_count)
            .map(|i| geom.screen_x(i as f64 * LANE_WIDTH_M, z))
            .collect(),
    )
}

/// Whether internal dividers are painted at depth `z` on this frame.
pub fn dash_on(z: f64, frame_index: usize) -> bool {
    let travelled = z + frame_index as f64 * SPEED_M_PER_FRAME;
    let phase = travelled - DASH_PERIOD_M * math::floor(travelled / DASH_PERIOD_M);
    phase < DASH_ON_M
}

struct Occluder {
    lane_offset: f64,
    z0: f64,
    speed: f64,
    width: f64,
    height: f64,
    gray: f64,
}

fn occluders(spec: &SceneSpec) -> Vec<Occluder> {
    let mut rng = Rng::derive(spec.seed, 2);
    let n = math::round(spec.occlusion_density * 8.0) as usize;
    (0..n)
        .map(|_| {
            let lane = rng.range_u64(1, spec.lane_count as u64) as f64;
            Occluder {
                lane_offset: (lane - 0.5) * LANE_WIDTH_M + rng.range_f64(-0.6, 0.6),
                z0: rng.range_f64(6.0, 40.0),
                speed: rng.range_f64(-0.4, 0.4),
                width: rng.range_f64(1.6, 2.2),
                height: rng.range_f64(1.2, 1.8),
                gray: rng.range_f64(115.0, 180.0),
            }
        })
        .collect()
}

/// Renders one frame. Deterministic in `(spec, frame_index, ego_lane)`.
pub fn render_frame(spec: &SceneSpec, frame_index: usize, ego_lane: u8) -> Image {
    let (w, h) = (spec.width, spec.height);
    let geom = Geometry::of(spec, frame_index, ego_lane);
    let mut base = [vec![0.0f64; w * h], vec![0.0f64; w * h], vec![0.0f64; w * h]];

    let road_left = 0.0;
    let road_right = spec.lane_count as f64 * LANE_WIDTH_M;

    for y in 0..h {
        let row = y * w;
        match geom.depth_at_row(y) {
            None => {
                // Sky with a slight falloff toward the horizon.
                let t = 1.0 - 0.15 * (y as f64 + 0.5) / geom.horizon.max(1.0);
                for c in 0..3 {
                    let v = SKY_RGB[c] * t;
                    base[c][row..row + w].fill(v);
                }
            }
            Some(z) => {
                let sx_left = geom.screen_x(road_left, z);
                let sx_right = geom.screen_x(road_right, z);
                for x in 0..w {
                    let xc = x as f64 + 0.5;
                    let on_road = xc >= sx_left && xc <= sx_right;
                    let color = if on_road { ASPHALT_RGB } else { GRASS_RGB };
                    for c in 0..3 {
                        base[c][row + x] = color[c];
                    }
                }
                // Lane boundary lines: borders solid, dividers dashed.
                let half_px = (geom.focal * LINE_HALF_WIDTH_M / z).max(0.5);
                let dashes_on = dash_on(z, frame_index);
                for i in 0..=spec.lane_count {
                    let is_border = i == 0 || i == spec.lane_count;
                    if !is_border && !dashes_on {
                        continue;
                    }
                    let cx = geom.screen_x(i as f64 * LANE_WIDTH_M, z);
                    let x0 = math::floor(cx - half_px + 0.5).max(0.0) as isize;
                    let x1 = math::floor(cx + half_px + 0.5) as isize;
                    for x in x0..=x1 {
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        for c in 0..3 {
                            base[c][row + x as usize] = LINE_RGB[c];
                        }
                    }
                }
            }
        }
    }

    // Occluders, far to near.
    let mut occ = occluders(spec);
    let z_at = |o: &Occluder| {
        let span = 34.0;
        let raw = o.z0 - 6.0 + frame_index as f64 * o.speed;
        6.0 + (raw - span * math::floor(raw / span))
    };
    occ.sort_by(|a, b| z_at(b).partial_cmp(&z_at(a)).expect("finite depths"));
    for o in &occ {
        let z = z_at(o);
        let bottom = geom.horizon + geom.focal * CAMERA_HEIGHT_M / z;
        let half_w = 0.5 * geom.focal * o.width / z;
        let height = geom.focal * o.height / z;
        let cx = geom.screen_x(o.lane_offset, z);
        let y0 = math::floor(bottom - height).max(0.0) as usize;
        let y1 = (math::floor(bottom) as usize).min(h.saturating_sub(1));
        let x0 = math::floor(cx - half_w).max(0.0) as usize;
        let x1 = (math::floor(cx + half_w) as usize).min(w.saturating_sub(1));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                base[0][y * w + x] = o.gray;
                base[1][y * w + x] = o.gray;
                base[2][y * w + x] = o.gray + 6.0;
            }
        }
    }

    // Ambient scaling and quantization.
    let ambient = spec.ambient_at(frame_index) as f64 / 255.0;
    let mut img = Image::new(w, h);
    for c in 0..3 {
        let plane = img.plane_mut(c);
        for (p, &v) in plane.iter_mut().zip(base[c].iter()) {
            *p = math::round(v * ambient).min(255.0) as u8;
        }
    }
    img
}

/// A rendered sequence with its per-frame labels.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub frames: Vec<Image>,
    pub labels: Vec<LaneLabel>,
    pub spec: SceneSpec,
}

/// Renders every frame of the spec and derives the labels from the schedule.
pub fn generate_sequence(spec: &SceneSpec) -> Result<SequenceRecord> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let ego = spec.ego_lane_at(t);
        frames.push(render_frame(spec, t, ego));
        labels.push(LaneLabel::from_left(ego, spec.lane_count)?);
    }
    Ok(SequenceRecord { frames, labels, spec: clone_spec(spec) })
}

fn clone_spec(spec: &SceneSpec) -> SceneSpec {
    spec.clone()
}

/// Corpus flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Train,
    Test,
    /// Guarantees one abrupt ambient drop of at least 60% per sequence.
    TunnelTest,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::Train => "train",
            Profile::Test => "test",
            Profile::TunnelTest => "tunnel-test",
        }
    }

    /// Sequence ID base; keeps the ID sets of different profiles disjoint.
    pub fn id_base(&self) -> u64 {
        match self {
            Profile::Train => 0,
            Profile::Test => 100_000,
            Profile::TunnelTest => 200_000,
        }
    }
}

impl core::str::FromStr for Profile {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Profile::Train),
            "test" => Ok(Profile::Test),
            "tunnel-test" => Ok(Profile::TunnelTest),
            other => Err(alloc::format!(
                "unknown profile {other:?} (expected train | test | tunnel-test)"
            )),
        }
    }
}

/// Draws the scene spec for one sequence of a corpus. Sequence identity is
/// `profile.id_base() + index`, so corpora of different profiles never share
/// a sequence even under the same seed.
pub fn scene_spec_for(
    profile: Profile,
    corpus_seed: u64,
    index: u64,
    width: usize,
    height: usize,
    frames: usize,
) -> SceneSpec {
    let id = profile.id_base() + index;
    let mut rng = Rng::derive(corpus_seed, id);

    let lane_count = rng.range_u64(1, 8) as u8;
    let mut lane = rng.range_u64(1, lane_count as u64) as u8;
    let mut schedule = vec![(0usize, lane)];
    let changes = if lane_count < 2 {
        0
    } else {
        rng.range_u64(0, 2.min(frames as u64 / 4))
    };
    let mut frame = 0usize;
    for _ in 0..changes {
        frame += rng.range_u64(2, (frames as u64 / 2).max(3)) as usize;
        if frame >= frames {
            break;
        }
        let up = if lane == 1 {
            true
        } else if lane == lane_count {
            false
        } else {
            rng.chance(0.5)
        };
        lane = if up { lane + 1 } else { lane - 1 };
        schedule.push((frame, lane));
    }

    let base_ambient = rng.range_u64(240, 255) as u8;
    let brightness_profile = match profile {
        Profile::Train | Profile::Test => Vec::new(),
        Profile::TunnelTest => {
            // One tunnel: ambient drops by more than 60% mid-sequence.
            let start = rng.range_u64(5, (frames as u64).saturating_sub(7).max(6)) as usize;
            let len = rng.range_u64(4, 8) as usize;
            let ceiling = (0.38 * base_ambient as f64) as u64;
            let ambient = rng.range_u64(30, ceiling.max(31)) as u8;
            vec![BrightnessInterval { start, end: (start + len).min(frames), ambient }]
        }
    };

    let occlusion_density = match profile {
        Profile::Train | Profile::Test => rng.range_f64(0.0, 0.25),
        Profile::TunnelTest => rng.range_f64(0.0, 0.2),
    };

    SceneSpec {
        seed: rng.next_u64(),
        lane_count,
        frames,
        ego_schedule: schedule,
        base_ambient,
        brightness_profile,
        occlusion_density,
        width,
        height,
    }
}
