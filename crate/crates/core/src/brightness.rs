//! Streamwise brightness consistency preprocessing.
//!
//! A tracker keeps the running average perceived brightness of a stream.
//! Frames darker than both the tracked average and an optional threshold are
//! rescaled by `alpha = tracked / frame` with per-pixel clamping at 255, so a
//! sudden tunnel-style drop is pulled back toward the brightness regime the
//! rest of the sequence was seen under.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{err_invalid, err_shape};
use crate::{math, Result};

/// Amplification ceiling for near-black frames.
pub const MAX_ALPHA: f64 = 8.0;

/// 8-bit RGB image stored as three channel planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Channel planes in R, G, B order, each `height * width` bytes.
    planes: [Vec<u8>; 3],
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            planes: [vec![0; width * height], vec![0; width * height], vec![0; width * height]],
        }
    }

    pub fn from_planes(width: usize, height: usize, planes: [Vec<u8>; 3]) -> Result<Self> {
        if planes.iter().any(|p| p.len() != width * height) {
            return Err(err_shape!(
                "image",
                "plane sizes {:?} do not match {width}x{height}",
                [planes[0].len(), planes[1].len(), planes[2].len()]
            ));
        }
        Ok(Image { width, height, planes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, channel: usize) -> &[u8] {
        &self.planes[channel]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [u8] {
        &mut self.planes[channel]
    }

    pub fn pixel(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.planes[channel][y * self.width + x]
    }

    pub fn set_pixel(&mut self, channel: usize, y: usize, x: usize, v: u8) {
        self.planes[channel][y * self.width + x] = v;
    }

    /// Horizontal mirror of every channel.
    pub fn flipped(&self) -> Image {
        let mut out = self.clone();
        for plane in out.planes.iter_mut() {
            for row in plane.chunks_mut(self.width) {
                row.reverse();
            }
        }
        out
    }

    /// `[3, H, W]` tensor with intensities normalized to [0, 1].
    pub fn to_tensor(&self) -> crate::Tensor {
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for plane in &self.planes {
            data.extend(plane.iter().map(|&v| v as f64 / 255.0));
        }
        crate::Tensor::new(&[3, self.height, self.width], data).expect("planes sized")
    }
}

/// How the perceived brightness scalar is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BrightnessMode {
    /// Rec.601 luma: `0.299 R + 0.587 G + 0.114 B`.
    #[default]
    Luma,
    /// Plain mean of the three channels.
    Mean,
}

/// Preprocessor configuration for one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BrightnessConfig {
    pub enabled: bool,
    /// Only frames darker than this are adjustment candidates, on top of the
    /// below-average rule. `None` leaves only the below-average rule.
    pub threshold: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub mode: BrightnessMode,
    /// Sliding-window length for the tracked average; `None` keeps the
    /// cumulative mean over the whole stream.
    #[cfg_attr(feature = "serde", serde(default))]
    pub window: Option<usize>,
}

impl BrightnessConfig {
    pub fn disabled() -> Self {
        BrightnessConfig { enabled: false, threshold: None, mode: BrightnessMode::Luma, window: None }
    }

    pub fn with_threshold(threshold: f64) -> Self {
        BrightnessConfig {
            enabled: true,
            threshold: Some(threshold),
            mode: BrightnessMode::Luma,
            window: None,
        }
    }

    pub fn unthresholded() -> Self {
        BrightnessConfig { enabled: true, threshold: None, mode: BrightnessMode::Luma, window: None }
    }
}

/// Running average perceived brightness of one stream.
#[derive(Debug, Clone)]
pub struct BrightnessTracker {
    config: BrightnessConfig,
    sum: f64,
    count: u64,
    /// Recent samples, only kept in windowed mode.
    recent: Vec<f64>,
}

impl BrightnessTracker {
    pub fn new(config: BrightnessConfig) -> Self {
        BrightnessTracker { config, sum: 0.0, count: 0, recent: Vec::new() }
    }

    pub fn config(&self) -> &BrightnessConfig {
        &self.config
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Tracked average, or `None` before the first sample.
    pub fn average(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.sum / self.count as f64)
        }
    }

    /// Records one perceived-brightness sample.
    pub fn update(&mut self, b: f64) -> Result<()> {
        if !(0.0..=255.0).contains(&b) {
            return Err(err_invalid!("tracker", "brightness {b} out of [0, 255]"));
        }
        match self.config.window {
            None => {
                self.sum += b;
                self.count += 1;
            }
            Some(w) => {
                self.recent.push(b);
                if self.recent.len() > w.max(1) {
                    self.recent.remove(0);
                }
                // Recompute to keep the windowed sum exact.
                self.sum = self.recent.iter().sum();
                self.count = self.recent.len() as u64;
            }
        }
        Ok(())
    }
}

/// Mean perceived brightness of an image under the given mode.
pub fn perceived_brightness(img: &Image, mode: BrightnessMode) -> f64 {
    let n = (img.width * img.height) as f64;
    let sums: [f64; 3] = [0, 1, 2].map(|c| img.planes[c].iter().map(|&v| v as f64).sum::<f64>());
    match mode {
        BrightnessMode::Luma => (0.299 * sums[0] + 0.587 * sums[1] + 0.114 * sums[2]) / n,
        BrightnessMode::Mean => (sums[0] + sums[1] + sums[2]) / (3.0 * n),
    }
}

/// Outcome of [`adjust`] for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adjustment {
    /// True when the rescale fired.
    pub adjusted: bool,
    /// Perceived brightness of the original frame.
    pub original_brightness: f64,
    /// Factor applied (1.0 when not adjusted).
    pub alpha: f64,
}

/// Conditionally rescales a frame toward the tracked average brightness.
///
/// The rescale fires iff the tracker is enabled, has at least one sample,
/// the frame is darker than the tracked average, and — when a threshold is
/// configured — darker than the threshold too. `alpha = avg / max(b, 1)`,
/// capped at [`MAX_ALPHA`]; pixels map through `min(255, round(alpha * p))`.
///
/// The tracker is always updated afterwards with the original brightness,
/// so it records the stream as captured, not as corrected.
pub fn adjust(img: &Image, tracker: &mut BrightnessTracker) -> Result<(Image, Adjustment)> {
    let mode = tracker.config.mode;
    let b = perceived_brightness(img, mode);
    let fire = tracker.config.enabled
        && match tracker.average() {
            None => false,
            Some(avg) => b < avg && tracker.config.threshold.map_or(true, |t| b < t),
        };

    let (out, alpha) = if fire {
        let avg = tracker.average().expect("count >= 1 when firing");
        let alpha = (avg / b.max(1.0)).min(MAX_ALPHA);
        let mut out = img.clone();
        for plane in out.planes.iter_mut() {
            for p in plane.iter_mut() {
                *p = math::round(alpha * *p as f64).min(255.0) as u8;
            }
        }
        (out, alpha)
    } else {
        (img.clone(), 1.0)
    };

    tracker.update(b)?;
    Ok((out, Adjustment { adjusted: fire, original_brightness: b, alpha }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn uniform_image(w: usize, h: usize, rgb: [u8; 3]) -> Image {
        let mut img = Image::new(w, h);
        for (c, &v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    #[test]
    fn perceived_brightness_examples() {
        let gray = uniform_image(4, 4, [100, 100, 100]);
        assert!((perceived_brightness(&gray, BrightnessMode::Luma) - 100.0).abs() < 1e-9);
        let red = uniform_image(4, 4, [255, 0, 0]);
        assert!((perceived_brightness(&red, BrightnessMode::Luma) - 76.245).abs() < 1e-9);
        let black = uniform_image(4, 4, [0, 0, 0]);
        assert_eq!(perceived_brightness(&black, BrightnessMode::Luma), 0.0);
        assert!((perceived_brightness(&red, BrightnessMode::Mean) - 85.0).abs() < 1e-9);
    }

    #[test]
    fn tracker_examples() {
        let mut t = BrightnessTracker::new(BrightnessConfig::unthresholded());
        assert_eq!(t.average(), None);
        t.update(120.0).unwrap();
        assert_eq!(t.average(), Some(120.0));
        assert_eq!(t.count(), 1);
        let mut t = BrightnessTracker::new(BrightnessConfig::unthresholded());
        t.update(100.0).unwrap();
        t.update(200.0).unwrap();
        assert_eq!(t.average(), Some(150.0));
        assert!(t.update(300.0).is_err());
    }

    #[test]
    fn tracker_mean_is_order_insensitive() {
        let samples = [13.0, 200.5, 77.25, 0.0, 255.0, 90.125];
        let mean_of = |order: &[f64]| {
            let mut t = BrightnessTracker::new(BrightnessConfig::unthresholded());
            for &s in order {
                t.update(s).unwrap();
            }
            t.average().unwrap()
        };
        let forward = mean_of(&samples);
        let mut reversed = samples;
        reversed.reverse();
        assert!((forward - mean_of(&reversed)).abs() < 1e-9);
    }

    #[test]
    fn windowed_tracker_drops_old_samples() {
        let mut cfg = BrightnessConfig::unthresholded();
        cfg.window = Some(2);
        let mut t = BrightnessTracker::new(cfg);
        for b in [10.0, 20.0, 30.0] {
            t.update(b).unwrap();
        }
        assert_eq!(t.average(), Some(25.0));
    }

    #[test]
    fn adjust_doubles_dark_frame_and_clamps() {
        // Tracked average 130, frame brightness 65 -> alpha = 2. Mean mode
        // makes the target brightness easy to construct exactly.
        let mut cfg = BrightnessConfig::unthresholded();
        cfg.mode = BrightnessMode::Mean;
        let mut tracker = BrightnessTracker::new(cfg);
        tracker.update(130.0).unwrap();
        let mut img = uniform_image(2, 1, [65, 65, 65]);
        img.set_pixel(0, 0, 0, 90);
        img.set_pixel(1, 0, 0, 40); // keeps the six-pixel mean at 65
        let (out, adj) = adjust(&img, &mut tracker).unwrap();
        assert!(adj.adjusted);
        assert!((adj.alpha - 2.0).abs() < 1e-12);
        assert_eq!(out.pixel(0, 0, 0), 180);
        assert_eq!(out.pixel(1, 0, 0), 80);

        // Clamp: a pixel of 200 under alpha ~1.7 saturates at 255.
        let mut tracker = BrightnessTracker::new(cfg);
        tracker.update(200.0).unwrap();
        let mut bright_spot = uniform_image(2, 1, [100, 100, 100]);
        bright_spot.set_pixel(0, 0, 0, 200);
        let (out, adj) = adjust(&bright_spot, &mut tracker).unwrap();
        assert!(adj.adjusted);
        assert_eq!(out.pixel(0, 0, 0), 255);
    }

    #[test]
    fn adjust_skips_bright_frames() {
        let mut tracker = BrightnessTracker::new(BrightnessConfig::unthresholded());
        tracker.update(100.0).unwrap();
        let img = uniform_image(2, 2, [150, 150, 150]);
        let (out, adj) = adjust(&img, &mut tracker).unwrap();
        assert!(!adj.adjusted);
        assert_eq!(out, img);
        // Tracker still recorded the original frame.
        assert_eq!(tracker.average(), Some(125.0));
    }

    #[test]
    fn adjust_respects_threshold_gate() {
        let mut cfg = BrightnessConfig::with_threshold(50.0);
        cfg.mode = BrightnessMode::Mean;
        let mut tracker = BrightnessTracker::new(cfg);
        tracker.update(130.0).unwrap();
        // Darker than average but above the threshold: no adjustment.
        let img = uniform_image(2, 2, [65, 65, 65]);
        let (_, adj) = adjust(&img, &mut tracker).unwrap();
        assert!(!adj.adjusted);
        // Below the threshold too: fires.
        let dark = uniform_image(2, 2, [40, 40, 40]);
        let (_, adj) = adjust(&dark, &mut tracker).unwrap();
        assert!(adj.adjusted);
    }

    #[test]
    fn adjusted_brightness_approaches_average_without_clamping() {
        let mut tracker = BrightnessTracker::new(BrightnessConfig::unthresholded());
        tracker.update(120.0).unwrap();
        let img = uniform_image(8, 8, [60, 60, 60]);
        let (out, adj) = adjust(&img, &mut tracker).unwrap();
        assert!(adj.adjusted);
        let adjusted_b = perceived_brightness(&out, BrightnessMode::Luma);
        assert!((adjusted_b - 120.0).abs() < 0.5, "got {adjusted_b}");
    }

    #[test]
    fn alpha_capped_for_near_black_frames() {
        let mut tracker = BrightnessTracker::new(BrightnessConfig::unthresholded());
        tracker.update(200.0).unwrap();
        let img = uniform_image(2, 2, [1, 1, 1]);
        let (_, adj) = adjust(&img, &mut tracker).unwrap();
        assert!(adj.adjusted);
        assert_eq!(adj.alpha, MAX_ALPHA);
        // Fully black frame: division guard max(b, 1) keeps alpha finite.
        let black = uniform_image(2, 2, [0, 0, 0]);
        let (_, adj) = adjust(&black, &mut tracker).unwrap();
        assert!(adj.alpha.is_finite());
    }

    #[test]
    fn brightening_stream_is_never_modified() {
        let mut tracker = BrightnessTracker::new(BrightnessConfig::unthresholded());
        for step in 0..10 {
            let level = 50 + step * 20;
            let img = uniform_image(4, 4, [level as u8, level as u8, level as u8]);
            let (out, adj) = adjust(&img, &mut tracker).unwrap();
            assert!(!adj.adjusted, "step {step}");
            assert_eq!(out, img);
        }
    }

    proptest! {
        #[test]
        fn output_pixels_stay_in_range(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let mut tracker = BrightnessTracker::new(BrightnessConfig::unthresholded());
            for _ in 0..5 {
                let mut img = Image::new(6, 4);
                for c in 0..3 {
                    for p in img.plane_mut(c).iter_mut() {
                        *p = rng.range_u64(0, 255) as u8;
                    }
                }
                let (out, _) = adjust(&img, &mut tracker).unwrap();
                for c in 0..3 {
                    // u8 representation already guarantees <= 255; check the
                    // adjusted image kept every plane the right size.
                    prop_assert_eq!(out.plane(c).len(), 24);
                }
            }
        }
    }
}
