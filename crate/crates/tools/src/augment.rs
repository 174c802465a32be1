//! Training-time augmentations. One transform is drawn per sequence and
//! applied identically to every frame, so the recurrent state always sees a
//! coherent stream; the horizontal flip swaps the label conventions through
//! `mirror`.

use laneid_core::brightness::Image;
use laneid_core::conventions::{mirror, LaneLabel};
use laneid_core::rng::Rng;

use crate::runconfig::AugmentConfig;

const MAX_CROP: usize = 4;
const NOISE_AMPLITUDE: f64 = 8.0;

/// Applies the configured augmentations to a sequence window.
pub fn augment(
    frames: &[Image],
    labels: &[LaneLabel],
    config: &AugmentConfig,
    rng: &mut Rng,
) -> (Vec<Image>, Vec<LaneLabel>) {
    let mut out_frames: Vec<Image> = frames.to_vec();
    let mut out_labels: Vec<LaneLabel> = labels.to_vec();
    if frames.is_empty() {
        return (out_frames, out_labels);
    }
    let (w, h) = (frames[0].width(), frames[0].height());

    if config.flip && rng.chance(0.5) {
        for f in out_frames.iter_mut() {
            *f = f.flipped();
        }
        for l in out_labels.iter_mut() {
            *l = mirror(*l);
        }
    }

    if config.crop {
        let crop = rng.range_u64(0, MAX_CROP as u64) as usize;
        let from_left = rng.chance(0.5);
        if crop > 0 {
            let new_w = w - crop;
            let offset = if from_left { crop } else { 0 };
            for f in out_frames.iter_mut() {
                let mut resized = Image::new(w, h);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let src_x = (x * new_w) / w + offset;
                            resized.set_pixel(c, y, x, f.pixel(c, y, src_x));
                        }
                    }
                }
                *f = resized;
            }
        }
    }

    if config.brightness_jitter {
        let factor = rng.range_f64(0.9, 1.1);
        for f in out_frames.iter_mut() {
            for c in 0..3 {
                for p in f.plane_mut(c).iter_mut() {
                    *p = (*p as f64 * factor).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    if config.noise {
        // One noise field shared by all frames of the window.
        let field: Vec<f64> =
            (0..3 * w * h).map(|_| rng.range_f64(-NOISE_AMPLITUDE, NOISE_AMPLITUDE)).collect();
        for f in out_frames.iter_mut() {
            for c in 0..3 {
                let plane = f.plane_mut(c);
                for (i, p) in plane.iter_mut().enumerate() {
                    *p = (*p as f64 + field[c * w * h + i]).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    (out_frames, out_labels)
}
