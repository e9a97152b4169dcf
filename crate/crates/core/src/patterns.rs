//! Procedural test images: smooth sinusoid mixtures, hard-edged shapes and
//! soft synthetic scenes usable as synthesis sources.

use std::f64::consts::TAU;

use rand::Rng;

use crate::image_core::ImageBuffer;

#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn random_waves(rng: &mut impl Rng, count: usize, min_period: f64, max_period: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let period = rng.random_range(min_period..max_period);
            let angle = rng.random_range(0.0..TAU);
            Wave {
                fx: angle.cos() / period,
                fy: angle.sin() / period,
                phase: rng.random_range(0.0..TAU),
                amp: rng.random_range(0.3..1.0),
            }
        })
        .collect()
}

fn eval_waves(waves: &[Wave], x: f64, y: f64) -> f64 {
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    let v: f64 = waves
        .iter()
        .map(|w| w.amp * (TAU * (w.fx * x + w.fy * y) + w.phase).sin())
        .sum();
    0.5 + 0.4 * v / total
}

/// Sum of `1..=5` random low-frequency sinusoids per channel, in
/// `[0.1, 0.9]`. Periods range from a quarter to the full image width.
pub fn smooth_pattern(width: usize, height: usize, channels: usize, rng: &mut impl Rng) -> ImageBuffer {
    let w = width as f64;
    let waves: Vec<Vec<Wave>> = (0..channels)
        .map(|_| {
            let n = rng.random_range(1..=5);
            random_waves(rng, n, 0.25 * w, w)
        })
        .collect();
    ImageBuffer::from_fn(width, height, channels, |x, y, c| {
        eval_waves(&waves[c], x as f64, y as f64)
    })
}

/// Random axis-aligned rectangles with hard edges over a mid-gray background.
pub fn hard_edge_pattern(width: usize, height: usize, rng: &mut impl Rng) -> ImageBuffer {
    let mut img = ImageBuffer::filled(width, height, 1, 0.5);
    for _ in 0..6 {
        let x0 = rng.random_range(0..width);
        let y0 = rng.random_range(0..height);
        let x1 = (x0 + rng.random_range(width / 8..width / 2)).min(width);
        let y1 = (y0 + rng.random_range(height / 8..height / 2)).min(height);
        let value = rng.random_range(0.0..1.0);
        for y in y0..y1 {
            for x in x0..x1 {
                img.set(x, y, 0, value);
            }
        }
    }
    img
}

/// Soft synthetic "scene": smooth colour gradients, sinusoidal texture and
/// Gaussian blobs. Feature sizes scale with the image so the content is
/// meaningful at every pyramid level.
pub fn scene_pattern(width: usize, height: usize, rng: &mut impl Rng) -> ImageBuffer {
    let w = width as f64;
    let waves: Vec<Vec<Wave>> = (0..3).map(|_| random_waves(rng, 4, 0.08 * w, 0.5 * w)).collect();
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..8)
        .map(|_| {
            (
                rng.random_range(0.0..w),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.03 * w..0.12 * w),
                [
                    rng.random_range(-0.35..0.35),
                    rng.random_range(-0.35..0.35),
                    rng.random_range(-0.35..0.35),
                ],
            )
        })
        .collect();
    ImageBuffer::from_fn(width, height, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.3 + 0.4 * eval_waves(&waves[c], xf, yf);
        for (bx, by, s, col) in &blobs {
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            v += col[c] * (-d2 / (2.0 * s * s)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Piecewise-constant label map matching a grid of `cells x cells` blocks.
pub fn block_labels(width: usize, height: usize, cells: usize, rng: &mut impl Rng) -> crate::LabelMap {
    let classes: Vec<u32> = (0..cells * cells).map(|_| rng.random_range(0..20)).collect();
    let data = (0..height)
        .flat_map(|y| {
            let classes = &classes;
            (0..width).map(move |x| classes[(y * cells / height) * cells + x * cells / width])
        })
        .collect();
    crate::LabelMap::from_vec(width, height, data, crate::image_core::DEFAULT_IGNORE_LABEL)
        .expect("dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patterns_are_in_range_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let p = smooth_pattern(32, 16, 3, &mut a);
        assert_eq!(p, smooth_pattern(32, 16, 3, &mut b));
        assert!(p.data().iter().all(|&v| (0.1..=0.9).contains(&v)));
        let s = scene_pattern(40, 40, &mut a);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let h = hard_edge_pattern(20, 20, &mut a);
        assert_eq!(h.channels(), 1);
        let l = block_labels(20, 10, 4, &mut a);
        assert!(l.data().iter().all(|&v| v < 20));
    }
}
