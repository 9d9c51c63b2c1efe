//! Seeded synthetic scenes and additive Gaussian noise, for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

enum Shape {
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    /// Signed distance-like value, negative inside, in pixels.
    fn distance(&self, y: f32, x: f32) -> f32 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let r = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
                (r - 1.0) * ry.min(rx)
            }
            Shape::Rect { y0, x0, y1, x1 } => (y0 - y).max(y - y1).max(x0 - x).max(x - x1),
        }
    }
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// A piecewise-smooth scene: a two-color gradient, a few soft-edged shapes and a faint texture.
pub fn scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage(format!("empty scene {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let (top, bottom) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());

    let count = rng.random_range(3..=6);
    let shapes: Vec<(Shape, [f32; 3])> = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Ellipse {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    ry: rng.random_range(0.08..0.3) * h,
                    rx: rng.random_range(0.08..0.3) * w,
                }
            } else {
                let (y0, x0) = (rng.random_range(0.0..0.8) * h, rng.random_range(0.0..0.8) * w);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.1..0.4) * h,
                    x1: x0 + rng.random_range(0.1..0.4) * w,
                }
            };
            (shape, color(&mut rng))
        })
        .collect();
    let freq = rng.random_range(0.1..0.3);
    let amp = rng.random_range(0.0..0.05);

    Image::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = (((fy / h - 0.5) * dy + (fx / w - 0.5) * dx) + 0.5).clamp(0.0, 1.0);
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = top[c] * (1.0 - t) + bottom[c] * t;
        }
        for (shape, col) in &shapes {
            // Antialiased coverage: the edge ramps over about one pixel.
            let a = (0.5 - shape.distance(fy, fx)).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + col[c] * a;
            }
        }
        let tex = amp * (fy * freq).sin() * (fx * freq * 1.3).cos();
        px.map(|v| (v + tex).clamp(0.0, 1.0))
    })
}

/// `clean + N(0, sigma²)` per channel, clamped to `[0, 1]`.
pub fn add_gaussian_noise(clean: &Image, sigma: f32, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig {
            field: "sigma",
            reason: format!("{sigma} must be finite and non-negative"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).expect("sigma validated");
    let data = clean.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::from_clamped(clean.height(), clean.width(), data)
}

/// A clean scene and its noisy observation; the noise stream is derived from `seed`.
pub fn noisy_pair(height: usize, width: usize, sigma: f32, seed: u64) -> Result<(Image, Image)> {
    let clean = scene(height, width, seed)?;
    let noisy = add_gaussian_noise(&clean, sigma, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    Ok((clean, noisy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::compute_psnr;

    #[test]
    fn scenes_are_seeded_and_varied() {
        let a = scene(32, 40, 1).unwrap();
        assert_eq!(a, scene(32, 40, 1).unwrap());
        assert_ne!(a, scene(32, 40, 2).unwrap());
        assert_eq!((a.height(), a.width()), (32, 40));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_level_sets_psnr() {
        let (clean, noisy) = noisy_pair(64, 64, 25.0 / 255.0, 3).unwrap();
        let psnr = compute_psnr(&clean, &noisy).unwrap();
        // 20·log10(255/25) ≈ 20.2 dB before clamping; clamping only raises it.
        assert!((19.5..22.0).contains(&psnr), "{psnr}");
        assert_eq!(add_gaussian_noise(&clean, 0.0, 0).unwrap(), clean);
        assert!(add_gaussian_noise(&clean, -1.0, 0).is_err());
    }
}
