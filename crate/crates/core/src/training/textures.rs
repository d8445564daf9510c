//! Procedural training images: gradients, checkers, value noise, color ramps
//! and simple geometric patterns.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ImageRgb;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    LinearGradient,
    RadialGradient,
    Checker,
    ValueNoise,
    Turbulence,
    ColorRamp,
    Stripes,
    Rings,
    Plasma,
    Blobs,
    Marble,
    Tiles,
    Waves,
    Dots,
    Wood,
    Patchwork,
}

impl TextureKind {
    pub const ALL: [TextureKind; 16] = [
        TextureKind::LinearGradient,
        TextureKind::RadialGradient,
        TextureKind::Checker,
        TextureKind::ValueNoise,
        TextureKind::Turbulence,
        TextureKind::ColorRamp,
        TextureKind::Stripes,
        TextureKind::Rings,
        TextureKind::Plasma,
        TextureKind::Blobs,
        TextureKind::Marble,
        TextureKind::Tiles,
        TextureKind::Waves,
        TextureKind::Dots,
        TextureKind::Wood,
        TextureKind::Patchwork,
    ];
}

/// Smoothly interpolated lattice noise with values in `[0, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        Self { cells, lattice }
    }

    /// `u`, `v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let fx = (u * n as f64).clamp(0.0, n as f64 - 1e-9);
        let fy = (v * n as f64).clamp(0.0, n as f64 - 1e-9);
        let (ix, iy) = (fx as usize, fy as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let l = |y: usize, x: usize| self.lattice[y * (n + 1) + x];
        let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
        let bottom = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn fractal(octaves: &[ValueNoise], u: f64, v: f64) -> f64 {
    let (mut sum, mut norm, mut amp) = (0.0, 0.0, 1.0);
    for o in octaves {
        sum += amp * o.at(u, v);
        norm += amp;
        amp *= 0.5;
    }
    sum / norm
}

fn octaves(rng: &mut impl Rng, base: usize, count: usize) -> Vec<ValueNoise> {
    (0..count).map(|i| ValueNoise::new(base << i, rng)).collect()
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Renders one texture; deterministic in `(kind, height, width, seed)`.
pub fn texture<T: Scalar>(kind: TextureKind, height: usize, width: usize, seed: u64) -> ImageRgb<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1, c2) = (random_color(&mut rng), random_color(&mut rng), random_color(&mut rng));
    let angle = rng.gen_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.gen_range(3.0..8.0);
    let noise = octaves(&mut rng, 4, 4);
    let centers: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| (rng.gen(), rng.gen(), rng.gen_range(0.08..0.25), random_color(&mut rng)))
        .collect();
    let tiles: Vec<[f64; 3]> = (0..64).map(|_| random_color(&mut rng)).collect();
    let pixel = |u: f64, v: f64| -> [f64; 3] {
        let along = (u - 0.5) * dx + (v - 0.5) * dy;
        match kind {
            TextureKind::LinearGradient => mix(c0, c1, along + 0.5),
            TextureKind::RadialGradient => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() * 1.4;
                mix(c0, c1, r.min(1.0))
            }
            TextureKind::Checker => {
                let cell = ((u * freq).floor() + (v * freq).floor()) as i64;
                if cell.rem_euclid(2) == 0 {
                    c0
                } else {
                    c1
                }
            }
            TextureKind::ValueNoise => mix(c0, c1, fractal(&noise[..2], u, v)),
            TextureKind::Turbulence => {
                let t = fractal(&noise, u, v);
                mix(mix(c0, c1, t), c2, (2.0 * t - 1.0).abs())
            }
            TextureKind::ColorRamp => {
                let t = (along + 0.5).clamp(0.0, 1.0);
                if t < 0.5 {
                    mix(c0, c1, 2.0 * t)
                } else {
                    mix(c1, c2, 2.0 * t - 1.0)
                }
            }
            TextureKind::Stripes => mix(c0, c1, 0.5 + 0.5 * (TAU * freq * along).sin()),
            TextureKind::Rings => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                mix(c0, c1, 0.5 + 0.5 * (TAU * freq * r).cos())
            }
            TextureKind::Plasma => {
                let t = ((TAU * u * 2.0).sin() + (TAU * v * 3.0).sin() + (TAU * (u + v) * freq * 0.5).sin()) / 6.0 + 0.5;
                mix(mix(c0, c1, t), c2, fractal(&noise[..1], u, v) * 0.5)
            }
            TextureKind::Blobs => {
                let mut col = c0;
                for &(cx, cy, r, c) in &centers {
                    let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    col = mix(col, c, (1.0 - d / r).clamp(0.0, 1.0));
                }
                col
            }
            TextureKind::Marble => {
                let t = 0.5 + 0.5 * (TAU * (freq * along + 2.0 * fractal(&noise, u, v))).sin();
                mix(c0, c1, t)
            }
            TextureKind::Tiles => {
                let (tx, ty) = ((u * 8.0).min(7.999) as usize, (v * 8.0).min(7.999) as usize);
                let (fx, fy) = (u * 8.0 - tx as f64, v * 8.0 - ty as f64);
                let grout = fx < 0.08 || fy < 0.08;
                if grout {
                    mix(c2, [0.1; 3], 0.5)
                } else {
                    tiles[ty * 8 + tx]
                }
            }
            TextureKind::Waves => {
                let t = 0.5 + 0.25 * (TAU * freq * u + 3.0 * (TAU * v).sin()).sin() + 0.25 * (TAU * freq * v).cos();
                mix(c0, c1, t)
            }
            TextureKind::Dots => {
                let (fx, fy) = ((u * freq).fract() - 0.5, (v * freq).fract() - 0.5);
                let inside = fx * fx + fy * fy < 0.09;
                if inside {
                    c1
                } else {
                    mix(c0, c2, v)
                }
            }
            TextureKind::Wood => {
                let r = ((u - 0.3).powi(2) + (v - 0.6).powi(2)).sqrt();
                let t = (r * freq * 2.0 + fractal(&noise[..3], u, v)).fract();
                mix(c0, c1, t)
            }
            TextureKind::Patchwork => {
                let t = fractal(&noise[..1], u, v);
                let idx = ((t * 4.0) as usize).min(3);
                [c0, c1, c2, mix(c0, c2, 0.5)][idx]
            }
        }
    };
    let (hs, ws) = ((height.max(2) - 1) as f64, (width.max(2) - 1) as f64);
    ImageRgb::from_fn(height, width, |y, x, c| T::lit(pixel(x as f64 / ws, y as f64 / hs)[c]))
}

/// The bundled set: one image of every [`TextureKind`], seeded per index.
pub fn bundled_textures<T: Scalar>(height: usize, width: usize, seed: u64) -> Vec<ImageRgb<T>> {
    TextureKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &k)| texture(k, height, width, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_distinct_valid_textures() {
        let set = bundled_textures::<f64>(24, 24, 7);
        assert!(set.len() >= 16);
        for (i, a) in set.iter().enumerate() {
            assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
            for b in &set[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(bundled_textures::<f32>(16, 20, 3), bundled_textures::<f32>(16, 20, 3));
        assert_ne!(bundled_textures::<f32>(16, 16, 3), bundled_textures::<f32>(16, 16, 4));
    }

    #[test]
    fn textures_have_structure() {
        for k in TextureKind::ALL {
            let img = texture::<f64>(k, 32, 32, 11);
            let d = img.tensor().data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
            assert!(var > 1e-5, "{k:?} is flat");
        }
    }
}
