//! Procedural HDR scenes, for running the pipeline without a radiance-map
//! corpus. Each scene mixes a sky gradient, textured ground and objects,
//! cast shadows and a few small emitters, spanning four to five decades of
//! luminance.

use crate::error::{Error, Result};
use crate::imageio::HdrImage;
use crate::rng::{derive_seed, SeededRng};

/// Smallest side accepted by [`generate_scene`].
pub const MIN_SCENE_SIZE: usize = 16;

/// Smooth value noise on a random lattice, bilinearly interpolated.
struct ValueNoise {
    cells: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut SeededRng) -> Self {
        let grid = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
        Self { cells, grid }
    }

    /// `u`, `v` in `[0, 1]`; result in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let (fx, fy) = (u.clamp(0.0, 1.0) * n as f64, v.clamp(0.0, 1.0) * n as f64);
        let (x0, y0) = ((fx as usize).min(n - 1), (fy as usize).min(n - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let g = |x: usize, y: usize| self.grid[y * (n + 1) + x];
        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
        let bottom = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Fractal(Vec<ValueNoise>);

impl Fractal {
    fn new(octaves: usize, base: usize, rng: &mut SeededRng) -> Self {
        Self((0..octaves).map(|o| ValueNoise::new(base << o, rng)).collect())
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (mut sum, mut norm, mut amp) = (0.0, 0.0, 1.0);
        for n in &self.0 {
            sum += amp * n.at(u, v);
            norm += amp;
            amp *= 0.5;
        }
        sum / norm
    }
}

struct Block {
    x0: f64,
    x1: f64,
    top: f64,
    albedo: [f64; 3],
    /// Lit windows: emissive cells on a grid.
    windows: Option<(usize, usize, f64)>,
}

struct Emitter {
    x: f64,
    y: f64,
    radius: f64,
    power: f64,
    color: [f64; 3],
}

fn color(rng: &mut SeededRng, lo: f64, hi: f64) -> [f64; 3] {
    let base = rng.uniform_in(lo, hi);
    [0; 3].map(|_| base * rng.uniform_in(0.7, 1.3))
}

/// Deterministic scene `index` of the family selected by `seed`.
pub fn generate_scene(seed: u64, index: u64, width: usize, height: usize) -> Result<HdrImage> {
    if width < MIN_SCENE_SIZE || height < MIN_SCENE_SIZE {
        return Err(Error::Input(format!(
            "scene size {width}x{height} is below the {MIN_SCENE_SIZE} pixel minimum"
        )));
    }
    let mut rng = SeededRng::from_seed(derive_seed(seed, index));
    let horizon = rng.uniform_in(0.35, 0.7);
    // Sun or sky brightness against a dim interior-like ambient level sets
    // the dynamic range.
    let sky_level = 10f64.powf(rng.uniform_in(0.0, 1.5));
    let sun_lit = rng.uniform_in(0.3, 3.0);
    let shade = sun_lit * rng.uniform_in(0.01, 0.1);
    let sky_tint = [rng.uniform_in(0.6, 0.9), rng.uniform_in(0.8, 1.0), 1.0];
    let ground_albedo = color(&mut rng, 0.08, 0.4);
    let texture = Fractal::new(4, 4, &mut rng);
    let clouds = Fractal::new(3, 3, &mut rng);

    let blocks: Vec<Block> = (0..1 + rng.below(5))
        .map(|_| {
            let x0 = rng.uniform_in(-0.1, 0.9);
            let w = rng.uniform_in(0.08, 0.35);
            let windows = (rng.uniform() < 0.5).then(|| {
                (
                    2 + rng.below(5),
                    2 + rng.below(8),
                    10f64.powf(rng.uniform_in(0.5, 2.0)),
                )
            });
            Block {
                x0,
                x1: x0 + w,
                top: horizon - rng.uniform_in(0.05, horizon * 0.9),
                albedo: color(&mut rng, 0.05, 0.5),
                windows,
            }
        })
        .collect();
    let emitters: Vec<Emitter> = (0..rng.below(4))
        .map(|_| Emitter {
            x: rng.uniform(),
            y: rng.uniform_in(0.05, 0.95),
            radius: rng.uniform_in(0.005, 0.03),
            power: 10f64.powf(rng.uniform_in(1.5, 3.5)),
            color: [1.0, rng.uniform_in(0.7, 1.0), rng.uniform_in(0.4, 0.9)],
        })
        .collect();
    // Shadows fall to one side of each block.
    let shadow_dir = rng.uniform_in(-0.6, 0.6);

    let mut data = Vec::with_capacity(width * height * 3);
    let scale = width.max(height) as f64;
    for py in 0..height {
        let v = (py as f64 + 0.5) / height as f64;
        for px in 0..width {
            let u = (px as f64 + 0.5) / width as f64;
            let (us, vs) = (u * width as f64 / scale, v * height as f64 / scale);
            let grain = texture.at(us, vs);
            let mut rgb = if v < horizon {
                let t = v / horizon;
                let c = 0.6 + 0.8 * clouds.at(us, vs);
                sky_tint.map(|k| k * sky_level * (1.5 - t) * c)
            } else {
                let in_shadow = blocks.iter().any(|b| {
                    let depth = v - horizon;
                    let shift = shadow_dir * depth * 2.0;
                    u >= b.x0 + shift && u <= b.x1 + shift && depth < (horizon - b.top) * 1.5
                });
                let light = if in_shadow { shade } else { sun_lit };
                ground_albedo.map(|a| a * light * (0.5 + grain))
            };
            // Front-most block wins; later blocks are nearer.
            for b in blocks.iter().rev() {
                if u >= b.x0 && u <= b.x1 && v >= b.top && v <= horizon + 0.02 {
                    let facade = b.albedo.map(|a| a * shade * 2.0 * (0.6 + 0.8 * grain));
                    rgb = facade;
                    if let Some((cols, rows, glow)) = b.windows {
                        let fx = (u - b.x0) / (b.x1 - b.x0) * cols as f64;
                        let fy = (v - b.top) / (horizon - b.top).max(1e-3) * rows as f64;
                        if fx.fract() > 0.3 && fx.fract() < 0.7 && fy.fract() > 0.3 && fy.fract() < 0.7 {
                            rgb = [glow, glow * 0.85, glow * 0.6].map(|g| g * shade);
                        }
                    }
                    break;
                }
            }
            for e in &emitters {
                let d2 = ((u - e.x) * width as f64 / scale).powi(2) + ((v - e.y) * height as f64 / scale).powi(2);
                let f = e.power * (-d2 / (2.0 * e.radius * e.radius)).exp();
                for c in 0..3 {
                    rgb[c] += f * e.color[c];
                }
            }
            data.extend(rgb.map(|c| c.max(1e-4) as f32));
        }
    }
    HdrImage::new(width, height, data)
}

/// `count` scenes named `scene_0000`, `scene_0001`, ...
pub fn generate_corpus(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<(String, HdrImage)>> {
    let job = |i: usize| generate_scene(seed, i as u64, width, height).map(|img| (format!("scene_{i:04}"), img));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(job).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        let a = generate_scene(1, 0, 48, 32).unwrap();
        assert_eq!(a, generate_scene(1, 0, 48, 32).unwrap());
        assert_ne!(a, generate_scene(1, 1, 48, 32).unwrap());
        assert_ne!(a, generate_scene(2, 0, 48, 32).unwrap());
    }

    #[test]
    fn scenes_have_high_dynamic_range() {
        for i in 0..8 {
            let img = generate_scene(3, i, 96, 64).unwrap();
            let lum = img.as_image().luminance_plane();
            let lo = lum.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = lum.iter().copied().fold(0.0, f32::max);
            assert!(lo > 0.0 && hi.is_finite());
            assert!(hi / lo > 100.0, "scene {i}: {lo} .. {hi}");
        }
    }

    #[test]
    fn tiny_scenes_are_rejected() {
        assert!(matches!(generate_scene(0, 0, 8, 64), Err(Error::Input(_))));
    }

    #[test]
    fn corpus_names_are_ordered() {
        let c = generate_corpus(0, 3, 16, 16).unwrap();
        let names: Vec<&str> = c.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["scene_0000", "scene_0001", "scene_0002"]);
    }
}
