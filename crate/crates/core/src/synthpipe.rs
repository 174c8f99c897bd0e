//! Training-pair synthesis from HDR radiance maps.
//!
//! Every pair is driven by one seeded ChaCha8 stream. Draws are consumed in
//! a fixed order: patch fraction `u`, crop corner x, crop corner y,
//! horizontal flip, vertical flip, exposure offset `v`, then two uniforms
//! each for `eta` and `gamma` (Box-Muller, cosine branch). Changing this
//! order changes every dataset, so it is part of the file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::rng::SeededRng as SynthRng;
use crate::rng::derive_seed;
use crate::fusion::exposure_fuse;
use crate::imageio::{
    geometric_mean_luminance, luminance, quantize, resize_hdr, write_png, HdrImage, ImageF,
    LdrImage,
};

pub const TRAIN_PATCH_SIZE: usize = 256;
pub const EVAL_PATCH_SIZE: usize = 512;

/// Target log-average luminance of a normally exposed image.
pub const KEY_VALUE: f64 = 0.18;
pub const PATCH_FRACTION: (f64, f64) = (0.2, 0.6);
pub const EXPOSURE_OFFSET: (f64, f64) = (-4.0, 0.0);
pub const ETA_MEAN: f64 = 0.6;
pub const GAMMA_MEAN: f64 = 0.9;
/// Shared variance of the `eta` and `gamma` normals.
pub const CAMERA_VARIANCE: f64 = 0.1;
pub const ETA_MIN: f64 = 0.0;
pub const GAMMA_MIN: f64 = 0.1;
/// Exposure offsets of the three renderings fused into a target.
pub const TARGET_OFFSETS: [f64; 3] = [-2.0, 0.0, 2.0];

/// Per-sample seed derived from a master seed and the sample's index.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    derive_seed(master, index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDraw {
    pub crop: CropRect,
    pub flip_h: bool,
    pub flip_v: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureParams {
    pub v: f64,
    pub eta: f64,
    pub gamma: f64,
    pub delta_t: f64,
}

impl ExposureParams {
    /// Applies the validity clamps to raw draws and derives the shutter
    /// speed for log-average luminance `g`.
    pub fn from_draws(v: f64, eta: f64, gamma: f64, g: f64) -> Self {
        Self {
            v,
            eta: eta.max(ETA_MIN),
            gamma: gamma.max(GAMMA_MIN),
            delta_t: shutter_speed(v, g),
        }
    }
}

/// `0.18 * 2^v / g`.
pub fn shutter_speed(v: f64, g: f64) -> f64 {
    KEY_VALUE * v.exp2() / g
}

/// Crop rectangle and flips, consuming the first five draws of a sample.
pub fn draw_patch(width: usize, height: usize, rng: &mut SynthRng) -> Result<PatchDraw> {
    let short = width.min(height);
    let u = rng.uniform_in(PATCH_FRACTION.0, PATCH_FRACTION.1);
    let size = ((u * short as f64).round() as usize).min(short);
    if size < 1 {
        return Err(Error::Input(format!(
            "{width}x{height} image is too small to crop a patch from"
        )));
    }
    let corner = |rng: &mut SynthRng, extent: usize| {
        let slots = extent - size + 1;
        ((rng.uniform() * slots as f64) as usize).min(slots - 1)
    };
    let x = corner(rng, width);
    let y = corner(rng, height);
    let flip_h = rng.uniform() < 0.5;
    let flip_v = rng.uniform() < 0.5;
    Ok(PatchDraw {
        crop: CropRect { x, y, size },
        flip_h,
        flip_v,
    })
}

/// Deterministic crop, resize and flip for a recorded draw.
pub fn extract_patch(img: &HdrImage, draw: &PatchDraw, out_size: usize) -> HdrImage {
    let CropRect { x, y, size } = draw.crop;
    let cropped = HdrImage::from_image(img.as_image().crop(x, y, size, size))
        .expect("crop of a valid HDR image is valid");
    let mut patch = resize_hdr(&cropped, out_size, out_size).into_image();
    if draw.flip_h {
        patch = patch.flip_horizontal();
    }
    if draw.flip_v {
        patch = patch.flip_vertical();
    }
    HdrImage::from_image(patch).expect("resampled HDR stays valid")
}

/// Random square crop of `img`, resized to `out_size` and randomly flipped.
pub fn sample_patch(img: &HdrImage, out_size: usize, rng: &mut SynthRng) -> Result<(HdrImage, PatchDraw)> {
    let draw = draw_patch(img.width(), img.height(), rng)?;
    Ok((extract_patch(img, &draw, out_size), draw))
}

pub fn sample_exposure_params(g: f64, rng: &mut SynthRng) -> Result<ExposureParams> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::Input(format!("log-average luminance must be positive, got {g}")));
    }
    let v = rng.uniform_in(EXPOSURE_OFFSET.0, EXPOSURE_OFFSET.1);
    let std = CAMERA_VARIANCE.sqrt();
    let eta = rng.normal(ETA_MEAN, std);
    let gamma = rng.normal(GAMMA_MEAN, std);
    Ok(ExposureParams::from_draws(v, eta, gamma, g))
}

pub fn apply_exposure(patch: &HdrImage, dt: f64) -> HdrImage {
    patch.scaled(dt as f32)
}

/// Virtual camera response `min((1 + eta) L^gamma / (L^gamma + eta), 1)`,
/// with the response at `L = 0` defined as 0.
pub fn camera_response(l: f64, eta: f64, gamma: f64) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    let t = l.powf(gamma);
    ((1.0 + eta) * t / (t + eta)).min(1.0)
}

/// Applies the camera response to luminance and rescales RGB so channel
/// ratios are preserved, then clamps and quantizes.
pub fn virtual_camera(exposure: &HdrImage, eta: f64, gamma: f64) -> LdrImage {
    let img = exposure.as_image();
    let mut data = Vec::with_capacity(img.data.len());
    for p in img.data.chunks_exact(3) {
        let l = luminance([p[0], p[1], p[2]]) as f64;
        let ratio = if l > 0.0 { camera_response(l, eta, gamma) / l } else { 0.0 };
        data.extend(p.iter().map(|&c| quantize((c as f64 * ratio) as f32)));
    }
    LdrImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// The three clamped exposures that are fused into a target.
pub fn target_exposures(patch: &HdrImage, g: f64) -> Vec<ImageF> {
    TARGET_OFFSETS
        .iter()
        .map(|&u| {
            let dt = shutter_speed(u, g) as f32;
            patch.as_image().map(|v| (v * dt).clamp(0.0, 1.0))
        })
        .collect()
}

pub fn make_target(patch: &HdrImage, g: f64) -> Result<LdrImage> {
    if !(g > 0.0) {
        return Err(Error::Input(format!("log-average luminance must be positive, got {g}")));
    }
    let fused = exposure_fuse(&target_exposures(patch, g))?;
    Ok(LdrImage::from_float(&fused))
}

/// Everything needed to regenerate a pair from its source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub crop: CropRect,
    pub flip_h: bool,
    pub flip_v: bool,
    pub v: f64,
    pub eta: f64,
    pub gamma: f64,
    pub g: f64,
    pub delta_t: f64,
    pub seed: u64,
    pub size: usize,
}

impl Provenance {
    pub fn patch_draw(&self) -> PatchDraw {
        PatchDraw {
            crop: self.crop,
            flip_h: self.flip_h,
            flip_v: self.flip_v,
        }
    }

    pub fn exposure(&self) -> ExposureParams {
        ExposureParams {
            v: self.v,
            eta: self.eta,
            gamma: self.gamma,
            delta_t: self.delta_t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: LdrImage,
    pub target: LdrImage,
    pub provenance: Provenance,
}

/// A synthesized dark input together with the radiance patch it came from.
#[derive(Clone, Debug)]
pub struct SynthInput {
    pub patch: HdrImage,
    pub input: LdrImage,
    pub provenance: Provenance,
}

/// Crop, exposure and virtual-camera stages only (no target); used for
/// evaluation inputs.
pub fn synthesize_input(img: &HdrImage, source: &str, seed: u64, size: usize) -> Result<SynthInput> {
    let mut rng = SynthRng::from_seed(seed);
    let (patch, draw) = sample_patch(img, size, &mut rng)?;
    let g = geometric_mean_luminance(&patch);
    let params = sample_exposure_params(g, &mut rng)?;
    let input = virtual_camera(&apply_exposure(&patch, params.delta_t), params.eta, params.gamma);
    let provenance = Provenance {
        source: source.to_string(),
        crop: draw.crop,
        flip_h: draw.flip_h,
        flip_v: draw.flip_v,
        v: params.v,
        eta: params.eta,
        gamma: params.gamma,
        g,
        delta_t: params.delta_t,
        seed,
        size,
    };
    Ok(SynthInput {
        patch,
        input,
        provenance,
    })
}

pub fn generate_pair(img: &HdrImage, source: &str, seed: u64, size: usize) -> Result<SamplePair> {
    let SynthInput {
        patch,
        input,
        provenance,
    } = synthesize_input(img, source, seed, size)?;
    let target = make_target(&patch, provenance.g)?;
    Ok(SamplePair {
        input,
        target,
        provenance,
    })
}

/// Rebuilds a pair from recorded crop, flips and camera parameters without
/// touching the random stream.
pub fn replay(img: &HdrImage, provenance: &Provenance) -> Result<SamplePair> {
    let patch = extract_patch(img, &provenance.patch_draw(), provenance.size);
    let g = geometric_mean_luminance(&patch);
    let params = provenance.exposure();
    let input = virtual_camera(&apply_exposure(&patch, params.delta_t), params.eta, params.gamma);
    let target = make_target(&patch, g)?;
    Ok(SamplePair {
        input,
        target,
        provenance: Provenance {
            g,
            ..provenance.clone()
        },
    })
}

/// Pair `i` comes from corpus image `i % corpus.len()` with seed
/// `sample_seed(master, i)`.
pub fn generate_dataset(
    corpus: &[(String, HdrImage)],
    master_seed: u64,
    count: usize,
    size: usize,
) -> Result<Vec<SamplePair>> {
    if corpus.is_empty() {
        return Err(Error::Input("empty HDR corpus".into()));
    }
    let job = |i: usize| {
        let (name, img) = &corpus[i % corpus.len()];
        generate_pair(img, name, sample_seed(master_seed, i as u64), size)
    };
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

/// Writes `<id>_x.png`, `<id>_y.png` and the `<id>.json` provenance sidecar.
pub fn write_pair(dir: &Path, id: &str, pair: &SamplePair) -> Result<()> {
    std::fs::write(dir.join(format!("{id}_x.png")), write_png(&pair.input)?)?;
    std::fs::write(dir.join(format!("{id}_y.png")), write_png(&pair.target)?)?;
    let json = serde_json::to_string_pretty(&pair.provenance)?;
    std::fs::write(dir.join(format!("{id}.json")), json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact value of the camera response at L = 0.18, eta = 0.6,
    /// gamma = 0.9, evaluated with 40-digit arithmetic on the f64 inputs.
    const RESPONSE_AT_KEY: f64 = 0.420_161_723_382_854_146_07;

    fn textured(w: usize, h: usize) -> HdrImage {
        let data = (0..w * h)
            .flat_map(|i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                let base = 0.05 + (x * 0.37).sin().abs() * 4.0 + (y * 0.11).cos().abs() * 20.0;
                [base, base * 0.8, base * 1.1]
            })
            .collect();
        HdrImage::new(w, h, data).unwrap()
    }

    #[test]
    fn patch_size_follows_short_side() {
        // u = 0.2 + 0.4 * U, so a draw of U = 0 gives N = 0.2 * short side.
        let draw_with = |fraction_draw: f64| {
            let u = PATCH_FRACTION.0 + (PATCH_FRACTION.1 - PATCH_FRACTION.0) * fraction_draw;
            (u * 1000.0).round() as usize
        };
        assert_eq!(draw_with(0.0), 200);
        let img = textured(1400, 1000);
        let mut rng = SynthRng::from_seed(5);
        let draw = draw_patch(img.width(), img.height(), &mut rng).unwrap();
        assert!((200..=600).contains(&draw.crop.size));
        assert!(draw.crop.x + draw.crop.size <= 1400 && draw.crop.y + draw.crop.size <= 1000);
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = HdrImage::new(40, 30, vec![2.5; 40 * 30 * 3]).unwrap();
        let (patch, _) = sample_patch(&img, 64, &mut SynthRng::from_seed(9)).unwrap();
        assert_eq!(patch.width(), 64);
        assert!(patch.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn same_seed_same_patch() {
        let img = textured(90, 70);
        let a = sample_patch(&img, 32, &mut SynthRng::from_seed(3)).unwrap();
        let b = sample_patch(&img, 32, &mut SynthRng::from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = HdrImage::new(1, 1, vec![1.0; 3]).unwrap();
        let mut rng = SynthRng::from_seed(0);
        // u * 1 rounds to 0 for every u < 0.5; try until a draw is below it.
        let errs = (0..8).filter(|_| sample_patch(&img, 8, &mut rng).is_err()).count();
        assert!(errs > 0);
    }

    #[test]
    fn shutter_speed_examples() {
        assert_eq!(shutter_speed(0.0, 0.18), 1.0);
        assert_eq!(shutter_speed(-4.0, 0.18), 1.0 / 16.0);
        let p = ExposureParams::from_draws(-1.0, 0.7, -0.05, 0.18);
        assert_eq!(p.gamma, GAMMA_MIN);
        assert_eq!(ExposureParams::from_draws(-1.0, -0.2, 1.0, 0.18).eta, 0.0);
    }

    #[test]
    fn exposure_params_reject_nonpositive_g() {
        let mut rng = SynthRng::from_seed(1);
        assert!(sample_exposure_params(0.0, &mut rng).is_err());
        assert!(sample_exposure_params(-1.0, &mut rng).is_err());
    }

    #[test]
    fn exposure_draws_are_in_range() {
        let mut rng = SynthRng::from_seed(11);
        for _ in 0..500 {
            let p = sample_exposure_params(0.5, &mut rng).unwrap();
            assert!((-4.0..=0.0).contains(&p.v));
            assert!(p.eta >= 0.0 && p.gamma >= GAMMA_MIN);
            assert_eq!(p.delta_t, KEY_VALUE * p.v.exp2() / 0.5);
        }
    }

    #[test]
    fn normal_draws_have_requested_moments() {
        let mut rng = SynthRng::from_seed(2);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal(0.6, 0.1f64.sqrt())).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 0.01, "{mean}");
        assert!((var - 0.1).abs() < 0.005, "{var}");
    }

    #[test]
    fn apply_exposure_scales() {
        let img = textured(8, 8);
        assert_eq!(apply_exposure(&img, 1.0), img);
        let doubled = apply_exposure(&img, 2.0);
        assert!(doubled.data().iter().zip(img.data()).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn exposure_hits_key_value() {
        let img = textured(64, 48);
        let g = geometric_mean_luminance(&img);
        for v in [-4.0, -2.5, -0.3, 0.0] {
            let exposed = apply_exposure(&img, shutter_speed(v, g));
            let ge = geometric_mean_luminance(&exposed);
            assert!((ge / (KEY_VALUE * f64::exp2(v)) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn camera_response_examples() {
        assert_eq!(camera_response(1.0, 0.6, 0.9), 1.0);
        assert_eq!(camera_response(0.0, 0.6, 0.9), 0.0);
        assert!((camera_response(0.18, 0.6, 0.9) - RESPONSE_AT_KEY).abs() < 1e-12);
    }

    #[test]
    fn virtual_camera_examples() {
        let gray = |l: f32| HdrImage::new(1, 1, vec![l; 3]).unwrap();
        for (eta, gamma) in [(0.6, 0.9), (0.1, 2.0), (1.5, 0.3)] {
            assert_eq!(virtual_camera(&gray(1.0), eta, gamma).data, vec![255; 3]);
            assert_eq!(virtual_camera(&gray(0.0), eta, gamma).data, vec![0; 3]);
        }
        assert_eq!(virtual_camera(&gray(0.18), 0.6, 0.9).data, vec![107; 3]);
    }

    #[test]
    fn target_of_constant_patch_is_constant() {
        let patch = HdrImage::new(32, 32, vec![0.3; 32 * 32 * 3]).unwrap();
        let g = geometric_mean_luminance(&patch);
        let y = make_target(&patch, g).unwrap();
        assert!(y.data.iter().all(|&c| c == y.data[0]));
        assert_eq!(make_target(&patch, g).unwrap(), y);
        assert!(make_target(&patch, 0.0).is_err());
    }

    #[test]
    fn pair_generation_is_reproducible() {
        let img = textured(120, 90);
        let a = generate_pair(&img, "scene", 42, 32).unwrap();
        let b = generate_pair(&img, "scene", 42, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.input.width, a.input.height), (32, 32));
        assert_eq!((a.target.width, a.target.height), (32, 32));
        assert_eq!(replay(&img, &a.provenance).unwrap(), a);
        assert_ne!(generate_pair(&img, "scene", 43, 32).unwrap(), a);
    }

    #[test]
    fn full_size_pairs_are_256() {
        let img = textured(300, 260);
        let pair = generate_pair(&img, "s", 1, TRAIN_PATCH_SIZE).unwrap();
        assert_eq!((pair.input.width, pair.input.height), (256, 256));
        assert_eq!((pair.target.width, pair.target.height), (256, 256));
    }

    #[test]
    fn dataset_cycles_through_corpus() {
        let corpus = vec![("a".to_string(), textured(50, 50)), ("b".to_string(), textured(60, 40))];
        let pairs = generate_dataset(&corpus, 7, 5, 16).unwrap();
        let sources: Vec<&str> = pairs.iter().map(|p| p.provenance.source.as_str()).collect();
        assert_eq!(sources, ["a", "b", "a", "b", "a"]);
        assert_eq!(pairs, generate_dataset(&corpus, 7, 5, 16).unwrap());
        assert!(generate_dataset(&[], 7, 5, 16).is_err());
    }

    #[test]
    fn sidecar_keys_match_provenance_fields() {
        let img = textured(50, 50);
        let pair = generate_pair(&img, "dir/scene.hdr", 3, 16).unwrap();
        let json: serde_json::Value = serde_json::to_value(&pair.provenance).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["crop", "delta_t", "eta", "flip_h", "flip_v", "g", "gamma", "seed", "size", "source", "v"]
        );
    }

    proptest! {
        #[test]
        fn camera_response_is_monotone_and_bounded(seed in any::<u64>()) {
            let mut rng = SynthRng::from_seed(seed);
            let p = sample_exposure_params(1.0, &mut rng).unwrap();
            let mut prev = 0.0;
            for i in 0..400 {
                let l = 1e-4 * 1.04f64.powi(i);
                let f = camera_response(l, p.eta, p.gamma);
                prop_assert!(f >= prev && (0.0..=1.0).contains(&f));
                prev = f;
            }
        }

        #[test]
        fn achromatic_stays_achromatic(l in 0.0f32..4.0, eta in 0.0f64..2.0, gamma in 0.1f64..2.0) {
            let img = HdrImage::new(1, 1, vec![l; 3]).unwrap();
            let out = virtual_camera(&img, eta, gamma);
            prop_assert!(out.data[0] == out.data[1] && out.data[1] == out.data[2]);
        }
    }
}
