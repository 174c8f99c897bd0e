//! Tone-mapped image quality index (Yeganeh and Wang, 2013).
//!
//! Follows the authors' MATLAB release: luminance is the Y channel of
//! linear-RGB to XYZ, the HDR luminance is stretched to `[0, 2^32 - 1]`, the
//! LDR luminance stays on the 0..255 code scale.

use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal};

use crate::imageio::{luminance, resize_bilinear, HdrImage, LdrImage};

// Constants of the reference implementation.
pub const Q_WEIGHT: f64 = 0.8012;
pub const S_EXPONENT: f64 = 0.3046;
pub const N_EXPONENT: f64 = 0.7088;
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW_SIZE: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01;
const C2: f64 = 10.0;
/// Highest spatial frequency probed, halved before the first scale.
const BASE_FREQUENCY: f64 = 32.0;
// Naturalness models: beta fit of mean block contrast, Gaussian fit of
// mean brightness, both from the reference natural-image statistics.
const CONTRAST_BETA: (f64, f64) = (4.4, 10.1);
const CONTRAST_DIVISOR: f64 = 64.29;
const BRIGHTNESS_MEAN: f64 = 115.94;
const BRIGHTNESS_STD: f64 = 27.99;
const CONTRAST_BLOCK: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TmqiScore {
    pub q: f64,
    pub s: f64,
    pub n: f64,
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

/// Combines the two components.
pub fn combine(s: f64, n: f64) -> f64 {
    Q_WEIGHT * s.powf(S_EXPONENT) + (1.0 - Q_WEIGHT) * n.powf(N_EXPONENT)
}

/// Scores `test` against `reference`. A test image of different size is
/// bilinearly resized to the reference dimensions first.
pub fn tmqi(reference: &HdrImage, test: &LdrImage) -> TmqiScore {
    let (w, h) = (reference.width(), reference.height());
    let test_img = test.to_float();
    let test_img = if (test.width, test.height) == (w, h) {
        test_img
    } else {
        resize_bilinear(&test_img, w, h)
    };
    let hdr = hdr_luminance(reference);
    let ldr = Plane {
        w,
        h,
        v: test_img
            .data
            .chunks_exact(3)
            .map(|p| luminance([p[0], p[1], p[2]]) as f64 * 255.0)
            .collect(),
    };
    let s = structural_fidelity(hdr, ldr.clone()).clamp(0.0, 1.0);
    let n = statistical_naturalness(&ldr).clamp(0.0, 1.0);
    TmqiScore {
        q: combine(s, n).clamp(0.0, 1.0),
        s,
        n,
    }
}

fn hdr_luminance(img: &HdrImage) -> Plane {
    let v: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let [r, g, b] = [p[0] as f64, p[1] as f64, p[2] as f64];
            0.2126 * r + 0.7152 * g + 0.0722 * b
        })
        .collect();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    // A constant reference collapses to zero; the stabilizing constants then
    // keep the structural term finite.
    let factor = if hi > lo { ((u32::MAX as f64) / (hi - lo)).round() } else { 0.0 };
    Plane {
        w: img.width(),
        h: img.height(),
        v: v.iter().map(|&x| factor * (x - lo)).collect(),
    }
}

fn gaussian_taps() -> [f64; WINDOW_SIZE] {
    let mut t = [0.0; WINDOW_SIZE];
    let c = (WINDOW_SIZE / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = t.iter().sum();
    t.map(|v| v / sum)
}

/// Separable 'valid' correlation with the normalized Gaussian window.
fn filter_valid(p: &Plane, taps: &[f64; WINDOW_SIZE]) -> Plane {
    let (ow, oh) = (p.w + 1 - WINDOW_SIZE, p.h + 1 - WINDOW_SIZE);
    let mut rows = vec![0.0; ow * p.h];
    for y in 0..p.h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * p.at(x + k, y)).sum();
        }
    }
    let mut v = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            v[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v }
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    }
}

/// Mean of the local structural similarity map at one scale.
fn local_structure(hdr: &Plane, ldr: &Plane, frequency: f64) -> f64 {
    let taps = gaussian_taps();
    let mu1 = filter_valid(hdr, &taps);
    let mu2 = filter_valid(ldr, &taps);
    let e11 = filter_valid(&product(hdr, hdr), &taps);
    let e22 = filter_valid(&product(ldr, ldr), &taps);
    let e12 = filter_valid(&product(hdr, ldr), &taps);

    // Contrast sensitivity at this frequency sets the threshold of the
    // psychometric mapping of local standard deviation.
    let csf = 100.0 * 2.6 * (0.0192 + 0.114 * frequency) * (-(0.114 * frequency).powf(1.1)).exp();
    let threshold = 128.0 / (1.4 * csf);
    let psychometric = Normal::new(threshold, threshold / 3.0).expect("positive spread");

    let mut sum = 0.0;
    for i in 0..mu1.v.len() {
        let (m1, m2) = (mu1.v[i], mu2.v[i]);
        let s1 = (e11.v[i] - m1 * m1).max(0.0).sqrt();
        let s2 = (e22.v[i] - m2 * m2).max(0.0).sqrt();
        let s12 = e12.v[i] - m1 * m2;
        let p1 = psychometric.cdf(s1);
        let p2 = psychometric.cdf(s2);
        sum += ((2.0 * p1 * p2 + C1) / (p1 * p1 + p2 * p2 + C1)) * ((s12 + C2) / (s1 * s2 + C2));
    }
    sum / mu1.v.len() as f64
}

/// 2x2 box filter with edge replication, keeping every other sample.
fn downsample(p: &Plane) -> Plane {
    let (w, h) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (2 * y, (2 * y + 1).min(p.h - 1));
        for x in 0..w {
            let (x0, x1) = (2 * x, (2 * x + 1).min(p.w - 1));
            v.push(0.25 * (p.at(x0, y0) + p.at(x1, y0) + p.at(x0, y1) + p.at(x1, y1)));
        }
    }
    Plane { w, h, v }
}

/// Weighted geometric mean of per-scale structure. Scales smaller than the
/// window are dropped and the remaining weights renormalized.
fn structural_fidelity(mut hdr: Plane, mut ldr: Plane) -> f64 {
    let mut frequency = BASE_FREQUENCY;
    let (mut log_sum, mut weight_sum) = (0.0, 0.0);
    for (level, &weight) in SCALE_WEIGHTS.iter().enumerate() {
        frequency /= 2.0;
        if hdr.w < WINDOW_SIZE || hdr.h < WINDOW_SIZE {
            break;
        }
        let s = local_structure(&hdr, &ldr, frequency).max(0.0);
        if s == 0.0 {
            return 0.0;
        }
        log_sum += weight * s.ln();
        weight_sum += weight;
        if level + 1 < SCALE_WEIGHTS.len() {
            hdr = downsample(&hdr);
            ldr = downsample(&ldr);
        }
    }
    if weight_sum == 0.0 {
        // Too small for a single window: no structural evidence either way.
        return 1.0;
    }
    (log_sum / weight_sum).exp()
}

/// Mean brightness and mean 11x11 block contrast scored by their fitted
/// natural-image densities, each normalized by its mode.
fn statistical_naturalness(ldr: &Plane) -> f64 {
    let mean = ldr.v.iter().sum::<f64>() / ldr.v.len() as f64;
    // Partial blocks are zero padded and each block's deviation counts once
    // per real pixel, as the reference block processing does.
    let b = CONTRAST_BLOCK;
    let mut weighted = 0.0;
    for by in (0..ldr.h).step_by(b) {
        for bx in (0..ldr.w).step_by(b) {
            let (mut s, mut ss, mut real) = (0.0, 0.0, 0usize);
            for y in by..(by + b).min(ldr.h) {
                for x in bx..(bx + b).min(ldr.w) {
                    let v = ldr.at(x, y);
                    s += v;
                    ss += v * v;
                    real += 1;
                }
            }
            let n = (b * b) as f64;
            let m = s / n;
            let var = ((ss - n * m * m) / (n - 1.0)).max(0.0);
            weighted += var.sqrt() * real as f64;
        }
    }
    let contrast = weighted / ldr.v.len() as f64;

    let (a, bb) = CONTRAST_BETA;
    let beta = Beta::new(a, bb).expect("valid shape");
    let mode = (a - 1.0) / (a + bb - 2.0);
    let pc = beta.pdf(contrast / CONTRAST_DIVISOR) / beta.pdf(mode);
    let normal = Normal::new(BRIGHTNESS_MEAN, BRIGHTNESS_STD).expect("positive spread");
    let pb = normal.pdf(mean) / normal.pdf(BRIGHTNESS_MEAN);
    pb * pc
}
