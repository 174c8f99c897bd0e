//! Mertens exposure fusion: per-pixel quality weights blended through
//! Laplacian pyramids. Pyramid arithmetic is done in f64 so that
//! reconstruction is exact to well below 8-bit precision.

use crate::error::{Error, Result};
use crate::imageio::ImageF;

/// Separable binomial kernel used for every pyramid blur.
const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Weight exponents (contrast, saturation, well-exposedness).
pub const CONTRAST_EXPONENT: f64 = 1.0;
pub const SATURATION_EXPONENT: f64 = 1.0;
pub const EXPOSEDNESS_EXPONENT: f64 = 1.0;
pub const EXPOSEDNESS_SIGMA: f64 = 0.2;
/// Added to every weight so fully flat pixels still normalize.
pub const WEIGHT_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

/// One pyramid level, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Level {
    fn from_image(img: &ImageF) -> Self {
        Self {
            width: img.width,
            height: img.height,
            channels: img.channels,
            data: img.data.iter().map(|&v| v as f64).collect(),
        }
    }

    fn from_weights(map: &WeightMap) -> Self {
        Self {
            width: map.width,
            height: map.height,
            channels: 1,
            data: map.weights.clone(),
        }
    }

    fn to_image(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Finest level first; every following level is half the size of the
/// previous one, rounding up.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Level>,
}

#[inline]
fn reflect101(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_axis(src: &Level, horizontal: bool) -> Level {
    let (w, h, c) = (src.width, src.height, src.channels);
    let mut out = vec![0.0; src.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, k) in BINOMIAL5.iter().enumerate() {
                    let (sx, sy) = if horizontal {
                        (reflect101(x as isize + t as isize - 2, w), y)
                    } else {
                        (x, reflect101(y as isize + t as isize - 2, h))
                    };
                    acc += k * src.data[(sy * w + sx) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Level {
        data: out,
        ..*src
    }
}

fn blur(src: &Level) -> Level {
    blur_axis(&blur_axis(src, true), false)
}

fn downsample(src: &Level) -> Level {
    let blurred = blur(src);
    let (w, h, c) = (src.width.div_ceil(2), src.height.div_ceil(2), src.channels);
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            let i = (2 * y * src.width + 2 * x) * c;
            data.extend_from_slice(&blurred.data[i..i + c]);
        }
    }
    Level {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

/// Zero-insertion upsampling to `width x height` followed by the binomial
/// blur scaled by 4 to preserve mean intensity.
fn upsample(src: &Level, width: usize, height: usize) -> Level {
    let c = src.channels;
    let mut zeros = Level {
        width,
        height,
        channels: c,
        data: vec![0.0; width * height * c],
    };
    for y in 0..src.height.min(height.div_ceil(2)) {
        for x in 0..src.width.min(width.div_ceil(2)) {
            let s = (y * src.width + x) * c;
            let d = (2 * y * width + 2 * x) * c;
            zeros.data[d..d + c].copy_from_slice(&src.data[s..s + c]);
        }
    }
    let mut out = blur(&zeros);
    out.data.iter_mut().for_each(|v| *v *= 4.0);
    out
}

fn max_levels(width: usize, height: usize) -> usize {
    (width.min(height) as f64).log2().floor() as usize + 1
}

fn check_levels(width: usize, height: usize, levels: usize) -> Result<()> {
    let max = max_levels(width, height);
    if levels == 0 || levels > max {
        return Err(Error::Input(format!(
            "{levels} pyramid levels requested for {width}x{height}, allowed 1..={max}"
        )));
    }
    Ok(())
}

fn gaussian_levels(base: Level, levels: usize) -> Pyramid {
    let mut out = Vec::with_capacity(levels);
    out.push(base);
    while out.len() < levels {
        let next = downsample(out.last().unwrap());
        out.push(next);
    }
    Pyramid { levels: out }
}

pub fn gaussian_pyramid(img: &ImageF, levels: usize) -> Result<Pyramid> {
    check_levels(img.width, img.height, levels)?;
    Ok(gaussian_levels(Level::from_image(img), levels))
}

pub fn laplacian_pyramid(img: &ImageF, levels: usize) -> Result<Pyramid> {
    let mut pyr = gaussian_pyramid(img, levels)?;
    for l in 0..levels - 1 {
        let (fine, coarse) = pyr.levels.split_at_mut(l + 1);
        let fine = &mut fine[l];
        let up = upsample(&coarse[0], fine.width, fine.height);
        fine.data.iter_mut().zip(&up.data).for_each(|(f, u)| *f -= u);
    }
    Ok(pyr)
}

fn collapse_levels(pyr: &Pyramid) -> Level {
    let mut levels = pyr.levels.iter().rev();
    let mut img = levels.next().expect("pyramid has at least one level").clone();
    for detail in levels {
        let mut up = upsample(&img, detail.width, detail.height);
        up.data.iter_mut().zip(&detail.data).for_each(|(u, d)| *u += d);
        img = up;
    }
    img
}

/// Inverse of [`laplacian_pyramid`].
pub fn collapse(pyr: &Pyramid) -> ImageF {
    collapse_levels(pyr).to_image()
}

/// Pyramid depth used for fusion: `floor(log2(min side)) - 1`, at least 1.
pub fn fusion_depth(width: usize, height: usize) -> usize {
    max_levels(width, height).saturating_sub(2).max(1)
}

/// Unnormalized Mertens weight for one RGB image with values in `[0, 1]`.
pub fn quality_weights(img: &ImageF) -> WeightMap {
    assert_eq!(img.channels, 3, "quality weights need an RGB image");
    let (w, h) = (img.width, img.height);
    let gray: Vec<f64> = img.luminance_plane().into_iter().map(f64::from).collect();
    let two_sigma_sq = 2.0 * EXPOSEDNESS_SIGMA * EXPOSEDNESS_SIGMA;
    let mut weights = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let at = |dx: isize, dy: isize| {
                let sx = reflect101(x as isize + dx, w);
                let sy = reflect101(y as isize + dy, h);
                gray[sy * w + sx]
            };
            let contrast = (at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1) - 4.0 * at(0, 0)).abs();

            let p = img.pixel(x, y);
            let rgb = [p[0] as f64, p[1] as f64, p[2] as f64];
            let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            let saturation =
                (rgb.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
            let exposedness = rgb
                .iter()
                .map(|v| (-(v - 0.5) * (v - 0.5) / two_sigma_sq).exp())
                .product::<f64>();

            weights.push(
                contrast.powf(CONTRAST_EXPONENT)
                    * saturation.powf(SATURATION_EXPONENT)
                    * exposedness.powf(EXPOSEDNESS_EXPONENT)
                    + WEIGHT_EPSILON,
            );
        }
    }
    WeightMap {
        width: w,
        height: h,
        weights,
    }
}

/// Rescales the maps so that they sum to one at every pixel.
pub fn normalize_weights(maps: &mut [WeightMap]) {
    let Some(first) = maps.first() else {
        return;
    };
    let n = first.weights.len();
    for i in 0..n {
        let total: f64 = maps.iter().map(|m| m.weights[i]).sum();
        for m in maps.iter_mut() {
            m.weights[i] /= total;
        }
    }
}

/// Fuses differently exposed renderings of one scene into a single image.
pub fn exposure_fuse(imgs: &[ImageF]) -> Result<ImageF> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::Input("exposure fusion needs at least one image".into()))?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = imgs
        .iter()
        .find(|i| i.width != w || i.height != h || i.channels != 3)
    {
        return Err(Error::Input(format!(
            "fusion inputs must all be {w}x{h} RGB, found {}x{}x{}",
            bad.width, bad.height, bad.channels
        )));
    }

    let mut weights: Vec<WeightMap> = imgs.iter().map(quality_weights).collect();
    normalize_weights(&mut weights);

    let depth = fusion_depth(w, h);
    let mut blended: Option<Pyramid> = None;
    for (img, weight) in imgs.iter().zip(&weights) {
        let lap = laplacian_pyramid(img, depth)?;
        let gauss = gaussian_levels(Level::from_weights(weight), depth);
        let contribution = Pyramid {
            levels: lap
                .levels
                .into_iter()
                .zip(&gauss.levels)
                .map(|(mut l, g)| {
                    for (px, &wt) in l.data.chunks_exact_mut(3).zip(&g.data) {
                        px.iter_mut().for_each(|v| *v *= wt);
                    }
                    l
                })
                .collect(),
        };
        blended = Some(match blended {
            None => contribution,
            Some(mut acc) => {
                for (a, c) in acc.levels.iter_mut().zip(&contribution.levels) {
                    a.data.iter_mut().zip(&c.data).for_each(|(x, y)| *x += y);
                }
                acc
            }
        });
    }
    let out = collapse_levels(&blended.expect("at least one image"));
    Ok(out.to_image().map(|v| v.clamp(0.0, 1.0)))
}
