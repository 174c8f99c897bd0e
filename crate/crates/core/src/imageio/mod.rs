//! Image containers, Radiance/PNG codecs and the small set of pixel
//! utilities (luminance, log-average, bilinear resampling) every other
//! module builds on.

mod png_io;
mod rgbe;

pub use png_io::{read_png, write_png};
pub use rgbe::{read_radiance_hdr, write_radiance_hdr};

use crate::error::{Error, Result};

/// Rec. 709 luma weights. Every luminance computation in the crate goes
/// through [`luminance`], so swapping the standard happens here.
pub const LUMA_WEIGHTS: [f32; 3] = [0.2126, 0.7152, 0.0722];

/// Zero guard inside the log-average luminance.
pub const LOG_AVERAGE_DELTA: f64 = 1e-6;

/// Interleaved float image with an arbitrary channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Input(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = self.index(x0, y);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(x, y)
                    .copy_from_slice(self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let row = self.width * self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        Self { data, ..*self }
    }

    /// Single-channel luminance plane of an RGB image.
    pub fn luminance_plane(&self) -> Vec<f32> {
        assert_eq!(self.channels, 3, "luminance needs an RGB image");
        self.data
            .chunks_exact(3)
            .map(|p| luminance([p[0], p[1], p[2]]))
            .collect()
    }
}

/// Linear scene radiance, three channels, every value finite and `>= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage(ImageF);

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_image(ImageF::from_vec(width, height, 3, data)?)
    }

    pub fn from_image(img: ImageF) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::Input(format!(
                "HDR images are RGB, got {} channels",
                img.channels
            )));
        }
        if img.width == 0 || img.height == 0 {
            return Err(Error::Input("empty HDR image".into()));
        }
        if let Some(bad) = img.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!(
                "HDR radiance must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self(img))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn as_image(&self) -> &ImageF {
        &self.0
    }

    pub fn into_image(self) -> ImageF {
        self.0
    }

    /// Multiplies every channel by `k >= 0`.
    pub fn scaled(&self, k: f32) -> Self {
        debug_assert!(k.is_finite() && k >= 0.0);
        Self(self.0.map(|v| v * k))
    }
}

/// Display-referred 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "LDR buffer of {} bytes does not describe a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Code `c` becomes `c / 255`.
    pub fn to_float(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().map(|&c| c as f32 / 255.0).collect(),
        }
    }

    /// Quantizes an RGB float image: `round(clamp(f, 0, 1) * 255)`.
    pub fn from_float(img: &ImageF) -> Self {
        assert_eq!(img.channels, 3, "LDR images are RGB");
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    /// Rec. 709 luma rounded to an 8-bit gray level, one per pixel.
    pub fn gray_levels(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                let y = luminance([p[0] as f32, p[1] as f32, p[2] as f32]);
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

#[inline]
pub fn luminance(rgb: [f32; 3]) -> f32 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// `exp(mean(ln(delta + L)))` over all pixels, accumulated in f64.
pub fn geometric_mean_luminance(img: &HdrImage) -> f64 {
    let img = img.as_image();
    let n = (img.width * img.height) as f64;
    let sum: f64 = img
        .data
        .chunks_exact(3)
        .map(|p| (LOG_AVERAGE_DELTA + luminance([p[0], p[1], p[2]]) as f64).ln())
        .sum();
    (sum / n).exp()
}

/// Bilinear resampling with half-pixel-centred sample positions and edge
/// clamping. Output values are convex combinations of input values.
pub fn resize_bilinear(img: &ImageF, out_w: usize, out_h: usize) -> ImageF {
    assert!(out_w >= 1 && out_h >= 1, "resize target must be at least 1x1");
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let taps_x = bilinear_taps(img.width, out_w);
    let taps_y = bilinear_taps(img.height, out_h);
    let c = img.channels;
    let mut out = ImageF::new(out_w, out_h, c);
    for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
            let o = out.index(ox, oy);
            let (i00, i01) = (img.index(x0, y0), img.index(x1, y0));
            let (i10, i11) = (img.index(x0, y1), img.index(x1, y1));
            for ch in 0..c {
                let top = img.data[i00 + ch] * (1.0 - fx) + img.data[i01 + ch] * fx;
                let bottom = img.data[i10 + ch] * (1.0 - fx) + img.data[i11 + ch] * fx;
                out.data[o + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_hdr(img: &HdrImage, out_w: usize, out_h: usize) -> HdrImage {
    HdrImage(resize_bilinear(img.as_image(), out_w, out_h))
}

pub fn resize_ldr(img: &LdrImage, out_w: usize, out_h: usize) -> LdrImage {
    LdrImage::from_float(&resize_bilinear(&img.to_float(), out_w, out_h))
}
