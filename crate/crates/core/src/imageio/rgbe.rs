//! Radiance RGBE (`.hdr`) codec. Reads flat and new-style run-length
//! scanlines in the standard `-Y h +X w` orientation; writes flat scanlines.

use super::HdrImage;
use crate::error::{Error, Result};

const MIN_RLE_WIDTH: usize = 8;
const MAX_RLE_WIDTH: usize = 0x7fff;

pub fn read_radiance_hdr(bytes: &[u8]) -> Result<HdrImage> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Truncated("header ended before resolution line".into()))?;
        *pos += end + 1;
        Ok(String::from_utf8_lossy(&rest[..end]).trim_end_matches('\r').to_string())
    };

    let signature = next_line(&mut pos)?;
    if !(signature.starts_with("#?RADIANCE") || signature.starts_with("#?RGBE")) {
        return Err(Error::Format(format!("missing Radiance signature, found {signature:?}")));
    }
    loop {
        let line = next_line(&mut pos)?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            match fmt.trim() {
                "32-bit_rle_rgbe" => {}
                "32-bit_rle_xyze" => {
                    return Err(Error::Unsupported("XYZE pixel format".into()));
                }
                other => return Err(Error::Format(format!("unknown FORMAT {other:?}"))),
            }
        }
    }
    let resolution = next_line(&mut pos)?;
    let (width, height) = parse_resolution(&resolution)?;

    let mut data = Vec::with_capacity(width * height * 3);
    let mut scanline = vec![[0u8; 4]; width];
    for row in 0..height {
        pos = read_scanline(bytes, pos, &mut scanline)
            .map_err(|e| match e {
                Error::Truncated(msg) => Error::Truncated(format!("scanline {row}: {msg}")),
                other => other,
            })?;
        data.extend(scanline.iter().flat_map(|&px| decode_rgbe(px)));
    }
    HdrImage::new(width, height, data)
}

fn parse_resolution(line: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Format(format!("bad resolution line {line:?}")));
    }
    let axes_ok = ["-Y", "+Y"].contains(&parts[0]) || ["-X", "+X"].contains(&parts[0]);
    if !axes_ok {
        return Err(Error::Format(format!("bad resolution line {line:?}")));
    }
    if parts[0] != "-Y" || parts[2] != "+X" {
        return Err(Error::Unsupported(format!("orientation {line:?}")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Format(format!("bad dimension {s:?}")))
    };
    Ok((parse(parts[3])?, parse(parts[1])?))
}

fn read_scanline(bytes: &[u8], mut pos: usize, out: &mut [[u8; 4]]) -> Result<usize> {
    let width = out.len();
    let take = |pos: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Truncated(format!("needed {n} bytes at offset {pos}")))
    };

    let is_rle = (MIN_RLE_WIDTH..=MAX_RLE_WIDTH).contains(&width)
        && bytes.get(pos..pos + 4).is_some_and(|h| {
            h[0] == 2 && h[1] == 2 && h[2] & 0x80 == 0 && ((h[2] as usize) << 8 | h[3] as usize) == width
        });
    if !is_rle {
        let raw = take(pos, width * 4)?;
        for (px, chunk) in out.iter_mut().zip(raw.chunks_exact(4)) {
            px.copy_from_slice(chunk);
        }
        return Ok(pos + width * 4);
    }

    pos += 4;
    for channel in 0..4 {
        let mut x = 0;
        while x < width {
            let count = take(pos, 1)?[0] as usize;
            pos += 1;
            if count > 128 {
                let run = count - 128;
                if x + run > width {
                    return Err(Error::Format("run overflows scanline".into()));
                }
                let value = take(pos, 1)?[0];
                pos += 1;
                out[x..x + run].iter_mut().for_each(|px| px[channel] = value);
                x += run;
            } else {
                if count == 0 || x + count > width {
                    return Err(Error::Format("bad literal run length".into()));
                }
                let values = take(pos, count)?;
                pos += count;
                for (px, &v) in out[x..x + count].iter_mut().zip(values) {
                    px[channel] = v;
                }
                x += count;
            }
        }
    }
    Ok(pos)
}

/// `(m + 0.5) / 256 * 2^(e - 128)`, or zero when `e == 0`.
#[inline]
pub(crate) fn decode_rgbe(px: [u8; 4]) -> [f32; 3] {
    if px[3] == 0 {
        return [0.0; 3];
    }
    let scale = 2f64.powi(px[3] as i32 - 136);
    [0, 1, 2].map(|c| ((px[c] as f64 + 0.5) * scale) as f32)
}

#[inline]
pub(crate) fn encode_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let max = rgb.iter().copied().fold(0.0f32, f32::max) as f64;
    if max < 1e-38 {
        return [0; 4];
    }
    let (mantissa, exponent) = frexp(max);
    let exponent = exponent + 128;
    if exponent > 255 {
        return [255, 255, 255, 255];
    }
    if exponent < 1 {
        return [0; 4];
    }
    let scale = mantissa * 256.0 / max;
    let enc = |v: f32| ((v as f64 * scale).floor() as i64).clamp(0, 255) as u8;
    [enc(rgb[0]), enc(rgb[1]), enc(rgb[2]), exponent as u8]
}

/// `v = m * 2^e` with `m` in `[0.5, 1)`, for finite positive `v`.
fn frexp(v: f64) -> (f64, i32) {
    let mut e = v.log2().floor() as i32 + 1;
    let mut m = v / 2f64.powi(e);
    if m >= 1.0 {
        m /= 2.0;
        e += 1;
    } else if m < 0.5 {
        m *= 2.0;
        e -= 1;
    }
    (m, e)
}

pub fn write_radiance_hdr(img: &HdrImage) -> Vec<u8> {
    let header = format!(
        "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {} +X {}\n",
        img.height(),
        img.width()
    );
    let mut out = Vec::with_capacity(header.len() + img.width() * img.height() * 4);
    out.extend_from_slice(header.as_bytes());
    for p in img.data().chunks_exact(3) {
        out.extend_from_slice(&encode_rgbe([p[0], p[1], p[2]]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel_file(px: [u8; 4]) -> Vec<u8> {
        let mut f = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 1\n".to_vec();
        f.extend_from_slice(&px);
        f
    }

    #[test]
    fn zero_exponent_decodes_to_black() {
        let img = read_radiance_hdr(&one_pixel_file([0, 0, 0, 0])).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_mantissa_decodes_by_formula() {
        let img = read_radiance_hdr(&one_pixel_file([128, 128, 128, 129])).unwrap();
        assert_eq!(img.data(), &[1.00390625; 3]);
    }

    #[test]
    fn unit_pixel_encodes_with_exponent_129() {
        assert_eq!(encode_rgbe([1.0, 1.0, 1.0]), [128, 128, 128, 129]);
        assert_eq!(encode_rgbe([0.0; 3]), [0, 0, 0, 0]);
    }

    #[test]
    fn all_zero_image_writes_zero_quads() {
        let img = HdrImage::new(3, 2, vec![0.0; 18]).unwrap();
        let bytes = write_radiance_hdr(&img);
        let body = &bytes[bytes.len() - 24..];
        assert!(body.iter().all(|&b| b == 0));
    }

    #[test]
    fn rgbe_signature_accepted_and_garbage_rejected() {
        let mut f = one_pixel_file([10, 20, 30, 128]);
        f.splice(0..10, b"#?RGBE".iter().copied());
        assert!(read_radiance_hdr(&f).is_ok());
        assert!(matches!(read_radiance_hdr(b"P6\n1 1\n"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_scanline_is_reported() {
        let mut f = one_pixel_file([1, 2, 3, 130]);
        f.pop();
        assert!(matches!(read_radiance_hdr(&f), Err(Error::Truncated(_))));
    }

    #[test]
    fn other_orientations_unsupported() {
        let f = b"#?RADIANCE\n\n+Y 1 +X 1\n\x01\x01\x01\x80".to_vec();
        assert!(matches!(read_radiance_hdr(&f), Err(Error::Unsupported(_))));
        let f = b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n\x01\x01\x01\x80".to_vec();
        assert!(matches!(read_radiance_hdr(&f), Err(Error::Unsupported(_))));
    }

    /// Builds a new-style RLE file by hand: two rows of width 10 mixing runs
    /// and literals.
    #[test]
    fn new_style_rle_scanlines() {
        let width = 10usize;
        let mut f = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X {width}\n").into_bytes();
        let mut expected = Vec::new();
        for row in 0..2u8 {
            f.extend_from_slice(&[2, 2, 0, width as u8]);
            let r: Vec<u8> = (0..10).map(|i| if i < 6 { 100 + row } else { 10 * i }).collect();
            let g = vec![50u8; 10];
            let b: Vec<u8> = (0..10).map(|i| i as u8).collect();
            let e = vec![129u8; 10];
            // r: run of 6 then literal of 4
            f.extend_from_slice(&[128 + 6, 100 + row, 4, 60, 70, 80, 90]);
            f.extend_from_slice(&[128 + 10, 50]);
            f.push(10);
            f.extend_from_slice(&b);
            f.extend_from_slice(&[128 + 10, 129]);
            for x in 0..width {
                expected.extend(decode_rgbe([r[x], g[x], b[x], e[x]]));
            }
        }
        let img = read_radiance_hdr(&f).unwrap();
        assert_eq!(img.width(), 10);
        assert_eq!(img.data(), expected.as_slice());

        f.truncate(f.len() - 3);
        assert!(matches!(read_radiance_hdr(&f), Err(Error::Truncated(_))));
    }

    #[test]
    fn round_trip_within_one_quantization_step() {
        let data: Vec<f32> = (0..48).map(|i| 0.01 * (i as f32 + 1.0).powf(2.3)).collect();
        let img = HdrImage::new(4, 4, data).unwrap();
        let back = read_radiance_hdr(&write_radiance_hdr(&img)).unwrap();
        for (p, q) in img.data().chunks(3).zip(back.data().chunks(3)) {
            let max = p.iter().copied().fold(0.0, f32::max);
            for (a, b) in p.iter().zip(q) {
                assert!((a - b).abs() <= max / 128.0, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn encode_decode_relative_error(exp in -6.0f64..6.0) {
            let v = 10f64.powf(exp) as f32;
            let back = decode_rgbe(encode_rgbe([v, v, v]));
            for c in back {
                prop_assert!(((c - v) / v).abs() <= 1.0 / 256.0, "{} -> {}", v, c);
            }
        }
    }
}
