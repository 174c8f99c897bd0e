//! 8-bit RGB PNG via the `png` crate. Other bit depths and colour types are
//! rejected rather than converted.

use std::io::Cursor;

use png::{BitDepth, ColorType, Transformations};

use super::LdrImage;
use crate::error::{Error, Result};

pub fn read_png(bytes: &[u8]) -> Result<LdrImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(decode_error)?;
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(Error::Unsupported(format!("{depth:?} bit PNG, only 8-bit is read")));
    }
    if color != ColorType::Rgb {
        return Err(Error::Unsupported(format!("{color:?} PNG, only RGB is read")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG dimensions overflow".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(decode_error)?;
    buf.truncate(info.buffer_size());
    LdrImage::new(info.width as usize, info.height as usize, buf)
}

fn decode_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated(io.to_string())
        }
        other => Error::Format(other.to_string()),
    }
}

pub fn write_png(img: &LdrImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(ColorType::Rgb);
        encoder.set_depth(BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}
