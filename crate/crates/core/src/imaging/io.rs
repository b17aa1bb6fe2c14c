use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

use super::{quantize, Image, Plane};

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Load an 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) or a binary PPM.
/// Alpha is dropped and gray is replicated into all three channels.
pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::UnsupportedFormat(format!("PNM variant P{}", bytes[1] as char)))
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a PNG or PPM file",
            path.display()
        )))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedFormat(format!("PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedFormat(format!("PNG: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "PNG with bit depth {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("PNG palette without expansion".into()))
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Image::from_u8(h, w, &rgb)
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::UnsupportedFormat("PPM: truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("PPM: malformed header".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM with maxval {maxval}")));
    }
    // Exactly one whitespace byte before the raster.
    pos += 1;
    let n = w * h * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::UnsupportedFormat("PPM: truncated raster".into()))?;
    Image::from_u8(h, w, raster)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::UnsupportedFormat(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::UnsupportedFormat(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Save as PNG (`.png`) or binary PPM (`.ppm`, `.pnm`) by extension.
pub fn save(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img.width(), img.height(), png::ColorType::Rgb, &img.to_u8())?,
        "ppm" | "pnm" => {
            let mut b = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
            b.extend_from_slice(&img.to_u8());
            b
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "output extension `{other}` (use .png or .ppm)"
            )))
        }
    };
    atomic_write(path, &bytes)
}

/// 8-bit grayscale PNG of a plane with values in `[0, 1]`.
pub fn write_gray_png(plane: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = plane.data.iter().map(|&v| quantize(v)).collect();
    let bytes = encode_png(plane.width, plane.height, png::ColorType::Grayscale, &data)?;
    atomic_write(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.to_u8(), vec![255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn ppm_16bit_rejected() {
        let bytes = b"P6 1 1 65535 \x00\x00\x00\x00\x00\x00".to_vec();
        let err = decode_ppm(&bytes).unwrap_err();
        assert!(err.to_string().contains("maxval 65535"));
    }

    #[test]
    fn ppm_truncated_rejected() {
        assert!(decode_ppm(b"P6 4 4 255\n\x01\x02").is_err());
    }
}
