//! Binary netpbm codecs: P6 (RGB) and P5 (grayscale), 8-bit only.

use super::image::{GrayImage, Image};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse(format!(
            "bad magic: expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Parse("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("bad header token at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Parse(format!("header value `{text}` out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("dims must be positive, got {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("missing whitespace after maxval".into())),
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse("dims overflow".into()))?;
    let rest = &bytes[header.data_start..];
    if rest.len() < need {
        return Err(Error::Parse(format!(
            "truncated payload: need {need} bytes, have {}",
            rest.len()
        )));
    }
    Ok(&rest[..need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes, b"P6")?;
    let raw = payload(bytes, &header, 3)?;
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(header.height, header.width, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_header(bytes, b"P5")?;
    let raw = payload(bytes, &header, 1)?;
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    GrayImage::new(header.height, header.width, data)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Writes a P5 file; values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn encode_pgm(grid: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    out
}

/// P5 from raw 8-bit levels.
pub fn encode_pgm_bytes(width: usize, height: usize, levels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(levels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}
