//! Binary PPM (P6, 8-bit RGB) and PGM (P5, 16-bit big-endian) images.

use std::io::Write;
use std::path::Path;

use crate::error::FormatError;
use crate::math::{Image2D, Rgb};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(FormatError::BadMagic { expected: magic, found });
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(FormatError::Header("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Header(format!("expected a number at byte {start}")));
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = digits
            .parse()
            .map_err(|_| FormatError::Header(format!("number too large: {digits}")))?;
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(FormatError::Header("missing separator after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(FormatError::Header(format!("unsupported image size {width}x{height}")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval.min(u32::MAX as u64) as u32,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, bytes_per_pixel: usize) -> Result<&'a [u8], FormatError> {
    let expected = header.width * header.height * bytes_per_pixel;
    let available = bytes.len() - header.data_start;
    if available < expected {
        return Err(FormatError::Truncated {
            expected,
            found: available,
        });
    }
    Ok(&bytes[header.data_start..header.data_start + expected])
}

/// Decodes a P5 image with maxval 65535 (two bytes per sample, big-endian).
pub fn read_pgm16(bytes: &[u8]) -> Result<Image2D<u16>, FormatError> {
    let header = parse_header(bytes, "P5")?;
    if header.maxval != 65535 {
        return Err(FormatError::MaxVal {
            expected: 65535,
            found: header.maxval,
        });
    }
    let data = payload(bytes, &header, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Image2D::from_vec(header.width, header.height, data).expect("size checked"))
}

/// Decodes a P6 image with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<Image2D<Rgb>, FormatError> {
    let header = parse_header(bytes, "P6")?;
    if header.maxval != 255 {
        return Err(FormatError::MaxVal {
            expected: 255,
            found: header.maxval,
        });
    }
    let data = payload(bytes, &header, 3)?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Image2D::from_vec(header.width, header.height, data).expect("size checked"))
}

pub fn encode_pgm16(image: &Image2D<u16>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    out.reserve(image.data().len() * 2);
    for v in image.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_ppm(image: &Image2D<Rgb>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.reserve(image.data().len() * 3);
    for px in image.data() {
        out.extend_from_slice(px);
    }
    out
}

pub fn load_pgm16(path: impl AsRef<Path>) -> Result<Image2D<u16>, FormatError> {
    read_pgm16(&std::fs::read(path)?)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image2D<Rgb>, FormatError> {
    read_ppm(&std::fs::read(path)?)
}

pub fn save_pgm16(path: impl AsRef<Path>, image: &Image2D<u16>) -> Result<(), FormatError> {
    std::fs::File::create(path)?.write_all(&encode_pgm16(image))?;
    Ok(())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Image2D<Rgb>) -> Result<(), FormatError> {
    std::fs::File::create(path)?.write_all(&encode_ppm(image))?;
    Ok(())
}
