//! PFM, PNG and binary PPM codecs.
//!
//! PFM is written little-endian (scale -1.0) with rows bottom-up. PNG and PPM
//! samples are treated as raw display values; no ICC or gamma chunk handling.

use std::fs;
use std::path::Path;

use super::{Domain, Image};
use crate::error::{Error, Result};

/// Sample depth used when writing integer formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Pfm,
    Png,
    Ppm,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pfm") => Ok(Format::Pfm),
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        _ => Err(Error::Parameter(format!(
            "unsupported image extension: {}",
            path.display()
        ))),
    }
}

pub fn load_image(path: impl AsRef<Path>, expected_domain: Domain) -> Result<Image> {
    let path = path.as_ref();
    let format = format_of(path)?;
    if expected_domain == Domain::LinearHdr && format != Format::Pfm {
        return Err(Error::Parameter(format!(
            "HDR images must be .pfm: {}",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, c, data) = match format {
        Format::Pfm => decode_pfm(&bytes)?,
        Format::Png | Format::Ppm => decode_integer(&bytes, format)?,
    };
    Image::new(h, w, c, data, expected_domain).map_err(|e| e.context(path.display()))
}

/// Saves with 8-bit samples for integer formats.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

pub fn save_image_with_depth(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let bytes = match format {
        Format::Pfm => encode_pfm(img),
        Format::Png | Format::Ppm => {
            if img.domain() != Domain::LdrDisplay {
                return Err(Error::Domain(format!(
                    "linear HDR images can only be written as .pfm, not {}",
                    path.display()
                )));
            }
            encode_integer(img, format, depth)?
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_pfm(img: &Image) -> Vec<u8> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&img.at(ch, y, x).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Decode {
            offset: start,
            msg: "non-ASCII header token".into(),
        })
    }
}

fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(Error::Decode {
                offset: 0,
                msg: format!("bad PFM magic {other:?}"),
            })
        }
    };
    let dim = |cur: &mut Cursor| -> Result<usize> {
        cur.skip_ws();
        let start = cur.pos;
        let tok = cur.token()?.to_owned();
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Decode {
                offset: start,
                msg: format!("bad PFM dimension {tok:?}"),
            }),
        }
    };
    let width = dim(&mut cur)?;
    let height = dim(&mut cur)?;
    cur.skip_ws();
    let start = cur.pos;
    let scale_tok = cur.token()?.to_owned();
    let scale: f32 = scale_tok.parse().map_err(|_| Error::Decode {
        offset: start,
        msg: format!("bad PFM scale {scale_tok:?}"),
    })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Decode {
            offset: start,
            msg: "PFM scale must be non-zero".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing separator after PFM header"));
    }
    cur.pos += 1;
    let little = scale < 0.0;
    let n = height * width * channels;
    let body = &bytes[cur.pos..];
    if body.len() < n * 4 {
        return Err(Error::Decode {
            offset: cur.pos + body.len(),
            msg: format!("PFM raster truncated: need {} bytes, have {}", n * 4, body.len()),
        });
    }
    let mut data = vec![0.0f32; n];
    let plane = height * width;
    for (i, chunk) in body[..n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let ch = i % channels;
        let px = i / channels;
        let file_row = px / width;
        let x = px % width;
        let y = height - 1 - file_row;
        data[ch * plane + y * width + x] = v;
    }
    Ok((height, width, channels, data))
}

fn decode_integer(bytes: &[u8], format: Format) -> Result<(usize, usize, usize, Vec<f32>)> {
    let fmt = match format {
        Format::Png => image::ImageFormat::Png,
        _ => image::ImageFormat::Pnm,
    };
    let dynimg = image::load_from_memory_with_format(bytes, fmt).map_err(|e| Error::Decode {
        offset: 0,
        msg: e.to_string(),
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    use image::DynamicImage as D;
    let (channels, interleaved, scale): (usize, Vec<f32>, f32) = match dynimg {
        D::ImageLuma8(b) => (1, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        D::ImageLumaA8(_) => {
            let b = dynimg.to_luma8();
            (1, b.into_raw().into_iter().map(f32::from).collect(), 255.0)
        }
        D::ImageLuma16(b) => (1, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        D::ImageLumaA16(_) => {
            let b = dynimg.to_luma16();
            (1, b.into_raw().into_iter().map(f32::from).collect(), 65535.0)
        }
        D::ImageRgb8(b) => (3, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        D::ImageRgba8(_) => {
            let b = dynimg.to_rgb8();
            (3, b.into_raw().into_iter().map(f32::from).collect(), 255.0)
        }
        D::ImageRgb16(b) => (3, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        D::ImageRgba16(_) => {
            let b = dynimg.to_rgb16();
            (3, b.into_raw().into_iter().map(f32::from).collect(), 65535.0)
        }
        other => {
            return Err(Error::Decode {
                offset: 0,
                msg: format!("unsupported sample layout {:?}", other.color()),
            })
        }
    };
    let plane = h * w;
    let mut data = vec![0.0f32; plane * channels];
    for (i, v) in interleaved.into_iter().enumerate() {
        data[(i % channels) * plane + i / channels] = v / scale;
    }
    Ok((h, w, channels, data))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn encode_integer(img: &Image, format: Format, depth: BitDepth) -> Result<Vec<u8>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let interleave = |max: f32| -> Vec<f32> {
        let mut v = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    v.push(quantize(img.at(ch, y, x), max));
                }
            }
        }
        v
    };
    let (w32, h32) = (w as u32, h as u32);
    use image::DynamicImage as D;
    let dynimg = match (depth, c) {
        (BitDepth::Eight, 1) => D::ImageLuma8(
            image::GrayImage::from_raw(w32, h32, interleave(255.0).into_iter().map(|v| v as u8).collect())
                .expect("buffer size matches"),
        ),
        (BitDepth::Eight, _) => D::ImageRgb8(
            image::RgbImage::from_raw(w32, h32, interleave(255.0).into_iter().map(|v| v as u8).collect())
                .expect("buffer size matches"),
        ),
        (BitDepth::Sixteen, 1) => D::ImageLuma16(
            image::ImageBuffer::from_raw(w32, h32, interleave(65535.0).into_iter().map(|v| v as u16).collect())
                .expect("buffer size matches"),
        ),
        (BitDepth::Sixteen, _) => D::ImageRgb16(
            image::ImageBuffer::from_raw(w32, h32, interleave(65535.0).into_iter().map(|v| v as u16).collect())
                .expect("buffer size matches"),
        ),
    };
    let fmt = match format {
        Format::Png => image::ImageFormat::Png,
        _ => {
            if c != 3 {
                return Err(Error::Parameter("binary PPM output needs 3 channels".into()));
            }
            image::ImageFormat::Pnm
        }
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    dynimg.write_to(&mut buf, fmt).map_err(|e| Error::Decode {
        offset: 0,
        msg: format!("encoder failure: {e}"),
    })?;
    Ok(buf.into_inner())
}
