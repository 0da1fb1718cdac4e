//! Binary Netpbm I/O (P6 color, P5 grayscale) and the heatmap colormap.
//!
//! Pixels are `[0, 1]` floats in `C x H x W` layout. Writing quantizes with
//! `round(v * 255)`; reading maps byte `b` to `b / 255`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every pixel to the nearest `k / 255`, i.e. what survives a PPM
/// round trip.
pub fn quantize_image(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| quantize(v) as f32 / 255.0)
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ImageFormat(format!("PPM needs a 3 x H x W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(values: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::ImageFormat(format!(
            "{} values for a {width}x{height} PGM",
            values.len()
        )));
    }
    let mut out = header("P5", width, height);
    out.extend(values.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Interleaved 8-bit RGB, `H x W x 3`.
pub fn encode_ppm_rgb(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::ImageFormat("RGB buffer size".into()));
    }
    let mut out = header("P6", width, height);
    out.extend_from_slice(rgb);
    Ok(out)
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::ImageFormat("file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::ImageFormat("truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageFormat("expected a number in header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::ImageFormat("header number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::ImageFormat("missing whitespace after maxval".into())),
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        offset: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::ImageFormat("not a binary PPM (P6)".into()));
    }
    if h.maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {}", h.maxval)));
    }
    let plane = h.width * h.height;
    let body = &bytes[h.offset..];
    if body.len() < 3 * plane {
        return Err(Error::ImageFormat("truncated pixel data".into()));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = body[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

/// Returns `(values in [0,1], width, height)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::ImageFormat("not a binary PGM (P5)".into()));
    }
    if h.maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.width * h.height;
    let body = &bytes[h.offset..];
    if body.len() < n {
        return Err(Error::ImageFormat("truncated pixel data".into()));
    }
    Ok((body[..n].iter().map(|&b| b as f32 / 255.0).collect(), h.width, h.height))
}

/// Writes through a temporary file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

/// Blue -> cyan -> green -> yellow -> red, 256 entries.
///
/// Entry `i` with `t = i / 255` is `(r, g, b) = 255 * clamp(1.5 - |4t - k|)`
/// for `k = 3, 2, 1` respectively, rounded to the nearest integer.
pub fn colormap() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let ch = |k: f64| ((1.5 - (4.0 * t - k).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        *entry = [ch(3.0), ch(2.0), ch(1.0)];
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let (v, w, h) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn truncated_body_is_an_error() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(decode_ppm(&bytes).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn colormap_runs_blue_to_red() {
        let cm = colormap();
        assert_eq!(cm[0], [0, 0, 128]);
        assert_eq!(cm[255], [128, 0, 0]);
        let mid = cm[128];
        assert!(mid[1] > 200, "{mid:?}");
    }
}
