//! Binary PGM (P5) / PPM (P6) images with maxval 255.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// A `C x H x W` tensor with `C` in {1, 3} and every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {c}")));
        }
        if let Some(i) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel {i} outside [0, 1]: {}", t.data()[i])));
        }
        Ok(Image(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

pub fn image_read(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image_decode(&bytes)
}

pub fn image_write(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, image_encode(img)).map_err(|e| Error::io(path, e))
}

pub fn image_encode(img: &Image) -> Vec<u8> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let t = img.tensor();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(t.plane(ch)[p]));
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn image_decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(Error::Format(format!("unsupported magic `{}`", String::from_utf8_lossy(other)))),
    };
    let w = parse_uint(next_token(bytes, &mut pos)?)?;
    let h = parse_uint(next_token(bytes, &mut pos)?)?;
    let maxval = parse_uint(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (need 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = channels * w * h;
    let raster =
        bytes.get(pos..pos + need).ok_or_else(|| Error::Format(format!("truncated raster: need {need} bytes")))?;

    let mut data = vec![0.0f32; need];
    let hw = h * w;
    for p in 0..hw {
        for ch in 0..channels {
            data[ch * hw + p] = raster[p * channels + ch] as f32 / 255.0;
        }
    }
    Image::new(Tensor::new(vec![channels, h, w], data)?)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header field `{}`", String::from_utf8_lossy(tok))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_white_pixel_is_one() {
        let img = image_decode(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.tensor().data(), &[1.0]);
    }

    #[test]
    fn ppm_pixel_maps_by_255() {
        let img = image_decode(b"P6\n# comment\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.tensor().data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn second_round_trip_is_stable() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| (i as f32 * 0.0371) % 1.0);
        let once = image_encode(&Image::new(t).unwrap());
        let twice = image_encode(&image_decode(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(image_decode(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(image_decode(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Format(_))));
        assert!(image_decode(b"").is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(Tensor::full(&[1, 2, 2], 1.5)).is_err());
        assert!(Image::new(Tensor::full(&[2, 2, 2], 0.5)).is_err());
    }
}
