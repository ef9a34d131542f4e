//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// `round(clamp(v, 0, 1) * 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes one `[H, W, C]` image, `C` 1 (PGM) or 3 (PPM).
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::contract(format!("expected an [H, W, C] image, got {:?}", image.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::contract(format!("cannot export {c}-channel images (1 or 3 supported)"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes a binary PGM/PPM with maxval 255 into `[H, W, C]` values
/// `byte / 255`. Comments in the header are not supported.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PNM header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(format!("unsupported PNM magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PNM header field `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PNM maxval {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != h * w * c {
        return Err(Error::format(format!("PNM raster has {} bytes, expected {}", raster.len(), h * w * c)));
    }
    Tensor::new([h, w, c], raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

/// Places images of equal shape side by side, separated by a one-pixel
/// white gutter.
pub fn side_by_side(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("no images to place"))?;
    let [h, w, c] = first.shape()[..] else {
        return Err(Error::contract("panel images must be [H, W, C]"));
    };
    if images.iter().any(|im| im.shape() != first.shape()) {
        return Err(Error::contract("panel images must share a shape"));
    }
    let k = images.len();
    let width = k * w + (k - 1);
    let mut data = vec![1.0; h * width * c];
    for (i, im) in images.iter().enumerate() {
        let x0 = i * (w + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(y * width + x0 + x) * c + ch] = im.data()[(y * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::new([h, width, c], data)
}
