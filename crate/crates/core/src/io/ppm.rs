//! Binary PPM (`P6`) export of `3 x H x W` images in `[0, 1]`.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gap between grid cells, in pixels.
pub const GRID_GAP: usize = 2;

pub fn image_to_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("ppm", format!("expected 3 x H x W, got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::shape("ppm", format!("expected 3 channels, got {c}")));
    }
    if !image.within(0.0, 1.0) {
        return Err(Error::InvalidArgument("ppm export needs values in [0, 1]".into()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((data[(ch * h + y) * w + x] * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes a `P6` file written by [`image_to_ppm`] back into `[0, 1]` values.
pub fn ppm_to_image(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format {
        what: "ppm",
        detail: detail.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    if fields[0] != "P6" || num(fields[3])? != 255 {
        return Err(bad("expected P6 with maxval 255"));
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let payload = bytes.get(pos..).filter(|p| p.len() == 3 * w * h).ok_or_else(|| bad("payload size"))?;
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn export_image_ppm(image: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &image_to_ppm(image)?)
}

/// Tiles equally sized images into a white-separated grid, one inner vector
/// per row.
pub fn image_grid(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("image grid needs at least one image".into()))?;
    let &[3, h, w] = first.shape() else {
        return Err(Error::shape("image_grid", format!("expected 3 x H x W, got {:?}", first.shape())));
    };
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * (h + GRID_GAP) + GRID_GAP;
    let gw = cols * (w + GRID_GAP) + GRID_GAP;
    let mut data = vec![1.0; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::shape("image_grid", "images differ in shape".to_string()));
            }
            let (oy, ox) = (GRID_GAP + r * (h + GRID_GAP), GRID_GAP + c * (w + GRID_GAP));
            for ch in 0..3 {
                for y in 0..h {
                    let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let dst = (ch * gh + oy + y) * gw + ox;
                    data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![3, gh, gw], data)
}
