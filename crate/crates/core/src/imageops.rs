//! Image plumbing: binary PPM/PGM I/O, cropping and resizing of `C×H×W` tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::numerics::Tensor;
use crate::proposal::BBox;

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `3×H×W` image in `[0,1]` as binary PPM (P6).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_ndim("encode_ppm", "image", 3)?;
    let &[c, h, w] = image.shape() else { unreachable!() };
    if c != 3 {
        return Err(Error::shape("encode_ppm", "channels", 3, c));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

/// Encode an `H×W` map in `[0,1]` as binary PGM (P5), value `round(255·v)`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    map.expect_ndim("encode_pgm", "map", 2)?;
    let &[h, w] = map.shape() else { unreachable!() };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!("expected {} header", String::from_utf8_lossy(magic)));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header")?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("malformed header".into());
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (w, h, raster) = parse_header(bytes, b"P6")?;
    let plane = w * h;
    if raster.len() != 3 * plane {
        return Err(format!("expected {} raster bytes, found {}", 3 * plane, raster.len()));
    }
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (w, h, raster) = parse_header(bytes, b"P5")?;
    if raster.len() != w * h {
        return Err(format!("expected {} raster bytes, found {}", w * h, raster.len()));
    }
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(&[h, w], data).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).at(path)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).at(path)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).at(path)?;
    decode_ppm(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).at(path)?;
    decode_pgm(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Copy the `bbox` region out of a `C×H×W` tensor.
pub fn crop(image: &Tensor, bbox: &BBox) -> Result<Tensor> {
    image.expect_ndim("crop", "image", 3)?;
    let &[c, h, w] = image.shape() else { unreachable!() };
    if !bbox.fits(w, h) {
        return Err(Error::InvalidArgument(format!("bbox {bbox:?} outside {w}x{h} image")));
    }
    let (bw, bh) = (bbox.width(), bbox.height());
    let mut out = Vec::with_capacity(c * bw * bh);
    for ch in 0..c {
        for y in bbox.y0..bbox.y1 {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + bbox.x0..row + bbox.x1]);
        }
    }
    Tensor::from_vec(&[c, bh, bw], out)
}

/// Contribution table for one axis: `(first source index, weights)` per output index.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let filter_scale = scale.max(1.0);
    let support = filter_scale;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(n_in);
            let mut ws: Vec<f64> = (lo..hi)
                .map(|j| {
                    let t = (j as f64 + 0.5 - center) / filter_scale;
                    (1.0 - t.abs()).max(0.0)
                })
                .collect();
            let total: f64 = ws.iter().sum();
            if total > 0.0 {
                for v in &mut ws {
                    *v /= total;
                }
            }
            (lo, ws)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` tensor with half-pixel centres.
///
/// When shrinking, the triangle filter is widened by the scale factor so
/// every source pixel contributes (area-style antialiasing); detail finer
/// than the output grid is averaged away rather than aliased.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    image.expect_ndim("resize_bilinear", "image", 3)?;
    let &[c, h, w] = image.shape() else { unreachable!() };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize to or from an empty image".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let xw = axis_weights(w, out_w);
    let yw = axis_weights(h, out_h);
    let src = image.data();
    // horizontal pass: C×H×out_w
    let mut tmp = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..][..w];
            let dst = &mut tmp[(ch * h + y) * out_w..][..out_w];
            for (x, (lo, ws)) in xw.iter().enumerate() {
                dst[x] = ws.iter().zip(&row[*lo..]).map(|(a, b)| a * b).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (y, (lo, ws)) in yw.iter().enumerate() {
            let dst = &mut out[(ch * out_h + y) * out_w..][..out_w];
            for (k, &wt) in ws.iter().enumerate() {
                let srow = &tmp[(ch * h + lo + k) * out_w..][..out_w];
                for (d, s) in dst.iter_mut().zip(srow) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
