//! Image tensors (`c × h × w`, values in `[−1, 1]`), PNG IO, sample grids and
//! foreground-area measurement.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the separator between grid cells, in pixels.
pub const GRID_SEPARATOR: usize = 2;
/// Foreground threshold on the Euclidean colour distance in `[−1, 1]` units.
pub const FOREGROUND_THRESHOLD: f64 = 0.25;

pub fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Interleaved 8-bit samples of a `c × h × w` image.
pub fn to_interleaved(img: &Tensor) -> Vec<u8> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(d[ch * h * w + p]));
        }
    }
    out
}

pub fn from_interleaved(bytes: &[u8], c: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = from_byte(bytes[p * c + ch]);
        }
    }
    Ok(Tensor::new(&[c, h, w], data)?)
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if img.rank() != 3 || !matches!(img.shape()[0], 1 | 3) {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("cannot encode tensor of shape {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if img.shape()[0] == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&to_interleaved(img)).map_err(err)?;
    writer.finish().map_err(err)
}

/// Reads a PNG as `3 × h × w` (colour) or `1 × h × w` (grayscale); alpha is
/// dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let err = |e: png::DecodingError| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Image {
                path: path.into(),
                msg: "unexpanded palette image".into(),
            })
        }
    };
    let mut packed = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            packed.extend_from_slice(&row[x * stride..x * stride + keep]);
        }
    }
    from_interleaved(&packed, keep, h, w)
}

/// Tiles equally shaped images row-major with white separators between
/// cells. Rows may have different lengths; short rows are padded white.
pub fn grid(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = rows.iter().flatten().next().ok_or_else(|| Error::Eval("empty grid".into()))?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if let Some(bad) = rows.iter().flatten().find(|t| t.shape() != first.shape()) {
        return Err(Error::Eval(format!(
            "grid cells differ in shape: {:?} vs {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * h + (rows.len() - 1) * GRID_SEPARATOR;
    let gw = cols * w + (cols - 1) * GRID_SEPARATOR;
    let mut out = Tensor::full(&[c, gh, gw], 1.0);
    let data = out.data_mut();
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            let (y0, x0) = (r * (h + GRID_SEPARATOR), k * (w + GRID_SEPARATOR));
            for ch in 0..c {
                for y in 0..h {
                    let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let at = (ch * gh + y0 + y) * gw + x0;
                    data[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

/// Number of pixels whose colour differs from `background` by more than
/// [`FOREGROUND_THRESHOLD`].
pub fn foreground_area(img: &Tensor, background: &[f64]) -> usize {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    (0..h * w)
        .filter(|&p| {
            let dist2: f64 = (0..c).map(|ch| (d[ch * h * w + p] - background[ch]).powi(2)).sum();
            dist2.sqrt() > FOREGROUND_THRESHOLD
        })
        .count()
}
