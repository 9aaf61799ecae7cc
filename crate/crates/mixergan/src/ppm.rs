//! Binary PPM (P6, maxval 255) images mapped to `[-1, 1]` floats.

use std::fs;
use std::path::{Path, PathBuf};

use mixergan_core::data::ImageRecord;
use mixergan_core::Tensor;

use crate::error::{io_err, AppError, AppResult};

/// `u = round((v + 1)·127.5)`, clamped to the byte range.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(u: u8) -> f64 {
    u as f64 / 127.5 - 1.0
}

/// Encodes a `[3, h, w]` tensor.
pub fn encode(pixels: &Tensor) -> AppResult<Vec<u8>> {
    let (h, w) = match *pixels.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(AppError::Usage(format!("cannot write a {:?} tensor as a PPM image", pixels.shape())));
        }
    };
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let d = pixels.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> AppError {
        AppError::Parse { path: self.path.to_path_buf(), offset: self.pos, message: message.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> AppResult<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {}", what)));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                self.pos = start;
                self.fail(format!("{} out of range", what))
            })
    }
}

/// Parses a P6 file; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> AppResult<Tensor> {
    let mut c = Cursor { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return Err(c.fail("missing P6 magic"));
    }
    c.pos = 2;
    let w = c.number("width")?;
    let h = c.number("height")?;
    let max = c.number("maxval")?;
    if max != 255 {
        return Err(c.fail(format!("maxval {} unsupported (only 255)", max)));
    }
    if w == 0 || h == 0 {
        return Err(c.fail("zero image extent"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.fail("expected a single whitespace byte after maxval")),
    }
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or_else(|| c.fail("image too large"))?;
    let payload = &bytes[c.pos..];
    if payload.len() != need {
        let what = if payload.len() < need { "truncated payload" } else { "trailing bytes after payload" };
        c.pos = bytes.len().min(c.pos + need);
        return Err(c.fail(format!("{}: {}×{} needs {} bytes, found {}", what, w, h, need, payload.len())));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = dequantize(px[ch]);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn save(path: &Path, pixels: &Tensor) -> AppResult<()> {
    fs::write(path, encode(pixels)?).map_err(io_err(path))
}

pub fn load(path: &Path) -> AppResult<ImageRecord> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let t = decode(&bytes, path)?;
    Ok(ImageRecord::new(t, path.display().to_string())?)
}

/// Sorted `*.ppm` files directly inside `dir`.
pub fn list_dir(dir: &Path) -> AppResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> AppResult<Vec<ImageRecord>> {
    list_dir(dir)?.iter().map(|p| load(p)).collect()
}

/// Tiles equally sized `[3, h, w]` images into a `rows × cols` grid.
pub fn grid(images: &[Tensor], cols: usize) -> AppResult<Tensor> {
    let first = images.first().ok_or_else(|| AppError::Usage("empty image grid".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if images.iter().any(|t| t.shape() != first.shape()) {
        return Err(AppError::Usage("grid images differ in shape".into()));
    }
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(&[3, gh, gw], -1.0);
    let d = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d[(c * gh + r0 + y) * gw + c0 + x] = img.data()[(c * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}
