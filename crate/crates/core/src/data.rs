//! Synthetic two-domain image sets and unpaired, epoch-shuffled batch sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim, invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A 3-channel image with values in `[-1, 1]`, stored `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor,
    pub source: String,
}

impl ImageRecord {
    /// Clamps into `[-1, 1]` and checks the `[3, h, w]` layout.
    pub fn new(pixels: Tensor, source: impl Into<String>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(dim("ImageRecord", format!("expected [3, h, w], got {:?}", pixels.shape())));
        }
        if !pixels.is_finite() {
            return Err(invalid("image", "non-finite pixel values"));
        }
        Ok(Self { pixels: pixels.map(|v| v.clamp(-1.0, 1.0)), source: source.into() })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Mean of `red − blue` over all pixels.
    pub fn red_blue_gap(&self) -> f64 {
        mean_red_blue_gap(&self.pixels)
    }

    /// Mirrors the image left-to-right.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        let px = Tensor::from_fn(&[3, h, w], |i| {
            let (row, col) = (i / w, i % w);
            d[row * w + (w - 1 - col)]
        });
        Self { pixels: px, source: self.source.clone() }
    }
}

/// Mean `red − blue` of a `[3, h, w]` or `[b, 3, h, w]` tensor.
pub fn mean_red_blue_gap(t: &Tensor) -> f64 {
    let s = t.shape();
    let plane = s[s.len() - 1] * s[s.len() - 2];
    let images = t.numel() / (3 * plane);
    let d = t.data();
    let mut acc = 0.0;
    for i in 0..images {
        let base = i * 3 * plane;
        for p in 0..plane {
            acc += d[base + p] - d[base + 2 * plane + p];
        }
    }
    acc / (images * plane) as f64
}

/// Swaps the red and blue channels. Maps hue `h` to `240° − h`, so a domain
/// whose palette is the mirror image of another's is its exact translation.
pub fn swap_red_blue(t: &Tensor) -> Tensor {
    let s = t.shape();
    let plane = s[s.len() - 1] * s[s.len() - 2];
    let mut out = t.clone();
    let d = out.data_mut();
    for base in (0..d.len()).step_by(3 * plane) {
        for p in 0..plane {
            d.swap(base + p, base + 2 * plane + p);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Circles,
    Squares,
    Mixed,
}

/// Hue range in degrees; the hue is `start + (end − start)·u` for `u ~ U[0, 1)`,
/// so `end < start` is allowed and mirrors the draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub hue_start: f64,
    pub hue_end: f64,
}

impl Palette {
    pub const RED: Palette = Palette { hue_start: -15.0, hue_end: 15.0 };
    /// Mirror of [`Palette::RED`] under a red/blue channel swap.
    pub const BLUE: Palette = Palette { hue_start: 255.0, hue_end: 225.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub domain: String,
    pub family: ShapeFamily,
    pub palette: Palette,
    pub texture_amplitude: f64,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl SyntheticDomainSpec {
    /// Red-shape domain (`trainA`) of the default desk task.
    pub fn red(count: usize, image_size: usize, seed: u64) -> Self {
        Self {
            domain: "A".into(),
            family: ShapeFamily::Mixed,
            palette: Palette::RED,
            texture_amplitude: 0.1,
            count,
            seed,
            image_size,
        }
    }

    /// Blue-shape domain (`trainB`); identical to [`Self::red`] apart from the palette.
    pub fn blue(count: usize, image_size: usize, seed: u64) -> Self {
        Self { domain: "B".into(), palette: Palette::BLUE, ..Self::red(count, image_size, seed) }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = libm::fmod(libm::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - libm::fabs(libm::fmod(h, 2.0) - 1.0));
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Procedural images: a gray textured background and one or two filled shapes
/// colored from the domain palette. Image `i` depends only on `(seed, i)`.
pub fn synthesize_domain(spec: &SyntheticDomainSpec) -> Result<Vec<ImageRecord>> {
    if spec.count == 0 {
        return Err(invalid("synthetic domain", "count must be at least 1"));
    }
    if spec.image_size < 4 {
        return Err(invalid("synthetic domain", format!("image size {} is too small", spec.image_size)));
    }
    let n = spec.image_size;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut r = rng::stream(spec.seed, i as u64);
        let gray: f64 = r.random_range(-0.3..0.3);
        let fx: f64 = r.random_range(0.2..0.6);
        let fy: f64 = r.random_range(0.2..0.6);
        let phase: f64 = r.random_range(0.0..core::f64::consts::TAU);
        let mut img = Tensor::zeros(&[3, n, n]);
        {
            let d = img.data_mut();
            for y in 0..n {
                for x in 0..n {
                    let v = gray + spec.texture_amplitude * libm::sin(fx * x as f64 + fy * y as f64 + phase);
                    for c in 0..3 {
                        d[(c * n + y) * n + x] = v;
                    }
                }
            }
        }
        let shapes = 1 + r.random_range(0..2usize);
        for _ in 0..shapes {
            let square = match spec.family {
                ShapeFamily::Circles => false,
                ShapeFamily::Squares => true,
                ShapeFamily::Mixed => r.random_bool(0.5),
            };
            let radius = r.random_range(n as f64 / 6.0..n as f64 / 3.0);
            let cx = r.random_range(0.0..n as f64);
            let cy = r.random_range(0.0..n as f64);
            let u: f64 = r.random_range(0.0..1.0);
            let sat: f64 = r.random_range(0.7..1.0);
            let val: f64 = r.random_range(0.7..1.0);
            let hue = spec.palette.hue_start + (spec.palette.hue_end - spec.palette.hue_start) * u;
            let rgb = hsv_to_rgb(hue, sat, val);
            let d = img.data_mut();
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = if square {
                        dx.abs() <= radius && dy.abs() <= radius
                    } else {
                        dx * dx + dy * dy <= radius * radius
                    };
                    if inside {
                        for c in 0..3 {
                            d[(c * n + y) * n + x] = 2.0 * rgb[c] - 1.0;
                        }
                    }
                }
            }
        }
        out.push(ImageRecord::new(img, format!("synthetic:{}:{}:{}", spec.domain, spec.seed, i))?);
    }
    Ok(out)
}

/// Epoch-shuffled index stream for one domain. The permutation for epoch `e`
/// is a pure function of `(seed, domain, e)`, so the stream can be restored
/// from `(epoch, position)` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSampler {
    len: usize,
    seed: u64,
    domain: u64,
    flip: bool,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
    flips: Vec<bool>,
}

impl DomainSampler {
    pub fn new(len: usize, seed: u64, domain: u64, flip: bool) -> Result<Self> {
        if len == 0 {
            return Err(invalid("dataset", "domain has no images"));
        }
        let mut s = Self { len, seed, domain, flip, epoch: 0, pos: 0, order: Vec::new(), flips: Vec::new() };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut r = rng::stream(self.seed, rng::STREAM_SHUFFLE + (self.domain << 32) + self.epoch);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut r);
        self.flips = (0..self.len).map(|_| self.flip && r.random_bool(0.5)).collect();
    }

    /// Next `(index, flip)`; starts a new epoch when the current one is exhausted.
    pub fn next_index(&mut self) -> (usize, bool) {
        if self.pos == self.len {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let out = (self.order[self.pos], self.flips[self.pos]);
        self.pos += 1;
        out
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.pos)
    }

    pub fn restore(&mut self, epoch: u64, pos: usize) -> Result<()> {
        if pos > self.len {
            return Err(invalid("sampler state", format!("position {} beyond {} images", pos, self.len)));
        }
        self.epoch = epoch;
        self.pos = pos;
        self.shuffle();
        Ok(())
    }
}

/// Independent per-domain streams; no pairing between the two draws.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedSampler {
    pub x: DomainSampler,
    pub y: DomainSampler,
}

impl UnpairedSampler {
    pub fn new(len_x: usize, len_y: usize, seed: u64, flip: bool) -> Result<Self> {
        Ok(Self { x: DomainSampler::new(len_x, seed, 0, flip)?, y: DomainSampler::new(len_y, seed, 1, flip)? })
    }
}

fn draw(data: &[ImageRecord], sampler: &mut DomainSampler, batch: usize) -> Result<Tensor> {
    let mut picked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (i, flip) = sampler.next_index();
        picked.push(if flip { data[i].flipped().pixels } else { data[i].pixels.clone() });
    }
    Tensor::stack(&picked.iter().collect::<Vec<_>>())
}

/// Draws `[batch, 3, h, w]` tensors from each domain.
pub fn sample_unpaired_batch(
    data_x: &[ImageRecord],
    data_y: &[ImageRecord],
    batch: usize,
    sampler: &mut UnpairedSampler,
) -> Result<(Tensor, Tensor)> {
    if data_x.is_empty() || data_y.is_empty() || batch == 0 {
        return Err(invalid("batch", "datasets must be non-empty and batch ≥ 1"));
    }
    if data_x.len() != sampler.x.len || data_y.len() != sampler.y.len {
        return Err(invalid("batch", "sampler was built for datasets of different sizes"));
    }
    Ok((draw(data_x, &mut sampler.x, batch)?, draw(data_y, &mut sampler.y, batch)?))
}

/// Stacks whole datasets into one `[n, 3, h, w]` tensor.
pub fn stack_images(images: &[ImageRecord]) -> Result<Tensor> {
    Tensor::stack(&images.iter().map(|r| &r.pixels).collect::<Vec<_>>())
}
