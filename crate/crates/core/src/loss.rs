//! LSGAN adversarial terms, cycle consistency and the perceptual content loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dim, invalid, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Weights of the cycle and perceptual terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_perc: 0.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_cyc: f64, lambda_perc: f64) -> Result<Self> {
        let w = Self { lambda_cyc, lambda_perc };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_cyc) || !ok(self.lambda_perc) {
            return Err(invalid(
                "loss weights",
                format!("lambda_cyc={} lambda_perc={} must be finite and ≥ 0", self.lambda_cyc, self.lambda_perc),
            ));
        }
        Ok(())
    }
}

/// Generator term: `mean((D(G(x)) − 1)²)`.
pub fn loss_generator(g: &mut Graph, fake_scores: Var) -> Var {
    let d = g.add_scalar(fake_scores, -1.0);
    let sq = g.square(d);
    g.mean(sq)
}

/// Discriminator term: `mean((D(y) − 1)²) + mean(D(G(x))²)`.
///
/// `fake_scores` must come from a detached generator output.
pub fn loss_discriminator(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let real = loss_generator(g, real_scores);
    let sq = g.square(fake_scores);
    let fake = g.mean(sq);
    g.add(real, fake)
}

fn mean_abs(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(dim("loss_cycle", format!("shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let ab = g.abs(d);
    Ok(g.mean(ab))
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn loss_cycle(g: &mut Graph, x: Var, x_rec: Var, y: Var, y_rec: Var) -> Result<Var> {
    let a = mean_abs(g, x_rec, x)?;
    let b = mean_abs(g, y_rec, y)?;
    g.add(a, b)
}

/// One direction of the cycle term.
pub fn loss_reconstruction(g: &mut Graph, x: Var, x_rec: Var) -> Result<Var> {
    mean_abs(g, x_rec, x)
}

/// Fixed three-stage convolutional pyramid (3×3 convs + ReLU, strides 1, 2, 2).
///
/// Stands in for pretrained VGG features; the weights are drawn once from a
/// seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    stages: Vec<(Tensor, usize)>,
}

/// Output widths of the three stages.
pub const EXTRACTOR_WIDTHS: [usize; 3] = [8, 16, 32];
const EXTRACTOR_STRIDES: [usize; 3] = [1, 2, 2];

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_EXTRACTOR);
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (&c_out, &stride) in EXTRACTOR_WIDTHS.iter().zip(&EXTRACTOR_STRIDES) {
            let std = libm::sqrt(2.0 / (9 * c_in) as f64);
            let w = Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng::normal(&mut r) * std);
            stages.push((w, stride));
            c_in = c_out;
        }
        Self { seed, stages }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Dimension of pooled features: sum of stage widths.
    pub fn feature_dim(&self) -> usize {
        EXTRACTOR_WIDTHS.iter().sum()
    }

    pub fn stage_weights(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.stages.iter().map(|(w, s)| (w, *s))
    }

    /// Feature maps after each stage (the taps) for images `x: [b, 3, H, W]`.
    pub fn taps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (w, stride) in &self.stages {
            let wv = g.constant(w.clone());
            let c = g.conv2d(h, wv, None, *stride, 1)?;
            h = g.relu(c);
            taps.push(h);
        }
        Ok(taps)
    }

    /// Globally average-pooled taps, concatenated: `[b, feature_dim]`.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let taps = self.taps(&mut g, x)?;
        let b = images.shape()[0];
        let d = self.feature_dim();
        let mut out = alloc::vec![0.0; b * d];
        let mut offset = 0;
        for t in taps {
            let p = g.global_avg_pool(t)?;
            let width = g.shape(p)[1];
            for (bi, row) in g.value(p).data().chunks(width).enumerate() {
                out[bi * d + offset..bi * d + offset + width].copy_from_slice(row);
            }
            offset += width;
        }
        Tensor::new(&[b, d], out)
    }
}

/// Sum over taps of the mean squared feature difference between `x` and `x_rec`.
pub fn loss_perceptual(g: &mut Graph, x: Var, x_rec: Var, extractor: &FeatureExtractor) -> Result<Var> {
    if g.shape(x) != g.shape(x_rec) {
        return Err(dim("loss_perceptual", format!("shapes {:?} and {:?} differ", g.shape(x), g.shape(x_rec))));
    }
    let fx = extractor.taps(g, x)?;
    let fr = extractor.taps(g, x_rec)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fr) {
        let d = g.sub(b, a)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// Scalar components of the full objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub loss_g: f64,
    pub loss_f: f64,
    pub loss_dx: f64,
    pub loss_dy: f64,
    pub loss_cyc: f64,
    pub loss_perc: f64,
}

impl LossComponents {
    /// `L_G + L_F + L_DX + L_DY + λ_cyc·L_cyc + λ_perc·L_perc`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.loss_g + self.loss_f + self.loss_dx + self.loss_dy + w.lambda_cyc * self.loss_cyc + w.lambda_perc * self.loss_perc
    }

    pub fn all_finite(&self) -> bool {
        [self.loss_g, self.loss_f, self.loss_dx, self.loss_dy, self.loss_cyc, self.loss_perc]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Builds the weighted sum of scalar graph terms; zero-weight terms are skipped.
pub fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = if w == 1.0 { v } else { g.scale(v, w) };
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn lsgan_generator_values() {
        for (scores, want) in [(alloc::vec![1.0; 4], 0.0), (alloc::vec![0.0; 4], 1.0), (alloc::vec![0.5, 1.5], 0.25)] {
            let n = scores.len();
            let got = scalar_loss(|g| {
                let s = g.constant(Tensor::new(&[n], scores).unwrap());
                loss_generator(g, s)
            });
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn lsgan_discriminator_values() {
        let cases = [
            (alloc::vec![1.0, 1.0], alloc::vec![0.0, 0.0], 0.0),
            (alloc::vec![0.0, 0.0], alloc::vec![1.0, 1.0], 2.0),
            (alloc::vec![1.0, 0.0], alloc::vec![0.0, 1.0], 1.0),
        ];
        for (real, fake, want) in cases {
            let got = scalar_loss(|g| {
                let r = g.constant(Tensor::new(&[2], real).unwrap());
                let f = g.constant(Tensor::new(&[2], fake).unwrap());
                loss_discriminator(g, r, f).unwrap()
            });
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cycle_constant_offset() {
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.07).sin());
        let xr = x.map(|v| v + 0.1);
        let got = scalar_loss(|g| {
            let (a, b) = (g.constant(x.clone()), g.constant(xr));
            let (c, d) = (g.constant(x.clone()), g.constant(x.clone()));
            loss_cycle(g, a, b, c, d).unwrap()
        });
        assert!((got - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cycle_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 4, 2]));
        assert!(matches!(loss_cycle(&mut g, a, b, a, a), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn perceptual_zero_on_identical_and_positive_on_distinct() {
        let ex = FeatureExtractor::new(3);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let zero = scalar_loss(|g| {
            let (a, b) = (g.constant(x.clone()), g.constant(x.clone()));
            loss_perceptual(g, a, b, &ex).unwrap()
        });
        assert_eq!(zero, 0.0);
        // swap the two batch items
        let parts = x.unstack();
        let swapped = Tensor::stack(&[&parts[1], &parts[0]]).unwrap();
        let pos = scalar_loss(|g| {
            let (a, b) = (g.constant(x.clone()), g.constant(swapped));
            loss_perceptual(g, a, b, &ex).unwrap()
        });
        assert!(pos > 0.0);
    }

    #[test]
    fn weights_reject_negative() {
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(10.0, 0.001).is_ok());
    }

    #[test]
    fn total_with_zero_lambdas_is_adversarial_sum() {
        let c = LossComponents { loss_g: 1.0, loss_f: 2.0, loss_dx: 3.0, loss_dy: 4.0, loss_cyc: 5.0, loss_perc: 6.0 };
        assert_eq!(c.total(&LossWeights { lambda_cyc: 0.0, lambda_perc: 0.0 }), 10.0);
        assert_eq!(LossComponents::default().total(&LossWeights::default()), 0.0);
        assert_eq!(c.total(&LossWeights { lambda_cyc: 10.0, lambda_perc: 0.001 }), 10.0 + 50.0 + 0.006);
    }
}
