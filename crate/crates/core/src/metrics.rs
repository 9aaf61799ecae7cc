//! Kernel Inception Distance and Fréchet distance over arbitrary feature
//! vectors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;

use crate::error::{dim, invalid, Result};
use crate::loss::FeatureExtractor;
use crate::rng;
use crate::tensor::Tensor;

pub const KID_DEGREE: u32 = 3;
pub const DEFAULT_SUBSET_SIZE: usize = 50;
pub const DEFAULT_SUBSETS: usize = 10;
/// Eigenvalues below this fraction of the largest are treated as zero.
pub const FID_EIGEN_TOLERANCE: f64 = 1e-10;

/// `m × d` feature matrix with the extractor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(dim_err(rows, dim, data.len()));
        }
        if dim == 0 {
            return Err(invalid("feature set", "feature dimension must be ≥ 1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature set", "features contain non-finite values"));
        }
        Ok(Self { rows, dim, data, tag: tag.into() })
    }

    /// From a `[m, d]` tensor.
    pub fn from_tensor(t: &Tensor, tag: impl Into<String>) -> Result<Self> {
        match *t.shape() {
            [m, d] => Self::new(m, d, t.data().to_vec(), tag),
            _ => Err(dim("feature set", format!("expected [m, d], got {:?}", t.shape()))),
        }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `m × d` values.
    pub fn row_data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// True when every feature is constant across samples.
    pub fn zero_variance(&self) -> bool {
        (1..self.rows).all(|i| self.row(i) == self.row(0))
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }
}

fn dim_err(rows: usize, d: usize, len: usize) -> crate::Error {
    dim("feature set", format!("{} × {} features need {} values, got {}", rows, d, rows * d, len))
}

/// Features of `[b, 3, h, w]` images from the pooled extractor pyramid.
pub fn extract_features(images: &Tensor, extractor: &FeatureExtractor) -> Result<FeatureSet> {
    if images.rank() != 4 || images.shape()[1] != 3 {
        return Err(dim("extract features", format!("expected [b, 3, h, w], got {:?}", images.shape())));
    }
    let pooled = extractor.pooled(images)?;
    FeatureSet::from_tensor(&pooled, format!("conv-pyramid(seed={})", extractor.seed()))
}

fn kernel(x: &[f64], y: &[f64], d: usize) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let t = dot / d as f64 + 1.0;
    t * t * t
}

fn pairwise(a: &[&[f64]], b: &[&[f64]], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(kernel(x, y, d));
        }
    }
    out
}

/// Unbiased MMD² between two samples under the cubic polynomial kernel.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(invalid("MMD", format!("need ≥ 2 samples per side, got {} and {}", m, n)));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|r| r.len() != d) {
        return Err(dim("MMD", "feature rows differ in length"));
    }
    let within = |s: &[&[f64]]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    total += kernel(s[i], s[j], d);
                }
            }
        }
        total / (s.len() * (s.len() - 1)) as f64
    };
    // Sorting makes the cross sum independent of argument order.
    let mut cross = pairwise(x, y, d);
    cross.sort_by(f64::total_cmp);
    let kxy: f64 = cross.iter().sum::<f64>() / (m * n) as f64;
    Ok(within(x) + within(y) - 2.0 * kxy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
    pub per_subset: Vec<f64>,
}

/// KID over `n_subsets` random subsets of `subset_size` samples from each
/// set. Subset `i` draws its indices from seeded stream `i`; equal-sized
/// sets therefore share indices, which keeps the estimate symmetric.
pub fn kid(real: &FeatureSet, fake: &FeatureSet, subset_size: usize, n_subsets: usize, seed: u64) -> Result<KidEstimate> {
    if real.dim() != fake.dim() {
        return Err(dim("KID", format!("feature dims {} and {} differ", real.dim(), fake.dim())));
    }
    if subset_size < 2 {
        return Err(invalid("KID", format!("subset size {} must be ≥ 2", subset_size)));
    }
    if n_subsets == 0 {
        return Err(invalid("KID", "need ≥ 1 subset"));
    }
    if subset_size > real.len() || subset_size > fake.len() {
        return Err(invalid(
            "KID",
            format!("subset size {} exceeds available samples ({} real, {} fake)", subset_size, real.len(), fake.len()),
        ));
    }
    let pick = |set: &FeatureSet, stream: u64| -> Vec<usize> {
        let mut r = rng::stream(seed, stream);
        let mut idx = index::sample(&mut r, set.len(), subset_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut per_subset = Vec::with_capacity(n_subsets);
    for i in 0..n_subsets {
        let xs: Vec<&[f64]> = pick(real, i as u64).into_iter().map(|j| real.row(j)).collect();
        let ys: Vec<&[f64]> = pick(fake, i as u64).into_iter().map(|j| fake.row(j)).collect();
        per_subset.push(mmd2_unbiased(&xs, &ys)?);
    }
    let k = per_subset.len() as f64;
    let mean = per_subset.iter().sum::<f64>() / k;
    let var = per_subset.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    Ok(KidEstimate { mean, std: libm::sqrt(var), per_subset })
}

fn mean_and_cov(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = set.matrix();
    let m = set.len() as f64;
    let mu = DVector::from_iterator(set.dim(), x.column_iter().map(|c| c.sum() / m));
    let mut centered = x;
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    let cov = centered.transpose() * &centered / (m - 1.0);
    (mu, cov)
}

fn clamp_eigenvalues(values: &mut DVector<f64>) {
    let max = values.iter().cloned().fold(0.0, f64::max);
    for v in values.iter_mut() {
        if *v < FID_EIGEN_TOLERANCE * max || *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `‖μ_r − μ_f‖² + tr(Σ_r + Σ_f − 2(Σ_r Σ_f)^½)`.
///
/// `tr((Σ_r Σ_f)^½)` is the sum of square roots of the eigenvalues of
/// `Λ^½ Vᵀ Σ_f V Λ^½`, where `Σ_r = V Λ Vᵀ`. That matrix is symmetric,
/// shares its spectrum with `Σ_r Σ_f`, and working in the eigenbasis of
/// `Σ_r` keeps rank-deficient directions exactly zero.
pub fn fid(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(dim("FID", format!("feature dims {} and {} differ", real.dim(), fake.dim())));
    }
    if real.len() < 2 || fake.len() < 2 {
        return Err(invalid("FID", "need ≥ 2 samples per set"));
    }
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_f, cov_f) = mean_and_cov(fake);
    let diff = &mu_r - &mu_f;

    let mut eig = SymmetricEigen::new(symmetrize(&cov_r));
    clamp_eigenvalues(&mut eig.eigenvalues);
    let s = eig.eigenvalues.map(libm::sqrt);
    let v = &eig.eigenvectors;
    let mut inner = v.transpose() * &cov_f * v;
    for i in 0..inner.nrows() {
        for j in 0..inner.ncols() {
            inner[(i, j)] *= s[i] * s[j];
        }
    }
    // Eigenvalues here scale like λ², so only roundoff negatives are dropped.
    let inner_vals = SymmetricEigen::new(symmetrize(&inner)).eigenvalues;
    let tr_sqrt: f64 = inner_vals.iter().map(|v| libm::sqrt(v.max(0.0))).sum();

    let value = diff.dot(&diff) + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(invalid("FID", "non-finite result"));
    }
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub kid_mean_x100: f64,
    pub kid_std_x100: f64,
    pub fid: f64,
    pub kernel_degree: u32,
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
    pub real_tag: String,
    pub fake_tag: String,
    pub zero_variance: bool,
}

impl MetricReport {
    pub fn compute(real: &FeatureSet, fake: &FeatureSet, subset_size: usize, n_subsets: usize, seed: u64) -> Result<Self> {
        let k = kid(real, fake, subset_size, n_subsets, seed)?;
        Ok(Self {
            kid_mean_x100: 100.0 * k.mean,
            kid_std_x100: 100.0 * k.std,
            fid: fid(real, fake)?,
            kernel_degree: KID_DEGREE,
            subset_size,
            n_subsets,
            seed,
            real_tag: real.tag.clone(),
            fake_tag: fake.tag.clone(),
            zero_variance: real.zero_variance() || fake.zero_variance(),
        })
    }

    pub const CSV_HEADER: &'static str = "kid_x100,kid_std_x100,fid,kernel_degree,subset_size,n_subsets,seed,zero_variance";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.kid_mean_x100,
            self.kid_std_x100,
            self.fid,
            self.kernel_degree,
            self.subset_size,
            self.n_subsets,
            self.seed,
            self.zero_variance
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "KID x100: {:.2} ± {:.2}", self.kid_mean_x100, self.kid_std_x100)?;
        writeln!(f, "FID: {:.4}", self.fid)?;
        write!(
            f,
            "kernel: cubic polynomial, subsets: {} × {}, seed: {}, features: {} vs {}",
            self.n_subsets, self.subset_size, self.seed, self.real_tag, self.fake_tag
        )?;
        if self.zero_variance {
            write!(f, "\nwarning: at least one feature set has zero variance")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(m: usize, d: usize, seed: u64, shift: f64) -> FeatureSet {
        let mut r = rng::stream(seed, 99);
        let data = (0..m * d).map(|_| rng::normal(&mut r) + shift).collect();
        FeatureSet::new(m, d, data, "gauss").unwrap()
    }

    fn split(set: &FeatureSet) -> (FeatureSet, FeatureSet) {
        let h = set.len() / 2;
        let d = set.dim();
        let a = FeatureSet::new(h, d, set.data[..h * d].to_vec(), "a").unwrap();
        let b = FeatureSet::new(set.len() - h, d, set.data[h * d..].to_vec(), "b").unwrap();
        (a, b)
    }

    fn rows(s: &FeatureSet) -> Vec<&[f64]> {
        (0..s.len()).map(|i| s.row(i)).collect()
    }

    // Textbook double loop, written independently of the estimator.
    fn brute_mmd2(x: &FeatureSet, y: &FeatureSet) -> f64 {
        let d = x.dim() as f64;
        let k = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for t in 0..a.len() {
                s += a[t] * b[t];
            }
            libm::pow(s / d + 1.0, 3.0)
        };
        let (m, n) = (x.len() as f64, y.len() as f64);
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    xx += k(x.row(i), x.row(j));
                }
            }
        }
        for i in 0..y.len() {
            for j in 0..y.len() {
                if i != j {
                    yy += k(y.row(i), y.row(j));
                }
            }
        }
        for i in 0..x.len() {
            for j in 0..y.len() {
                xy += k(x.row(i), y.row(j));
            }
        }
        xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
    }

    #[test]
    fn mmd_matches_brute_force() {
        let x = gaussian(30, 5, 1, 0.0);
        let y = gaussian(25, 5, 2, 0.3);
        let got = mmd2_unbiased(&rows(&x), &rows(&y)).unwrap();
        let want = brute_mmd2(&x, &y);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} {}", got, want);
    }

    #[test]
    fn kid_single_full_subset_matches_brute_force() {
        let (x, y) = split(&gaussian(40, 4, 3, 0.0));
        let k = kid(&x, &y, 20, 1, 7).unwrap();
        assert!((k.mean - brute_mmd2(&x, &y)).abs() < 1e-12);
        assert_eq!(k.std, 0.0);
    }

    #[test]
    fn kid_null_and_shift() {
        let (x, y) = split(&gaussian(200, 16, 4, 0.0));
        let null = kid(&x, &y, 50, 10, 0).unwrap();
        assert!(null.mean.abs() < 3.0 * null.std, "{:?}", (null.mean, null.std));
        let shifted = FeatureSet::new(y.len(), y.dim(), y.data.iter().map(|v| v + 5.0).collect(), "s").unwrap();
        let far = kid(&x, &shifted, 50, 10, 0).unwrap();
        assert!(far.mean > 100.0 * null.mean.abs(), "{} {}", far.mean, null.mean);
    }

    #[test]
    fn kid_symmetric() {
        let x = gaussian(60, 6, 5, 0.0);
        let y = gaussian(60, 6, 6, 0.5);
        assert_eq!(kid(&x, &y, 60, 1, 3).unwrap(), kid(&y, &x, 60, 1, 3).unwrap());
        assert_eq!(kid(&x, &y, 20, 5, 3).unwrap(), kid(&y, &x, 20, 5, 3).unwrap());
    }

    #[test]
    fn kid_unbiased_smoke() {
        let mut vals = Vec::new();
        for t in 0..200 {
            let x = gaussian(10, 3, 1000 + t, 0.0);
            let y = gaussian(10, 3, 5000 + t, 0.0);
            vals.push(mmd2_unbiased(&rows(&x), &rows(&y)).unwrap());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = libm::sqrt(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
        assert!(mean.abs() < 4.0 * sd / libm::sqrt(n), "{} {}", mean, sd);
    }

    #[test]
    fn kid_subset_too_large() {
        let x = gaussian(10, 3, 0, 0.0);
        assert!(kid(&x, &x, 11, 1, 0).is_err());
        assert!(kid(&x, &x, 1, 1, 0).is_err());
    }

    #[test]
    fn fid_identical_is_zero() {
        let x = gaussian(100, 8, 9, 0.0);
        assert!(fid(&x, &x).unwrap() < 1e-8);
    }

    #[test]
    fn fid_point_masses() {
        let a = FeatureSet::new(3, 2, alloc::vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], "a").unwrap();
        let b = FeatureSet::new(3, 2, alloc::vec![4.0, 6.0, 4.0, 6.0, 4.0, 6.0], "b").unwrap();
        assert!((fid(&a, &b).unwrap() - 25.0).abs() < 1e-12);
    }

    // Sylvester Hadamard columns (except the all-ones one) are centred and
    // mutually orthogonal, so scaled copies give exactly diagonal sample
    // covariance.
    fn diagonal_set(m: usize, mean: &[f64], scale: &[f64]) -> FeatureSet {
        let h = |i: usize, j: usize| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        let d = mean.len();
        let mut data = Vec::new();
        for i in 0..m {
            for k in 0..d {
                data.push(mean[k] + scale[k] * h(i, k + 1));
            }
        }
        FeatureSet::new(m, d, data, "diag").unwrap()
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let m = 16;
        let (mr, sr) = ([0.5, -1.0, 2.0, 0.0], [1.0, 0.2, 3.0, 0.7]);
        let (mf, sf) = ([0.0, 1.0, 2.5, -0.3], [0.4, 0.9, 1.0, 0.7]);
        let r = diagonal_set(m, &mr, &sr);
        let f = diagonal_set(m, &mf, &sf);
        let c = m as f64 / (m as f64 - 1.0);
        let mut want = 0.0;
        for k in 0..4 {
            let (var_r, var_f) = (sr[k] * sr[k] * c, sf[k] * sf[k] * c);
            want += (libm::sqrt(var_r) - libm::sqrt(var_f)).powi(2) + (mr[k] - mf[k]).powi(2);
        }
        let got = fid(&r, &f).unwrap();
        assert!((got - want).abs() < 1e-9, "{} {}", got, want);
    }

    #[test]
    fn fid_rotation_invariant() {
        let x = gaussian(80, 4, 11, 0.0);
        let y = gaussian(80, 4, 12, 0.4);
        let mut r = rng::stream(42, 0);
        let q = DMatrix::<f64>::from_fn(4, 4, |_, _| r.random::<f64>() - 0.5).qr().q();
        let rotate = |s: &FeatureSet| {
            let m = s.matrix() * &q;
            let data: Vec<f64> = (0..s.len()).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
            FeatureSet::new(s.len(), 4, data, "rot").unwrap()
        };
        let a = fid(&x, &y).unwrap();
        let b = fid(&rotate(&x), &rotate(&y)).unwrap();
        assert!((a - b).abs() < 1e-6, "{} {}", a, b);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(FeatureSet::new(2, 1, alloc::vec![1.0, f64::NAN], "x").is_err());
        assert!(FeatureSet::new(2, 2, alloc::vec![1.0], "x").is_err());
    }

    #[test]
    fn report_formatting_and_zero_variance() {
        let x = gaussian(20, 3, 1, 0.0);
        let c = FeatureSet::new(20, 3, alloc::vec![0.5; 60], "const").unwrap();
        assert!(c.zero_variance() && !x.zero_variance());
        let rep = MetricReport::compute(&x, &c, 10, 3, 0).unwrap();
        assert!(rep.zero_variance);
        let text = alloc::format!("{}", rep);
        assert!(text.contains(&alloc::format!("{:.2} ± {:.2}", rep.kid_mean_x100, rep.kid_std_x100)));
        assert!(text.contains("zero variance"));
        assert_eq!(rep.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn extractor_features() {
        let ex = FeatureExtractor::new(3);
        let imgs = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i % 13) as f64 / 6.5) - 1.0);
        let a = extract_features(&imgs, &ex).unwrap();
        let b = extract_features(&imgs, &ex).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), ex.feature_dim());
        let konst = extract_features(&Tensor::full(&[3, 3, 8, 8], 0.2), &ex).unwrap();
        assert!(konst.zero_variance());
        assert!(extract_features(&Tensor::zeros(&[2, 1, 8, 8]), &ex).is_err());
    }
}
