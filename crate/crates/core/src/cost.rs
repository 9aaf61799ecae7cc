//! Exact parameter and activation-float counts for single sequence-mixing
//! blocks: multi-head self-attention, the token-mixing MLP, and a two-layer
//! convolutional residual block.
//!
//! Accounting (floats retained between forward and backward):
//!
//! * self-attention: Q, K, V, the head-concatenated context and the output
//!   projection (`5·b·n·c`), plus raw scores and softmax probabilities per
//!   head (`2·h·b·n²`). Parameters: per-head `c × c/h` Q/K/V projections,
//!   a `c × c` output projection and biases, `4c² + 4c` in total.
//! * token mixer: LayerNorm output and its per-row mean / inverse std
//!   (`b·n·c + 2·b·n`), the hidden layer before and after GELU
//!   (`2·e·b·n·c`), the second projection and the residual sum (`2·b·n·c`).
//!   Parameters: `n × e·n` and `e·n × n` weights with biases.
//! * conv residual: two `k × k` convolutions, each retaining its output and
//!   its activation (`4·b·n·c`); parameters `2(k²c² + c)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    SelfAttention,
    TokenMixer,
    ConvResidual,
}

impl BlockKind {
    pub fn tag(self) -> &'static str {
        match self {
            BlockKind::SelfAttention => "sa",
            BlockKind::TokenMixer => "tm",
            BlockKind::ConvResidual => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sa" | "self-attention" => Ok(BlockKind::SelfAttention),
            "tm" | "token-mixer" => Ok(BlockKind::TokenMixer),
            "conv" | "conv-residual" => Ok(BlockKind::ConvResidual),
            other => Err(invalid("block kind", format!("unknown kind `{}` (expected sa, tm or conv)", other))),
        }
    }

    /// Asymptotic classes `(parameters, activations)`.
    pub fn classes(self) -> (&'static str, &'static str) {
        match self {
            BlockKind::SelfAttention => ("O(hc^2)", "O(hbn^2 + bnc)"),
            BlockKind::TokenMixer => ("O(n^2)", "O(bnc)"),
            BlockKind::ConvResidual => ("O(k^2c^2)", "O(bnc)"),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One block's extents. Fields a kind does not use are still validated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Tokens (spatial positions for the conv block).
    pub n: u64,
    pub c: u64,
    pub h: u64,
    pub b: u64,
    pub k: u64,
    /// Hidden width multiplier of the token MLP.
    pub expansion: u64,
}

impl BlockSpec {
    pub fn new(kind: BlockKind) -> Self {
        Self { kind, n: 64, c: 128, h: 8, b: 8, k: 3, expansion: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", self.n), ("c", self.c), ("h", self.h), ("b", self.b), ("k", self.k), ("expansion", self.expansion)] {
            if v == 0 {
                return Err(invalid("block spec", format!("{} must be ≥ 1", name)));
            }
        }
        if self.kind == BlockKind::SelfAttention && self.c % self.h != 0 {
            return Err(invalid(
                "block spec",
                format!("channels {} not divisible by heads {}", self.c, self.h),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub spec: BlockSpec,
    pub parameter_count: u64,
    pub activation_floats: u64,
    pub parameter_class: &'static str,
    pub activation_class: &'static str,
}

pub fn params_of(spec: &BlockSpec) -> Result<u64> {
    spec.validate()?;
    let BlockSpec { n, c, h, k, expansion: e, .. } = *spec;
    Ok(match spec.kind {
        BlockKind::SelfAttention => {
            let dh = c / h;
            h * 3 * (c * dh + dh) + c * c + c
        }
        BlockKind::TokenMixer => n * (e * n) + e * n + (e * n) * n + n,
        BlockKind::ConvResidual => 2 * (k * k * c * c + c),
    })
}

pub fn activations_of(spec: &BlockSpec) -> Result<u64> {
    spec.validate()?;
    let BlockSpec { n, c, h, b, expansion: e, .. } = *spec;
    Ok(match spec.kind {
        BlockKind::SelfAttention => 5 * b * n * c + 2 * h * b * n * n,
        BlockKind::TokenMixer => (3 + 2 * e) * b * n * c + 2 * b * n,
        BlockKind::ConvResidual => 4 * b * n * c,
    })
}

pub fn report(spec: &BlockSpec) -> Result<CostReport> {
    let (parameter_class, activation_class) = spec.kind.classes();
    Ok(CostReport {
        spec: *spec,
        parameter_count: params_of(spec)?,
        activation_floats: activations_of(spec)?,
        parameter_class,
        activation_class,
    })
}

/// Fraction of the activation dimensionality kept by a patch projection
/// that maps `p²·c` inputs to `m·c` outputs.
pub fn retention_ratio(p: u32, m: u32) -> f64 {
    m as f64 / (p as f64 * p as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    B,
    H,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Axis::N),
            "c" => Ok(Axis::C),
            "b" => Ok(Axis::B),
            "h" => Ok(Axis::H),
            other => Err(invalid("sweep axis", format!("unknown axis `{}` (expected n, c, b or h)", other))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Axis::N => "n",
            Axis::C => "c",
            Axis::B => "b",
            Axis::H => "h",
        }
    }

    fn set(self, spec: &mut BlockSpec, v: u64) {
        match self {
            Axis::N => spec.n = v,
            Axis::C => spec.c = v,
            Axis::B => spec.b = v,
            Axis::H => spec.h = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<u64>,
    pub reports: Vec<CostReport>,
}

pub fn sweep(template: &BlockSpec, axis: Axis, values: &[u64]) -> Result<Sweep> {
    if values.is_empty() {
        return Err(invalid("sweep", "no values"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("sweep", format!("values {:?} are not strictly increasing", values)));
    }
    let reports = values
        .iter()
        .map(|&v| {
            let mut spec = *template;
            axis.set(&mut spec, v);
            report(&spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep { axis, values: values.to_vec(), reports })
}

/// Doubling range `lo, 2·lo, …` up to and including `hi`.
pub fn doubling(lo: u64, hi: u64) -> Result<Vec<u64>> {
    if lo == 0 || hi < lo {
        return Err(invalid("sweep range", format!("{}:{} is not a range of positive values", lo, hi)));
    }
    let mut out = Vec::new();
    let mut v = lo;
    while v <= hi {
        out.push(v);
        v = match v.checked_mul(2) {
            Some(next) => next,
            None => break,
        };
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "kind,axis,value,params,activation_floats";

impl Sweep {
    pub fn csv_rows(&self) -> Vec<String> {
        self.values
            .iter()
            .zip(&self.reports)
            .map(|(v, r)| format!("{},{},{},{},{}", r.spec.kind, self.axis.tag(), v, r.parameter_count, r.activation_floats))
            .collect()
    }

    pub fn params(&self) -> Vec<u64> {
        self.reports.iter().map(|r| r.parameter_count).collect()
    }

    pub fn activations(&self) -> Vec<u64> {
        self.reports.iter().map(|r| r.activation_floats).collect()
    }
}

pub fn to_csv(sweeps: &[Sweep]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in sweeps {
        for row in s.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[u64], ys: &[u64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("log-log fit", format!("need ≥ 2 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| v == 0) {
        return Err(invalid("log-log fit", "values must be positive"));
    }
    let lx: Vec<f64> = xs.iter().map(|&v| libm::log(v as f64)).collect();
    let ly: Vec<f64> = ys.iter().map(|&v| libm::log(v as f64)).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("log-log fit", "all x values are equal"));
    }
    Ok(sxy / sxx)
}

/// Gnuplot script plotting activation floats against the swept axis on
/// log-log axes, one series per kind, reading `csv_path`.
pub fn gnuplot_script(csv_path: &str, sweeps: &[Sweep]) -> String {
    let axis = sweeps.first().map_or("n", |s| s.axis.tag());
    let mut out = String::new();
    let _ = writeln!(out, "set datafile separator ','");
    let _ = writeln!(out, "set logscale xy");
    let _ = writeln!(out, "set xlabel '{}'", axis);
    let _ = writeln!(out, "set ylabel 'activation floats'");
    let _ = writeln!(out, "set key top left");
    let series: Vec<String> = sweeps
        .iter()
        .map(|s| {
            let kind = s.reports.first().map_or("?", |r| r.spec.kind.tag());
            format!(
                "'{}' using 3:(strcol(1) eq '{}' ? $5 : 1/0) with linespoints title '{}'",
                csv_path, kind, kind
            )
        })
        .collect();
    let _ = writeln!(out, "plot {}", series.join(", \\\n     "));
    out
}
