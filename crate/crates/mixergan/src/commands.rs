//! Inference, metrics, cost analysis and dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use mixergan_core::cost::{self, Axis, BlockKind, BlockSpec, Sweep};
use mixergan_core::loss::FeatureExtractor;
use mixergan_core::metrics::{extract_features, FeatureSet, MetricReport};
use mixergan_core::nn::{Generator, GeneratorParams};
use mixergan_core::params::Tree;
use mixergan_core::train::{self, Direction};
use mixergan_core::{rng, Tensor};

use crate::checkpoint::{hex, Checkpoint};
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{io_err, AppError, AppResult};
use crate::ppm;

pub fn parse_direction(s: &str) -> AppResult<Direction> {
    match s.to_ascii_lowercase().as_str() {
        "x2y" => Ok(Direction::XToY),
        "y2x" => Ok(Direction::YToX),
        _ => Err(AppError::Usage(format!("direction `{}` must be X2Y or Y2X", s))),
    }
}

/// Loads generator `G` (X→Y) or `F` (Y→X) from a checkpoint after checking
/// its geometry hash against `expected`.
pub fn load_generator(ckpt: &Checkpoint, expected: &RunConfig, direction: Direction) -> AppResult<GeneratorParams> {
    let want = expected.geometry_hash();
    if ckpt.config_hash != want {
        return Err(AppError::HashMismatch { expected: hex(&want), found: hex(&ckpt.config_hash) });
    }
    let prefix = match direction {
        Direction::XToY => "G",
        Direction::YToX => "F",
    };
    // shapes only; every value is overwritten below
    let mut gen = Generator::init(&expected.training.generator, &mut rng::stream(0, 0))?;
    let mut missing = None;
    gen.visit_mut("", &mut |name, p| {
        let key = format!("{}.{}", prefix, name);
        match ckpt.get(&key) {
            Some(t) if t.shape() == p.shape() => *p = t.clone(),
            _ => {
                missing.get_or_insert(key);
            }
        }
    });
    match missing {
        Some(name) => Err(AppError::Core(mixergan_core::Error::MissingState { name })),
        None => Ok(gen),
    }
}

pub struct TranslateSummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn translate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    direction: Direction,
    expected: &RunConfig,
) -> AppResult<TranslateSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let gen = load_generator(&ckpt, expected, direction)?;
    let files = ppm::list_dir(input)?;
    fs::create_dir_all(output).map_err(io_err(output))?;
    let mut summary = TranslateSummary { written: Vec::new(), warnings: Vec::new() };
    if files.is_empty() {
        summary.warnings.push(format!("no .ppm images in {}", input.display()));
        return Ok(summary);
    }
    let cfg = &expected.training.generator;
    for file in files {
        let img = ppm::load(&file)?;
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(AppError::Usage(format!(
                "{} is {}x{}, the generator expects {}x{}",
                file.display(),
                img.width(),
                img.height(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        let batch = Tensor::stack(&[&img.pixels])?;
        let out = train::translate(&gen, cfg, &batch)?;
        let target = output.join(file.file_name().expect("listed files have names"));
        ppm::save(&target, &out.unstack()[0])?;
        summary.written.push(target);
    }
    Ok(summary)
}

fn features(images: &[mixergan_core::data::ImageRecord], ex: &FeatureExtractor) -> AppResult<FeatureSet> {
    let mut rows = Vec::new();
    for chunk in images.chunks(16) {
        let shape = chunk[0].pixels.shape();
        if chunk.iter().any(|r| r.pixels.shape() != shape) {
            return Err(AppError::Usage("metric images must share one size".into()));
        }
        let batch = mixergan_core::data::stack_images(chunk)?;
        rows.extend_from_slice(extract_features(&batch, ex)?.row_data());
    }
    Ok(FeatureSet::new(images.len(), ex.feature_dim(), rows, format!("conv-pyramid(seed={})", ex.seed()))?)
}

pub struct MetricOptions {
    pub extractor_seed: u64,
    pub subset_size: usize,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            extractor_seed: 0,
            subset_size: mixergan_core::metrics::DEFAULT_SUBSET_SIZE,
            subsets: mixergan_core::metrics::DEFAULT_SUBSETS,
            seed: 0,
        }
    }
}

pub fn metrics(real: &Path, fake: &Path, opts: &MetricOptions) -> AppResult<MetricReport> {
    let r = ppm::load_dir(real)?;
    let f = ppm::load_dir(fake)?;
    for (dir, set) in [(real, &r), (fake, &f)] {
        if set.len() < opts.subset_size.max(2) {
            return Err(AppError::Core(mixergan_core::Error::Validation {
                what: "metrics",
                detail: format!("{} has {} images, the KID subset size is {}", dir.display(), set.len(), opts.subset_size),
            }));
        }
    }
    let ex = FeatureExtractor::new(opts.extractor_seed);
    let fr = features(&r, &ex)?;
    let ff = features(&f, &ex)?;
    Ok(MetricReport::compute(&fr, &ff, opts.subset_size, opts.subsets, opts.seed)?)
}

pub struct CostRequest {
    pub kinds: Vec<BlockKind>,
    pub template: BlockSpec,
    pub sweep: Option<(Axis, Vec<u64>)>,
    pub patch: u32,
    pub multiplier: u32,
}

pub struct CostOutput {
    pub sweeps: Vec<Sweep>,
    pub csv: String,
    pub retention: f64,
}

/// Parses `lo:hi` (doubling) or a comma-separated list.
pub fn parse_sweep_values(s: &str) -> AppResult<Vec<u64>> {
    let bad = || AppError::Usage(format!("sweep values `{}` must be lo:hi or a comma list of integers", s));
    if let Some((lo, hi)) = s.split_once(':') {
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        return Ok(cost::doubling(lo, hi)?);
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

pub fn analyze_cost(req: &CostRequest) -> AppResult<CostOutput> {
    let (axis, values) = match &req.sweep {
        Some((a, v)) => (*a, v.clone()),
        None => (Axis::N, vec![req.template.n]),
    };
    let sweeps = req
        .kinds
        .iter()
        .map(|&kind| cost::sweep(&BlockSpec { kind, ..req.template }, axis, &values))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CostOutput { csv: cost::to_csv(&sweeps), sweeps, retention: cost::retention_ratio(req.patch, req.multiplier) })
}

pub fn retention_line(p: u32, m: u32, ratio: f64) -> String {
    format!(
        "# retention m/p^2 = {} (p={}, m={}; {:.3}% of the patch dimensionality discarded)",
        ratio,
        p,
        m,
        100.0 * (1.0 - ratio)
    )
}

/// Writes the red/blue task under `out` and returns the image count.
pub fn synth_data(out: &Path, count: usize, test_count: usize, size: usize, seed: u64) -> AppResult<usize> {
    dataset::synthetic(count, test_count, size, seed)?.write(out)
}
