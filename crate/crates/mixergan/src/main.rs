use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixergan::commands::{self, CostRequest, MetricOptions};
use mixergan::config::{split_pair, Preset, RunConfig};
use mixergan::run;
use mixergan_core::cost::{Axis, BlockKind, BlockSpec};

#[derive(Parser)]
#[command(name = "mixergan", version, about = "MLP-Mixer CycleGAN: training, inference, metrics and cost analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset root or the synthetic red/blue task.
    Train(TrainArgs),
    /// Translate a directory of PPM images with a trained generator.
    Translate(TranslateArgs),
    /// KID and FID between two image directories.
    Metrics(MetricsArgs),
    /// Parameter and activation counts for sequence-mixing blocks.
    AnalyzeCost(CostArgs),
    /// Write the synthetic red/blue dataset as PPM files.
    SynthData(SynthArgs),
}

/// Settings shared by commands that build a model.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key (repeatable): --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Latent channel width (token dimension after patch projection).
    #[arg(long)]
    channels: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (k, v) in [("image_size", self.image_size), ("patch_size", self.patch), ("channels", self.channels)] {
            if let Some(v) = v {
                out.push((k.to_string(), v.to_string()));
            }
        }
        for pair in &self.set {
            out.push(split_pair(pair)?);
        }
        Ok(out)
    }

    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
            None => None,
        };
        let preset = self.preset.as_deref().map(Preset::parse).transpose()?;
        let mut overrides = extra;
        overrides.extend(self.overrides()?);
        Ok(RunConfig::resolve(text.as_deref(), preset, &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Use the procedural red/blue task.
    #[arg(long)]
    synthetic: bool,
    /// Dataset root with trainA/ and trainB/ (testA/, testB/ optional).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory that receives the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_perc: Option<f64>,
    /// Continue from a checkpoint (its stored config applies; --set may extend iters).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// X2Y (generator G) or Y2X (generator F).
    #[arg(long, default_value = "X2Y")]
    direction: String,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    #[arg(long, default_value_t = mixergan_core::metrics::DEFAULT_SUBSET_SIZE)]
    subset_size: usize,
    #[arg(long, default_value_t = mixergan_core::metrics::DEFAULT_SUBSETS)]
    subsets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// sa, tm, conv or all.
    #[arg(long, default_value = "all")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    n: u64,
    #[arg(long, default_value_t = 128)]
    c: u64,
    #[arg(long, default_value_t = 8)]
    h: u64,
    #[arg(long, default_value_t = 8)]
    b: u64,
    #[arg(long, default_value_t = 3)]
    k: u64,
    #[arg(long, default_value_t = 2)]
    expansion: u64,
    /// Axis (n, c, b, h) and values (`lo:hi` doubling or a comma list).
    #[arg(long, num_args = 2, value_names = ["AXIS", "VALUES"])]
    sweep: Option<Vec<String>>,
    /// Patch size for the retention report.
    #[arg(long, default_value_t = 8)]
    patch: u32,
    /// Token width as a multiple of the feature channels.
    #[arg(long, default_value_t = 2)]
    multiplier: u32,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write a gnuplot script plotting the CSV.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Images per test split.
    #[arg(long, default_value_t = 16)]
    test_count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if a.synthetic {
        extra.push(("synthetic".into(), "true".into()));
    }
    if let Some(d) = &a.data {
        extra.push(("data_root".into(), d.display().to_string()));
    }
    if let Some(o) = &a.out {
        extra.push(("out_dir".into(), o.display().to_string()));
    }
    let flags = [
        ("iters", a.iters.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("lambda_cyc", a.lambda_cyc.map(|v| v.to_string())),
        ("lambda_perc", a.lambda_perc.map(|v| v.to_string())),
    ];
    extra.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let stdout = io::stdout();
    let mut log = stdout.lock();
    let outcome = match &a.resume {
        Some(ckpt) => {
            let mut overrides = extra;
            overrides.extend(a.config.overrides()?);
            run::resume(ckpt, &overrides, &mut log)?
        }
        None => {
            let cfg = a.config.resolve(extra)?;
            run::train(&cfg, &mut log)?
        }
    };
    writeln!(log, "wrote {} checkpoint(s) to {}", outcome.checkpoints.len(), outcome.dir.display())?;
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let cfg = a.config.resolve(Vec::new())?;
    let direction = commands::parse_direction(&a.direction)?;
    let summary = commands::translate(&a.checkpoint, &a.input, &a.output, direction, &cfg)?;
    for w in &summary.warnings {
        eprintln!("warning: {}", w);
    }
    println!("translated {} image(s) into {}", summary.written.len(), a.output.display());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let opts = MetricOptions { extractor_seed: a.extractor_seed, subset_size: a.subset_size, subsets: a.subsets, seed: a.seed };
    let report = commands::metrics(&a.real, &a.fake, &opts)?;
    println!("{}", report);
    if let Some(path) = a.csv {
        let body = format!("{}\n{}\n", mixergan_core::metrics::MetricReport::CSV_HEADER, report.csv_row());
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let kinds = if a.kind == "all" {
        vec![BlockKind::SelfAttention, BlockKind::TokenMixer, BlockKind::ConvResidual]
    } else {
        vec![BlockKind::parse(&a.kind)?]
    };
    let sweep = match &a.sweep {
        Some(v) => Some((Axis::parse(&v[0])?, commands::parse_sweep_values(&v[1])?)),
        None => None,
    };
    let template = BlockSpec { kind: kinds[0], n: a.n, c: a.c, h: a.h, b: a.b, k: a.k, expansion: a.expansion };
    let out = commands::analyze_cost(&CostRequest { kinds, template, sweep, patch: a.patch, multiplier: a.multiplier })?;
    match &a.csv {
        Some(path) => std::fs::write(path, &out.csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", out.csv),
    }
    if let Some(plot) = &a.plot {
        let csv_name = a.csv.as_ref().map_or("cost.csv".to_string(), |p| p.display().to_string());
        let script = mixergan_core::cost::gnuplot_script(&csv_name, &out.sweeps);
        std::fs::write(plot, script).with_context(|| format!("writing {}", plot.display()))?;
    }
    println!("{}", commands::retention_line(a.patch, a.multiplier, out.retention));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let n = commands::synth_data(&a.out, a.count, a.test_count, a.size, a.seed)?;
    println!("wrote {} images under {}", n, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::AnalyzeCost(a) => cmd_cost(a),
        Command::SynthData(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
