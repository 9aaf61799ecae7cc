//! Training runs: a fresh run directory holding the resolved config, loss
//! and evaluation CSVs, checkpoints and sample grids.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use mixergan_core::data::stack_images;
use mixergan_core::train::{StepReport, Trainer};
use mixergan_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Datasets;
use crate::error::{io_err, AppError, AppResult};
use crate::ppm;

pub const LOSS_HEADER: &str = "iter,loss_G,loss_F,loss_DX,loss_DY,loss_cyc,loss_perc,lr";
pub const EVAL_HEADER: &str = "iter,cycle_x,cycle_y,loss_cyc";
/// Images per domain used for evaluation rows and sample grids.
pub const EVAL_LIMIT: usize = 8;
const SAMPLE_ROWS: usize = 4;

pub struct RunOutcome {
    pub dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
    pub eval_csv: PathBuf,
    pub reports: Vec<StepReport>,
    pub trainer: Trainer,
    pub data: Datasets,
}

/// Creates `<out>/run-<timestamp>[-k]`, never reusing an existing directory.
pub fn fresh_run_dir(out: &Path) -> AppResult<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for k in 0.. {
        let name = if k == 0 { format!("run-{}", stamp) } else { format!("run-{}-{}", stamp, k) };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(AppError::Io { path: dir, source: e }),
        }
    }
    unreachable!()
}

pub fn checkpoint_of(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint { config_hash: cfg.geometry_hash(), config_text: cfg.to_text(), tensors: trainer.state() }
}

pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> AppResult<RunOutcome> {
    cfg.validate()?;
    let data = Datasets::for_run(cfg)?;
    let trainer = Trainer::new(cfg.training.clone(), data.train_x.len(), data.train_y.len())?;
    run_loop(cfg, trainer, data, log)
}

/// Continues the run stored in `checkpoint`; `overrides` may extend it
/// (e.g. a larger `iters`) but not change its geometry.
pub fn resume(checkpoint: &Path, overrides: &[(String, String)], log: &mut dyn Write) -> AppResult<RunOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = RunConfig::resolve(Some(&ckpt.config_text), None, &[])?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    if cfg.geometry_hash() != ckpt.config_hash {
        return Err(AppError::HashMismatch {
            expected: crate::checkpoint::hex(&cfg.geometry_hash()),
            found: crate::checkpoint::hex(&ckpt.config_hash),
        });
    }
    let data = Datasets::for_run(&cfg)?;
    let trainer = Trainer::from_state(cfg.training.clone(), data.train_x.len(), data.train_y.len(), &ckpt.tensors)?;
    run_loop(&cfg, trainer, data, log)
}

fn append(file: &mut File, path: &Path, line: &str) -> AppResult<()> {
    writeln!(file, "{}", line).map_err(io_err(path))
}

fn run_loop(cfg: &RunConfig, mut trainer: Trainer, data: Datasets, log: &mut dyn Write) -> AppResult<RunOutcome> {
    let t = &cfg.training;
    let dir = fresh_run_dir(&cfg.out_dir)?;
    let config_path = dir.join("config.txt");
    let header = format!("# mixergan {}\n", env!("CARGO_PKG_VERSION"));
    fs::write(&config_path, header + &cfg.to_text()).map_err(io_err(&config_path))?;
    for sub in ["checkpoints", "samples"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
    }
    let loss_csv = dir.join("losses.csv");
    let eval_csv = dir.join("eval.csv");
    let mut losses = File::create(&loss_csv).map_err(io_err(&loss_csv))?;
    let mut evals = File::create(&eval_csv).map_err(io_err(&eval_csv))?;
    append(&mut losses, &loss_csv, LOSS_HEADER)?;
    append(&mut evals, &eval_csv, EVAL_HEADER)?;

    let _ = writeln!(log, "{}", cfg.banner());
    let _ = writeln!(log, "run directory: {}", dir.display());

    let (ex, ey) = data.eval_sets(EVAL_LIMIT);
    let eval_x = stack_images(ex)?;
    let eval_y = stack_images(ey)?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();

    let save = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>, evals: &mut File| -> AppResult<()> {
        let it = trainer.iteration;
        let path = dir.join("checkpoints").join(format!("iter-{:06}.ckpt", it));
        checkpoint_of(cfg, trainer).save(&path)?;
        let e = trainer.evaluate(&eval_x, &eval_y)?;
        let cx = reconstruction_l1(&eval_x, &e.rec_x);
        let cy = reconstruction_l1(&eval_y, &e.rec_y);
        append(evals, &eval_csv, &format!("{},{},{},{}", it, cx, cy, e.losses.loss_cyc))?;
        checkpoints.push(path);
        Ok(())
    };

    if trainer.iteration >= t.total_iterations {
        save(&trainer, &mut checkpoints, &mut evals)?;
    }
    while trainer.iteration < t.total_iterations {
        let report = trainer.step(&data.train_x, &data.train_y).map_err(|source| AppError::Diverged {
            source,
            last_checkpoint: checkpoints.last().cloned(),
        })?;
        if report.iteration % t.report_interval == 0 {
            let l = &report.losses;
            append(
                &mut losses,
                &loss_csv,
                &format!(
                    "{},{},{},{},{},{},{},{}",
                    report.iteration, l.loss_g, l.loss_f, l.loss_dx, l.loss_dy, l.loss_cyc, l.loss_perc, report.lr
                ),
            )?;
            let _ = writeln!(
                log,
                "iter {:>6}  G {:.4}  F {:.4}  DX {:.4}  DY {:.4}  cyc {:.4}  perc {:.5}  lr {:.6}",
                report.iteration, l.loss_g, l.loss_f, l.loss_dx, l.loss_dy, l.loss_cyc, l.loss_perc, report.lr
            );
        }
        reports.push(report);
        let done = trainer.iteration;
        let last = done == t.total_iterations;
        if last || done % t.checkpoint_interval == 0 {
            save(&trainer, &mut checkpoints, &mut evals)?;
        }
        if last || done % t.sample_interval == 0 {
            write_samples(&trainer, &eval_x, &eval_y, &dir.join("samples"), done)?;
        }
    }
    Ok(RunOutcome { dir, checkpoints, loss_csv, eval_csv, reports, trainer, data })
}

/// Mean absolute difference between two equally shaped tensors.
pub fn reconstruction_l1(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

fn write_samples(trainer: &Trainer, x: &Tensor, y: &Tensor, dir: &Path, it: u64) -> AppResult<()> {
    use mixergan_core::train::Direction;
    for (name, src, fwd, back) in [("x2y", x, Direction::XToY, Direction::YToX), ("y2x", y, Direction::YToX, Direction::XToY)] {
        let rows = src.unstack().into_iter().take(SAMPLE_ROWS).collect::<Vec<_>>();
        let batch = Tensor::stack(&rows.iter().collect::<Vec<_>>())?;
        let fake = trainer.translate(fwd, &batch)?.unstack();
        let rec = trainer.translate(back, &Tensor::stack(&fake.iter().collect::<Vec<_>>())?)?.unstack();
        let mut tiles = Vec::new();
        for i in 0..rows.len() {
            tiles.extend([rows[i].clone(), fake[i].clone(), rec[i].clone()]);
        }
        ppm::save(&dir.join(format!("iter-{:06}-{}.ppm", it, name)), &ppm::grid(&tiles, 3)?)?;
    }
    Ok(())
}
