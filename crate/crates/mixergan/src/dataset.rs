//! Two-domain datasets: `trainA/`, `trainB/`, `testA/`, `testB/` directories
//! of PPM files, or the procedural red/blue task.

use std::fs;
use std::path::Path;

use mixergan_core::data::{synthesize_domain, ImageRecord, SyntheticDomainSpec};

use crate::config::RunConfig;
use crate::error::{io_err, AppError, AppResult};
use crate::ppm;

pub const SPLITS: [&str; 4] = ["trainA", "trainB", "testA", "testB"];

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train_x: Vec<ImageRecord>,
    pub train_y: Vec<ImageRecord>,
    pub test_x: Vec<ImageRecord>,
    pub test_y: Vec<ImageRecord>,
}

/// Red (`A`) and blue (`B`) shape domains. Each split has its own seed so the
/// two training domains are unpaired.
pub fn synthetic(count: usize, test_count: usize, size: usize, seed: u64) -> AppResult<Datasets> {
    let base = seed.wrapping_mul(4);
    let make = |spec: SyntheticDomainSpec| -> AppResult<Vec<ImageRecord>> {
        if spec.count == 0 {
            return Ok(Vec::new());
        }
        Ok(synthesize_domain(&spec)?)
    };
    Ok(Datasets {
        train_x: make(SyntheticDomainSpec::red(count, size, base))?,
        train_y: make(SyntheticDomainSpec::blue(count, size, base + 1))?,
        test_x: make(SyntheticDomainSpec::red(test_count, size, base + 2))?,
        test_y: make(SyntheticDomainSpec::blue(test_count, size, base + 3))?,
    })
}

pub fn load_root(root: &Path) -> AppResult<Datasets> {
    if !root.is_dir() {
        return Err(AppError::Usage(format!("dataset root {} does not exist or is not a directory", root.display())));
    }
    let split = |name: &str, required: bool| -> AppResult<Vec<ImageRecord>> {
        let dir = root.join(name);
        if !dir.is_dir() {
            if required {
                return Err(AppError::Usage(format!("missing dataset split {}", dir.display())));
            }
            return Ok(Vec::new());
        }
        let images = ppm::load_dir(&dir)?;
        if required && images.is_empty() {
            return Err(AppError::Usage(format!("dataset split {} contains no .ppm images", dir.display())));
        }
        Ok(images)
    };
    Ok(Datasets {
        train_x: split("trainA", true)?,
        train_y: split("trainB", true)?,
        test_x: split("testA", false)?,
        test_y: split("testB", false)?,
    })
}

impl Datasets {
    pub fn for_run(cfg: &RunConfig) -> AppResult<Self> {
        let size = cfg.training.generator.image_size;
        let data = if cfg.synthetic {
            synthetic(cfg.synth_count, cfg.synth_count, size, cfg.synth_seed)?
        } else {
            let root = cfg
                .data_root
                .as_ref()
                .ok_or_else(|| AppError::Usage("no dataset: set data_root (--data) or use --synthetic".into()))?;
            load_root(root)?
        };
        data.check_size(size)?;
        Ok(data)
    }

    fn check_size(&self, size: usize) -> AppResult<()> {
        for img in self.train_x.iter().chain(&self.train_y).chain(&self.test_x).chain(&self.test_y) {
            if img.height() != size || img.width() != size {
                return Err(AppError::Usage(format!(
                    "{} is {}x{}, the model expects {}x{}",
                    img.source,
                    img.width(),
                    img.height(),
                    size,
                    size
                )));
            }
        }
        Ok(())
    }

    /// Images used for periodic evaluation and samples: the test split when
    /// present, otherwise the training split, at most `limit` per domain.
    pub fn eval_sets(&self, limit: usize) -> (&[ImageRecord], &[ImageRecord]) {
        let xs = if self.test_x.is_empty() { &self.train_x } else { &self.test_x };
        let ys = if self.test_y.is_empty() { &self.train_y } else { &self.test_y };
        (&xs[..xs.len().min(limit)], &ys[..ys.len().min(limit)])
    }

    /// Writes every split as numbered PPM files under `root`.
    pub fn write(&self, root: &Path) -> AppResult<usize> {
        let mut written = 0;
        for (name, images) in SPLITS.iter().zip([&self.train_x, &self.train_y, &self.test_x, &self.test_y]) {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (i, img) in images.iter().enumerate() {
                ppm::save(&dir.join(format!("{:04}.ppm", i)), &img.pixels)?;
                written += 1;
            }
        }
        Ok(written)
    }
}
