//! Flat `key = value` run configuration.
//!
//! Resolution order, later wins: preset defaults, config file, the
//! `MIXERGAN_SEED` environment variable, command-line overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use mixergan_core::nn::MixerOrder;
use mixergan_core::train::TrainingConfig;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const SEED_ENV: &str = "MIXERGAN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> AppResult<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(bad("preset", s, "expected desk or paper")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    fn training(self) -> TrainingConfig {
        match self {
            Preset::Desk => TrainingConfig::desk(),
            Preset::Paper => TrainingConfig::paper(),
        }
    }
}

/// Everything a `train` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub training: TrainingConfig,
    /// Generate the red/blue task instead of reading `data_root`.
    pub synthetic: bool,
    pub data_root: Option<PathBuf>,
    pub synth_count: usize,
    pub synth_seed: u64,
    pub out_dir: PathBuf,
    decay_explicit: bool,
}

impl RunConfig {
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            training: preset.training(),
            synthetic: false,
            data_root: None,
            synth_count: 64,
            synth_seed: 0,
            out_dir: PathBuf::from("runs"),
            decay_explicit: false,
        }
    }

    /// Full resolution: preset (command line, else file, else desk), file
    /// keys, environment, then `overrides` in order.
    pub fn resolve(file_text: Option<&str>, preset: Option<Preset>, overrides: &[(String, String)]) -> AppResult<Self> {
        let lines = match file_text {
            Some(text) => parse_lines(text)?,
            None => Vec::new(),
        };
        let mut file_preset = None;
        for (line, key, value) in &lines {
            if key == "preset" {
                file_preset = Some(Preset::parse(value).map_err(|e| AppError::Config { line: *line, message: e.to_string() })?);
            }
        }
        let mut cfg = Self::new(preset.or(file_preset).unwrap_or(Preset::Desk));
        for (line, key, value) in &lines {
            if key != "preset" {
                cfg.set(key, value).map_err(|e| AppError::Config { line: *line, message: e.to_string() })?;
            }
        }
        cfg.apply_env()?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> AppResult<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> AppResult<()> {
        let t = &mut self.training;
        let g = &mut t.generator;
        match key {
            "image_size" => g.image_size = num(key, value)?,
            "base_channels" => g.base_channels = num(key, value)?,
            "patch_size" => g.patch_size = num(key, value)?,
            "channels" => g.token_dim = num(key, value)?,
            "blocks" => g.blocks = num(key, value)?,
            "token_expansion" => g.token_expansion = num(key, value)?,
            "channel_expansion" => g.channel_expansion = num(key, value)?,
            "ln_eps" => g.ln_eps = float(key, value)?,
            "in_eps" => g.in_eps = float(key, value)?,
            "mixer_order" => {
                g.order = match value {
                    "token-first" => MixerOrder::TokenFirst,
                    "channel-first" => MixerOrder::ChannelFirst,
                    _ => return Err(bad(key, value, "expected token-first or channel-first")),
                }
            }
            "disc_channels" => t.discriminator.base_channels = num(key, value)?,
            "disc_slope" => t.discriminator.slope = float(key, value)?,
            "disc_in_eps" => t.discriminator.in_eps = float(key, value)?,
            "lr" => t.learning_rate = float(key, value)?,
            "beta1" => t.adam.beta1 = float(key, value)?,
            "beta2" => t.adam.beta2 = float(key, value)?,
            "adam_eps" => t.adam.eps = float(key, value)?,
            "iters" => {
                t.total_iterations = num(key, value)?;
                if !self.decay_explicit {
                    t.decay_start = t.total_iterations / 2;
                }
            }
            "decay_start" => {
                t.decay_start = num(key, value)?;
                self.decay_explicit = true;
            }
            "batch" => t.batch_size = num(key, value)?,
            "lambda_cyc" => t.weights.lambda_cyc = float(key, value)?,
            "lambda_perc" => t.weights.lambda_perc = float(key, value)?,
            "adversarial_weight" => t.adversarial_weight = float(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "extractor_seed" => t.extractor_seed = num(key, value)?,
            "flip" => t.flip = boolean(key, value)?,
            "pool_size" => t.pool_size = num(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = num(key, value)?,
            "report_interval" => t.report_interval = num(key, value)?,
            "sample_interval" => t.sample_interval = num(key, value)?,
            "synthetic" => self.synthetic = boolean(key, value)?,
            "data_root" => self.data_root = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "synth_count" => self.synth_count = num(key, value)?,
            "synth_seed" => self.synth_seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(AppError::UnknownKey(key.to_string())),
        }
        Ok(())
    }


    pub fn validate(&self) -> AppResult<()> {
        self.training.validate()?;
        let t = &self.training;
        for (k, v) in [("report_interval", t.report_interval), ("checkpoint_interval", t.checkpoint_interval), ("sample_interval", t.sample_interval)] {
            if v == 0 {
                return Err(bad(k, "0", "intervals must be ≥ 1"));
            }
        }
        if self.synthetic && self.synth_count == 0 {
            return Err(bad("synth_count", "0", "need at least one image per domain"));
        }
        Ok(())
    }

    /// Canonical, re-parseable `key = value` listing of every setting.
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let g = &t.generator;
        let order = match g.order {
            MixerOrder::TokenFirst => "token-first",
            MixerOrder::ChannelFirst => "channel-first",
        };
        let data_root = self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("preset", self.preset.name().into()),
            ("image_size", g.image_size.to_string()),
            ("base_channels", g.base_channels.to_string()),
            ("patch_size", g.patch_size.to_string()),
            ("channels", g.token_dim.to_string()),
            ("blocks", g.blocks.to_string()),
            ("token_expansion", g.token_expansion.to_string()),
            ("channel_expansion", g.channel_expansion.to_string()),
            ("ln_eps", g.ln_eps.to_string()),
            ("in_eps", g.in_eps.to_string()),
            ("mixer_order", order.into()),
            ("disc_channels", t.discriminator.base_channels.to_string()),
            ("disc_slope", t.discriminator.slope.to_string()),
            ("disc_in_eps", t.discriminator.in_eps.to_string()),
            ("lr", t.learning_rate.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("iters", t.total_iterations.to_string()),
            ("decay_start", t.decay_start.to_string()),
            ("batch", t.batch_size.to_string()),
            ("lambda_cyc", t.weights.lambda_cyc.to_string()),
            ("lambda_perc", t.weights.lambda_perc.to_string()),
            ("adversarial_weight", t.adversarial_weight.to_string()),
            ("seed", t.seed.to_string()),
            ("extractor_seed", t.extractor_seed.to_string()),
            ("flip", t.flip.to_string()),
            ("pool_size", t.pool_size.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            ("report_interval", t.report_interval.to_string()),
            ("sample_interval", t.sample_interval.to_string()),
            ("synthetic", self.synthetic.to_string()),
            ("data_root", data_root),
            ("synth_count", self.synth_count.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }

    /// One-line summary of the headline hyper-parameters.
    pub fn banner(&self) -> String {
        let t = &self.training;
        let g = &t.generator;
        format!(
            "learning rate {} | batch size {} | latent channel width {} | image {}x{} | patch {} | {} mixer blocks | {} iterations (decay from {}) | lambda_cyc {} | lambda_perc {} | seed {}",
            t.learning_rate,
            t.batch_size,
            g.token_dim,
            g.image_size,
            g.image_size,
            g.patch_size,
            g.blocks,
            t.total_iterations,
            t.decay_start,
            t.weights.lambda_cyc,
            t.weights.lambda_perc,
            t.seed
        )
    }

    /// Hash of every setting that fixes parameter shapes or forward-pass
    /// semantics. Checkpoints carry it; inference refuses a mismatch.
    pub fn geometry_hash(&self) -> [u8; 32] {
        geometry_hash(&self.training)
    }
}

pub fn geometry_hash(t: &TrainingConfig) -> [u8; 32] {
    let g = &t.generator;
    let d = &t.discriminator;
    let canon = format!(
        "image_size={};base_channels={};patch_size={};channels={};blocks={};token_expansion={};channel_expansion={};ln_eps={};in_eps={};mixer_order={:?};disc_channels={};disc_slope={};disc_in_eps={}",
        g.image_size,
        g.base_channels,
        g.patch_size,
        g.token_dim,
        g.blocks,
        g.token_expansion,
        g.channel_expansion,
        g.ln_eps,
        g.in_eps,
        g.order,
        d.base_channels,
        d.slope,
        d.in_eps
    );
    Sha256::digest(canon.as_bytes()).into()
}

/// Splits a command-line `key=value` override.
pub fn split_pair(pair: &str) -> AppResult<(String, String)> {
    let (k, v) = pair
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override `{}` is not of the form key=value", pair)))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// `(line number, key, value)` for every non-blank, non-comment line.
pub fn parse_lines(text: &str) -> AppResult<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| AppError::Config {
            line: i + 1,
            message: format!("expected `key = value`, got `{}`", line),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(AppError::Config { line: i + 1, message: "empty key".into() });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad(key: &str, value: &str, reason: &str) -> AppError {
    AppError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> AppResult<T> {
    value.parse().map_err(|_| bad(key, value, "expected a non-negative integer"))
}

fn float(key: &str, value: &str) -> AppResult<f64> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(bad(key, value, "expected a finite number")),
    }
}

fn boolean(key: &str, value: &str) -> AppResult<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}
