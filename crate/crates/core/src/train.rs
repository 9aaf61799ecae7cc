//! Alternating CycleGAN-style updates: generators first (discriminators
//! frozen), then discriminators on detached fakes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{sample_unpaired_batch, ImageRecord, UnpairedSampler};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::loss::{self, FeatureExtractor, LossComponents, LossWeights};
use crate::nn::{Discriminator, DiscriminatorConfig, DiscriminatorParams, Generator, GeneratorConfig, GeneratorParams, MixerOrder};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::params::{self, Tree};
use crate::rng;
use crate::tensor::Tensor;

/// Every hyper-parameter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub total_iterations: u64,
    pub decay_start: u64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Multiplier on the generators' adversarial terms (1 = plain objective).
    pub adversarial_weight: f64,
    pub seed: u64,
    pub extractor_seed: u64,
    pub flip: bool,
    /// Size of the generated-image history buffer; 0 disables it.
    pub pool_size: usize,
    pub checkpoint_interval: u64,
    pub report_interval: u64,
    pub sample_interval: u64,
}

impl TrainingConfig {
    /// Full-scale settings: 256² images, patch 8, width 256, batch 16, lr 3e-4, 20k iterations.
    pub fn paper() -> Self {
        Self {
            generator: GeneratorConfig {
                image_size: 256,
                base_channels: 64,
                patch_size: 8,
                token_dim: 256,
                blocks: 9,
                token_expansion: 2,
                channel_expansion: 2,
                ln_eps: 1e-5,
                in_eps: 1e-5,
                order: MixerOrder::TokenFirst,
            },
            discriminator: DiscriminatorConfig::default(),
            learning_rate: 3e-4,
            adam: AdamConfig::default(),
            total_iterations: 20_000,
            decay_start: 10_000,
            batch_size: 16,
            weights: LossWeights::default(),
            adversarial_weight: 1.0,
            seed: 0,
            extractor_seed: 0,
            flip: false,
            pool_size: 0,
            checkpoint_interval: 1000,
            report_interval: 100,
            sample_interval: 1000,
        }
    }

    /// CPU-sized settings: 32² images, patch 2, width 64, batch 4.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.generator.image_size = 32;
        cfg.generator.base_channels = 8;
        cfg.generator.patch_size = 2;
        cfg.generator.token_dim = 64;
        cfg.discriminator.base_channels = 16;
        cfg.batch_size = 4;
        cfg.total_iterations = 2000;
        cfg.decay_start = 1000;
        cfg.checkpoint_interval = 500;
        cfg.report_interval = 10;
        cfg.sample_interval = 500;
        cfg
    }

    /// Sets the iteration budget and places the decay start at its midpoint.
    pub fn with_iterations(mut self, total: u64) -> Self {
        self.total_iterations = total;
        self.decay_start = total / 2;
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base: self.learning_rate, total: self.total_iterations, decay_start: self.decay_start }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.weights.validate()?;
        if self.decay_start > self.total_iterations {
            return Err(invalid(
                "training config",
                format!("decay_start {} exceeds total_iterations {}", self.decay_start, self.total_iterations),
            ));
        }
        if self.batch_size == 0 {
            return Err(invalid("training config", "batch_size must be ≥ 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("training config", format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if crate::nn::discriminator_output_size(self.generator.image_size).is_none() {
            return Err(invalid(
                "training config",
                format!("image size {} too small for the discriminator", self.generator.image_size),
            ));
        }
        if self.discriminator.base_channels == 0 {
            return Err(invalid("training config", "discriminator width must be ≥ 1"));
        }
        Ok(())
    }
}

/// Two generators (`g: X→Y`, `f: Y→X`) and two discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGan {
    pub g: GeneratorParams,
    pub f: GeneratorParams,
    pub dx: DiscriminatorParams,
    pub dy: DiscriminatorParams,
}

impl CycleGan {
    pub fn init(cfg: &TrainingConfig) -> Result<Self> {
        Ok(Self {
            g: Generator::init(&cfg.generator, &mut rng::stream(cfg.seed, rng::STREAM_INIT_G))?,
            f: Generator::init(&cfg.generator, &mut rng::stream(cfg.seed, rng::STREAM_INIT_F))?,
            dx: Discriminator::init(&cfg.discriminator, &mut rng::stream(cfg.seed, rng::STREAM_INIT_DX)),
            dy: Discriminator::init(&cfg.discriminator, &mut rng::stream(cfg.seed, rng::STREAM_INIT_DY)),
        })
    }
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    XToY,
    YToX,
}

/// Runs a generator without recording gradients.
pub fn translate(gen: &GeneratorParams, cfg: &GeneratorConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params::bind(gen, &mut g, false);
    let x = g.constant(images.clone());
    let y = vars.forward(&mut g, x, cfg)?;
    Ok(g.value(y).clone())
}

/// Discriminator scores without gradients.
pub fn discriminate(disc: &DiscriminatorParams, cfg: &DiscriminatorConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params::bind(disc, &mut g, false);
    let x = g.constant(images.clone());
    let y = vars.forward(&mut g, x, cfg)?;
    Ok(g.value(y).clone())
}

/// History of generated images handed to the discriminators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::new() }
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// While filling, returns the new images. Once full, each image is swapped
    /// for a stored one with probability ½.
    pub fn query(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let mut out = Vec::new();
        for img in batch.unstack() {
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random_bool(0.5) {
                let i = rng.random_range(0..self.capacity);
                out.push(core::mem::replace(&mut self.images[i], img));
            } else {
                out.push(img);
            }
        }
        Tensor::stack(&out.iter().collect::<Vec<_>>())
    }
}

/// Per-iteration report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub losses: LossComponents,
}

/// Generator-side forward/backward results.
pub struct GeneratorPass {
    pub losses: LossComponents,
    pub grad_g: GeneratorParams,
    pub grad_f: GeneratorParams,
    pub fake_y: Tensor,
    pub fake_x: Tensor,
}

pub struct DiscriminatorPass {
    pub loss_dx: f64,
    pub loss_dy: f64,
    pub grad_dx: DiscriminatorParams,
    pub grad_dy: DiscriminatorParams,
}

/// Cycle reconstructions and losses on a fixed batch, without updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub losses: LossComponents,
    pub fake_y: Tensor,
    pub rec_x: Tensor,
    pub fake_x: Tensor,
    pub rec_y: Tensor,
}

/// All mutable training state.
pub struct Trainer {
    pub config: TrainingConfig,
    pub models: CycleGan,
    pub opt_g: AdamState,
    pub opt_f: AdamState,
    pub opt_dx: AdamState,
    pub opt_dy: AdamState,
    pub sampler: UnpairedSampler,
    pub pool_x: ImagePool,
    pub pool_y: ImagePool,
    pub extractor: FeatureExtractor,
    pub iteration: u64,
}

fn find_state<'a>(state: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    state
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingState { name: name.into() })
}

fn adam_for<T: Tree<Tensor>>(t: &T) -> AdamState {
    AdamState::zeros_like(t.leaves().into_iter().map(|(_, p)| p))
}

fn apply<T: Tree<Tensor>>(opt: &mut AdamState, cfg: &AdamConfig, lr: f64, params: &mut T, grads: &T) -> Result<()> {
    let named = grads.leaves().into_iter().map(|(n, g)| (n, g)).collect::<Vec<(String, &Tensor)>>();
    let mut targets = params.leaves_mut();
    opt.step(cfg, lr, &mut targets, &named)
}

impl Trainer {
    pub fn new(config: TrainingConfig, len_x: usize, len_y: usize) -> Result<Self> {
        config.validate()?;
        let models = CycleGan::init(&config)?;
        Ok(Self {
            opt_g: adam_for(&models.g),
            opt_f: adam_for(&models.f),
            opt_dx: adam_for(&models.dx),
            opt_dy: adam_for(&models.dy),
            sampler: UnpairedSampler::new(len_x, len_y, config.seed, config.flip)?,
            pool_x: ImagePool::new(config.pool_size),
            pool_y: ImagePool::new(config.pool_size),
            extractor: FeatureExtractor::new(config.extractor_seed),
            iteration: 0,
            models,
            config,
        })
    }

    /// Generator objective `w_adv·(L_G + L_F) + λ_cyc·L_cyc + λ_perc·L_perc`
    /// with the discriminators held constant.
    pub fn generator_pass(&self, bx: &Tensor, by: &Tensor) -> Result<GeneratorPass> {
        let cfg = &self.config;
        let gcfg = &cfg.generator;
        let mut g = Graph::new();
        let vg = params::bind(&self.models.g, &mut g, true);
        let vf = params::bind(&self.models.f, &mut g, true);
        let vdx = params::bind(&self.models.dx, &mut g, false);
        let vdy = params::bind(&self.models.dy, &mut g, false);
        let x = g.constant(bx.clone());
        let y = g.constant(by.clone());

        let fake_y = vg.forward(&mut g, x, gcfg)?;
        let rec_x = vf.forward(&mut g, fake_y, gcfg)?;
        let fake_x = vf.forward(&mut g, y, gcfg)?;
        let rec_y = vg.forward(&mut g, fake_x, gcfg)?;

        let mut terms = Vec::new();
        let mut losses = LossComponents::default();
        if cfg.adversarial_weight != 0.0 {
            let sy = vdy.forward(&mut g, fake_y, &cfg.discriminator)?;
            let sx = vdx.forward(&mut g, fake_x, &cfg.discriminator)?;
            let lg = loss::loss_generator(&mut g, sy);
            let lf = loss::loss_generator(&mut g, sx);
            losses.loss_g = g.value(lg).item();
            losses.loss_f = g.value(lf).item();
            terms.push((lg, cfg.adversarial_weight));
            terms.push((lf, cfg.adversarial_weight));
        }
        let lcyc = loss::loss_cycle(&mut g, x, rec_x, y, rec_y)?;
        losses.loss_cyc = g.value(lcyc).item();
        terms.push((lcyc, cfg.weights.lambda_cyc));
        if cfg.weights.lambda_perc != 0.0 {
            let px = loss::loss_perceptual(&mut g, x, rec_x, &self.extractor)?;
            let py = loss::loss_perceptual(&mut g, y, rec_y, &self.extractor)?;
            let lp = g.add(px, py)?;
            losses.loss_perc = g.value(lp).item();
            terms.push((lp, cfg.weights.lambda_perc));
        }
        let total = loss::weighted_sum(&mut g, &terms)?;
        let grads = g.backward(total)?;
        Ok(GeneratorPass {
            losses,
            grad_g: params::collect_grads(&vg, &grads),
            grad_f: params::collect_grads(&vf, &grads),
            fake_y: g.value(fake_y).clone(),
            fake_x: g.value(fake_x).clone(),
        })
    }

    /// Discriminator objectives on real batches and (detached) fakes.
    pub fn discriminator_pass(&self, bx: &Tensor, by: &Tensor, fake_x: &Tensor, fake_y: &Tensor) -> Result<DiscriminatorPass> {
        let dcfg = &self.config.discriminator;
        let mut g = Graph::new();
        let vdx = params::bind(&self.models.dx, &mut g, true);
        let vdy = params::bind(&self.models.dy, &mut g, true);
        let (x, y) = (g.constant(bx.clone()), g.constant(by.clone()));
        let (fx, fy) = (g.constant(fake_x.clone()), g.constant(fake_y.clone()));
        let (rx, sx) = (vdx.forward(&mut g, x, dcfg)?, vdx.forward(&mut g, fx, dcfg)?);
        let (ry, sy) = (vdy.forward(&mut g, y, dcfg)?, vdy.forward(&mut g, fy, dcfg)?);
        let ldx = loss::loss_discriminator(&mut g, rx, sx)?;
        let ldy = loss::loss_discriminator(&mut g, ry, sy)?;
        let total = g.add(ldx, ldy)?;
        let grads = g.backward(total)?;
        Ok(DiscriminatorPass {
            loss_dx: g.value(ldx).item(),
            loss_dy: g.value(ldy).item(),
            grad_dx: params::collect_grads(&vdx, &grads),
            grad_dy: params::collect_grads(&vdy, &grads),
        })
    }

    pub fn apply_generator_update(&mut self, pass: &GeneratorPass, lr: f64) -> Result<()> {
        let adam = self.config.adam;
        apply(&mut self.opt_g, &adam, lr, &mut self.models.g, &pass.grad_g)?;
        apply(&mut self.opt_f, &adam, lr, &mut self.models.f, &pass.grad_f)
    }

    pub fn apply_discriminator_update(&mut self, pass: &DiscriminatorPass, lr: f64) -> Result<()> {
        let adam = self.config.adam;
        apply(&mut self.opt_dx, &adam, lr, &mut self.models.dx, &pass.grad_dx)?;
        apply(&mut self.opt_dy, &adam, lr, &mut self.models.dy, &pass.grad_dy)
    }

    /// One full iteration. Fails without touching the models if any loss or
    /// gradient is non-finite.
    pub fn step(&mut self, data_x: &[ImageRecord], data_y: &[ImageRecord]) -> Result<StepReport> {
        let iteration = self.iteration;
        let lr = self.config.schedule().at(iteration);
        let mut sampler = self.sampler.clone();
        let (bx, by) = sample_unpaired_batch(data_x, data_y, self.config.batch_size, &mut sampler)?;

        let gen = self.generator_pass(&bx, &by)?;
        let mut pool_x = self.pool_x.clone();
        let mut pool_y = self.pool_y.clone();
        let fake_x = pool_x.query(&gen.fake_x, &mut rng::stream(self.config.seed, rng::STREAM_POOL + iteration))?;
        let fake_y = pool_y.query(&gen.fake_y, &mut rng::stream(self.config.seed, rng::STREAM_POOL + (1 << 32) + iteration))?;
        let disc = self.discriminator_pass(&bx, &by, &fake_x, &fake_y)?;

        let mut losses = gen.losses;
        losses.loss_dx = disc.loss_dx;
        losses.loss_dy = disc.loss_dy;
        if !losses.all_finite() {
            let component = [
                ("G", losses.loss_g),
                ("F", losses.loss_f),
                ("D_X", losses.loss_dx),
                ("D_Y", losses.loss_dy),
                ("cycle", losses.loss_cyc),
                ("perceptual", losses.loss_perc),
            ]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map_or("total", |(n, _)| n);
            return Err(Error::NonFiniteLoss { component, iteration });
        }
        for grads in [gen.grad_g.leaves(), gen.grad_f.leaves(), disc.grad_dx.leaves(), disc.grad_dy.leaves()] {
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        self.apply_generator_update(&gen, lr)?;
        self.apply_discriminator_update(&disc, lr)?;
        self.sampler = sampler;
        self.pool_x = pool_x;
        self.pool_y = pool_y;
        self.iteration += 1;
        Ok(StepReport { iteration, lr, losses })
    }

    /// Translations, reconstructions and losses on a fixed batch.
    pub fn evaluate(&self, bx: &Tensor, by: &Tensor) -> Result<Evaluation> {
        let cfg = &self.config;
        let gc = &cfg.generator;
        let fake_y = translate(&self.models.g, gc, bx)?;
        let rec_x = translate(&self.models.f, gc, &fake_y)?;
        let fake_x = translate(&self.models.f, gc, by)?;
        let rec_y = translate(&self.models.g, gc, &fake_x)?;
        let mut g = Graph::new();
        let v = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
        let (x, y, rx, ry) = (v(&mut g, bx), v(&mut g, by), v(&mut g, &rec_x), v(&mut g, &rec_y));
        let lcyc = loss::loss_cycle(&mut g, x, rx, y, ry)?;
        let dcfg = &cfg.discriminator;
        let sy = g.constant(discriminate(&self.models.dy, dcfg, &fake_y)?);
        let sx = g.constant(discriminate(&self.models.dx, dcfg, &fake_x)?);
        let ry_s = g.constant(discriminate(&self.models.dy, dcfg, by)?);
        let rx_s = g.constant(discriminate(&self.models.dx, dcfg, bx)?);
        let lg = loss::loss_generator(&mut g, sy);
        let lf = loss::loss_generator(&mut g, sx);
        let ldx = loss::loss_discriminator(&mut g, rx_s, sx)?;
        let ldy = loss::loss_discriminator(&mut g, ry_s, sy)?;
        let mut losses = LossComponents {
            loss_g: g.value(lg).item(),
            loss_f: g.value(lf).item(),
            loss_dx: g.value(ldx).item(),
            loss_dy: g.value(ldy).item(),
            loss_cyc: g.value(lcyc).item(),
            loss_perc: 0.0,
        };
        if cfg.weights.lambda_perc != 0.0 {
            let px = loss::loss_perceptual(&mut g, x, rx, &self.extractor)?;
            let py = loss::loss_perceptual(&mut g, y, ry, &self.extractor)?;
            losses.loss_perc = g.value(px).item() + g.value(py).item();
        }
        Ok(Evaluation { losses, fake_y, rec_x, fake_x, rec_y })
    }

    pub fn translate(&self, direction: Direction, images: &Tensor) -> Result<Tensor> {
        let gen = match direction {
            Direction::XToY => &self.models.g,
            Direction::YToX => &self.models.f,
        };
        translate(gen, &self.config.generator, images)
    }

    /// Named tensors that fully determine the trainer (plus its config).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let push_tree = |out: &mut Vec<(String, Tensor)>, prefix: &str, leaves: Vec<(String, &Tensor)>| {
            for (n, t) in leaves {
                out.push((format!("{}.{}", prefix, n), t.clone()));
            }
        };
        push_tree(&mut out, "G", self.models.g.leaves());
        push_tree(&mut out, "F", self.models.f.leaves());
        push_tree(&mut out, "DX", self.models.dx.leaves());
        push_tree(&mut out, "DY", self.models.dy.leaves());
        let opts: [(&str, &AdamState, Vec<(String, &Tensor)>); 4] = [
            ("G", &self.opt_g, self.models.g.leaves()),
            ("F", &self.opt_f, self.models.f.leaves()),
            ("DX", &self.opt_dx, self.models.dx.leaves()),
            ("DY", &self.opt_dy, self.models.dy.leaves()),
        ];
        for (prefix, opt, names) in opts {
            out.push((format!("adam.{}.step", prefix), Tensor::scalar(opt.step as f64)));
            for ((n, _), (m, v)) in names.iter().zip(opt.m.iter().zip(&opt.v)) {
                out.push((format!("adam.{}.m.{}", prefix, n), m.clone()));
                out.push((format!("adam.{}.v.{}", prefix, n), v.clone()));
            }
        }
        let (ex, px) = self.sampler.x.position();
        let (ey, py) = self.sampler.y.position();
        out.push(("sampler.x.epoch".into(), Tensor::scalar(ex as f64)));
        out.push(("sampler.x.pos".into(), Tensor::scalar(px as f64)));
        out.push(("sampler.y.epoch".into(), Tensor::scalar(ey as f64)));
        out.push(("sampler.y.pos".into(), Tensor::scalar(py as f64)));
        for (name, pool) in [("pool.x", &self.pool_x), ("pool.y", &self.pool_y)] {
            if !pool.images.is_empty() {
                let refs: Vec<&Tensor> = pool.images.iter().collect();
                out.push((name.into(), Tensor::stack(&refs).expect("pool images share a shape")));
            }
        }
        out.push(("trainer.iteration".into(), Tensor::scalar(self.iteration as f64)));
        out.push(("loss.lambda_cyc".into(), Tensor::scalar(self.config.weights.lambda_cyc)));
        out.push(("loss.lambda_perc".into(), Tensor::scalar(self.config.weights.lambda_perc)));
        out
    }

    /// Rebuilds a trainer from [`Trainer::state`] output.
    pub fn from_state(config: TrainingConfig, len_x: usize, len_y: usize, state: &[(String, Tensor)]) -> Result<Self> {
        let mut t = Self::new(config, len_x, len_y)?;
        let lookup = |name: &str| find_state(state, name);
        fn load<T: Tree<Tensor>>(tree: &mut T, prefix: &str, state: &[(String, Tensor)]) -> Result<()> {
            let mut err = None;
            tree.visit_mut("", &mut |n, p| {
                if err.is_some() {
                    return;
                }
                match find_state(state, &format!("{}.{}", prefix, n)) {
                    Ok(v) if v.shape() == p.shape() => *p = v.clone(),
                    Ok(v) => {
                        err = Some(crate::error::dim(
                            "load state",
                            format!("`{}.{}` has shape {:?}, model expects {:?}", prefix, n, v.shape(), p.shape()),
                        ))
                    }
                    Err(e) => err = Some(e),
                }
            });
            err.map_or(Ok(()), Err)
        }
        load(&mut t.models.g, "G", state)?;
        load(&mut t.models.f, "F", state)?;
        load(&mut t.models.dx, "DX", state)?;
        load(&mut t.models.dy, "DY", state)?;
        let scalar = |name: &str| -> Result<u64> { Ok(lookup(name)?.item() as u64) };
        for (prefix, opt, names) in [
            ("G", &mut t.opt_g, t.models.g.leaves()),
            ("F", &mut t.opt_f, t.models.f.leaves()),
            ("DX", &mut t.opt_dx, t.models.dx.leaves()),
            ("DY", &mut t.opt_dy, t.models.dy.leaves()),
        ] {
            opt.step = scalar(&format!("adam.{}.step", prefix))?;
            for (i, (n, _)) in names.iter().enumerate() {
                opt.m[i] = lookup(&format!("adam.{}.m.{}", prefix, n))?.clone();
                opt.v[i] = lookup(&format!("adam.{}.v.{}", prefix, n))?.clone();
            }
        }
        t.sampler.x.restore(scalar("sampler.x.epoch")?, scalar("sampler.x.pos")? as usize)?;
        t.sampler.y.restore(scalar("sampler.y.epoch")?, scalar("sampler.y.pos")? as usize)?;
        for (name, pool) in [("pool.x", &mut t.pool_x), ("pool.y", &mut t.pool_y)] {
            if let Ok(stacked) = lookup(name) {
                pool.images = stacked.unstack();
            }
        }
        t.iteration = scalar("trainer.iteration")?;
        Ok(t)
    }
}
