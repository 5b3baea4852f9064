//! Adam + cosine-annealed training with alternating discriminator and
//! generator updates, CSV logging and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Archive;
use crate::data::{mixed_batch, Batch, PairSet};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_adv_loss, joint_loss, ms_ssim_loss, ms_ssim_min_size, perceptual_loss, smooth_l1,
    Discriminator, LossComponents, LossReport, LossWeights, PerceptualExtractor,
};
use crate::network::{init_model, ForwardOptions, ModelConfig, ModelParams, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,lr,l1,msssim,perceptual,adversarial,total,d_loss";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to `⌈pairs / batch_size⌉`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub loss: LossWeights,
    pub ms_ssim_scales: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Checkpoint every this many epochs (the last epoch always writes one).
    pub checkpoint_every: usize,
    pub disc_width: usize,
    pub perceptual_seed: u64,
    pub adam: AdamConfig,
    /// Stop (with a checkpoint) once this many epochs are done.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-5,
            lr_min: 5e-7,
            epochs: 50,
            batch_size: 4,
            steps_per_epoch: None,
            seed: 0,
            loss: LossWeights::default(),
            ms_ssim_scales: crate::losses::DEFAULT_MS_SSIM_SCALES,
            clip_norm: Some(1.0),
            checkpoint_every: 10,
            disc_width: 16,
            perceptual_seed: 7,
            adam: AdamConfig::default(),
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::validation(msg)) };
        v(
            self.lr_init.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr_init,
            format!(
                "train.lr_min ({}) must be in [0, train.lr_init ({})]",
                self.lr_min, self.lr_init
            ),
        )?;
        v(self.epochs > 0, "train.epochs must be positive".into())?;
        v(self.batch_size > 0, "train.batch_size must be positive".into())?;
        v(
            self.steps_per_epoch != Some(0),
            "train.steps_per_epoch must be positive".into(),
        )?;
        v(
            self.checkpoint_every > 0,
            "train.checkpoint_every must be positive".into(),
        )?;
        v(self.disc_width > 0, "train.disc_width must be positive".into())?;
        v(
            self.clip_norm.is_none_or(|c| c.is_finite() && c > 0.0),
            "train.clip_norm must be positive".into(),
        )?;
        let a = &self.adam;
        v(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            "adam betas must be in [0, 1) and eps positive".into(),
        )?;
        self.loss.validate()?;
        crate::losses::ms_ssim_weights(self.ms_ssim_scales)?;
        Ok(())
    }

    pub fn adversarial(&self) -> bool {
        self.loss.adversarial > 0.0
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::validation(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + phase.cos()))
}

/// First and second moments for every tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamStore<f32>) -> Self {
        let zeros = ParamStore::from_named(
            like.iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        );
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, g), (m, v)) in tensors.zip(grads).zip(moments) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
                *p = (*p as f64 - step) as f32;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        grads.iter_mut().for_each(|g| g.scale_inplace(s));
    }
    norm
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:e},{},{},{},{},{},{}",
            self.step, self.lr, r.l1, r.msssim, r.perceptual, r.adversarial, r.total, r.d_loss
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::validation(format!("malformed log row `{line}`"));
        if f.len() != 8 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            lr: n(1)?,
            report: LossReport {
                l1: n(2)?,
                msssim: n(3)?,
                perceptual: n(4)?,
                adversarial: n(5)?,
                total: n(6)?,
                d_loss: n(7)?,
            },
        })
    }
}

/// Generator, discriminator, optimizer states and counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelParams,
    pub disc_params: ParamStore<f32>,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub step: u64,
    pub epoch: usize,
    net: Network,
    disc: Discriminator,
    extractor: PerceptualExtractor,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = init_model(model_cfg, cfg.seed)?;
        let disc = Discriminator::new(cfg.disc_width)?;
        let disc_params = disc.init(cfg.seed ^ 0x5eed_d15c);
        Self::assemble(cfg, model, disc, disc_params, None, 0, 0)
    }

    fn assemble(
        cfg: TrainConfig,
        model: ModelParams,
        disc: Discriminator,
        disc_params: ParamStore<f32>,
        opts: Option<(AdamState, AdamState)>,
        step: u64,
        epoch: usize,
    ) -> Result<Self> {
        let net = model.network()?;
        disc.layout().check(&disc_params)?;
        let (gen_opt, disc_opt) = opts.unwrap_or_else(|| (AdamState::new(&model.params), AdamState::new(&disc_params)));
        Ok(Self {
            extractor: PerceptualExtractor::random(cfg.perceptual_seed),
            cfg,
            model,
            disc_params,
            gen_opt,
            disc_opt,
            step,
            epoch,
            net,
            disc,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    /// Checks that `h×w` training images fit the network and every enabled loss.
    pub fn check_image_size(&self, h: usize, w: usize) -> Result<()> {
        self.model.config.check_input(h, w)?;
        let ms = ms_ssim_min_size(self.cfg.ms_ssim_scales);
        if self.cfg.loss.msssim > 0.0 && h.min(w) < ms {
            return Err(Error::validation(format!(
                "MS-SSIM with {} scales needs images of at least {ms}×{ms}, got {h}×{w}",
                self.cfg.ms_ssim_scales
            )));
        }
        let dm = Discriminator::MIN_SIZE;
        if self.cfg.adversarial() && h.min(w) < dm {
            return Err(Error::validation(format!(
                "the discriminator needs images of at least {dm}×{dm}, got {h}×{w}"
            )));
        }
        Ok(())
    }

    /// One discriminator update followed by one generator update against the
    /// freshly updated discriminator. Aborts on a non-finite loss before any
    /// parameter changes of that sub-step.
    pub fn train_step(&mut self, batch: &Batch, total_steps: usize) -> Result<LogRow> {
        let lr = cosine_lr(self.step as usize, total_steps, &self.cfg)?;
        let (_, _, h, w) = batch.degraded.dims4()?;
        self.check_image_size(h, w)?;
        let g = Graph::new();
        let gp = self.model.params.bind(&g, true);
        let pred = self
            .net
            .forward(&gp, g.constant(batch.degraded.clone()), ForwardOptions::default())?
            .restored;
        let target = g.constant(batch.clear.clone());

        let mut d_loss = 0.0;
        if self.cfg.adversarial() {
            d_loss = self.discriminator_step(&pred.value(), &batch.clear, lr)?;
        }

        let l1 = smooth_l1(pred, target)?;
        let ms = (h.min(w) >= ms_ssim_min_size(self.cfg.ms_ssim_scales))
            .then(|| ms_ssim_loss(pred, target, self.cfg.ms_ssim_scales))
            .transpose()?;
        let per = perceptual_loss(pred, target, &self.extractor)?;
        let adv = if self.cfg.adversarial() {
            let dp = self.disc_params.bind(&g, false);
            Some(generator_adv_loss(self.disc.forward(&dp, pred)?))
        } else {
            None
        };
        let val = |v: Option<Var<'_, f32>>| v.map_or(0.0, |v| v.item() as f64);
        let mut report = joint_loss(
            &LossComponents {
                l1: val(Some(l1)),
                msssim: val(ms),
                perceptual: val(Some(per)),
                adversarial: val(adv),
            },
            &self.cfg.loss,
        )?;
        report.d_loss = d_loss;

        let w = &self.cfg.loss;
        let mut total = l1.scale(w.l1);
        for (term, weight) in [(ms, w.msssim), (Some(per), w.perceptual), (adv, w.adversarial)] {
            if let Some(t) = term.filter(|_| weight > 0.0) {
                total = total.add(t.scale(weight))?;
            }
        }
        let grads = g.backward(total)?;
        let mut grads: Vec<Tensor<f32>> = gp.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        self.gen_opt.update(&mut self.model.params, &grads, lr, &self.cfg.adam);
        self.step += 1;
        Ok(LogRow {
            step: self.step - 1,
            lr,
            report,
        })
    }

    fn discriminator_step(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>, lr: f64) -> Result<f64> {
        let g = Graph::new();
        let dp = self.disc_params.bind(&g, true);
        let d_real = self.disc.forward(&dp, g.constant(real.clone()))?;
        let d_fake = self.disc.forward(&dp, g.constant(fake.clone()))?;
        let loss = discriminator_loss(d_real, d_fake);
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "discriminator".into(),
            });
        }
        let grads = g.backward(loss)?;
        let mut grads: Vec<Tensor<f32>> = dp.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        self.disc_opt.update(&mut self.disc_params, &grads, lr, &self.cfg.adam);
        Ok(value)
    }

    pub fn steps_per_epoch(&self, sets: &[PairSet]) -> usize {
        let pairs: usize = sets.iter().map(|s| s.pairs.len()).sum();
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| pairs.div_ceil(self.cfg.batch_size).max(1))
    }

    /// Batch for optimizer step `step`; depends only on `(seed, step)`.
    pub fn batch_for_step(&self, sets: &[PairSet], step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        mixed_batch(sets, self.cfg.batch_size, &mut rng)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::json!({
            "kind": "training",
            "model": self.model.config,
            "train": self.cfg,
            "step": self.step,
            "epoch": self.epoch,
            "gen_adam_t": self.gen_opt.t,
            "disc_adam_t": self.disc_opt.t,
        }));
        a.push("gen", self.model.params.clone());
        a.push("disc", self.disc_params.clone());
        a.push("gen.adam_m", self.gen_opt.m.clone());
        a.push("gen.adam_v", self.gen_opt.v.clone());
        a.push("disc.adam_m", self.disc_opt.m.clone());
        a.push("disc.adam_v", self.disc_opt.v.clone());
        a
    }

    pub fn from_archive(mut a: Archive, path: &Path) -> Result<Self> {
        let bad = |what: &str| Error::format(path, format!("checkpoint lacks a valid `{what}`"));
        let meta = std::mem::take(&mut a.meta);
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(k));
        let model_cfg: ModelConfig = serde_json::from_value(get("model")?).map_err(|_| bad("model"))?;
        let cfg: TrainConfig = serde_json::from_value(get("train")?).map_err(|_| bad("train"))?;
        let num = |k: &str| -> Result<u64> { get(k)?.as_u64().ok_or_else(|| bad(k)) };
        let (step, epoch, gt, dt) = (
            num("step")?,
            num("epoch")? as usize,
            num("gen_adam_t")?,
            num("disc_adam_t")?,
        );
        let mut take = |g: &str| a.take_group(g).ok_or_else(|| bad(g));
        let gen = take("gen")?;
        let disc_params = take("disc")?;
        let gen_opt = AdamState {
            m: take("gen.adam_m")?,
            v: take("gen.adam_v")?,
            t: gt,
        };
        let disc_opt = AdamState {
            m: take("disc.adam_m")?,
            v: take("disc.adam_v")?,
            t: dt,
        };
        let disc = Discriminator::new(cfg.disc_width)?;
        let model = ModelParams {
            config: model_cfg,
            params: gen,
        };
        Self::assemble(cfg, model, disc, disc_params, Some((gen_opt, disc_opt)), step, epoch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?, path)
    }
}

/// Writes generator weights and config only.
pub fn save_model(path: &Path, m: &ModelParams) -> Result<()> {
    let mut a = Archive::new(serde_json::json!({ "kind": "model", "model": m.config }));
    a.push("gen", m.params.clone());
    a.save(path)
}

/// Reads the generator from a model or training checkpoint.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut a = Archive::load(path)?;
    let cfg = a
        .meta
        .get("model")
        .cloned()
        .ok_or_else(|| Error::format(path, "checkpoint lacks a model config"))?;
    let config: ModelConfig = serde_json::from_value(cfg).map_err(|e| Error::format(path, format!("model: {e}")))?;
    let params = a
        .take_group("gen")
        .ok_or_else(|| Error::format(path, "checkpoint lacks generator weights"))?;
    let m = ModelParams { config, params };
    m.network().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(m)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.hzc")
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs epochs `trainer.epoch..epochs` (or up to `stop_after`). With an
/// output directory, appends to `train_log.csv` and writes checkpoints every
/// `checkpoint_every` epochs, at the final epoch and at `stop_after`.
pub fn fit(trainer: &mut Trainer, sets: &[PairSet], out_dir: Option<&Path>) -> Result<FitSummary> {
    trainer.cfg.validate()?;
    let first = sets
        .iter()
        .flat_map(|s| s.pairs.first())
        .next()
        .ok_or_else(|| Error::validation("no training pairs"))?;
    let shape = first.0.shape().to_vec();
    for s in sets {
        if s.pairs.is_empty() {
            return Err(Error::validation(format!("dataset `{}` is empty", s.name)));
        }
        if let Some((d, c)) = s.pairs.iter().find(|(d, c)| d.shape() != shape || c.shape() != shape) {
            return Err(Error::validation(format!(
                "dataset `{}`: all training images must share one size ({:?} vs {:?}/{:?})",
                s.name,
                shape,
                d.shape(),
                c.shape()
            )));
        }
    }
    trainer.check_image_size(shape[2], shape[3])?;

    let spe = trainer.steps_per_epoch(sets);
    let epochs = trainer.cfg.epochs;
    let total = epochs * spe;
    let stop = trainer.cfg.stop_after.unwrap_or(epochs).min(epochs);
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            let fresh = !p.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
            }
            Some((f, p))
        }
        None => None,
    };
    let mut summary = FitSummary::default();
    while trainer.epoch < stop {
        for _ in 0..spe {
            let batch = trainer.batch_for_step(sets, trainer.step)?;
            let row = trainer.train_step(&batch, total)?;
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            summary.log.push(row);
        }
        trainer.epoch += 1;
        let e = trainer.epoch;
        log::info!(
            "epoch {e}/{epochs} step {} total {:.5}",
            trainer.step,
            summary.log.last().map_or(0.0, |r| r.report.total)
        );
        if let Some(dir) = out_dir {
            if e.is_multiple_of(trainer.cfg.checkpoint_every) || e == epochs || e == stop {
                let p = dir.join(checkpoint_name(e));
                trainer.to_archive().save(&p)?;
                summary.checkpoints.push(p);
            }
        }
    }
    if let Some((f, p)) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    Ok(summary)
}
