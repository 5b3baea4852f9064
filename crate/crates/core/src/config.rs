//! Flat `key = value` run configuration with dotted namespacing.
//!
//! ```text
//! # comments start with '#'
//! model.base_channels = 32
//! model.experts = 3,3,3
//! loss.preset = full
//! ```
//!
//! Later assignments win, so command-line overrides are applied after the
//! file. Unknown keys are rejected with the list of valid ones.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::moe::{Granularity, PatchGrid};
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory holding the dataset roots; falls back to `HAZEMOE_DATA`.
    pub root: Option<PathBuf>,
    /// Dataset roots (relative to `root` unless absolute), mixed per batch.
    pub datasets: Vec<String>,
    pub train_split: String,
    pub eval_split: String,
    /// Square crop/resize side for training pairs; `None` keeps full images.
    pub crop: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            datasets: Vec::new(),
            train_split: "train".into(),
            eval_split: "test".into(),
            crop: Some(64),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const RUN_CONFIG_FILE: &str = "config.txt";

pub const KEYS: &[&str] = &[
    "model.base_channels",
    "model.experts",
    "model.order",
    "model.patch_grid",
    "model.freq_channels",
    "model.router",
    "model.expert_block",
    "train.lr_init",
    "train.lr_min",
    "train.epochs",
    "train.batch_size",
    "train.steps_per_epoch",
    "train.seed",
    "train.ms_ssim_scales",
    "train.clip_norm",
    "train.checkpoint_every",
    "train.disc_width",
    "train.perceptual_seed",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "loss.preset",
    "loss.l1",
    "loss.msssim",
    "loss.perceptual",
    "loss.adversarial",
    "data.root",
    "data.datasets",
    "data.train_split",
    "data.eval_split",
    "data.crop",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::validation(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_three<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let items: Vec<T> = parse_list(key, v)?;
    <[T; 3]>::try_from(items)
        .map_err(|_| Error::validation(format!("{key}: expected three comma-separated values, got `{v}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v == none {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "model.base_channels" => m.base_channels = parse_num(key, v)?,
            "model.experts" => m.experts = parse_three(key, v)?,
            "model.order" => m.order = parse_three::<Granularity>(key, v)?,
            "model.patch_grid" => {
                let (gh, gw) = v
                    .split_once(['x', '×'])
                    .ok_or_else(|| Error::validation(format!("{key}: expected `GHxGW`, got `{v}`")))?;
                m.patch_grid = PatchGrid::new(parse_num(key, gh)?, parse_num(key, gw)?)?;
            }
            "model.freq_channels" => m.freq_channels = parse_num(key, v)?,
            "model.router" => m.router = parse_num(key, v)?,
            "model.expert_block" => m.expert_block = parse_num(key, v)?,
            "train.lr_init" => t.lr_init = parse_num(key, v)?,
            "train.lr_min" => t.lr_min = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_opt(key, v, "auto")?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.ms_ssim_scales" => t.ms_ssim_scales = parse_num(key, v)?,
            "train.clip_norm" => t.clip_norm = parse_opt(key, v, "off")?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.disc_width" => t.disc_width = parse_num(key, v)?,
            "train.perceptual_seed" => t.perceptual_seed = parse_num(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.adam_eps" => t.adam.eps = parse_num(key, v)?,
            "loss.preset" => t.loss = LossWeights::preset(v)?,
            "loss.l1" => t.loss.l1 = parse_num(key, v)?,
            "loss.msssim" => t.loss.msssim = parse_num(key, v)?,
            "loss.perceptual" => t.loss.perceptual = parse_num(key, v)?,
            "loss.adversarial" => t.loss.adversarial = parse_num(key, v)?,
            "data.root" => d.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.datasets" => {
                d.datasets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "data.train_split" => d.train_split = v.to_string(),
            "data.eval_split" => d.eval_split = v.to_string(),
            "data.crop" => d.crop = parse_opt(key, v, "none")?,
            _ => {
                return Err(Error::validation(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Validation(m) => Error::validation(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(c) = self.data.crop {
            self.model.check_input(c, c)?;
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let opt = |o: Option<String>, none: &str| o.unwrap_or_else(|| none.to_string());
        let order: Vec<&str> = m.order.iter().map(|g| g.name()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("model.base_channels", m.base_channels.to_string()),
            ("model.experts", join(&m.experts)),
            ("model.order", order.join(",")),
            ("model.patch_grid", format!("{}x{}", m.patch_grid.gh, m.patch_grid.gw)),
            ("model.freq_channels", m.freq_channels.to_string()),
            ("model.router", m.router.to_string()),
            ("model.expert_block", m.expert_block.to_string()),
            ("train.lr_init", t.lr_init.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            (
                "train.steps_per_epoch",
                opt(t.steps_per_epoch.map(|s| s.to_string()), "auto"),
            ),
            ("train.seed", t.seed.to_string()),
            ("train.ms_ssim_scales", t.ms_ssim_scales.to_string()),
            ("train.clip_norm", opt(t.clip_norm.map(|s| s.to_string()), "off")),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.disc_width", t.disc_width.to_string()),
            ("train.perceptual_seed", t.perceptual_seed.to_string()),
            ("train.adam_beta1", t.adam.beta1.to_string()),
            ("train.adam_beta2", t.adam.beta2.to_string()),
            ("train.adam_eps", t.adam.eps.to_string()),
            ("loss.l1", t.loss.l1.to_string()),
            ("loss.msssim", t.loss.msssim.to_string()),
            ("loss.perceptual", t.loss.perceptual.to_string()),
            ("loss.adversarial", t.loss.adversarial.to_string()),
            (
                "data.root",
                d.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("data.datasets", d.datasets.join(",")),
            ("data.train_split", d.train_split.clone()),
            ("data.eval_split", d.eval_split.clone()),
            ("data.crop", opt(d.crop.map(|s| s.to_string()), "none")),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Creates `<root>/run-<id>` and writes the canonical config into it.
    pub fn prepare_run_dir(&self, root: &std::path::Path) -> Result<PathBuf> {
        let dir = root.join(format!("run-{}", self.run_id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))?;
        Ok(dir)
    }

    /// First 12 hex digits of [`RunConfig::hash`]; names run directories.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert_block::ExpertKind;
    use crate::router::RouterKind;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let c = RunConfig::from_text(
            "# run\nmodel.experts = 1, 2,3  # per slot\n\nmodel.router=mlp\nmodel.patch_grid = 2x4\nloss.preset = l1\ntrain.clip_norm = off\ndata.crop = none\n",
        )
        .unwrap();
        assert_eq!(c.model.experts, [1, 2, 3]);
        assert_eq!(c.model.router, RouterKind::Mlp);
        assert_eq!((c.model.patch_grid.gh, c.model.patch_grid.gw), (2, 4));
        assert_eq!(c.train.loss, LossWeights::preset("l1").unwrap());
        assert_eq!((c.train.clip_norm, c.data.crop), (None, None));
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let e = RunConfig::from_text("model.widht = 3\n").unwrap_err();
        let msg = e.to_string();
        assert!(e.is_validation());
        assert!(msg.contains("line 1") && msg.contains("model.base_channels") && msg.contains("data.crop"));
        assert!(RunConfig::from_text("just words\n").unwrap_err().is_validation());
        assert!(RunConfig::from_text("model.experts = 1,2\n")
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn overrides_win_and_text_roundtrips() {
        let mut c = RunConfig::from_text("train.seed = 4\nmodel.expert_block = plain\n").unwrap();
        c.apply_overrides(&["train.seed=9", "model.order=pixel,image,patch"])
            .unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.expert_block, ExpertKind::Plain);
        assert_eq!(c.model.order[0], Granularity::Pixel);
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(c.apply_overrides(&["train.seed"]).is_err());
    }

    #[test]
    fn run_ids_are_content_addressed() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 12);
        b.set("model.experts", "2,2,2").unwrap();
        assert_ne!(a.run_id(), b.run_id());
        KEYS.iter()
            .for_each(|k| assert!(a.to_text().contains(&format!("{k} = ")) || *k == "loss.preset"));
    }

    #[test]
    fn validation_covers_crop() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.set("data.crop", "60").unwrap();
        assert!(c.validate().unwrap_err().is_validation());
    }
}
