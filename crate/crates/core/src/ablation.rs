//! Ablation sweeps: one content-addressed run per value of a config axis,
//! each trained and scored into a shared table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{RunConfig, KEYS};
use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::evalviz::{evaluate_set, format_psnr};
use crate::network::count_params;
use crate::training::{fit, Trainer};

pub const ABLATION_HEADER: &str = "axis,variant,params,run,dataset,psnr_db,ssim";
pub const ABLATION_FILE: &str = "ablation.csv";

/// `name=v1|v2|...`, e.g. `experts=1,1,1|2,2,2` or `loss=l1|full`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationAxis {
    pub name: String,
    /// Dotted config key the values are assigned to.
    pub key: String,
    pub values: Vec<String>,
}

/// Short axis names accepted besides full dotted keys.
pub fn axis_key(name: &str) -> Result<&'static str> {
    let key = match name {
        "experts" => "model.experts",
        "router" => "model.router",
        "block" | "expert_block" => "model.expert_block",
        "order" => "model.order",
        "loss" => "loss.preset",
        "grid" => "model.patch_grid",
        other => KEYS
            .iter()
            .copied()
            .find(|k| *k == other)
            .ok_or_else(|| Error::validation(format!("unknown ablation axis `{other}`")))?,
    };
    Ok(key)
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("ablation `{s}` is not `axis=v1|v2|...`")))?;
        let values: Vec<String> = vals.split('|').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::validation(format!("ablation `{s}` has an empty variant")));
        }
        Ok(Self {
            name: name.trim().to_string(),
            key: axis_key(name.trim())?.to_string(),
            values,
        })
    }
}

impl AblationAxis {
    /// One validated config per value, all other settings from `base`.
    pub fn variants(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        self.values
            .iter()
            .map(|v| {
                let mut c = base.clone();
                c.set(&self.key, v)?;
                c.validate()
                    .map_err(|e| Error::validation(format!("variant {}={v}: {e}", self.name)))?;
                Ok((v.clone(), c))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub params: usize,
    pub run: String,
    pub dataset: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        // variants may contain commas (expert counts)
        let _ = writeln!(
            s,
            "{},\"{}\",{},{},{},{},{:.6}",
            r.axis,
            r.variant,
            r.params,
            r.run,
            r.dataset,
            format_psnr(r.psnr),
            r.ssim
        );
    }
    s
}

/// Trains every variant on `train` and scores it on each set of `eval`.
/// With `out_root`, each run gets `run-<id>/` with its config, log and
/// checkpoints.
pub fn run_ablation(
    base: &RunConfig,
    axis: &AblationAxis,
    train: &[PairSet],
    eval: &[PairSet],
    out_root: Option<&Path>,
) -> Result<(Vec<AblationRow>, Vec<PathBuf>)> {
    let variants = axis.variants(base)?;
    let mut rows = Vec::new();
    let mut dirs = Vec::new();
    for (label, cfg) in variants {
        let dir = out_root.map(|r| cfg.prepare_run_dir(r)).transpose()?;
        let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
        log::info!("ablation {}={label}: run {}", axis.name, cfg.run_id());
        fit(&mut trainer, train, dir.as_deref())?;
        let params = count_params(&trainer.model);
        for set in eval {
            let m = evaluate_set(&trainer.model, set)?;
            rows.push(AblationRow {
                axis: axis.name.clone(),
                variant: label.clone(),
                params,
                run: cfg.run_id(),
                dataset: m.dataset,
                psnr: m.psnr,
                ssim: m.ssim,
            });
        }
        dirs.extend(dir);
    }
    Ok((rows, dirs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;
    use crate::network::{init_model, ModelConfig};

    #[test]
    fn parses_axes() {
        let a: AblationAxis = "experts=1,1,1|2,2,2|3,3,3|4,4,4".parse().unwrap();
        assert_eq!(a.key, "model.experts");
        assert_eq!(a.values.len(), 4);
        let l: AblationAxis = "loss=l1|l1+msssim|l1+msssim+per|full".parse().unwrap();
        assert_eq!(l.key, "loss.preset");
        assert_eq!(
            "train.lr_init=1e-3|1e-4".parse::<AblationAxis>().unwrap().key,
            "train.lr_init"
        );
        assert!("bogus=1|2".parse::<AblationAxis>().unwrap_err().is_validation());
        assert!("experts".parse::<AblationAxis>().is_err());
        assert!("experts=1,1,1||2,2,2".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn variants_validate_and_get_distinct_runs() {
        let base = RunConfig::default();
        let a: AblationAxis = "experts=1,1,1|2,2,2|3,3,3|4,4,4".parse().unwrap();
        let v = a.variants(&base).unwrap();
        let ids: std::collections::BTreeSet<_> = v.iter().map(|(_, c)| c.run_id()).collect();
        assert_eq!(ids.len(), 4);
        assert_eq!(v[3].1.model.experts, [4, 4, 4]);
        assert!("experts=0,1,1"
            .parse::<AblationAxis>()
            .unwrap()
            .variants(&base)
            .is_err());
    }

    #[test]
    fn plain_block_matches_ifib_parameter_count() {
        let ifib = count_params(&init_model(&ModelConfig::default(), 0).unwrap());
        let plain = count_params(
            &init_model(
                &ModelConfig {
                    expert_block: crate::expert_block::ExpertKind::Plain,
                    ..ModelConfig::default()
                },
                0,
            )
            .unwrap(),
        );
        let ratio = plain as f64 / ifib as f64;
        assert!((0.95..=1.05).contains(&ratio), "{plain} vs {ifib}");
    }

    #[test]
    fn sweep_writes_runs_and_rows() {
        let mut base = RunConfig::default();
        base.apply_overrides(&[
            "model.base_channels=8",
            "model.patch_grid=2x2",
            "train.epochs=1",
            "train.steps_per_epoch=1",
            "train.batch_size=1",
            "train.ms_ssim_scales=1",
            "train.disc_width=4",
            "data.crop=32",
        ])
        .unwrap();
        let train = vec![PairSet::synthetic(Task::Nighthaze, 2, 32, 1).unwrap()];
        let eval = vec![PairSet::synthetic(Task::Haze, 1, 32, 2).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let axis: AblationAxis = "router=far|mlp".parse().unwrap();
        let (rows, dirs) = run_ablation(&base, &axis, &train, &eval, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(dirs.len(), 2);
        assert!(rows[0].params > rows[1].params);
        for d in &dirs {
            assert!(d.join(crate::config::RUN_CONFIG_FILE).exists());
            assert!(d.join(crate::training::checkpoint_name(1)).exists());
        }
        let csv = rows_to_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), ABLATION_HEADER);
        assert_eq!(csv.lines().count(), 3);
    }
}
