//! `hazemoe`: synthesize paired data, train, restore, evaluate and visualize
//! expert routing.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hazemoe_core::ablation::{rows_to_csv, run_ablation, AblationAxis, ABLATION_FILE};
use hazemoe_core::config::{RunConfig, RUN_CONFIG_FILE};
use hazemoe_core::data::{load_image, save_image, synthesize_split, ClearSource, PairSet, PairedDataset, Task};
use hazemoe_core::evalviz::{
    evaluate_all, load_degraded, restore_any_size, summarize_experts, Identity, Restorer, USAGE_FILE,
};
use hazemoe_core::network::{init_model, ModelParams};
use hazemoe_core::training::{fit, load_model, Trainer};
use hazemoe_core::{Error, Result};

const DATA_ENV: &str = "HAZEMOE_DATA";

#[derive(Parser, Debug)]
#[command(
    name = "hazemoe",
    version,
    about = "Multi-level mixture-of-experts restoration for hazy, low-light and night-haze images",
    after_help = "Relative dataset paths resolve against --data-root, then data.root from the config, \
                  then the HAZEMOE_DATA environment variable, then the working directory.\n\
                  Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure."
)]
struct Cli {
    /// Seed for random choices (default 0; training keeps train.seed from
    /// its config unless this is given).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade clear images into a paired dataset split with a manifest.
    Synth(SynthArgs),
    /// Train a model (or an ablation sweep) into a content-addressed run directory.
    Train(TrainArgs),
    /// Restore images with a trained model; output sizes equal input sizes.
    Restore(RestoreArgs),
    /// Score datasets and write `dataset,count,psnr_db,ssim` CSV.
    Eval(EvalArgs),
    /// Average routing weights per dataset and export heatmaps.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of clear PNG images.
    #[arg(long, conflicts_with = "procedural")]
    source: Option<PathBuf>,
    /// Generate this many procedural clear scenes instead of reading --source.
    #[arg(long)]
    procedural: Option<usize>,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Dataset root to write into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// haze, lowlight or nighthaze.
    #[arg(long, default_value = "nighthaze")]
    kind: Task,
    /// Use the identity degradation (degraded = clear).
    #[arg(long)]
    neutral: bool,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.experts=2,2,2`. Wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root to train on (repeatable); appended to data.datasets.
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Directory that relative dataset paths resolve against.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many epochs; the schedule still spans all epochs.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue from a training checkpoint inside its run directory.
    #[arg(long, conflicts_with_all = ["config", "overrides", "epochs", "ablate", "datasets"])]
    resume: Option<PathBuf>,
    /// Sweep one axis, e.g. `experts=1,1,1|2,2,2` or `loss=l1|full`.
    #[arg(long)]
    ablate: Option<String>,
    /// Directory that receives `run-<id>/` directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model or training checkpoint.
    #[arg(long, required_unless_present = "init")]
    checkpoint: Option<PathBuf>,
    /// Use a freshly initialized model (seeded by --seed) instead.
    #[arg(long, conflicts_with = "checkpoint")]
    init: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// PNG file or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Dataset root (repeatable).
    #[arg(long = "dataset", required = true)]
    datasets: Vec<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory that relative dataset paths resolve against.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present_any = ["init", "identity"], conflicts_with = "identity")]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "identity")]
    init: bool,
    /// Score the degraded images themselves.
    #[arg(long)]
    identity: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DatasetArgs,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Images per dataset that get heatmaps.
    #[arg(long, default_value_t = 4)]
    heatmaps: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let seed = cli.seed;
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed),
        Command::Restore(a) => cmd_restore(a, seed.unwrap_or(0)),
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0)),
        Command::Viz(a) => cmd_viz(a, seed.unwrap_or(0)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let source = match (a.source, a.procedural) {
        (Some(dir), None) => ClearSource::Dir(dir),
        (None, Some(count)) => ClearSource::Procedural { count, size: a.size },
        _ => return Err(Error::validation("give exactly one of --source or --procedural")),
    };
    let rows = synthesize_split(&source, &a.out, &a.split, a.kind, a.neutral, seed)?;
    println!("{} pairs -> {}", rows.len(), a.out.join(&a.split).display());
    Ok(())
}

fn load_config(c: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", p.display())))?;
    }
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn data_root(flag: Option<&Path>, cfg: Option<&Path>) -> Option<PathBuf> {
    flag.or(cfg)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

fn resolve(root: Option<&Path>, name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}

fn open_all(root: Option<&Path>, names: &[String], split: &str) -> Result<Vec<PairedDataset>> {
    names
        .iter()
        .map(|n| {
            let dir = resolve(root, n);
            if !dir.join(split).is_dir() {
                return Err(Error::validation(format!(
                    "dataset split {} not found",
                    dir.join(split).display()
                )));
            }
            PairedDataset::open(&dir, split)
        })
        .collect()
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    if let Some(ckpt) = &a.resume {
        return resume(ckpt, &a, seed);
    }
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.data.datasets.extend(a.datasets.iter().cloned());
    cfg.train.stop_after = a.stop_after;
    cfg.validate()?;
    let axis: Option<AblationAxis> = a.ablate.as_deref().map(str::parse).transpose()?;
    if let Some(ax) = &axis {
        ax.variants(&cfg)?;
    }
    if cfg.data.datasets.is_empty() {
        return Err(Error::validation("no datasets; use --dataset or data.datasets"));
    }
    let root = data_root(a.data_root.as_deref(), cfg.data.root.as_deref());
    let train_ds = open_all(root.as_deref(), &cfg.data.datasets, &cfg.data.train_split)?;
    let sets = load_sets(&train_ds, cfg.data.crop, cfg.train.seed)?;

    match axis {
        None => {
            let dir = cfg.prepare_run_dir(&a.out)?;
            if dir.join(hazemoe_core::training::LOG_FILE).exists() {
                return Err(Error::validation(format!(
                    "{} already holds a run; use --resume with one of its checkpoints",
                    dir.display()
                )));
            }
            let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
            let s = fit(&mut trainer, &sets, Some(&dir))?;
            report_fit(&dir, &s);
        }
        Some(ax) => {
            // held-out split when present, training pairs otherwise
            let eval = match open_all(root.as_deref(), &cfg.data.datasets, &cfg.data.eval_split) {
                Ok(ds) => load_sets(&ds, None, cfg.train.seed)?,
                Err(_) => sets.clone(),
            };
            let (rows, dirs) = run_ablation(&cfg, &ax, &sets, &eval, Some(&a.out))?;
            let p = a.out.join(ABLATION_FILE);
            fs::write(&p, rows_to_csv(&rows)).map_err(|e| Error::io(&p, e))?;
            for d in dirs {
                println!("{}", d.display());
            }
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn load_sets(ds: &[PairedDataset], crop: Option<usize>, seed: u64) -> Result<Vec<PairSet>> {
    ds.iter().map(|d| d.load_all(crop, seed)).collect()
}

fn resume(ckpt: &Path, a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let dir = ckpt
        .parent()
        .filter(|d| d.join(RUN_CONFIG_FILE).is_file())
        .ok_or_else(|| Error::validation(format!("{} is not inside a run directory", ckpt.display())))?
        .to_path_buf();
    let p = dir.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let cfg = RunConfig::from_text(&text).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?;
    let mut trainer = Trainer::load(ckpt)?;
    if trainer.model.config != cfg.model {
        return Err(Error::validation(format!(
            "{} does not match {}",
            ckpt.display(),
            p.display()
        )));
    }
    if let Some(seed) = seed.filter(|s| *s != trainer.cfg.seed) {
        return Err(Error::validation(format!(
            "--seed {seed} differs from the checkpoint's seed {}",
            trainer.cfg.seed
        )));
    }
    trainer.cfg.stop_after = a.stop_after;
    let root = data_root(a.data_root.as_deref(), cfg.data.root.as_deref());
    let ds = open_all(root.as_deref(), &cfg.data.datasets, &cfg.data.train_split)?;
    let sets = load_sets(&ds, cfg.data.crop, trainer.cfg.seed)?;
    let s = fit(&mut trainer, &sets, Some(&dir))?;
    report_fit(&dir, &s);
    Ok(())
}

fn report_fit(dir: &Path, s: &hazemoe_core::training::FitSummary) {
    if let Some(r) = s.log.last() {
        log::info!("step {} total {:.5}", r.step, r.report.total);
    }
    for c in &s.checkpoints {
        println!("{}", c.display());
    }
    println!("{}", dir.display());
}

fn load_or_init(checkpoint: Option<&Path>, init: bool, cfg: &ConfigArgs, seed: u64) -> Result<ModelParams> {
    match checkpoint {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::validation(format!("checkpoint {} not found", p.display())));
            }
            load_model(p)
        }
        None if init => {
            let c = load_config(cfg)?;
            c.model.validate()?;
            init_model(&c.model, seed)
        }
        None => Err(Error::validation("give --checkpoint or --init")),
    }
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::validation(format!("input {} not found", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::validation(format!("no PNG images in {}", input.display())));
    }
    Ok(files)
}

fn cmd_restore(a: RestoreArgs, seed: u64) -> Result<()> {
    let files = png_inputs(&a.input)?;
    let model = load_or_init(a.model.checkpoint.as_deref(), a.model.init, &a.model.cfg, seed)?;
    for f in &files {
        let x = load_image(f)?;
        let (y, _) = restore_any_size(&model, &x)?;
        let out = a.out.join(f.file_name().expect("listed files have names"));
        save_image(&out, &y)?;
        println!("{}", out.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let root = data_root(a.data.data_root.as_deref(), None);
    let ds = open_all(root.as_deref(), &a.data.datasets, &a.data.split)?;
    let model: Box<dyn Restorer> = if a.identity {
        Box::new(Identity)
    } else {
        Box::new(load_or_init(a.checkpoint.as_deref(), a.init, &a.cfg, seed)?)
    };
    let table = evaluate_all(model.as_ref(), &ds);
    match &a.out {
        Some(p) => table.write(p)?,
        None => print!("{}", table.to_csv()),
    }
    for (p, reason) in &table.failures {
        eprintln!("failed: {}: {reason}", p.display());
    }
    if table.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::format(
            &table.failures[0].0,
            format!("{} pair(s) could not be scored", table.failures.len()),
        ))
    }
}

fn cmd_viz(a: VizArgs, seed: u64) -> Result<()> {
    let root = data_root(a.data.data_root.as_deref(), None);
    let ds = open_all(root.as_deref(), &a.data.datasets, &a.data.split)?;
    let model = load_or_init(a.model.checkpoint.as_deref(), a.model.init, &a.model.cfg, seed)?;
    let mut sets = Vec::new();
    let mut stems = Vec::new();
    for d in &ds {
        let (imgs, s) = load_degraded(d)?;
        sets.push((d.name.clone(), imgs));
        stems.push(s);
    }
    // stems differ per dataset, so heatmaps are exported one dataset at a time
    let mut rows = Vec::new();
    for (set, st) in sets.into_iter().zip(&stems) {
        let s = summarize_experts(&model, &[set], Some((&a.out, a.heatmaps, st)))?;
        rows.extend(s.rows);
    }
    let summary = hazemoe_core::evalviz::ExpertUsageSummary { rows };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let p = a.out.join(USAGE_FILE);
    fs::write(&p, summary.to_csv()).map_err(|e| Error::io(&p, e))?;
    println!("{}", p.display());
    Ok(())
}
