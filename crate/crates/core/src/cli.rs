//! The four subcommands behind the `gridcast` binary.
//!
//! Every command writes the effective configuration it ran with next to its
//! outputs, so a run can be repeated from that file alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exogenous::{ExoProvider, WeatherExo};
use crate::grid_codec::{write_meta, write_movie, MovieMeta};
use crate::model::Predictor;
use crate::objectives::MetricReport;
use crate::sampler::{Manifest, ManifestEntry, ManifestStore, MovieSource, Split, ZeroExo};
use crate::synth_world::{generate_city, generate_weather, simulate_day, WeatherTable};
use crate::train::{
    evaluate_challenge, latest_checkpoint, load_checkpoint, read_metrics_tsv, report_tables, write_atomic,
    ChallengeReport, Checkpoint, Dataset, Persistence, RunSummary, Trainer,
};

/// Environment variable naming the directory that default run directories
/// are created under.
pub const RUN_ROOT_ENV: &str = "GRIDCAST_RUN_ROOT";
pub const CONFIG_ECHO: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_DIR: &str = "eval";

/// `$GRIDCAST_RUN_ROOT`, or `runs` in the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Identity of a run directory, read by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: String,
    pub city: String,
    pub epochs: String,
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Generates a synthetic city, its movies, a weather table and a manifest.
/// Refuses a non-empty `out_dir` unless `force` is set.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let non_empty = fs::read_dir(out_dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let synth = &cfg.data.synth;
    let spec = cfg.grid_spec()?;
    let city = generate_city(synth.seed, spec)?;
    let mut days = Vec::new();
    for d in 0..synth.num_days {
        let movie = simulate_day(&city, synth, &cfg.codec, d)?;
        let name = format!("day_{d:03}.t4cm");
        let path = out_dir.join(&name);
        write_movie(&movie, &path)?;
        write_meta(&path, &MovieMeta { city: cfg.data.city.clone(), day_index: d, codec: cfg.codec })?;
        let split = if d + cfg.data.val_days >= synth.num_days { Split::Val } else { Split::Train };
        days.push(ManifestEntry { day_index: d, path: name.into(), split });
    }
    generate_weather(synth.seed, synth.num_days, spec.bins_per_day)?.write_csv(&out_dir.join("weather.csv"))?;
    let manifest = Manifest {
        city: cfg.data.city.clone(),
        grid: spec,
        weather: Some("weather.csv".into()),
        week_offset: synth.week_offset,
        days,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.toml");
    manifest.save(&path)?;
    echo_config(out_dir, cfg)?;
    info!("wrote {} days of {}x{} traffic to {}", synth.num_days, spec.height, spec.width, out_dir.display());
    Ok(path)
}

fn open_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Data(format!("cannot read manifest {}: {e}", path.display())),
        e => e,
    })
}

fn exo_provider(cfg: &RunConfig, manifest: &Manifest, required: bool) -> Result<Arc<dyn ExoProvider>> {
    match &manifest.weather {
        Some(p) => {
            let table = WeatherTable::read_csv(&manifest.resolve(p), manifest.grid.bins_per_day)?;
            Ok(Arc::new(WeatherExo { table, scaling: cfg.exogenous, week_offset: manifest.week_offset }))
        }
        None if required => Err(Error::Data(format!("manifest for {} has no weather table", manifest.city))),
        None => Ok(Arc::new(ZeroExo)),
    }
}

/// The config as it applies to this manifest's city.
fn for_manifest(cfg: &RunConfig, manifest: &Manifest) -> Result<RunConfig> {
    let g = manifest.grid;
    if (g.height, g.width) != (cfg.data.height, cfg.data.width) {
        warn!("manifest grid {}x{} overrides the configured {}x{}", g.height, g.width, cfg.data.height, cfg.data.width);
    }
    let mut eff = cfg.effective(g.height, g.width)?;
    eff.data.city = manifest.city.clone();
    eff.data.height = g.height;
    eff.data.width = g.width;
    eff.data.bins_per_day = g.bins_per_day;
    Ok(eff)
}

/// Trains per the config on the manifest's train days, validating on its
/// val days. With `resume`, continues from the newest checkpoint in
/// `run_dir` up to the configured epoch count.
pub fn train(cfg: &RunConfig, manifest_path: &Path, run_dir: &Path, resume: bool) -> Result<Checkpoint> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let eff = for_manifest(cfg, &manifest)?;
    let model_cfg = eff.model_config(manifest.grid.height, manifest.grid.width)?;
    let tc = eff.train_config(model_cfg.clone());
    tc.validate()?;
    let exo = exo_provider(&eff, &manifest, model_cfg.use_exogenous)?;
    let data = Dataset {
        train_days: manifest.days(Split::Train),
        val_days: manifest.days(Split::Val),
        bins_per_day: manifest.grid.bins_per_day,
        source: Arc::new(ManifestStore::new(manifest.clone())),
        exo,
    };
    if data.train_days.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no training days", manifest_path.display())));
    }
    let mut trainer = if resume {
        let path = latest_checkpoint(run_dir)
            .ok_or_else(|| Error::Data(format!("no checkpoint to resume in {}", run_dir.display())))?;
        let ck = load_checkpoint(&path)?;
        info!("resuming from {} at epoch {}", path.display(), ck.epoch);
        Trainer::resume(tc, data, ck)?
    } else {
        Trainer::new(tc, data)?
    };
    echo_config(run_dir, &eff)?;
    trainer.run(Some(run_dir))?;
    let ck = trainer.checkpoint.clone();
    let meta = RunMeta { variant: model_cfg.variant.label().into(), city: manifest.city.clone(), epochs: ck.epochs_label() };
    write_json(&run_dir.join(SUMMARY_FILE), &meta)?;
    Ok(ck)
}

/// What `eval` scores.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalTarget {
    Checkpoint(PathBuf),
    /// The newest checkpoint in the run directory.
    Latest,
    Persistence,
}

/// Days `eval` visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaySet {
    Train,
    Val,
    All,
}

/// Runs the challenge protocol and writes `eval/report.json`,
/// `eval/table3.tsv` and the config echo under `run_dir`.
pub fn eval(cfg: &RunConfig, manifest_path: &Path, target: EvalTarget, run_dir: &Path, days: DaySet) -> Result<ChallengeReport> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let protocol = cfg.eval_protocol()?;
    protocol.validate(manifest.grid.bins_per_day)?;
    let eff = for_manifest(cfg, &manifest)?;
    let day_list = match days {
        DaySet::Train => manifest.days(Split::Train),
        DaySet::Val => manifest.days(Split::Val),
        DaySet::All => manifest.all_days(),
    };
    if day_list.is_empty() {
        return Err(Error::Data(format!("manifest {} has no days in the requested split", manifest_path.display())));
    }
    let source = ManifestStore::new(manifest.clone());
    let (predictor, meta): (Box<dyn Predictor>, RunMeta) = match target {
        EvalTarget::Persistence => (
            Box::new(Persistence { q: protocol.input_len }),
            RunMeta { variant: "persistence".into(), city: manifest.city.clone(), epochs: "-".into() },
        ),
        t => {
            let path = match t {
                EvalTarget::Checkpoint(p) => p,
                _ => latest_checkpoint(run_dir)
                    .ok_or_else(|| Error::Data(format!("no checkpoint in {}", run_dir.display())))?,
            };
            let ck = load_checkpoint(&path)?;
            let g = manifest.grid;
            if (ck.model.config.grid_h, ck.model.config.grid_w) != (g.height, g.width) {
                return Err(Error::Data(format!(
                    "checkpoint grid {}x{} does not match manifest grid {}x{}",
                    ck.model.config.grid_h, ck.model.config.grid_w, g.height, g.width
                )));
            }
            let meta = RunMeta {
                variant: ck.model.config.variant.label().into(),
                city: manifest.city.clone(),
                epochs: ck.epochs_label(),
            };
            (Box::new(ck.model) as Box<dyn Predictor>, meta)
        }
    };
    let exo = exo_provider(&eff, &manifest, false)?;
    let report = evaluate_challenge(predictor.as_ref(), &source, exo.as_ref(), &day_list, &protocol)?;
    let dir = run_dir.join(EVAL_DIR);
    echo_config(&dir, &eff)?;
    write_json(&dir.join("report.json"), &report.report)?;
    write_atomic(&dir.join("table3.tsv"), report.report.to_table().as_bytes())?;
    if !run_dir.join(SUMMARY_FILE).exists() {
        write_json(&run_dir.join(SUMMARY_FILE), &meta)?;
    }
    info!(
        "{} blocks on {} days of {}: mse {:.9} heading accuracy {:.6}",
        report.blocks.len(),
        day_list.len() - report.skipped_days.len(),
        source.city(),
        report.report.mse_total(),
        report.report.heading_accuracy()
    );
    Ok(report)
}

fn load_run(dir: &Path) -> Result<RunSummary> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    let metrics = dir.join("metrics.tsv");
    let history = if metrics.exists() { read_metrics_tsv(&metrics)? } else { Vec::new() };
    let report_path = dir.join(EVAL_DIR).join("report.json");
    let report: Option<MetricReport> = match fs::read_to_string(&report_path) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::format("report", e.to_string()))?),
        Err(_) => None,
    };
    if history.is_empty() && report.is_none() {
        return Err(Error::Data(format!("{} has neither metrics.tsv nor an evaluation report", dir.display())));
    }
    let meta: Option<RunMeta> = fs::read_to_string(dir.join(SUMMARY_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let meta = meta.unwrap_or(RunMeta { variant: name.clone(), city: "-".into(), epochs: history.len().to_string() });
    Ok(RunSummary { name, variant: meta.variant, city: meta.city, epochs: meta.epochs, report, history })
}

/// Collects every readable run and writes comparison tables and loss plots
/// to `out_dir`. Unreadable runs are skipped with a warning.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for dir in run_dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => warn!("skipping run {}: {e}", dir.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::Data("no run directory had usable metrics".into()));
    }
    report_tables(&runs, out_dir)
}
