//! The `turnformer` command-line entry point.
//!
//! Subcommands: `synth` (generate a synthetic dataset), `train`, `eval`,
//! `grid` (experiment sweeps), `gradcheck` (finite-difference verification),
//! and `report` (pivot results into the comparison-table layouts). Every run
//! writes an effective-config snapshot next to its outputs; command-line
//! flags override config-file values.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::check::{run_checks, CheckModule};
use crate::data::io::{load_dataset, save_dataset, Dataset};
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::{split_dataset, window_all};
use crate::error::{Error, Result};
use crate::model::{load_state_dict, state_dict, ModelKind, ModelSpec};
use crate::nn::ModelDims;
use crate::tensor::{checkpoint, Element};
use crate::train::grid::{
    read_results, render_report, run_grid, GridSpec, Precision, ReportStyle,
};
use crate::train::{evaluate, train_model, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "turnformer",
    version,
    about = "Multimodal turn-taking prediction: dataset synthesis, training, grids, verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic conversation dataset.
    Synth {
        /// TOML file with generator settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model preset, e.g. "3m:T>V|A>V" or "eft:T+V".
        #[arg(long)]
        model: Option<String>,
        /// Past window in seconds.
        #[arg(long)]
        past: Option<usize>,
        /// Prediction horizon in seconds.
        #[arg(long)]
        future: Option<usize>,
        /// Feed the current speaker label as input (posterior mode).
        #[arg(long)]
        prior: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for outputs.
        #[arg(long)]
        out: PathBuf,
        /// TOML run config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a finished training run on one split.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every cell of an experiment grid.
    Grid {
        /// Grid spec file (.json or .toml).
        #[arg(long)]
        spec: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Parallel cell workers.
        #[arg(long, env = "TURNFORMER_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Verify gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Pivot a results CSV into a comparison-table layout.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// "table1" (ablation rows) or "table2" (model x modality x prior).
        #[arg(long)]
        style: String,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub preset: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub l_out: usize,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            preset: "3m:T>V|A>V".into(),
            d_model: dims.d_model,
            n_heads: dims.n_heads,
            d_ff: dims.d_ff,
            n_layers: dims.n_layers,
            dropout: dims.dropout,
            l_out: 12,
            precision: Precision::F32,
        }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub past_s: usize,
    pub future_s: usize,
    pub prior: bool,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            past_s: 4,
            future_s: 1,
            prior: false,
            split_fractions: [0.78, 0.06, 0.16],
            split_seed: 0,
        }
    }
}

/// One training run, fully described. Serialized next to the outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!(
        "cannot read config file {}: {e}",
        path.display()
    )))?;
    Ok(toml::from_str(&text)?)
}

fn read_spec_file(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!(
        "cannot read grid spec {}: {e}",
        path.display()
    )))?;
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        Ok(serde_json::from_str(&text)?)
    } else {
        Ok(toml::from_str(&text)?)
    }
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: &'a str,
    top1: f64,
    n_samples: usize,
    model: String,
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = match config {
                Some(path) => read_toml(&path)?,
                None => SynthConfig::default(),
            };
            cfg.validate()?;
            let convs = synth_generate(&cfg)?;
            let ds = Dataset {
                convs,
                dims: cfg.dims,
                n_classes: cfg.n_classes(),
                windows_per_second: cfg.windows_per_second,
            };
            save_dataset(&ds, &out)?;
            write_toml(&out.join("synth_config.toml"), &cfg)?;
            println!(
                "wrote {} conversations ({} s at {} windows/s) to {}",
                ds.convs.len(),
                cfg.duration_s,
                cfg.windows_per_second,
                out.display()
            );
            Ok(0)
        }

        Command::Train {
            data,
            model,
            past,
            future,
            prior,
            seed,
            out,
            config,
        } => {
            let mut cfg: RunConfig = match config {
                Some(path) => read_toml(&path)?,
                None => RunConfig::default(),
            };
            // Flags override file values.
            cfg.data.path = Some(data.clone());
            if let Some(m) = model {
                cfg.model.preset = m;
            }
            if let Some(p) = past {
                cfg.data.past_s = p;
            }
            if let Some(f) = future {
                cfg.data.future_s = f;
            }
            if prior {
                cfg.data.prior = true;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            match cfg.model.precision {
                Precision::F32 => train_run::<f32>(&cfg, &out),
                Precision::F64 => train_run::<f64>(&cfg, &out),
            }
        }

        Command::Eval { run, split } => {
            let cfg: RunConfig = read_toml(&run.join("effective_config.toml"))?;
            match cfg.model.precision {
                Precision::F32 => eval_run::<f32>(&cfg, &run, &split),
                Precision::F64 => eval_run::<f64>(&cfg, &run, &split),
            }
        }

        Command::Grid {
            spec,
            data,
            out,
            jobs,
        } => {
            let grid_spec = read_spec_file(&spec)?;
            let ds = load_dataset(&data)?;
            let snapshot = out.with_extension("effective.toml");
            write_toml(&snapshot, &grid_spec)?;
            let rows = run_grid(&grid_spec, &ds, &out, jobs)?;
            println!("wrote {} result rows to {}", rows.len(), out.display());
            // Companion pivoted table in the comparison layout.
            if let Ok(table) = render_report(&rows, ReportStyle::Table2) {
                let table_path = out.with_extension("table.txt");
                fs::write(&table_path, &table)?;
                println!("pivoted table at {}", table_path.display());
            }
            Ok(0)
        }

        Command::Gradcheck { module } => {
            let module: CheckModule = module.parse()?;
            let reports = run_checks(module)?;
            let mut failures = 0;
            for r in &reports {
                println!(
                    "{}  {}  max_rel_err={:.3e} (tol {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    crate::check::REL_TOL
                );
                failures += usize::from(!r.passed);
            }
            println!("{} checks, {} failed", reports.len(), failures);
            Ok(if failures == 0 { 0 } else { 1 })
        }

        Command::Report { input, style, out } => {
            let style: ReportStyle = style.parse()?;
            let rows = read_results(&input)?;
            let table = render_report(&rows, style)?;
            print!("{table}");
            if let Some(path) = out {
                fs::write(&path, &table)?;
            }
            Ok(0)
        }
    }
}

fn train_run<E: Element>(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let data_dir = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset path configured".into()))?;
    let ds = load_dataset(data_dir)?;
    let kind = ModelKind::parse(&cfg.model.preset)?;
    let spec = ModelSpec {
        kind,
        dims: cfg.model.dims(),
        mod_dims: ds.dims,
        n_classes: ds.n_classes,
        use_prior: cfg.data.prior,
        l_out: cfg.model.l_out,
    };
    spec.validate()?;

    let splits = split_dataset(ds.convs, cfg.data.split_fractions, cfg.data.split_seed)?;
    let train = window_all(&splits.train, cfg.data.past_s, cfg.data.future_s)?;
    let val = window_all(&splits.val, cfg.data.past_s, cfg.data.future_s)?;
    let test = window_all(&splits.test, cfg.data.past_s, cfg.data.future_s)?;

    fs::create_dir_all(out)?;
    write_toml(&out.join("effective_config.toml"), cfg)?;

    let mut model = spec.build::<E>(cfg.train.seed)?;
    let outcome: TrainOutcome = train_model(model.as_mut(), &train, &val, &cfg.train)?;

    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    for m in &outcome.history {
        metrics.serialize(m)?;
    }
    metrics.flush()?;

    checkpoint::save(
        &out.join("model.ckpt"),
        &spec.digest(),
        &state_dict(model.as_ref()),
    )?;

    let test_acc = if test.is_empty() {
        None
    } else {
        Some(evaluate(model.as_ref(), &test)?)
    };
    let summary = serde_json::json!({
        "model": cfg.model.preset,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_metric": outcome.best_metric,
        "test_top1": test_acc,
        "train_samples": train.len(),
        "val_samples": val.len(),
        "test_samples": test.len(),
    });
    fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "trained {} for {} epochs; best epoch {} (metric {:.4}){}",
        cfg.model.preset,
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_metric,
        match test_acc {
            Some(a) => format!("; test top-1 {a:.4}"),
            None => String::new(),
        }
    );
    Ok(0)
}

fn eval_run<E: Element>(cfg: &RunConfig, run_dir: &Path, split: &str) -> Result<i32> {
    let data_dir = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("run config lacks the dataset path".into()))?;
    let ds = load_dataset(data_dir)?;
    let kind = ModelKind::parse(&cfg.model.preset)?;
    let spec = ModelSpec {
        kind,
        dims: cfg.model.dims(),
        mod_dims: ds.dims,
        n_classes: ds.n_classes,
        use_prior: cfg.data.prior,
        l_out: cfg.model.l_out,
    };

    let splits = split_dataset(ds.convs, cfg.data.split_fractions, cfg.data.split_seed)?;
    let convs = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    let samples = window_all(convs, cfg.data.past_s, cfg.data.future_s)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split '{split}' has no samples")));
    }

    let params = checkpoint::load::<E>(&run_dir.join("model.ckpt"), Some(&spec.digest()))?;
    let mut model = spec.build::<E>(cfg.train.seed)?;
    load_state_dict(model.as_mut(), &params)?;

    let acc = evaluate(model.as_ref(), &samples)?;
    let report = EvalReport {
        split,
        top1: acc,
        n_samples: samples.len(),
        model: cfg.model.preset.clone(),
    };
    fs::write(
        run_dir.join(format!("eval_{split}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("{split} top-1: {acc:.4} over {} samples", samples.len());
    Ok(0)
}

