//! Experiment grid runner: sweeps model × modalities × prior × past ×
//! future × seed, training each cell from fresh parameters, appending rows
//! to `results.csv` incrementally so partial results survive interruption,
//! and pivoting results into the comparison-table layouts.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::io::Dataset;
use crate::data::{split_dataset, window_all, Sample, SplitConvs};
use crate::error::{Error, Result};
use crate::modality::{modality_set_name, parse_modality_set, Modality};
use crate::model::{table1_presets, ModelKind, ModelSpec};
use crate::nn::ModelDims;
use crate::tensor::Element;
use crate::train::{evaluate, train_model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

/// One grid cell result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub modalities: String,
    pub prior: bool,
    pub past_s: usize,
    pub future_s: usize,
    pub seed: u64,
    pub split: String,
    pub top1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Model presets. Bare baseline names cross with the `modalities` axis;
    /// presets that pin their modalities (any `3m:*`, or `eft:T+V`) do not.
    pub models: Vec<String>,
    pub modalities: Vec<String>,
    pub prior: Vec<bool>,
    pub past_s: Vec<usize>,
    pub future_s: Vec<usize>,
    pub seeds: Vec<u64>,
    pub splits: Vec<String>,
    pub dims: ModelDims,
    pub l_out: usize,
    pub train: TrainConfig,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub precision: Precision,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            models: vec!["3m:T>V|A>V".into()],
            modalities: vec!["T+A+V".into()],
            prior: vec![true],
            past_s: vec![4, 5, 10, 30],
            future_s: vec![1, 3, 5, 10],
            seeds: vec![0],
            splits: vec!["test".into()],
            dims: ModelDims::default(),
            l_out: 12,
            train: TrainConfig::default(),
            split_fractions: [0.78, 0.06, 0.16],
            split_seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub kind: ModelKind,
    pub model_name: String,
    pub modalities: Vec<Modality>,
    pub prior: bool,
    pub past_s: usize,
    pub future_s: usize,
    pub seed: u64,
}

/// Expands the grid axes into cells, in deterministic order.
pub fn expand_cells(spec: &GridSpec) -> Result<Vec<GridCell>> {
    if spec.models.is_empty()
        || spec.prior.is_empty()
        || spec.past_s.is_empty()
        || spec.future_s.is_empty()
        || spec.seeds.is_empty()
    {
        return Err(Error::Config("grid axes must all be non-empty".into()));
    }
    let mut cells = Vec::new();
    for preset in &spec.models {
        let base = ModelKind::parse(preset)?;
        let pinned = matches!(base, ModelKind::ThreeM { .. }) || preset.contains(':');
        let mod_sets: Vec<Vec<Modality>> = if pinned {
            vec![base.modalities()]
        } else {
            spec.modalities
                .iter()
                .map(|s| parse_modality_set(s))
                .collect::<Result<_>>()?
        };
        for mods in &mod_sets {
            let kind = base.with_modalities(mods)?;
            for &prior in &spec.prior {
                for &past_s in &spec.past_s {
                    for &future_s in &spec.future_s {
                        for &seed in &spec.seeds {
                            cells.push(GridCell {
                                kind: kind.clone(),
                                model_name: kind.name(),
                                modalities: mods.clone(),
                                prior,
                                past_s,
                                future_s,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn model_spec_for(spec: &GridSpec, ds: &Dataset, cell: &GridCell) -> ModelSpec {
    ModelSpec {
        kind: cell.kind.clone(),
        dims: spec.dims,
        mod_dims: ds.dims,
        n_classes: ds.n_classes,
        use_prior: cell.prior,
        l_out: spec.l_out,
    }
}

fn run_cell<E: Element>(
    spec: &GridSpec,
    ds: &Dataset,
    splits: &SplitConvs,
    cell: &GridCell,
) -> Result<Vec<ResultRow>> {
    let train = window_all(&splits.train, cell.past_s, cell.future_s)?;
    let val = window_all(&splits.val, cell.past_s, cell.future_s)?;
    let test = window_all(&splits.test, cell.past_s, cell.future_s)?;

    let mspec = model_spec_for(spec, ds, cell);
    let mut model = mspec.build::<E>(cell.seed)?;
    let cfg = TrainConfig {
        seed: cell.seed,
        ..spec.train
    };
    train_model(model.as_mut(), &train, &val, &cfg)?;

    let mut rows = Vec::new();
    for split_name in &spec.splits {
        let samples: &[Sample] = match split_name.as_str() {
            "train" => &train,
            "val" => &val,
            "test" => &test,
            other => {
                return Err(Error::Config(format!(
                    "unknown split '{other}' (expected train, val, or test)"
                )))
            }
        };
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "split '{split_name}' has no samples at past={} future={}",
                cell.past_s, cell.future_s
            )));
        }
        rows.push(ResultRow {
            model: cell.model_name.clone(),
            modalities: modality_set_name(&cell.modalities),
            prior: cell.prior,
            past_s: cell.past_s,
            future_s: cell.future_s,
            seed: cell.seed,
            split: split_name.clone(),
            top1: evaluate(model.as_ref(), samples)?,
        });
    }
    Ok(rows)
}

/// Validates every cell, then trains and evaluates each one independently
/// (fresh parameters per cell), appending rows to `out_csv` as cells finish.
/// Cells run in parallel across `jobs` workers; the returned rows are in
/// deterministic cell order regardless of `jobs`.
pub fn run_grid(spec: &GridSpec, ds: &Dataset, out_csv: &Path, jobs: usize) -> Result<Vec<ResultRow>> {
    spec.train.validate()?;
    let cells = expand_cells(spec)?;
    // The whole grid must be constructible before any training starts.
    for cell in &cells {
        model_spec_for(spec, ds, cell).validate()?;
    }

    let splits = split_dataset(ds.convs.clone(), spec.split_fractions, spec.split_seed)?;
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let writer = Mutex::new(csv::Writer::from_path(out_csv)?);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let results: Vec<Result<Vec<ResultRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let rows = match spec.precision {
                    Precision::F32 => run_cell::<f32>(spec, ds, &splits, cell)?,
                    Precision::F64 => run_cell::<f64>(spec, ds, &splits, cell)?,
                };
                let mut w = writer.lock().expect("writer lock");
                for row in &rows {
                    w.serialize(row)?;
                }
                w.flush()?;
                Ok(rows)
            })
            .collect()
    });

    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table1,
    Table2,
}

impl std::str::FromStr for ReportStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(ReportStyle::Table1),
            "table2" => Ok(ReportStyle::Table2),
            other => Err(Error::Config(format!(
                "unknown report style '{other}' (expected table1 or table2)"
            ))),
        }
    }
}

fn modality_rank(set: &str) -> usize {
    ["T", "V", "A", "T+V", "T+A", "A+V", "T+A+V"]
        .iter()
        .position(|s| *s == set)
        .unwrap_or(usize::MAX)
}

fn model_rank(model: &str) -> usize {
    match model {
        "eft" => 0,
        "lft" => 1,
        "mlp" => 2,
        other => {
            3 + table1_presets()
                .iter()
                .position(|p| p == other)
                .unwrap_or(100)
        }
    }
}

/// Pivots result rows into a plain-text table: one row per
/// (prior, modalities, model), one column per (past, future) pair, each cell
/// the mean test top-1 over seeds, in percent.
pub fn render_report(rows: &[ResultRow], style: ReportStyle) -> Result<String> {
    let split = if rows.iter().any(|r| r.split == "test") {
        "test"
    } else {
        rows.first()
            .map(|r| r.split.as_str())
            .ok_or_else(|| Error::Contract("no result rows to report".into()))?
    };
    let rows: Vec<&ResultRow> = rows.iter().filter(|r| r.split == split).collect();

    let style_rows: Vec<&ResultRow> = match style {
        ReportStyle::Table1 => {
            let three_m: Vec<&ResultRow> = rows
                .iter()
                .copied()
                .filter(|r| r.model.starts_with("3m"))
                .collect();
            if three_m.iter().any(|r| r.prior) {
                three_m.into_iter().filter(|r| r.prior).collect()
            } else {
                three_m
            }
        }
        ReportStyle::Table2 => rows,
    };
    if style_rows.is_empty() {
        return Err(Error::Contract(
            "no rows match the requested report style".into(),
        ));
    }

    let mut columns: Vec<(usize, usize)> = style_rows
        .iter()
        .map(|r| (r.past_s, r.future_s))
        .collect();
    columns.sort_unstable();
    columns.dedup();

    type Key = (bool, String, String);
    let mut cells: BTreeMap<Key, BTreeMap<(usize, usize), Vec<f64>>> = BTreeMap::new();
    for r in &style_rows {
        cells
            .entry((r.prior, r.modalities.clone(), r.model.clone()))
            .or_default()
            .entry((r.past_s, r.future_s))
            .or_default()
            .push(r.top1);
    }

    let mut keys: Vec<Key> = cells.keys().cloned().collect();
    keys.sort_by_key(|(prior, mods, model)| {
        (*prior, modality_rank(mods), model_rank(model), model.clone())
    });

    let mut header = vec![
        "prior".to_string(),
        "modalities".to_string(),
        "model".to_string(),
    ];
    for (p, f) in &columns {
        header.push(format!("p{p}/f{f}"));
    }
    let mut lines: Vec<Vec<String>> = vec![header];
    for key in keys {
        let (prior, mods, model) = &key;
        let mut line = vec![
            if *prior { "true" } else { "false" }.to_string(),
            mods.clone(),
            model.clone(),
        ];
        for col in &columns {
            match cells[&key].get(col) {
                Some(vals) => {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    line.push(format!("{:.2}", mean * 100.0));
                }
                None => line.push("-".into()),
            }
        }
        lines.push(line);
    }

    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &lines {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}", w = w))
            .collect();
        out.push_str(&padded.join("  "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::modality::ModalityDims;

    fn tiny_dataset() -> Dataset {
        let cfg = SynthConfig {
            n_conversations: 6,
            duration_s: 14,
            dims: ModalityDims { t: 5, a: 3, v: 6 },
            noise_scale: 0.4,
            ..SynthConfig::default()
        };
        Dataset {
            convs: synth_generate(&cfg).unwrap(),
            dims: cfg.dims,
            n_classes: cfg.n_classes(),
            windows_per_second: cfg.windows_per_second,
        }
    }

    fn tiny_grid() -> GridSpec {
        GridSpec {
            models: vec!["mlp".into()],
            modalities: vec!["T+A".into()],
            prior: vec![false],
            past_s: vec![2],
            future_s: vec![1],
            seeds: vec![0],
            splits: vec!["test".into()],
            dims: ModelDims {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_layers: 1,
                dropout: 0.0,
            },
            l_out: 2,
            train: TrainConfig {
                lr: 1e-3,
                epochs: 2,
                batch_size: 8,
                patience: None,
                ..TrainConfig::default()
            },
            split_fractions: [0.5, 0.25, 0.25],
            split_seed: 0,
            precision: Precision::F32,
        }
    }

    #[test]
    fn expand_crosses_axes_in_order() {
        let spec = GridSpec {
            models: vec!["3m:T>V|A>V".into(), "eft".into()],
            modalities: vec!["T+V".into(), "T+A+V".into()],
            prior: vec![false, true],
            past_s: vec![4, 5, 10, 30],
            future_s: vec![1, 3, 5, 10],
            seeds: vec![0],
            ..tiny_grid()
        };
        let cells = expand_cells(&spec).unwrap();
        // 3m is pinned to its own modality set: 1 × 2 × 16 cells; eft crosses
        // the two sets: 2 × 2 × 16.
        assert_eq!(cells.len(), 32 + 64);
        let col_pairs: std::collections::BTreeSet<(usize, usize)> =
            cells.iter().map(|c| (c.past_s, c.future_s)).collect();
        assert_eq!(col_pairs.len(), 16);
    }

    #[test]
    fn mismatched_pinned_modalities_error() {
        let spec = GridSpec {
            models: vec!["eft:T".into()],
            modalities: vec!["T+V".into()],
            ..tiny_grid()
        };
        // Pinned preset ignores the modality axis entirely.
        let cells = expand_cells(&spec).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].modalities, vec![Modality::T]);
    }

    #[test]
    fn unknown_preset_fails_before_training() {
        let ds = tiny_dataset();
        let spec = GridSpec {
            models: vec!["mlp".into(), "not-a-model".into()],
            ..tiny_grid()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_grid(&spec, &ds, &dir.path().join("r.csv"), 1).unwrap_err();
        assert!(err.to_string().contains("valid presets"), "{err}");
    }

    #[test]
    fn one_by_one_grid_equals_single_training_run() {
        let ds = tiny_dataset();
        let spec = tiny_grid();
        let dir = tempfile::tempdir().unwrap();
        let rows = run_grid(&spec, &ds, &dir.path().join("r.csv"), 1).unwrap();
        assert_eq!(rows.len(), 1);

        // The same cell trained directly.
        let splits =
            split_dataset(ds.convs.clone(), spec.split_fractions, spec.split_seed).unwrap();
        let train = window_all(&splits.train, 2, 1).unwrap();
        let val = window_all(&splits.val, 2, 1).unwrap();
        let test = window_all(&splits.test, 2, 1).unwrap();
        let mspec = ModelSpec {
            kind: ModelKind::parse("mlp:T+A").unwrap(),
            dims: spec.dims,
            mod_dims: ds.dims,
            n_classes: ds.n_classes,
            use_prior: false,
            l_out: spec.l_out,
        };
        let mut model = mspec.build::<f32>(0).unwrap();
        let cfg = TrainConfig {
            seed: 0,
            ..spec.train
        };
        train_model(model.as_mut(), &train, &val, &cfg).unwrap();
        let acc = evaluate(model.as_ref(), &test).unwrap();
        assert_eq!(rows[0].top1.to_bits(), acc.to_bits());
    }

    #[test]
    fn csv_round_trip_and_incremental_write() {
        let ds = tiny_dataset();
        let spec = GridSpec {
            seeds: vec![0, 1],
            ..tiny_grid()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let rows = run_grid(&spec, &ds, &path, 1).unwrap();
        assert_eq!(rows.len(), 2);
        let read = read_results(&path).unwrap();
        assert_eq!(read.len(), 2);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("model,modalities,prior,past_s,future_s,seed,split,top1"));
    }

    #[test]
    fn report_pivots_sixteen_columns() {
        let mut rows = Vec::new();
        for model in ["3m:T>V|A>V", "eft"] {
            for past in [4usize, 5, 10, 30] {
                for future in [1usize, 3, 5, 10] {
                    for seed in [0u64, 1] {
                        rows.push(ResultRow {
                            model: model.into(),
                            modalities: "T+A+V".into(),
                            prior: true,
                            past_s: past,
                            future_s: future,
                            seed,
                            split: "test".into(),
                            top1: 0.5 + seed as f64 * 0.1,
                        });
                    }
                }
            }
        }
        let table2 = render_report(&rows, ReportStyle::Table2).unwrap();
        let lines: Vec<&str> = table2.lines().collect();
        assert_eq!(lines.len(), 3, "{table2}");
        assert_eq!(lines[0].split_whitespace().count(), 3 + 16);
        // Mean over the two seeds: (0.5 + 0.6) / 2 = 55.00.
        assert!(lines[1].contains("55.00"), "{table2}");

        let table1 = render_report(&rows, ReportStyle::Table1).unwrap();
        let t1_lines: Vec<&str> = table1.lines().collect();
        assert_eq!(t1_lines.len(), 2, "only the 3m row: {table1}");
        assert!(t1_lines[1].contains("3m:T>V|A>V"));
    }
}
