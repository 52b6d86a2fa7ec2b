//! Task orchestration: single transfer runs, seed sweeps and the transfer
//! matrix over every ordered domain pair.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline::LstmForecaster;
use crate::config::ExperimentConfig;
use crate::dataio::{load_dataset, DomainRole};
use crate::encoder::CausalStructure;
use crate::error::{GcaError, Result};
use crate::eval;
use crate::model::{Domain, GcaModel, ModelConfig};
use crate::objective::Variant;
use crate::synthgen::{make_domain_family, DomainFamily, RawSeries};
use crate::trainer::{
    estimate_structure, evaluate, prepare_domain, train, Forecaster, TrainOutcome, TransferData,
};

/// Simulates the `[synthgen]` section.
pub fn simulate_family(cfg: &ExperimentConfig) -> Result<DomainFamily> {
    let s = cfg
        .synthgen
        .as_ref()
        .ok_or_else(|| GcaError::MissingField("synthgen".into()))?;
    make_domain_family(
        s.dims,
        s.max_lag,
        s.edge_density,
        &s.domains,
        s.structure_jitter,
        s.seed,
    )
}

/// Domains from `data.dataset_dir`, or simulated from `[synthgen]`.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Vec<RawSeries>> {
    match &cfg.data.dataset_dir {
        Some(dir) => load_dataset(dir),
        None => Ok(simulate_family(cfg)?.series),
    }
}

/// `(dims, max_lag)` implied by the config and data.
fn shape_of(cfg: &ExperimentConfig, series: &RawSeries) -> Result<(usize, usize)> {
    let dims = series.values.cols();
    let max_lag = cfg
        .model
        .max_lag
        .or_else(|| series.ground_truth.as_ref().map(|g| g.max_lag))
        .or_else(|| cfg.synthgen.as_ref().map(|s| s.max_lag))
        .ok_or_else(|| GcaError::MissingField("model.max_lag".into()))?;
    Ok((dims, max_lag))
}

/// Model configuration for `source → target` under `variant`.
pub fn model_config(
    cfg: &ExperimentConfig,
    source: &RawSeries,
    target: &RawSeries,
    variant: Variant,
) -> Result<ModelConfig> {
    let (dims, max_lag) = shape_of(cfg, source)?;
    if target.values.cols() != dims {
        return Err(GcaError::shape("target dims", dims, target.values.cols()));
    }
    let mut model_cfg = cfg.model.resolve(dims, max_lag)?;
    model_cfg.use_alpha = variant.uses_alpha();
    Ok(model_cfg)
}

pub fn find_domain<'a>(series: &'a [RawSeries], id: &str) -> Result<&'a RawSeries> {
    series
        .iter()
        .find(|s| s.domain_id == id)
        .ok_or_else(|| GcaError::InvalidArgument(format!("unknown domain `{id}`")))
}

/// Source and target named by `[data]`, defaulting to the first two domains.
pub fn select_pair<'a>(
    cfg: &ExperimentConfig,
    series: &'a [RawSeries],
) -> Result<(&'a RawSeries, &'a RawSeries)> {
    let pick = |name: &Option<String>, fallback: usize| match name {
        Some(id) => find_domain(series, id),
        None => series.get(fallback).ok_or_else(|| {
            GcaError::InvalidArgument("a transfer task needs at least two domains".into())
        }),
    };
    Ok((pick(&cfg.data.source, 0)?, pick(&cfg.data.target, 1)?))
}

pub fn transfer_data(
    cfg: &ExperimentConfig,
    source: &RawSeries,
    target: &RawSeries,
    t_in: usize,
    seed: u64,
) -> Result<TransferData> {
    let d = &cfg.data;
    let split_seed = d.split_seed.wrapping_add(seed);
    Ok(TransferData {
        source: prepare_domain(
            source,
            t_in,
            d.horizon,
            d.stride,
            &d.split,
            DomainRole::Source,
            split_seed,
        )?,
        target: prepare_domain(
            target,
            t_in,
            d.horizon,
            d.stride,
            &d.split,
            DomainRole::Target,
            split_seed,
        )?,
    })
}

/// Outcome of one trained transfer task.
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub source_id: String,
    pub target_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub test_rmse: f64,
    pub test_mae: f64,
    pub val_rmse: f64,
    pub auprc_source: Option<f64>,
    pub auprc_target: Option<f64>,
    pub structure_l1: Option<f64>,
    pub source_structure: Option<CausalStructure>,
    pub target_structure: Option<CausalStructure>,
    pub outcome: TrainOutcome,
}

/// Builds, trains and scores one model on `source → target`.
pub fn run_task(
    cfg: &ExperimentConfig,
    source: &RawSeries,
    target: &RawSeries,
    variant: Variant,
    seed: u64,
) -> Result<TaskResult> {
    let model_cfg = model_config(cfg, source, target, variant)?;
    let dims = model_cfg.dims;
    let data = transfer_data(cfg, source, target, model_cfg.t_in(), seed)?;
    let model = if variant.is_baseline() {
        Forecaster::Lstm(LstmForecaster::new(cfg.model.baseline(dims), seed)?)
    } else {
        Forecaster::Gca(GcaModel::new(model_cfg, seed)?)
    };
    let mut train_cfg = cfg.trainer.clone();
    train_cfg.variant = variant;
    train_cfg.seed = seed;
    let outcome = train(model, &data, &train_cfg, &cfg.objective)?;

    let test = evaluate(
        &outcome.model,
        &data.target.partitions.test,
        Domain::Target,
        cfg.data.horizon,
    )?;
    let val = evaluate(
        &outcome.model,
        &data.target.partitions.val,
        Domain::Target,
        cfg.data.horizon,
    )?;
    let (mut src_s, mut tgt_s, mut auprc_s, mut auprc_t, mut l1) = (None, None, None, None, None);
    if let Some(m) = outcome.model.as_gca() {
        let n = train_cfg.structure_eval_windows;
        let s = estimate_structure(m, &data.source.partitions.train, Domain::Source, n)?;
        let t = estimate_structure(m, &data.target.partitions.train, Domain::Target, n)?;
        if let Some(truth) = &source.ground_truth {
            auprc_s = Some(eval::auprc(&s, truth, true)?);
        }
        if let Some(truth) = &target.ground_truth {
            auprc_t = Some(eval::auprc(&t, truth, true)?);
        }
        l1 = Some(eval::structure_l1(&s, &t)?);
        src_s = Some(s);
        tgt_s = Some(t);
    }
    Ok(TaskResult {
        source_id: source.domain_id.clone(),
        target_id: target.domain_id.clone(),
        variant,
        seed,
        test_rmse: test.rmse,
        test_mae: test.mae,
        val_rmse: val.rmse,
        auprc_source: auprc_s,
        auprc_target: auprc_t,
        structure_l1: l1,
        source_structure: src_s,
        target_structure: tgt_s,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Per-seed metrics of one variant on one task, with summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: Option<Variant>,
    pub seeds: Vec<u64>,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    pub rmse_stats: MeanStd,
    pub mae_stats: MeanStd,
}

impl SweepSummary {
    pub fn from_runs(variant: Variant, runs: &[(u64, f64, f64)]) -> Self {
        let rmse: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let mae: Vec<f64> = runs.iter().map(|r| r.2).collect();
        SweepSummary {
            variant: Some(variant),
            seeds: runs.iter().map(|r| r.0).collect(),
            rmse_stats: MeanStd::of(&rmse),
            mae_stats: MeanStd::of(&mae),
            rmse,
            mae,
        }
    }
}

/// Independent runs over `seeds`; `on_run` sees every finished task.
pub fn seed_sweep(
    cfg: &ExperimentConfig,
    source: &RawSeries,
    target: &RawSeries,
    variant: Variant,
    seeds: &[u64],
    mut on_run: impl FnMut(&TaskResult),
) -> Result<SweepSummary> {
    if seeds.len() < 2 {
        return Err(GcaError::InvalidArgument(
            "a seed sweep needs at least two seeds".into(),
        ));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_task(cfg, source, target, variant, seed)?;
        runs.push((seed, r.test_rmse, r.test_mae));
        on_run(&r);
    }
    Ok(SweepSummary::from_runs(variant, &runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub source: String,
    pub target: String,
    pub cells: Vec<SweepSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub variants: Vec<Variant>,
    pub rows: Vec<TaskRow>,
}

/// Display name of a variant in tables.
pub fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Gca => "GCA",
        Variant::GcaR => "GCA-r",
        Variant::GcaE => "GCA-e",
        Variant::GcaS => "GCA-s",
        Variant::GcaAlpha => "GCA-α",
        Variant::LstmSt => "LSTM_S+T",
    }
}

impl TransferTable {
    /// Mean over tasks of each variant's mean RMSE and MAE.
    pub fn averages(&self) -> Vec<(f64, f64)> {
        (0..self.variants.len())
            .map(|i| {
                let n = self.rows.len().max(1) as f64;
                let r = self
                    .rows
                    .iter()
                    .map(|row| row.cells[i].rmse_stats.mean)
                    .sum::<f64>()
                    / n;
                let m = self
                    .rows
                    .iter()
                    .map(|row| row.cells[i].mae_stats.mean)
                    .sum::<f64>()
                    / n;
                (r, m)
            })
            .collect()
    }

    /// Text table: an RMSE and an MAE row per task, then the averages.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:<6}", "Task", "Metric");
        for v in &self.variants {
            let _ = write!(out, " {:>17}", variant_label(*v));
        }
        out.push('\n');
        for row in &self.rows {
            let task = format!("{}→{}", short(&row.source), short(&row.target));
            for (metric, pick) in [("RMSE", 0), ("MAE", 1)] {
                let _ = write!(
                    out,
                    "{:<10} {:<6}",
                    if pick == 0 { task.as_str() } else { "" },
                    metric
                );
                for c in &row.cells {
                    let s = if pick == 0 { c.rmse_stats } else { c.mae_stats };
                    let _ = write!(out, " {:>17}", format!("{:.4}±{:.4}", s.mean, s.std));
                }
                out.push('\n');
            }
        }
        let avg = self.averages();
        for (metric, pick) in [("RMSE", 0), ("MAE", 1)] {
            let _ = write!(
                out,
                "{:<10} {:<6}",
                if pick == 0 { "Average" } else { "" },
                metric
            );
            for a in &avg {
                let _ = write!(
                    out,
                    " {:>17}",
                    format!("{:.4}", if pick == 0 { a.0 } else { a.1 })
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Trailing digits of a domain id (`domain2` → `2`), or the id itself.
fn short(id: &str) -> &str {
    let digits = id.trim_start_matches(|c: char| !c.is_ascii_digit());
    if digits.is_empty() {
        id
    } else {
        digits
    }
}

/// Every ordered pair of distinct domains.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect()
}

/// Seed sweeps of every variant on every ordered domain pair.
pub fn transfer_matrix(
    cfg: &ExperimentConfig,
    series: &[RawSeries],
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&TaskResult),
) -> Result<TransferTable> {
    if series.len() < 2 {
        return Err(GcaError::InvalidArgument(
            "the transfer matrix needs at least two domains".into(),
        ));
    }
    let mut rows = Vec::new();
    for (s, t) in ordered_pairs(series.len()) {
        let cells = variants
            .iter()
            .map(|&v| seed_sweep(cfg, &series[s], &series[t], v, seeds, &mut on_run))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TaskRow {
            source: series[s].domain_id.clone(),
            target: series[t].domain_id.clone(),
            cells,
        });
    }
    Ok(TransferTable {
        variants: variants.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_and_stats() {
        assert_eq!(ordered_pairs(2), vec![(0, 1), (1, 0)]);
        assert_eq!(ordered_pairs(3).len(), 6);
        let s = MeanStd::of(&[1.0, 1.0, 1.0]);
        assert_eq!(
            s,
            MeanStd {
                mean: 1.0,
                std: 0.0
            }
        );
        let s = MeanStd::of(&[1.0, 3.0]);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn table_renders_rows_and_average() {
        let cell = SweepSummary::from_runs(Variant::Gca, &[(0, 0.9, 0.7), (1, 0.8, 0.6)]);
        let table = TransferTable {
            variants: vec![Variant::Gca],
            rows: vec![TaskRow {
                source: "domain1".into(),
                target: "domain2".into(),
                cells: vec![cell],
            }],
        };
        let text = table.render();
        assert!(text.contains("1→2"));
        assert!(text.contains("0.8500±0.0707"));
        assert!(text.contains("Average"));
        assert_eq!(text.lines().count(), 5);
    }
}
