//! Joint semi-supervised training, early stopping and evaluation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::baseline::LstmForecaster;
use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::dataio::{
    make_windows, split_semi_supervised, train_rows, window_count, zscore_fit_apply, Batch,
    DomainRole, NormStats, Partitions, SeriesWindow, SplitSpec,
};
use crate::encoder::{sample_structure_noise, CausalStructure, SampleMode};
use crate::error::{GcaError, Result};
use crate::eval::{self, EpochRecord};
use crate::model::{Domain, GcaModel};
use crate::nn::{clip_grad_norm, Adam, ParamStore};
use crate::objective::{
    total_loss, LossBreakdown, LossWeights, ObjectiveConfig, StepInputs, Variant,
};
use crate::synthgen::{GroundTruthStructure, RawSeries};
use crate::tensor::Tensor;

/// Largest number of windows pushed through one inference graph.
const EVAL_CHUNK: usize = 512;

/// Either the structure-aware model or the recurrent baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Forecaster {
    Gca(GcaModel),
    Lstm(LstmForecaster),
}

impl Forecaster {
    pub fn store(&self) -> &ParamStore {
        match self {
            Forecaster::Gca(m) => &m.store,
            Forecaster::Lstm(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Forecaster::Gca(m) => &mut m.store,
            Forecaster::Lstm(m) => &mut m.store,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Forecaster::Gca(m) => ModelSpec::Gca(m.config.clone()),
            Forecaster::Lstm(m) => ModelSpec::Lstm(m.config.clone()),
        }
    }

    pub fn as_gca(&self) -> Option<&GcaModel> {
        match self {
            Forecaster::Gca(m) => Some(m),
            Forecaster::Lstm(_) => None,
        }
    }

    /// Noise-free forecast, one `B × D` tensor per step.
    pub fn forecast(&self, batch: &Batch, domain: Domain, horizon: usize) -> Result<Vec<Tensor>> {
        match self {
            Forecaster::Gca(m) => m.forecast(batch, domain, horizon),
            Forecaster::Lstm(m) => m.forecast(batch, horizon),
        }
    }
}

/// One domain after normalization, windowing and splitting.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub id: String,
    pub partitions: Partitions,
    pub norm: NormStats,
    pub ground_truth: Option<GroundTruthStructure>,
}

#[derive(Clone, Debug)]
pub struct TransferData {
    pub source: DomainData,
    pub target: DomainData,
}

/// Z-scores with training-row statistics, windows, then splits in time.
pub fn prepare_domain(
    series: &RawSeries,
    t_in: usize,
    horizon: usize,
    stride: usize,
    split: &SplitSpec,
    role: DomainRole,
    seed: u64,
) -> Result<DomainData> {
    split.validate()?;
    let n = window_count(series.len(), t_in, horizon, stride);
    if n == 0 {
        return Err(GcaError::TooShort {
            len: series.len(),
            needed: t_in + horizon,
        });
    }
    let (n_train, _, _) = split.counts(n);
    let fit_rows = train_rows(n_train, t_in, horizon, stride).min(series.len());
    let (normalized, norm) = zscore_fit_apply(series, fit_rows)?;
    let windows = make_windows(&normalized, t_in, horizon, stride)?;
    let partitions = split_semi_supervised(windows, split, role, seed)?;
    Ok(DomainData {
        id: series.domain_id.clone(),
        partitions,
        norm,
        ground_truth: series.ground_truth.clone(),
    })
}

/// Predict the last observed row from the rows before it. The oldest row is
/// repeated to keep the window length.
pub fn self_supervised_window(w: &SeriesWindow) -> SeriesWindow {
    let t_in = w.x.rows();
    let d = w.x.cols();
    let mut rows = Vec::with_capacity(t_in);
    rows.push(w.x.row(0).to_vec());
    for r in 0..t_in - 1 {
        rows.push(w.x.row(r).to_vec());
    }
    let mut y = Tensor::zeros(w.y.rows(), d);
    y.row_mut(0).copy_from_slice(w.x.row(t_in - 1));
    SeriesWindow {
        x: Tensor::from_rows(&rows),
        y,
        domain_id: w.domain_id.clone(),
        labeled: false,
        start: w.start,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Defaults to one pass over the source training windows.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::patience")]
    pub early_stop_patience: usize,
    #[serde(default = "defaults::temperature_start")]
    pub temperature_start: f64,
    #[serde(default = "defaults::temperature_end")]
    pub temperature_end: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub variant: Variant,
    /// Windows per domain used to estimate structures for AUPRC.
    #[serde(default = "defaults::structure_windows")]
    pub structure_eval_windows: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn optimizer() -> String {
        "adam".into()
    }
    pub fn patience() -> usize {
        10
    }
    pub fn temperature_start() -> f64 {
        1.0
    }
    pub fn temperature_end() -> f64 {
        0.3
    }
    pub fn grad_clip() -> f64 {
        5.0
    }
    pub fn structure_windows() -> usize {
        256
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            steps_per_epoch: None,
            learning_rate: defaults::learning_rate(),
            optimizer: defaults::optimizer(),
            seed: 0,
            early_stop_patience: defaults::patience(),
            temperature_start: defaults::temperature_start(),
            temperature_end: defaults::temperature_end(),
            grad_clip: defaults::grad_clip(),
            variant: Variant::Gca,
            structure_eval_windows: defaults::structure_windows(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("trainer.{f}");
        if self.batch_size == 0 {
            return Err(GcaError::config(field("batch_size"), "must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(GcaError::config(field("steps_per_epoch"), "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GcaError::config(field("learning_rate"), "must be > 0"));
        }
        if self.optimizer != "adam" {
            return Err(GcaError::config(
                field("optimizer"),
                format!("unsupported optimizer `{}`", self.optimizer),
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(GcaError::config(
                field("early_stop_patience"),
                "must be >= 1",
            ));
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return Err(GcaError::config(
                field("temperature_start"),
                "temperatures must be > 0",
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(GcaError::config(field("grad_clip"), "must be > 0"));
        }
        if self.structure_eval_windows == 0 {
            return Err(GcaError::config(
                field("structure_eval_windows"),
                "must be >= 1",
            ));
        }
        Ok(())
    }

    /// Linear annealing across all optimization steps.
    pub fn temperature(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.temperature_start;
        }
        let f = step as f64 / (total_steps - 1) as f64;
        self.temperature_start + (self.temperature_end - self.temperature_start) * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub temperature: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) of the kept checkpoint; 0 means the initialization.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub model: Forecaster,
    pub log: TrainingLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub rmse: f64,
    pub mae: f64,
    /// One `τ × D` forecast per window.
    pub forecasts: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

/// Rolls out `horizon` steps from every window (normalized space).
pub fn evaluate(
    model: &Forecaster,
    windows: &[SeriesWindow],
    domain: Domain,
    horizon: usize,
) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(GcaError::EmptyPartition("evaluation windows"));
    }
    if let Some(w) = windows.iter().find(|w| w.y.rows() < horizon) {
        return Err(GcaError::shape(
            "evaluation horizon",
            format!("<= {}", w.y.rows()),
            horizon,
        ));
    }
    let mut forecasts = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = Batch::from_windows(chunk);
        let steps = model.forecast(&batch, domain, horizon)?;
        for (b, w) in chunk.iter().enumerate() {
            let rows: Vec<Vec<f64>> = steps.iter().map(|s| s.row(b).to_vec()).collect();
            forecasts.push(Tensor::from_rows(&rows));
            targets.push(w.y.slice_rows(0, horizon));
        }
    }
    let rmse = eval::rmse(&forecasts, &targets)?;
    let mae = eval::mae(&forecasts, &targets)?;
    if !rmse.is_finite() {
        return Err(GcaError::NonFinite("evaluation forecast".into()));
    }
    Ok(EvalResult {
        rmse,
        mae,
        forecasts,
        targets,
    })
}

/// Evenly spaced subset of at most `n` windows.
fn spread(windows: &[SeriesWindow], n: usize) -> Vec<&SeriesWindow> {
    if windows.len() <= n {
        return windows.iter().collect();
    }
    (0..n).map(|i| &windows[i * windows.len() / n]).collect()
}

/// Edge probabilities averaged over (a spread subset of) `windows`.
pub fn estimate_structure(
    model: &GcaModel,
    windows: &[SeriesWindow],
    domain: Domain,
    max_windows: usize,
) -> Result<CausalStructure> {
    let picked = spread(windows, max_windows);
    if picked.is_empty() {
        return Err(GcaError::EmptyPartition("structure windows"));
    }
    let d = model.config.dims;
    let mut sums = vec![Tensor::zeros(d, d); model.config.max_lag];
    for chunk in picked.chunks(EVAL_CHUNK) {
        let batch = Batch::from_windows(chunk.iter().copied());
        let probs = model.infer_structure(&batch, domain)?;
        for (sum, p) in sums.iter_mut().zip(&probs) {
            for r in 0..p.rows() {
                for (s, x) in sum.data_mut().iter_mut().zip(p.row(r)) {
                    *s += x;
                }
            }
        }
    }
    let n = picked.len() as f64;
    Ok(CausalStructure {
        slices: sums.into_iter().map(|s| s.scale(1.0 / n)).collect(),
        mode: SampleMode::Soft,
        temperature: 1.0,
    })
}

fn horizon_of(windows: &[SeriesWindow]) -> usize {
    windows.iter().map(|w| w.y.rows()).min().unwrap_or(1)
}

fn epoch_record(
    model: &Forecaster,
    data: &TransferData,
    cfg: &TrainConfig,
    epoch: usize,
    temperature: f64,
    train_loss: f64,
) -> Result<EpochRecord> {
    let target = &data.target.partitions;
    let horizon = horizon_of(&target.val).min(horizon_of(&target.test));
    let val = evaluate(model, &target.val, Domain::Target, horizon)?;
    let test = evaluate(model, &target.test, Domain::Target, horizon)?;
    let mut rec = EpochRecord {
        epoch,
        temperature,
        train_loss,
        val_rmse: val.rmse,
        test_rmse: Some(test.rmse),
        test_mae: Some(test.mae),
        ..Default::default()
    };
    if let Some(m) = model.as_gca() {
        let src = estimate_structure(
            m,
            &data.source.partitions.train,
            Domain::Source,
            cfg.structure_eval_windows,
        )?;
        let tgt = estimate_structure(m, &target.train, Domain::Target, cfg.structure_eval_windows)?;
        rec.structure_l1 = Some(eval::structure_l1(&src, &tgt)?);
        if let Some(truth) = &data.source.ground_truth {
            rec.auprc_source = Some(eval::auprc(&src, truth, true)?);
        }
        if let Some(truth) = &data.target.ground_truth {
            rec.auprc_target = Some(eval::auprc(&tgt, truth, true)?);
        }
    }
    Ok(rec)
}

fn check_finite_grads(grads: &[Tensor], norm: f64) -> Result<()> {
    if !norm.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(GcaError::NonFinite("gradient".into()));
    }
    Ok(())
}

/// Trains `model` and returns the checkpoint with the lowest target
/// validation RMSE.
pub fn train(
    model: Forecaster,
    data: &TransferData,
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let src_train = &data.source.partitions.train;
    let labeled_target = data.target.partitions.labeled_train();
    if src_train.is_empty() {
        return Err(GcaError::EmptyPartition("source train"));
    }
    if labeled_target.is_empty() {
        return Err(GcaError::EmptyPartition("labeled target train"));
    }
    match (&model, cfg.variant.is_baseline()) {
        (Forecaster::Gca(m), false) => objective.validate(m.config.dims)?,
        (Forecaster::Lstm(_), true) => {}
        _ => {
            return Err(GcaError::InvalidArgument(format!(
                "variant `{}` does not match the model kind",
                cfg.variant
            )))
        }
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store(), cfg.learning_rate);
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| src_train.len().div_ceil(cfg.batch_size));
    let total_steps = cfg.epochs * steps_per_epoch;
    let spec = model.spec();
    let config_hash = crate::checkpoint::content_hash(&(&spec, cfg, objective))?;
    let snapshot = |model: &Forecaster, adam: &Adam, epoch: usize| Checkpoint {
        spec: spec.clone(),
        store: model.store().clone(),
        optimizer: adam.clone(),
        epoch,
        norm_source: Some(data.source.norm.clone()),
        norm_target: Some(data.target.norm.clone()),
        config_hash: config_hash.clone(),
    };

    let mut target_pool = labeled_target.clone();
    if objective.use_unlabeled_target && !cfg.variant.is_baseline() {
        target_pool.extend(
            data.target
                .partitions
                .train
                .iter()
                .filter(|w| !w.labeled)
                .map(self_supervised_window),
        );
    }
    let pooled: Vec<SeriesWindow> = src_train.iter().chain(&labeled_target).cloned().collect();

    let mut log = TrainingLog::default();
    let mut best = snapshot(&model, &adam, 0);
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut step = 0;
    let mut src_order: Vec<usize> = Vec::new();
    let mut src_cursor = 0;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut temperature = cfg.temperature_start;
        for _ in 0..steps_per_epoch {
            temperature = cfg.temperature(step, total_steps);
            let (loss, grads) = match &model {
                Forecaster::Gca(m) => {
                    let pick_src = next_indices(
                        &mut rng,
                        src_train.len(),
                        cfg.batch_size,
                        &mut src_order,
                        &mut src_cursor,
                    );
                    let source = Batch::from_windows(pick_src.iter().map(|&i| &src_train[i]));
                    let target = sample_batch(&mut rng, &target_pool, cfg.batch_size);
                    let (k, d) = (m.config.max_lag, m.config.dims);
                    let noise_source = (0..objective.samples)
                        .map(|_| sample_structure_noise(&mut rng, k, source.len(), d))
                        .collect();
                    let noise_target = (0..objective.samples)
                        .map(|_| sample_structure_noise(&mut rng, k, target.len(), d))
                        .collect();
                    let mut g = Graph::new();
                    let p = m.store.bind(&mut g);
                    let inputs = StepInputs {
                        source: &source,
                        target: &target,
                        noise_source: &noise_source,
                        noise_target: &noise_target,
                        temperature,
                        mode: m.config.sample_mode,
                    };
                    let terms = total_loss(&mut g, &p, m, &inputs, objective, cfg.variant)?;
                    let breakdown = terms.breakdown(&g);
                    let grads = g.backward(terms.total);
                    (breakdown, p.collect_grads(&m.store, &grads))
                }
                Forecaster::Lstm(m) => {
                    let batch = sample_batch(&mut rng, &pooled, cfg.batch_size);
                    let mut g = Graph::new();
                    let p = m.store.bind(&mut g);
                    let pred = m.rollout_graph(&mut g, &p, &batch, 1)?[0];
                    let target = g.constant(batch.future(0));
                    let mse = crate::objective::reconstruction_node(&mut g, pred, target, None);
                    let value = g.scalar(mse);
                    let grads = g.backward(mse);
                    let zero = LossWeights {
                        gamma: 0.0,
                        lambda: 0.0,
                        delta: 0.0,
                    };
                    let breakdown =
                        LossBreakdown::compose(value, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, zero);
                    (breakdown, p.collect_grads(&m.store, &grads))
                }
            };
            if !loss.is_finite() {
                return Err(GcaError::NonFinite(format!("training loss at step {step}")));
            }
            let mut grads = grads;
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            check_finite_grads(&grads, grad_norm)?;
            adam.update(model.store_mut(), &grads);
            loss_sum += loss.total;
            log.steps.push(StepRecord {
                epoch,
                step,
                temperature,
                grad_norm,
                loss,
            });
            step += 1;
        }

        let rec = epoch_record(
            &model,
            data,
            cfg,
            epoch,
            temperature,
            loss_sum / steps_per_epoch as f64,
        )?;
        let val = rec.val_rmse;
        log.epochs.push(rec);
        if val < best_val {
            best_val = val;
            since_best = 0;
            best = snapshot(&model, &adam, epoch);
            log.best_epoch = epoch;
            if let Some(dir) = &cfg.checkpoint_dir {
                best.save(&dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let model = best.restore()?;
    Ok(TrainOutcome { best, model, log })
}

/// Next `n` source indices from a reshuffled-per-pass permutation.
fn next_indices(
    rng: &mut ChaCha8Rng,
    len: usize,
    n: usize,
    order: &mut Vec<usize>,
    cursor: &mut usize,
) -> Vec<usize> {
    let n = n.min(len);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if *cursor >= order.len() {
            *order = (0..len).collect();
            order.shuffle(rng);
            *cursor = 0;
        }
        out.push(order[*cursor]);
        *cursor += 1;
    }
    out
}

/// `min(n, len)` distinct windows drawn uniformly.
fn sample_batch(rng: &mut ChaCha8Rng, pool: &[SeriesWindow], n: usize) -> Batch {
    let n = n.min(pool.len());
    let idx = rand::seq::index::sample(rng, pool.len(), n);
    Batch::from_windows(idx.iter().map(|i| &pool[i]))
}
