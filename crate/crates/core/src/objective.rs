//! Every term of the training loss.
//!
//! Plain-value functions operate on [`Tensor`]s / [`CausalStructure`]s and
//! serve as reference implementations; the `*_node` functions build the same
//! quantities on a [`Graph`] for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bernoulli_kl, Graph, Var};
use crate::dataio::Batch;
use crate::encoder::{CausalStructure, GumbelNoise, SampleMode};
use crate::error::{GcaError, Result};
use crate::model::{Domain, DomainPass, GcaModel};
use crate::nn::Bound;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Discrepancy weight.
    pub gamma: f64,
    /// Sparsity weight.
    pub lambda: f64,
    /// Strengthen-loss weight.
    pub delta: f64,
}

fn default_gamma() -> f64 {
    0.15
}
fn default_lambda() -> f64 {
    0.4
}
fn default_delta() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: default_gamma(),
            lambda: default_lambda(),
            delta: default_delta(),
        }
    }
}

/// Factorized Bernoulli prior over edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePrior {
    pub edge_prior_p: f64,
}

impl Default for StructurePrior {
    fn default() -> Self {
        StructurePrior { edge_prior_p: 0.1 }
    }
}

impl StructurePrior {
    pub fn new(edge_prior_p: f64) -> Result<Self> {
        let prior = StructurePrior { edge_prior_p };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_prior_p > 0.0 && self.edge_prior_p < 1.0) {
            return Err(GcaError::config(
                "objective.edge_prior_p",
                "must lie in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// Model variants and the baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "gca")]
    Gca,
    /// No discrepancy term.
    #[serde(rename = "gca-r")]
    GcaR,
    /// No strengthen term.
    #[serde(rename = "gca-e")]
    GcaE,
    /// Reconstruction restricted to the target dimension.
    #[serde(rename = "gca-s")]
    GcaS,
    /// Structure encoder without the domain latent.
    #[serde(rename = "gca-alpha")]
    GcaAlpha,
    /// Pooled recurrent forecaster.
    #[serde(rename = "lstm-st")]
    LstmSt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gca,
        Variant::GcaR,
        Variant::GcaE,
        Variant::GcaS,
        Variant::GcaAlpha,
        Variant::LstmSt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gca => "gca",
            Variant::GcaR => "gca-r",
            Variant::GcaE => "gca-e",
            Variant::GcaS => "gca-s",
            Variant::GcaAlpha => "gca-alpha",
            Variant::LstmSt => "lstm-st",
        }
    }

    pub fn is_baseline(self) -> bool {
        self == Variant::LstmSt
    }

    pub fn is_ablation(self) -> bool {
        !matches!(self, Variant::Gca | Variant::LstmSt)
    }

    /// Weights actually applied under this variant.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Variant::GcaR => LossWeights { gamma: 0.0, ..w },
            Variant::GcaE => LossWeights { delta: 0.0, ..w },
            _ => w,
        }
    }

    pub fn uses_alpha(self) -> bool {
        self != Variant::GcaAlpha
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GcaError::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_prior")]
    pub edge_prior_p: f64,
    /// Multiplier folded into the reported KL components.
    #[serde(default = "unit")]
    pub kl_scale: f64,
    /// Dimension singled out by the strengthen loss (and by `gca-s`).
    #[serde(default)]
    pub target_dim: usize,
    /// Structure samples per window for the expectation in the ELBO.
    #[serde(default = "one")]
    pub samples: usize,
    /// Let unlabeled target windows enter the target reconstruction term as
    /// one-step-back self-supervised examples.
    #[serde(default)]
    pub use_unlabeled_target: bool,
}

fn default_prior() -> f64 {
    0.1
}

fn unit() -> f64 {
    1.0
}

fn one() -> usize {
    1
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            gamma: default_gamma(),
            lambda: default_lambda(),
            delta: default_delta(),
            edge_prior_p: default_prior(),
            kl_scale: 1.0,
            target_dim: 0,
            samples: 1,
            use_unlabeled_target: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
            delta: self.delta,
        }
    }

    pub fn prior(&self) -> StructurePrior {
        StructurePrior {
            edge_prior_p: self.edge_prior_p,
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        self.prior().validate()?;
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("kl_scale", self.kl_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GcaError::config(
                    format!("objective.{name}"),
                    "must be finite and >= 0",
                ));
            }
        }
        if self.target_dim >= dims {
            return Err(GcaError::config(
                "objective.target_dim",
                format!("{} out of range for {dims} dimensions", self.target_dim),
            ));
        }
        if self.samples == 0 {
            return Err(GcaError::config("objective.samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// Named scalar loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_src: f64,
    pub recon_tgt: f64,
    pub kl_src: f64,
    pub kl_tgt: f64,
    pub disc: f64,
    pub sparsity_src: f64,
    pub sparsity_tgt: f64,
    pub strengthen: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        recon_src: f64,
        recon_tgt: f64,
        kl_src: f64,
        kl_tgt: f64,
        disc: f64,
        sparsity_src: f64,
        sparsity_tgt: f64,
        strengthen: f64,
        weights: LossWeights,
    ) -> Self {
        let mut b = LossBreakdown {
            recon_src,
            recon_tgt,
            kl_src,
            kl_tgt,
            disc,
            sparsity_src,
            sparsity_tgt,
            strengthen,
            total: 0.0,
            weights,
        };
        b.total = b.recomposed_total();
        b
    }

    pub fn recomposed_total(&self) -> f64 {
        let w = self.weights;
        self.recon_src
            + self.recon_tgt
            + self.kl_src
            + self.kl_tgt
            + w.gamma * self.disc
            + w.lambda * (self.sparsity_src + self.sparsity_tgt)
            + w.delta * self.strengthen
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_src,
            self.recon_tgt,
            self.kl_src,
            self.kl_tgt,
            self.disc,
            self.sparsity_src,
            self.sparsity_tgt,
            self.strengthen,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

fn check_same(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GcaError::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn check_structures(a: &CausalStructure, b: &CausalStructure) -> Result<()> {
    if a.slices.len() != b.slices.len() {
        return Err(GcaError::shape(
            "structure lags",
            a.slices.len(),
            b.slices.len(),
        ));
    }
    for (x, y) in a.slices.iter().zip(&b.slices) {
        check_same("structure slice", x, y)?;
    }
    Ok(())
}

/// Mean squared error over every entry.
pub fn reconstruction_nll(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("reconstruction", prediction, target)?;
    let n = prediction.len().max(1) as f64;
    Ok(prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Sum of per-edge Bernoulli KL divergences.
pub fn kl_structure(probs: &CausalStructure, prior: StructurePrior) -> f64 {
    probs
        .slices
        .iter()
        .flat_map(|s| s.data().iter())
        .map(|&q| bernoulli_kl(q, prior.edge_prior_p))
        .sum()
}

/// Mean absolute difference over all `k·D·D` entries.
pub fn discrepancy(src: &CausalStructure, tgt: &CausalStructure) -> Result<f64> {
    check_structures(src, tgt)?;
    let (a, b) = (src.flat(), tgt.flat());
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `½·Σ|A| + ½·sqrt(Σ A²)`.
pub fn sparsity(a: &CausalStructure) -> f64 {
    let flat = a.flat();
    let l1: f64 = flat.iter().map(|x| x.abs()).sum();
    let l2 = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
    0.5 * l1 + 0.5 * l2
}

/// MSE restricted to column `dim`.
pub fn strengthen(prediction: &Tensor, target: &Tensor, dim: usize) -> Result<f64> {
    check_same("strengthen", prediction, target)?;
    if dim >= prediction.cols() {
        return Err(GcaError::InvalidArgument(format!(
            "target dimension {dim} out of range for {} columns",
            prediction.cols()
        )));
    }
    let rows = prediction.rows();
    Ok((0..rows)
        .map(|r| (prediction.get(r, dim) - target.get(r, dim)).powi(2))
        .sum::<f64>()
        / rows.max(1) as f64)
}

/// Graph MSE; `dim` restricts it to one column.
pub fn reconstruction_node(g: &mut Graph, prediction: Var, target: Var, dim: Option<usize>) -> Var {
    let diff = g.sub(prediction, target);
    let diff = match dim {
        Some(d) => g.slice_cols(diff, d, d + 1),
        None => diff,
    };
    let sq = g.square(diff);
    g.mean(sq)
}

/// Edge-summed KL per window, averaged over the batch. `probs` are `B × D²`.
pub fn kl_node(g: &mut Graph, probs: &[Var], prior: StructurePrior) -> Var {
    let rows = g.shape(probs[0]).0 as f64;
    let all = g.concat_cols(probs);
    let kl = g.bernoulli_kl(all, prior.edge_prior_p);
    let total = g.sum(kl);
    g.scale(total, 1.0 / rows)
}

/// Batch-average structure, `1 × k·D²`.
pub fn mean_structure_node(g: &mut Graph, slices: &[Var]) -> Var {
    let all = g.concat_cols(slices);
    let rows = g.shape(all).0;
    let avg = g.constant(Tensor::filled(1, rows, 1.0 / rows as f64));
    g.matmul(avg, all)
}

/// Mean absolute difference between the batch-average source and target
/// structures. The source side is detached, so no gradient reaches anything
/// that produced it.
pub fn discrepancy_node(g: &mut Graph, src: &[Var], tgt: &[Var]) -> Var {
    let s = mean_structure_node(g, src);
    let s = g.detach(s);
    let t = mean_structure_node(g, tgt);
    let diff = g.sub(s, t);
    let abs = g.abs(diff);
    g.mean(abs)
}

/// Per-window elastic-net penalty averaged over the batch.
pub fn sparsity_node(g: &mut Graph, slices: &[Var]) -> Var {
    let all = g.concat_cols(slices);
    let rows = g.shape(all).0 as f64;
    let abs = g.abs(all);
    let l1 = g.row_sum(abs);
    let sq = g.square(all);
    let sq = g.row_sum(sq);
    let l2 = g.sqrt(sq);
    let both = g.add(l1, l2);
    let total = g.sum(both);
    g.scale(total, 0.5 / rows)
}

/// Graph handles of every loss component plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon_src: Var,
    pub recon_tgt: Var,
    pub kl_src: Var,
    pub kl_tgt: Var,
    pub disc: Var,
    pub sparsity_src: Var,
    pub sparsity_tgt: Var,
    pub strengthen: Var,
    pub total: Var,
    pub weights: LossWeights,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon_src: g.scalar(self.recon_src),
            recon_tgt: g.scalar(self.recon_tgt),
            kl_src: g.scalar(self.kl_src),
            kl_tgt: g.scalar(self.kl_tgt),
            disc: g.scalar(self.disc),
            sparsity_src: g.scalar(self.sparsity_src),
            sparsity_tgt: g.scalar(self.sparsity_tgt),
            strengthen: g.scalar(self.strengthen),
            total: g.scalar(self.total),
            weights: self.weights,
        }
    }
}

/// Structure noise for one domain: `samples` draws, each one
/// [`GumbelNoise`] per lag.
pub type DomainNoise = Vec<Vec<GumbelNoise>>;

/// Inputs of one training step.
pub struct StepInputs<'a> {
    pub source: &'a Batch,
    pub target: &'a Batch,
    pub noise_source: &'a DomainNoise,
    pub noise_target: &'a DomainNoise,
    pub temperature: f64,
    pub mode: SampleMode,
}

struct DomainTerms {
    recon: Var,
    kl: Var,
    sparsity: Var,
    strengthen: Var,
    probabilities: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn domain_terms(
    g: &mut Graph,
    p: &Bound,
    model: &GcaModel,
    batch: &Batch,
    domain: Domain,
    noise: &DomainNoise,
    temperature: f64,
    mode: SampleMode,
    cfg: &ObjectiveConfig,
    variant: Variant,
) -> Result<DomainTerms> {
    if noise.is_empty() {
        return Err(GcaError::InvalidArgument(
            "at least one structure sample is required".into(),
        ));
    }
    let target = g.constant(batch.future(0));
    let recon_dim = (variant == Variant::GcaS).then_some(cfg.target_dim);
    let mut recons = Vec::with_capacity(noise.len());
    let mut strengthens = Vec::with_capacity(noise.len());
    let mut first: Option<DomainPass> = None;
    for sample_noise in noise {
        let pass = model.forward_domain(g, p, batch, domain, temperature, sample_noise, mode)?;
        recons.push(reconstruction_node(g, pass.prediction, target, recon_dim));
        strengthens.push(reconstruction_node(
            g,
            pass.prediction,
            target,
            Some(cfg.target_dim),
        ));
        first.get_or_insert(pass);
    }
    let average = |g: &mut Graph, xs: &[Var]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = g.add(acc, x);
        }
        g.scale(acc, 1.0 / xs.len() as f64)
    };
    let recon = average(g, &recons);
    let strengthen = average(g, &strengthens);
    let pass = first.expect("non-empty noise");
    let kl = kl_node(g, &pass.probabilities, cfg.prior());
    let kl = g.scale(kl, cfg.kl_scale);
    let sparsity = sparsity_node(g, &pass.probabilities);
    Ok(DomainTerms {
        recon,
        kl,
        sparsity,
        strengthen,
        probabilities: pass.probabilities,
    })
}

/// Builds the full training loss on `g`.
///
/// KL, sparsity and discrepancy are taken on the noise-free edge
/// probabilities; reconstruction uses sampled structures. The strengthen
/// term sums the target-dimension error of both domains.
pub fn total_loss(
    g: &mut Graph,
    p: &Bound,
    model: &GcaModel,
    inputs: &StepInputs<'_>,
    cfg: &ObjectiveConfig,
    variant: Variant,
) -> Result<LossTerms> {
    cfg.validate(model.config.dims)?;
    if inputs.source.is_empty() || inputs.target.is_empty() {
        return Err(GcaError::EmptyPartition("loss batch"));
    }
    let src = domain_terms(
        g,
        p,
        model,
        inputs.source,
        Domain::Source,
        inputs.noise_source,
        inputs.temperature,
        inputs.mode,
        cfg,
        variant,
    )?;
    let tgt = domain_terms(
        g,
        p,
        model,
        inputs.target,
        Domain::Target,
        inputs.noise_target,
        inputs.temperature,
        inputs.mode,
        cfg,
        variant,
    )?;
    let disc = discrepancy_node(g, &src.probabilities, &tgt.probabilities);
    let strengthen = g.add(src.strengthen, tgt.strengthen);

    let weights = variant.effective_weights(cfg.weights());
    let mut total = g.add(src.recon, tgt.recon);
    total = g.add(total, src.kl);
    total = g.add(total, tgt.kl);
    let wd = g.scale(disc, weights.gamma);
    total = g.add(total, wd);
    let sp = g.add(src.sparsity, tgt.sparsity);
    let ws = g.scale(sp, weights.lambda);
    total = g.add(total, ws);
    let we = g.scale(strengthen, weights.delta);
    total = g.add(total, we);

    Ok(LossTerms {
        recon_src: src.recon,
        recon_tgt: tgt.recon,
        kl_src: src.kl,
        kl_tgt: tgt.kl,
        disc,
        sparsity_src: src.sparsity,
        sparsity_tgt: tgt.sparsity,
        strengthen,
        total,
        weights,
    })
}
