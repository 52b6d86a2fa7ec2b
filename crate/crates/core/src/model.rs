//! The full model: shared encoder and predictor plus per-domain latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::Batch;
use crate::encoder::{
    reconstruct_structure, zero_structure_noise, CausalStructure, GumbelNoise, Reconstruction,
    SampleMode, StructureEncoder,
};
use crate::error::{GcaError, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::predictor::Predictor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: usize,
    pub max_lag: usize,
    /// History rows per window; `2 · max_lag` when absent.
    #[serde(default)]
    pub t_in: Option<usize>,
    #[serde(default = "default_latent")]
    pub d_alpha: usize,
    #[serde(default = "default_latent")]
    pub d_beta: usize,
    #[serde(default = "default_embed")]
    pub d_embed: usize,
    /// Hidden width of every network; `max(32, 4·D)` when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Feed the whole window to the encoder instead of the last `k` rows.
    #[serde(default)]
    pub full_window: bool,
    #[serde(default = "yes")]
    pub use_alpha: bool,
    #[serde(default)]
    pub sample_mode: SampleMode,
}

fn default_latent() -> usize {
    8
}
fn default_embed() -> usize {
    32
}
fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(dims: usize, max_lag: usize) -> Self {
        ModelConfig {
            dims,
            max_lag,
            t_in: None,
            d_alpha: default_latent(),
            d_beta: default_latent(),
            d_embed: default_embed(),
            hidden: None,
            full_window: false,
            use_alpha: true,
            sample_mode: SampleMode::Soft,
        }
    }

    pub fn t_in(&self) -> usize {
        self.t_in.unwrap_or(2 * self.max_lag)
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or_else(|| (4 * self.dims).max(32))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(GcaError::config("model.dims", "must be >= 2"));
        }
        if self.max_lag < 1 {
            return Err(GcaError::config("model.max_lag", "must be >= 1"));
        }
        if self.t_in() < self.max_lag {
            return Err(GcaError::config("model.t_in", "must be >= max_lag"));
        }
        if self.d_alpha == 0 || self.d_beta == 0 || self.d_embed == 0 || self.hidden() == 0 {
            return Err(GcaError::config(
                "model",
                "latent, embedding and hidden widths must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-domain latent vectors (copies of the trainable values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainLatents {
    pub domain: Domain,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: StructureEncoder,
    pub predictor: Predictor,
    alpha: [ParamId; 2],
    beta: [ParamId; 2],
}

/// Graph handles produced by one domain's forward pass.
#[derive(Clone, Debug)]
pub struct DomainPass {
    pub reconstruction: Reconstruction,
    /// Noise-free edge probabilities per lag, `B × D²`.
    pub probabilities: Vec<Var>,
    /// One-step forecast, `B × D`.
    pub prediction: Var,
}

impl GcaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = config.hidden();
        let history_steps = if config.full_window {
            config.t_in()
        } else {
            config.max_lag
        };
        let encoder = StructureEncoder::new(
            &mut store,
            &mut rng,
            config.dims,
            config.max_lag,
            history_steps,
            config.d_alpha,
            hidden,
            config.use_alpha,
        );
        let predictor = Predictor::new(
            &mut store,
            &mut rng,
            config.dims,
            config.max_lag,
            config.d_embed,
            config.d_beta,
            hidden,
        );
        let mut latent = |name: &str, width: usize| {
            let values = (0..width)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.1 * z
                })
                .collect();
            store.add(name, Tensor::row_vector(values))
        };
        let alpha = [
            latent("alpha.source", config.d_alpha),
            latent("alpha.target", config.d_alpha),
        ];
        let beta = [
            latent("beta.source", config.d_beta),
            latent("beta.target", config.d_beta),
        ];
        Ok(GcaModel {
            config,
            store,
            encoder,
            predictor,
            alpha,
            beta,
        })
    }

    pub fn alpha_id(&self, domain: Domain) -> ParamId {
        self.alpha[domain.index()]
    }

    pub fn beta_id(&self, domain: Domain) -> ParamId {
        self.beta[domain.index()]
    }

    pub fn latents(&self, domain: Domain) -> DomainLatents {
        DomainLatents {
            domain,
            alpha: self.store.get(self.alpha_id(domain)).data().to_vec(),
            beta: self.store.get(self.beta_id(domain)).data().to_vec(),
        }
    }

    /// Ids of the structure-encoder networks (shared `f_j`).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .lag_nets
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
            .collect()
    }

    /// Ids of `g_j` and `G`.
    pub fn predictor_param_ids(&self) -> Vec<ParamId> {
        self.predictor
            .lag_nets
            .iter()
            .chain(std::iter::once(&self.predictor.aggregator))
            .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dims != self.config.dims {
            return Err(GcaError::shape("batch dims", self.config.dims, batch.dims));
        }
        if batch.t_in < self.encoder.history_steps.max(self.config.max_lag) {
            return Err(GcaError::shape(
                "batch t_in",
                self.config.t_in(),
                batch.t_in,
            ));
        }
        Ok(())
    }

    /// Encodes the structure of every window and forecasts one step.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_domain(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        domain: Domain,
        temperature: f64,
        noise: &[GumbelNoise],
        mode: SampleMode,
    ) -> Result<DomainPass> {
        self.check_batch(batch)?;
        let x = g.constant(batch.x.clone());
        let history = self.encoder.select_history(g, x, batch.t_in)?;
        let alpha = self.config.use_alpha.then(|| p.var(self.alpha_id(domain)));
        let reconstruction = reconstruct_structure(
            &self.encoder,
            g,
            p,
            history,
            alpha,
            temperature,
            noise,
            mode,
        )?;
        let probabilities = reconstruction.probabilities(g);
        let lags: Vec<Var> = (1..=self.config.max_lag)
            .map(|j| g.constant(batch.lagged(j)))
            .collect();
        let beta = p.var(self.beta_id(domain));
        let prediction =
            self.predictor
                .predict_one_step(g, p, &lags, &reconstruction.slices, beta)?;
        Ok(DomainPass {
            reconstruction,
            probabilities,
            prediction,
        })
    }

    /// Noise-free structure for every window: the recursion runs on edge
    /// probabilities. Returns `k` tensors of shape `B × D²`.
    fn structure_values(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        domain: Domain,
    ) -> Result<Vec<Var>> {
        self.check_batch(batch)?;
        let x = g.constant(batch.x.clone());
        let history = self.encoder.select_history(g, x, batch.t_in)?;
        let alpha = self.config.use_alpha.then(|| p.var(self.alpha_id(domain)));
        let noise = zero_structure_noise(self.config.max_lag, batch.len(), self.config.dims);
        let rec = reconstruct_structure(
            &self.encoder,
            g,
            p,
            history,
            alpha,
            1.0,
            &noise,
            SampleMode::Soft,
        )?;
        Ok(rec.slices)
    }

    /// Per-window edge probabilities, `k` tensors of `B × D²`.
    pub fn infer_structure(&self, batch: &Batch, domain: Domain) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let slices = self.structure_values(&mut g, &p, batch, domain)?;
        Ok(slices.iter().map(|&s| g.value(s).clone()).collect())
    }

    /// Edge probabilities averaged over the windows of `batch`.
    pub fn mean_edge_probabilities(
        &self,
        batch: &Batch,
        domain: Domain,
    ) -> Result<CausalStructure> {
        let d = self.config.dims;
        let per_window = self.infer_structure(batch, domain)?;
        let slices = per_window
            .iter()
            .map(|t| {
                let n = t.rows() as f64;
                Tensor::from_fn(d, d, |u, v| {
                    (0..t.rows()).map(|r| t.get(r, u * d + v)).sum::<f64>() / n
                })
            })
            .collect();
        Ok(CausalStructure {
            slices,
            mode: SampleMode::Soft,
            temperature: 1.0,
        })
    }

    /// Noise-free autoregressive forecast for `horizon` steps. Returns one
    /// `B × D` tensor per step.
    pub fn forecast(&self, batch: &Batch, domain: Domain, horizon: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let slices = self.structure_values(&mut g, &p, batch, domain)?;
        let history: Vec<Var> = (1..=batch.t_in)
            .rev()
            .map(|j| g.constant(batch.lagged(j)))
            .collect();
        let beta = p.var(self.beta_id(domain));
        let steps = self
            .predictor
            .rollout(&mut g, &p, &history, &slices, beta, horizon)?;
        Ok(steps.iter().map(|&s| g.value(s).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{make_windows, Batch};
    use crate::synthgen::RawSeries;

    fn batch(d: usize, t_in: usize) -> Batch {
        let s = RawSeries {
            values: Tensor::from_fn(20, d, |r, c| ((r * 3 + c) as f64 * 0.7).sin()),
            domain_id: "x".into(),
            ground_truth: None,
        };
        let w = make_windows(&s, t_in, 2, 1).unwrap();
        Batch::from_windows(&w[..4])
    }

    #[test]
    fn forecast_and_structure_shapes() {
        let cfg = ModelConfig::new(3, 2);
        let m = GcaModel::new(cfg, 0).unwrap();
        let b = batch(3, 4);
        let s = m.infer_structure(&b, Domain::Target).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].shape(), (4, 9));
        let mean = m.mean_edge_probabilities(&b, Domain::Source).unwrap();
        assert!(mean.flat().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let f = m.forecast(&b, Domain::Source, 3).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].shape(), (4, 3));
        assert_eq!(m.forecast(&b, Domain::Source, 3).unwrap(), f);
    }

    #[test]
    fn latents_are_per_domain() {
        let m = GcaModel::new(ModelConfig::new(3, 1), 1).unwrap();
        let s = m.latents(Domain::Source);
        let t = m.latents(Domain::Target);
        assert_eq!(s.alpha.len(), t.alpha.len());
        assert_ne!(s.alpha, t.alpha);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ModelConfig::new(3, 3);
        cfg.t_in = Some(2);
        assert!(GcaModel::new(cfg, 0).is_err());
        assert!(GcaModel::new(ModelConfig::new(1, 1), 0).is_err());
    }
}
