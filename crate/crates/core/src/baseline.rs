//! Pooled recurrent forecaster trained on labeled source and target windows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::Batch;
use crate::error::{GcaError, Result};
use crate::nn::{Bound, Linear, LstmCell, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub dims: usize,
    /// Hidden width; `max(32, 4·D)` when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl BaselineConfig {
    pub fn new(dims: usize) -> Self {
        BaselineConfig { dims, hidden: None }
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or_else(|| (4 * self.dims).max(32))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmForecaster {
    pub config: BaselineConfig,
    pub store: ParamStore,
    pub cell: LstmCell,
    pub head: Linear,
}

impl LstmForecaster {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.dims == 0 || config.hidden() == 0 {
            return Err(GcaError::config(
                "baseline",
                "dims and hidden must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = config.hidden();
        let cell = LstmCell::new(&mut store, &mut rng, "lstm", config.dims, hidden);
        let head = Linear::new(&mut store, &mut rng, "lstm.head", hidden, config.dims);
        Ok(LstmForecaster {
            config,
            store,
            cell,
            head,
        })
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if batch.dims != self.config.dims {
            return Err(GcaError::shape(
                "baseline batch dims",
                self.config.dims,
                batch.dims,
            ));
        }
        Ok(())
    }

    /// Runs the cell over the window and emits `horizon` autoregressive steps.
    pub fn rollout_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        horizon: usize,
    ) -> Result<Vec<Var>> {
        self.check(batch)?;
        if horizon == 0 {
            return Err(GcaError::InvalidArgument("horizon must be >= 1".into()));
        }
        let b = batch.len();
        let hidden = self.config.hidden();
        let mut h = g.constant(Tensor::zeros(b, hidden));
        let mut c = g.constant(Tensor::zeros(b, hidden));
        for lag in (1..=batch.t_in).rev() {
            let x = g.constant(batch.lagged(lag));
            (h, c) = self.cell.step(g, p, x, h, c);
        }
        let mut out = Vec::with_capacity(horizon);
        for step in 0..horizon {
            let next = self.head.forward(g, p, h);
            out.push(next);
            if step + 1 < horizon {
                (h, c) = self.cell.step(g, p, next, h, c);
            }
        }
        Ok(out)
    }

    pub fn forecast(&self, batch: &Batch, horizon: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let steps = self.rollout_graph(&mut g, &p, batch, horizon)?;
        Ok(steps.iter().map(|&s| g.value(s).clone()).collect())
    }
}
