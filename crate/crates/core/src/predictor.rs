//! Structure-masked one-step forecaster.
//!
//! Intra-lag: for every output variable `u`, lag `j` sees only
//! `z_{t-j} ⊙ A_j[u, :]` (plus a one-hot tag for `u`) through the shared
//! network `g_j`, giving an embedding `e^u_{t-j}`.
//!
//! Inter-lag: `G` maps `(e^u_{t-1}, …, e^u_{t-k}, β)` to `ẑ^u_{t+1}`.
//!
//! Because `ẑ^u` only ever touches row `u` of each mask, a zero in
//! `A_j[u, v]` cuts every path from `z^v_{t-j}` to `ẑ^u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{GcaError, Result};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Predictor {
    pub dims: usize,
    pub max_lag: usize,
    pub d_embed: usize,
    pub d_beta: usize,
    pub lag_nets: Vec<Mlp>,
    pub aggregator: Mlp,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dims: usize,
        max_lag: usize,
        d_embed: usize,
        d_beta: usize,
        hidden: usize,
    ) -> Self {
        let lag_nets = (0..max_lag)
            .map(|j| {
                Mlp::new(
                    store,
                    rng,
                    &format!("predictor.g{}", j + 1),
                    &[2 * dims, hidden, d_embed],
                )
            })
            .collect();
        let aggregator = Mlp::new(
            store,
            rng,
            "predictor.G",
            &[max_lag * d_embed + d_beta, hidden, hidden, 1],
        );
        Predictor {
            dims,
            max_lag,
            d_embed,
            d_beta,
            lag_nets,
            aggregator,
        }
    }

    /// Zeroes the output layer of `G`, making every forecast 0.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let out = self.aggregator.output_layer();
        for id in [out.weight, out.bias] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
    }

    fn one_hot(&self, g: &mut Graph, batch: usize) -> Var {
        let d = self.dims;
        g.constant(Tensor::from_fn(batch * d, d, |r, c| {
            if r % d == c {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// `e_{t-lag}` for every (window, output variable) pair: `B·D × d_e`,
    /// row `b·D + u`.
    pub fn intra_lag(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_lag: Var,
        a_slice: Var,
        lag: usize,
    ) -> Result<Var> {
        let d = self.dims;
        if lag == 0 || lag > self.max_lag {
            return Err(GcaError::InvalidArgument(format!(
                "lag {lag} outside 1..={}",
                self.max_lag
            )));
        }
        let (batch, zc) = g.shape(z_lag);
        if zc != d {
            return Err(GcaError::shape("intra_lag z", d, zc));
        }
        if g.shape(a_slice) != (batch, d * d) {
            return Err(GcaError::shape(
                "intra_lag mask",
                format!("{batch}x{}", d * d),
                format!("{:?}", g.shape(a_slice)),
            ));
        }
        let z_rep = g.repeat_rows(z_lag, d);
        let rows = g.reshape(a_slice, batch * d, d);
        let masked = g.mul(z_rep, rows);
        let tag = self.one_hot(g, batch);
        let input = g.concat_cols(&[masked, tag]);
        Ok(self.lag_nets[lag - 1].forward(g, p, input))
    }

    /// Aggregates one contribution per lag (ordered `t-1 … t-k`) with `β`.
    /// Returns `B × D`.
    pub fn inter_lag(&self, g: &mut Graph, p: &Bound, contribs: &[Var], beta: Var) -> Result<Var> {
        if contribs.len() != self.max_lag {
            return Err(GcaError::shape(
                "inter_lag arity",
                self.max_lag,
                contribs.len(),
            ));
        }
        let rows = g.shape(contribs[0]).0;
        for &c in contribs {
            if g.shape(c) != (rows, self.d_embed) {
                return Err(GcaError::shape(
                    "inter_lag contribution",
                    self.d_embed,
                    g.shape(c).1,
                ));
            }
        }
        if g.shape(beta) != (1, self.d_beta) {
            return Err(GcaError::shape(
                "inter_lag beta",
                self.d_beta,
                g.shape(beta).1,
            ));
        }
        let mut parts = contribs.to_vec();
        parts.push(g.broadcast_rows(beta, rows));
        let input = g.concat_cols(&parts);
        let out = self.aggregator.forward(g, p, input);
        Ok(g.reshape(out, rows / self.dims, self.dims))
    }

    /// `lags[j-1] = z_{t-j}`, each `B × D`; `slices[j-1] = A_j`, each `B × D²`.
    pub fn predict_one_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        lags: &[Var],
        slices: &[Var],
        beta: Var,
    ) -> Result<Var> {
        if lags.len() < self.max_lag {
            return Err(GcaError::shape(
                "predict_one_step history",
                format!(">= {}", self.max_lag),
                lags.len(),
            ));
        }
        if slices.len() != self.max_lag {
            return Err(GcaError::shape(
                "predict_one_step structure",
                self.max_lag,
                slices.len(),
            ));
        }
        let contribs = (0..self.max_lag)
            .map(|j| self.intra_lag(g, p, lags[j], slices[j], j + 1))
            .collect::<Result<Vec<_>>>()?;
        self.inter_lag(g, p, &contribs, beta)
    }

    /// Autoregressive forecast: each prediction is appended to the history
    /// and fed back. `history` is chronological (oldest first), each `B × D`.
    pub fn rollout(
        &self,
        g: &mut Graph,
        p: &Bound,
        history: &[Var],
        slices: &[Var],
        beta: Var,
        horizon: usize,
    ) -> Result<Vec<Var>> {
        if horizon == 0 {
            return Err(GcaError::InvalidArgument("horizon must be >= 1".into()));
        }
        if history.len() < self.max_lag {
            return Err(GcaError::shape(
                "rollout history",
                format!(">= {}", self.max_lag),
                history.len(),
            ));
        }
        let mut buf: Vec<Var> = history[history.len() - self.max_lag..].to_vec();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let lags: Vec<Var> = buf.iter().rev().copied().collect();
            let next = self.predict_one_step(g, p, &lags, slices, beta)?;
            out.push(next);
            buf.remove(0);
            buf.push(next);
        }
        Ok(out)
    }
}
