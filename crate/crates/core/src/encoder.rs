//! Recurrent reconstruction of lagged causal structure.
//!
//! Lag slice `A_j` is inferred by a per-lag network `f_j` from the recent
//! history, the already sampled slices `A_1..A_{j-1}` and the domain's
//! structural latent `α`. Every potential edge is a two-category variable
//! (absent, present) sampled with the Gumbel-softmax relaxation.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{GcaError, Result};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Soft,
    /// One-hot forward values, soft gradients (straight-through).
    Hard,
}

/// Category scores for every edge of one lag slice, each `B × D²` in
/// row-major `(u, v)` order.
#[derive(Clone, Copy, Debug)]
pub struct EdgeLogits {
    pub absent: Var,
    pub present: Var,
}

/// Plain-value logits for a full structure: `k` slices, each `D×D×2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureLogits {
    /// `[lag][(u, v)] = (absent, present)`, flattened row-major.
    pub logits: Vec<Vec<[f64; 2]>>,
    pub dims: usize,
}

/// Edge probabilities or a sampled structure, `k` slices of `D×D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalStructure {
    pub slices: Vec<Tensor>,
    pub mode: SampleMode,
    pub temperature: f64,
}

impl CausalStructure {
    pub fn max_lag(&self) -> usize {
        self.slices.len()
    }

    pub fn dims(&self) -> usize {
        self.slices.first().map_or(0, Tensor::rows)
    }

    /// Flattened in `(lag, u, v)` order.
    pub fn flat(&self) -> Vec<f64> {
        self.slices
            .iter()
            .flat_map(|s| s.data().iter().copied())
            .collect()
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        self.slices
            .iter()
            .map(|s| (0..s.rows()).map(|u| s.row(u).to_vec()).collect())
            .collect()
    }
}

/// Gumbel(0, 1) perturbations for one lag slice, `B × D²` per category.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    pub absent: Tensor,
    pub present: Tensor,
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, dims: usize) -> Self {
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel parameters");
        let mut draw = || Tensor::from_fn(batch, dims * dims, |_, _| gumbel.sample(rng));
        let absent = draw();
        let present = draw();
        GumbelNoise { absent, present }
    }

    pub fn zeros(batch: usize, dims: usize) -> Self {
        GumbelNoise {
            absent: Tensor::zeros(batch, dims * dims),
            present: Tensor::zeros(batch, dims * dims),
        }
    }
}

/// One [`GumbelNoise`] per lag.
pub fn sample_structure_noise<R: Rng + ?Sized>(
    rng: &mut R,
    max_lag: usize,
    batch: usize,
    dims: usize,
) -> Vec<GumbelNoise> {
    (0..max_lag)
        .map(|_| GumbelNoise::sample(rng, batch, dims))
        .collect()
}

pub fn zero_structure_noise(max_lag: usize, batch: usize, dims: usize) -> Vec<GumbelNoise> {
    (0..max_lag)
        .map(|_| GumbelNoise::zeros(batch, dims))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureEncoder {
    pub dims: usize,
    pub max_lag: usize,
    /// Number of most recent history steps fed to every `f_j`.
    pub history_steps: usize,
    pub d_alpha: usize,
    pub use_alpha: bool,
    pub lag_nets: Vec<Mlp>,
}

impl StructureEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dims: usize,
        max_lag: usize,
        history_steps: usize,
        d_alpha: usize,
        hidden: usize,
        use_alpha: bool,
    ) -> Self {
        let d2 = dims * dims;
        let lag_nets = (0..max_lag)
            .map(|j| {
                let input = history_steps * dims + j * d2 + if use_alpha { d_alpha } else { 0 };
                Mlp::new(
                    store,
                    rng,
                    &format!("encoder.f{}", j + 1),
                    &[input, hidden, hidden, 2 * d2],
                )
            })
            .collect();
        StructureEncoder {
            dims,
            max_lag,
            history_steps,
            d_alpha,
            use_alpha,
            lag_nets,
        }
    }

    /// Logits of slice `lag` (1-based) given `history` (`B × history_steps·D`,
    /// oldest step first), the `lag - 1` earlier slices and `alpha`.
    pub fn encode_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        history: Var,
        prev_slices: &[Var],
        lag: usize,
        alpha: Option<Var>,
    ) -> Result<EdgeLogits> {
        if lag == 0 || lag > self.max_lag {
            return Err(GcaError::InvalidArgument(format!(
                "lag {lag} outside 1..={}",
                self.max_lag
            )));
        }
        if prev_slices.len() != lag - 1 {
            return Err(GcaError::shape(
                "encode_logits prev slices",
                lag - 1,
                prev_slices.len(),
            ));
        }
        let (batch, hcols) = g.shape(history);
        if hcols != self.history_steps * self.dims {
            return Err(GcaError::shape(
                "encode_logits history",
                self.history_steps * self.dims,
                hcols,
            ));
        }
        let d2 = self.dims * self.dims;
        let mut parts = vec![history];
        for &s in prev_slices {
            if g.shape(s) != (batch, d2) {
                return Err(GcaError::shape(
                    "encode_logits slice",
                    format!("{batch}x{d2}"),
                    format!("{:?}", g.shape(s)),
                ));
            }
            parts.push(s);
        }
        if self.use_alpha {
            let alpha =
                alpha.ok_or_else(|| GcaError::InvalidArgument("encoder expects α".into()))?;
            if g.shape(alpha) != (1, self.d_alpha) {
                return Err(GcaError::shape(
                    "encode_logits alpha",
                    self.d_alpha,
                    g.shape(alpha).1,
                ));
            }
            parts.push(g.broadcast_rows(alpha, batch));
        }
        let input = g.concat_cols(&parts);
        let out = self.lag_nets[lag - 1].forward(g, p, input);
        Ok(EdgeLogits {
            absent: g.slice_cols(out, 0, d2),
            present: g.slice_cols(out, d2, 2 * d2),
        })
    }

    /// Most recent `history_steps` rows of a `B × t_in·D` window block.
    pub fn select_history(&self, g: &mut Graph, x: Var, t_in: usize) -> Result<Var> {
        if t_in < self.history_steps {
            return Err(GcaError::shape(
                "encoder history",
                format!(">= {} steps", self.history_steps),
                t_in,
            ));
        }
        let start = (t_in - self.history_steps) * self.dims;
        Ok(g.slice_cols(x, start, t_in * self.dims))
    }
}

/// "present" coordinate of `softmax((logits + noise) / τ)`.
pub fn gumbel_sample(
    g: &mut Graph,
    logits: &EdgeLogits,
    temperature: f64,
    noise: &GumbelNoise,
    mode: SampleMode,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(GcaError::InvalidArgument(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let shape = g.shape(logits.present);
    if noise.present.shape() != shape || noise.absent.shape() != shape {
        return Err(GcaError::shape(
            "gumbel noise",
            format!("{shape:?}"),
            format!("{:?}", noise.present.shape()),
        ));
    }
    // softmax over two categories is the logistic of the score difference
    let diff = g.sub(logits.present, logits.absent);
    let noise_diff = g.constant(noise.present.zip_map(&noise.absent, |a, b| a - b));
    let perturbed = g.add(diff, noise_diff);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.sigmoid(scaled);
    Ok(match mode {
        SampleMode::Soft => soft,
        SampleMode::Hard => {
            let hard = g.value(soft).map(|x| if x > 0.5 { 1.0 } else { 0.0 });
            g.straight_through(soft, hard)
        }
    })
}

/// Noise-free "present" probability, differentiable.
pub fn edge_probabilities(g: &mut Graph, logits: &EdgeLogits) -> Var {
    let diff = g.sub(logits.present, logits.absent);
    g.sigmoid(diff)
}

/// Plain-value version of [`edge_probabilities`] for stored logits.
pub fn edge_probabilities_from(logits: &StructureLogits) -> CausalStructure {
    let d = logits.dims;
    let slices = logits
        .logits
        .iter()
        .map(|lag| Tensor::from_vec(d, d, lag.iter().map(|[a, p]| sigmoid(p - a)).collect()))
        .collect();
    CausalStructure {
        slices,
        mode: SampleMode::Soft,
        temperature: 1.0,
    }
}

/// Output of the lag-by-lag recursion.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Sampled slices, each `B × D²`.
    pub slices: Vec<Var>,
    pub logits: Vec<EdgeLogits>,
}

impl Reconstruction {
    /// Noise-free probabilities of every slice.
    pub fn probabilities(&self, g: &mut Graph) -> Vec<Var> {
        self.logits
            .iter()
            .map(|l| edge_probabilities(g, l))
            .collect()
    }
}

/// Runs `j = 1..k`, feeding each sampled slice into the next `f_j`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_structure(
    encoder: &StructureEncoder,
    g: &mut Graph,
    p: &Bound,
    history: Var,
    alpha: Option<Var>,
    temperature: f64,
    noise: &[GumbelNoise],
    mode: SampleMode,
) -> Result<Reconstruction> {
    if noise.len() != encoder.max_lag {
        return Err(GcaError::shape(
            "structure noise",
            encoder.max_lag,
            noise.len(),
        ));
    }
    let mut slices = Vec::with_capacity(encoder.max_lag);
    let mut logits = Vec::with_capacity(encoder.max_lag);
    for lag in 1..=encoder.max_lag {
        let l = encoder.encode_logits(g, p, history, &slices, lag, alpha)?;
        let s = gumbel_sample(g, &l, temperature, &noise[lag - 1], mode)?;
        slices.push(s);
        logits.push(l);
    }
    Ok(Reconstruction { slices, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_logits(
        g: &mut Graph,
        batch: usize,
        d: usize,
        absent: f64,
        present: f64,
    ) -> EdgeLogits {
        EdgeLogits {
            absent: g.constant(Tensor::filled(batch, d * d, absent)),
            present: g.constant(Tensor::filled(batch, d * d, present)),
        }
    }

    fn tiny_encoder(k: usize) -> (ParamStore, StructureEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = StructureEncoder::new(&mut store, &mut rng, 3, k, k, 4, 8, true);
        (store, enc)
    }

    #[test]
    fn balanced_logits_average_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let l = const_logits(&mut g, 100, 10, 0.0, 0.0);
        let noise = GumbelNoise::sample(&mut rng, 100, 10);
        let s = gumbel_sample(&mut g, &l, 1.0, &noise, SampleMode::Soft).unwrap();
        let mean = g.value(s).mean();
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn saturated_logits_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let l = const_logits(&mut g, 10, 10, -50.0, 50.0);
        let noise = GumbelNoise::sample(&mut rng, 10, 10);
        let s = gumbel_sample(&mut g, &l, 1.0, &noise, SampleMode::Soft).unwrap();
        assert!(g.value(s).data().iter().all(|&x| x >= 1.0 - 1e-9));
    }

    #[test]
    fn low_temperature_concentrates_on_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let l = const_logits(&mut g, 100, 10, 0.0, 1.0);
        let noise = GumbelNoise::sample(&mut rng, 100, 10);
        let s = gumbel_sample(&mut g, &l, 0.01, &noise, SampleMode::Soft).unwrap();
        let inside = g
            .value(s)
            .data()
            .iter()
            .filter(|&&x| x > 0.05 && x < 0.95)
            .count();
        // interior iff |1 + L| < 0.01·ln 19 with L standard logistic
        let half_width = 0.01 * 19f64.ln();
        let cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = cdf(-1.0 + half_width) - cdf(-1.0 - half_width);
        let frac = inside as f64 / 10_000.0;
        assert!(
            expected < 0.012 && (frac - expected).abs() < 0.004,
            "{inside} interior samples"
        );
    }

    #[test]
    fn hard_mode_is_binary_with_soft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = GumbelNoise::sample(&mut rng, 4, 3);
        let weights = Tensor::from_fn(4, 9, |r, c| ((r * 9 + c) % 7) as f64 * 0.1);
        let run = |mode| {
            let mut g = Graph::new();
            let present = g.param(Tensor::from_fn(4, 9, |r, c| (r as f64 - c as f64) * 0.2));
            let absent = g.constant(Tensor::zeros(4, 9));
            let l = EdgeLogits { absent, present };
            let s = gumbel_sample(&mut g, &l, 0.7, &noise, mode).unwrap();
            let w = g.constant(weights.clone());
            let prod = g.mul(s, w);
            let loss = g.sum(prod);
            let value = g.value(s).clone();
            let grads = g.backward(loss);
            (value, grads.get(present).unwrap().clone())
        };
        let (hard_v, hard_g) = run(SampleMode::Hard);
        let (_, soft_g) = run(SampleMode::Soft);
        assert!(hard_v.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(hard_g, soft_g);
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let l = const_logits(&mut g, 1, 2, 0.0, 0.0);
        let noise = GumbelNoise::zeros(1, 2);
        assert!(gumbel_sample(&mut g, &l, 0.0, &noise, SampleMode::Soft).is_err());
    }

    #[test]
    fn edge_probabilities_match_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<[f64; 2]> = (0..9)
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
            .collect();
        let logits = StructureLogits {
            logits: vec![vals.clone()],
            dims: 3,
        };
        let probs = edge_probabilities_from(&logits);
        for (i, [a, p]) in vals.iter().enumerate() {
            let (ea, ep) = (a.exp(), p.exp());
            let oracle = ep / (ea + ep);
            assert!((probs.slices[0].data()[i] - oracle).abs() < 1e-12);
            assert!((oracle + ea / (ea + ep) - 1.0).abs() < 1e-12);
        }
        let simple = StructureLogits {
            logits: vec![vec![[0.0, 0.0], [-50.0, 0.0], [0.0, 0.0], [0.0, 0.0]]],
            dims: 2,
        };
        let s = edge_probabilities_from(&simple);
        assert_eq!(s.slices[0].get(0, 0), 0.5);
        assert!(s.slices[0].get(0, 1) > 1.0 - 1e-12);
    }

    #[test]
    fn first_lag_has_no_recursion_and_is_deterministic() {
        let (store, enc) = tiny_encoder(2);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let h = g.constant(Tensor::from_fn(2, 6, |r, c| (r + c) as f64 * 0.1));
            let a = g.constant(Tensor::filled(1, 4, 0.3));
            let l = enc.encode_logits(&mut g, &p, h, &[], 1, Some(a)).unwrap();
            g.value(l.present).clone()
        };
        assert_eq!(run(), run());
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let h = g.constant(Tensor::zeros(2, 6));
        let a = g.constant(Tensor::zeros(1, 4));
        assert!(enc.encode_logits(&mut g, &p, h, &[], 2, Some(a)).is_err());
    }

    #[test]
    fn alpha_perturbation_moves_logits() {
        let (store, enc) = tiny_encoder(1);
        let logits_for = |alpha: f64| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let h = g.constant(Tensor::filled(1, 3, 0.5));
            let a = g.constant(Tensor::filled(1, 4, alpha));
            let l = enc.encode_logits(&mut g, &p, h, &[], 1, Some(a)).unwrap();
            g.value(l.present).clone()
        };
        let delta = 1e-4;
        let base = logits_for(0.1);
        let moved = logits_for(0.1 + delta);
        let fd = base.zip_map(&moved, |a, b| (b - a) / delta);
        assert!(fd.max_abs() > 1e-6);
    }

    #[test]
    fn recursion_is_live() {
        let (store, enc) = tiny_encoder(3);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let h = g.constant(Tensor::filled(1, 9, 0.2));
        let a = g.constant(Tensor::filled(1, 4, 0.1));
        let noise = zero_structure_noise(3, 1, 3);
        let rec =
            reconstruct_structure(&enc, &mut g, &p, h, Some(a), 1.0, &noise, SampleMode::Soft)
                .unwrap();
        let base = g.value(rec.logits[2].present).clone();
        // force a different first slice and re-infer slice 3
        let forced = g.constant(Tensor::ones(1, 9));
        let l2 = enc
            .encode_logits(&mut g, &p, h, &[forced], 2, Some(a))
            .unwrap();
        let s2 = gumbel_sample(&mut g, &l2, 1.0, &noise[1], SampleMode::Soft).unwrap();
        let l3 = enc
            .encode_logits(&mut g, &p, h, &[forced, s2], 3, Some(a))
            .unwrap();
        let altered = g.value(l3.present).clone();
        assert!(base.zip_map(&altered, |a, b| (a - b).abs()).max_abs() > 1e-9);
    }

    #[test]
    fn seeded_reconstruction_repeats() {
        let (store, enc) = tiny_encoder(2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let h = g.constant(Tensor::filled(3, 6, 0.4));
            let a = g.constant(Tensor::filled(1, 4, -0.2));
            let noise = sample_structure_noise(&mut rng, 2, 3, 3);
            let rec =
                reconstruct_structure(&enc, &mut g, &p, h, Some(a), 0.5, &noise, SampleMode::Soft)
                    .unwrap();
            rec.slices
                .iter()
                .map(|&s| g.value(s).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
