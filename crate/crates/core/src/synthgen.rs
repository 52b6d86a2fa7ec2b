//! Synthetic multi-domain time series with known lagged causal structure.
//!
//! Each domain iterates
//!
//! ```text
//! z_t = Σ_j W_j · (z_{t-j} + c · sin(z_{t-j})) + ε,   ε ~ N(0, σ² I)
//! ```
//!
//! where `W_j` carries signed weights on the edges of the binary lag slice
//! `A_j`. `W_j[u][v]` is the influence of `z^v_{t-j}` on `z^u_t`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::tensor::Tensor;

/// Spectral radius bound for the companion form of every simulated system.
pub const SPECTRAL_RADIUS_BOUND: f64 = 0.95;
/// Any `|z|` above this aborts the trajectory.
pub const OVERFLOW_GUARD: f64 = 1e6;
/// Weight-halving retries before giving up on a diverging trajectory.
pub const MAX_RESCALE_RETRIES: usize = 5;
pub const DEFAULT_BURN_IN: usize = 100;

/// Binary lagged adjacency plus the signed edge weights used to simulate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStructure {
    pub max_lag: usize,
    pub dims: usize,
    pub edge_density: f64,
    /// `adjacency[j][u][v]`, lag `j+1`.
    pub adjacency: Vec<Vec<Vec<u8>>>,
    /// Same layout as `adjacency`; zero wherever there is no edge.
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl GroundTruthStructure {
    /// Builds a structure whose adjacency is the support of `weights`.
    pub fn from_weights(weights: Vec<Tensor>, edge_density: f64) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(GcaError::InvalidArgument("need at least one lag".into()));
        }
        let d = weights[0].rows();
        let mut adjacency = Vec::with_capacity(k);
        let mut nested = Vec::with_capacity(k);
        for w in &weights {
            if w.shape() != (d, d) {
                return Err(GcaError::shape(
                    "GroundTruthStructure",
                    format!("{d}x{d}"),
                    format!("{:?}", w.shape()),
                ));
            }
            adjacency.push(
                (0..d)
                    .map(|u| (0..d).map(|v| u8::from(w.get(u, v) != 0.0)).collect())
                    .collect(),
            );
            nested.push((0..d).map(|u| w.row(u).to_vec()).collect());
        }
        Ok(GroundTruthStructure {
            max_lag: k,
            dims: d,
            edge_density,
            adjacency,
            weights: nested,
        })
    }

    #[inline]
    pub fn edge(&self, lag: usize, u: usize, v: usize) -> bool {
        self.adjacency[lag][u][v] == 1
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency
            .iter()
            .flatten()
            .flatten()
            .filter(|&&x| x == 1)
            .count()
    }

    /// Adjacency flattened in `(lag, u, v)` order.
    pub fn flat_labels(&self) -> Vec<bool> {
        self.adjacency
            .iter()
            .flatten()
            .flatten()
            .map(|&x| x == 1)
            .collect()
    }

    pub fn weight_tensors(&self) -> Vec<Tensor> {
        self.weights.iter().map(|w| Tensor::from_rows(w)).collect()
    }

    pub fn adjacency_tensors(&self) -> Vec<Tensor> {
        self.adjacency
            .iter()
            .map(|a| Tensor::from_fn(self.dims, self.dims, |u, v| f64::from(a[u][v])))
            .collect()
    }

    pub fn hamming(&self, other: &GroundTruthStructure) -> usize {
        self.flat_labels()
            .iter()
            .zip(other.flat_labels())
            .filter(|(a, b)| **a != *b)
            .count()
    }

    fn check_invariants(&self) -> Result<()> {
        for (j, slice) in self.adjacency.iter().enumerate() {
            if slice.iter().flatten().all(|&x| x == 0) {
                return Err(GcaError::InvalidArgument(format!(
                    "lag slice {} has no edges",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-domain generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainGenConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub noise_variance: f64,
    pub sample_interval: usize,
    pub nonlin_c: f64,
    pub length: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub seed: u64,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl DomainGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_variance.is_nan() || self.noise_variance <= 0.0 {
            return Err(GcaError::config("noise_variance", "must be > 0"));
        }
        if self.sample_interval < 1 {
            return Err(GcaError::config("sample_interval", "must be >= 1"));
        }
        if self.nonlin_c.is_nan() || self.nonlin_c < 0.0 {
            return Err(GcaError::config("nonlin_c", "must be >= 0"));
        }
        if self.length == 0 || self.length <= self.burn_in {
            return Err(GcaError::config(
                "length",
                "must be positive and exceed burn_in",
            ));
        }
        Ok(())
    }

    /// The three settings of the reference simulation study
    /// (noise variance, sample interval, nonlinearity constant).
    pub fn reference_domains(length: usize, seed: u64) -> Vec<DomainGenConfig> {
        [(1.0, 1, 0.02), (5.0, 2, 0.04), (10.0, 3, 0.06)]
            .into_iter()
            .enumerate()
            .map(
                |(i, (noise_variance, sample_interval, nonlin_c))| DomainGenConfig {
                    id: Some(format!("domain{}", i + 1)),
                    noise_variance,
                    sample_interval,
                    nonlin_c,
                    length,
                    burn_in: DEFAULT_BURN_IN,
                    seed: seed + i as u64,
                },
            )
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    /// `T × D`.
    pub values: Tensor,
    pub domain_id: String,
    pub ground_truth: Option<GroundTruthStructure>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }
}

fn validate_shape(dims: usize, max_lag: usize, edge_density: f64) -> Result<()> {
    if dims < 2 {
        return Err(GcaError::InvalidArgument(format!(
            "D = {dims}: need at least two variables for cross-variable causality"
        )));
    }
    if max_lag < 1 {
        return Err(GcaError::InvalidArgument("max lag must be >= 1".into()));
    }
    if !(edge_density > 0.0 && edge_density <= 1.0) {
        return Err(GcaError::InvalidArgument(format!(
            "edge density {edge_density} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Draws a Bernoulli adjacency and a full tensor of candidate signed weights
/// in `±[0.5, 1.0]`. Empty lag slices get one forced edge.
fn draw_base(
    rng: &mut ChaCha8Rng,
    dims: usize,
    max_lag: usize,
    density: f64,
) -> (Vec<Vec<u8>>, Vec<f64>) {
    let per = dims * dims;
    let mut adjacency = Vec::with_capacity(max_lag);
    for _ in 0..max_lag {
        let mut slice: Vec<u8> = (0..per)
            .map(|_| u8::from(rng.random::<f64>() < density))
            .collect();
        if slice.iter().all(|&x| x == 0) {
            let idx = rng.random_range(0..per);
            slice[idx] = 1;
        }
        adjacency.push(slice);
    }
    let proposals = (0..max_lag * per)
        .map(|_| {
            let mag = rng.random_range(0.5..=1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    (adjacency, proposals)
}

/// Spectral radius of the companion matrix of `z_t = Σ_j W_j z_{t-j}`.
pub fn companion_spectral_radius(weights: &[Tensor]) -> f64 {
    let k = weights.len();
    let d = weights[0].rows();
    let n = k * d;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (j, w) in weights.iter().enumerate() {
        for u in 0..d {
            for v in 0..d {
                m[(u, j * d + v)] = w.get(u, v);
            }
        }
    }
    for i in d..n {
        m[(i, i - d)] = 1.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Shrinks `weights` uniformly until the companion spectral radius is at most
/// [`SPECTRAL_RADIUS_BOUND`].
fn rescale_to_stable(weights: &mut [Tensor]) {
    for _ in 0..200 {
        let rho = companion_spectral_radius(weights);
        if rho <= SPECTRAL_RADIUS_BOUND {
            return;
        }
        let s = (SPECTRAL_RADIUS_BOUND / rho).min(0.999);
        for w in weights.iter_mut() {
            for x in w.data_mut() {
                *x *= s;
            }
        }
    }
}

fn assemble(
    dims: usize,
    max_lag: usize,
    density: f64,
    adjacency: &[Vec<u8>],
    proposals: &[f64],
) -> Result<GroundTruthStructure> {
    let per = dims * dims;
    let mut weights: Vec<Tensor> = (0..max_lag)
        .map(|j| {
            Tensor::from_fn(dims, dims, |u, v| {
                let i = u * dims + v;
                if adjacency[j][i] == 1 {
                    proposals[j * per + i]
                } else {
                    0.0
                }
            })
        })
        .collect();
    rescale_to_stable(&mut weights);
    let mut s = GroundTruthStructure::from_weights(weights, density)?;
    // keep the binary pattern exact even if a weight underflowed
    s.adjacency = adjacency
        .iter()
        .map(|slice| slice.chunks(dims).map(<[u8]>::to_vec).collect())
        .collect();
    s.check_invariants()?;
    Ok(s)
}

/// Random sparse lagged structure with stable weights; deterministic in `seed`.
pub fn sample_structure(
    dims: usize,
    max_lag: usize,
    edge_density: f64,
    seed: u64,
) -> Result<GroundTruthStructure> {
    validate_shape(dims, max_lag, edge_density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (adjacency, proposals) = draw_base(&mut rng, dims, max_lag, edge_density);
    assemble(dims, max_lag, edge_density, &adjacency, &proposals)
}

/// Simulates one domain with initial states drawn from `N(0, I)`.
pub fn simulate_domain(
    structure: &GroundTruthStructure,
    cfg: &DomainGenConfig,
) -> Result<RawSeries> {
    simulate_domain_from(structure, cfg, None)
}

/// Like [`simulate_domain`] but with explicit initial states
/// `[z_{-k}, ..., z_{-1}]` (oldest first).
pub fn simulate_domain_from(
    structure: &GroundTruthStructure,
    cfg: &DomainGenConfig,
    initial: Option<&[Vec<f64>]>,
) -> Result<RawSeries> {
    cfg.validate()?;
    let d = structure.dims;
    let k = structure.max_lag;
    if let Some(init) = initial {
        if init.len() != k || init.iter().any(|r| r.len() != d) {
            return Err(GcaError::shape(
                "initial states",
                format!("{k}x{d}"),
                format!("{}x?", init.len()),
            ));
        }
    }
    let mut weights = structure.weight_tensors();
    for attempt in 0..=MAX_RESCALE_RETRIES {
        match run_recursion(&weights, cfg, initial) {
            Some(values) => {
                return Ok(RawSeries {
                    values,
                    domain_id: cfg.id.clone().unwrap_or_else(|| "domain".into()),
                    ground_truth: Some(structure.clone()),
                });
            }
            None if attempt < MAX_RESCALE_RETRIES => {
                for w in weights.iter_mut() {
                    for x in w.data_mut() {
                        *x *= 0.5;
                    }
                }
            }
            None => {}
        }
    }
    Err(GcaError::Divergence {
        guard: OVERFLOW_GUARD,
        retries: MAX_RESCALE_RETRIES,
    })
}

/// Returns `None` on overflow.
fn run_recursion(
    weights: &[Tensor],
    cfg: &DomainGenConfig,
    initial: Option<&[Vec<f64>]>,
) -> Option<Tensor> {
    let k = weights.len();
    let d = weights[0].rows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_sd = cfg.noise_variance.sqrt();
    let c = cfg.nonlin_c;

    // ring of the last k states, oldest first
    let mut history: Vec<Vec<f64>> = match initial {
        Some(init) => init.to_vec(),
        None => (0..k)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect(),
    };

    let steps = cfg.burn_in + (cfg.length - 1) * cfg.sample_interval + 1;
    let mut out = Vec::with_capacity(cfg.length * d);
    let mut feat = vec![0.0; d];
    for t in 0..steps {
        let mut next = vec![0.0; d];
        for (j, w) in weights.iter().enumerate() {
            let lagged = &history[k - 1 - j];
            for (f, &z) in feat.iter_mut().zip(lagged) {
                *f = z + c * z.sin();
            }
            for (u, nu) in next.iter_mut().enumerate() {
                *nu += w.row(u).iter().zip(&feat).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for nu in next.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *nu += noise_sd * e;
            if nu.is_nan() || nu.abs() > OVERFLOW_GUARD {
                return None;
            }
        }
        if t >= cfg.burn_in && (t - cfg.burn_in).is_multiple_of(cfg.sample_interval) {
            out.extend_from_slice(&next);
        }
        history.remove(0);
        history.push(next);
    }
    Some(Tensor::from_vec(cfg.length, d, out))
}

/// Structures and series for a set of related domains.
#[derive(Clone, Debug)]
pub struct DomainFamily {
    pub base: GroundTruthStructure,
    pub structures: Vec<GroundTruthStructure>,
    pub series: Vec<RawSeries>,
    pub configs: Vec<DomainGenConfig>,
}

/// One shared base structure; every domain flips `round(jitter · k·D·D)`
/// off-diagonal entries of it and is simulated with its own config.
pub fn make_domain_family(
    dims: usize,
    max_lag: usize,
    edge_density: f64,
    configs: &[DomainGenConfig],
    structure_jitter: f64,
    seed: u64,
) -> Result<DomainFamily> {
    validate_shape(dims, max_lag, edge_density)?;
    if !(0.0..=0.2).contains(&structure_jitter) {
        return Err(GcaError::InvalidArgument(format!(
            "structure jitter {structure_jitter} outside [0, 0.2]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base_adj, proposals) = draw_base(&mut rng, dims, max_lag, edge_density);
    let base = assemble(dims, max_lag, edge_density, &base_adj, &proposals)?;

    let per = dims * dims;
    let off_diag: Vec<(usize, usize)> = (0..max_lag)
        .flat_map(|j| {
            (0..per)
                .filter(move |i| i / dims != i % dims)
                .map(move |i| (j, i))
        })
        .collect();
    let flips = (structure_jitter * (max_lag * per) as f64).round() as usize;
    let flips = flips.min(off_diag.len());

    let mut structures = Vec::with_capacity(configs.len());
    let mut series = Vec::with_capacity(configs.len());
    let mut named = Vec::with_capacity(configs.len());
    for (idx, cfg) in configs.iter().enumerate() {
        let mut cfg = cfg.clone();
        cfg.id.get_or_insert_with(|| format!("domain{}", idx + 1));
        let mut drng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add(1 + idx as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut adj = base_adj.clone();
        if flips > 0 {
            // redraw until no lag slice is left empty
            loop {
                let mut trial = base_adj.clone();
                for pick in sample_indices(&mut drng, off_diag.len(), flips) {
                    let (j, i) = off_diag[pick];
                    trial[j][i] ^= 1;
                }
                if trial.iter().all(|s| s.contains(&1)) {
                    adj = trial;
                    break;
                }
            }
        }
        let structure = assemble(dims, max_lag, edge_density, &adj, &proposals)?;
        let s = simulate_domain(&structure, &cfg)?;
        structures.push(structure);
        series.push(s);
        named.push(cfg);
    }
    Ok(DomainFamily {
        base,
        structures,
        series,
        configs: named,
    })
}

/// Per-domain manifest written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain_id: String,
    #[serde(rename = "D")]
    pub dims: usize,
    pub k: usize,
    pub config: DomainGenConfig,
    pub csv_file: String,
    pub structure_file: String,
    pub weights_file: String,
}

/// Top-level index of a simulated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dims: usize,
    pub max_lag: usize,
    pub edge_density: f64,
    pub structure_jitter: f64,
    pub seed: u64,
    pub base_structure_file: String,
    pub domains: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| GcaError::io(path, e))
}

pub fn write_series_csv(path: &Path, values: &Tensor) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| GcaError::io(path, std::io::Error::other(e)))?;
    let header: Vec<String> = (0..values.cols()).map(|i| format!("v{i}")).collect();
    let io_err = |e: csv::Error| GcaError::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(io_err)?;
    for r in 0..values.rows() {
        // `{:?}` prints the shortest string that round-trips exactly
        let rec: Vec<String> = values.row(r).iter().map(|x| format!("{x:?}")).collect();
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| GcaError::io(path, e))
}

/// Writes CSVs, structures and manifests for every domain of `family`.
pub fn write_dataset(
    dir: &Path,
    family: &DomainFamily,
    structure_jitter: f64,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| GcaError::io(dir, e))?;
    let mut written = Vec::new();
    let base_file = "base.structure.json".to_string();
    write_json(&dir.join(&base_file), &family.base.adjacency)?;
    let mut ids = Vec::new();
    for ((s, structure), cfg) in family
        .series
        .iter()
        .zip(&family.structures)
        .zip(&family.configs)
    {
        let id = s.domain_id.clone();
        let csv_file = format!("{id}.csv");
        let structure_file = format!("{id}.structure.json");
        let weights_file = format!("{id}.weights.json");
        write_series_csv(&dir.join(&csv_file), &s.values)?;
        write_json(&dir.join(&structure_file), &structure.adjacency)?;
        write_json(&dir.join(&weights_file), &structure.weights)?;
        let manifest = DomainManifest {
            domain_id: id.clone(),
            dims: structure.dims,
            k: structure.max_lag,
            config: cfg.clone(),
            csv_file: csv_file.clone(),
            structure_file,
            weights_file,
        };
        let mpath = dir.join(format!("{id}.manifest.json"));
        write_json(&mpath, &manifest)?;
        written.push(dir.join(csv_file));
        ids.push(id);
    }
    let index = DatasetIndex {
        dims: family.base.dims,
        max_lag: family.base.max_lag,
        edge_density: family.base.edge_density,
        structure_jitter,
        seed,
        base_structure_file: base_file,
        domains: ids,
    };
    write_json(&dir.join("dataset.json"), &index)?;
    Ok(written)
}
