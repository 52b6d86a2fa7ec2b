//! Windowing, normalization, temporal splits and semi-supervised labeling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::synthgen::{DatasetIndex, DomainManifest, GroundTruthStructure, RawSeries};
use crate::tensor::Tensor;

/// One training example: `t_in` past rows followed by `τ` future rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    /// `t_in × D`.
    pub x: Tensor,
    /// `τ × D`; first row follows the last row of `x` in the source series.
    pub y: Tensor,
    pub domain_id: String,
    pub labeled: bool,
    /// Row of the source series where `x` begins.
    pub start: usize,
}

impl SeriesWindow {
    pub fn t_in(&self) -> usize {
        self.x.rows()
    }

    pub fn horizon(&self) -> usize {
        self.y.rows()
    }
}

/// Per-column statistics for z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits mean/std (ddof = 0) on the first `fit_rows` rows only.
    pub fn fit(values: &Tensor, fit_rows: usize) -> Result<Self> {
        if fit_rows < 2 || fit_rows > values.rows() {
            return Err(GcaError::TooShort {
                len: fit_rows.min(values.rows()),
                needed: 2,
            });
        }
        let d = values.cols();
        let n = fit_rows as f64;
        let mut mean = vec![0.0; d];
        for r in 0..fit_rows {
            for (m, x) in mean.iter_mut().zip(values.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..fit_rows {
            for ((v, x), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        for (column, &s) in std.iter().enumerate() {
            if s < 1e-12 {
                return Err(GcaError::ConstantColumn { column, std: s });
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((x, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((x, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        out
    }
}

/// Z-scores `series` using statistics from its first `train_rows` rows.
pub fn zscore_fit_apply(series: &RawSeries, train_rows: usize) -> Result<(RawSeries, NormStats)> {
    if series.len() < 2 {
        return Err(GcaError::TooShort {
            len: series.len(),
            needed: 2,
        });
    }
    let stats = NormStats::fit(&series.values, train_rows)?;
    let values = stats.apply(&series.values);
    if !values.all_finite() {
        return Err(GcaError::NonFinite("normalized series".into()));
    }
    Ok((
        RawSeries {
            values,
            domain_id: series.domain_id.clone(),
            ground_truth: series.ground_truth.clone(),
        },
        stats,
    ))
}

pub fn window_count(len: usize, t_in: usize, horizon: usize, stride: usize) -> usize {
    if len < t_in + horizon {
        0
    } else {
        (len - t_in - horizon) / stride + 1
    }
}

/// Overlapping windows every `stride` rows. Windows are copies; the source
/// may be dropped afterwards.
pub fn make_windows(
    series: &RawSeries,
    t_in: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    if t_in == 0 || horizon == 0 || stride == 0 {
        return Err(GcaError::InvalidArgument(
            "t_in, horizon and stride must be >= 1".into(),
        ));
    }
    let len = series.len();
    if len < t_in + horizon {
        return Err(GcaError::TooShort {
            len,
            needed: t_in + horizon,
        });
    }
    let n = window_count(len, t_in, horizon, stride);
    Ok((0..n)
        .map(|i| {
            let start = i * stride;
            SeriesWindow {
                x: series.values.slice_rows(start, start + t_in),
                y: series
                    .values
                    .slice_rows(start + t_in, start + t_in + horizon),
                domain_id: series.domain_id.clone(),
                labeled: true,
                start,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    #[serde(default = "default_label_frac")]
    pub target_label_frac: f64,
}

fn default_label_frac() -> f64 {
    0.05
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            target_label_frac: 0.05,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(GcaError::config(name, "must lie in (0, 1)"));
            }
        }
        if (self.train_frac + self.val_frac + self.test_frac - 1.0).abs() > 1e-9 {
            return Err(GcaError::config(
                "train_frac",
                "train/val/test fractions must sum to 1",
            ));
        }
        if !(self.target_label_frac > 0.0 && self.target_label_frac <= 1.0) {
            return Err(GcaError::config("target_label_frac", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `(n_train, n_val, n_test)` for `n` windows; test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train_frac * n as f64).round() as usize;
        let val = ((self.val_frac * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partitions {
    pub train: Vec<SeriesWindow>,
    pub val: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
}

impl Partitions {
    pub fn labeled_train(&self) -> Vec<SeriesWindow> {
        self.train.iter().filter(|w| w.labeled).cloned().collect()
    }

    pub fn manifest(&self, role: DomainRole) -> SplitManifest {
        SplitManifest {
            role,
            train: self.train.iter().map(|w| w.start).collect(),
            val: self.val.iter().map(|w| w.start).collect(),
            test: self.test.iter().map(|w| w.start).collect(),
            labeled: self.train.iter().map(|w| w.labeled).collect(),
        }
    }
}

/// Window start indices and labels, enough to rebuild a split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub role: DomainRole,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub labeled: Vec<bool>,
}

/// Number of leading rows covered by the first `n_train` windows.
pub fn train_rows(n_train: usize, t_in: usize, horizon: usize, stride: usize) -> usize {
    if n_train == 0 {
        0
    } else {
        (n_train - 1) * stride + t_in + horizon
    }
}

/// Temporal train/val/test split. Source train windows are all labeled; in
/// the target train partition exactly `round(frac · N)` windows (at least one)
/// are labeled, chosen under `seed`.
pub fn split_semi_supervised(
    windows: Vec<SeriesWindow>,
    spec: &SplitSpec,
    role: DomainRole,
    seed: u64,
) -> Result<Partitions> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.counts(windows.len());
    if n_train == 0 {
        return Err(GcaError::EmptyPartition("train"));
    }
    if n_val == 0 {
        return Err(GcaError::EmptyPartition("val"));
    }
    if n_test == 0 {
        return Err(GcaError::EmptyPartition("test"));
    }
    let mut it = windows.into_iter();
    let mut train: Vec<SeriesWindow> = it.by_ref().take(n_train).collect();
    let val: Vec<SeriesWindow> = it.by_ref().take(n_val).collect();
    let test: Vec<SeriesWindow> = it.collect();

    match role {
        DomainRole::Source => train.iter_mut().for_each(|w| w.labeled = true),
        DomainRole::Target => {
            let n_lab =
                ((spec.target_label_frac * n_train as f64).round() as usize).clamp(1, n_train);
            let mut order: Vec<usize> = (0..n_train).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            train.iter_mut().for_each(|w| w.labeled = false);
            for &i in &order[..n_lab] {
                train[i].labeled = true;
            }
        }
    }
    Ok(Partitions { train, val, test })
}

/// CSV layout expectations for [`ingest_csv`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Columns to keep, by header name. `None` keeps all.
    pub columns: Option<Vec<String>>,
    pub domain_id: Option<String>,
}

/// Reads a numeric CSV with a header row. Missing or non-numeric cells are
/// rejected with their row/column location.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| GcaError::io(path, std::io::Error::other(e)))?;
    let parse_err = |row: usize, column: usize, message: String| GcaError::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(0, 0, e.to_string()))?
        .clone();
    let keep: Vec<usize> = match &schema.columns {
        None => (0..headers.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| parse_err(0, 0, format!("column `{n}` not in header")))
            })
            .collect::<Result<_>>()?,
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(
                row,
                rec.len(),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        for &c in &keep {
            let cell = rec[c].trim();
            let x: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, c + 1, format!("not a number: `{cell}`")))?;
            if !x.is_finite() {
                return Err(parse_err(row, c + 1, format!("non-finite value `{cell}`")));
            }
            data.push(x);
        }
        rows += 1;
    }
    let domain_id = schema.domain_id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "domain".into())
    });
    Ok(RawSeries {
        values: Tensor::from_vec(rows, keep.len(), data),
        domain_id,
        ground_truth: None,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every domain of a simulated dataset directory, with ground truth.
pub fn load_dataset(dir: &Path) -> Result<Vec<RawSeries>> {
    let index: DatasetIndex = read_json(&dir.join("dataset.json"))?;
    index
        .domains
        .iter()
        .map(|id| load_domain(dir, id))
        .collect()
}

pub fn load_domain(dir: &Path, id: &str) -> Result<RawSeries> {
    let manifest: DomainManifest = read_json(&dir.join(format!("{id}.manifest.json")))?;
    let schema = CsvSchema {
        columns: None,
        domain_id: Some(manifest.domain_id.clone()),
    };
    let mut series = ingest_csv(&dir.join(&manifest.csv_file), &schema)?;
    let adjacency: Vec<Vec<Vec<u8>>> = read_json(&dir.join(&manifest.structure_file))?;
    let weights: Vec<Vec<Vec<f64>>> = read_json(&dir.join(&manifest.weights_file))?;
    let index: DatasetIndex = read_json(&dir.join("dataset.json"))?;
    series.ground_truth = Some(GroundTruthStructure {
        max_lag: manifest.k,
        dims: manifest.dims,
        edge_density: index.edge_density,
        adjacency,
        weights,
    });
    Ok(series)
}

/// Stacked windows: `x` is `B × (t_in·D)` (time-major), `y` is `B × (τ·D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub t_in: usize,
    pub horizon: usize,
    pub dims: usize,
}

impl Batch {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a SeriesWindow>) -> Self {
        let windows: Vec<&SeriesWindow> = windows.into_iter().collect();
        assert!(!windows.is_empty(), "empty batch");
        let t_in = windows[0].x.rows();
        let horizon = windows[0].y.rows();
        let dims = windows[0].x.cols();
        let mut x = Vec::with_capacity(windows.len() * t_in * dims);
        let mut y = Vec::with_capacity(windows.len() * horizon * dims);
        for w in &windows {
            x.extend_from_slice(w.x.data());
            y.extend_from_slice(w.y.data());
        }
        let b = windows.len();
        Batch {
            x: Tensor::from_vec(b, t_in * dims, x),
            y: Tensor::from_vec(b, horizon * dims, y),
            t_in,
            horizon,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// `z_{t-lag}` for every window, `B × D` (`lag` ≥ 1).
    pub fn lagged(&self, lag: usize) -> Tensor {
        let step = self.t_in - lag;
        self.x.slice_cols(step * self.dims, (step + 1) * self.dims)
    }

    /// Future row `h` (0-based), `B × D`.
    pub fn future(&self, h: usize) -> Tensor {
        self.y.slice_cols(h * self.dims, (h + 1) * self.dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: Vec<Vec<f64>>) -> RawSeries {
        RawSeries {
            values: Tensor::from_rows(&rows),
            domain_id: "d".into(),
            ground_truth: None,
        }
    }

    fn ramp(t: usize, d: usize) -> RawSeries {
        series(
            (0..t)
                .map(|r| (0..d).map(|c| (r * d + c) as f64).collect())
                .collect(),
        )
    }

    #[test]
    fn constant_column_rejected() {
        let s = series(vec![vec![1.0, 0.0], vec![1.0, 2.0], vec![1.0, 3.0]]);
        assert!(matches!(
            zscore_fit_apply(&s, 3),
            Err(GcaError::ConstantColumn { column: 0, .. })
        ));
    }

    #[test]
    fn two_point_column_maps_to_plus_minus_one() {
        let s = series(vec![vec![0.0], vec![2.0]]);
        let (n, stats) = zscore_fit_apply(&s, 2).unwrap();
        assert_eq!(n.values.data(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn normalized_training_rows_are_standard() {
        let s = series(
            (0..50)
                .map(|i| vec![(i as f64 * 0.37).sin() * 4.0 + 3.0, i as f64])
                .collect(),
        );
        let (n, _) = zscore_fit_apply(&s, 30).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..30).map(|r| n.values.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / 30.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 30.0;
            assert!(m.abs() < 1e-6);
            assert!((v.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(10, 2), 5, 1, 1).unwrap().len(), 5);
        assert!(matches!(
            make_windows(&ramp(6, 2), 5, 2, 1),
            Err(GcaError::TooShort { .. })
        ));
        let disjoint = make_windows(&ramp(20, 1), 3, 2, 5).unwrap();
        assert_eq!(disjoint.len(), 4);
        for pair in disjoint.windows(2) {
            assert_eq!(pair[1].start - pair[0].start, 5);
        }
    }

    #[test]
    fn windows_reassemble_source_slices() {
        let s = ramp(30, 3);
        for w in make_windows(&s, 4, 2, 3).unwrap() {
            let joined = Tensor::concat_rows(&[&w.x, &w.y]);
            assert_eq!(joined, s.values.slice_rows(w.start, w.start + 6));
        }
    }

    #[test]
    fn split_labels_exact_fraction() {
        let windows = make_windows(&ramp(200, 1), 2, 1, 1).unwrap();
        let n = windows.len();
        let spec = SplitSpec::default();
        let p = split_semi_supervised(windows.clone(), &spec, DomainRole::Target, 3).unwrap();
        let (n_train, n_val, n_test) = spec.counts(n);
        assert_eq!(
            (p.train.len(), p.val.len(), p.test.len()),
            (n_train, n_val, n_test)
        );
        let labeled = p.train.iter().filter(|w| w.labeled).count();
        assert_eq!(labeled, (0.05 * n_train as f64).round() as usize);
        let again = split_semi_supervised(windows.clone(), &spec, DomainRole::Target, 3).unwrap();
        assert_eq!(
            p.manifest(DomainRole::Target),
            again.manifest(DomainRole::Target)
        );

        let all = SplitSpec {
            target_label_frac: 1.0,
            ..spec
        };
        let p = split_semi_supervised(windows.clone(), &all, DomainRole::Target, 3).unwrap();
        assert!(p.train.iter().all(|w| w.labeled));
        let src = split_semi_supervised(windows, &spec, DomainRole::Source, 3).unwrap();
        assert!(src.train.iter().all(|w| w.labeled));
    }

    #[test]
    fn hundred_windows_five_percent_is_five() {
        let windows = make_windows(&ramp(150, 1), 1, 1, 1).unwrap();
        let spec = SplitSpec {
            train_frac: 100.0 / 149.0,
            val_frac: 24.0 / 149.0,
            test_frac: 25.0 / 149.0,
            target_label_frac: 0.05,
        };
        let p = split_semi_supervised(windows, &spec, DomainRole::Target, 0).unwrap();
        assert_eq!(p.train.len(), 100);
        assert_eq!(p.train.iter().filter(|w| w.labeled).count(), 5);
    }

    #[test]
    fn split_spec_validation() {
        let bad = SplitSpec {
            train_frac: 0.5,
            val_frac: 0.1,
            test_frac: 0.1,
            target_label_frac: 0.05,
        };
        assert!(bad.validate().is_err());
        assert!(SplitSpec::default().validate().is_ok());
    }

    #[test]
    fn batch_lag_indexing() {
        let s = ramp(10, 2);
        let w = make_windows(&s, 3, 1, 1).unwrap();
        let b = Batch::from_windows(&w[..2]);
        // window 0 covers rows 0..3; z_{t-1} is row 2
        assert_eq!(b.lagged(1).row(0), s.values.row(2));
        assert_eq!(b.lagged(3).row(1), s.values.row(1));
        assert_eq!(b.future(0).row(1), s.values.row(4));
    }

    #[test]
    fn csv_ingest_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        fs::write(&good, "v0,v1\n1.0,2.0\n3.5,-4\n").unwrap();
        let s = ingest_csv(&good, &CsvSchema::default()).unwrap();
        assert_eq!(s.values.shape(), (2, 2));
        assert_eq!(s.domain_id, "good");
        assert!(s.ground_truth.is_none());

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "v0,v1\n1.0,2.0\n3.5,NaN\n").unwrap();
        match ingest_csv(&bad, &CsvSchema::default()) {
            Err(GcaError::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = dir.path().join("text.csv");
        fs::write(&text, "v0\nabc\n").unwrap();
        assert!(matches!(
            ingest_csv(&text, &CsvSchema::default()),
            Err(GcaError::Parse {
                row: 2,
                column: 1,
                ..
            })
        ));
    }
}
