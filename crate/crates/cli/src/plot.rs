//! PNG figures from a run ledger: metric curves, structure heatmaps and
//! loss-component curves. No text rendering; panels are laid out in a
//! fixed order documented in the README.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use gca_core::ledger::RunLedger;
use gca_core::{GcaError, LossBreakdown, Result};

pub const CELL: u32 = 16;
pub const GAP: u32 = 8;
const PANEL_W: u32 = 320;
const PANEL_H: u32 = 200;
const MARGIN: u32 = 12;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const RED: Rgb<u8> = Rgb([214, 39, 40]);
const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
const GREY: Rgb<u8> = Rgb([150, 150, 150]);

pub fn render_all(run: &RunLedger, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| GcaError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let figures = [
        ("curves", metric_curves(run)?),
        ("structures", structure_grid(run)?),
        ("losses", loss_curves(run)?),
    ];
    figures
        .into_iter()
        .map(|(name, img)| {
            let path = dir.join(format!("{prefix}{name}.png"));
            img.save(&path).map_err(|e| GcaError::Io {
                path: path.clone(),
                source: std::io::Error::other(e),
            })?;
            Ok(path)
        })
        .collect()
}

/// Left panel: source (blue) and target (red) AUPRC on [0, 1]. Right panel:
/// validation (black) and test (grey) RMSE.
pub fn metric_curves(run: &RunLedger) -> Result<RgbImage> {
    if run.epochs.is_empty() {
        return Err(GcaError::MissingField("epochs".into()));
    }
    let test = run
        .epochs
        .iter()
        .map(|e| {
            e.test_rmse
                .ok_or_else(|| GcaError::MissingField(format!("epochs[{}].test_rmse", e.epoch)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let val: Vec<f64> = run.epochs.iter().map(|e| e.val_rmse).collect();
    let auprc_s: Option<Vec<f64>> = run.epochs.iter().map(|e| e.auprc_source).collect();
    let auprc_t: Option<Vec<f64>> = run.epochs.iter().map(|e| e.auprc_target).collect();

    let mut img = RgbImage::from_pixel(2 * PANEL_W + 3 * GAP, PANEL_H + 2 * GAP, WHITE);
    let left = Panel::at(GAP, GAP, PANEL_W, PANEL_H);
    left.frame(&mut img);
    for (series, color) in [(auprc_s, BLUE), (auprc_t, RED)] {
        if let Some(ys) = series {
            left.line(&mut img, &ys, (0.0, 1.0), color);
        }
    }
    let right = Panel::at(2 * GAP + PANEL_W, GAP, PANEL_W, PANEL_H);
    right.frame(&mut img);
    let range = span(val.iter().chain(&test));
    right.line(&mut img, &val, range, BLACK);
    right.line(&mut img, &test, range, GREY);
    Ok(img)
}

/// One row per lag; columns are source estimate, target estimate and the
/// target ground truth. Each `D × D` block uses `CELL`-pixel cells.
pub fn structure_grid(run: &RunLedger) -> Result<RgbImage> {
    let s = &run.structures;
    let missing = |f: &str| GcaError::MissingField(format!("structures.{f}"));
    let source = s.source.as_ref().ok_or_else(|| missing("source"))?;
    let target = s.target.as_ref().ok_or_else(|| missing("target"))?;
    let truth = s
        .truth_target
        .as_ref()
        .ok_or_else(|| missing("truth_target"))?;
    let k = source.len();
    let d = source.first().map_or(0, |m| m.len());
    if k == 0 || d == 0 {
        return Err(missing("source"));
    }
    if target.len() != k || truth.len() != k {
        return Err(GcaError::InvalidArgument(
            "structures disagree on the number of lags".into(),
        ));
    }
    let block = d as u32 * CELL;
    let mut img = RgbImage::from_pixel(
        3 * block + 4 * GAP,
        k as u32 * block + (k as u32 + 1) * GAP,
        WHITE,
    );
    for lag in 0..k {
        let y0 = GAP + lag as u32 * (block + GAP);
        let truth_f: Vec<Vec<f64>> = truth[lag]
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect();
        for (col, m) in [&source[lag], &target[lag], &truth_f]
            .into_iter()
            .enumerate()
        {
            if m.len() != d || m.iter().any(|r| r.len() != d) {
                return Err(GcaError::InvalidArgument(format!(
                    "structure block at lag {} is not {d}x{d}",
                    lag + 1
                )));
            }
            let x0 = GAP + col as u32 * (block + GAP);
            for (u, row) in m.iter().enumerate() {
                for (v, &p) in row.iter().enumerate() {
                    let c = heat(p);
                    for dy in 0..CELL {
                        for dx in 0..CELL {
                            img.put_pixel(x0 + v as u32 * CELL + dx, y0 + u as u32 * CELL + dy, c);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// A 3 × 3 grid of per-step curves, each on its own range: reconstruction
/// (source, target), KL (source, target), discrepancy, sparsity (source,
/// target), strengthen, total.
pub fn loss_curves(run: &RunLedger) -> Result<RgbImage> {
    if run.steps.is_empty() {
        return Err(GcaError::MissingField("steps".into()));
    }
    let pick: [fn(&LossBreakdown) -> f64; 9] = [
        |l| l.recon_src,
        |l| l.recon_tgt,
        |l| l.kl_src,
        |l| l.kl_tgt,
        |l| l.disc,
        |l| l.sparsity_src,
        |l| l.sparsity_tgt,
        |l| l.strengthen,
        |l| l.total,
    ];
    let (w, h) = (PANEL_W / 2 + 40, PANEL_H / 2 + 20);
    let mut img = RgbImage::from_pixel(3 * w + 4 * GAP, 3 * h + 4 * GAP, WHITE);
    for (i, f) in pick.iter().enumerate() {
        let ys: Vec<f64> = run.steps.iter().map(|s| f(&s.loss)).collect();
        let panel = Panel::at(
            GAP + (i as u32 % 3) * (w + GAP),
            GAP + (i as u32 / 3) * (h + GAP),
            w,
            h,
        );
        panel.frame(&mut img);
        panel.line(&mut img, &ys, span(&ys), if i == 8 { BLACK } else { BLUE });
    }
    Ok(img)
}

fn heat(p: f64) -> Rgb<u8> {
    let t = if p.is_finite() {
        p.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

fn span<'a>(ys: impl IntoIterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = ys
        .into_iter()
        .filter(|y| y.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Panel {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Panel {
    fn at(x: u32, y: u32, w: u32, h: u32) -> Self {
        Panel { x, y, w, h }
    }

    fn frame(&self, img: &mut RgbImage) {
        for i in 0..self.w {
            img.put_pixel(self.x + i, self.y + self.h - 1, AXIS);
        }
        for j in 0..self.h {
            img.put_pixel(self.x, self.y + j, AXIS);
        }
    }

    /// Polyline of `ys` spread evenly over the panel width.
    fn line(&self, img: &mut RgbImage, ys: &[f64], (lo, hi): (f64, f64), color: Rgb<u8>) {
        let inner_w = (self.w - 2 * MARGIN) as f64;
        let inner_h = (self.h - 2 * MARGIN) as f64;
        let point = |i: usize, y: f64| {
            let fx = if ys.len() > 1 {
                i as f64 / (ys.len() - 1) as f64
            } else {
                0.5
            };
            let fy = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
            (
                (self.x + MARGIN) as f64 + fx * inner_w,
                (self.y + self.h - MARGIN) as f64 - fy * inner_h,
            )
        };
        let pts: Vec<(f64, f64)> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| point(i, y))
            .collect();
        if let [only] = pts.as_slice() {
            dot(img, *only, color);
        }
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
            for s in 0..=n {
                let t = s as f64 / n as f64;
                dot(img, (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t), color);
            }
        }
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), color: Rgb<u8>) {
    let (x, y) = (x.round() as i64, y.round() as i64);
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}
