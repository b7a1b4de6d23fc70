//! Evaluation: point extraction from heatmaps, greedy radius matching,
//! PPV/TPR/F1, suture-mask similarity, per-fold aggregation, and report /
//! overlay export.
//!
//! Matching follows the 6-pixel rule: candidate (prediction, ground-truth)
//! pairs with Euclidean distance strictly below the radius are matched
//! one-to-one in ascending distance order; leftovers are FP / FN.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{save_png, Landmark, LandmarkSet};
use crate::error::{Error, Result};

/// Outcome of matching one image's predictions against its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    /// False negatives (`fn` is reserved).
    pub fn_: usize,
    /// Matched (pred index, gt index, distance) triples.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// PPV / TPR / F1 with the raw counts they came from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ppv: f64,
    pub tpr: f64,
    pub f1: f64,
}

/// Cross-validation summary: per-fold metrics plus mean and population
/// standard deviation across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<MetricsEntry>,
    pub ppv_mean: f64,
    pub ppv_std: f64,
    pub tpr_mean: f64,
    pub tpr_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

/// Threshold + 8-connected components + intensity-weighted centers of mass.
pub fn extract_points(heatmap: &Array2<f64>, threshold: f64) -> LandmarkSet {
    let (h, w) = heatmap.dim();
    let mut visited = vec![false; h * w];
    let mut points = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if visited[sy * w + sx] || heatmap[(sy, sx)] < threshold {
                continue;
            }
            // flood one component
            let mut mass = 0.0;
            let mut mx = 0.0;
            let mut my = 0.0;
            visited[sy * w + sx] = true;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                let v = heatmap[(y, x)];
                mass += v;
                mx += v * x as f64;
                my += v * y as f64;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !visited[ny * w + nx] && heatmap[(ny, nx)] >= threshold {
                            visited[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if mass > 0.0 {
                points.push(Landmark::new(mx / mass, my / mass));
            }
        }
    }
    LandmarkSet::new(points)
}

/// Greedy one-to-one matching under a strict distance threshold.
pub fn match_points(pred: &LandmarkSet, gt: &LandmarkSet, radius: f64) -> MatchResult {
    assert!(radius > 0.0, "matching radius must be positive");
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.points.iter().enumerate() {
        for (j, q) in gt.points.iter().enumerate() {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
            if d < radius {
                cands.push((i, j, d));
            }
        }
    }
    // ascending distance; index tiebreak keeps the order deterministic
    cands.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (i, j, d) in cands {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j, d));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs,
    }
}

/// PPV = TP/(TP+FP), TPR = TP/(TP+FN), F1 = 2·PPV·TPR/(PPV+TPR);
/// every ratio with a zero denominator is defined as 0.
pub fn compute_metrics(m: &MatchResult) -> MetricsEntry {
    metrics_from_counts(m.tp, m.fp, m.fn_)
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> MetricsEntry {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let ppv = ratio(tp, tp + fp);
    let tpr = ratio(tp, tp + fn_);
    let f1 = f1_score(ppv, tpr);
    MetricsEntry {
        tp,
        fp,
        fn_,
        ppv,
        tpr,
        f1,
    }
}

/// Harmonic mean of precision and sensitivity (0 when both are 0).
pub fn f1_score(ppv: f64, tpr: f64) -> f64 {
    if ppv + tpr == 0.0 {
        0.0
    } else {
        2.0 * ppv * tpr / (ppv + tpr)
    }
}

/// Mean squared difference and smoothed Dice between two binary masks.
pub fn mask_similarity(a: &Array2<f64>, b: &Array2<f64>, s: f64) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    let inter: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let dice = (2.0 * inter + s) / (a.sum() + b.sum() + s);
    Ok((mse, dice))
}

/// Aggregate image-level counts already summed per fold: metrics per fold,
/// then mean and population std across folds.
pub fn aggregate_folds(per_fold: &[MetricsEntry]) -> Result<MetricsReport> {
    if per_fold.is_empty() {
        return Err(Error::Validation("aggregate_folds needs at least one fold".into()));
    }
    let mean_std = |vals: Vec<f64>| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (ppv_mean, ppv_std) = mean_std(per_fold.iter().map(|m| m.ppv).collect());
    let (tpr_mean, tpr_std) = mean_std(per_fold.iter().map(|m| m.tpr).collect());
    let (f1_mean, f1_std) = mean_std(per_fold.iter().map(|m| m.f1).collect());
    Ok(MetricsReport {
        per_fold: per_fold.to_vec(),
        ppv_mean,
        ppv_std,
        tpr_mean,
        tpr_std,
        f1_mean,
        f1_std,
    })
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

/// Per-image evaluation record in the report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub path: String,
    pub fold: usize,
    pub result: MatchResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub radius: f64,
    pub threshold: f64,
    pub per_image: Vec<ImageEval>,
    pub aggregate: MetricsReport,
}

impl EvalReport {
    /// Sum image counts within each fold, then aggregate across folds.
    pub fn from_images(radius: f64, threshold: f64, per_image: Vec<ImageEval>) -> Result<Self> {
        let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
        for img in &per_image {
            let e = counts.entry(img.fold).or_default();
            e.0 += img.result.tp;
            e.1 += img.result.fp;
            e.2 += img.result.fn_;
        }
        let per_fold: Vec<MetricsEntry> = counts
            .values()
            .map(|&(tp, fp, fn_)| metrics_from_counts(tp, fp, fn_))
            .collect();
        Ok(EvalReport {
            radius,
            threshold,
            per_image,
            aggregate: aggregate_folds(&per_fold)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// CSV mirroring the cross-validation table layout.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let a = &self.aggregate;
        let mut out = String::from("metric");
        for i in 0..a.per_fold.len() {
            out += &format!(",f{}", i + 1);
        }
        out += ",mean,std\n";
        let row = |name: &str, get: &dyn Fn(&MetricsEntry) -> f64, mean: f64, std: f64| {
            let mut line = name.to_string();
            for m in &a.per_fold {
                line += &format!(",{:.4}", get(m));
            }
            line += &format!(",{mean:.4},{std:.4}\n");
            line
        };
        out += &row("ppv", &|m| m.ppv, a.ppv_mean, a.ppv_std);
        out += &row("tpr", &|m| m.tpr, a.tpr_mean, a.tpr_std);
        out += &row("f1", &|m| m.f1, a.f1_mean, a.f1_std);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Overlay markers on an image: TP green, FP red, FN orange circles.
pub fn render_overlay(
    pixels: &Array3<f64>,
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    m: &MatchResult,
) -> Array3<f64> {
    let mut out = pixels.clone();
    let matched_pred: Vec<bool> = {
        let mut v = vec![false; pred.len()];
        for (i, _, _) in &m.pairs {
            v[*i] = true;
        }
        v
    };
    let matched_gt: Vec<bool> = {
        let mut v = vec![false; gt.len()];
        for (_, j, _) in &m.pairs {
            v[*j] = true;
        }
        v
    };
    let green = [0.0, 1.0, 0.0];
    let red = [1.0, 0.0, 0.0];
    let orange = [1.0, 0.65, 0.0];
    for (i, p) in pred.points.iter().enumerate() {
        draw_circle(&mut out, p.x, p.y, if matched_pred[i] { green } else { red });
    }
    for (j, q) in gt.points.iter().enumerate() {
        if !matched_gt[j] {
            draw_circle(&mut out, q.x, q.y, orange);
        }
    }
    out
}

fn draw_circle(pixels: &mut Array3<f64>, cx: f64, cy: f64, color: [f64; 3]) {
    let (h, w, _) = pixels.dim();
    let r = 3.5;
    let (x0, x1) = ((cx - r - 1.0).floor() as i64, (cx + r + 1.0).ceil() as i64);
    let (y0, y1) = ((cy - r - 1.0).floor() as i64, (cy + r + 1.0).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if (d - r).abs() <= 0.8 {
                for ch in 0..3 {
                    pixels[(y as usize, x as usize, ch)] = color[ch];
                }
            }
        }
    }
}

/// Save an overlay image next to the report.
pub fn save_overlay(
    path: &Path,
    pixels: &Array3<f64>,
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    m: &MatchResult,
) -> Result<()> {
    save_png(path, &render_overlay(pixels, pred, gt, m))
}

// ---------------------------------------------------------------------------
// published cross-validation tables (golden data for the metric algebra)
// ---------------------------------------------------------------------------

/// One row of the published cross-validation tables: per-fold PPV/TPR
/// percentages, per-fold F1, and the printed mean ± std columns.
pub struct GoldenRow {
    pub label: &'static str,
    pub ppv: [f64; 4],
    pub tpr: [f64; 4],
    pub f1: [f64; 4],
    pub ppv_mean_std: (f64, f64),
    pub tpr_mean_std: (f64, f64),
    pub f1_mean_std: (f64, f64),
}

/// All rows of the three cross-validation tables (real-data detection,
/// detection on fake data, fusion test-set results).
pub fn golden_rows() -> Vec<GoldenRow> {
    vec![
        GoldenRow {
            label: "t1.det_or.real",
            ppv: [75.13, 60.89, 60.28, 77.79],
            tpr: [43.34, 34.51, 53.84, 30.94],
            f1: [0.5497, 0.4405, 0.5688, 0.4427],
            ppv_mean_std: (68.52, 8.00),
            tpr_mean_std: (40.66, 8.85),
            f1_mean_std: (0.5004, 0.06),
        },
        GoldenRow {
            label: "t1.det_sim.real",
            ppv: [83.26, 83.87, 88.36, 76.21],
            tpr: [75.09, 69.49, 62.56, 64.59],
            f1: [0.7896, 0.7601, 0.7325, 0.6992],
            ppv_mean_std: (82.93, 4.35),
            tpr_mean_std: (67.93, 4.84),
            f1_mean_std: (0.7454, 0.03),
        },
        GoldenRow {
            label: "t2.baseline",
            ppv: [14.14, 14.51, 18.20, 8.26],
            tpr: [4.59, 4.39, 8.27, 1.65],
            f1: [0.0693, 0.0674, 0.1138, 0.0275],
            ppv_mean_std: (13.78, 3.56),
            tpr_mean_std: (4.73, 2.35),
            f1_mean_std: (0.0695, 0.03),
        },
        GoldenRow {
            label: "t2.var1_1_1",
            ppv: [76.02, 70.99, 79.95, 73.42],
            tpr: [42.71, 41.97, 46.10, 39.77],
            f1: [0.5469, 0.5275, 0.5848, 0.5160],
            ppv_mean_std: (75.10, 3.32),
            tpr_mean_std: (42.64, 2.28),
            f1_mean_std: (0.5438, 0.03),
        },
        GoldenRow {
            label: "t2.var1_1_05",
            ppv: [76.70, 63.23, 84.70, 70.30],
            tpr: [38.79, 39.24, 54.17, 34.89],
            f1: [0.5152, 0.4842, 0.6608, 0.4664],
            ppv_mean_std: (73.73, 7.92),
            tpr_mean_std: (41.77, 7.35),
            f1_mean_std: (0.5317, 0.08),
        },
        GoldenRow {
            label: "t2.var1_05_1",
            ppv: [69.39, 61.95, 83.39, 64.64],
            tpr: [30.87, 37.47, 49.67, 31.19],
            f1: [0.4273, 0.4670, 0.6226, 0.4208],
            ppv_mean_std: (69.84, 8.26),
            tpr_mean_std: (37.30, 7.61),
            f1_mean_std: (0.4844, 0.08),
        },
        GoldenRow {
            label: "t2.var2_1_0",
            ppv: [77.39, 63.29, 77.47, 70.69],
            tpr: [39.02, 33.80, 51.73, 44.10],
            f1: [0.5188, 0.4407, 0.6203, 0.5432],
            ppv_mean_std: (72.21, 5.84),
            tpr_mean_std: (42.16, 6.62),
            f1_mean_std: (0.5308, 0.06),
        },
        GoldenRow {
            label: "t2.contrastive_baseline",
            ppv: [9.20, 15.30, 36.60, 5.94],
            tpr: [2.01, 2.28, 2.34, 0.56],
            f1: [0.0330, 0.0397, 0.0440, 0.0102],
            ppv_mean_std: (16.76, 11.94),
            tpr_mean_std: (1.80, 0.73),
            f1_mean_std: (0.0317, 0.01),
        },
        GoldenRow {
            label: "t3.real_only",
            ppv: [67.83, 78.65, 78.09, 81.79],
            tpr: [34.12, 30.64, 29.37, 25.38],
            f1: [0.4540, 0.4410, 0.4268, 0.3874],
            ppv_mean_std: (76.59, 5.25),
            tpr_mean_std: (29.88, 3.13),
            f1_mean_std: (0.4273, 0.02),
        },
        GoldenRow {
            label: "t3.fused_baseline",
            ppv: [70.62, 74.59, 67.36, 69.91],
            tpr: [21.07, 37.33, 31.47, 29.63],
            f1: [0.3246, 0.4976, 0.4290, 0.4162],
            ppv_mean_std: (70.62, 2.59),
            tpr_mean_std: (29.88, 5.82),
            f1_mean_std: (0.4169, 0.06),
        },
        GoldenRow {
            label: "t3.fused_var1",
            ppv: [83.16, 77.33, 76.82, 75.62],
            tpr: [29.83, 33.71, 37.87, 37.37],
            f1: [0.4391, 0.4696, 0.5073, 0.5002],
            ppv_mean_std: (78.23, 2.91),
            tpr_mean_std: (34.70, 3.24),
            f1_mean_std: (0.4791, 0.03),
        },
        GoldenRow {
            label: "t3.fused_var2",
            ppv: [68.46, 70.76, 72.88, 70.96],
            tpr: [37.27, 38.80, 35.52, 36.27],
            f1: [0.4827, 0.5012, 0.4776, 0.4800],
            ppv_mean_std: (70.77, 1.57),
            tpr_mean_std: (36.97, 1.23),
            f1_mean_std: (0.4854, 0.01),
        },
    ]
}

/// Exhaustive matching oracle: maximize the number of matched pairs, then
/// minimize the total distance. Exponential; intended for small candidate
/// sets in tests.
pub fn brute_force_match(pred: &LandmarkSet, gt: &LandmarkSet, radius: f64) -> MatchResult {
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.points.iter().enumerate() {
        for (j, q) in gt.points.iter().enumerate() {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
            if d < radius {
                cands.push((i, j, d));
            }
        }
    }
    let mut best: (usize, f64, Vec<(usize, usize, f64)>) = (0, f64::INFINITY, Vec::new());
    let mut chosen = Vec::new();
    fn rec(
        idx: usize,
        cands: &[(usize, usize, f64)],
        pred_used: &mut Vec<bool>,
        gt_used: &mut Vec<bool>,
        chosen: &mut Vec<(usize, usize, f64)>,
        dist: f64,
        best: &mut (usize, f64, Vec<(usize, usize, f64)>),
    ) {
        if idx == cands.len() {
            let n = chosen.len();
            if n > best.0 || (n == best.0 && dist < best.1) {
                *best = (n, dist, chosen.clone());
            }
            return;
        }
        // bound: even taking every remaining candidate cannot beat best
        if chosen.len() + (cands.len() - idx) < best.0 {
            return;
        }
        let (i, j, d) = cands[idx];
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            chosen.push((i, j, d));
            rec(idx + 1, cands, pred_used, gt_used, chosen, dist + d, best);
            chosen.pop();
            pred_used[i] = false;
            gt_used[j] = false;
        }
        rec(idx + 1, cands, pred_used, gt_used, chosen, dist, best);
    }
    rec(
        0,
        &cands,
        &mut vec![false; pred.len()],
        &mut vec![false; gt.len()],
        &mut chosen,
        0.0,
        &mut best,
    );
    let tp = best.0;
    MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs: best.2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extract_empty_when_all_below_threshold() {
        let hm = Array2::from_elem((16, 16), 0.2);
        assert!(extract_points(&hm, 0.5).is_empty());
    }

    #[test]
    fn extract_symmetric_blob_center() {
        let mut hm = Array2::zeros((64, 64));
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let v = if dx == 0 && dy == 0 { 1.0 } else { 0.6 };
                hm[((30 + dy) as usize, (20 + dx) as usize)] = v;
            }
        }
        let pts = extract_points(&hm, 0.5);
        assert_eq!(pts.len(), 1);
        assert!((pts.points[0].x - 20.0).abs() < 1e-12);
        assert!((pts.points[0].y - 30.0).abs() < 1e-12);
    }

    #[test]
    fn extract_separates_two_blobs() {
        let mut hm = Array2::zeros((32, 32));
        hm[(5, 5)] = 1.0;
        hm[(5, 6)] = 0.9;
        // zero gap at (5,7): columns 5-6 and 8-9 are disjoint even 8-connected
        hm[(5, 9)] = 0.8;
        hm[(5, 10)] = 1.0;
        let pts = extract_points(&hm, 0.5);
        assert_eq!(pts.len(), 2);
    }

    #[test]
    fn match_exact_and_pythagorean() {
        let gt = LandmarkSet::from_xy(&[(10.0, 10.0), (40.0, 40.0)]);
        let m = match_points(&gt, &gt, 6.0);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        // 3-4-5 triangle: distance exactly 5 < 6
        let gt = LandmarkSet::from_xy(&[(0.0, 0.0)]);
        let pred = LandmarkSet::from_xy(&[(3.0, 4.0)]);
        let m = match_points(&pred, &gt, 6.0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert!((m.pairs[0].2 - 5.0).abs() < 1e-12);
        // strictly-less rule: distance exactly 6 does not match
        let pred = LandmarkSet::from_xy(&[(6.0, 0.0)]);
        let m = match_points(&pred, &gt, 6.0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn closest_candidate_wins_rest_are_fp() {
        let gt = LandmarkSet::from_xy(&[(0.0, 0.0)]);
        let pred = LandmarkSet::from_xy(&[(0.0, 1.0), (3.0, 4.0)]);
        let m = match_points(&pred, &gt, 6.0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pairs[0].0, 0, "the closer prediction is assigned");
    }

    #[test]
    fn metrics_arithmetic() {
        let m = metrics_from_counts(2, 1, 1);
        assert!((m.ppv - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.tpr - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        // published fold: PPV 75.13, TPR 43.34 -> F1 0.5497
        let f1 = f1_score(0.7513, 0.4334);
        assert!((f1 - 0.5497).abs() < 1e-4);
        // zero-count guards
        let z = metrics_from_counts(0, 0, 0);
        assert_eq!((z.ppv, z.tpr, z.f1), (0.0, 0.0, 0.0));
        let z = metrics_from_counts(0, 3, 2);
        assert_eq!((z.ppv, z.tpr, z.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn golden_tables_reproduce_printed_f1() {
        for row in golden_rows() {
            let mut fold_f1 = Vec::new();
            for i in 0..4 {
                let f1 = f1_score(row.ppv[i] / 100.0, row.tpr[i] / 100.0);
                assert!(
                    (f1 - row.f1[i]).abs() < 1e-4,
                    "{} fold {}: {f1} vs printed {}",
                    row.label,
                    i + 1,
                    row.f1[i]
                );
                fold_f1.push(f1);
            }
            // mean F1 column comes from per-fold aggregation
            let mean = fold_f1.iter().sum::<f64>() / 4.0;
            assert!(
                (mean - row.f1_mean_std.0).abs() < 1e-4,
                "{}: mean {mean} vs printed {}",
                row.label,
                row.f1_mean_std.0
            );
        }
    }

    #[test]
    fn golden_tables_mean_std_columns() {
        for row in golden_rows() {
            let entries: Vec<MetricsEntry> = (0..4)
                .map(|i| MetricsEntry {
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    ppv: row.ppv[i],
                    tpr: row.tpr[i],
                    f1: row.f1[i],
                })
                .collect();
            let agg = aggregate_folds(&entries).unwrap();
            // printed columns carry 2 decimals; the published sigma was
            // computed from unrounded fold values, so re-deriving it from
            // the rounded cells can drift by up to ~0.01
            let mean_tol = 0.005 + 1e-9;
            let std_tol = 0.011;
            assert!((agg.ppv_mean - row.ppv_mean_std.0).abs() <= mean_tol, "{}", row.label);
            assert!((agg.ppv_std - row.ppv_mean_std.1).abs() <= std_tol, "{}", row.label);
            assert!((agg.tpr_mean - row.tpr_mean_std.0).abs() <= mean_tol, "{}", row.label);
            assert!((agg.tpr_std - row.tpr_mean_std.1).abs() <= std_tol, "{}", row.label);
            assert!((agg.f1_mean - row.f1_mean_std.0).abs() < 1e-4, "{}", row.label);
            assert!((agg.f1_std - row.f1_mean_std.1).abs() <= std_tol, "{}", row.label);
        }
    }

    #[test]
    fn mask_similarity_cases() {
        let mut a = Array2::zeros((8, 8));
        a[(2, 2)] = 1.0;
        a[(2, 3)] = 1.0;
        let (mse, dice) = mask_similarity(&a, &a, 1.0).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(dice, 1.0);
        // disjoint nonempty masks with s -> 0 drive dice -> 0
        let mut b = Array2::zeros((8, 8));
        b[(5, 5)] = 1.0;
        let (_, dice) = mask_similarity(&a, &b, 1e-12).unwrap();
        assert!(dice < 1e-10);
        let c = Array2::zeros((4, 4));
        assert!(mask_similarity(&a, &c, 1.0).is_err());
    }

    #[test]
    fn aggregate_identical_folds_zero_std() {
        let e = metrics_from_counts(3, 1, 2);
        let rep = aggregate_folds(&[e, e, e]).unwrap();
        assert_eq!(rep.f1_std, 0.0);
        assert_eq!(rep.f1_mean, e.f1);
        let single = aggregate_folds(&[e]).unwrap();
        assert_eq!(single.f1_mean, e.f1);
        assert_eq!(single.f1_std, 0.0);
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn radius_monotonicity() {
        let gt = LandmarkSet::from_xy(&[(10.0, 10.0), (20.0, 20.0), (30.0, 10.0)]);
        let pred = LandmarkSet::from_xy(&[(12.0, 10.0), (26.0, 20.0), (35.0, 14.0)]);
        let mut prev = 0;
        for r in [1.0, 3.0, 6.0, 9.0, 14.0] {
            let m = match_points(&pred, &gt, r);
            assert!(m.tp >= prev, "tp must not decrease with radius");
            prev = m.tp;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn count_identities_hold(
            pred in proptest::collection::vec((0.0..128.0f64, 0.0..128.0f64), 0..20),
            gt in proptest::collection::vec((0.0..128.0f64, 0.0..128.0f64), 0..20),
        ) {
            let pred = LandmarkSet::from_xy(&pred);
            let gt = LandmarkSet::from_xy(&gt);
            let m = match_points(&pred, &gt, 6.0);
            prop_assert_eq!(m.tp + m.fp, pred.len());
            prop_assert_eq!(m.tp + m.fn_, gt.len());
            for (_, _, d) in &m.pairs {
                prop_assert!(*d < 6.0);
            }
        }
    }

    #[test]
    fn greedy_equals_brute_force_on_unambiguous_instances() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut tested = 0;
        for _ in 0..200 {
            let np = rng.gen_range(0..12);
            let ng = rng.gen_range(0..12);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
                LandmarkSet::from_xy(
                    &(0..n)
                        .map(|_| (rng.gen::<f64>() * 128.0, rng.gen::<f64>() * 128.0))
                        .collect::<Vec<_>>(),
                )
            };
            let pred = mk(&mut rng, np);
            let gt = mk(&mut rng, ng);
            // unambiguous: no point participates in two candidate pairs
            let mut pred_deg = vec![0; np];
            let mut gt_deg = vec![0; ng];
            for (i, p) in pred.points.iter().enumerate() {
                for (j, q) in gt.points.iter().enumerate() {
                    if ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() < 6.0 {
                        pred_deg[i] += 1;
                        gt_deg[j] += 1;
                    }
                }
            }
            if pred_deg.iter().any(|&d| d > 1) || gt_deg.iter().any(|&d| d > 1) {
                continue;
            }
            tested += 1;
            let g = match_points(&pred, &gt, 6.0);
            let b = brute_force_match(&pred, &gt, 6.0);
            assert_eq!(g.tp, b.tp);
            let total_g: f64 = g.pairs.iter().map(|p| p.2).sum();
            let total_b: f64 = b.pairs.iter().map(|p| p.2).sum();
            assert!((total_g - total_b).abs() < 1e-12);
        }
        assert!(tested > 50, "need enough unambiguous instances, got {tested}");
    }

    #[test]
    fn report_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            ImageEval {
                path: "a.png".into(),
                fold: 0,
                result: MatchResult { tp: 2, fp: 1, fn_: 0, pairs: vec![] },
            },
            ImageEval {
                path: "b.png".into(),
                fold: 1,
                result: MatchResult { tp: 1, fp: 0, fn_: 2, pairs: vec![] },
            },
        ];
        let rep = EvalReport::from_images(6.0, 0.5, imgs).unwrap();
        let p = dir.path().join("report.json");
        rep.save(&p).unwrap();
        let back = EvalReport::load(&p).unwrap();
        assert_eq!(back.per_image.len(), 2);
        assert_eq!(back.aggregate.per_fold.len(), 2);
        rep.save_csv(&dir.path().join("report.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("metric,f1,f2,mean,std\n") || csv.contains("ppv"));
    }
}
