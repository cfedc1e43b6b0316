//! Depth, normal and edge evaluation metrics.

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maps::{BoolMap, DepthMap, EdgeMap, Grid};

/// Standard depth error statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthEvalConfig {
    /// Clamp both prediction and ground truth to at most this depth.
    pub cap: Option<f64>,
    /// Scale the prediction by median(gt)/median(pred) before evaluating.
    pub median_align: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn check_mask(mask: &BoolMap, dims: (usize, usize)) -> Result<usize> {
    if mask.dims() != dims {
        return Err(Error::Size(format!("mask {:?} does not match maps {:?}", mask.dims(), dims)));
    }
    let n = mask.data().iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Eval("evaluation mask has no valid pixels".into()));
    }
    Ok(n)
}

/// Depth metrics over the pixels selected by `mask`.
pub fn eval_depth(pred: &DepthMap, gt: &DepthMap, mask: &BoolMap, cfg: &DepthEvalConfig) -> Result<DepthMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::Size(format!("prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
    }
    let n = check_mask(mask, gt.dims())?;
    if let Some(c) = cfg.cap {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("depth cap must be positive, got {c}")));
        }
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask.data()[i]).collect();
    let scale = if cfg.median_align {
        let mut g: Vec<f64> = idx.iter().map(|&i| gt.data()[i]).collect();
        let mut p: Vec<f64> = idx.iter().map(|&i| pred.data()[i]).collect();
        median(&mut g) / median(&mut p)
    } else {
        1.0
    };
    let cap = cfg.cap.unwrap_or(f64::INFINITY);
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    for &i in &idx {
        let g = gt.data()[i].min(cap);
        let p = (pred.data()[i] * scale).min(cap);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        sq_log += (p.ln() - g.ln()).powi(2);
    }
    let n = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
    })
}

/// Per-metric mean over images.
pub fn mean_depth_metrics(all: &[DepthMetrics]) -> Result<DepthMetrics> {
    if all.is_empty() {
        return Err(Error::Eval("no depth metrics to average".into()));
    }
    let n = all.len() as f64;
    Ok(DepthMetrics {
        abs_rel: all.iter().map(|m| m.abs_rel).sum::<f64>() / n,
        sq_rel: all.iter().map(|m| m.sq_rel).sum::<f64>() / n,
        rmse: all.iter().map(|m| m.rmse).sum::<f64>() / n,
        rmse_log: all.iter().map(|m| m.rmse_log).sum::<f64>() / n,
    })
}

/// Angular error statistics in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub frac_under_11_25: f64,
    pub frac_under_22_5: f64,
    pub frac_under_30: f64,
}

/// Angles within this many degrees below a threshold are not counted as
/// under it, so exact threshold angles stay excluded despite round-off.
const ANGLE_GUARD_DEG: f64 = 1e-9;

/// Tolerance on |n| − 1 for normal inputs.
pub const NORMAL_UNIT_TOLERANCE: f64 = 1e-3;

/// Per-pixel angles in degrees between predicted and ground-truth normals.
pub fn normal_angles(pred: &Grid<Vector3<f64>>, gt: &Grid<Vector3<f64>>, mask: &BoolMap) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Size(format!("prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
    }
    check_mask(mask, gt.dims())?;
    let mut out = Vec::new();
    for i in 0..gt.len() {
        if !mask.data()[i] {
            continue;
        }
        let (p, g) = (pred.data()[i], gt.data()[i]);
        for (what, v) in [("prediction", p), ("ground truth", g)] {
            if !((v.norm() - 1.0).abs() <= NORMAL_UNIT_TOLERANCE) {
                return Err(Error::Validation(format!("{what} normal at index {i} has length {}", v.norm())));
            }
        }
        out.push(p.dot(&g).clamp(-1.0, 1.0).acos().to_degrees());
    }
    Ok(out)
}

impl NormalMetrics {
    /// Statistics of a set of angles in degrees.
    pub fn from_angles(angles: &[f64]) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::Eval("no normal angles to summarize".into()));
        }
        let n = angles.len() as f64;
        let frac = |t: f64| angles.iter().filter(|a| **a < t - ANGLE_GUARD_DEG).count() as f64 / n;
        let mut sorted = angles.to_vec();
        Ok(NormalMetrics {
            mean_deg: angles.iter().sum::<f64>() / n,
            median_deg: median(&mut sorted),
            frac_under_11_25: frac(11.25),
            frac_under_22_5: frac(22.5),
            frac_under_30: frac(30.0),
        })
    }
}

/// Normal metrics over the pixels selected by `mask`.
pub fn eval_normal(pred: &Grid<Vector3<f64>>, gt: &Grid<Vector3<f64>>, mask: &BoolMap) -> Result<NormalMetrics> {
    NormalMetrics::from_angles(&normal_angles(pred, gt, mask)?)
}

/// Number of binarization thresholds of the edge precision-recall curve.
pub const EDGE_THRESHOLD_COUNT: usize = 33;

/// Default matching radius as a fraction of the image diagonal.
pub const DEFAULT_MATCH_RADIUS_FRAC: f64 = 0.0075;

/// Thresholds evenly spaced over [0.01, 0.99].
pub fn edge_thresholds() -> Vec<f64> {
    let n = EDGE_THRESHOLD_COUNT;
    (0..n).map(|i| 0.01 + 0.98 * i as f64 / (n - 1) as f64).collect()
}

/// Zhang-Suen thinning to unit-width curves.
pub fn thin(mask: &BoolMap) -> BoolMap {
    let (w, h) = mask.dims();
    let mut m = mask.clone();
    let at = |m: &BoolMap, x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *m.get(x as usize, y as usize)
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !*m.get(x, y) {
                        continue;
                    }
                    let (xi, yi) = (x as isize, y as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&m, xi, yi - 1),
                        at(&m, xi + 1, yi - 1),
                        at(&m, xi + 1, yi),
                        at(&m, xi + 1, yi + 1),
                        at(&m, xi, yi + 1),
                        at(&m, xi - 1, yi + 1),
                        at(&m, xi - 1, yi),
                        at(&m, xi - 1, yi - 1),
                    ];
                    let b = p.iter().filter(|v| **v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if ok {
                        remove.push((x, y));
                    }
                }
            }
            for (x, y) in remove.iter().copied() {
                *m.get_mut(x, y) = false;
            }
            changed |= !remove.is_empty();
        }
        if !changed {
            return m;
        }
    }
}

/// Greedy one-to-one matching of predicted to ground-truth edge pixels.
///
/// Predicted pixels are visited in raster order and take the nearest
/// unmatched ground-truth pixel within `radius` (ties in raster order).
/// Returns the number of matched pairs.
pub fn match_edges(pred: &BoolMap, gt: &BoolMap, radius: f64) -> Result<usize> {
    if pred.dims() != gt.dims() {
        return Err(Error::Size(format!("prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("match radius must be non-negative, got {radius}")));
    }
    let (w, h) = gt.dims();
    let r = radius.floor() as isize;
    let r2 = radius * radius + 1e-9;
    let mut taken = Grid::filled(w, h, false);
    let mut pairs = 0;
    for y in 0..h {
        for x in 0..w {
            if !*pred.get(x, y) {
                continue;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (gx, gy) = (x as isize + dx, y as isize + dy);
                    if gx < 0 || gy < 0 || gx >= w as isize || gy >= h as isize {
                        continue;
                    }
                    let (gx, gy) = (gx as usize, gy as usize);
                    let d2 = (dx * dx + dy * dy) as f64;
                    if d2 > r2 || !*gt.get(gx, gy) || *taken.get(gx, gy) {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bx, by)) => d2 < bd || (d2 == bd && (gy, gx) < (by, bx)),
                    };
                    if better {
                        best = Some((d2, gx, gy));
                    }
                }
            }
            if let Some((_, gx, gy)) = best {
                *taken.get_mut(gx, gy) = true;
                pairs += 1;
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeEvalConfig {
    pub match_radius_frac: f64,
    /// Thin binarized predictions and ground truth before matching.
    pub thin: bool,
}

impl Default for EdgeEvalConfig {
    fn default() -> Self {
        EdgeEvalConfig {
            match_radius_frac: DEFAULT_MATCH_RADIUS_FRAC,
            thin: true,
        }
    }
}

/// Matching counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeCounts {
    pub matched: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl EdgeCounts {
    /// Precision, with 0/0 taken as 1.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    /// Recall; `None` when there is no ground truth.
    pub fn recall(&self) -> Option<f64> {
        (self.ground_truth > 0).then(|| self.matched as f64 / self.ground_truth as f64)
    }

    fn add(&mut self, o: &EdgeCounts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.ground_truth += o.ground_truth;
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Counts for every threshold of [`edge_thresholds`] on one image.
pub fn edge_counts(pred: &EdgeMap, gt: &BoolMap, cfg: &EdgeEvalConfig) -> Result<Vec<EdgeCounts>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Size(format!("prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
    }
    if !(cfg.match_radius_frac >= 0.0 && cfg.match_radius_frac.is_finite()) {
        return Err(Error::Config(format!("match radius fraction must be non-negative, got {}", cfg.match_radius_frac)));
    }
    let (w, h) = gt.dims();
    let radius = cfg.match_radius_frac * ((w * w + h * h) as f64).sqrt();
    let gt = if cfg.thin { thin(gt) } else { gt.clone() };
    let n_gt = gt.data().iter().filter(|v| **v).count();
    edge_thresholds()
        .into_iter()
        .map(|t| {
            let bin = pred.map(|v| *v >= t);
            let bin = if cfg.thin { thin(&bin) } else { bin };
            let matched = match_edges(&bin, &gt, radius)?;
            Ok(EdgeCounts {
                matched,
                predicted: bin.data().iter().filter(|v| **v).count(),
                ground_truth: n_gt,
            })
        })
        .collect()
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeMetrics {
    pub ods_f1: f64,
    pub ods_threshold: f64,
    pub ois_f1: f64,
    pub ap: f64,
    /// Raw curve on aggregate counts, one point per threshold.
    #[serde(skip)]
    pub pr_curve: Vec<PrPoint>,
}

impl EdgeMetrics {
    /// Curve as CSV with header `threshold,precision,recall`.
    pub fn pr_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pr_curve {
            w.serialize(p).map_err(|e| Error::Validation(format!("PR CSV: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("PR CSV: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
    }
}

/// Area under the monotone precision envelope, by trapezoids over recall.
/// The segment from recall 0 to the smallest recall uses that point's
/// precision.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    for i in (0..pts.len() - 1).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let mut area = pts[0].0 * pts[0].1;
    for win in pts.windows(2) {
        area += (win[1].0 - win[0].0) * 0.5 * (win[0].1 + win[1].1);
    }
    area.clamp(0.0, 1.0)
}

/// ODS, OIS and AP over a set of (prediction, ground truth) pairs.
///
/// Images without ground-truth edges are left out of every statistic; at
/// least one image must have some.
pub fn eval_edges(pairs: &[(&EdgeMap, &BoolMap)], cfg: &EdgeEvalConfig) -> Result<EdgeMetrics> {
    let thresholds = edge_thresholds();
    let mut total = vec![EdgeCounts::default(); thresholds.len()];
    let mut ois = Vec::new();
    for (pred, gt) in pairs {
        let counts = edge_counts(pred, gt, cfg)?;
        if counts[0].ground_truth == 0 {
            continue;
        }
        let best = counts
            .iter()
            .map(|c| f1(c.precision(), c.recall().expect("ground truth present")))
            .fold(0.0, f64::max);
        ois.push(best);
        for (t, c) in total.iter_mut().zip(&counts) {
            t.add(c);
        }
    }
    if ois.is_empty() {
        return Err(Error::Eval("no image has ground-truth edges".into()));
    }
    let pr_curve: Vec<PrPoint> = thresholds
        .iter()
        .zip(&total)
        .map(|(t, c)| PrPoint {
            threshold: *t,
            precision: c.precision(),
            recall: c.recall().expect("ground truth present"),
        })
        .collect();
    let (mut ods_f1, mut ods_threshold) = (0.0, thresholds[0]);
    for p in &pr_curve {
        let f = f1(p.precision, p.recall);
        if f > ods_f1 {
            ods_f1 = f;
            ods_threshold = p.threshold;
        }
    }
    Ok(EdgeMetrics {
        ods_f1,
        ods_threshold,
        ois_f1: ois.iter().sum::<f64>() / ois.len() as f64,
        ap: average_precision(&pr_curve),
        pr_curve,
    })
}

/// Edge metrics of one image.
pub fn eval_edge(pred: &EdgeMap, gt: &BoolMap, cfg: &EdgeEvalConfig) -> Result<EdgeMetrics> {
    eval_edges(&[(pred, gt)], cfg)
}
