//! Direct optimization of per-pixel log-depth, per-pixel edge logits and
//! per-source pose twists against the multi-scale total loss.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::asap::{edge_grad_to_logits, loss_depth_asap, loss_edge_reg, loss_normal_asap};
use crate::depth_normal::{depth_to_normal, depth_to_normal_vjp, normal_to_depth, normal_to_depth_vjp, NeighborhoodWeights};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::io::write_atomic;
use crate::maps::{downsample_adjoint, sigmoid, DepthMap, Downsample, EdgeMap, Grid, ImageF, Pyramid};
use crate::view_synthesis::{photometric_loss, SourceView};

/// Optimized variables. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParams {
    pub log_depth: Grid<f64>,
    pub edge_logits: Grid<f64>,
    /// Target→source transforms, one per source view.
    pub twists: Vec<[f64; 6]>,
}

impl FreeParams {
    pub fn new(log_depth: Grid<f64>, edge_logits: Grid<f64>, twists: Vec<[f64; 6]>) -> Result<Self> {
        if log_depth.dims() != edge_logits.dims() {
            return Err(Error::Config(format!(
                "log-depth {:?} and edge logits {:?} differ in size",
                log_depth.dims(),
                edge_logits.dims()
            )));
        }
        let p = FreeParams {
            log_depth,
            edge_logits,
            twists,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.log_depth.data().iter().find(|v| !v.exp().is_finite() || !v.is_finite()) {
            return Err(Error::Domain(format!("log-depth {v} does not give a finite positive depth")));
        }
        if self.edge_logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("edge logits must be finite".into()));
        }
        if self.twists.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("pose twists must be finite".into()));
        }
        Ok(())
    }

    /// Parameters with log-depth from `depth`, uniform edge logits and the
    /// given poses.
    pub fn from_depth(depth: &DepthMap, edge_logit: f64, twists: Vec<[f64; 6]>) -> Result<Self> {
        FreeParams::new(depth.map(|d| d.ln()), Grid::filled(depth.width(), depth.height(), edge_logit), twists)
    }

    pub fn zeros_like(other: &FreeParams) -> Self {
        let (w, h) = other.log_depth.dims();
        FreeParams {
            log_depth: Grid::zeros(w, h),
            edge_logits: Grid::zeros(w, h),
            twists: vec![[0.0; 6]; other.twists.len()],
        }
    }

    pub fn depth(&self) -> Result<DepthMap> {
        DepthMap::new(self.log_depth.map(|v| v.exp()))
    }

    pub fn edges(&self) -> EdgeMap {
        EdgeMap::from_grid_unchecked(self.edge_logits.map(|v| sigmoid(*v)))
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.twists.iter().map(|t| PoseSE3::from_twist(*t)).collect()
    }

    /// Flattened as [log-depth, edge logits, twists].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.log_depth.data());
        v.extend_from_slice(self.edge_logits.data());
        v.extend(self.twists.iter().flatten());
        v
    }

    /// Inverse of [`FreeParams::to_vec`] with the shape of `self`.
    pub fn with_values(&self, values: &[f64]) -> FreeParams {
        assert_eq!(values.len(), self.len(), "flattened length mismatch");
        let n = self.log_depth.len();
        let (w, h) = self.log_depth.dims();
        FreeParams {
            log_depth: Grid::from_vec(w, h, values[..n].to_vec()).expect("shape"),
            edge_logits: Grid::from_vec(w, h, values[n..2 * n].to_vec()).expect("shape"),
            twists: values[2 * n..].chunks(6).map(|c| c.try_into().expect("6-vector")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        2 * self.log_depth.len() + 6 * self.twists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named index ranges of the flattened layout.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let n = self.log_depth.len();
        let mut b = vec![("log_depth".to_string(), 0..n), ("edge_logits".to_string(), n..2 * n)];
        if !self.twists.is_empty() {
            b.push(("twists".to_string(), 2 * n..self.len()));
        }
        b
    }
}

/// Term weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vs: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_e: f64,
    /// Re-estimate depth from normals before view synthesis.
    pub consistency: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vs: 1.0,
            lambda_d: 2.0,
            lambda_n: 0.01,
            lambda_e: 0.15,
            consistency: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_vs, self.lambda_d, self.lambda_n, self.lambda_e];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {l:?}")));
        }
        if l.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// How neighbor weights of the depth-normal layers are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NeighborhoodMode {
    #[default]
    Uniform,
    ImageGradient { alpha: f64 },
}

/// Everything that shapes the loss apart from the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub levels: usize,
    /// Clip negative depth-triplet responses.
    pub clip: bool,
    pub neighborhood: NeighborhoodMode,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            levels: 4,
            clip: true,
            neighborhood: NeighborhoodMode::Uniform,
        }
    }
}

/// Per-term loss values, each summed over pyramid levels and unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vs: f64,
    pub d: f64,
    pub n: f64,
    pub e: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.total, self.vs, self.d, self.n, self.e].iter().all(|v| v.is_finite())
    }

    fn describe(&self) -> String {
        format!(
            "total={} L_vs={} L_D={} L_N={} L_e={}",
            self.total, self.vs, self.d, self.n, self.e
        )
    }
}

/// Loss value with the gradient with respect to every free parameter.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub terms: LossBreakdown,
    pub grad: FreeParams,
}

struct Level {
    target: ImageF,
    sources: Vec<ImageF>,
    k: Intrinsics,
    weights: NeighborhoodWeights,
}

/// Target and source images with precomputed pyramids.
pub struct Problem {
    levels: Vec<Level>,
    settings: LossSettings,
    width: usize,
    height: usize,
}

impl Problem {
    pub fn new(target: &ImageF, sources: &[ImageF], k: &Intrinsics, settings: LossSettings) -> Result<Self> {
        settings.weights.validate()?;
        k.validate()?;
        if settings.levels == 0 {
            return Err(Error::Config("at least one pyramid level is required".into()));
        }
        if sources.is_empty() && settings.weights.lambda_vs > 0.0 {
            return Err(Error::Config("view synthesis needs at least one source image".into()));
        }
        let (w, h) = target.dims();
        for (i, s) in sources.iter().enumerate() {
            if s.dims() != (w, h) || s.channels() != target.channels() {
                return Err(Error::Config(format!("source {i} does not match the target image shape")));
            }
        }
        let (cw, ch) = (w >> (settings.levels - 1), h >> (settings.levels - 1));
        if cw < 3 || ch < 3 {
            return Err(Error::Config(format!(
                "{} levels on a {w}x{h} image leave a {cw}x{ch} coarsest level (need at least 3x3)",
                settings.levels
            )));
        }
        let tp = Pyramid::build(target.clone(), settings.levels)?;
        let sp = sources.iter().map(|s| Pyramid::build(s.clone(), settings.levels)).collect::<Result<Vec<_>>>()?;
        let mut levels = Vec::with_capacity(settings.levels);
        for l in 0..settings.levels {
            let t = tp.levels[l].clone();
            let weights = match settings.neighborhood {
                NeighborhoodMode::Uniform => NeighborhoodWeights::Uniform,
                NeighborhoodMode::ImageGradient { alpha } => NeighborhoodWeights::image_gradient(&t, alpha)?,
            };
            levels.push(Level {
                target: t,
                sources: sp.iter().map(|p| p.levels[l].clone()).collect(),
                k: k.at_level(l),
                weights,
            });
        }
        Ok(Problem {
            levels,
            settings,
            width: w,
            height: h,
        })
    }

    pub fn settings(&self) -> &LossSettings {
        &self.settings
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn n_sources(&self) -> usize {
        self.levels[0].sources.len()
    }

    fn check_params(&self, params: &FreeParams) -> Result<()> {
        if params.log_depth.dims() != (self.width, self.height) || params.edge_logits.dims() != (self.width, self.height) {
            return Err(Error::Config(format!(
                "parameter maps {:?} do not match images {:?}",
                params.log_depth.dims(),
                (self.width, self.height)
            )));
        }
        if params.twists.len() != self.n_sources() {
            return Err(Error::Config(format!(
                "{} pose twists for {} source images",
                params.twists.len(),
                self.n_sources()
            )));
        }
        Ok(())
    }

    /// Loss value only, skipping the backward pass.
    pub fn value(&self, params: &FreeParams) -> Result<LossBreakdown> {
        Ok(self.compute(params, false)?.0)
    }

    /// Total loss and gradient.
    ///
    /// Per level: depth and edge strength are box-downsampled from level 0,
    /// normals are estimated from depth, depth is optionally re-estimated from
    /// the normals before view synthesis, and all four terms are added with
    /// their weights. Gradients return to level 0 through the downsampling
    /// adjoints.
    pub fn evaluate(&self, params: &FreeParams) -> Result<LossEval> {
        let (terms, grad) = self.compute(params, true)?;
        Ok(LossEval {
            terms,
            grad: grad.expect("gradient requested"),
        })
    }

    fn compute(&self, params: &FreeParams, want_grad: bool) -> Result<(LossBreakdown, Option<FreeParams>)> {
        self.check_params(params)?;
        let wts = self.settings.weights;
        let depth0 = params.depth()?;
        let edges0 = params.edges();
        let poses = params.poses();
        let mut terms = LossBreakdown::default();
        let mut grad_twists = vec![[0.0; 6]; poses.len()];
        let mut depths = vec![depth0.clone()];
        let mut edges = vec![edges0.clone()];
        for l in 1..self.levels.len() {
            let d = harmonic_downsample(&depths[l - 1])?;
            let e = edges[l - 1].downsample()?;
            depths.push(d);
            edges.push(e);
        }
        let mut gd_levels = Vec::with_capacity(self.levels.len());
        let mut ge_levels = Vec::with_capacity(self.levels.len());
        for (l, lv) in self.levels.iter().enumerate() {
            let (d, e) = (&depths[l], &edges[l]);
            let (w, h) = d.dims();
            let mut gd = Grid::zeros(w, h);
            let mut ge = Grid::zeros(w, h);
            let mut gn = Grid::filled(w, h, Vector3::zeros());
            let need_normals = wts.lambda_n > 0.0 || (wts.consistency && wts.lambda_vs > 0.0);
            let normals = if need_normals {
                Some(depth_to_normal(d, &lv.k, &lv.weights)?.normals)
            } else {
                None
            };

            if wts.lambda_vs > 0.0 {
                let sources: Vec<SourceView<'_>> = lv
                    .sources
                    .iter()
                    .zip(&poses)
                    .map(|(image, pose)| SourceView { image, pose: *pose })
                    .collect();
                if wts.consistency {
                    let n = normals.as_ref().expect("computed above");
                    let refined = normal_to_depth(d, n, &lv.k, &lv.weights)?;
                    let vs = photometric_loss(&lv.target, &sources, &refined.depth, &lv.k)?;
                    terms.vs += vs.value;
                    if want_grad {
                        let g_out = vs.grad_depth.map(|g| g * wts.lambda_vs);
                        let (gdd, gnn) = normal_to_depth_vjp(d, n, &lv.k, &lv.weights, &g_out)?;
                        gd.add_scaled(&gdd, 1.0);
                        for (a, b) in gn.data_mut().iter_mut().zip(gnn.data()) {
                            *a += b;
                        }
                    }
                    add_twists(&mut grad_twists, &vs.grad_twist, wts.lambda_vs);
                } else {
                    let vs = photometric_loss(&lv.target, &sources, d, &lv.k)?;
                    terms.vs += vs.value;
                    gd.add_scaled(&vs.grad_depth, wts.lambda_vs);
                    add_twists(&mut grad_twists, &vs.grad_twist, wts.lambda_vs);
                }
            }
            if wts.lambda_d > 0.0 {
                let t = loss_depth_asap(d, e, &lv.k, self.settings.clip)?;
                terms.d += t.value;
                gd.add_scaled(&t.grad_depth, wts.lambda_d);
                ge.add_scaled(&t.grad_edge, wts.lambda_d);
            }
            if wts.lambda_n > 0.0 {
                let n = normals.as_ref().expect("computed above");
                let t = loss_normal_asap(n, e)?;
                terms.n += t.value;
                for (a, b) in gn.data_mut().iter_mut().zip(t.grad_normals.data()) {
                    *a += b * wts.lambda_n;
                }
                ge.add_scaled(&t.grad_edge, wts.lambda_n);
            }
            if wts.lambda_e > 0.0 {
                let t = loss_edge_reg(e);
                terms.e += t.value;
                ge.add_scaled(&t.grad_edge, wts.lambda_e);
            }
            if want_grad && gn.data().iter().any(|g| *g != Vector3::zeros()) {
                let g = depth_to_normal_vjp(d, &lv.k, &lv.weights, &gn)?;
                gd.add_scaled(&g, 1.0);
            }
            gd_levels.push(gd);
            ge_levels.push(ge);
        }
        terms.total = wts.lambda_vs * terms.vs + wts.lambda_d * terms.d + wts.lambda_n * terms.n + wts.lambda_e * terms.e;
        if !want_grad {
            return Ok((terms, None));
        }

        let gd0 = pull_depth_to_base(gd_levels, &depths);
        let ge0 = pull_to_base(ge_levels);
        let grad_log_depth = Grid::from_fn(self.width, self.height, |x, y| gd0.get(x, y) * depth0.get(x, y));
        let grad = FreeParams {
            log_depth: grad_log_depth,
            edge_logits: edge_grad_to_logits(&edges0, &ge0),
            twists: grad_twists,
        };
        Ok((terms, Some(grad)))
    }
}

fn add_twists(acc: &mut [[f64; 6]], g: &[[f64; 6]], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for i in 0..6 {
            a[i] += scale * b[i];
        }
    }
}

/// Sums per-level gradients at level 0 by repeated downsampling adjoints.
fn pull_to_base(mut levels: Vec<Grid<f64>>) -> Grid<f64> {
    let mut acc = levels.pop().expect("at least one level");
    while let Some(mut finer) = levels.pop() {
        let up = downsample_adjoint(&acc, finer.width(), finer.height());
        finer.add_scaled(&up, 1.0);
        acc = finer;
    }
    acc
}

/// Halves depth by box-averaging inverse depth, so planes stay exactly planar
/// at every level.
pub fn harmonic_downsample(depth: &DepthMap) -> Result<DepthMap> {
    let inv = depth.map(|d| 1.0 / d).downsample()?;
    DepthMap::new(inv.map(|v| 1.0 / v))
}

/// Adjoint of repeated [`harmonic_downsample`], summing per-level gradients
/// at level 0.
fn pull_depth_to_base(mut levels: Vec<Grid<f64>>, depths: &[DepthMap]) -> Grid<f64> {
    let mut acc = levels.pop().expect("at least one level");
    while let Some(mut finer) = levels.pop() {
        let l = levels.len() + 1;
        let (coarse, fine) = (&depths[l], &depths[l - 1]);
        let scaled = Grid::from_fn(acc.width(), acc.height(), |x, y| acc.get(x, y) * coarse.get(x, y).powi(2));
        let up = downsample_adjoint(&scaled, fine.width(), fine.height());
        for (i, g) in finer.data_mut().iter_mut().enumerate() {
            *g += up.data()[i] / fine.data()[i].powi(2);
        }
        acc = finer;
    }
    acc
}

/// Total loss and gradient for one parameter set.
pub fn total_loss(params: &FreeParams, problem: &Problem) -> Result<LossEval> {
    problem.evaluate(params)
}

/// Adam-style optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Step size for log-depth.
    pub step: f64,
    /// Step size for edge logits.
    pub edge_step: f64,
    /// Step size for pose twists; zero keeps the poses fixed.
    pub pose_step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Second-moment pooling for log-depth and pose twists.
    pub pooling: MomentPooling,
    /// Second-moment pooling for edge logits.
    pub edge_pooling: MomentPooling,
    /// Largest update of one coordinate in one iteration, in units of its
    /// step size.
    pub step_clamp: f64,
    /// Gradients are clipped per block at `clip_factor` times this quantile
    /// of their magnitudes; 1 disables clipping.
    pub clip_quantile: f64,
    pub clip_factor: f64,
    /// Step sizes decay geometrically to this fraction at the last iteration.
    pub final_step_fraction: f64,
    pub iterations: usize,
    /// Stop when the relative loss change over [`CONVERGENCE_WINDOW`]
    /// iterations falls below this.
    pub tolerance: f64,
    /// Seed of the initialization noise; the updates themselves are
    /// deterministic.
    pub seed: u64,
}

/// Number of iterations over which the relative loss change is measured.
pub const CONVERGENCE_WINDOW: usize = 50;

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 0.002,
            edge_step: 0.05,
            pose_step: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pooling: MomentPooling::PerBlock,
            edge_pooling: MomentPooling::PerCoordinate,
            step_clamp: 1.0,
            clip_quantile: 1.0,
            clip_factor: 1.0,
            final_step_fraction: 0.1,
            iterations: 1500,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = [self.step, self.edge_step, self.pose_step];
        if !(self.step > 0.0) || steps.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(format!("step sizes must be finite, non-negative, depth step positive: {steps:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if !(self.step_clamp > 0.0) {
            return Err(Error::Config("step clamp must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::Config("epsilon must be positive and the final step fraction in (0, 1]".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    #[serde(rename = "L_vs")]
    pub vs: f64,
    #[serde(rename = "L_D")]
    pub d: f64,
    #[serde(rename = "L_N")]
    pub n: f64,
    #[serde(rename = "L_e")]
    pub e: f64,
}

/// Loss history and final parameters of a run.
#[derive(Debug, Clone)]
pub struct OptimizeTrace {
    pub rows: Vec<TraceRow>,
    pub params: FreeParams,
    pub converged: bool,
}

impl OptimizeTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Validation(format!("trace CSV: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("trace CSV: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

/// How second-moment estimates are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentPooling {
    /// One second-moment estimate per coordinate.
    PerCoordinate,
    /// One second-moment estimate per parameter block (log-depth, edge
    /// logits, twists), so relative gradient magnitudes within a block are
    /// kept.
    #[default]
    PerBlock,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    blocks: Vec<std::ops::Range<usize>>,
    t: i32,
}

impl Adam {
    fn new(n: usize, blocks: Vec<std::ops::Range<usize>>) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            blocks,
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], rates: &[f64], cfg: &OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let mut g = g.to_vec();
        if cfg.clip_quantile < 1.0 {
            for r in &self.blocks {
                let mut mags: Vec<f64> = g[r.clone()].iter().map(|v| v.abs()).collect();
                mags.sort_by(|a, b| a.total_cmp(b));
                let q = mags[((mags.len() - 1) as f64 * cfg.clip_quantile).round() as usize] * cfg.clip_factor;
                if q > 0.0 {
                    for v in &mut g[r.clone()] {
                        *v = v.clamp(-q, q);
                    }
                }
            }
        }
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        }
        for (b, r) in self.blocks.iter().enumerate() {
            let pooling = if b == 1 { cfg.edge_pooling } else { cfg.pooling };
            let pooled = match pooling {
                MomentPooling::PerCoordinate => None,
                MomentPooling::PerBlock => Some(self.v[r.clone()].iter().sum::<f64>() / r.len() as f64),
            };
            for i in r.clone() {
                let mh = self.m[i] / c1;
                let vh = pooled.unwrap_or(self.v[i]) / c2;
                let limit = cfg.step_clamp * rates[i];
                x[i] -= (rates[i] * mh / (vh.sqrt() + cfg.epsilon)).clamp(-limit, limit);
            }
        }
    }
}

/// Runs the optimizer from `initial` on `problem`.
///
/// Fails with [`Error::NonFinite`] as soon as any loss term stops being
/// finite; the diagnostic lists every term at that iteration.
pub fn optimize(initial: &FreeParams, problem: &Problem, config: &OptimizerConfig) -> Result<OptimizeTrace> {
    config.validate()?;
    initial.validate()?;
    problem.check_params(initial)?;
    let mut x = initial.to_vec();
    let n_map = initial.log_depth.len();
    let mut base_rates = vec![config.step; x.len()];
    base_rates[n_map..2 * n_map].fill(config.edge_step);
    base_rates[2 * n_map..].fill(config.pose_step);
    let mut rates = base_rates.clone();
    let mut adam = Adam::new(x.len(), initial.blocks().into_iter().map(|(_, r)| r).collect());
    let mut rows = Vec::with_capacity(config.iterations + 1);
    let mut converged = false;
    let decay_span = config.iterations.max(1) as f64;
    for it in 0..=config.iterations {
        let params = initial.with_values(&x);
        let eval = problem.evaluate(&params)?;
        if !eval.terms.is_finite() || eval.grad.to_vec().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                diagnostic: format!("{} (gradient finite: {})", eval.terms.describe(), eval.grad.to_vec().iter().all(|g| g.is_finite())),
            });
        }
        let t = eval.terms;
        rows.push(TraceRow {
            iteration: it,
            total: t.total,
            vs: t.vs,
            d: t.d,
            n: t.n,
            e: t.e,
        });
        if it >= CONVERGENCE_WINDOW {
            let before = rows[it - CONVERGENCE_WINDOW].total;
            if (before - t.total).abs() <= config.tolerance * before.abs() {
                converged = true;
                break;
            }
        }
        if it == config.iterations {
            break;
        }
        let scale = config.final_step_fraction.powf(it as f64 / decay_span);
        for (r, b) in rates.iter_mut().zip(&base_rates) {
            *r = b * scale;
        }
        adam.step(&mut x, &eval.grad.to_vec(), &rates, config);
    }
    Ok(OptimizeTrace {
        rows,
        params: initial.with_values(&x),
        converged,
    })
}

/// Log-depth noise of the demo initialization.
pub const DEMO_INIT_SIGMA: f64 = 0.1;

/// Initial edge logit of the demo initialization (edge strength ≈ 0.018).
pub const DEMO_EDGE_LOGIT: f64 = -4.0;

/// Log-depth `ln(median) + N(0, σ²)` per pixel.
pub fn median_init(width: usize, height: usize, median: f64, sigma: f64, seed: u64) -> Result<Grid<f64>> {
    if !(median > 0.0 && median.is_finite()) {
        return Err(Error::Domain(format!("median depth must be positive, got {median}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = median.ln();
    Ok(Grid::from_fn(width, height, |_, _| base + normal.sample(&mut rng)))
}

/// Depth multiplied per pixel by a factor drawn uniformly from `[low, high]`.
pub fn perturbed_depth(depth: &DepthMap, low: f64, high: f64, seed: u64) -> Result<DepthMap> {
    if !(low > 0.0 && high >= low) {
        return Err(Error::Domain(format!("perturbation range [{low}, {high}] must be positive")));
    }
    let uni = Uniform::new_inclusive(low, high).map_err(|e| Error::Config(format!("perturbation range: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DepthMap::new(depth.map(|d| d * uni.sample(&mut rng)))
}

/// Depth multiplied by `exp(n)`, where `n` is smooth value noise in
/// `[-amplitude, amplitude]` with lattice spacing `cell` pixels.
pub fn smooth_perturbed_depth(depth: &DepthMap, amplitude: f64, cell: f64, seed: u64) -> Result<DepthMap> {
    if !(amplitude >= 0.0 && amplitude.is_finite() && cell > 0.0) {
        return Err(Error::Domain(format!("perturbation amplitude {amplitude} / cell {cell} invalid")));
    }
    let tex = crate::synth::Texture { seed, octaves: 1, cell };
    let g = depth.grid();
    DepthMap::new(Grid::from_fn(g.width(), g.height(), |x, y| {
        let n = (tex.sample(0, x as f64, y as f64) - 0.5) / 0.4;
        g.get(x, y) * (amplitude * n).exp()
    }))
}

/// Randomly drawn images, intrinsics and parameters for gradient checks.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub target: ImageF,
    pub sources: Vec<ImageF>,
    pub intrinsics: Intrinsics,
    pub params: FreeParams,
}

/// Draws a [`RandomInstance`]: per-pixel random colors, a random slanted
/// plane around depth 3 with 3% per-pixel log-depth noise, normally
/// distributed edge logits and small source poses.
///
/// Larger depth noise puts adjacent pixels near the poles of the slope
/// quotients, where finite differences stop being informative.
pub fn random_instance(width: usize, height: usize, n_sources: usize, seed: u64) -> Result<RandomInstance> {
    if width < 3 || height < 3 {
        return Err(Error::Size(format!("random instance must be at least 3x3, got {width}x{height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = Uniform::new(0.1, 0.9).expect("valid range");
    let std_normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let image = |rng: &mut ChaCha8Rng| ImageF::from_fn(width, height, 3, |_, _, _| color.sample(rng));
    let target = image(&mut rng);
    let sources = (0..n_sources).map(|_| image(&mut rng)).collect();
    let f = width as f64;
    let intrinsics = Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)?;
    let slope = Uniform::new(-0.3, 0.3).expect("valid range");
    let (a, b) = (slope.sample(&mut rng), slope.sample(&mut rng));
    let (w, h) = (width as f64, height as f64);
    let log_depth = Grid::from_fn(width, height, |x, y| {
        let plane = 1.0 + a * (x as f64 / w - 0.5) + b * (y as f64 / h - 0.5);
        (3.0 * plane).ln() + 0.03 * std_normal.sample(&mut rng)
    });
    let edge_logits = Grid::from_fn(width, height, |_, _| 1.5 * std_normal.sample(&mut rng));
    let twists = (0..n_sources)
        .map(|_| {
            let mut t = [0.0; 6];
            for (i, v) in t.iter_mut().enumerate() {
                let s = if i < 3 { 0.02 } else { 0.1 };
                *v = s * std_normal.sample(&mut rng);
            }
            t
        })
        .collect();
    Ok(RandomInstance {
        target,
        sources,
        intrinsics,
        params: FreeParams::new(log_depth, edge_logits, twists)?,
    })
}
