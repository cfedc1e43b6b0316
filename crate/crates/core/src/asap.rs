//! As-smooth-as-possible regularizers: the edge affinity κ, normal smoothness
//! over a sparse multi-scale neighborhood, depth triplet smoothness with
//! optional clipping of negative responses, the edge prior, and the
//! image-weighted baseline smoothness terms.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::maps::{DepthMap, EdgeMap, Grid, ImageF, NormalMap};

/// Neighbor distances along each image axis.
pub const MAGNITUDES: [usize; 4] = [1, 2, 4, 8];

/// Slope denominators below this magnitude make a triple degenerate.
pub const MIN_SLOPE_DENOMINATOR: f64 = 1e-9;

/// Image axis along which a triple or pair is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::X, Axis::Y];

    #[inline]
    fn step(self) -> (isize, isize) {
        match self {
            Axis::X => (1, 0),
            Axis::Y => (0, 1),
        }
    }
}

/// The 16 signed axis-aligned offsets {±1, ±2, ±4, ±8} × {x, y}.
pub fn neighbor_offsets() -> [(isize, isize); 16] {
    let mut out = [(0, 0); 16];
    let mut i = 0;
    for axis in Axis::BOTH {
        let (sx, sy) = axis.step();
        for m in MAGNITUDES {
            for sign in [1, -1] {
                out[i] = (sign * sx * m as isize, sign * sy * m as isize);
                i += 1;
            }
        }
    }
    out
}

#[inline]
fn offset_pixel(p: (usize, usize), o: (isize, isize), dims: (usize, usize)) -> Option<(usize, usize)> {
    let x = p.0 as isize + o.0;
    let y = p.1 as isize + o.1;
    if x < 0 || y < 0 || x >= dims.0 as isize || y >= dims.1 as isize {
        None
    } else {
        Some((x as usize, y as usize))
    }
}

/// Edge affinity between a pixel and an offset neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    /// exp(−max E) over the segment including both end points.
    pub value: f64,
    /// Pixel holding the maximum; the only pixel that receives gradient.
    pub argmax: (usize, usize),
}

/// κ(p, p + offset) for an axis-aligned offset of magnitude 1, 2, 4 or 8.
/// Returns `None` when the segment leaves the image. Ties for the maximum
/// resolve to the pixel nearest `p`.
pub fn kappa(edges: &Grid<f64>, p: (usize, usize), offset: (isize, isize)) -> Result<Option<Kappa>> {
    let m = offset.0.unsigned_abs().max(offset.1.unsigned_abs());
    if (offset.0 != 0 && offset.1 != 0) || !MAGNITUDES.contains(&m) {
        return Err(Error::Domain(format!("offset {offset:?} is not axis-aligned with magnitude in {{1,2,4,8}}")));
    }
    if offset_pixel(p, offset, edges.dims()).is_none() {
        return Ok(None);
    }
    Ok(Some(segment_kappa(edges, p, (offset.0.signum(), offset.1.signum()), m)))
}

#[inline]
fn segment_kappa(edges: &Grid<f64>, p: (usize, usize), dir: (isize, isize), m: usize) -> Kappa {
    let mut best = *edges.get(p.0, p.1);
    let mut arg = p;
    for t in 1..=m as isize {
        let q = ((p.0 as isize + dir.0 * t) as usize, (p.1 as isize + dir.1 * t) as usize);
        let e = *edges.get(q.0, q.1);
        if e > best {
            best = e;
            arg = q;
        }
    }
    Kappa {
        value: (-best).exp(),
        argmax: arg,
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Size(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Normal smoothness value and gradients.
#[derive(Debug, Clone)]
pub struct NormalTerm {
    pub value: f64,
    pub grad_normals: Grid<Vector3<f64>>,
    /// ∂/∂E (edge strength, not logits).
    pub grad_edge: Grid<f64>,
    pub pairs: usize,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over in-bounds (pixel, offset) pairs of ‖N(p) − N(q)‖₁ · κ(p, q).
pub fn loss_normal_asap(normals: &NormalMap, edges: &EdgeMap) -> Result<NormalTerm> {
    check_dims(normals.dims(), edges.dims(), "normal and edge maps differ")?;
    let dims = normals.dims();
    let mut grad_n = Grid::filled(dims.0, dims.1, Vector3::zeros());
    let mut grad_e = Grid::zeros(dims.0, dims.1);
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let offsets = neighbor_offsets();
    // First pass: values and raw gradients; normalization applied after.
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            let np = *normals.get(x, y);
            for o in offsets {
                let Some(q) = offset_pixel((x, y), o, dims) else {
                    continue;
                };
                let k = segment_kappa(edges, (x, y), (o.0.signum(), o.1.signum()), o.0.unsigned_abs().max(o.1.unsigned_abs()));
                let diff = np - normals.get(q.0, q.1);
                let l1 = diff.abs().sum();
                sum += l1 * k.value;
                pairs += 1;
                let s = diff.map(sign) * k.value;
                *grad_n.get_mut(x, y) += s;
                *grad_n.get_mut(q.0, q.1) -= s;
                *grad_e.get_mut(k.argmax.0, k.argmax.1) -= l1 * k.value;
            }
        }
    }
    let scale = if pairs > 0 { 1.0 / pairs as f64 } else { 0.0 };
    grad_n.data_mut().iter_mut().for_each(|g| *g *= scale);
    grad_e.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok(NormalTerm {
        value: sum * scale,
        grad_normals: grad_n,
        grad_edge: grad_e,
        pairs,
    })
}

/// Per-axis slope of depth against the matching 3D coordinate between two
/// pixels: `(D_b − D_a) / (c_b − c_a)` with `c = D·ρ` and ρ the ray component
/// along the axis.
#[derive(Debug, Clone, Copy)]
struct Slope {
    value: f64,
    /// ∂slope/∂D_a and ∂slope/∂D_b.
    d_a: f64,
    d_b: f64,
}

#[inline]
fn slope(da: f64, db: f64, ra: f64, rb: f64) -> Option<Slope> {
    let den = db * rb - da * ra;
    if !(den.abs() >= MIN_SLOPE_DENOMINATOR) {
        return None;
    }
    let s = (db - da) / den;
    Some(Slope {
        value: s,
        d_a: -(1.0 - s * ra) / den,
        d_b: (1.0 - s * rb) / den,
    })
}

#[inline]
fn ray_component(k: &Intrinsics, axis: Axis, p: (usize, usize)) -> f64 {
    match axis {
        Axis::X => (p.0 as f64 - k.cx) / k.fx,
        Axis::Y => (p.1 as f64 - k.cy) / k.fy,
    }
}

/// Triplet response at `p` with neighbors `p ± magnitude` along `axis` and
/// its partial derivatives with respect to the three depths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub g: f64,
    /// ∂g/∂D at p − m, p and p + m.
    pub d_minus: f64,
    pub d_center: f64,
    pub d_plus: f64,
}

fn triplet(depth: &Grid<f64>, k: &Intrinsics, p: (usize, usize), axis: Axis, m: usize) -> Option<Result<Triplet, ()>> {
    let (sx, sy) = axis.step();
    let step = (sx * m as isize, sy * m as isize);
    let plus = offset_pixel(p, step, depth.dims())?;
    let minus = offset_pixel(p, (-step.0, -step.1), depth.dims())?;
    let (da, db, dc) = (*depth.get(minus.0, minus.1), *depth.get(p.0, p.1), *depth.get(plus.0, plus.1));
    let (ra, rb, rc) = (ray_component(k, axis, minus), ray_component(k, axis, p), ray_component(k, axis, plus));
    let (Some(fwd), Some(bwd)) = (slope(db, dc, rb, rc), slope(da, db, ra, rb)) else {
        return Some(Err(()));
    };
    Some(Ok(Triplet {
        g: fwd.value - bwd.value,
        d_minus: -bwd.d_a,
        d_center: fwd.d_a - bwd.d_b,
        d_plus: fwd.d_b,
    }))
}

/// Difference of the forward and backward per-axis depth slopes at `p`.
///
/// Returns `Ok(None)` if either neighbor is outside the image and
/// `Err(Error::Domain)` when a slope denominator is below
/// [`MIN_SLOPE_DENOMINATOR`].
pub fn depth_gradient_g(depth: &DepthMap, k: &Intrinsics, p: (usize, usize), axis: Axis, magnitude: usize) -> Result<Option<Triplet>> {
    if !MAGNITUDES.contains(&magnitude) {
        return Err(Error::Domain(format!("magnitude {magnitude} not in {{1,2,4,8}}")));
    }
    match triplet(depth.grid(), k, p, axis, magnitude) {
        None => Ok(None),
        Some(Ok(t)) => Ok(Some(t)),
        Some(Err(())) => Err(Error::Domain(format!("degenerate slope denominator at {p:?} ({axis:?}, {magnitude})"))),
    }
}

/// Depth smoothness value and gradients.
#[derive(Debug, Clone)]
pub struct DepthTerm {
    pub value: f64,
    pub grad_depth: Grid<f64>,
    /// ∂/∂E (edge strength, not logits).
    pub grad_edge: Grid<f64>,
    pub triples: usize,
    /// Triples skipped for degenerate slope denominators.
    pub degenerate: usize,
}

impl DepthTerm {
    /// ∂/∂log D.
    pub fn grad_logdepth(&self, depth: &DepthMap) -> Grid<f64> {
        Grid::from_fn(depth.width(), depth.height(), |x, y| self.grad_depth.get(x, y) * depth.get(x, y))
    }
}

/// Mean over valid (pixel, axis, magnitude) of |g′| · κ(p, p+m) · κ(p, p−m),
/// where g′ = max(g, 0) when `clip` is set and g otherwise.
pub fn loss_depth_asap(depth: &DepthMap, edges: &EdgeMap, k: &Intrinsics, clip: bool) -> Result<DepthTerm> {
    check_dims(depth.dims(), edges.dims(), "depth and edge maps differ")?;
    let dims = depth.dims();
    let mut grad_d = Grid::zeros(dims.0, dims.1);
    let mut grad_e = Grid::zeros(dims.0, dims.1);
    let mut sum = 0.0;
    let mut triples = 0usize;
    let mut degenerate = 0usize;
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            for axis in Axis::BOTH {
                let (sx, sy) = axis.step();
                for m in MAGNITUDES {
                    let t = match triplet(depth.grid(), k, (x, y), axis, m) {
                        None => continue,
                        Some(Err(())) => {
                            degenerate += 1;
                            continue;
                        }
                        Some(Ok(t)) => t,
                    };
                    triples += 1;
                    let gp = if clip { t.g.max(0.0) } else { t.g };
                    let kp = segment_kappa(edges, (x, y), (sx, sy), m);
                    let km = segment_kappa(edges, (x, y), (-sx, -sy), m);
                    let kk = kp.value * km.value;
                    let mag = gp.abs();
                    sum += mag * kk;
                    // d|g′|/dg: sign(g) where g′ is live; zero at the clip and at 0.
                    let dg = if clip && t.g <= 0.0 { 0.0 } else { sign(t.g) } * kk;
                    if dg != 0.0 {
                        let step = (sx * m as isize, sy * m as isize);
                        let plus = offset_pixel((x, y), step, dims).expect("checked by triplet");
                        let minus = offset_pixel((x, y), (-step.0, -step.1), dims).expect("checked by triplet");
                        *grad_d.get_mut(minus.0, minus.1) += dg * t.d_minus;
                        *grad_d.get_mut(x, y) += dg * t.d_center;
                        *grad_d.get_mut(plus.0, plus.1) += dg * t.d_plus;
                    }
                    if mag > 0.0 {
                        *grad_e.get_mut(kp.argmax.0, kp.argmax.1) -= mag * kk;
                        *grad_e.get_mut(km.argmax.0, km.argmax.1) -= mag * kk;
                    }
                }
            }
        }
    }
    let scale = if triples > 0 { 1.0 / triples as f64 } else { 0.0 };
    grad_d.data_mut().iter_mut().for_each(|g| *g *= scale);
    grad_e.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok(DepthTerm {
        value: sum * scale,
        grad_depth: grad_d,
        grad_edge: grad_e,
        triples,
        degenerate,
    })
}

/// Edge prior value and gradients.
#[derive(Debug, Clone)]
pub struct EdgeTerm {
    pub value: f64,
    pub grad_edge: Grid<f64>,
    pub grad_logits: Grid<f64>,
}

/// Mean of E² over pixels.
pub fn loss_edge_reg(edges: &EdgeMap) -> EdgeTerm {
    let n = edges.len() as f64;
    EdgeTerm {
        value: edges.data().iter().map(|e| e * e).sum::<f64>() / n,
        grad_edge: edges.map(|e| 2.0 * e / n),
        grad_logits: edges.map(|e| 2.0 * e / n * e * (1.0 - e)),
    }
}

/// Chains a gradient with respect to edge strength E = σ(logit) to logits.
pub fn edge_grad_to_logits(edges: &EdgeMap, grad_edge: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(edges.width(), edges.height(), |x, y| {
        let e = edges.get(x, y);
        grad_edge.get(x, y) * e * (1.0 - e)
    })
}

/// Channel-averaged absolute intensity difference between two pixels.
#[inline]
fn intensity_step(img: &ImageF, a: (usize, usize), b: (usize, usize)) -> f64 {
    let c = img.channels();
    (0..c).map(|i| (img.at(a.0, a.1, i) - img.at(b.0, b.1, i)).abs()).sum::<f64>() / c as f64
}

/// Baseline second-order smoothness value and depth gradient.
#[derive(Debug, Clone)]
pub struct SmoothTerm {
    pub value: f64,
    pub grad_depth: Grid<f64>,
    pub terms: usize,
}

/// Mean over interior (pixel, axis) of |D(p−1) − 2D(p) + D(p+1)| weighted by
/// exp(−α · |I(p+1) − I(p−1)| / 2), the intensity change across the stencil
/// averaged over channels.
pub fn loss_smooth_baseline(depth: &DepthMap, image: &ImageF, alpha: f64) -> Result<SmoothTerm> {
    check_dims(depth.dims(), image.dims(), "depth and image differ")?;
    let dims = depth.dims();
    let mut grad = Grid::zeros(dims.0, dims.1);
    let mut sum = 0.0;
    let mut terms = 0usize;
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            for axis in Axis::BOTH {
                let s = axis.step();
                let (Some(a), Some(c)) = (offset_pixel((x, y), (-s.0, -s.1), dims), offset_pixel((x, y), s, dims)) else {
                    continue;
                };
                let w = (-alpha * intensity_step(image, c, a) / 2.0).exp();
                let second = depth.get(a.0, a.1) - 2.0 * depth.get(x, y) + depth.get(c.0, c.1);
                sum += w * second.abs();
                terms += 1;
                let g = w * sign(second);
                *grad.get_mut(a.0, a.1) += g;
                *grad.get_mut(x, y) -= 2.0 * g;
                *grad.get_mut(c.0, c.1) += g;
            }
        }
    }
    let scale = if terms > 0 { 1.0 / terms as f64 } else { 0.0 };
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok(SmoothTerm {
        value: sum * scale,
        grad_depth: grad,
        terms,
    })
}

/// Mean over (pixel, axis) with a forward neighbor of ‖N(p+1) − N(p)‖₁
/// weighted by exp(−α · |I(p+1) − I(p)|).
pub fn loss_smooth_normal_first(normals: &NormalMap, image: &ImageF, alpha: f64) -> Result<f64> {
    check_dims(normals.dims(), image.dims(), "normals and image differ")?;
    let dims = normals.dims();
    let mut sum = 0.0;
    let mut terms = 0usize;
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            for axis in Axis::BOTH {
                let Some(q) = offset_pixel((x, y), axis.step(), dims) else {
                    continue;
                };
                let w = (-alpha * intensity_step(image, q, (x, y))).exp();
                sum += w * (normals.get(q.0, q.1) - normals.get(x, y)).abs().sum();
                terms += 1;
            }
        }
    }
    Ok(if terms > 0 { sum / terms as f64 } else { 0.0 })
}
