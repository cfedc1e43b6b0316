//! Inverse warping of source views into the target frame and the photometric
//! view-synthesis loss with analytic gradients.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, so3_left_jacobian, Intrinsics, PixelCoord, PoseSE3};
use crate::maps::{bilinear_sample, BoolMap, DepthMap, Grid, ImageF};

/// Source view resampled on the target pixel grid.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub synthesized: ImageF,
    pub valid_mask: BoolMap,
    pub sample_coords: Grid<PixelCoord>,
}

/// Where a target pixel lands in the source view.
#[derive(Debug, Clone, Copy)]
struct Correspondence {
    /// Point in the source camera frame.
    point: Vector3<f64>,
    coord: PixelCoord,
    valid: bool,
}

#[inline]
fn in_bounds(p: PixelCoord, width: usize, height: usize) -> bool {
    p.u >= 0.0 && p.u <= (width - 1) as f64 && p.v >= 0.0 && p.v <= (height - 1) as f64
}

/// Pulls coordinates that miss the border by round-off back onto it.
#[inline]
fn snap(c: f64, size: usize) -> f64 {
    const EPS: f64 = 1e-9;
    let hi = (size - 1) as f64;
    if c < 0.0 && c > -EPS {
        0.0
    } else if c > hi && c < hi + EPS {
        hi
    } else {
        c
    }
}

#[inline]
fn correspond(
    x: usize,
    y: usize,
    depth: f64,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    k: &Intrinsics,
    source_dims: (usize, usize),
) -> Correspondence {
    let point = rotation * (k.ray(x as f64, y as f64) * depth) + translation;
    if !(point.z > 0.0) {
        return Correspondence {
            point,
            coord: PixelCoord::new(f64::NAN, f64::NAN),
            valid: false,
        };
    }
    let coord = PixelCoord::new(
        snap(k.fx * point.x / point.z + k.cx, source_dims.0),
        snap(k.fy * point.y / point.z + k.cy, source_dims.1),
    );
    Correspondence {
        point,
        coord,
        valid: in_bounds(coord, source_dims.0, source_dims.1),
    }
}

/// Valid-correspondence mask: false where the warped coordinate leaves
/// `[0, W−1] × [0, H−1]` of the source or the point lands behind it.
pub fn fly_out_mask(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics, source_dims: (usize, usize)) -> BoolMap {
    let (r, t) = (pose.rotation(), pose.translation());
    Grid::from_fn(depth.width(), depth.height(), |x, y| {
        correspond(x, y, *depth.get(x, y), &r, &t, k, source_dims).valid
    })
}

/// Resample `source` at the projections of the target pixels.
pub fn warp(source: &ImageF, depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> WarpResult {
    let (r, t) = (pose.rotation(), pose.translation());
    let (w, h) = depth.dims();
    let ch = source.channels();
    let mut data = Vec::with_capacity(w * h * ch);
    let mut mask = Vec::with_capacity(w * h);
    let mut coords = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let c = correspond(x, y, *depth.get(x, y), &r, &t, k, source.dims());
            if c.coord.u.is_finite() && c.coord.v.is_finite() {
                let s = bilinear_sample(source, c.coord);
                data.extend_from_slice(&s.value[..ch]);
            } else {
                data.extend(std::iter::repeat_n(0.0, ch));
            }
            mask.push(c.valid);
            coords.push(c.coord);
        }
    }
    WarpResult {
        synthesized: ImageF::new(w, h, ch, data).expect("warp keeps image shape"),
        valid_mask: Grid::from_vec(w, h, mask).expect("mask shape"),
        sample_coords: Grid::from_vec(w, h, coords).expect("coord shape"),
    }
}

/// One source frame and the target→source transform.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub image: &'a ImageF,
    pub pose: PoseSE3,
}

/// Photometric loss value and gradients.
#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub value: f64,
    /// ∂loss/∂D.
    pub grad_depth: Grid<f64>,
    /// ∂loss/∂log D = D · ∂loss/∂D.
    pub grad_logdepth: Grid<f64>,
    /// ∂loss/∂twist, one per source view.
    pub grad_twist: Vec<[f64; 6]>,
    /// Number of valid (pixel, source) pairs the mean is taken over.
    pub pixel_count: usize,
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

/// Mean over valid (pixel, source) pairs of the channel-summed absolute
/// difference between the target and the warped source.
///
/// The fly-out mask is treated as a constant: masked pairs contribute neither
/// loss nor gradient.
pub fn photometric_loss(target: &ImageF, sources: &[SourceView<'_>], depth: &DepthMap, k: &Intrinsics) -> Result<PhotometricLoss> {
    if sources.is_empty() {
        return Err(Error::Config("photometric loss needs at least one source view".into()));
    }
    let (w, h) = target.dims();
    if w < 2 || h < 2 {
        return Err(Error::Size(format!("view synthesis needs at least 2x2 pixels, got {w}x{h}")));
    }
    if depth.dims() != (w, h) {
        return Err(Error::Size(format!("depth {:?} does not match target {:?}", depth.dims(), (w, h))));
    }
    for s in sources {
        if s.image.channels() != target.channels() {
            return Err(Error::Size("source and target channel counts differ".into()));
        }
    }
    let ch = target.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grad_depth = Grid::zeros(w, h);
    let mut grad_twist = vec![[0.0; 6]; sources.len()];

    for (si, src) in sources.iter().enumerate() {
        let r = src.pose.rotation();
        let t = src.pose.translation();
        let jl = so3_left_jacobian(&src.pose.omega());
        let mut gt = [0.0; 6];
        for y in 0..h {
            for x in 0..w {
                let d = *depth.get(x, y);
                let c = correspond(x, y, d, &r, &t, k, src.image.dims());
                if !c.valid {
                    continue;
                }
                let s = bilinear_sample(src.image, c.coord);
                let mut gu = 0.0;
                let mut gv = 0.0;
                for ci in 0..ch {
                    let diff = target.at(x, y, ci) - s.value[ci];
                    sum += diff.abs();
                    // ∂|I_t − Î|/∂Î = −sign(I_t − Î)
                    let g = -sign(diff);
                    gu += g * s.d_du[ci];
                    gv += g * s.d_dv[ci];
                }
                count += 1;
                let p = c.point;
                let iz = 1.0 / p.z;
                // ∂(u,v)/∂p, contracted with the image-space gradient.
                let gp = Vector3::new(gu * k.fx * iz, gv * k.fy * iz, -(gu * k.fx * p.x + gv * k.fy * p.y) * iz * iz);
                let ray = k.ray(x as f64, y as f64);
                *grad_depth.get_mut(x, y) += gp.dot(&(r * ray));
                // p = R(ω)·X + t; ∂p/∂ω = −[R X]ₓ J_l(ω)
                let rx = p - t;
                let gw = -(skew(&rx) * jl).transpose() * gp;
                gt[0] += gw.x;
                gt[1] += gw.y;
                gt[2] += gw.z;
                gt[3] += gp.x;
                gt[4] += gp.y;
                gt[5] += gp.z;
            }
        }
        grad_twist[si] = gt;
    }

    let (value, scale) = if count > 0 { (sum / count as f64, 1.0 / count as f64) } else { (0.0, 0.0) };
    for g in grad_depth.data_mut() {
        *g *= scale;
    }
    for gt in &mut grad_twist {
        for g in gt.iter_mut() {
            *g *= scale;
        }
    }
    let grad_logdepth = Grid::from_fn(w, h, |x, y| grad_depth.get(x, y) * depth.get(x, y));
    Ok(PhotometricLoss {
        value,
        grad_depth,
        grad_logdepth,
        grad_twist,
        pixel_count: count,
    })
}
