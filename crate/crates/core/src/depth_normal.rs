//! Depth-normal consistency: normals estimated from depth by a weighted
//! plane fit over the 8-neighborhood, depth re-estimated from normals by
//! ray-plane intersection, and the consistency energy tying the two.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::eigen::{any_orthogonal, sym_eigenvalues, sym_eigenvector};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::maps::{BoolMap, DepthMap, Grid, ImageF, NormalMap};

/// The 8-neighborhood as (dx, dy) offsets.
pub const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Eigenvalue gap below which the normal is considered ill-defined and gets
/// no gradient.
pub const TIE_GAP: f64 = 1e-9;
/// Relative size of the second eigenvalue below which the scatter is treated
/// as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// Ray-plane denominators smaller than this are rejected.
pub const MIN_DENOMINATOR: f64 = 1e-8;
/// Lower clamp on re-estimated depth.
pub const MIN_DEPTH: f64 = 1e-6;

/// Per-neighbor weights ω_jt for the plane fit and the re-estimation.
#[derive(Debug, Clone, Default)]
pub enum NeighborhoodWeights {
    /// ω = 1 for every neighbor inside the image.
    #[default]
    Uniform,
    /// ω = exp(−α |I(p_j) − I(p_t)|) on a single-channel intensity map.
    ImageGradient { alpha: f64, intensity: Grid<f64> },
}

impl NeighborhoodWeights {
    /// Image-gradient weights from the luminance of `image`.
    pub fn image_gradient(image: &ImageF, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(NeighborhoodWeights::ImageGradient {
            alpha,
            intensity: image.luminance(),
        })
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        match self {
            NeighborhoodWeights::Uniform => Ok(()),
            NeighborhoodWeights::ImageGradient { intensity, .. } if intensity.dims() == dims => Ok(()),
            NeighborhoodWeights::ImageGradient { intensity, .. } => Err(Error::Size(format!(
                "weight image {:?} does not match depth {:?}",
                intensity.dims(),
                dims
            ))),
        }
    }

    #[inline]
    pub fn weight(&self, t: (usize, usize), j: (usize, usize)) -> f64 {
        match self {
            NeighborhoodWeights::Uniform => 1.0,
            NeighborhoodWeights::ImageGradient { alpha, intensity } => {
                (-alpha * (intensity.get(j.0, j.1) - intensity.get(t.0, t.1)).abs()).exp()
            }
        }
    }

    /// The same weighting rule on a 2×2 box-downsampled grid.
    pub fn at_half_resolution(&self) -> Result<Self> {
        use crate::maps::Downsample;
        Ok(match self {
            NeighborhoodWeights::Uniform => NeighborhoodWeights::Uniform,
            NeighborhoodWeights::ImageGradient { alpha, intensity } => NeighborhoodWeights::ImageGradient {
                alpha: *alpha,
                intensity: intensity.downsample()?,
            },
        })
    }
}

/// In-bounds neighbors of (x, y) with their weights; unused slots are `None`.
#[inline]
fn neighbors(x: usize, y: usize, w: usize, h: usize, weights: &NeighborhoodWeights) -> [Option<(usize, usize, f64)>; 8] {
    let mut out = [None; 8];
    for (slot, (dx, dy)) in out.iter_mut().zip(NEIGHBORS8) {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
            continue;
        }
        let (nx, ny) = (nx as usize, ny as usize);
        let wt = weights.weight((x, y), (nx, ny));
        if wt > 0.0 {
            *slot = Some((nx, ny, wt));
        }
    }
    out
}

#[inline]
fn phi(depth: &Grid<f64>, k: &Intrinsics, x: usize, y: usize) -> Vector3<f64> {
    k.ray(x as f64, y as f64) * *depth.get(x, y)
}

fn check_inputs(depth: &DepthMap, weights: &NeighborhoodWeights) -> Result<()> {
    let (w, h) = depth.dims();
    if w < 3 || h < 3 {
        return Err(Error::Size(format!("depth-normal layers need at least 3x3 pixels, got {w}x{h}")));
    }
    weights.check((w, h))
}

/// Normals estimated from depth.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub normals: NormalMap,
    /// Pixels whose scatter was rank-deficient and received the (0, 0, −1)
    /// fallback.
    pub flagged: BoolMap,
    /// Pixels with a near-tie between the two smallest eigenvalues; their
    /// gradient is zero.
    pub ties: BoolMap,
}

#[derive(Debug, Clone, Copy)]
struct PixelNormal {
    normal: Vector3<f64>,
    scatter: Matrix3<f64>,
    flagged: bool,
    tie: bool,
}

fn fit_pixel(depth: &Grid<f64>, k: &Intrinsics, weights: &NeighborhoodWeights, x: usize, y: usize) -> PixelNormal {
    let (w, h) = depth.dims();
    let pt = phi(depth, k, x, y);
    let mut m = Matrix3::zeros();
    for (nx, ny, wt) in neighbors(x, y, w, h, weights).into_iter().flatten() {
        let d = phi(depth, k, nx, ny) - pt;
        m += d * d.transpose() * wt;
    }
    let fallback = PixelNormal {
        normal: Vector3::new(0.0, 0.0, -1.0),
        scatter: m,
        flagged: true,
        tie: true,
    };
    let l = sym_eigenvalues(&m);
    if !(l[0] > 0.0) || l[1] <= RANK_TOLERANCE * l[0] {
        return fallback;
    }
    let Some(mut v) = sym_eigenvector(&m, l[2]) else {
        return fallback;
    };
    if v.dot(&k.ray(x as f64, y as f64)) > 0.0 {
        v = -v;
    }
    PixelNormal {
        normal: v,
        scatter: m,
        flagged: false,
        tie: l[1] - l[2] < TIE_GAP,
    }
}

/// Per-pixel normal minimizing Σ_j ω_j ((φ(p_j) − φ(p_t))ᵀ N)² over unit N,
/// oriented towards the camera.
pub fn depth_to_normal(depth: &DepthMap, k: &Intrinsics, weights: &NeighborhoodWeights) -> Result<NormalEstimate> {
    check_inputs(depth, weights)?;
    let (w, h) = depth.dims();
    let fits = Grid::from_fn(w, h, |x, y| fit_pixel(depth.grid(), k, weights, x, y));
    Ok(NormalEstimate {
        normals: NormalMap::new(fits.map(|p| p.normal))?,
        flagged: fits.map(|p| p.flagged),
        ties: fits.map(|p| p.tie),
    })
}

/// Vector-Jacobian product of [`depth_to_normal`]: given ∂L/∂N per pixel,
/// returns ∂L/∂D.
///
/// The smallest eigenvector `v` of the scatter `M` moves by
/// `dv = −(M − λ₃I)⁺ dM v`, with the pseudo-inverse restricted to `v⊥`.
/// Flagged and tied pixels contribute nothing.
pub fn depth_to_normal_vjp(
    depth: &DepthMap,
    k: &Intrinsics,
    weights: &NeighborhoodWeights,
    grad_normals: &Grid<Vector3<f64>>,
) -> Result<Grid<f64>> {
    check_inputs(depth, weights)?;
    let (w, h) = depth.dims();
    if grad_normals.dims() != (w, h) {
        return Err(Error::Size("normal gradient does not match depth".into()));
    }
    let mut grad = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = *grad_normals.get(x, y);
            if g == Vector3::zeros() {
                continue;
            }
            let fit = fit_pixel(depth.grid(), k, weights, x, y);
            if fit.flagged || fit.tie {
                continue;
            }
            let v = fit.normal;
            let a = any_orthogonal(&v);
            let b = v.cross(&a);
            let lambda3 = v.dot(&(fit.scatter * v));
            let ma = fit.scatter * a;
            let mb = fit.scatter * b;
            let c = Matrix2::new(a.dot(&ma) - lambda3, a.dot(&mb), b.dot(&ma), b.dot(&mb) - lambda3);
            let Some(ci) = c.try_inverse() else {
                continue;
            };
            let yv = ci * Vector2::new(a.dot(&g), b.dot(&g));
            let wv = a * yv.x + b * yv.y;
            let pt = phi(depth.grid(), k, x, y);
            let rt = k.ray(x as f64, y as f64);
            for (nx, ny, wt) in neighbors(x, y, w, h, weights).into_iter().flatten() {
                let d = phi(depth.grid(), k, nx, ny) - pt;
                let gd = -(wv * d.dot(&v) + v * wv.dot(&d)) * wt;
                *grad.get_mut(nx, ny) += gd.dot(&k.ray(nx as f64, ny as f64));
                *grad.get_mut(x, y) -= gd.dot(&rt);
            }
        }
    }
    Ok(grad)
}

/// Depth re-estimated from normals.
#[derive(Debug, Clone)]
pub struct ReestimatedDepth {
    pub depth: DepthMap,
    /// Pixels whose ray is nearly parallel to their plane; they keep the input
    /// depth.
    pub flagged: BoolMap,
}

struct PixelDepth {
    value: f64,
    num: f64,
    den: f64,
    wsum: f64,
    flagged: bool,
    clamped: bool,
}

fn reestimate_pixel(depth: &Grid<f64>, n: &Vector3<f64>, k: &Intrinsics, weights: &NeighborhoodWeights, x: usize, y: usize) -> PixelDepth {
    let (w, h) = depth.dims();
    let den = n.dot(&k.ray(x as f64, y as f64));
    let mut num = 0.0;
    let mut wsum = 0.0;
    for (nx, ny, wt) in neighbors(x, y, w, h, weights).into_iter().flatten() {
        num += wt * n.dot(&phi(depth, k, nx, ny));
        wsum += wt;
    }
    if den.abs() < MIN_DENOMINATOR || wsum <= 0.0 {
        return PixelDepth {
            value: *depth.get(x, y),
            num,
            den,
            wsum,
            flagged: true,
            clamped: false,
        };
    }
    let raw = num / (den * wsum);
    PixelDepth {
        value: raw.max(MIN_DEPTH),
        num,
        den,
        wsum,
        flagged: false,
        clamped: !(raw >= MIN_DEPTH),
    }
}

fn check_normals(depth: &DepthMap, normals: &NormalMap) -> Result<()> {
    if normals.dims() != depth.dims() {
        return Err(Error::Size(format!(
            "normals {:?} do not match depth {:?}",
            normals.dims(),
            depth.dims()
        )));
    }
    Ok(())
}

/// Weighted mean over the 8 neighbors of the depth at which the ray through
/// p_t meets the plane with normal N(p_t) through φ(p_j):
/// `(Nᵀφ(p_j)) / (Nᵀ K⁻¹ h(p_t))`, clamped to at least [`MIN_DEPTH`].
pub fn normal_to_depth(
    depth: &DepthMap,
    normals: &NormalMap,
    k: &Intrinsics,
    weights: &NeighborhoodWeights,
) -> Result<ReestimatedDepth> {
    check_inputs(depth, weights)?;
    check_normals(depth, normals)?;
    let (w, h) = depth.dims();
    let px = Grid::from_fn(w, h, |x, y| reestimate_pixel(depth.grid(), normals.get(x, y), k, weights, x, y));
    Ok(ReestimatedDepth {
        depth: DepthMap::new(px.map(|p| p.value))?,
        flagged: px.map(|p| p.flagged),
    })
}

/// Vector-Jacobian product of [`normal_to_depth`]: given ∂L/∂D′, returns
/// (∂L/∂D, ∂L/∂N).
pub fn normal_to_depth_vjp(
    depth: &DepthMap,
    normals: &NormalMap,
    k: &Intrinsics,
    weights: &NeighborhoodWeights,
    grad_out: &Grid<f64>,
) -> Result<(Grid<f64>, Grid<Vector3<f64>>)> {
    check_inputs(depth, weights)?;
    check_normals(depth, normals)?;
    let (w, h) = depth.dims();
    if grad_out.dims() != (w, h) {
        return Err(Error::Size("output gradient does not match depth".into()));
    }
    let mut gd = Grid::zeros(w, h);
    let mut gn = Grid::filled(w, h, Vector3::zeros());
    for y in 0..h {
        for x in 0..w {
            let g = *grad_out.get(x, y);
            if g == 0.0 {
                continue;
            }
            let n = normals.get(x, y);
            let p = reestimate_pixel(depth.grid(), n, k, weights, x, y);
            if p.flagged {
                *gd.get_mut(x, y) += g;
                continue;
            }
            if p.clamped {
                continue;
            }
            let scale = g / (p.den * p.wsum);
            let mut mean_phi = Vector3::zeros();
            for (nx, ny, wt) in neighbors(x, y, w, h, weights).into_iter().flatten() {
                let r = k.ray(nx as f64, ny as f64);
                *gd.get_mut(nx, ny) += scale * wt * n.dot(&r);
                mean_phi += r * (wt * depth.get(nx, ny));
            }
            let value = p.num / (p.den * p.wsum);
            *gn.get_mut(x, y) += (mean_phi / p.wsum - k.ray(x as f64, y as f64) * value) * (g / p.den);
        }
    }
    Ok((gd, gn))
}

/// Depth-normal consistency energy.
#[derive(Debug, Clone)]
pub struct ConsistencyEnergy {
    /// Mean of the per-pixel energies.
    pub value: f64,
    pub per_pixel: Grid<f64>,
}

/// Σ_j ω_j ((φ(p_j) − φ(p_t))ᵀ N(p_t))² per pixel, averaged over pixels.
pub fn consistency_energy(
    depth: &DepthMap,
    normals: &NormalMap,
    k: &Intrinsics,
    weights: &NeighborhoodWeights,
) -> Result<ConsistencyEnergy> {
    check_inputs(depth, weights)?;
    check_normals(depth, normals)?;
    let (w, h) = depth.dims();
    let per_pixel = Grid::from_fn(w, h, |x, y| {
        let pt = phi(depth.grid(), k, x, y);
        let n = normals.get(x, y);
        neighbors(x, y, w, h, weights)
            .into_iter()
            .flatten()
            .map(|(nx, ny, wt)| wt * (phi(depth.grid(), k, nx, ny) - pt).dot(n).powi(2))
            .sum::<f64>()
    });
    let value = per_pixel.data().iter().sum::<f64>() / per_pixel.len() as f64;
    Ok(ConsistencyEnergy { value, per_pixel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(20.0, 19.0, 7.3, 5.6).unwrap()
    }

    /// Depth of the plane n·X = d seen through `k`.
    fn plane_depth(w: usize, h: usize, k: &Intrinsics, n: Vector3<f64>, d: f64) -> DepthMap {
        DepthMap::new(Grid::from_fn(w, h, |x, y| d / n.dot(&k.ray(x as f64, y as f64)))).unwrap()
    }

    fn slanted() -> (Vector3<f64>, f64) {
        (Vector3::new(0.3, -0.25, 1.0).normalize(), 4.0)
    }

    fn smooth_depth(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
        let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        DepthMap::new(Grid::from_fn(w, h, |x, y| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            4.0 + a[0] * u + a[1] * v + 0.8 * (a[2] * 3.0 * u).sin() * (a[3] * 2.0 * v).cos() + a[4] * u * v + 0.3 * a[5] * u * u
        }))
        .unwrap()
    }

    #[test]
    fn fronto_parallel_plane_faces_camera_exactly() {
        let depth = DepthMap::constant(9, 7, 3.5).unwrap();
        let est = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for n in est.normals.data() {
            assert_eq!(*n, Vector3::new(0.0, 0.0, -1.0));
        }
        assert!(est.flagged.data().iter().all(|f| !f));
    }

    #[test]
    fn slanted_plane_normal_recovered() {
        let (n, d) = slanted();
        let depth = plane_depth(16, 12, &k(), n, d);
        let est = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let got = est.normals.get(x, y);
                let angle = got.dot(&-n).clamp(-1.0, 1.0).acos();
                assert!(angle < 1e-6, "({x},{y}) angle {angle}");
            }
        }
    }

    #[test]
    fn eigen_solution_beats_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let depth = smooth_depth(&mut rng, 12, 10);
        let est = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        let base = consistency_energy(&depth, &est.normals, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for _ in 0..6 {
            let (x, y) = (rng.random_range(0..12), rng.random_range(0..10));
            for _ in 0..1000 {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let mut field = est.normals.grid().clone();
                *field.get_mut(x, y) = v;
                let other = consistency_energy(&depth, &NormalMap::new(field).unwrap(), &k(), &NeighborhoodWeights::Uniform).unwrap();
                assert!(base.per_pixel.get(x, y) <= &(other.per_pixel.get(x, y) + 1e-15));
            }
        }
    }

    #[test]
    fn normals_unit_and_camera_facing() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let depth = smooth_depth(&mut rng, 14, 11);
        let est = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for y in 0..11 {
            for x in 0..14 {
                let n = est.normals.get(x, y);
                assert!((n.norm() - 1.0).abs() < 1e-6);
                if !est.flagged.get(x, y) {
                    assert!(n.dot(&k().ray(x as f64, y as f64)) < 0.0);
                }
            }
        }
    }

    #[test]
    fn scale_covariance() {
        let (n, d) = slanted();
        let depth = plane_depth(10, 8, &k(), n, d);
        let a = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        let b = depth_to_normal(&depth.scaled(7.5).unwrap(), &k(), &NeighborhoodWeights::Uniform).unwrap();
        for (p, q) in a.normals.data().iter().zip(b.normals.data()) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn degenerate_scatter_is_flagged() {
        // A single bright pixel far from its neighbours still spans 2 dims, so
        // use image weights to switch all but one neighbour off.
        let depth = DepthMap::constant(3, 3, 2.0).unwrap();
        let mut intensity = Grid::filled(3, 3, 0.0);
        *intensity.get_mut(1, 1) = 1.0;
        *intensity.get_mut(2, 1) = 1.0;
        let weights = NeighborhoodWeights::ImageGradient {
            alpha: 1e6,
            intensity,
        };
        let est = depth_to_normal(&depth, &k(), &weights).unwrap();
        assert!(*est.flagged.get(1, 1));
        assert_eq!(*est.normals.get(1, 1), Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn too_small_rejected() {
        let depth = DepthMap::constant(2, 5, 1.0).unwrap();
        assert!(matches!(depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform), Err(Error::Size(_))));
    }

    #[test]
    fn plane_is_fixed_point_of_reestimation() {
        let (n, d) = slanted();
        let depth = plane_depth(16, 12, &k(), n, d);
        let normals = NormalMap::constant(16, 12, -n).unwrap();
        let out = normal_to_depth(&depth, &normals, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for (a, b) in out.depth.data().iter().zip(depth.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let constant = DepthMap::constant(6, 5, 2.5).unwrap();
        let facing = NormalMap::constant(6, 5, Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let out = normal_to_depth(&constant, &facing, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for a in out.depth.data() {
            assert!((a - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_then_reestimate_is_identity_on_planes() {
        let (n, d) = slanted();
        let depth = plane_depth(16, 12, &k(), n, d);
        let est = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        let out = normal_to_depth(&depth, &est.normals, &k(), &NeighborhoodWeights::Uniform).unwrap();
        for (a, b) in out.depth.data().iter().zip(depth.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reestimation_denoises_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, d) = slanted();
        let clean = plane_depth(20, 16, &k(), n, d);
        let noisy = DepthMap::new(Grid::from_fn(20, 16, |x, y| clean.get(x, y) * (1.0 + rng.random_range(-0.05..0.05)))).unwrap();
        let normals = NormalMap::constant(20, 16, -n).unwrap();
        let out = normal_to_depth(&noisy, &normals, &k(), &NeighborhoodWeights::Uniform).unwrap();
        let err = |m: &DepthMap| m.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(err(&out.depth) < err(&noisy));
    }

    #[test]
    fn grazing_ray_keeps_input_depth() {
        let depth = DepthMap::constant(3, 3, 2.0).unwrap();
        // Normal orthogonal to the centre ray.
        let normals = NormalMap::constant(3, 3, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let k = Intrinsics::new(10.0, 10.0, 1.0, 1.0).unwrap();
        let out = normal_to_depth(&depth, &normals, &k, &NeighborhoodWeights::Uniform).unwrap();
        assert!(*out.flagged.get(1, 1));
        assert_eq!(*out.depth.get(1, 1), 2.0);
    }

    #[test]
    fn energy_zero_on_plane_positive_when_rotated() {
        let (n, d) = slanted();
        let depth = plane_depth(12, 9, &k(), n, d);
        let good = NormalMap::constant(12, 9, -n).unwrap();
        let e = consistency_energy(&depth, &good, &k(), &NeighborhoodWeights::Uniform).unwrap();
        assert!(e.value < 1e-12);
        let rotated = Vector3::new(-n.z, 0.0, n.x).normalize();
        let bad = NormalMap::constant(12, 9, rotated).unwrap();
        let e = consistency_energy(&depth, &bad, &k(), &NeighborhoodWeights::Uniform).unwrap();
        assert!(e.value > 0.0);
    }

    #[test]
    fn energy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (w, h) = (7, 6);
        let depth = DepthMap::new(Grid::from_fn(w, h, |_, _| rng.random_range(1.0..5.0))).unwrap();
        let normals = NormalMap::new(Grid::from_fn(w, h, |_, _| {
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.1)).normalize()
        }))
        .unwrap();
        let img = ImageF::from_fn(w, h, 1, |_, _, _| rng.random_range(0.0..1.0));
        let weights = NeighborhoodWeights::image_gradient(&img, 2.0).unwrap();
        let e = consistency_energy(&depth, &normals, &k(), &weights).unwrap();
        let kk = k();
        let mut total = 0.0;
        for ty in 0..h as isize {
            for tx in 0..w as isize {
                let pt = kk.ray(tx as f64, ty as f64) * depth[(tx as usize, ty as usize)];
                for jy in 0..h as isize {
                    for jx in 0..w as isize {
                        let (dx, dy) = (jx - tx, jy - ty);
                        if (dx, dy) == (0, 0) || dx.abs() > 1 || dy.abs() > 1 {
                            continue;
                        }
                        let pj = kk.ray(jx as f64, jy as f64) * depth[(jx as usize, jy as usize)];
                        let i_t = img.at(tx as usize, ty as usize, 0);
                        let i_j = img.at(jx as usize, jy as usize, 0);
                        let wt = (-2.0 * (i_j - i_t).abs()).exp();
                        total += wt * (pj - pt).dot(&normals[(tx as usize, ty as usize)]).powi(2);
                    }
                }
            }
        }
        assert!((e.value - total / (w * h) as f64).abs() < 1e-12);
    }

    /// ⟨g, f(D)⟩ for the normal estimate.
    fn normal_objective(depth: &DepthMap, g: &Grid<Vector3<f64>>) -> f64 {
        let est = depth_to_normal(depth, &k(), &NeighborhoodWeights::Uniform).unwrap();
        est.normals.data().iter().zip(g.data()).map(|(n, g)| n.dot(g)).sum()
    }

    #[test]
    fn depth_to_normal_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let depth = smooth_depth(&mut rng, 9, 8);
        let g = Grid::from_fn(9, 8, |_, _| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let grad = depth_to_normal_vjp(&depth, &k(), &NeighborhoodWeights::Uniform, &g).unwrap();
        let h = 1e-6;
        for y in 0..8 {
            for x in 0..9 {
                let mut plus = depth.grid().clone();
                let mut minus = depth.grid().clone();
                *plus.get_mut(x, y) += h;
                *minus.get_mut(x, y) -= h;
                let fd = (normal_objective(&DepthMap::new(plus).unwrap(), &g) - normal_objective(&DepthMap::new(minus).unwrap(), &g)) / (2.0 * h);
                let a = *grad.get(x, y);
                assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "({x},{y}) analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn normal_to_depth_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let depth = smooth_depth(&mut rng, 8, 7);
        let normals = depth_to_normal(&depth, &k(), &NeighborhoodWeights::Uniform).unwrap().normals;
        let g = Grid::from_fn(8, 7, |_, _| rng.random_range(-1.0..1.0));
        let img = ImageF::from_fn(8, 7, 1, |_, _, _| rng.random_range(0.0..1.0));
        let weights = NeighborhoodWeights::image_gradient(&img, 1.5).unwrap();
        let (gd, gn) = normal_to_depth_vjp(&depth, &normals, &k(), &weights, &g).unwrap();
        // Normals enter unconstrained here, so perturb the raw components.
        let objective = |d: &Grid<f64>, n: &Grid<Vector3<f64>>| {
            let pixels = Grid::from_fn(8, 7, |x, y| reestimate_pixel(d, n.get(x, y), &k(), &weights, x, y).value);
            pixels.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for y in 0..7 {
            for x in 0..8 {
                let mut p = depth.grid().clone();
                let mut m = depth.grid().clone();
                *p.get_mut(x, y) += h;
                *m.get_mut(x, y) -= h;
                let fd = (objective(&p, normals.grid()) - objective(&m, normals.grid())) / (2.0 * h);
                assert!((gd.get(x, y) - fd).abs() < 1e-6 * (1.0 + fd.abs()));
                for c in 0..3 {
                    let mut p = normals.grid().clone();
                    let mut m = normals.grid().clone();
                    p.get_mut(x, y)[c] += h;
                    m.get_mut(x, y)[c] -= h;
                    let fd = (objective(depth.grid(), &p) - objective(depth.grid(), &m)) / (2.0 * h);
                    assert!((gn.get(x, y)[c] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
