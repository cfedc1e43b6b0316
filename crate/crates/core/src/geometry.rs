//! Pinhole camera model and rigid transforms.
//!
//! Conventions: camera frame is x right, y down, z forward, so depth is the z
//! coordinate. Integer pixel `(i, j)` has continuous coordinate `(i, j)`.
//!
//! Poses are 6-vectors `[ωx, ωy, ωz, tx, ty, tz]`: the rotation is the
//! exponential map of `ω` (Rodrigues) and the translation is stored directly,
//! so `x ↦ exp(ω)·x + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D point in the camera frame, meters.
pub type Point3 = Vector3<f64>;

/// Below this rotation angle the exponential map switches to its Taylor form.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Domain("principal point must be finite".into()));
        }
        Ok(())
    }

    /// Viewing ray `K⁻¹ h(p)`, with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics of pyramid level `level` when each level is a 2×2 box
    /// average of the previous one. Coarse pixel `i` covers fine pixels
    /// `2i` and `2i+1`, so `u_fine = 2·u_coarse + 0.5`.
    pub fn at_level(&self, level: usize) -> Intrinsics {
        let mut k = *self;
        for _ in 0..level {
            k = Intrinsics {
                fx: k.fx * 0.5,
                fy: k.fy * 0.5,
                cx: (k.cx - 0.5) * 0.5,
                cy: (k.cy - 0.5) * 0.5,
            };
        }
        k
    }
}

/// Continuous image coordinate (pixels, origin top-left).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v }
    }
}

/// `φ(p) = D(p)·K⁻¹·h(p)`.
pub fn back_project(p: PixelCoord, depth: f64, k: &Intrinsics) -> Result<Point3> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::Domain(format!("depth must be positive and finite, got {depth}")));
    }
    Ok(k.ray(p.u, p.v) * depth)
}

/// Perspective projection. Points with `z ≤ 0` are rejected.
pub fn project(x: &Point3, k: &Intrinsics) -> Result<PixelCoord> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok(PixelCoord {
        u: k.fx * x.x / x.z + k.cx,
        v: k.fy * x.y / x.z + k.cy,
    })
}

/// Apply a rigid transform to a point.
pub fn transform(pose: &PoseSE3, x: &Point3) -> Point3 {
    pose.transform(x)
}

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)`.
fn rodrigues_coeffs(theta_sq: f64) -> (f64, f64, f64) {
    let theta = theta_sq.sqrt();
    if theta < SMALL_ANGLE {
        (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / theta_sq, (theta - s) / (theta_sq * theta))
    }
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coeffs(omega.norm_squared());
    let w = skew(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Left Jacobian of SO(3): `∂(exp(ω)·x)/∂ω = −[exp(ω)·x]ₓ · J_l(ω)`.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coeffs(omega.norm_squared());
    let w = skew(omega);
    Matrix3::identity() + w * b + w * w * c
}

/// Inverse of [`so3_exp`] for rotation angles in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if theta < 2.5 {
        return vee * (theta / (2.0 * theta.sin()));
    }
    // Near π the antisymmetric part vanishes; recover the axis from nnᵀ.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let nn = sym / (1.0 - cos_theta);
    let (mut best, mut best_val) = (0, nn[(0, 0)]);
    for i in 1..3 {
        if nn[(i, i)] > best_val {
            best = i;
            best_val = nn[(i, i)];
        }
    }
    let mut axis: Vector3<f64> = nn.column(best).into_owned() / best_val.max(1e-300).sqrt();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Twist → (rotation, translation).
pub fn se3_exp(twist: &[f64; 6]) -> (Matrix3<f64>, Vector3<f64>) {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    (so3_exp(&omega), Vector3::new(twist[3], twist[4], twist[5]))
}

/// (rotation, translation) → twist.
pub fn se3_log(r: &Matrix3<f64>, t: &Vector3<f64>) -> [f64; 6] {
    let w = so3_log(r);
    [w.x, w.y, w.z, t.x, t.y, t.z]
}

/// Rigid transform `T_{t→s}` stored as a twist.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseSE3 {
    pub twist: [f64; 6],
}

impl PoseSE3 {
    pub const fn identity() -> Self {
        PoseSE3 { twist: [0.0; 6] }
    }

    pub const fn from_twist(twist: [f64; 6]) -> Self {
        PoseSE3 { twist }
    }

    pub fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        PoseSE3 { twist: se3_log(r, t) }
    }

    pub fn omega(&self) -> Vector3<f64> {
        Vector3::new(self.twist[0], self.twist[1], self.twist[2])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3_exp(&self.omega())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.twist[3], self.twist[4], self.twist[5])
    }

    pub fn transform(&self, x: &Point3) -> Point3 {
        self.rotation() * x + self.translation()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let (r1, t1) = (self.rotation(), self.translation());
        let (r2, t2) = (other.rotation(), other.translation());
        PoseSE3::from_rt(&(r1 * r2), &(r1 * t2 + t1))
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation().transpose();
        PoseSE3::from_rt(&rt, &(-(rt * self.translation())))
    }

    /// Scales the translation, keeping the rotation.
    pub fn scaled(&self, s: f64) -> PoseSE3 {
        let mut twist = self.twist;
        for t in &mut twist[3..] {
            *t *= s;
        }
        PoseSE3 { twist }
    }
}
