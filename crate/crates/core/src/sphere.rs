//! Higher-order Poincaré sphere bookkeeping.
//!
//! The north pole is the pure `e_L·LG_{m1}` state. The 26-sector partition
//! has two polar caps and three θ-bands of eight φ-sectors each:
//!
//! ```text
//! index 0            θ ∈ [0, π/8)
//! index 1 + 8b + t   θ ∈ [(2b+1)π/8, (2b+3)π/8), φ ∈ [tπ/4, (t+1)π/4)
//! index 25           θ ∈ [7π/8, π]
//! ```

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::optics::reduce_angle;

pub const SECTOR_COUNT: usize = 26;
pub const NORTH_CAP: usize = 0;
pub const SOUTH_CAP: usize = 25;
const PHI_SECTORS: usize = 8;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochVector(pub Vector3<f64>);

impl BlochVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        bloch_from_angles(theta, phi)
    }

    /// `(θ, φ)` with `φ ∈ [0, 2π)`. The vector is normalized first.
    pub fn angles(&self) -> (f64, f64) {
        let n = self.0.normalize();
        let theta = n.z.clamp(-1.0, 1.0).acos();
        let phi = reduce_angle(n.y.atan2(n.x));
        (theta, phi)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn dot(&self, other: &BlochVector) -> f64 {
        self.0.dot(&other.0)
    }
}

/// `(sinθ cosφ, sinθ sinφ, cosθ)`.
pub fn bloch_from_angles(theta: f64, phi: f64) -> BlochVector {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    BlochVector::new(st * cp, st * sp, ct)
}

/// θ-edges of the partition: caps below π/8 and above 7π/8.
pub fn theta_edges() -> [f64; 6] {
    [0.0, FRAC_PI_8, 3.0 * FRAC_PI_8, 5.0 * FRAC_PI_8, 7.0 * FRAC_PI_8, PI]
}

pub fn phi_edges() -> [f64; PHI_SECTORS + 1] {
    std::array::from_fn(|t| t as f64 * FRAC_PI_4)
}

/// Sector holding `(θ, φ)`; intervals are half-open except the closed south cap.
pub fn sector_index(theta: f64, phi: f64) -> Result<usize> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain(format!("theta {theta} outside [0, π]")));
    }
    if !phi.is_finite() {
        return Err(Error::domain("phi must be finite"));
    }
    let edges = theta_edges();
    if theta < edges[1] {
        return Ok(NORTH_CAP);
    }
    if theta >= edges[4] {
        return Ok(SOUTH_CAP);
    }
    let band = (1..4).rev().find(|&b| theta >= edges[b]).unwrap_or(1) - 1;
    let phi = reduce_angle(phi);
    let mut t = (phi / FRAC_PI_4).floor() as usize;
    // guard the float division against edge rounding
    let pe = phi_edges();
    while t > 0 && phi < pe[t] {
        t -= 1;
    }
    while t + 1 < PHI_SECTORS && phi >= pe[t + 1] {
        t += 1;
    }
    Ok(1 + PHI_SECTORS * band + t.min(PHI_SECTORS - 1))
}

/// Solid-angle patch of one sector: `(θ_lo, θ_hi, φ_lo, φ_hi)`.
pub fn sector_bounds(index: usize) -> Option<(f64, f64, f64, f64)> {
    let te = theta_edges();
    let pe = phi_edges();
    match index {
        NORTH_CAP => Some((te[0], te[1], 0.0, 2.0 * PI)),
        SOUTH_CAP => Some((te[4], te[5], 0.0, 2.0 * PI)),
        1..=24 => {
            let band = (index - 1) / PHI_SECTORS;
            let t = (index - 1) % PHI_SECTORS;
            Some((te[band + 1], te[band + 2], pe[t], pe[t + 1]))
        }
        _ => None,
    }
}

/// Whether two band sectors share a θ-band and sit one φ-step apart (cyclically).
pub fn phi_adjacent(a: usize, b: usize) -> bool {
    if !(1..=24).contains(&a) || !(1..=24).contains(&b) || a == b {
        return false;
    }
    let (ba, ta) = ((a - 1) / PHI_SECTORS, (a - 1) % PHI_SECTORS);
    let (bb, tb) = ((b - 1) / PHI_SECTORS, (b - 1) % PHI_SECTORS);
    ba == bb && ((ta + 1) % PHI_SECTORS == tb || (tb + 1) % PHI_SECTORS == ta)
}

/// Pure-state fidelity `√((1 + a·b)/2)`.
pub fn fidelity(a: &BlochVector, b: &BlochVector) -> Result<f64> {
    for v in [a, b] {
        if (v.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::domain(format!(
                "Bloch vector norm {} is not 1",
                v.norm()
            )));
        }
    }
    Ok(((1.0 + a.dot(b)) / 2.0).clamp(0.0, 1.0).sqrt())
}

/// Similarity transform taking reduced-space points onto the Bloch sphere:
/// `n ≈ scale · R · (p - offset)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereAlignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub offset: Vector3<f64>,
}

impl SphereAlignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * (p - self.offset)
    }

    /// Transformed point projected onto the unit sphere.
    pub fn estimate(&self, p: &Vector3<f64>) -> BlochVector {
        let q = self.apply(p);
        let n = q.norm();
        if n > 0.0 {
            BlochVector(q / n)
        } else {
            BlochVector::new(0.0, 0.0, 1.0)
        }
    }

    /// Root-mean-square residual `‖apply(p) - n‖` over a calibration set.
    pub fn rms_residual(&self, points: &[Vector3<f64>], references: &[BlochVector]) -> f64 {
        let sum: f64 = points
            .iter()
            .zip(references)
            .map(|(p, n)| (self.apply(p) - n.0).norm_squared())
            .sum();
        (sum / points.len() as f64).sqrt()
    }
}

/// Least-squares similarity fit (Kabsch/Umeyama with uniform scale).
///
/// Reflections are admitted since principal axes carry no orientation.
pub fn align_to_sphere(
    points: &[Vector3<f64>],
    references: &[BlochVector],
) -> Result<SphereAlignment> {
    if points.len() != references.len() {
        return Err(Error::shape(
            format!("{} references", points.len()),
            references.len(),
        ));
    }
    let n = points.len();
    if n < 4 {
        return Err(Error::Rank(format!(
            "need at least 4 calibration pairs, got {n}"
        )));
    }
    let inv = 1.0 / n as f64;
    let pc = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) * inv;
    let qc = references.iter().fold(Vector3::zeros(), |acc, q| acc + q.0) * inv;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut scatter = Matrix3::zeros();
    for (p, q) in points.iter().zip(references) {
        let dp = p - pc;
        let dq = q.0 - qc;
        cov += dq * dp.transpose();
        scatter += dp * dp.transpose();
        var_p += dp.norm_squared();
    }
    let spread = scatter.symmetric_eigenvalues();
    let largest = spread.max();
    if !(largest > 0.0) || spread.min() <= 1e-12 * largest {
        return Err(Error::Rank("calibration points are coplanar".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let rotation = u * v_t;
    let trace: f64 = svd.singular_values.iter().sum();
    let scale = trace / var_p;
    // n = s R (p - pc) + qc  =>  offset = pc - R^T qc / s
    let offset = pc - rotation.transpose() * qc / scale;
    Ok(SphereAlignment {
        rotation,
        scale,
        offset,
    })
}
