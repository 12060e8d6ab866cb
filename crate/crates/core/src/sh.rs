//! Degree-1 real spherical-harmonic colour, per-texel rotation and canonicalization.
//!
//! Coefficients are stored per colour as `[dc, y1m1, y10, y11]`, so channel `c`
//! occupies `eta[4c..4c + 4]`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Coefficients per colour channel.
pub const SH_PER_COLOR: usize = 4;
pub const SH_COEFFS: usize = 3 * SH_PER_COLOR;

const ROTATION_TOLERANCE: f64 = 1e-5;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Maps a direction to the linear-band basis order: `(-y, z, -x)`.
fn band_permutation() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sh1Coefficients(pub [f64; SH_COEFFS]);

impl Sh1Coefficients {
    pub fn zeros() -> Self {
        Sh1Coefficients([0.0; SH_COEFFS])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; SH_COEFFS] = values
            .try_into()
            .map_err(|_| Error::Shape(format!("expected {SH_COEFFS} SH coefficients, got {}", values.len())))?;
        Ok(Sh1Coefficients(arr))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        Self::from_slice(&v)
    }

    pub fn dc(&self, color: usize) -> f64 {
        self.0[color * SH_PER_COLOR]
    }

    pub fn linear(&self, color: usize) -> Vector3<f64> {
        let b = color * SH_PER_COLOR;
        Vector3::new(self.0[b + 1], self.0[b + 2], self.0[b + 3])
    }

    fn set_linear(&mut self, color: usize, v: &Vector3<f64>) {
        let b = color * SH_PER_COLOR;
        self.0[b + 1..b + 4].copy_from_slice(v.as_slice());
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numerical(format!("SH coefficient {i} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = *self;
        out.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a -= b);
        out
    }
}

/// A proper rotation, checked for orthonormality and unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelRotation(Matrix3<f64>);

impl TexelRotation {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !ortho.is_finite() || ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::NotARotation(format!("orthonormality error {ortho:.3e}, determinant {det:.6}")));
        }
        Ok(TexelRotation(m))
    }

    pub fn identity() -> Self {
        TexelRotation(Matrix3::identity())
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        TexelRotation(*r.matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        TexelRotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        TexelRotation(self.0 * other.0)
    }
}

/// Degree-1 real SH basis at direction `d`.
pub fn sh_basis(d: &Vector3<f64>) -> [f64; SH_PER_COLOR] {
    [SH_C0, -SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

/// Plain evaluation, one value per colour.
pub fn sh_eval(eta: &Sh1Coefficients, d: &Vector3<f64>) -> [f64; 3] {
    let b = sh_basis(d);
    std::array::from_fn(|c| {
        let e = &eta.0[c * SH_PER_COLOR..(c + 1) * SH_PER_COLOR];
        e.iter().zip(&b).map(|(x, y)| x * y).sum()
    })
}

/// The 3x3 matrix acting on the linear band when directions are rotated by `r`.
pub fn wigner_matrix(r: &TexelRotation) -> Matrix3<f64> {
    let p = band_permutation();
    p * r.matrix() * p.transpose()
}

/// Rotates every colour's linear band; the DC terms are copied unchanged.
pub fn wigner_rotate_sh1(eta: &Sh1Coefficients, r: &TexelRotation) -> Sh1Coefficients {
    let w = wigner_matrix(r);
    let mut out = *eta;
    for c in 0..3 {
        out.set_linear(c, &(w * eta.linear(c)));
    }
    out
}

/// Posed coefficients brought back to the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalSh {
    /// `reference + offset`.
    pub coefficients: Sh1Coefficients,
    /// Difference to the canonical reference, the quantity the texture stores.
    pub offset: Sh1Coefficients,
}

pub fn canonicalize(
    eta_posed: &Sh1Coefficients,
    r: &TexelRotation,
    reference: &Sh1Coefficients,
) -> Result<CanonicalSh> {
    eta_posed.check_finite()?;
    reference.check_finite()?;
    let coefficients = wigner_rotate_sh1(eta_posed, &r.inverse());
    Ok(CanonicalSh { coefficients, offset: coefficients.sub(reference) })
}

/// Colour of canonical coefficients seen from posed direction `d` under texel rotation `r`.
pub fn eval_color(eta_canonical: &Sh1Coefficients, r: &TexelRotation, d: &Vector3<f64>) -> Result<[f64; 3]> {
    let n = d.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!("view direction has norm {n}, expected 1")));
    }
    Ok(sh_eval(eta_canonical, &(r.matrix().transpose() * d)))
}
