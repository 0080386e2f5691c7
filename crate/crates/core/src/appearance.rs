//! Real spherical harmonics and view-dependent color.
//!
//! Basis functions are ordered by `(l, m)` with `l = 0..=L`, `m = −l..=l`, so
//! basis index `k = l² + l + m`. The real harmonics use the orthonormal
//! convention without the Condon–Shortley phase (`Y₁₁ ∝ +x`).

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::primitives::{motion_position, ActivatedGaussian, MAX_SH_DEGREE};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2_XY: f64 = 1.092_548_430_592_079_2;
const SH_C2_Z: f64 = 0.315_391_565_252_520_05;
const SH_C2_XX: f64 = 0.546_274_215_296_039_6;
const SH_C3_3: f64 = 0.590_043_589_926_643_5;
const SH_C3_2: f64 = 2.890_611_442_640_554;
const SH_C3_1: f64 = 0.457_045_799_464_465_8;
const SH_C3_0: f64 = 0.373_176_332_590_115_4;
const SH_C3_2B: f64 = 1.445_305_721_320_277;

/// `(L+1)²` basis functions per channel.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShBasis {
    pub degree: usize,
    pub values: Vec<f64>,
}

/// Evaluates the basis at direction `d`. Non-unit directions are normalized.
pub fn sh_basis(d: &Vector3<f64>, degree: usize) -> Result<ShBasis> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::Config(format!(
            "sh degree {degree} is outside 0..={MAX_SH_DEGREE}"
        )));
    }
    let n = d.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateGeometry(
            "spherical harmonics need a non-zero direction".into(),
        ));
    }
    let mut values = vec![0.0; sh_coeff_count(degree)];
    eval_basis(&(d / n), degree, &mut values, None);
    Ok(ShBasis { degree, values })
}

/// Fills `values` (and optionally the gradient of each basis polynomial with
/// respect to the direction components) for a unit direction `d`.
///
/// The gradients are those of the polynomial extension; only their tangential
/// part is meaningful and callers must project out the radial component.
pub fn eval_basis(
    d: &Vector3<f64>,
    degree: usize,
    values: &mut [f64],
    mut grads: Option<&mut [Vector3<f64>]>,
) {
    let (x, y, z) = (d.x, d.y, d.z);
    values[0] = SH_C0;
    if let Some(g) = grads.as_deref_mut() {
        g[0] = Vector3::zeros();
    }
    if degree == 0 {
        return;
    }
    values[1] = SH_C1 * y;
    values[2] = SH_C1 * z;
    values[3] = SH_C1 * x;
    if let Some(g) = grads.as_deref_mut() {
        g[1] = Vector3::new(0.0, SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(SH_C1, 0.0, 0.0);
    }
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    values[4] = SH_C2_XY * x * y;
    values[5] = SH_C2_XY * y * z;
    values[6] = SH_C2_Z * (3.0 * zz - 1.0);
    values[7] = SH_C2_XY * x * z;
    values[8] = SH_C2_XX * (xx - yy);
    if let Some(g) = grads.as_deref_mut() {
        g[4] = SH_C2_XY * Vector3::new(y, x, 0.0);
        g[5] = SH_C2_XY * Vector3::new(0.0, z, y);
        g[6] = SH_C2_Z * Vector3::new(0.0, 0.0, 6.0 * z);
        g[7] = SH_C2_XY * Vector3::new(z, 0.0, x);
        g[8] = SH_C2_XX * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree == 2 {
        return;
    }
    values[9] = SH_C3_3 * y * (3.0 * xx - yy);
    values[10] = SH_C3_2 * x * y * z;
    values[11] = SH_C3_1 * y * (5.0 * zz - 1.0);
    values[12] = SH_C3_0 * z * (5.0 * zz - 3.0);
    values[13] = SH_C3_1 * x * (5.0 * zz - 1.0);
    values[14] = SH_C3_2B * z * (xx - yy);
    values[15] = SH_C3_3 * x * (xx - 3.0 * yy);
    if let Some(g) = grads {
        g[9] = SH_C3_3 * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        g[10] = SH_C3_2 * Vector3::new(y * z, x * z, x * y);
        g[11] = SH_C3_1 * Vector3::new(0.0, 5.0 * zz - 1.0, 10.0 * y * z);
        g[12] = SH_C3_0 * Vector3::new(0.0, 0.0, 15.0 * zz - 3.0);
        g[13] = SH_C3_1 * Vector3::new(5.0 * zz - 1.0, 0.0, 10.0 * x * z);
        g[14] = SH_C3_2B * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        g[15] = SH_C3_3 * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
}

/// Color of a primitive seen from `camera_center` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorEval {
    /// Clamped color, `max(raw, 0)` per channel.
    pub rgb: Vector3<f64>,
    /// Unclamped SH sum.
    pub raw: Vector3<f64>,
    /// Unit view direction, camera → primitive.
    pub direction: Vector3<f64>,
    /// Distance from the camera center to the moved primitive.
    pub distance: f64,
    /// Set when the camera sits on the primitive and `(0, 0, 1)` was used.
    pub degenerate: bool,
    pub basis: Vec<f64>,
}

pub fn eval_color(g: &ActivatedGaussian<'_>, camera_center: &Vector3<f64>, t: f64) -> ColorEval {
    let offset = motion_position(g, t) - camera_center;
    let distance = offset.norm();
    let degenerate = !(distance > 1e-12);
    let direction = if degenerate {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        offset / distance
    };
    let k = sh_coeff_count(g.sh_degree);
    let mut basis = vec![0.0; k];
    eval_basis(&direction, g.sh_degree, &mut basis, None);
    let mut raw = Vector3::<f64>::zeros();
    for c in 0..3 {
        raw[c] = g.sh[c * k..(c + 1) * k]
            .iter()
            .zip(&basis)
            .map(|(a, b)| a * b)
            .sum();
    }
    ColorEval {
        rgb: raw.map(|v| v.max(0.0)),
        raw,
        direction,
        distance,
        degenerate,
        basis,
    }
}

/// Pulls `dL/drgb` back to the SH coefficients (written to `d_sh`, which is
/// overwritten) and to the moved position `μₓ(t)` (returned).
pub fn eval_color_vjp(
    g: &ActivatedGaussian<'_>,
    eval: &ColorEval,
    d_rgb: &Vector3<f64>,
    d_sh: &mut [f64],
) -> Vector3<f64> {
    let k = eval.basis.len();
    let mut d_raw = Vector3::zeros();
    for c in 0..3 {
        if eval.raw[c] > 0.0 {
            d_raw[c] = d_rgb[c];
        }
        for j in 0..k {
            d_sh[c * k + j] = d_raw[c] * eval.basis[j];
        }
    }
    if eval.degenerate || g.sh_degree == 0 || d_raw == Vector3::zeros() {
        return Vector3::zeros();
    }
    let mut values = vec![0.0; k];
    let mut grads = vec![Vector3::zeros(); k];
    eval_basis(&eval.direction, g.sh_degree, &mut values, Some(&mut grads));
    let mut d_dir = Vector3::zeros();
    for c in 0..3 {
        if d_raw[c] == 0.0 {
            continue;
        }
        for j in 1..k {
            d_dir += grads[j] * (d_raw[c] * g.sh[c * k + j]);
        }
    }
    let d = &eval.direction;
    (d_dir - d * d.dot(&d_dir)) / eval.distance
}
