//! Space-time Gaussian primitives stored as a structure of arrays.
//!
//! Every primitive carries eight learnable raw fields. Constrained quantities
//! are stored unconstrained and mapped through an activation:
//!
//! | field         | raw storage              | activation              |
//! |---------------|--------------------------|-------------------------|
//! | position      | 3 floats                 | identity                |
//! | time          | 1 float                  | identity (not clamped)  |
//! | duration      | log                      | `exp`                   |
//! | velocity      | 3 floats                 | identity                |
//! | scale         | log, 3 floats            | `exp`                   |
//! | rotation      | quaternion `(w, x, y, z)`| normalization           |
//! | opacity       | logit                    | `sigmoid`               |
//! | sh            | `3 × (L+1)²` floats      | identity                |
//!
//! The evaluation functions (`motion_position`, `temporal_opacity`,
//! `covariance`, `spacetime_opacity`) each come with a vector-Jacobian product
//! back to the raw fields, which the rasterizer's backward pass composes.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::AddAssign;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::appearance::sh_coeff_count;
use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 3;

/// One of the eight raw parameter arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Field {
    Position,
    Time,
    Duration,
    Velocity,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::Position,
        Field::Time,
        Field::Duration,
        Field::Velocity,
        Field::Scale,
        Field::Rotation,
        Field::Opacity,
        Field::Sh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Position => "position",
            Field::Time => "time",
            Field::Duration => "duration",
            Field::Velocity => "velocity",
            Field::Scale => "scale",
            Field::Rotation => "rotation",
            Field::Opacity => "opacity",
            Field::Sh => "sh",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Number of scalars per primitive.
    pub fn width(self, sh_degree: usize) -> usize {
        match self {
            Field::Position | Field::Velocity | Field::Scale => 3,
            Field::Time | Field::Duration | Field::Opacity => 1,
            Field::Rotation => 4,
            Field::Sh => 3 * sh_coeff_count(sh_degree),
        }
    }
}

/// Raw (pre-activation) values of a single primitive, used to build sets.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrimitive {
    pub position: [f64; 3],
    pub time: f64,
    pub log_duration: f64,
    pub velocity: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Channel-major: `sh[c * K + k]` for channel `c` and basis index `k`.
    pub sh: Vec<f64>,
}

impl RawPrimitive {
    /// A unit-scale, identity-rotation, half-opaque primitive at `position`,
    /// with all SH coefficients zero.
    pub fn at(position: [f64; 3], time: f64, sh_degree: usize) -> Self {
        RawPrimitive {
            position,
            time,
            log_duration: 0.0,
            velocity: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: vec![0.0; 3 * sh_coeff_count(sh_degree)],
        }
    }
}

/// Structure-of-arrays storage for `count` primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    sh_degree: usize,
    pub position: Vec<f64>,
    pub time: Vec<f64>,
    pub log_duration: Vec<f64>,
    pub velocity: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub rotation: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "sh degree {sh_degree} exceeds the supported maximum {MAX_SH_DEGREE}"
            )));
        }
        Ok(GaussianSet {
            sh_degree,
            position: Vec::new(),
            time: Vec::new(),
            log_duration: Vec::new(),
            velocity: Vec::new(),
            log_scale: Vec::new(),
            rotation: Vec::new(),
            opacity_logit: Vec::new(),
            sh: Vec::new(),
        })
    }

    /// A set of `count` primitives with every raw value zero.
    pub fn zeros(count: usize, sh_degree: usize) -> Result<Self> {
        let mut set = GaussianSet::new(sh_degree)?;
        for f in Field::ALL {
            *set.field_vec_mut(f) = vec![0.0; count * f.width(sh_degree)];
        }
        Ok(set)
    }

    pub fn zeros_like(&self) -> Self {
        GaussianSet::zeros(self.count(), self.sh_degree).expect("degree already validated")
    }

    pub fn from_primitives(sh_degree: usize, prims: &[RawPrimitive]) -> Result<Self> {
        let mut set = GaussianSet::new(sh_degree)?;
        for p in prims {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, p: &RawPrimitive) -> Result<()> {
        let expected = Field::Sh.width(self.sh_degree);
        if p.sh.len() != expected {
            return Err(Error::Shape {
                field: "sh".into(),
                expected,
                found: p.sh.len(),
            });
        }
        self.position.extend_from_slice(&p.position);
        self.time.push(p.time);
        self.log_duration.push(p.log_duration);
        self.velocity.extend_from_slice(&p.velocity);
        self.log_scale.extend_from_slice(&p.log_scale);
        self.rotation.extend_from_slice(&p.rotation);
        self.opacity_logit.push(p.opacity_logit);
        self.sh.extend_from_slice(&p.sh);
        Ok(())
    }

    pub fn primitive(&self, i: usize) -> Result<RawPrimitive> {
        self.check_index(i)?;
        let k = self.sh_stride();
        Ok(RawPrimitive {
            position: vec3_at(&self.position, i),
            time: self.time[i],
            log_duration: self.log_duration[i],
            velocity: vec3_at(&self.velocity, i),
            log_scale: vec3_at(&self.log_scale, i),
            rotation: [
                self.rotation[4 * i],
                self.rotation[4 * i + 1],
                self.rotation[4 * i + 2],
                self.rotation[4 * i + 3],
            ],
            opacity_logit: self.opacity_logit[i],
            sh: self.sh[i * k..(i + 1) * k].to_vec(),
        })
    }

    pub fn count(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Number of SH scalars per primitive (all three channels).
    pub fn sh_stride(&self) -> usize {
        Field::Sh.width(self.sh_degree)
    }

    pub fn field(&self, f: Field) -> &[f64] {
        match f {
            Field::Position => &self.position,
            Field::Time => &self.time,
            Field::Duration => &self.log_duration,
            Field::Velocity => &self.velocity,
            Field::Scale => &self.log_scale,
            Field::Rotation => &self.rotation,
            Field::Opacity => &self.opacity_logit,
            Field::Sh => &self.sh,
        }
    }

    pub fn field_mut(&mut self, f: Field) -> &mut [f64] {
        self.field_vec_mut(f).as_mut_slice()
    }

    fn field_vec_mut(&mut self, f: Field) -> &mut Vec<f64> {
        match f {
            Field::Position => &mut self.position,
            Field::Time => &mut self.time,
            Field::Duration => &mut self.log_duration,
            Field::Velocity => &mut self.velocity,
            Field::Scale => &mut self.log_scale,
            Field::Rotation => &mut self.rotation,
            Field::Opacity => &mut self.opacity_logit,
            Field::Sh => &mut self.sh,
        }
    }

    /// Checks that every array has `count × width` entries.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        for f in Field::ALL {
            let expected = n * f.width(self.sh_degree);
            let found = self.field(f).len();
            if expected != found {
                return Err(Error::Shape {
                    field: f.name().into(),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for f in Field::ALL {
            self.field_mut(f).fill(0.0);
        }
    }

    /// Copies every raw field of primitive `src` onto primitive `dst`.
    pub fn copy_primitive(&mut self, src: usize, dst: usize) {
        for f in Field::ALL {
            let w = f.width(self.sh_degree);
            self.field_mut(f)
                .copy_within(src * w..(src + 1) * w, dst * w);
        }
    }

    /// Zeroes every raw field of primitive `i`.
    pub fn zero_primitive(&mut self, i: usize) {
        for f in Field::ALL {
            let w = f.width(self.sh_degree);
            self.field_mut(f)[i * w..(i + 1) * w].fill(0.0);
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for f in Field::ALL {
            for v in self.field_mut(f) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Hash of the exact bit patterns of every raw value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sh_degree.hash(&mut h);
        for f in Field::ALL {
            for v in self.field(f) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    pub fn duration(&self, i: usize) -> f64 {
        self.log_duration[i].exp()
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(vec3_at(&self.log_scale, i)).map(f64::exp)
    }

    pub fn activate(&self, i: usize) -> Result<ActivatedGaussian<'_>> {
        self.check_index(i)?;
        let raw_q = Vector4::new(
            self.rotation[4 * i],
            self.rotation[4 * i + 1],
            self.rotation[4 * i + 2],
            self.rotation[4 * i + 3],
        );
        let norm = raw_q.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateQuaternion { index: i });
        }
        let quat = raw_q / norm;
        let k = self.sh_stride();
        Ok(ActivatedGaussian {
            index: i,
            position: Vector3::from(vec3_at(&self.position, i)),
            time: self.time[i],
            duration: self.duration(i),
            velocity: Vector3::from(vec3_at(&self.velocity, i)),
            scale: self.scale(i),
            quat,
            quat_raw_norm: norm,
            rotation: quat_to_matrix(&quat),
            opacity: self.opacity(i),
            sh: &self.sh[i * k..(i + 1) * k],
            sh_degree: self.sh_degree,
        })
    }

    /// Like [`activate`](Self::activate) but also rejects non-finite raw values.
    pub fn activate_checked(&self, i: usize) -> Result<ActivatedGaussian<'_>> {
        self.check_index(i)?;
        for f in Field::ALL {
            let w = f.width(self.sh_degree);
            if self.field(f)[i * w..(i + 1) * w]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    field: f.name(),
                    index: i,
                });
            }
        }
        self.activate(i)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.count() {
            return Err(Error::OutOfBounds {
                index: i,
                count: self.count(),
            });
        }
        Ok(())
    }
}

fn vec3_at(v: &[f64], i: usize) -> [f64; 3] {
    [v[3 * i], v[3 * i + 1], v[3 * i + 2]]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Post-activation view of one primitive.
#[derive(Clone, Debug)]
pub struct ActivatedGaussian<'a> {
    pub index: usize,
    pub position: Vector3<f64>,
    pub time: f64,
    pub duration: f64,
    pub velocity: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub quat: Vector4<f64>,
    /// Norm of the stored quaternion, needed to differentiate the normalization.
    pub quat_raw_norm: f64,
    pub rotation: Matrix3<f64>,
    pub opacity: f64,
    pub sh: &'a [f64],
    pub sh_degree: usize,
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient with respect to the quaternion components, given `dL/dR`.
fn quat_to_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}

/// Gradient of a scalar with respect to the raw fields of one primitive,
/// SH coefficients excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vector3<f64>,
    pub time: f64,
    pub log_duration: f64,
    pub velocity: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
}

impl AddAssign for PrimitiveGrad {
    fn add_assign(&mut self, o: Self) {
        self.position += o.position;
        self.time += o.time;
        self.log_duration += o.log_duration;
        self.velocity += o.velocity;
        self.log_scale += o.log_scale;
        self.rotation += o.rotation;
        self.opacity_logit += o.opacity_logit;
    }
}

impl PrimitiveGrad {
    /// Adds this gradient into the arrays of `target` at primitive `i`.
    pub fn scatter_into(&self, target: &mut GaussianSet, i: usize) {
        for a in 0..3 {
            target.position[3 * i + a] += self.position[a];
            target.velocity[3 * i + a] += self.velocity[a];
            target.log_scale[3 * i + a] += self.log_scale[a];
        }
        for a in 0..4 {
            target.rotation[4 * i + a] += self.rotation[a];
        }
        target.time[i] += self.time;
        target.log_duration[i] += self.log_duration;
        target.opacity_logit[i] += self.opacity_logit;
    }
}

/// `μₓ(t) = μₓ + v·(t − μ_t)`.
pub fn motion_position(g: &ActivatedGaussian<'_>, t: f64) -> Vector3<f64> {
    g.position + g.velocity * (t - g.time)
}

/// Pulls `dL/dμₓ(t)` back to position, velocity and time.
pub fn motion_position_vjp(
    g: &ActivatedGaussian<'_>,
    t: f64,
    d_mu: &Vector3<f64>,
) -> PrimitiveGrad {
    PrimitiveGrad {
        position: *d_mu,
        velocity: d_mu * (t - g.time),
        time: -d_mu.dot(&g.velocity),
        ..Default::default()
    }
}

/// `σ(t) = exp(−½((t − μ_t)/s)²)`.
pub fn temporal_opacity(g: &ActivatedGaussian<'_>, t: f64) -> f64 {
    let u = (t - g.time) / g.duration;
    (-0.5 * u * u).exp()
}

/// Pulls `dL/dσ(t)` back to time and log-duration.
pub fn temporal_opacity_vjp(g: &ActivatedGaussian<'_>, t: f64, d_sigma_t: f64) -> PrimitiveGrad {
    let s = g.duration;
    let dt = t - g.time;
    let sig = temporal_opacity(g, t);
    PrimitiveGrad {
        time: d_sigma_t * sig * dt / (s * s),
        // dσ/ds = σ·dt²/s³ and ds/dlog_s = s
        log_duration: d_sigma_t * sig * dt * dt / (s * s),
        ..Default::default()
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance(g: &ActivatedGaussian<'_>) -> Matrix3<f64> {
    let m = g.rotation * Matrix3::from_diagonal(&g.scale);
    m * m.transpose()
}

/// Pulls `dL/dΣ` (full 3×3 matrix gradient) back to log-scale and the raw quaternion.
pub fn covariance_vjp(g: &ActivatedGaussian<'_>, d_cov: &Matrix3<f64>) -> PrimitiveGrad {
    let m = g.rotation * Matrix3::from_diagonal(&g.scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_rot = Matrix3::zeros();
    let mut d_log_scale = Vector3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += d_m[(r, k)] * g.rotation[(r, k)];
            d_rot[(r, k)] = d_m[(r, k)] * g.scale[k];
        }
        d_log_scale[k] = ds * g.scale[k];
    }
    let d_quat = quat_to_matrix_vjp(&g.quat, &d_rot);
    // q = r/|r|  ⇒  dL/dr = (dL/dq − q (q·dL/dq)) / |r|
    let d_raw = (d_quat - g.quat * g.quat.dot(&d_quat)) / g.quat_raw_norm;
    PrimitiveGrad {
        log_scale: d_log_scale,
        rotation: d_raw,
        ..Default::default()
    }
}

/// `σ(x, t) = σ(t)·σ·exp(−½ (x−μₓ(t))ᵀ Σ⁻¹ (x−μₓ(t)))`.
pub fn spacetime_opacity(g: &ActivatedGaussian<'_>, x: &Vector3<f64>, t: f64) -> f64 {
    let d = x - motion_position(g, t);
    let inv = covariance(g)
        .try_inverse()
        .expect("covariance is positive definite for finite positive scales");
    temporal_opacity(g, t) * g.opacity * (-0.5 * d.dot(&(inv * d))).exp()
}

/// Gradient of [`spacetime_opacity`] with respect to every raw field.
pub fn spacetime_opacity_grad(
    g: &ActivatedGaussian<'_>,
    x: &Vector3<f64>,
    t: f64,
) -> PrimitiveGrad {
    let d = x - motion_position(g, t);
    let inv = covariance(g)
        .try_inverse()
        .expect("covariance is positive definite for finite positive scales");
    let inv_d = inv * d;
    let spatial = (-0.5 * d.dot(&inv_d)).exp();
    let sig_t = temporal_opacity(g, t);
    let value = sig_t * g.opacity * spatial;

    let mut grad = motion_position_vjp(g, t, &(inv_d * value));
    grad += temporal_opacity_vjp(g, t, g.opacity * spatial);
    grad += covariance_vjp(g, &(inv_d * inv_d.transpose() * (0.5 * value)));
    grad.opacity_logit = value * (1.0 - g.opacity);
    grad
}
