//! Pinhole cameras and EWA projection of 3D Gaussians to screen space.
//!
//! Pixel coordinates put the center of pixel `(col, row)` at `(col, row)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::primitives::{covariance, motion_position, ActivatedGaussian};

pub const DEFAULT_NEAR: f64 = 0.01;
/// Screen-space low-pass dilation added to every projected covariance, in px².
pub const DEFAULT_DILATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    /// World → camera translation.
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            id: id.into(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A camera at `eye` looking at `target`, with image rows running along −`up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: impl Into<String>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            id,
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "camera `{}`: focal lengths must be positive",
                self.id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "camera `{}`: image size must be positive",
                self.id
            )));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax();
        if !(err <= 1e-6) || self.rotation.determinant() < 0.0 {
            return Err(Error::Config(format!(
                "camera `{}`: rotation is not orthonormal (error {err:.2e})",
                self.id
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointProjection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

pub fn project_point(cam: &Camera, p_world: &Vector3<f64>, near: f64) -> PointProjection {
    let p = cam.world_to_camera(p_world);
    PointProjection {
        pixel: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        depth: p.z,
        valid: p.z > near,
    }
}

/// Jacobian of the pixel coordinates with respect to the camera-space point.
pub fn projection_jacobian(
    cam: &Camera,
    p_cam: &Vector3<f64>,
    near: f64,
) -> Option<Matrix2x3<f64>> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if !(z > near) {
        return None;
    }
    let iz = 1.0 / z;
    Some(Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * y * iz * iz,
    ))
}

/// A primitive projected to the image plane at one time instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatProjection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub valid: bool,
    pub p_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov3d: Matrix3<f64>,
}

/// `Σ₂ = J W Σ Wᵀ Jᵀ + κ·I` around the moved mean `μₓ(t)`.
pub fn project_covariance(
    cam: &Camera,
    g: &ActivatedGaussian<'_>,
    t: f64,
    near: f64,
    dilation: f64,
) -> SplatProjection {
    let mu = motion_position(g, t);
    let p_cam = cam.world_to_camera(&mu);
    let cov3d = covariance(g);
    let Some(jacobian) = projection_jacobian(cam, &p_cam, near) else {
        return SplatProjection {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            depth: p_cam.z,
            valid: false,
            p_cam,
            jacobian: Matrix2x3::zeros(),
            cov3d,
        };
    };
    let t_mat = jacobian * cam.rotation;
    let mut cov2d = t_mat * cov3d * t_mat.transpose();
    // exact symmetry for downstream eigen/inverse computations
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += dilation;
    cov2d[(1, 1)] += dilation;
    SplatProjection {
        mean2d: Vector2::new(
            cam.fx * p_cam.x / p_cam.z + cam.cx,
            cam.fy * p_cam.y / p_cam.z + cam.cy,
        ),
        cov2d,
        depth: p_cam.z,
        valid: true,
        p_cam,
        jacobian,
        cov3d,
    }
}

/// Pulls gradients of the screen-space mean and covariance back to the moved
/// world-space mean and the 3D covariance. Returns `(dL/dμₓ(t), dL/dΣ)`.
pub fn project_covariance_vjp(
    cam: &Camera,
    proj: &SplatProjection,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = &cam.rotation;
    let j = &proj.jacobian;
    let t_mat = j * w;
    let d_cov3d = t_mat.transpose() * d_cov2d * t_mat;
    let d_t = d_cov2d * t_mat * proj.cov3d.transpose() + d_cov2d.transpose() * t_mat * proj.cov3d;
    let d_j = d_t * w.transpose();

    let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut d_pcam = j.transpose() * d_mean2d;
    d_pcam.x += -d_j[(0, 2)] * cam.fx * iz2;
    d_pcam.y += -d_j[(1, 2)] * cam.fy * iz2;
    d_pcam.z += -d_j[(0, 0)] * cam.fx * iz2 + d_j[(0, 2)] * 2.0 * cam.fx * x * iz3
        - d_j[(1, 1)] * cam.fy * iz2
        + d_j[(1, 2)] * 2.0 * cam.fy * y * iz3;
    (w.transpose() * d_pcam, d_cov3d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{
        covariance_vjp, motion_position_vjp, Field, GaussianSet, RawPrimitive,
    };

    fn test_camera() -> Camera {
        Camera::new(
            "c0",
            100.0,
            100.0,
            50.0,
            50.0,
            100,
            100,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn project_point_examples() {
        let cam = test_camera();
        let p = project_point(&cam, &Vector3::new(0.0, 0.0, 5.0), DEFAULT_NEAR);
        assert_eq!(p.pixel, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 5.0);
        assert!(p.valid);
        let p = project_point(&cam, &Vector3::new(1.0, 0.0, 5.0), DEFAULT_NEAR);
        assert_eq!(p.pixel, Vector2::new(70.0, 50.0));
        assert!(!project_point(&cam, &Vector3::new(0.0, 0.0, -1.0), DEFAULT_NEAR).valid);
    }

    #[test]
    fn jacobian_examples() {
        let cam = test_camera();
        let j = projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 4.0), DEFAULT_NEAR).unwrap();
        assert_eq!(j, Matrix2x3::new(25.0, 0.0, 0.0, 0.0, 25.0, 0.0));
        let j2 = projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 8.0), DEFAULT_NEAR).unwrap();
        assert_eq!(j2[(0, 0)], j[(0, 0)] / 2.0);
        assert_eq!(j2[(1, 1)], j[(1, 1)] / 2.0);
        assert!(projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 0.005), DEFAULT_NEAR).is_none());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera::new(
            "c",
            120.0,
            90.0,
            40.0,
            30.0,
            80,
            60,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        let p = Vector3::new(0.7, -0.4, 3.3);
        let j = projection_jacobian(&cam, &p, DEFAULT_NEAR).unwrap();
        for a in 0..3 {
            let h = 1e-5 * p[a].abs().max(1.0);
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            let d = (project_point(&cam, &pp, DEFAULT_NEAR).pixel
                - project_point(&cam, &pm, DEFAULT_NEAR).pixel)
                / (2.0 * h);
            for r in 0..2 {
                let rel = (j[(r, a)] - d[r]).abs() / j[(r, a)].abs().max(d[r].abs()).max(1e-8);
                assert!(rel < 1e-6 || (j[(r, a)] == 0.0 && d[r].abs() < 1e-9));
            }
        }
    }

    fn isotropic(r: f64, pos: [f64; 3]) -> GaussianSet {
        let mut p = RawPrimitive::at(pos, 0.5, 0);
        p.log_scale = [r.ln(); 3];
        GaussianSet::from_primitives(0, &[p]).unwrap()
    }

    #[test]
    fn isotropic_on_axis_closed_form() {
        let cam = test_camera();
        let (r, z) = (0.2, 4.0);
        let set = isotropic(r, [0.0, 0.0, z]);
        let proj = project_covariance(
            &cam,
            &set.activate(0).unwrap(),
            0.5,
            DEFAULT_NEAR,
            DEFAULT_DILATION,
        );
        let e = (100.0 * r / z) * (100.0 * r / z) + DEFAULT_DILATION;
        assert!((proj.cov2d - Matrix2::new(e, 0.0, 0.0, e)).amax() < 1e-12);
        assert_eq!(proj.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(proj.depth, z);
    }

    #[test]
    fn dilation_bounds_flat_gaussians() {
        let cam = test_camera();
        let mut p = RawPrimitive::at([0.3, 0.1, 3.0], 0.5, 0);
        p.log_scale = [-30.0, -30.0, 0.0];
        let set = GaussianSet::from_primitives(0, &[p]).unwrap();
        let proj = project_covariance(
            &cam,
            &set.activate(0).unwrap(),
            0.5,
            DEFAULT_NEAR,
            DEFAULT_DILATION,
        );
        let eig = proj.cov2d.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e >= DEFAULT_DILATION - 1e-12));
        assert_eq!(proj.cov2d[(0, 1)], proj.cov2d[(1, 0)]);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = test_camera();
        let set = isotropic(0.1, [0.0, 0.0, -2.0]);
        let proj = project_covariance(
            &cam,
            &set.activate(0).unwrap(),
            0.5,
            DEFAULT_NEAR,
            DEFAULT_DILATION,
        );
        assert!(!proj.valid);
    }

    #[test]
    fn rotation_about_view_axis_preserves_eigenvalues() {
        let cam = test_camera();
        let mut p = RawPrimitive::at([0.0, 0.0, 5.0], 0.5, 0);
        p.log_scale = [(0.4f64).ln(), (0.1f64).ln(), (0.2f64).ln()];
        let base = GaussianSet::from_primitives(0, &[p.clone()]).unwrap();
        let proj0 = project_covariance(&cam, &base.activate(0).unwrap(), 0.5, DEFAULT_NEAR, 0.0);
        let e0 = proj0.cov2d.symmetric_eigen();
        for angle in [0.3f64, 1.0, 2.2] {
            p.rotation = [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()];
            let set = GaussianSet::from_primitives(0, &[p.clone()]).unwrap();
            let proj = project_covariance(&cam, &set.activate(0).unwrap(), 0.5, DEFAULT_NEAR, 0.0);
            let e = proj.cov2d.symmetric_eigen();
            let mut a: Vec<f64> = e0.eigenvalues.iter().copied().collect();
            let mut b: Vec<f64> = e.eigenvalues.iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            // the major axis turns with the primitive
            let major = |eig: &nalgebra::SymmetricEigen<f64, nalgebra::U2>| {
                let i = if eig.eigenvalues[0] > eig.eigenvalues[1] {
                    0
                } else {
                    1
                };
                eig.eigenvectors.column(i).into_owned()
            };
            let v0 = major(&e0);
            let v = major(&e);
            let rotated = Vector2::new(
                angle.cos() * v0.x - angle.sin() * v0.y,
                angle.sin() * v0.x + angle.cos() * v0.y,
            );
            assert!(rotated.dot(&v).abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.15).into_inner();
        let cam = Camera::new(
            "c",
            90.0,
            110.0,
            32.0,
            30.0,
            64,
            60,
            rot,
            Vector3::new(0.1, -0.2, 3.0),
        )
        .unwrap();
        let mut p = RawPrimitive::at([0.2, -0.1, 0.4], 0.3, 0);
        p.log_scale = [(0.3f64).ln(), (0.15f64).ln(), (0.2f64).ln()];
        p.rotation = [0.8, 0.3, -0.2, 0.1];
        p.velocity = [0.5, 0.2, -0.3];
        p.log_duration = (0.2f64).ln();
        let set = GaussianSet::from_primitives(0, &[p]).unwrap();
        let t = 0.6;
        let wm = Vector2::new(0.4, -0.7);
        let wc = Matrix2::new(0.3, -0.5, 0.2, 0.9);
        let f = |s: &GaussianSet| {
            let pr = project_covariance(
                &cam,
                &s.activate(0).unwrap(),
                t,
                DEFAULT_NEAR,
                DEFAULT_DILATION,
            );
            pr.mean2d.dot(&wm) + pr.cov2d.component_mul(&wc).sum()
        };
        let g = set.activate(0).unwrap();
        let proj = project_covariance(&cam, &g, t, DEFAULT_NEAR, DEFAULT_DILATION);
        let (d_mu, d_cov) = project_covariance_vjp(&cam, &proj, &wm, &wc);
        let mut grad = motion_position_vjp(&g, t, &d_mu);
        grad += covariance_vjp(&g, &d_cov);
        let mut gs = set.zeros_like();
        grad.scatter_into(&mut gs, 0);
        for field in Field::ALL {
            for k in 0..field.width(0) {
                let v = set.field(field)[k];
                let h = 1e-5 * v.abs().max(1.0);
                let mut sp = set.clone();
                let mut sm = set.clone();
                sp.field_mut(field)[k] = v + h;
                sm.field_mut(field)[k] = v - h;
                let numeric = (f(&sp) - f(&sm)) / (2.0 * h);
                let analytic = gs.field(field)[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel <= 1e-5,
                    "{}[{k}]: {analytic} vs {numeric}",
                    field.name()
                );
            }
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            "c",
            Vector3::new(4.0, 0.0, 1.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            80.0,
            80.0,
            64,
            64,
        )
        .unwrap();
        let p = project_point(&cam, &Vector3::zeros(), DEFAULT_NEAR);
        assert!((p.pixel - Vector2::new(31.5, 31.5)).norm() < 1e-12);
        assert!((cam.center() - Vector3::new(4.0, 0.0, 1.0)).norm() < 1e-12);
        // world up projects upward in the image
        let up = project_point(&cam, &Vector3::new(0.0, 0.0, 0.5), DEFAULT_NEAR);
        assert!(up.pixel.y < 31.5);
    }
}
