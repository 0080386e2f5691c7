//! 4D initialization from multi-view correspondences.
//!
//! Correspondence tracks are triangulated per frame time with the linear DLT
//! method, consecutive frames are matched by nearest neighbour to estimate a
//! velocity per point, and every retained point becomes one primitive. When
//! no correspondences are available, primitives are drawn uniformly inside the
//! scene bounds instead.
//!
//! Correspondence files are plain text, one track per line:
//!
//! ```text
//! # time cam u v cam u v ...
//! 0.25 cam0 31.5 12.25 cam3 40.0 11.75
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::SH_C0;
use crate::error::{Error, Result};
use crate::primitives::{logit, GaussianSet, RawPrimitive};
use crate::projection::{project_point, Camera};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Correspondences when the scene provides them, random otherwise.
    Auto,
    Correspondences,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub mode: InitMode,
    /// Primitive count for random initialization.
    pub random_count: usize,
    /// Tracks with a larger RMS reprojection error (pixels) are dropped.
    pub max_rms: f64,
    pub knn_k: usize,
    /// Matches farther than this multiple of the median match distance get zero velocity.
    pub cutoff_factor: f64,
    pub max_points_per_frame: usize,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mode: InitMode::Auto,
            random_count: 2000,
            max_rms: 2.0,
            knn_k: 1,
            cutoff_factor: 3.0,
            max_points_per_frame: 20_000,
            opacity: 0.1,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 || self.max_points_per_frame == 0 {
            return Err(Error::Config(
                "init.knn_k and init.max_points_per_frame must be positive".into(),
            ));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::Config("init.opacity must lie in (0, 1)".into()));
        }
        if !(self.max_rms > 0.0 && self.cutoff_factor > 0.0) {
            return Err(Error::Config(
                "init.max_rms and init.cutoff_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub time: f64,
    pub views: Vec<(String, [f64; 2])>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub tracks: Vec<Track>,
}

impl CorrespondenceSet {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut tracks = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::parse(source, format!("line {}: {m}", ln + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 7 || !(tok.len() - 1).is_multiple_of(3) {
                return Err(err(
                    "expected `time cam u v cam u v ...` with at least two views".into(),
                ));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("invalid number `{s}`")))
            };
            let time = num(tok[0])?;
            let views = tok[1..]
                .chunks(3)
                .map(|c| Ok((c[0].to_string(), [num(c[1])?, num(c[2])?])))
                .collect::<Result<Vec<_>>>()?;
            tracks.push(Track { time, views });
        }
        Ok(CorrespondenceSet { tracks })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# time cam u v cam u v ...\n");
        for t in &self.tracks {
            s.push_str(&format!("{}", t.time));
            for (c, [u, v]) in &t.views {
                s.push_str(&format!(" {c} {u} {v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Every camera id must be known.
    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        for t in &self.tracks {
            for (c, _) in &t.views {
                if !cameras.iter().any(|cam| &cam.id == c) {
                    return Err(Error::UnknownCamera(c.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// RMS reprojection error in pixels.
    pub rms: f64,
}

/// Linear (DLT) triangulation from two or more calibrated views.
pub fn triangulate(views: &[(&Camera, [f64; 2])]) -> Result<Triangulation> {
    if views.len() < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "{} view(s), need at least 2",
            views.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (cam, [u, v])) in views.iter().enumerate() {
        let x = (u - cam.cx) / cam.fx;
        let y = (v - cam.cy) / cam.fy;
        let r = &cam.rotation;
        let t = &cam.translation;
        for j in 0..3 {
            a[(2 * k, j)] = x * r[(2, j)] - r[(0, j)];
            a[(2 * k + 1, j)] = y * r[(2, j)] - r[(1, j)];
        }
        a[(2 * k, 3)] = x * t[2] - t[0];
        a[(2 * k + 1, 3)] = y * t[2] - t[1];
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |i: usize| svd.singular_values[order[i]];
    if order.len() < 4 || s(0) <= 0.0 || s(2) / s(0) < 1e-8 {
        return Err(Error::DegenerateGeometry(
            "rays are (nearly) parallel".into(),
        ));
    }
    let h = v_t.row(order[3]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::DegenerateGeometry("point at infinity".into()));
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let mut sq = 0.0;
    for (cam, [u, v]) in views {
        let p = project_point(cam, &point, 0.0);
        if !p.valid {
            return Err(Error::DegenerateGeometry("point behind a camera".into()));
        }
        sq += (p.pixel.x - u).powi(2) + (p.pixel.y - v).powi(2);
    }
    Ok(Triangulation {
        point,
        rms: (sq / views.len() as f64).sqrt(),
    })
}

/// Static 3D kd-tree over a point list.
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    nodes: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut nodes: Vec<usize> = (0..points.len()).collect();
        Self::build_rec(points, &mut nodes, 0);
        KdTree { points, nodes }
    }

    fn build_rec(points: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let (left, right) = idx.split_at_mut(mid);
        Self::build_rec(points, left, depth + 1);
        Self::build_rec(points, &mut right[1..], depth + 1);
    }

    /// The `k` nearest points to `q` as `(index, squared distance)`, closest
    /// first, ties broken by index. `skip` excludes one index.
    pub fn nearest(&self, q: &[f64; 3], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(q, k, skip, 0, self.nodes.len(), 0, &mut best);
        }
        best
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        q: &[f64; 3],
        k: usize,
        skip: Option<usize>,
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut Vec<(usize, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.nodes[mid];
        let p = &self.points[i];
        if skip != Some(i) {
            let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
            let cmp = |x: &(usize, f64), y: &(usize, f64)| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0));
            let cand = (i, d);
            if best.len() < k || cmp(&cand, best.last().unwrap()) == Ordering::Less {
                let pos = best.partition_point(|b| cmp(b, &cand) == Ordering::Less);
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, k, skip, near.0, near.1, depth + 1, best);
        if best.len() < k || diff * diff <= best.last().unwrap().1 {
            self.search(q, k, skip, far.0, far.1, depth + 1, best);
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Velocity of every point in `from` towards its nearest neighbours in `to`,
/// `(neighbour − point)/Δt`, averaged over `k` neighbours. Matches farther
/// than `cutoff_factor` × the median match distance get zero velocity.
pub fn knn_velocity(
    from: &[[f64; 3]],
    to: &[[f64; 3]],
    dt: f64,
    k: usize,
    cutoff_factor: f64,
) -> Result<Vec<[f64; 3]>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!(
            "velocity time step must be positive, got {dt}"
        )));
    }
    if to.is_empty() {
        if !from.is_empty() {
            warn!(
                "no points in the next frame, {} velocities set to zero",
                from.len()
            );
        }
        return Ok(vec![[0.0; 3]; from.len()]);
    }
    let tree = KdTree::build(to);
    let matches: Vec<(f64, [f64; 3])> = from
        .par_iter()
        .map(|p| {
            let nn = tree.nearest(p, k.max(1), None);
            let mut mean = [0.0; 3];
            for &(j, _) in &nn {
                for a in 0..3 {
                    mean[a] += to[j][a] / nn.len() as f64;
                }
            }
            (
                nn[0].1.sqrt(),
                [mean[0] - p[0], mean[1] - p[1], mean[2] - p[2]],
            )
        })
        .collect();
    let mut dists: Vec<f64> = matches.iter().map(|m| m.0).collect();
    let cutoff = cutoff_factor * median(&mut dists);
    Ok(matches
        .into_iter()
        .map(|(d, disp)| {
            if d > cutoff {
                [0.0; 3]
            } else {
                disp.map(|x| x / dt)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedFrame {
    pub time: f64,
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub velocities: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedCloud {
    pub frames: Vec<SeedFrame>,
}

impl SeedCloud {
    pub fn point_count(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).sum()
    }

    /// Fills every frame's velocities by matching it to the next frame (the
    /// last frame is matched backwards to the previous one).
    pub fn estimate_velocities(&mut self, k: usize, cutoff_factor: f64) -> Result<()> {
        let n = self.frames.len();
        for i in 0..n {
            let v = if i + 1 < n {
                let dt = self.frames[i + 1].time - self.frames[i].time;
                knn_velocity(
                    &self.frames[i].points,
                    &self.frames[i + 1].points,
                    dt,
                    k,
                    cutoff_factor,
                )?
            } else if i > 0 {
                let dt = self.frames[i].time - self.frames[i - 1].time;
                knn_velocity(
                    &self.frames[i].points,
                    &self.frames[i - 1].points,
                    dt,
                    k,
                    cutoff_factor,
                )?
                .into_iter()
                .map(|v| v.map(|x| -x))
                .collect()
            } else {
                vec![[0.0; 3]; self.frames[i].points.len()]
            };
            self.frames[i].velocities = v;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TriangulationStats {
    pub tracks: usize,
    pub accepted: usize,
    pub degenerate: usize,
    pub high_error: usize,
}

/// Triangulates every track and groups the accepted points by frame time.
/// `color_at(camera, time, pixel)` samples a reference color for a view.
pub fn build_seed_cloud<F>(
    corr: &CorrespondenceSet,
    cameras: &[Camera],
    cfg: &InitConfig,
    color_at: F,
) -> Result<(SeedCloud, TriangulationStats)>
where
    F: Fn(&str, f64, [f64; 2]) -> Option<[f64; 3]> + Sync,
{
    corr.validate(cameras)?;
    let results: Vec<Result<Triangulation>> = corr
        .tracks
        .par_iter()
        .map(|t| {
            let views: Vec<(&Camera, [f64; 2])> = t
                .views
                .iter()
                .map(|(c, px)| (cameras.iter().find(|cam| &cam.id == c).unwrap(), *px))
                .collect();
            triangulate(&views)
        })
        .collect();
    let mut stats = TriangulationStats {
        tracks: corr.tracks.len(),
        ..Default::default()
    };
    let mut by_time: BTreeMap<u64, (f64, Vec<[f64; 3]>, Vec<[f64; 3]>, bool)> = BTreeMap::new();
    for (t, r) in corr.tracks.iter().zip(results) {
        match r {
            Err(_) => stats.degenerate += 1,
            Ok(tri) if tri.rms > cfg.max_rms => stats.high_error += 1,
            Ok(tri) => {
                stats.accepted += 1;
                let entry = by_time
                    .entry(ordered_key(t.time))
                    .or_insert_with(|| (t.time, Vec::new(), Vec::new(), true));
                entry.1.push([tri.point.x, tri.point.y, tri.point.z]);
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for (c, px) in &t.views {
                    if let Some(rgb) = color_at(c, t.time, *px) {
                        for a in 0..3 {
                            sum[a] += rgb[a];
                        }
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    entry.2.push(sum.map(|v| v / n));
                } else {
                    entry.2.push([0.5; 3]);
                    entry.3 = false;
                }
            }
        }
    }
    let frames = by_time
        .into_values()
        .map(|(time, points, colors, any_color)| {
            let stride = points.len().div_ceil(cfg.max_points_per_frame).max(1);
            let points: Vec<_> = points.into_iter().step_by(stride).collect();
            let colors: Vec<_> = colors.into_iter().step_by(stride).collect();
            SeedFrame {
                time,
                velocities: vec![[0.0; 3]; points.len()],
                points,
                colors: any_color.then_some(colors),
            }
        })
        .collect();
    let mut cloud = SeedCloud { frames };
    cloud.estimate_velocities(cfg.knn_k, cfg.cutoff_factor)?;
    Ok((cloud, stats))
}

fn ordered_key(t: f64) -> u64 {
    // monotone map from f64 to u64 so that BTreeMap orders by time
    let b = t.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn color_to_sh(rgb: [f64; 3], sh_degree: usize) -> Vec<f64> {
    let k = crate::appearance::sh_coeff_count(sh_degree);
    let mut sh = vec![0.0; 3 * k];
    for c in 0..3 {
        sh[c * k] = rgb[c] / SH_C0;
    }
    sh
}

/// One primitive per seed point.
pub fn seed_primitives(
    cloud: &SeedCloud,
    frame_interval: f64,
    sh_degree: usize,
    opacity: f64,
) -> Result<GaussianSet> {
    if cloud.point_count() == 0 {
        return Err(Error::EmptyInit(
            "the correspondences produced no 3D points; use random initialization (init.mode = \"random\")".into(),
        ));
    }
    if !(frame_interval > 0.0) {
        return Err(Error::Config(format!(
            "frame interval must be positive, got {frame_interval}"
        )));
    }
    let all: Vec<[f64; 3]> = cloud
        .frames
        .iter()
        .flat_map(|f| f.points.iter().copied())
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &all {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let diag = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
    let fallback_scale = (0.01 * diag).max(1e-3);
    let mut set = GaussianSet::new(sh_degree)?;
    let log_duration = (2.0 * frame_interval).ln();
    let opacity_logit = logit(opacity);
    for frame in &cloud.frames {
        let tree = KdTree::build(&frame.points);
        let scales: Vec<f64> = frame
            .points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let nn = tree.nearest(p, 3, Some(i));
                if nn.is_empty() {
                    return fallback_scale;
                }
                let s = nn.iter().map(|(_, d)| d.sqrt()).sum::<f64>() / nn.len() as f64;
                if s > 0.0 {
                    s
                } else {
                    fallback_scale
                }
            })
            .collect();
        for (i, p) in frame.points.iter().enumerate() {
            let color = frame.colors.as_ref().map_or([0.5; 3], |c| c[i]);
            let mut prim = RawPrimitive::at(*p, frame.time, sh_degree);
            prim.log_duration = log_duration;
            prim.velocity = frame.velocities[i];
            prim.log_scale = [scales[i].ln(); 3];
            prim.opacity_logit = opacity_logit;
            prim.sh = color_to_sh(color, sh_degree);
            set.push(&prim)?;
        }
    }
    Ok(set)
}

/// Uniform random primitives in `bounds × [0, 1]` with zero velocity.
pub fn random_init<R: Rng>(
    count: usize,
    bounds: ([f64; 3], [f64; 3]),
    frame_interval: f64,
    sh_degree: usize,
    opacity: f64,
    rng: &mut R,
) -> Result<GaussianSet> {
    let (lo, hi) = bounds;
    if (0..3).any(|a| !(hi[a] > lo[a])) {
        return Err(Error::Config(
            "random init bounds must have positive extent".into(),
        ));
    }
    let volume: f64 = (0..3).map(|a| hi[a] - lo[a]).product();
    let spacing = (volume / count.max(1) as f64).cbrt();
    let mut set = GaussianSet::new(sh_degree)?;
    for _ in 0..count {
        let pos = [0, 1, 2].map(|a| rng.random_range(lo[a]..hi[a]));
        let time = rng.random_range(0.0..1.0);
        let mut prim = RawPrimitive::at(pos, time, sh_degree);
        prim.log_duration = (2.0 * frame_interval).ln();
        prim.log_scale = [(0.5 * spacing).ln(); 3];
        prim.opacity_logit = logit(opacity);
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        prim.sh = color_to_sh(rgb, sh_degree);
        set.push(&prim)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ring_camera(id: &str, angle_deg: f64, radius: f64) -> Camera {
        let a = angle_deg.to_radians();
        let eye = Vector3::new(radius * a.sin(), 0.0, -radius * a.cos());
        Camera::look_at(
            id,
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            300.0,
            300.0,
            640,
            480,
        )
        .unwrap()
    }

    fn observe(cam: &Camera, p: &Vector3<f64>) -> [f64; 2] {
        let q = project_point(cam, p, 0.0);
        [q.pixel.x, q.pixel.y]
    }

    #[test]
    fn noiseless_two_view_recovery() {
        let c0 = ring_camera("a", 0.0, 5.0);
        let c1 = ring_camera("b", 30.0, 5.0);
        for p in [
            Vector3::new(0.3, -0.2, 0.1),
            Vector3::new(-1.0, 0.5, 0.7),
            Vector3::zeros(),
        ] {
            let tri = triangulate(&[(&c0, observe(&c0, &p)), (&c1, observe(&c1, &p))]).unwrap();
            assert!((tri.point - p).norm() < 1e-9);
            assert!(tri.rms < 1e-6);
        }
    }

    #[test]
    fn same_camera_twice_is_degenerate() {
        let c0 = ring_camera("a", 0.0, 5.0);
        let p = Vector3::new(0.3, -0.2, 0.1);
        let px = observe(&c0, &p);
        assert!(matches!(
            triangulate(&[(&c0, px), (&c0, px)]),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(triangulate(&[(&c0, px)]).is_err());
    }

    #[test]
    fn noisy_recovery_within_tolerance() {
        let c0 = ring_camera("a", 0.0, 5.0);
        let c1 = ring_camera("b", 30.0, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut sq = 0.0;
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let mut a = observe(&c0, &p);
            let mut b = observe(&c1, &p);
            for v in a.iter_mut().chain(b.iter_mut()) {
                *v += noise.sample(&mut rng);
            }
            let tri = triangulate(&[(&c0, a), (&c1, b)]).unwrap();
            sq += (tri.point - p).norm_squared();
        }
        let rms = (sq / 200.0f64).sqrt();
        assert!(rms < 0.05, "rms error {rms}");
    }

    #[test]
    fn correspondence_text_round_trip() {
        let text = "# header\n0.25 cam0 31.5 12.25 cam3 40 11.75\n\n1 a 0 0 b 1 1 c 2 2\n";
        let c = CorrespondenceSet::parse(text, Path::new("x.txt")).unwrap();
        assert_eq!(c.tracks.len(), 2);
        assert_eq!(c.tracks[0].views[1], ("cam3".to_string(), [40.0, 11.75]));
        let again = CorrespondenceSet::parse(&c.to_text(), Path::new("y.txt")).unwrap();
        assert_eq!(again, c);
        let bad = CorrespondenceSet::parse("0.5 a 1 2", Path::new("z.txt")).unwrap_err();
        assert!(bad.to_string().contains("line 1"));
        let unknown = CorrespondenceSet::parse("0.5 a 1 2 q 3 4", Path::new("z.txt")).unwrap();
        assert!(
            matches!(unknown.validate(&[ring_camera("a", 0.0, 5.0)]), Err(Error::UnknownCamera(id)) if id == "q")
        );
    }

    fn brute_force(
        points: &[[f64; 3]],
        q: &[f64; 3],
        k: usize,
        skip: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, p)| (i, (0..3).map(|a| (p[a] - q[a]).powi(2)).sum()))
            .collect();
        all.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn kdtree_matches_brute_force(
            pts in proptest::collection::vec(proptest::array::uniform3(-10.0f64..10.0), 1..200),
            q in proptest::array::uniform3(-12.0f64..12.0),
            k in 1usize..6,
        ) {
            let tree = KdTree::build(&pts);
            prop_assert_eq!(tree.nearest(&q, k, None), brute_force(&pts, &q, k, None));
            prop_assert_eq!(tree.nearest(&pts[0], k, Some(0)), brute_force(&pts, &pts[0], k, Some(0)));
        }
    }

    fn cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn rigid_shift_gives_exact_velocity() {
        let a = cloud(1, 300);
        let d = [0.004, -0.002, 0.003];
        let b: Vec<_> = a
            .iter()
            .map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            .collect();
        let v = knn_velocity(&a, &b, 0.1, 1, 3.0).unwrap();
        for (p, vi) in a.iter().zip(&v) {
            for k in 0..3 {
                let want = ((p[k] + d[k]) - p[k]) / 0.1;
                assert_eq!(vi[k], want);
                assert!((vi[k] - d[k] / 0.1).abs() < 1e-12);
            }
        }
        let same = knn_velocity(&a, &a, 0.1, 1, 3.0).unwrap();
        assert!(same.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn outlier_gets_zero_velocity() {
        let mut a = cloud(2, 200);
        let b: Vec<_> = a.iter().map(|p| [p[0] + 0.001, p[1], p[2]]).collect();
        a.push([50.0, 50.0, 50.0]);
        let v = knn_velocity(&a, &b, 0.5, 1, 3.0).unwrap();
        assert_eq!(v[200], [0.0; 3]);
        assert!((v[0][0] - 0.002).abs() < 1e-12);
        assert!(knn_velocity(&a, &[], 0.5, 1, 3.0)
            .unwrap()
            .iter()
            .all(|v| *v == [0.0; 3]));
        assert!(knn_velocity(&a, &b, 0.0, 1, 3.0).is_err());
    }

    #[test]
    fn single_point_seed_inverts_dc_term() {
        let c = SeedCloud {
            frames: vec![SeedFrame {
                time: 0.0,
                points: vec![[0.0, 0.0, 5.0]],
                colors: Some(vec![[SH_C0; 3]]),
                velocities: vec![[0.0; 3]],
            }],
        };
        let set = seed_primitives(&c, 0.1, 2, 0.1).unwrap();
        assert_eq!(set.count(), 1);
        let k = 9;
        for ch in 0..3 {
            assert!((set.sh[ch * k] - 1.0).abs() < 1e-15);
            assert!(set.sh[ch * k + 1..(ch + 1) * k].iter().all(|&v| v == 0.0));
        }
        assert!((set.duration(0) - 0.2).abs() < 1e-15);
        assert!((set.opacity(0) - 0.1).abs() < 1e-15);
        assert_eq!(&set.rotation[..], &[1.0, 0.0, 0.0, 0.0]);
        assert!(set.validate().is_ok());
    }

    #[test]
    fn rigid_shift_frames_seed_equal_velocities() {
        let a = cloud(3, 100);
        let d = [0.01, 0.0, -0.005];
        let b: Vec<_> = a
            .iter()
            .map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            .collect();
        let mut c = SeedCloud {
            frames: vec![
                SeedFrame {
                    time: 0.0,
                    points: a,
                    colors: None,
                    velocities: vec![],
                },
                SeedFrame {
                    time: 0.25,
                    points: b,
                    colors: None,
                    velocities: vec![],
                },
            ],
        };
        c.estimate_velocities(1, 3.0).unwrap();
        let set = seed_primitives(&c, 0.25, 0, 0.1).unwrap();
        assert_eq!(set.count(), 200);
        for i in 0..200 {
            for k in 0..3 {
                assert!((set.velocity[3 * i + k] - d[k] / 0.25).abs() < 1e-12);
            }
            assert!((set.sh[3 * i] - 0.5 / SH_C0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let err = seed_primitives(&SeedCloud::default(), 0.1, 0, 0.1).unwrap_err();
        assert!(matches!(err, Error::EmptyInit(_)));
        assert!(err.to_string().contains("random"));
    }

    #[test]
    fn seeding_from_correspondences() {
        let cams = vec![
            ring_camera("a", 0.0, 5.0),
            ring_camera("b", 40.0, 5.0),
            ring_camera("c", -40.0, 5.0),
        ];
        let pts = cloud(4, 50);
        let mut corr = CorrespondenceSet::default();
        for (f, t) in [0.0, 0.5, 1.0].iter().enumerate() {
            for p in &pts {
                let q = Vector3::new(p[0] + 0.02 * f as f64, p[1], p[2]);
                corr.tracks.push(Track {
                    time: *t,
                    views: cams
                        .iter()
                        .map(|c| (c.id.clone(), observe(c, &q)))
                        .collect(),
                });
            }
        }
        corr.tracks.push(Track {
            time: 0.5,
            views: vec![("a".into(), [10.0, 10.0]), ("b".into(), [600.0, 400.0])],
        });
        let (seed, stats) = build_seed_cloud(&corr, &cams, &InitConfig::default(), |_, _, _| {
            Some([0.2, 0.4, 0.6])
        })
        .unwrap();
        assert_eq!(stats.accepted, 150);
        assert_eq!(stats.high_error + stats.degenerate, 1);
        assert_eq!(seed.frames.len(), 3);
        for f in &seed.frames {
            for v in &f.velocities {
                assert!((v[0] - 0.04).abs() < 1e-6, "{v:?}");
            }
        }
        let set = seed_primitives(&seed, 0.5, 1, 0.1).unwrap();
        assert_eq!(set.count(), 150);
        assert!((set.sh[4] - 0.4 / SH_C0).abs() < 1e-12);
    }

    #[test]
    fn seed_density_cap_strides() {
        let cams = vec![ring_camera("a", 0.0, 5.0), ring_camera("b", 40.0, 5.0)];
        let pts = cloud(5, 100);
        let corr = CorrespondenceSet {
            tracks: pts
                .iter()
                .map(|p| Track {
                    time: 0.0,
                    views: cams
                        .iter()
                        .map(|c| (c.id.clone(), observe(c, &Vector3::from(*p))))
                        .collect(),
                })
                .collect(),
        };
        let cfg = InitConfig {
            max_points_per_frame: 30,
            ..Default::default()
        };
        let (seed, _) = build_seed_cloud(&corr, &cams, &cfg, |_, _, _| None).unwrap();
        assert_eq!(seed.frames[0].points.len(), 25);
        assert!(seed.frames[0].colors.is_none());
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let b = ([-1.0, -2.0, 0.0], [1.0, 2.0, 3.0]);
        let a = random_init(100, b, 0.1, 1, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = random_init(100, b, 0.1, 1, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);
        assert!(a.velocity.iter().all(|&v| v == 0.0));
        for i in 0..100 {
            for k in 0..3 {
                let x = a.position[3 * i + k];
                assert!(x >= b.0[k] && x < b.1[k]);
            }
            assert!((0.0..1.0).contains(&a.time[i]));
        }
    }
}
