//! Tile-based alpha compositing of space-time Gaussians and its analytic
//! backward pass.
//!
//! A render evaluates every primitive at time `t`: the mean moves along its
//! velocity, the opacity is modulated by the temporal Gaussian, and the
//! result is splatted with the EWA screen-space covariance. Splats are binned
//! into square tiles, depth-sorted per tile, and composited front to back:
//!
//! ```text
//! αᵢ = min(α_max, σᵢ·σᵢ(t)·exp(−½ δᵀ Σ₂⁻¹ δ))      C = Σᵢ cᵢ αᵢ Tᵢ + T_final·bg
//! ```
//!
//! A splat only touches pixels inside the axis-aligned box of its
//! `extent_sigma` ellipse, so the image does not depend on the tile size.
//!
//! The forward pass keeps, per pixel, the list of contributions that were
//! actually blended. The backward pass replays that list in reverse to get
//! screen-space gradients per splat, merges them across tiles, then pulls them
//! back through projection, color, motion and temporal opacity to the raw
//! fields of every primitive.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{eval_color, eval_color_vjp};
use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::primitives::{
    covariance_vjp, motion_position_vjp, temporal_opacity, temporal_opacity_vjp, GaussianSet,
};
use crate::projection::{
    project_covariance, project_covariance_vjp, Camera, DEFAULT_DILATION, DEFAULT_NEAR,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    /// Tile edge in pixels.
    pub tile_size: usize,
    /// Primitives whose temporal opacity is below this are skipped.
    pub temporal_cull: f64,
    /// Primitives whose activated opacity is below this are skipped.
    pub min_opacity: f64,
    /// Per-pixel contributions below this alpha are skipped.
    pub alpha_floor: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Half-extent of the screen footprint, in standard deviations.
    pub extent_sigma: f64,
    pub near: f64,
    /// Low-pass dilation added to projected covariances, px².
    pub dilation: f64,
    /// Merge backward partials in a fixed order (bit-reproducible gradients).
    /// Set from the engine-wide flag rather than read from the raster table.
    #[serde(skip)]
    pub deterministic: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            temporal_cull: 0.05,
            min_opacity: 1.0 / 255.0,
            alpha_floor: 1.0 / 255.0,
            alpha_max: 0.999,
            min_transmittance: 1e-4,
            extent_sigma: 3.0,
            near: DEFAULT_NEAR,
            dilation: DEFAULT_DILATION,
            deterministic: true,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("raster: {m}")));
        if self.tile_size == 0 {
            return bad("tile_size must be positive");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return bad("alpha_max must lie in (0, 1)");
        }
        if !(self.extent_sigma > 0.0) {
            return bad("extent_sigma must be positive");
        }
        if !(self.near > 0.0) {
            return bad("near must be positive");
        }
        if !(self.dilation >= 0.0) || !(self.temporal_cull >= 0.0) || !(self.min_opacity >= 0.0) {
            return bad("thresholds must be non-negative");
        }
        Ok(())
    }
}

/// One primitive after culling and projection, ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplat {
    pub id: usize,
    pub mean2d: [f64; 2],
    /// Inverse screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// `σ·σ(t)`.
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bounds: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binning {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub splats: Vec<PreparedSplat>,
    /// Per tile, indices into `splats` sorted by ascending depth.
    pub tiles: Vec<Vec<u32>>,
}

impl Binning {
    fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        let x1 = (x0 + self.tile_size).min(self.width);
        let y1 = (y0 + self.tile_size).min(self.height);
        (x0, y0, x1, y1)
    }
}

/// Temporal distance beyond which a primitive is culled: `|t − μ_t| > s·√(2 ln(1/ε))`.
pub fn temporal_cull_radius(duration: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return f64::INFINITY;
    }
    duration * (2.0 * (1.0 / eps).ln()).sqrt()
}

pub fn cull_and_bin(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    cfg: &RasterConfig,
) -> Result<Binning> {
    set.validate()?;
    let center = cam.center();
    let (w, h) = (cam.width, cam.height);
    let prepared: Vec<Option<PreparedSplat>> = (0..set.count())
        .into_par_iter()
        .map(|i| -> Result<Option<PreparedSplat>> {
            let g = set.activate_checked(i)?;
            if g.opacity < cfg.min_opacity {
                return Ok(None);
            }
            let sig_t = temporal_opacity(&g, t);
            if sig_t < cfg.temporal_cull {
                return Ok(None);
            }
            let proj = project_covariance(cam, &g, t, cfg.near, cfg.dilation);
            if !proj.valid {
                return Ok(None);
            }
            let (a, b, c) = (proj.cov2d[(0, 0)], proj.cov2d[(0, 1)], proj.cov2d[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 0.0) {
                return Ok(None);
            }
            let (mx, my) = (proj.mean2d.x, proj.mean2d.y);
            let ex = cfg.extent_sigma * a.sqrt();
            let ey = cfg.extent_sigma * c.sqrt();
            let x0 = (mx - ex).ceil().max(0.0);
            let x1 = (mx + ex).floor().min(w as f64 - 1.0);
            let y0 = (my - ey).ceil().max(0.0);
            let y1 = (my + ey).floor().min(h as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                return Ok(None);
            }
            let color = eval_color(&g, &center, t);
            Ok(Some(PreparedSplat {
                id: i,
                mean2d: [mx, my],
                conic: [c / det, -b / det, a / det],
                opacity: g.opacity * sig_t,
                color: [color.rgb.x, color.rgb.y, color.rgb.z],
                depth: proj.depth,
                bounds: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
            }))
        })
        .collect::<Result<_>>()?;
    let splats: Vec<PreparedSplat> = prepared.into_iter().flatten().collect();

    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bounds;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.id.cmp(&sb.id))
        })
    });
    Ok(Binning {
        width: w,
        height: h,
        tile_size: ts,
        tiles_x,
        tiles_y,
        splats,
        tiles,
    })
}

/// One blended contribution at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Position in the owning tile's splat list.
    pub local: u32,
    pub alpha: f64,
    /// Transmittance in front of this contribution.
    pub transmittance: f64,
}

/// Compositing records of one tile, pixels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileRecords {
    pub offsets: Vec<u32>,
    pub contribs: Vec<Contribution>,
    pub final_transmittance: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Vec<f64>,
    pub background: [f64; 3],
    pub binning: Binning,
    pub records: Vec<TileRecords>,
    pub config: RasterConfig,
    fingerprint: u64,
}

impl RenderOutput {
    /// Total number of blended contributions.
    pub fn contribution_count(&self) -> usize {
        self.records.iter().map(|r| r.contribs.len()).sum()
    }

    /// The blended `(primitive id, alpha, transmittance)` list at a pixel.
    pub fn pixel_contributions(&self, x: usize, y: usize) -> Vec<(usize, f64, f64)> {
        let b = &self.binning;
        let ts = b.tile_size;
        let tile = (y / ts) * b.tiles_x + x / ts;
        let (x0, y0, x1, _) = b.tile_rect(tile);
        let p = (y - y0) * (x1 - x0) + (x - x0);
        let rec = &self.records[tile];
        rec.contribs[rec.offsets[p] as usize..rec.offsets[p + 1] as usize]
            .iter()
            .map(|c| {
                let s = &b.splats[b.tiles[tile][c.local as usize] as usize];
                (s.id, c.alpha, c.transmittance)
            })
            .collect()
    }
}

fn render_fingerprint(set: &GaussianSet, cam: &Camera, t: f64) -> u64 {
    let mut h = DefaultHasher::new();
    set.fingerprint().hash(&mut h);
    cam.id.hash(&mut h);
    t.to_bits().hash(&mut h);
    h.finish()
}

#[inline]
fn splat_power(s: &PreparedSplat, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let [a, b, c] = s.conic;
    (
        -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy),
        dx,
        dy,
    )
}

#[inline]
fn inside(s: &PreparedSplat, x: usize, y: usize) -> bool {
    let [x0, y0, x1, y1] = s.bounds;
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

pub fn render_forward(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let binning = cull_and_bin(set, cam, t, cfg)?;
    let tiles: Vec<(TileRecords, Vec<[f64; 3]>)> = (0..binning.tiles.len())
        .into_par_iter()
        .map(|tile| composite_tile(&binning, tile, background, cfg))
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut rgb = Image::new(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut records = Vec::with_capacity(tiles.len());
    for (tile, (rec, colors)) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = binning.tile_rect(tile);
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y - y0) * tw + (x - x0);
                rgb.set_pixel(x, y, colors[p]);
                alpha[y * w + x] = 1.0 - rec.final_transmittance[p];
            }
        }
        records.push(rec);
    }
    Ok(RenderOutput {
        rgb,
        alpha,
        background,
        binning,
        records,
        config: cfg.clone(),
        fingerprint: render_fingerprint(set, cam, t),
    })
}

fn composite_tile(
    binning: &Binning,
    tile: usize,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> (TileRecords, Vec<[f64; 3]>) {
    let (x0, y0, x1, y1) = binning.tile_rect(tile);
    let list = &binning.tiles[tile];
    let n_px = (x1 - x0) * (y1 - y0);
    let mut offsets = Vec::with_capacity(n_px + 1);
    let mut contribs = Vec::new();
    let mut final_t = Vec::with_capacity(n_px);
    let mut colors = Vec::with_capacity(n_px);
    offsets.push(0u32);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64, y as f64);
            let mut trans = 1.0;
            let mut color = [0.0; 3];
            for (local, &si) in list.iter().enumerate() {
                let s = &binning.splats[si as usize];
                if !inside(s, x, y) {
                    continue;
                }
                let (power, _, _) = splat_power(s, px, py);
                if power > 0.0 {
                    continue;
                }
                let alpha = (s.opacity * power.exp()).min(cfg.alpha_max);
                if alpha < cfg.alpha_floor {
                    continue;
                }
                contribs.push(Contribution {
                    local: local as u32,
                    alpha,
                    transmittance: trans,
                });
                let w = alpha * trans;
                for c in 0..3 {
                    color[c] += s.color[c] * w;
                }
                trans *= 1.0 - alpha;
                if trans < cfg.min_transmittance {
                    break;
                }
            }
            for c in 0..3 {
                color[c] += trans * background[c];
            }
            colors.push(color);
            final_t.push(trans);
            offsets.push(contribs.len() as u32);
        }
    }
    (
        TileRecords {
            offsets,
            contribs,
            final_transmittance: final_t,
        },
        colors,
    )
}

/// Per-primitive gradients mirroring [`GaussianSet`], plus the running
/// screen-space gradient statistic used by relocation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub params: GaussianSet,
    /// Running mean of `‖dL/d mean2d‖` over the views that touched each primitive.
    pub accum_grad2d: Vec<f64>,
    pub accum_count: Vec<u32>,
}

impl GradientSet {
    pub fn for_set(set: &GaussianSet) -> Self {
        GradientSet {
            params: set.zeros_like(),
            accum_grad2d: vec![0.0; set.count()],
            accum_count: vec![0; set.count()],
        }
    }

    pub fn zero_params(&mut self) {
        self.params.fill_zero();
    }

    pub fn reset_stats(&mut self) {
        self.accum_grad2d.fill(0.0);
        self.accum_count.fill(0);
    }

    pub fn record_grad2d(&mut self, i: usize, norm: f64) {
        self.accum_count[i] += 1;
        self.accum_grad2d[i] += (norm - self.accum_grad2d[i]) / self.accum_count[i] as f64;
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad2d {
    mean: [f64; 2],
    /// Gradient w.r.t. the full inverse-covariance matrix entries `[a, b (each off-diagonal), c]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    hits: u32,
}

impl SplatGrad2d {
    fn add(&mut self, o: &SplatGrad2d) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.hits += o.hits;
    }
}

/// Fresh gradients of `⟨dL/drgb, rgb⟩` with respect to every raw field.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    out: &RenderOutput,
    d_rgb: &Image,
) -> Result<GradientSet> {
    let mut grads = GradientSet::for_set(set);
    accumulate_backward(set, cam, t, out, d_rgb, &mut grads)?;
    Ok(grads)
}

/// Adds the gradients of one render into `grads` and updates its statistics.
pub fn accumulate_backward(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    out: &RenderOutput,
    d_rgb: &Image,
    grads: &mut GradientSet,
) -> Result<()> {
    if out.fingerprint != render_fingerprint(set, cam, t) {
        return Err(Error::StaleRender(format!("camera `{}`, t = {t}", cam.id)));
    }
    d_rgb.same_size(&out.rgb)?;
    if grads.params.count() != set.count() || grads.params.sh_degree() != set.sh_degree() {
        return Err(Error::Shape {
            field: "gradients".into(),
            expected: set.count(),
            found: grads.params.count(),
        });
    }
    let binning = &out.binning;
    let n_splats = binning.splats.len();
    let cfg = &out.config;

    let merged: Vec<SplatGrad2d> = if cfg.deterministic {
        let partials: Vec<Vec<SplatGrad2d>> = (0..binning.tiles.len())
            .into_par_iter()
            .map(|tile| backward_tile(out, tile, d_rgb))
            .collect();
        let mut merged = vec![SplatGrad2d::default(); n_splats];
        for (tile, partial) in partials.iter().enumerate() {
            for (local, g) in partial.iter().enumerate() {
                merged[binning.tiles[tile][local] as usize].add(g);
            }
        }
        merged
    } else {
        (0..binning.tiles.len())
            .into_par_iter()
            .fold(
                || vec![SplatGrad2d::default(); n_splats],
                |mut acc, tile| {
                    for (local, g) in backward_tile(out, tile, d_rgb).iter().enumerate() {
                        acc[binning.tiles[tile][local] as usize].add(g);
                    }
                    acc
                },
            )
            .reduce(
                || vec![SplatGrad2d::default(); n_splats],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(&b) {
                        x.add(y);
                    }
                    a
                },
            )
    };

    let center = cam.center();
    let stride = set.sh_stride();
    let per_splat: Vec<_> = binning
        .splats
        .par_iter()
        .zip(merged.par_iter())
        .filter(|(_, g)| g.hits > 0)
        .map(|(s, g2)| -> Result<_> {
            let g = set.activate(s.id)?;
            let proj = project_covariance(cam, &g, t, cfg.near, cfg.dilation);
            let [a, b, c] = s.conic;
            let conic = Matrix2::new(a, b, b, c);
            let d_conic = Matrix2::new(g2.conic[0], g2.conic[1], g2.conic[1], g2.conic[2]);
            let d_cov2d = -(conic * d_conic * conic);
            let d_mean = Vector2::new(g2.mean[0], g2.mean[1]);
            let (mut d_mu, d_cov3d) = project_covariance_vjp(cam, &proj, &d_mean, &d_cov2d);

            let color = eval_color(&g, &center, t);
            let mut d_sh = vec![0.0; stride];
            d_mu += eval_color_vjp(&g, &color, &Vector3::from(g2.color), &mut d_sh);

            let sig_t = temporal_opacity(&g, t);
            let mut grad = motion_position_vjp(&g, t, &d_mu);
            grad += covariance_vjp(&g, &d_cov3d);
            grad += temporal_opacity_vjp(&g, t, g2.opacity * g.opacity);
            grad.opacity_logit = g2.opacity * sig_t * g.opacity * (1.0 - g.opacity);
            Ok((s.id, grad, d_sh, d_mean.norm()))
        })
        .collect::<Result<_>>()?;

    for (id, grad, d_sh, norm) in per_splat {
        grad.scatter_into(&mut grads.params, id);
        for (dst, v) in grads.params.sh[id * stride..(id + 1) * stride]
            .iter_mut()
            .zip(&d_sh)
        {
            *dst += v;
        }
        grads.record_grad2d(id, norm);
    }
    Ok(())
}

fn backward_tile(out: &RenderOutput, tile: usize, d_rgb: &Image) -> Vec<SplatGrad2d> {
    let binning = &out.binning;
    let list = &binning.tiles[tile];
    let rec = &out.records[tile];
    let mut acc = vec![SplatGrad2d::default(); list.len()];
    let (x0, y0, x1, y1) = binning.tile_rect(tile);
    let tw = x1 - x0;
    let bg = out.background;
    let alpha_max = out.config.alpha_max;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = (y - y0) * tw + (x - x0);
            let dc = d_rgb.pixel(x, y);
            if dc == [0.0; 3] {
                continue;
            }
            let contribs = &rec.contribs[rec.offsets[p] as usize..rec.offsets[p + 1] as usize];
            let t_final = rec.final_transmittance[p];
            let mut back = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
            for con in contribs.iter().rev() {
                let s = &binning.splats[list[con.local as usize] as usize];
                let g = &mut acc[con.local as usize];
                let w = con.alpha * con.transmittance;
                let inv = 1.0 / (1.0 - con.alpha);
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    g.color[c] += dc[c] * w;
                    d_alpha += dc[c] * (s.color[c] * con.transmittance - back[c] * inv);
                    back[c] += s.color[c] * w;
                }
                g.hits += 1;
                let (power, dx, dy) = splat_power(s, x as f64, y as f64);
                let gauss = power.exp();
                if s.opacity * gauss >= alpha_max {
                    continue;
                }
                g.opacity += d_alpha * gauss;
                let d_power = d_alpha * con.alpha;
                let [a, b, c] = s.conic;
                // dpower/dmean = Q δ
                g.mean[0] += d_power * (a * dx + b * dy);
                g.mean[1] += d_power * (b * dx + c * dy);
                g.conic[0] += d_power * (-0.5 * dx * dx);
                g.conic[1] += d_power * (-0.5 * dx * dy);
                g.conic[2] += d_power * (-0.5 * dy * dy);
            }
        }
    }
    acc
}
