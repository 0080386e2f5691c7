//! Training losses and image-quality metrics.
//!
//! The photometric loss mixes mean absolute error with a structural term:
//! `L = λ_img·mean|p − g| + λ_ssim·(1 − SSIM(p, g))/2`. SSIM uses an 11×11
//! Gaussian window (σ = 1.5) over the valid region only, averaged over the
//! three channels. Its gradient is computed analytically from the raw local
//! moments `E[x]`, `E[x²]`, `E[xy]`, each of which is a linear filter of the
//! input, so the adjoint is the transposed filter.
//!
//! The opacity regularizer is `(1/N)·Σ σᵢ·sg[σᵢ(t)]`: the temporal opacity is a
//! constant weight and only the opacity logits receive gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::primitives::{sigmoid, temporal_opacity, GaussianSet};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_ssim: f64,
    /// Perceptual term; not implemented, must stay 0.
    pub lambda_perc: f64,
    pub lambda_reg: f64,
    /// Fraction of training during which the regularizer applies at full weight.
    pub reg_end_fraction: f64,
    /// Fraction of training over which the regularizer then ramps down to zero.
    pub reg_decay_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_img: 0.8,
            lambda_ssim: 0.2,
            lambda_perc: 0.0,
            lambda_reg: 1e-2,
            reg_end_fraction: 0.5,
            reg_decay_fraction: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_img,
            self.lambda_ssim,
            self.lambda_perc,
            self.lambda_reg,
            self.reg_end_fraction,
            self.reg_decay_fraction,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.lambda_perc != 0.0 {
            return Err(Error::Config(
                "loss.lambda_perc: the perceptual term is not available, set it to 0".into(),
            ));
        }
        Ok(())
    }

    /// Regularizer weight at training progress `p ∈ [0, 1]`.
    pub fn reg_weight(&self, progress: f64) -> f64 {
        let end = self.reg_end_fraction;
        let decay = self.reg_decay_fraction;
        if progress < end {
            self.lambda_reg
        } else if decay > 0.0 && progress < end + decay {
            self.lambda_reg * (1.0 - (progress - end) / decay)
        } else {
            0.0
        }
    }
}

/// Normalized 1D Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Window edge used for an image: 11, or the largest odd size that fits.
pub fn ssim_window_size(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m.saturating_sub(1).max(1)
    } else {
        m
    }
}

/// Separable valid-region filter of a `w×h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-region map back to `w×h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                rows[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

struct ChannelSsim {
    sum: f64,
    positions: usize,
    grad: Option<Vec<f64>>,
}

fn channel_ssim(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    k: &[f64],
    range: f64,
    want_grad: bool,
) -> ChannelSsim {
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, k);
    let my = filter_valid(y, w, h, k);
    let exx = filter_valid(&xx, w, h, k);
    let eyy = filter_valid(&yy, w, h, k);
    let exy = filter_valid(&xy, w, h, k);
    let m = mx.len();
    let mut sum = 0.0;
    let (mut g1, mut g2, mut g3) = if want_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..m {
        let (ux, uy) = (mx[p], my[p]);
        let vx = exx[p] - ux * ux;
        let vy = eyy[p] - uy * uy;
        let cxy = exy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let bb = b1 * b2;
            g1[p] = 2.0 * uy * (a2 - a1) / bb - 2.0 * ux * s / b1 + 2.0 * ux * s / b2;
            g2[p] = -s / b2;
            g3[p] = 2.0 * a1 / bb;
        }
    }
    let grad = want_grad.then(|| {
        let f1 = filter_valid_adjoint(&g1, w, h, k);
        let f2 = filter_valid_adjoint(&g2, w, h, k);
        let f3 = filter_valid_adjoint(&g3, w, h, k);
        (0..w * h)
            .map(|q| f1[q] + 2.0 * x[q] * f2[q] + y[q] * f3[q])
            .collect()
    });
    ChannelSsim {
        sum,
        positions: m,
        grad,
    }
}

fn ssim_impl(
    pred: &Image,
    gt: &Image,
    range: f64,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    pred.same_size(gt)?;
    let (w, h) = (pred.width, pred.height);
    if w == 0 || h == 0 {
        return Err(Error::Config("SSIM of an empty image".into()));
    }
    let k = gaussian_kernel(ssim_window_size(w, h), SSIM_SIGMA);
    let channels: Vec<ChannelSsim> = (0..3)
        .into_par_iter()
        .map(|c| channel_ssim(&pred.channel(c), &gt.channel(c), w, h, &k, range, want_grad))
        .collect();
    let total = channels.iter().map(|c| c.positions).sum::<usize>() as f64;
    let value = channels.iter().map(|c| c.sum).sum::<f64>() / total;
    let grad = want_grad.then(|| {
        let mut img = Image::new(w, h);
        for (c, ch) in channels.iter().enumerate() {
            for (q, g) in ch.grad.as_ref().unwrap().iter().enumerate() {
                img.data[3 * q + c] = g / total;
            }
        }
        img
    });
    Ok((value, grad))
}

/// Mean SSIM over the three channels.
pub fn ssim(pred: &Image, gt: &Image, data_range: f64) -> Result<f64> {
    Ok(ssim_impl(pred, gt, data_range, false)?.0)
}

/// SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad(pred: &Image, gt: &Image, data_range: f64) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(pred, gt, data_range, true)?;
    Ok((v, g.unwrap()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: Image,
}

pub fn loss_render(pred: &Image, gt: &Image, w: &LossWeights) -> Result<RenderLoss> {
    pred.same_size(gt)?;
    let n = pred.data.len() as f64;
    let l1 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;
    let (s, ds) = if w.lambda_ssim > 0.0 {
        ssim_with_grad(pred, gt, 1.0)?
    } else {
        (ssim(pred, gt, 1.0)?, Image::new(pred.width, pred.height))
    };
    let mut grad = Image::new(pred.width, pred.height);
    for (i, g) in grad.data.iter_mut().enumerate() {
        let d = pred.data[i] - gt.data[i];
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = w.lambda_img * sign / n - 0.5 * w.lambda_ssim * ds.data[i];
    }
    Ok(RenderLoss {
        total: w.lambda_img * l1 + w.lambda_ssim * (1.0 - s) / 2.0,
        l1,
        ssim: s,
        grad,
    })
}

/// `(1/N)·Σ σᵢ·sg[σᵢ(t)]` and its gradient with respect to the opacity logits.
pub fn loss_reg(set: &GaussianSet, t: f64) -> Result<(f64, Vec<f64>)> {
    let n = set.count();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let a = set.activate(i)?;
        let sig_t = temporal_opacity(&a, t);
        let sig = sigmoid(set.opacity_logit[i]);
        value += sig * sig_t;
        *g = inv * sig_t * sig * (1.0 - sig);
    }
    Ok((value * inv, grad))
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_size(gt)?;
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.data.len() as f64)
}

pub fn metric_psnr(pred: &Image, gt: &Image, data_range: f64) -> Result<f64> {
    let e = mse(pred, gt)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / e).log10()).min(PSNR_CAP))
}

/// Structural dissimilarity `(1 − SSIM)/2`; variant 1 assumes data range 1, variant 2 range 2.
pub fn metric_dssim(pred: &Image, gt: &Image, variant: u8) -> Result<f64> {
    let range = match variant {
        1 => 1.0,
        2 => 2.0,
        v => {
            return Err(Error::Config(format!(
                "DSSIM variant must be 1 or 2, got {v}"
            )))
        }
    };
    Ok((1.0 - ssim(pred, gt, range)?) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub dssim1: f64,
    pub dssim2: f64,
}

pub fn frame_metrics(pred: &Image, gt: &Image) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        psnr: metric_psnr(pred, gt, 1.0)?,
        dssim1: metric_dssim(pred, gt, 1)?,
        dssim2: metric_dssim(pred, gt, 2)?,
    })
}

/// Crops both images to the bounding box of `mask` and zeroes pixels outside
/// it. Returns `None` for an empty mask.
pub fn apply_mask(pred: &Image, gt: &Image, mask: &[bool]) -> Result<Option<(Image, Image)>> {
    pred.same_size(gt)?;
    let (w, h) = (pred.width, pred.height);
    if mask.len() != w * h {
        return Err(Error::Shape {
            field: "mask".into(),
            expected: w * h,
            found: mask.len(),
        });
    }
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let Some((x0, y0, x1, y1)) = bbox else {
        return Ok(None);
    };
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut a = pred.crop(x0, y0, cw, ch);
    let mut b = gt.crop(x0, y0, cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            if !mask[(y + y0) * w + x + x0] {
                a.set_pixel(x, y, [0.0; 3]);
                b.set_pixel(x, y, [0.0; 3]);
            }
        }
    }
    Ok(Some((a, b)))
}

pub fn masked_frame_metrics(
    pred: &Image,
    gt: &Image,
    mask: &[bool],
) -> Result<Option<FrameMetrics>> {
    match apply_mask(pred, gt, mask)? {
        Some((a, b)) => Ok(Some(frame_metrics(&a, &b)?)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{logit, RawPrimitive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Direct 2D windowed SSIM with explicit variance/covariance sums.
    fn reference_ssim(a: &Image, b: &Image, range: f64) -> f64 {
        let n = ssim_window_size(a.width, a.height);
        let sigma = SSIM_SIGMA;
        let c = (n as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                win[i * n + j] = (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for y in 0..=a.height - n {
                for x in 0..=a.width - n {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let wv = win[i * n + j];
                            ma += wv * a.pixel(x + j, y + i)[ch];
                            mb += wv * b.pixel(x + j, y + i)[ch];
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let wv = win[i * n + j];
                            let da = a.pixel(x + j, y + i)[ch] - ma;
                            let db = b.pixel(x + j, y + i)[ch] - mb;
                            va += wv * da * da;
                            vb += wv * db * db;
                            cov += wv * da * db;
                        }
                    }
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images_have_zero_loss_and_gradient() {
        let a = random_image(20, 16, 1);
        let l = loss_render(&a, &a, &LossWeights::default()).unwrap();
        assert!(l.total.abs() <= 1e-9);
        assert!(l.grad.data.iter().all(|g| g.abs() <= 1e-12));
    }

    #[test]
    fn uniform_offset_l1_term() {
        let gt = Image::from_data(
            16,
            16,
            random_image(16, 16, 2)
                .data
                .iter()
                .map(|v| 0.1 + 0.8 * v)
                .collect(),
        )
        .unwrap();
        let pred = Image::from_data(16, 16, gt.data.iter().map(|v| v + 0.1).collect()).unwrap();
        let w = LossWeights::default();
        let l = loss_render(&pred, &gt, &w).unwrap();
        assert!((w.lambda_img * l.l1 - 0.08).abs() < 1e-12);
        let s = reference_ssim(&pred, &gt, 1.0);
        assert!((l.total - 0.08 - 0.2 * (1.0 - s) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_reference() {
        for (w, h, seed) in [(24, 18, 3), (8, 8, 4), (11, 30, 5)] {
            let a = random_image(w, h, seed);
            let b = random_image(w, h, seed + 100);
            for range in [1.0, 2.0] {
                let got = ssim(&a, &b, range).unwrap();
                let want = reference_ssim(&a, &b, range);
                assert!((got - want).abs() < 1e-12, "{w}x{h}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pred = random_image(8, 8, 6);
        let gt = random_image(8, 8, 7);
        let w = LossWeights::default();
        let l = loss_render(&pred, &gt, &w).unwrap();
        for i in 0..pred.data.len() {
            let h = 1e-6;
            let mut p = pred.clone();
            let mut m = pred.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let numeric = (loss_render(&p, &gt, &w).unwrap().total
                - loss_render(&m, &gt, &w).unwrap().total)
                / (2.0 * h);
            let a = l.grad.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel <= 1e-5, "pixel value {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences_on_larger_image() {
        let pred = random_image(17, 14, 8);
        let gt = random_image(17, 14, 9);
        let (_, g) = ssim_with_grad(&pred, &gt, 1.0).unwrap();
        for i in (0..pred.data.len()).step_by(7) {
            let h = 1e-6;
            let mut p = pred.clone();
            let mut m = pred.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let numeric = (ssim(&p, &gt, 1.0).unwrap() - ssim(&m, &gt, 1.0).unwrap()) / (2.0 * h);
            assert!(
                (g.data[i] - numeric).abs() <= 1e-5 * g.data[i].abs().max(numeric.abs()) + 1e-10,
                "{i}: {} vs {numeric}",
                g.data[i]
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Image::new(8, 8);
        let b = Image::new(8, 9);
        assert!(loss_render(&a, &b, &LossWeights::default()).is_err());
        assert!(metric_psnr(&a, &b, 1.0).is_err());
        assert!(metric_dssim(&a, &b, 1).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(10, 10, 10);
        assert_eq!(metric_psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let gt = Image::filled(10, 10, [0.5; 3]);
        let off = Image::filled(10, 10, [0.6; 3]);
        assert!((metric_psnr(&off, &gt, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let zero = Image::new(4, 4);
        let one = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(metric_psnr(&one, &zero, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn dssim_examples() {
        let a = random_image(16, 16, 11);
        assert_eq!(metric_dssim(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(metric_dssim(&a, &a, 2).unwrap(), 0.0);
        assert!(metric_dssim(&a, &a, 3).is_err());
        for seed in 0..5 {
            let gt = random_image(16, 16, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = Image::from_data(
                16,
                16,
                gt.data
                    .iter()
                    .map(|v| v + 0.2 * (rng.random::<f64>() - 0.5))
                    .collect(),
            )
            .unwrap();
            let d1 = metric_dssim(&noisy, &gt, 1).unwrap();
            let d2 = metric_dssim(&noisy, &gt, 2).unwrap();
            assert!(d2 <= d1);
            assert!((d1 - metric_dssim(&gt, &noisy, 1).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let a = random_image(16, 12, 12);
        let b = random_image(16, 12, 13);
        let m = masked_frame_metrics(&a, &b, &[true; 16 * 12])
            .unwrap()
            .unwrap();
        assert_eq!(m, frame_metrics(&a, &b).unwrap());
        assert!(masked_frame_metrics(&a, &b, &[false; 16 * 12])
            .unwrap()
            .is_none());
    }

    #[test]
    fn mask_crops_to_bounding_box() {
        let a = random_image(16, 12, 14);
        let mut mask = vec![false; 16 * 12];
        mask[3 * 16 + 4] = true;
        mask[8 * 16 + 10] = true;
        let (ca, _) = apply_mask(&a, &a, &mask).unwrap().unwrap();
        assert_eq!((ca.width, ca.height), (7, 6));
        assert_eq!(ca.pixel(0, 0), a.pixel(4, 3));
        assert_eq!(ca.pixel(1, 0), [0.0; 3]);
    }

    fn set_with(opacities: &[f64], times: &[f64]) -> GaussianSet {
        let prims: Vec<_> = opacities
            .iter()
            .zip(times)
            .map(|(&o, &mt)| {
                let mut p = RawPrimitive::at([0.0; 3], mt, 0);
                p.opacity_logit = logit(o);
                p.log_duration = 0.0;
                p
            })
            .collect();
        GaussianSet::from_primitives(0, &prims).unwrap()
    }

    #[test]
    fn reg_examples() {
        let set = set_with(&[1.0 - 1e-12, 1.0 - 1e-12], &[0.3, 0.3]);
        let (l, _) = loss_reg(&set, 0.3).unwrap();
        assert!((l - 1.0).abs() < 1e-11);
        // σ(t) = 0.5 needs (t − μ_t)/s = √(2 ln 2)
        let dt = (2.0 * 2f64.ln()).sqrt();
        let set = set_with(&[0.2, 0.4], &[0.0, -dt]);
        let (l, g) = loss_reg(&set, 0.0).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        assert!((g[0] - 0.5 * 0.2 * 0.8).abs() < 1e-12);
        assert!((g[1] - 0.5 * 0.5 * 0.4 * 0.6).abs() < 1e-12);
        let (l, g) = loss_reg(&GaussianSet::new(0).unwrap(), 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.is_empty());
    }

    #[test]
    fn reg_is_monotone_in_opacity() {
        let mut prev = -1.0;
        for o in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let (l, _) = loss_reg(&set_with(&[o, 0.3], &[0.1, 0.7]), 0.4).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn reg_schedule() {
        let w = LossWeights::default();
        assert_eq!(w.reg_weight(0.0), 1e-2);
        assert_eq!(w.reg_weight(0.49), 1e-2);
        assert!((w.reg_weight(0.55) - 0.5e-2).abs() < 1e-15);
        assert_eq!(w.reg_weight(0.6), 0.0);
        assert_eq!(w.reg_weight(1.0), 0.0);
    }

    #[test]
    fn perceptual_weight_is_rejected() {
        let w = LossWeights {
            lambda_perc: 0.01,
            ..Default::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
        assert!(LossWeights::default().validate().is_ok());
    }
}
