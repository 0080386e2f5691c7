//! Training and evaluation over a multi-view dynamic scene.
//!
//! Each iteration samples one training observation (camera and time)
//! uniformly with the run's ChaCha8 stream, renders it, backpropagates the
//! rendering loss plus the scheduled 4D regularizer and applies one Adam
//! step. Relocation runs every `relocation.period` iterations.
//!
//! Progress lines have the form
//!
//! ```text
//! iter 300/1200 loss 0.04121 l1 0.03010 ssim 0.8712 reg 0.00412 count 2000 mean_opacity 0.0931 dead 12
//! ```

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::initfit::{
    build_seed_cloud, random_init, seed_primitives, CorrespondenceSet, InitMode, Track,
    TriangulationStats,
};
use crate::objective::{frame_metrics, loss_reg, loss_render, masked_frame_metrics, FrameMetrics};
use crate::optimizer::{adam_step, AdamState, StepRates};
use crate::primitives::{sigmoid, GaussianSet};
use crate::projection::Camera;
use crate::rasterizer::{accumulate_backward, render_forward, GradientSet, RasterConfig};
use crate::relocation::{relocate, RelocationReport};
use crate::scenedata::{Bounds, Checkpoint, RngState, Scene, SplitKind, SyntheticScene};

/// One reference image with its camera (index into [`Dataset::cameras`]) and time.
#[derive(Clone, Debug)]
pub struct Observation {
    pub camera: usize,
    pub time: f64,
    pub image: Image,
    pub mask: Option<Vec<bool>>,
}

/// Everything training and evaluation need, decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub cameras: Vec<Camera>,
    pub train: Vec<Observation>,
    pub test: Vec<Observation>,
    pub frame_count: usize,
    pub frame_interval: f64,
    pub extent: f64,
    pub bounds: Bounds,
    pub background: [f64; 3],
    pub correspondences: Option<CorrespondenceSet>,
}

impl Dataset {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let n = scene.manifest.frames.len();
        let images = scene.load_images(&(0..n).collect::<Vec<_>>())?;
        let masks = (0..n)
            .map(|i| scene.load_mask(i))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(scene, images, masks, scene.correspondences()?)
    }

    pub fn from_synthetic(s: &SyntheticScene) -> Result<Self> {
        let scene = Scene::from_manifest(
            s.manifest.clone(),
            Path::new("scene.json"),
            Path::new("."),
            false,
        )?;
        let masks = s.masks.iter().map(|m| Some(m.clone())).collect();
        Self::assemble(
            &scene,
            s.images.clone(),
            masks,
            Some(s.correspondences.clone()),
        )
    }

    fn assemble(
        scene: &Scene,
        images: Vec<Image>,
        masks: Vec<Option<Vec<bool>>>,
        correspondences: Option<CorrespondenceSet>,
    ) -> Result<Self> {
        let frames = &scene.manifest.frames;
        let mut obs: Vec<Option<Observation>> = frames
            .iter()
            .zip(images.into_iter().zip(masks))
            .map(|(f, (image, mask))| {
                let camera = scene
                    .cameras
                    .iter()
                    .position(|c| c.id == f.camera)
                    .expect("validated camera id");
                Some(Observation {
                    camera,
                    time: f.time,
                    image,
                    mask,
                })
            })
            .collect();
        let mut take = |split| -> Vec<Observation> {
            scene
                .frames_in(split)
                .into_iter()
                .filter_map(|i| obs[i].take())
                .collect()
        };
        let test = take(SplitKind::Test);
        let train = take(SplitKind::Train);
        Ok(Dataset {
            name: scene.manifest.name.clone(),
            cameras: scene.cameras.clone(),
            train,
            test,
            frame_count: scene.manifest.frame_count,
            frame_interval: scene.frame_interval(),
            extent: scene.extent(),
            bounds: scene.bounds(),
            background: scene.manifest.background,
            correspondences,
        })
    }

    pub fn split(&self, kind: SplitKind) -> &[Observation] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    fn is_train_camera(&self, id: &str) -> bool {
        self.train.iter().any(|o| self.cameras[o.camera].id == id)
    }

    /// Color of the training image nearest in time for camera `id` at pixel `px`.
    fn sample_color(&self, id: &str, time: f64, px: [f64; 2]) -> Option<[f64; 3]> {
        let obs = self
            .train
            .iter()
            .filter(|o| self.cameras[o.camera].id == id)
            .min_by(|a, b| (a.time - time).abs().total_cmp(&(b.time - time).abs()))?;
        if (obs.time - time).abs() > 0.5 * self.frame_interval {
            return None;
        }
        let (x, y) = (px[0].round(), px[1].round());
        if x < 0.0 || y < 0.0 || x >= obs.image.width as f64 || y >= obs.image.height as f64 {
            return None;
        }
        Some(obs.image.pixel(x as usize, y as usize))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub mode: InitMode,
    pub count: usize,
    pub triangulation: Option<TriangulationStats>,
}

/// Builds the starting primitives according to `cfg.init`. Only views from
/// training cameras take part in triangulation.
pub fn initialize<R: Rng>(
    data: &Dataset,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<(GaussianSet, InitReport)> {
    let mode = match (cfg.init.mode, &data.correspondences) {
        (InitMode::Auto, Some(_)) => InitMode::Correspondences,
        (InitMode::Auto, None) => InitMode::Random,
        (m, _) => m,
    };
    match mode {
        InitMode::Correspondences => {
            let corr = data.correspondences.as_ref().ok_or_else(|| {
                Error::EmptyInit(
                    "the scene lists no correspondence file; use init.mode = \"random\"".into(),
                )
            })?;
            let tracks = corr
                .tracks
                .iter()
                .filter_map(|t| {
                    let views: Vec<_> = t
                        .views
                        .iter()
                        .filter(|(c, _)| data.is_train_camera(c))
                        .cloned()
                        .collect();
                    (views.len() >= 2).then_some(Track {
                        time: t.time,
                        views,
                    })
                })
                .collect();
            let corr = CorrespondenceSet { tracks };
            let (cloud, stats) = build_seed_cloud(&corr, &data.cameras, &cfg.init, |c, t, px| {
                data.sample_color(c, t, px)
            })?;
            let set =
                seed_primitives(&cloud, data.frame_interval, cfg.sh_degree, cfg.init.opacity)?;
            info!(
                "initialized {} primitives from {} of {} tracks ({} degenerate, {} above the reprojection limit)",
                set.count(),
                stats.accepted,
                stats.tracks,
                stats.degenerate,
                stats.high_error
            );
            Ok((
                set.clone(),
                InitReport {
                    mode,
                    count: set.count(),
                    triangulation: Some(stats),
                },
            ))
        }
        InitMode::Random | InitMode::Auto => {
            let b = data.bounds;
            let set = random_init(
                cfg.init.random_count,
                (b.min, b.max),
                data.frame_interval,
                cfg.sh_degree,
                cfg.init.opacity,
                rng,
            )?;
            info!("initialized {} random primitives", set.count());
            Ok((
                set.clone(),
                InitReport {
                    mode: InitMode::Random,
                    count: set.count(),
                    triangulation: None,
                },
            ))
        }
    }
}

pub fn mean_opacity(set: &GaussianSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.opacity_logit.iter().map(|&l| sigmoid(l)).sum::<f64>() / set.count() as f64
}

/// Number of primitives whose activated opacity is below `threshold`.
pub fn count_below(set: &GaussianSet, threshold: f64) -> usize {
    set.opacity_logit
        .iter()
        .filter(|&&l| sigmoid(l) < threshold)
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Iteration number after the step (1-based).
    pub iteration: u64,
    pub observation: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Regularizer value times its scheduled weight.
    pub reg: f64,
    pub skipped: usize,
    pub relocation: Option<RelocationReport>,
}

pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub cfg: EngineConfig,
    pub set: GaussianSet,
    pub adam: AdamState,
    pub grads: GradientSet,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub total: u64,
    pub init: Option<InitReport>,
    raster: RasterConfig,
}

impl<'a> Trainer<'a> {
    /// Fresh run: seeds the stream from `cfg.seed` and initializes primitives.
    pub fn new(data: &'a Dataset, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (set, report) = initialize(data, &cfg, &mut rng)?;
        let mut t = Self::with_state(data, cfg, set, rng, 0)?;
        t.init = Some(report);
        Ok(t)
    }

    /// Continues from a checkpoint; Adam moments start from zero.
    pub fn resume(data: &'a Dataset, cfg: EngineConfig, ckpt: &Checkpoint) -> Result<Self> {
        Self::with_state(
            data,
            cfg,
            ckpt.set.clone(),
            ckpt.rng.restore(),
            ckpt.iteration,
        )
    }

    pub fn with_state(
        data: &'a Dataset,
        cfg: EngineConfig,
        set: GaussianSet,
        rng: ChaCha8Rng,
        iteration: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Config("the training split has no frames".into()));
        }
        if set.sh_degree() != cfg.sh_degree {
            return Err(Error::Config(format!(
                "primitives have SH degree {}, configuration says {}",
                set.sh_degree(),
                cfg.sh_degree
            )));
        }
        set.validate()?;
        let total = cfg.train.total_iterations(data.frame_count);
        Ok(Trainer {
            data,
            raster: cfg.raster_config(),
            adam: AdamState::new(&set),
            grads: GradientSet::for_set(&set),
            set,
            rng,
            iteration,
            total,
            init: None,
            cfg,
        })
    }

    pub fn raster(&self) -> &RasterConfig {
        &self.raster
    }

    pub fn progress(&self) -> f64 {
        (self.iteration as f64 / self.total as f64).min(1.0)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let iteration = self.iteration;
        self.step_inner().map_err(|e| Error::Training {
            iteration: iteration + 1,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self) -> Result<StepReport> {
        let progress = self.progress();
        let k = self.rng.random_range(0..self.data.train.len());
        let obs = &self.data.train[k];
        let cam = &self.data.cameras[obs.camera];
        let out = render_forward(&self.set, cam, obs.time, self.data.background, &self.raster)?;
        let loss = loss_render(&out.rgb, &obs.image, &self.cfg.loss)?;
        self.grads.zero_params();
        accumulate_backward(&self.set, cam, obs.time, &out, &loss.grad, &mut self.grads)?;
        let w = self.cfg.loss.reg_weight(progress);
        let mut reg = 0.0;
        if w > 0.0 {
            let (value, g) = loss_reg(&self.set, obs.time)?;
            reg = w * value;
            for (d, gi) in self.grads.params.opacity_logit.iter_mut().zip(g) {
                *d += w * gi;
            }
        }
        let rates = StepRates::at(&self.cfg.lr, &self.cfg.velocity, self.data.extent, progress);
        let skipped = adam_step(&mut self.adam, &mut self.set, &self.grads.params, &rates)?;
        self.iteration += 1;
        let rc = &self.cfg.relocation;
        let relocation = if rc.enabled
            && self.iteration.is_multiple_of(rc.period)
            && self.iteration < self.total
        {
            Some(relocate(
                &mut self.set,
                &mut self.adam,
                &mut self.grads,
                rc,
                &mut self.rng,
            )?)
        } else {
            None
        };
        Ok(StepReport {
            iteration: self.iteration,
            observation: k,
            loss: loss.total + reg,
            l1: loss.l1,
            ssim: loss.ssim,
            reg,
            skipped,
            relocation,
        })
    }

    /// Steps until `until` (capped at the total), calling `on_step` after each.
    pub fn run_until<F>(&mut self, until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Self, &StepReport) -> Result<()>,
    {
        let until = until.min(self.total);
        while self.iteration < until {
            let r = self.step()?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn progress_line(&self, r: &StepReport) -> String {
        format!(
            "iter {}/{} loss {:.5} l1 {:.5} ssim {:.4} reg {:.5} count {} mean_opacity {:.4} dead {}",
            r.iteration,
            self.total,
            r.loss,
            r.l1,
            r.ssim,
            r.reg,
            self.set.count(),
            mean_opacity(&self.set),
            count_below(&self.set, self.cfg.relocation.dead_threshold)
        )
    }

    pub fn checkpoint(&self, scene: Option<String>) -> Checkpoint {
        Checkpoint {
            set: self.set.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            scene,
            config: self.cfg.to_json(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub camera: String,
    pub time: f64,
    pub psnr: f64,
    pub dssim1: f64,
    pub dssim2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<FrameMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub psnr: f64,
    pub dssim1: f64,
    pub dssim2: f64,
    /// Means over the frames with a non-empty mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<MaskedSummary>,
    #[serde(rename = "frame")]
    pub per_frame: Vec<FrameReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedSummary {
    pub frames: usize,
    pub psnr: f64,
    pub dssim1: f64,
    pub dssim2: f64,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes to TOML")
    }
}

fn mean_of(ms: &[FrameMetrics]) -> (f64, f64, f64) {
    let n = ms.len().max(1) as f64;
    (
        ms.iter().map(|m| m.psnr).sum::<f64>() / n,
        ms.iter().map(|m| m.dssim1).sum::<f64>() / n,
        ms.iter().map(|m| m.dssim2).sum::<f64>() / n,
    )
}

/// Renders every observation, quantizes it to 8 bits per channel as it
/// would be stored, and scores it against its reference image.
pub fn evaluate(
    set: &GaussianSet,
    data: &Dataset,
    observations: &[Observation],
    raster: &RasterConfig,
) -> Result<EvalReport> {
    if observations.is_empty() {
        return Err(Error::Config("the evaluation split has no frames".into()));
    }
    let mut per_frame = Vec::with_capacity(observations.len());
    let mut full = Vec::new();
    let mut masked_all = Vec::new();
    for o in observations {
        let cam = &data.cameras[o.camera];
        let out = render_forward(set, cam, o.time, data.background, raster)?;
        let pred = Image::from_rgb8(out.rgb.width, out.rgb.height, &out.rgb.to_rgb8())?;
        let m = frame_metrics(&pred, &o.image)?;
        let masked = match &o.mask {
            Some(mask) => masked_frame_metrics(&pred, &o.image, mask)?,
            None => None,
        };
        if let Some(mm) = &masked {
            masked_all.push(*mm);
        }
        full.push(m);
        per_frame.push(FrameReport {
            camera: cam.id.clone(),
            time: o.time,
            psnr: m.psnr,
            dssim1: m.dssim1,
            dssim2: m.dssim2,
            masked,
        });
    }
    let (psnr, dssim1, dssim2) = mean_of(&full);
    let masked = (!masked_all.is_empty()).then(|| {
        let (psnr, dssim1, dssim2) = mean_of(&masked_all);
        MaskedSummary {
            frames: masked_all.len(),
            psnr,
            dssim1,
            dssim2,
        }
    });
    Ok(EvalReport {
        frames: observations.len(),
        psnr,
        dssim1,
        dssim2,
        masked,
        per_frame,
    })
}
