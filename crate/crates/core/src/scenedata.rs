//! Scene manifests, image files, checkpoints and synthetic test scenes.
//!
//! A scene directory holds a `scene.json` manifest plus the frame images it
//! references (paths are relative to the manifest). Times are normalized to
//! `[0, 1]` over the sequence.
//!
//! ```json
//! {
//!   "format": "ftgs-scene", "version": 1, "name": "moving-blobs",
//!   "frame_count": 12, "fps": 30.0,
//!   "cameras": [{"id": "cam0", "fx": 110, "fy": 110, "cx": 31.5, "cy": 31.5,
//!                "width": 64, "height": 64,
//!                "rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0,0,4]}],
//!   "frames": [{"camera": "cam0", "time": 0.0, "image": "images/cam0_000.png",
//!               "mask": "masks/cam0_000.png"}],
//!   "correspondences": "correspondences.txt",
//!   "split": {"train": ["cam0"], "test": ["cam1"]},
//!   "bounds": {"min": [-1,-1,-1], "max": [1,1,1]},
//!   "background": [0, 0, 0]
//! }
//! ```
//!
//! Checkpoints are a text header followed by little-endian `f32` blobs:
//!
//! ```text
//! FTGS-CHECKPOINT 1
//! count 48
//! sh_degree 0
//! iteration 3000
//! rng <seed hex> <stream> <word position>
//! scene ../scene/scene.json
//! config {"train":{...}}
//! field position 48x3 offset 0 bytes 576
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::SH_C0;
use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::initfit::{CorrespondenceSet, Track};
use crate::primitives::{logit, motion_position, Field, GaussianSet, RawPrimitive};
use crate::projection::{project_point, Camera};
use crate::rasterizer::{render_forward, RasterConfig};

pub const SCENE_FORMAT: &str = "ftgs-scene";
pub const SCENE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &str = "FTGS-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World → camera rotation, row major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraSpec {
    pub fn from_camera(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraSpec {
            id: c.id.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = &self.rotation;
        Camera::new(
            self.id.clone(),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub camera: String,
    pub time: f64,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub frame_count: usize,
    pub fps: f64,
    pub cameras: Vec<CameraSpec>,
    pub frames: Vec<FrameSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    #[serde(default)]
    pub background: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

/// A validated manifest with its cameras; images are decoded on demand.
#[derive(Clone, Debug)]
pub struct Scene {
    pub path: PathBuf,
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn load(path: &Path) -> Result<Scene> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: SceneManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", e.line())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Scene::from_manifest(manifest, path, &root, true)
    }

    pub fn from_manifest(
        manifest: SceneManifest,
        path: &Path,
        root: &Path,
        check_files: bool,
    ) -> Result<Scene> {
        let err = |m: String| Error::parse(path, m);
        if manifest.format != SCENE_FORMAT {
            return Err(err(format!(
                "format `{}` is not `{SCENE_FORMAT}`",
                manifest.format
            )));
        }
        if manifest.version != SCENE_VERSION {
            return Err(err(format!(
                "unsupported scene version {}",
                manifest.version
            )));
        }
        let mut cameras: Vec<Camera> = Vec::with_capacity(manifest.cameras.len());
        for (i, c) in manifest.cameras.iter().enumerate() {
            if cameras.iter().any(|o| o.id == c.id) {
                return Err(err(format!("cameras[{i}]: duplicate camera id `{}`", c.id)));
            }
            cameras.push(
                c.to_camera()
                    .map_err(|e| err(format!("cameras[{i}]: {e}")))?,
            );
        }
        for (i, f) in manifest.frames.iter().enumerate() {
            if !cameras.iter().any(|c| c.id == f.camera) {
                return Err(err(format!(
                    "frames[{i}]: unknown camera id `{}`",
                    f.camera
                )));
            }
            if !(0.0..=1.0).contains(&f.time) {
                return Err(err(format!(
                    "frames[{i}]: time {} is outside [0, 1]",
                    f.time
                )));
            }
            if check_files {
                let img = root.join(&f.image);
                if !img.is_file() {
                    return Err(err(format!(
                        "frames[{i}]: image `{}` not found",
                        img.display()
                    )));
                }
                if let Some(m) = &f.mask {
                    if !root.join(m).is_file() {
                        return Err(err(format!("frames[{i}]: mask `{m}` not found")));
                    }
                }
            }
        }
        for (name, ids) in [
            ("train", &manifest.split.train),
            ("test", &manifest.split.test),
        ] {
            for id in ids {
                if !cameras.iter().any(|c| &c.id == id) {
                    return Err(err(format!("split.{name}: unknown camera id `{id}`")));
                }
            }
        }
        if let Some(b) = &manifest.bounds {
            if (0..3).any(|a| !(b.max[a] > b.min[a])) {
                return Err(err("bounds: max must exceed min on every axis".into()));
            }
        }
        Ok(Scene {
            path: path.to_path_buf(),
            root: root.to_path_buf(),
            manifest,
            cameras,
        })
    }

    pub fn camera(&self, id: &str) -> Result<&Camera> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownCamera(id.to_string()))
    }

    /// Frame indices whose camera belongs to the split. An empty train list
    /// means every camera not listed as test.
    pub fn frames_in(&self, split: SplitKind) -> Vec<usize> {
        let s = &self.manifest.split;
        self.manifest
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| match split {
                SplitKind::Test => s.test.contains(&f.camera),
                SplitKind::Train if s.train.is_empty() => !s.test.contains(&f.camera),
                SplitKind::Train => s.train.contains(&f.camera),
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_image(&self, frame: usize) -> Result<Image> {
        let f = &self.manifest.frames[frame];
        let img = load_png(&self.root.join(&f.image))?;
        let cam = self.camera(&f.camera)?;
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::parse(
                self.root.join(&f.image),
                format!(
                    "image is {}x{}, camera `{}` is {}x{}",
                    img.width, img.height, cam.id, cam.width, cam.height
                ),
            ));
        }
        Ok(img)
    }

    pub fn load_images(&self, frames: &[usize]) -> Result<Vec<Image>> {
        frames.par_iter().map(|&i| self.load_image(i)).collect()
    }

    pub fn load_mask(&self, frame: usize) -> Result<Option<Vec<bool>>> {
        match &self.manifest.frames[frame].mask {
            None => Ok(None),
            Some(m) => load_mask(&self.root.join(m)).map(Some),
        }
    }

    pub fn correspondences(&self) -> Result<Option<CorrespondenceSet>> {
        match &self.manifest.correspondences {
            None => Ok(None),
            Some(p) => {
                let c = CorrespondenceSet::load(&self.root.join(p))?;
                c.validate(&self.cameras)?;
                Ok(Some(c))
            }
        }
    }

    /// Normalized time between consecutive frames.
    pub fn frame_interval(&self) -> f64 {
        if self.manifest.frame_count > 1 {
            1.0 / (self.manifest.frame_count - 1) as f64
        } else {
            1.0
        }
    }

    /// 1.1 × the largest camera distance from the camera centroid.
    pub fn extent(&self) -> f64 {
        let centers: Vec<Vector3<f64>> = self.cameras.iter().map(|c| c.center()).collect();
        if centers.is_empty() {
            return 1.0;
        }
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
        let r = centers
            .iter()
            .map(|c| (c - mean).norm())
            .fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }

    /// Manifest bounds, or a cube of half-size `extent/2` around the camera centroid.
    pub fn bounds(&self) -> Bounds {
        if let Some(b) = self.manifest.bounds {
            return b;
        }
        let n = self.cameras.len().max(1) as f64;
        let mean = self
            .cameras
            .iter()
            .map(|c| c.center())
            .sum::<Vector3<f64>>()
            / n;
        let h = 0.5 * self.extent();
        Bounds {
            min: [mean.x - h, mean.y - h, mean.z - h],
            max: [mean.x + h, mean.y + h, mean.z + h],
        }
    }
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .ok_or_else(|| Error::Config("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(img.as_raw().iter().map(|&v| v >= 128).collect())
}

pub fn save_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Config("mask size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub set: GaussianSet,
    pub iteration: u64,
    pub rng: RngState,
    /// Path of the scene manifest, as given when training started.
    pub scene: Option<String>,
    /// Training configuration as a single-line JSON document.
    pub config: String,
}

fn field_key(f: Field) -> &'static str {
    f.name()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.config.contains('\n') || self.scene.as_deref().is_some_and(|s| s.contains('\n')) {
            return Err(Error::Checkpoint(
                "header values must be single-line".into(),
            ));
        }
        let n = self.set.count();
        let deg = self.set.sh_degree();
        let mut header = String::new();
        let _ = writeln!(header, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(header, "count {n}");
        let _ = writeln!(header, "sh_degree {deg}");
        let _ = writeln!(header, "iteration {}", self.iteration);
        let seed_hex: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(
            header,
            "rng {seed_hex} {} {}",
            self.rng.stream, self.rng.word_pos
        );
        let _ = writeln!(header, "scene {}", self.scene.as_deref().unwrap_or("-"));
        let _ = writeln!(header, "config {}", self.config);
        let mut offset = 0usize;
        for f in Field::ALL {
            let w = f.width(deg);
            let bytes = n * w * 4;
            let _ = writeln!(
                header,
                "field {} {n}x{w} offset {offset} bytes {bytes}",
                field_key(f)
            );
            offset += bytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for f in Field::ALL {
            for v in self.set.field(f) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", source.display()));
        let end = find_header_end(bytes)
            .ok_or_else(|| bad("header terminator `end` not found".into()))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let blob = &bytes[end..];
        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let mut parts = first.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut count = None;
        let mut sh_degree = None;
        let mut iteration = None;
        let mut rng = None;
        let mut scene = None;
        let mut config = None;
        let mut fields: Vec<(String, usize, usize, usize, usize)> = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str, what: &str| -> Result<u64> {
                s.parse().map_err(|_| bad(format!("invalid {what} `{s}`")))
            };
            match key {
                "count" => count = Some(num(rest, "count")? as usize),
                "sh_degree" => sh_degree = Some(num(rest, "sh_degree")? as usize),
                "iteration" => iteration = Some(num(rest, "iteration")?),
                "rng" => {
                    let p: Vec<&str> = rest.split_whitespace().collect();
                    if p.len() != 3 || p[0].len() != 64 {
                        return Err(bad("malformed rng line".into()));
                    }
                    let mut seed = [0u8; 32];
                    for (i, b) in seed.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&p[0][2 * i..2 * i + 2], 16)
                            .map_err(|_| bad("malformed rng seed".into()))?;
                    }
                    rng = Some(RngState {
                        seed,
                        stream: p[1]
                            .parse()
                            .map_err(|_| bad("malformed rng stream".into()))?,
                        word_pos: p[2]
                            .parse()
                            .map_err(|_| bad("malformed rng position".into()))?,
                    });
                }
                "scene" => {
                    scene = Some(if rest == "-" {
                        None
                    } else {
                        Some(rest.to_string())
                    })
                }
                "config" => config = Some(rest.to_string()),
                "field" => {
                    let p: Vec<&str> = rest.split_whitespace().collect();
                    if p.len() != 6 || p[2] != "offset" || p[4] != "bytes" {
                        return Err(bad(format!("malformed field line `{line}`")));
                    }
                    let (r, c) = p[1].split_once('x').ok_or_else(|| {
                        bad(format!("field `{}`: malformed shape `{}`", p[0], p[1]))
                    })?;
                    let shape_err = || bad(format!("field `{}`: malformed shape `{}`", p[0], p[1]));
                    fields.push((
                        p[0].to_string(),
                        r.parse().map_err(|_| shape_err())?,
                        c.parse().map_err(|_| shape_err())?,
                        num(p[3], "offset")? as usize,
                        num(p[5], "byte count")? as usize,
                    ));
                }
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        let count = count.ok_or_else(|| bad("missing count".into()))?;
        let sh_degree = sh_degree.ok_or_else(|| bad("missing sh_degree".into()))?;
        let mut set = GaussianSet::zeros(count, sh_degree).map_err(|e| bad(e.to_string()))?;
        for f in Field::ALL {
            let name = field_key(f);
            let (_, rows, cols, offset, nbytes) = fields
                .iter()
                .find(|e| e.0 == name)
                .cloned()
                .ok_or_else(|| bad(format!("missing field `{name}`")))?;
            let w = f.width(sh_degree);
            if rows != count || cols != w {
                return Err(bad(format!(
                    "field `{name}`: shape {rows}x{cols}, expected {count}x{w}"
                )));
            }
            if nbytes != rows * cols * 4 {
                return Err(bad(format!(
                    "field `{name}`: {nbytes} bytes for shape {rows}x{cols}"
                )));
            }
            let data = blob
                .get(offset..offset + nbytes)
                .ok_or_else(|| bad(format!("field `{name}`: truncated data")))?;
            for (dst, chunk) in set.field_mut(f).iter_mut().zip(data.chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
        }
        let expected: usize = fields.iter().map(|e| e.4).sum();
        if blob.len() != expected {
            return Err(bad(format!(
                "data section has {} bytes, header declares {expected}",
                blob.len()
            )));
        }
        Ok(Checkpoint {
            set,
            iteration: iteration.ok_or_else(|| bad("missing iteration".into()))?,
            rng: rng.ok_or_else(|| bad("missing rng".into()))?,
            scene: scene.ok_or_else(|| bad("missing scene".into()))?,
            config: config.ok_or_else(|| bad("missing config".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nend\n";
    bytes
        .windows(pat.len())
        .position(|w| w == pat)
        .map(|p| p + pat.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    StaticBlobs,
    MovingBlobs,
    CrossingBlobs,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::StaticBlobs => "static-blobs",
            Preset::MovingBlobs => "moving-blobs",
            Preset::CrossingBlobs => "crossing-blobs",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        [
            Preset::StaticBlobs,
            Preset::MovingBlobs,
            Preset::CrossingBlobs,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

/// Size parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub blobs: usize,
    pub cameras: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub ring_radius: f64,
    /// Index of the camera held out for testing.
    pub test_camera: usize,
    /// Pixel noise of the generated correspondences.
    pub match_noise: f64,
    /// Correspondence tracks per blob, at fixed offsets inside the blob.
    pub points_per_blob: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            blobs: 48,
            cameras: 6,
            frames: 12,
            width: 64,
            height: 64,
            focal: 110.0,
            ring_radius: 4.0,
            test_camera: 3,
            match_noise: 0.3,
            points_per_blob: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub preset: Preset,
    pub seed: u64,
    pub manifest: SceneManifest,
    pub cameras: Vec<Camera>,
    pub ground_truth: GaussianSet,
    /// One image per manifest frame.
    pub images: Vec<Image>,
    pub masks: Vec<Vec<bool>>,
    pub correspondences: CorrespondenceSet,
}

/// Blob radius used by the generator (largest scale axis range).
pub const SYNTH_SCALE_RANGE: (f64, f64) = (0.06, 0.1);
pub const SYNTH_SPEED_RANGE: (f64, f64) = (0.3, 0.5);
/// Duration of ground-truth blobs: long enough to stay visible all sequence.
const SYNTH_DURATION: f64 = 20.0;

pub fn generate_synthetic_scene(preset: Preset, seed: u64) -> Result<SyntheticScene> {
    generate_synthetic_scene_with(preset, seed, &SynthOptions::default())
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn saturated_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    let h: f64 = rng.random_range(0.0..6.0);
    let lo = rng.random_range(0.05..0.3);
    let hi = rng.random_range(0.75..0.95);
    let f = h.fract();
    let mid = lo
        + (hi - lo)
            * if (h as usize).is_multiple_of(2) {
                f
            } else {
                1.0 - f
            };
    match h as usize {
        0 => [hi, mid, lo],
        1 => [mid, hi, lo],
        2 => [lo, hi, mid],
        3 => [lo, mid, hi],
        4 => [mid, lo, hi],
        _ => [hi, lo, mid],
    }
}

pub fn generate_synthetic_scene_with(
    preset: Preset,
    seed: u64,
    opt: &SynthOptions,
) -> Result<SyntheticScene> {
    if opt.cameras < 2 || opt.frames < 2 || opt.blobs < 2 || opt.test_camera >= opt.cameras {
        return Err(Error::Config(
            "synthetic scene needs ≥2 cameras, frames and blobs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::with_capacity(opt.blobs);
    let (smin, smax) = SYNTH_SCALE_RANGE;
    let (vmin, vmax) = SYNTH_SPEED_RANGE;
    let pairs = if preset == Preset::CrossingBlobs {
        opt.blobs / 4
    } else {
        0
    };
    for b in 0..opt.blobs {
        let mut p = RawPrimitive::at([0.0; 3], 0.5, 0);
        let center = random_unit(&mut rng) * rng.random_range(0.0f64..1.0).cbrt() * 0.8;
        p.position = [center.x, center.y, center.z];
        p.log_scale = [0, 1, 2].map(|_| rng.random_range(smin..smax).ln());
        let q = random_unit(&mut rng);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = (0.5 * angle).sin_cos();
        p.rotation = [c, s * q.x, s * q.y, s * q.z];
        p.log_duration = SYNTH_DURATION.ln();
        p.opacity_logit = logit(rng.random_range(0.85..0.97));
        p.sh = saturated_color(&mut rng)
            .iter()
            .map(|v| v / SH_C0)
            .collect();
        match preset {
            Preset::StaticBlobs => {}
            Preset::MovingBlobs => {
                let v = random_unit(&mut rng) * rng.random_range(vmin..vmax);
                p.velocity = [v.x, v.y, v.z];
            }
            Preset::CrossingBlobs => {
                let v = random_unit(&mut rng) * rng.random_range(vmin..vmax);
                p.velocity = [v.x, v.y, v.z];
                if b < 2 * pairs && b % 2 == 1 {
                    // partner of the previous blob: same place at t = 0.5, opposite motion
                    let prev: &RawPrimitive = &prims[b - 1];
                    let offset = random_unit(&mut rng) * 0.5 * smin;
                    p.position = [0, 1, 2].map(|a| prev.position[a] + offset[a]);
                    p.velocity = prev.velocity.map(|x| -x);
                }
            }
        }
        prims.push(p);
    }
    let mut gt = GaussianSet::from_primitives(0, &prims)?;
    gt.round_to_f32();

    let cameras: Vec<Camera> = (0..opt.cameras)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / opt.cameras as f64;
            let elev = if i % 2 == 0 { 0.6 } else { -0.4 };
            let eye = Vector3::new(opt.ring_radius * a.sin(), elev, -opt.ring_radius * a.cos());
            Camera::look_at(
                format!("cam{i}"),
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
                opt.focal,
                opt.focal,
                opt.width,
                opt.height,
            )
        })
        .collect::<Result<_>>()?;

    let times: Vec<f64> = (0..opt.frames)
        .map(|i| i as f64 / (opt.frames - 1) as f64)
        .collect();
    let mut frames = Vec::new();
    let mut jobs = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        for cam in &cameras {
            frames.push(FrameSpec {
                camera: cam.id.clone(),
                time: t,
                image: format!("images/{}_{ti:03}.png", cam.id),
                mask: Some(format!("masks/{}_{ti:03}.png", cam.id)),
            });
            jobs.push((cam, t));
        }
    }
    let cfg = RasterConfig::default();
    let renders: Vec<(Image, Vec<bool>)> = jobs
        .par_iter()
        .map(|(cam, t)| {
            let out = render_forward(&gt, cam, *t, [0.0; 3], &cfg)?;
            let img = Image::from_rgb8(out.rgb.width, out.rgb.height, &out.rgb.to_rgb8())?;
            let mask = out.alpha.iter().map(|&a| a > 0.05).collect();
            Ok((img, mask))
        })
        .collect::<Result<_>>()?;
    let (images, masks): (Vec<Image>, Vec<Vec<bool>>) = renders.into_iter().unzip();

    let noise =
        Normal::new(0.0, opt.match_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    // body-fixed sample points: the first is the center, the rest lie
    // within about one standard deviation along each local axis
    let offsets: Vec<Vec<Vector3<f64>>> = (0..gt.count())
        .map(|i| {
            let g = gt.activate(i)?;
            Ok((0..opt.points_per_blob.max(1))
                .map(|k| {
                    if k == 0 {
                        return Vector3::zeros();
                    }
                    let z = Vector3::from_fn(|a, _| {
                        let n: f64 = rng.sample(StandardNormal);
                        n.clamp(-1.5, 1.5) * g.scale[a]
                    });
                    g.rotation * z
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut tracks = Vec::new();
    for &t in &times {
        for (i, offs) in offsets.iter().enumerate() {
            let g = gt.activate(i)?;
            let center = motion_position(&g, t);
            for off in offs {
                let mu = center + off;
                let mut views = Vec::new();
                for cam in &cameras {
                    let p = project_point(cam, &mu, 0.01);
                    let (u, v) = (
                        p.pixel.x + noise.sample(&mut rng),
                        p.pixel.y + noise.sample(&mut rng),
                    );
                    if p.valid
                        && u >= 0.0
                        && v >= 0.0
                        && u <= cam.width as f64 - 1.0
                        && v <= cam.height as f64 - 1.0
                    {
                        views.push((cam.id.clone(), [u, v]));
                    }
                }
                if views.len() >= 2 {
                    tracks.push(Track { time: t, views });
                }
            }
        }
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &t in &[0.0, 1.0] {
        for i in 0..gt.count() {
            let mu = motion_position(&gt.activate(i)?, t);
            for a in 0..3 {
                lo[a] = lo[a].min(mu[a] - 0.3);
                hi[a] = hi[a].max(mu[a] + 0.3);
            }
        }
    }
    let test_id = cameras[opt.test_camera].id.clone();
    let manifest = SceneManifest {
        format: SCENE_FORMAT.into(),
        version: SCENE_VERSION,
        name: preset.name().into(),
        frame_count: opt.frames,
        fps: 30.0,
        cameras: cameras.iter().map(CameraSpec::from_camera).collect(),
        frames,
        correspondences: Some("correspondences.txt".into()),
        split: Split {
            train: cameras
                .iter()
                .filter(|c| c.id != test_id)
                .map(|c| c.id.clone())
                .collect(),
            test: vec![test_id],
        },
        bounds: Some(Bounds { min: lo, max: hi }),
        background: [0.0; 3],
    };
    Ok(SyntheticScene {
        preset,
        seed,
        manifest,
        cameras,
        ground_truth: gt,
        images,
        masks,
        correspondences: CorrespondenceSet { tracks },
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.ckpt";

impl SyntheticScene {
    /// Writes `scene.json`, images, masks, correspondences and the
    /// ground-truth checkpoint into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(dir.join(sub))
                .map_err(|e| Error::io(dir.join(sub).display().to_string(), e))?;
        }
        self.manifest
            .frames
            .par_iter()
            .zip(self.images.par_iter().zip(self.masks.par_iter()))
            .map(|(f, (img, mask))| {
                save_png(&dir.join(&f.image), img)?;
                if let Some(m) = &f.mask {
                    save_mask(&dir.join(m), img.width, img.height, mask)?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
        let corr_path = dir.join("correspondences.txt");
        std::fs::write(&corr_path, self.correspondences.to_text())
            .map_err(|e| Error::io(corr_path.display().to_string(), e))?;
        let manifest_path = dir.join("scene.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&manifest_path, json + "\n")
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let ckpt = Checkpoint {
            set: self.ground_truth.clone(),
            iteration: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(self.seed)),
            scene: Some("scene.json".into()),
            config: format!(
                "{{\"synthetic\":{{\"preset\":\"{}\",\"seed\":{}}}}}",
                self.preset.name(),
                self.seed
            ),
        };
        ckpt.save(&dir.join(GROUND_TRUTH_FILE))?;
        Ok(manifest_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = generate_synthetic_scene(Preset::MovingBlobs, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            set: s.ground_truth.clone(),
            iteration: 42,
            rng: RngState::capture(&rng),
            scene: Some("a b/scene.json".into()),
            config: "{\"x\":1}".into(),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("t")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut r2 = back.rng.restore();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn checkpoint_size_follows_layout() {
        let set = GaussianSet::zeros(1000, 2).unwrap();
        let ck = Checkpoint {
            set,
            iteration: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            scene: None,
            config: "{}".into(),
        };
        let bytes = ck.to_bytes().unwrap();
        let blob = 1000 * (3 + 1 + 1 + 3 + 3 + 4 + 1 + 3 * 9) * 4;
        let header = find_header_end(&bytes).unwrap();
        assert_eq!(bytes.len(), header + blob);
        assert!(header < 1024);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let set = GaussianSet::zeros(4, 1).unwrap();
        let ck = Checkpoint {
            set,
            iteration: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            scene: None,
            config: "{}".into(),
        };
        let bytes = ck.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let shape = text.replacen("field velocity 4x3", "field velocity 4x2", 1);
        let err = Checkpoint::from_bytes(shape.as_bytes(), Path::new("c"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("velocity"), "{err}");
        let version = [b"FTGS-CHECKPOINT 9".as_slice(), &bytes[17..]].concat();
        assert!(Checkpoint::from_bytes(&version, Path::new("c"))
            .unwrap_err()
            .to_string()
            .contains("version"));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(truncated, Path::new("c")).is_err());
    }

    #[test]
    fn static_preset_has_no_motion() {
        let s = generate_synthetic_scene(Preset::StaticBlobs, 1).unwrap();
        assert!(s.ground_truth.velocity.iter().all(|&v| v == 0.0));
        assert_eq!(s.images.len(), 6 * 12);
    }

    #[test]
    fn moving_blobs_travel_more_than_two_radii() {
        let s = generate_synthetic_scene(Preset::MovingBlobs, 1).unwrap();
        for i in 0..s.ground_truth.count() {
            let speed = Vector3::from_fn(|a, _| s.ground_truth.velocity[3 * i + a]).norm();
            assert!(speed > 2.0 * s.ground_truth.scale(i).max());
        }
    }

    #[test]
    fn crossing_blobs_meet_mid_sequence() {
        let s = generate_synthetic_scene(Preset::CrossingBlobs, 2).unwrap();
        let gt = &s.ground_truth;
        let a = motion_position(&gt.activate(0).unwrap(), 0.5);
        let b = motion_position(&gt.activate(1).unwrap(), 0.5);
        assert!((a - b).norm() <= gt.scale(0).max().max(gt.scale(1).max()));
        let a0 = motion_position(&gt.activate(0).unwrap(), 0.0);
        let b0 = motion_position(&gt.activate(1).unwrap(), 0.0);
        assert!((a0 - b0).norm() > 0.25);
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let a = generate_synthetic_scene(Preset::CrossingBlobs, 9).unwrap();
        let b = generate_synthetic_scene(Preset::CrossingBlobs, 9).unwrap();
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.images, b.images);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.correspondences, b.correspondences);
    }
}
