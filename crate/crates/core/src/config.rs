//! Engine configuration.
//!
//! One TOML document with a table per component. Every key is optional;
//! missing keys keep their built-in default, unknown keys are rejected.
//! Values are resolved as built-in defaults, then the config file, then
//! `section.key=value` overrides from the command line.
//!
//! ```toml
//! seed = 7
//! sh_degree = 0
//!
//! [train]
//! iterations = 3000
//!
//! [velocity]
//! lambda0 = 0.0
//! lambda1 = 0.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initfit::InitConfig;
use crate::objective::LossWeights;
use crate::optimizer::{LearningRates, VelocitySchedule};
use crate::primitives::MAX_SH_DEGREE;
use crate::rasterizer::RasterConfig;
use crate::relocation::RelocationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total iterations; 0 means `iterations_per_frame × frame_count`.
    pub iterations: u64,
    pub iterations_per_frame: u64,
    /// Progress line every this many iterations (0 disables).
    pub log_every: u64,
    /// Intermediate checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 0,
            iterations_per_frame: 100,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self, frame_count: usize) -> u64 {
        if self.iterations > 0 {
            self.iterations
        } else {
            self.iterations_per_frame * frame_count as u64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    /// Bit-reproducible gradient merging.
    pub deterministic: bool,
    pub sh_degree: usize,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub velocity: VelocitySchedule,
    pub relocation: RelocationConfig,
    pub raster: RasterConfig,
    pub init: InitConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            deterministic: true,
            sh_degree: 3,
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            velocity: VelocitySchedule::default(),
            relocation: RelocationConfig::default(),
            raster: RasterConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "sh_degree must be at most {MAX_SH_DEGREE}"
            )));
        }
        if self.train.iterations == 0 && self.train.iterations_per_frame == 0 {
            return Err(Error::Config(
                "train.iterations and train.iterations_per_frame are both 0".into(),
            ));
        }
        self.loss.validate()?;
        self.lr.validate()?;
        self.velocity.validate()?;
        self.relocation.validate()?;
        self.raster.validate()?;
        self.init.validate()
    }

    /// Rasterizer settings with the global determinism flag applied.
    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            deterministic: self.deterministic,
            ..self.raster.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                text.parse::<toml::Table>().map_err(|e| {
                    Error::Config(format!("{}: {}", path.display(), e.to_string().trim()))
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// This configuration with `key=value` overrides applied on top.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: EngineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EngineConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("stored configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyOrigin {
    /// Value taken from the published method description.
    Published,
    /// Reference settings of the underlying static splatting method.
    Reference,
    Engine,
}

impl KeyOrigin {
    pub fn label(self) -> &'static str {
        match self {
            KeyOrigin::Published => "published setting",
            KeyOrigin::Reference => "static-splatting reference setting",
            KeyOrigin::Engine => "engine default",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyDoc {
    pub key: String,
    pub default: String,
    pub origin: KeyOrigin,
    pub note: &'static str,
}

const NOTES: &[(&str, KeyOrigin, &str)] = &[
    (
        "train.iterations_per_frame",
        KeyOrigin::Published,
        "30k iterations for 300 frames",
    ),
    ("loss.lambda_img", KeyOrigin::Published, ""),
    ("loss.lambda_ssim", KeyOrigin::Published, ""),
    (
        "loss.lambda_perc",
        KeyOrigin::Published,
        "published 0.01; perceptual term unavailable, must be 0",
    ),
    ("loss.lambda_reg", KeyOrigin::Published, ""),
    ("relocation.lambda_g", KeyOrigin::Published, ""),
    ("relocation.lambda_o", KeyOrigin::Published, ""),
    (
        "relocation.period",
        KeyOrigin::Published,
        "relocation every N iterations",
    ),
    (
        "velocity.form",
        KeyOrigin::Engine,
        "geometric interpolation; `sum` keeps the literal additive form",
    ),
    ("lr.position", KeyOrigin::Reference, "times scene extent"),
    (
        "lr.position_final",
        KeyOrigin::Reference,
        "times scene extent",
    ),
    ("lr.scale", KeyOrigin::Reference, ""),
    ("lr.rotation", KeyOrigin::Reference, ""),
    ("lr.opacity", KeyOrigin::Reference, ""),
    ("lr.sh_dc", KeyOrigin::Reference, ""),
    ("lr.sh_rest", KeyOrigin::Reference, "sh_dc / 20"),
    ("sh_degree", KeyOrigin::Reference, ""),
    (
        "train.iterations",
        KeyOrigin::Engine,
        "0 = iterations_per_frame x frame_count",
    ),
];

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every configuration key with its default value and origin.
pub fn key_reference() -> Vec<KeyDoc> {
    let v = toml::Value::try_from(EngineConfig::default()).expect("defaults serialize");
    let mut flat = Vec::new();
    flatten("", &v, &mut flat);
    flat.into_iter()
        .map(|(key, default)| {
            let (origin, note) = NOTES
                .iter()
                .find(|(k, _, _)| *k == key)
                .map_or((KeyOrigin::Engine, ""), |(_, o, n)| (*o, *n));
            KeyDoc {
                key,
                default,
                origin,
                note,
            }
        })
        .collect()
}

/// Human-readable key listing for `--help`.
pub fn key_reference_text() -> String {
    let docs = key_reference();
    let width = docs
        .iter()
        .map(|d| d.key.len() + d.default.len() + 3)
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    for d in docs {
        let kv = format!("{} = {}", d.key, d.default);
        s.push_str(&format!("  {kv:<width$}  [{}]", d.origin.label()));
        if !d.note.is_empty() {
            s.push_str(&format!(" {}", d.note));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::ScheduleForm;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            EngineConfig::from_toml("").unwrap(),
            EngineConfig::default()
        );
    }

    #[test]
    fn published_defaults() {
        let c = EngineConfig::default();
        assert_eq!(c.train.iterations_per_frame, 100);
        assert_eq!(c.train.total_iterations(300), 30_000);
        assert_eq!(
            (c.loss.lambda_img, c.loss.lambda_ssim, c.loss.lambda_reg),
            (0.8, 0.2, 1e-2)
        );
        assert_eq!(
            (
                c.relocation.lambda_g,
                c.relocation.lambda_o,
                c.relocation.period
            ),
            (0.5, 0.5, 100)
        );
        assert_eq!(c.velocity.form, ScheduleForm::Geometric);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = EngineConfig::from_toml("[loss]\nlambda_foo = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("lambda_foo"), "{e}");
        assert!(EngineConfig::from_toml("bogus = 1\n").is_err());
        assert!(EngineConfig::load(None, &["raster.tile = 8".into()]).is_err());
    }

    #[test]
    fn perceptual_weight_must_be_zero() {
        let e = EngineConfig::from_toml("[loss]\nlambda_perc = 0.01\n").unwrap_err();
        assert!(e.to_string().contains("lambda_perc"));
    }

    #[test]
    fn precedence_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 5\n[train]\niterations = 40\nlog_every = 7\n").unwrap();
        let c = EngineConfig::load(
            Some(&path),
            &["train.iterations=90".into(), "velocity.form=sum".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.iterations, 90);
        assert_eq!(c.train.log_every, 7);
        assert_eq!(c.train.iterations_per_frame, 100);
        assert_eq!(c.velocity.form, ScheduleForm::Sum);
    }

    #[test]
    fn override_types_are_checked() {
        assert!(EngineConfig::load(None, &["train.iterations=abc".into()]).is_err());
        assert!(EngineConfig::load(None, &["seed.x=1".into()]).is_err());
        assert!(EngineConfig::load(None, &["noequals".into()]).is_err());
        let c = EngineConfig::load(
            None,
            &["deterministic=false".into(), "loss.lambda_reg=0".into()],
        )
        .unwrap();
        assert!(!c.deterministic && !c.raster_config().deterministic);
        assert_eq!(c.loss.lambda_reg, 0.0);
    }

    #[test]
    fn toml_and_json_round_trip() {
        let mut c = EngineConfig::default();
        c.seed = 11;
        c.velocity.lambda0 = 0.0;
        c.raster.tile_size = 8;
        assert_eq!(EngineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(EngineConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn key_reference_covers_every_key() {
        let docs = key_reference();
        for k in [
            "seed",
            "sh_degree",
            "train.iterations",
            "loss.lambda_reg",
            "raster.tile_size",
            "init.mode",
            "lr.velocity",
        ] {
            assert!(docs.iter().any(|d| d.key == k), "missing {k}");
        }
        let period = docs.iter().find(|d| d.key == "relocation.period").unwrap();
        assert_eq!(period.default, "100");
        assert_eq!(period.origin, KeyOrigin::Published);
        assert!(!docs.iter().any(|d| d.key == "raster.deterministic"));
    }
}
