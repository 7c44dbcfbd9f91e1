//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BackboneSpec;
use crate::structure::StructureParams;

/// Which relational losses are enabled next to the always-on base loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationMode {
    pub ir: bool,
    pub ik: bool,
    pub kr: bool,
}

impl AblationMode {
    pub const BASELINE: Self = Self {
        ir: false,
        ik: false,
        kr: false,
    };
    pub const FULL: Self = Self {
        ir: true,
        ik: true,
        kr: true,
    };

    /// `[base, ir, ik, kr]` enable flags.
    pub fn enabled(&self) -> [bool; 4] {
        [true, self.ir, self.ik, self.kr]
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.ir, "IR"), (self.ik, "IK"), (self.kr, "KR")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("baseline") {
            return Ok(Self::BASELINE);
        }
        let mut mode = Self::BASELINE;
        for part in s.split('+') {
            let flag = match part.trim().to_ascii_uppercase().as_str() {
                "IR" => &mut mode.ir,
                "IK" => &mut mode.ik,
                "KR" => &mut mode.kr,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation component {other:?} in {s:?}"
                    )))
                }
            };
            if *flag {
                return Err(Error::Config(format!(
                    "ablation component repeated in {s:?}"
                )));
            }
            *flag = true;
        }
        Ok(mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    Tiny,
    ResNet50,
}

impl BackboneKind {
    pub fn spec(self) -> BackboneSpec {
        match self {
            Self::Tiny => BackboneSpec::tiny(),
            Self::ResNet50 => BackboneSpec::resnet50(),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::ResNet50 => "resnet50",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "resnet50" | "resnet-50" => Ok(Self::ResNet50),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr0: f64,
    /// The learning rate is divided by `lr_decay_factor` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// `w1..w4` for base, IR, IK and KR.
    pub loss_weights: [f64; 4],
    pub beta_b: f64,
    pub ablation: AblationMode,

    pub backbone: BackboneKind,
    pub input_size: usize,
    pub head_hidden: usize,
    pub head_out_bias: f64,
    /// Optional checkpoint whose parameters seed the backbone.
    pub pretrained: Option<PathBuf>,

    pub patches: usize,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    pub kr_blocks: usize,
    pub patch_cache: Option<PathBuf>,

    /// Number of trailing samples held out for evaluation.
    pub holdout: usize,
    /// `folds > 1` selects k-fold splitting, using fold index `fold`.
    pub folds: usize,
    pub fold: usize,
    pub threshold: f64,
    /// Test-time feature up-sampling factor before the head.
    pub upsample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 9,
            lr0: 1e-3,
            lr_decay_every: 4,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            batch_size: 2,
            loss_weights: [0.25; 4],
            beta_b: 4.0,
            ablation: AblationMode::FULL,
            backbone: BackboneKind::Tiny,
            input_size: 64,
            head_hidden: 32,
            head_out_bias: 0.0,
            pretrained: None,
            patches: 16,
            slic_compactness: 10.0,
            slic_iterations: 10,
            kr_blocks: 16,
            patch_cache: None,
            holdout: 50,
            folds: 0,
            fold: 0,
            threshold: 0.5,
            upsample: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Full-scale settings: ResNet-50 on 512×512 inputs.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneKind::ResNet50,
            input_size: 512,
            head_hidden: 512,
            holdout: 0,
            ..Self::default()
        }
    }

    pub fn structure_params(&self) -> StructureParams {
        StructureParams {
            patches: self.patches,
            compactness: self.slic_compactness,
            iterations: self.slic_iterations,
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "w1" => self.loss_weights[0] = parse(key, value)?,
            "w2" => self.loss_weights[1] = parse(key, value)?,
            "w3" => self.loss_weights[2] = parse(key, value)?,
            "w4" => self.loss_weights[3] = parse(key, value)?,
            "beta_b" => self.beta_b = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "backbone" => self.backbone = value.parse()?,
            "input_size" => self.input_size = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "head_out_bias" => self.head_out_bias = parse(key, value)?,
            "pretrained" => self.pretrained = optional_path(value),
            "patches" => self.patches = parse(key, value)?,
            "slic_compactness" => self.slic_compactness = parse(key, value)?,
            "slic_iterations" => self.slic_iterations = parse(key, value)?,
            "kr_blocks" => self.kr_blocks = parse(key, value)?,
            "patch_cache" => self.patch_cache = optional_path(value),
            "holdout" => self.holdout = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "upsample" => self.upsample = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay_factor", self.lr_decay_factor),
            ("grad_clip", self.grad_clip),
            ("beta_b", self.beta_b),
            ("slic_compactness", self.slic_compactness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("epochs", self.epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("batch_size", self.batch_size),
            ("input_size", self.input_size),
            ("head_hidden", self.head_hidden),
            ("patches", self.patches),
            ("slic_iterations", self.slic_iterations),
            ("kr_blocks", self.kr_blocks),
            ("upsample", self.upsample),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        if self
            .loss_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.folds > 1 && self.fold >= self.folds {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.fold, self.folds
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let [w1, w2, w3, w4] = self.loss_weights;
        let lines = [
            format!("seed = {}", self.seed),
            format!("epochs = {}", self.epochs),
            format!("lr0 = {:?}", self.lr0),
            format!("lr_decay_every = {}", self.lr_decay_every),
            format!("lr_decay_factor = {:?}", self.lr_decay_factor),
            format!("momentum = {:?}", self.momentum),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("grad_clip = {:?}", self.grad_clip),
            format!("batch_size = {}", self.batch_size),
            format!("w1 = {w1:?}"),
            format!("w2 = {w2:?}"),
            format!("w3 = {w3:?}"),
            format!("w4 = {w4:?}"),
            format!("beta_b = {:?}", self.beta_b),
            format!("ablation = {}", self.ablation),
            format!("backbone = {}", self.backbone),
            format!("input_size = {}", self.input_size),
            format!("head_hidden = {}", self.head_hidden),
            format!("head_out_bias = {:?}", self.head_out_bias),
            format!("pretrained = {}", path(&self.pretrained)),
            format!("patches = {}", self.patches),
            format!("slic_compactness = {:?}", self.slic_compactness),
            format!("slic_iterations = {}", self.slic_iterations),
            format!("kr_blocks = {}", self.kr_blocks),
            format!("patch_cache = {}", path(&self.patch_cache)),
            format!("holdout = {}", self.holdout),
            format!("folds = {}", self.folds),
            format!("fold = {}", self.fold),
            format!("threshold = {:?}", self.threshold),
            format!("upsample = {}", self.upsample),
        ];
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Loss weights after the disabled ones are shared equally among the
    /// enabled ones.
    pub fn effective_weights(&self) -> [f64; 4] {
        effective_weights(self.loss_weights, self.ablation)
    }
}

pub fn effective_weights(weights: [f64; 4], mode: AblationMode) -> [f64; 4] {
    let enabled = mode.enabled();
    let spare: f64 = weights
        .iter()
        .zip(enabled)
        .filter(|(_, on)| !on)
        .map(|(w, _)| w)
        .sum();
    let k = enabled.iter().filter(|&&on| on).count() as f64;
    let mut out = [0.0; 4];
    for i in 0..4 {
        if enabled[i] {
            out[i] = weights[i] + spare / k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_round_trip() {
        for s in ["baseline", "IR", "IK", "KR", "IR+IK", "IR+IK+KR", "IK+KR"] {
            let m: AblationMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!(
            "ir+ik+kr".parse::<AblationMode>().unwrap(),
            AblationMode::FULL
        );
        assert!("IR+XX".parse::<AblationMode>().is_err());
        assert!("IR+IR".parse::<AblationMode>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            seed: 11,
            lr0: 0.1 + 0.2,
            ablation: AblationMode::BASELINE,
            patch_cache: Some(PathBuf::from("/tmp/cache")),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            TrainConfig::parse(&TrainConfig::full_scale().to_text()).unwrap(),
            TrainConfig::full_scale()
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("epochs = -1").is_err());
        assert!(TrainConfig::parse("lr0 = 0").is_err());
        let cfg = TrainConfig::parse("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn weight_redistribution() {
        let w = [0.25; 4];
        assert_eq!(effective_weights(w, AblationMode::FULL), [0.25; 4]);
        assert_eq!(
            effective_weights(w, AblationMode::BASELINE),
            [1.0, 0.0, 0.0, 0.0]
        );
        let ir_ik = effective_weights(w, "IR+IK".parse().unwrap());
        for (got, want) in ir_ik.iter().zip([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }
}
