//! Plain-text `key = value` run configuration with `[section]` headers.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::affine::AugmentationSpec;
use crate::error::{Error, Result};
use crate::nets::{SegNetConfig, ShapeNetConfig};
use crate::synth::{Appearance, DatasetSpec, ShapeFamily};
use crate::train::{AdamConfig, SegTrainConfig, ShapeTrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub subjects: usize,
    pub dims: usize,
    pub split: f64,
    pub family: ShapeFamily,
    pub appearance: Appearance,
    /// Dataset directory; `<out>/data` when unset.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrainSection {
    pub iterations: usize,
    pub lr: f64,
    pub monitor_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainSection {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub alpha: f64,
    pub cap: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub n_pairs: usize,
    /// Directory of precomputed soft predictions, if evaluating files instead of a model.
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub shape_net: ShapeNetConfig,
    pub seg_net: SegNetConfig,
    pub train_shape: ShapeTrainSection,
    pub train_seg: SegTrainSection,
    pub augment: AugmentationSpec,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataSection {
                subjects: 10,
                dims: 48,
                split: 0.8,
                family: ShapeFamily::EllipsoidWithTail,
                appearance: Appearance::default(),
                dir: None,
            },
            shape_net: ShapeNetConfig::default(),
            seg_net: SegNetConfig::default(),
            train_shape: ShapeTrainSection {
                iterations: 200,
                lr: 1e-4,
                monitor_every: 10,
            },
            train_seg: SegTrainSection {
                phase1_iters: 800,
                phase2_iters: 400,
                alpha: 0.1,
                cap: 1.0,
                lr: 1e-4,
            },
            augment: AugmentationSpec::default(),
            eval: EvalSection {
                n_pairs: 50,
                predictions: None,
            },
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::default();
        cfg.apply(&text, base)?;
        Ok(cfg)
    }

    /// Applies `text` on top of the current values. Relative paths are joined to `base`.
    pub fn apply(&mut self, text: &str, base: &Path) -> Result<()> {
        let mut section = String::new();
        let mut scale = self.augment.scale_range();
        let mut rotation = self.augment.max_rotation_deg();
        let mut translation = self.augment.max_translation_frac();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                const SECTIONS: [&str; 7] = ["data", "shape_net", "seg_net", "train_shape", "train_seg", "augment", "eval"];
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {line}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config(format!("line {line}: expected key = value, got {content:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let path = || base.join(value);
            match (section.as_str(), key) {
                ("data", "seed") => self.seed = parse(line, key, value)?,
                ("data", "subjects") => self.data.subjects = parse(line, key, value)?,
                ("data", "dims") => self.data.dims = parse(line, key, value)?,
                ("data", "split") => self.data.split = parse(line, key, value)?,
                ("data", "family") => self.data.family = parse(line, key, value)?,
                ("data", "contrast") => self.data.appearance.contrast = parse(line, key, value)?,
                ("data", "noise_sigma") => self.data.appearance.noise_sigma = parse(line, key, value)?,
                ("data", "background") => self.data.appearance.background = parse(line, key, value)?,
                ("data", "dir") => self.data.dir = Some(path()),
                ("shape_net", "levels") => self.shape_net.levels = parse(line, key, value)?,
                ("shape_net", "base_channels") => self.shape_net.base_channels = parse(line, key, value)?,
                ("seg_net", "depth") => self.seg_net.depth = parse(line, key, value)?,
                ("seg_net", "base_channels") => self.seg_net.base_channels = parse(line, key, value)?,
                ("train_shape", "iterations") => self.train_shape.iterations = parse(line, key, value)?,
                ("train_shape", "lr") => self.train_shape.lr = parse(line, key, value)?,
                ("train_shape", "monitor_every") => self.train_shape.monitor_every = parse(line, key, value)?,
                ("train_seg", "phase1_iters") => self.train_seg.phase1_iters = parse(line, key, value)?,
                ("train_seg", "phase2_iters") => self.train_seg.phase2_iters = parse(line, key, value)?,
                ("train_seg", "alpha") => self.train_seg.alpha = parse(line, key, value)?,
                ("train_seg", "cap") => self.train_seg.cap = parse(line, key, value)?,
                ("train_seg", "lr") => self.train_seg.lr = parse(line, key, value)?,
                ("augment", "max_rotation_deg") => rotation = parse(line, key, value)?,
                ("augment", "scale_lo") => scale.0 = parse(line, key, value)?,
                ("augment", "scale_hi") => scale.1 = parse(line, key, value)?,
                ("augment", "max_translation_frac") => translation = parse(line, key, value)?,
                ("eval", "n_pairs") => self.eval.n_pairs = parse(line, key, value)?,
                ("eval", "predictions") => self.eval.predictions = Some(path()),
                ("", _) => return Err(Error::Config(format!("line {line}: {key} outside any section"))),
                (s, _) => return Err(Error::Config(format!("line {line}: unknown key {key} in [{s}]"))),
            }
        }
        self.augment = AugmentationSpec::new(rotation, scale, translation, 0).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.data.subjects < 4 {
            return bad(format!("data.subjects {} < 4", self.data.subjects));
        }
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return bad(format!("data.split {} outside (0, 1)", self.data.split));
        }
        let dims = [self.data.dims; 3];
        if let Err(e) = self.shape_net.signature_dims(dims) {
            return bad(e.to_string());
        }
        if self.data.dims % (1 << self.seg_net.depth) != 0 {
            return bad(format!("data.dims {} not divisible by 2^{}", self.data.dims, self.seg_net.depth));
        }
        if !(self.train_seg.alpha >= 0.0) || !(self.train_seg.cap > 0.0) {
            return bad("train_seg.alpha must be >= 0 and cap > 0".into());
        }
        if !(self.train_shape.lr > 0.0) || !(self.train_seg.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.eval.n_pairs == 0 {
            return bad("eval.n_pairs must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.data.dims; 3]
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            family: self.data.family,
            appearance: self.data.appearance,
            ..DatasetSpec::new(self.data.subjects, self.dims(), self.seed, self.data.split)
        }
    }

    pub fn shape_train(&self) -> ShapeTrainConfig {
        ShapeTrainConfig {
            iterations: self.train_shape.iterations,
            augmentation: self.augment,
            adam: AdamConfig::with_lr(self.train_shape.lr),
            seed: derive_seed(self.seed, Purpose::TrainShape),
            monitor_every: self.train_shape.monitor_every,
        }
    }

    pub fn seg_train(&self) -> SegTrainConfig {
        SegTrainConfig {
            phase1_iters: self.train_seg.phase1_iters,
            phase2_iters: self.train_seg.phase2_iters,
            alpha: self.train_seg.alpha,
            cap: self.train_seg.cap,
            adam: AdamConfig::with_lr(self.train_seg.lr),
            augmentation: self.augment,
            seed: derive_seed(self.seed, Purpose::TrainSeg),
        }
    }

    /// Augmentation stream used by the affine-invariance evaluation.
    pub fn eval_augment(&self) -> AugmentationSpec {
        self.augment.with_seed(derive_seed(self.seed, Purpose::EvalShape))
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Purpose {
    ShapeInit,
    SegInit,
    TrainShape,
    TrainSeg,
    EvalShape,
}

pub fn derive_seed(seed: u64, purpose: Purpose) -> u64 {
    let tag = purpose as u64 + 1;
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
