//! Experiment configuration: flat `section.key=value` text.
//!
//! Lines are order-insensitive, `#` starts a comment, and unknown keys are
//! errors. [`ExperimentConfig::to_text`] writes every key with its
//! effective value; parsing that text reproduces the configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    load_cifar_binary, synth_dataset, AugmentConfig, CifarVariant, LabeledImageSet, SynthKind,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, BlockKind, Family, Insertion};
use crate::regularizers::{Coefficient, CoefficientSpec, Granularity, RegularizerKind};
use crate::train::{LRSchedule, OptimizerConfig, TrainConfig};

/// Where the train and eval splits come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// One generated set split into `train_samples` then `eval_samples`.
    Synthetic {
        kind: SynthKind,
        train_samples: usize,
        eval_samples: usize,
        classes: usize,
        noise: f64,
        image_shape: [usize; 3],
        seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        train_path: PathBuf,
        eval_path: PathBuf,
    },
}

impl DataSource {
    pub fn classes(&self) -> usize {
        match self {
            DataSource::Synthetic { classes, .. } => *classes,
            DataSource::Cifar { variant, .. } => variant.classes(),
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DataSource::Synthetic { image_shape, .. } => *image_shape,
            DataSource::Cifar { .. } => [3, 32, 32],
        }
    }

    /// Loads `(train, eval)`.
    pub fn load(&self) -> Result<(LabeledImageSet, LabeledImageSet)> {
        match self {
            DataSource::Synthetic {
                kind,
                train_samples,
                eval_samples,
                classes,
                noise,
                image_shape,
                seed,
            } => {
                let all = synth_dataset(
                    &SynthSpec {
                        kind: *kind,
                        samples: train_samples + eval_samples,
                        classes: *classes,
                        noise: *noise,
                        image_shape: *image_shape,
                    },
                    *seed,
                )?;
                let per: usize = image_shape.iter().product();
                let split = |range: std::ops::Range<usize>| {
                    LabeledImageSet::new(
                        all.pixels()[range.start * per..range.end * per].to_vec(),
                        all.labels()[range].to_vec(),
                        *image_shape,
                        *classes,
                    )
                };
                Ok((
                    split(0..*train_samples)?,
                    split(*train_samples..train_samples + eval_samples)?,
                ))
            }
            DataSource::Cifar {
                variant,
                train_path,
                eval_path,
            } => Ok((
                load_cifar_binary(train_path, *variant)?,
                load_cifar_binary(eval_path, *variant)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub p_last: Vec<f64>,
    pub depths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationConfig {
    pub draws: usize,
    /// Block index `l` in `1..=L`; `None` selects the last block.
    pub block: Option<usize>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub eps: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `num_classes` and `input_shape` follow the data source.
    pub arch: ArchitectureSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: LRSchedule,
    pub augment: AugmentConfig,
    pub data: DataSource,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub record_wall_time: bool,
    pub sweep: SweepGrid,
    pub expectation: ExpectationConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataSource::Synthetic {
            kind: SynthKind::StripedImages,
            train_samples: 2000,
            eval_samples: 500,
            classes: 4,
            noise: 0.5,
            image_shape: [3, 8, 8],
            seed: 0,
        };
        let [c, h, w] = data.image_shape();
        Self {
            arch: ArchitectureSpec {
                num_classes: data.classes(),
                input_shape: (c, h, w),
                ..ArchitectureSpec::default()
            },
            optimizer: OptimizerConfig::default(),
            schedule: LRSchedule::default(),
            augment: AugmentConfig {
                flip: false,
                crop_enabled: false,
                crop: None,
                ..AugmentConfig::default()
            },
            data,
            seed: 0,
            workers: 1,
            out: PathBuf::from("runs/default"),
            record_wall_time: false,
            sweep: SweepGrid {
                p_last: vec![],
                depths: vec![],
            },
            expectation: ExpectationConfig {
                draws: 100_000,
                block: None,
                batch: 2,
            },
            gradcheck: GradcheckConfig {
                tolerance: 1e-4,
                eps: 1e-6,
                batch: 2,
            },
        }
    }
}

/// Keys in the order they are applied; a preset is applied before the
/// explicit coefficients so those can refine it.
pub const KEYS: &[&str] = &[
    "arch.family",
    "arch.depth",
    "arch.block",
    "arch.widen_factor",
    "arch.pyramid_alpha",
    "arch.cardinality",
    "arch.base_width",
    "arch.stages",
    "arch.erase_relu",
    "arch.bn_end",
    "arch.insertion",
    "arch.bn_eps",
    "arch.bn_momentum",
    "regularizer.preset",
    "regularizer.kind",
    "regularizer.alpha",
    "regularizer.beta",
    "regularizer.pool",
    "regularizer.p_last",
    "regularizer.granularity",
    "optimizer.base_lr",
    "optimizer.momentum",
    "optimizer.nesterov",
    "optimizer.weight_decay",
    "optimizer.batch_size",
    "schedule.milestones",
    "schedule.factor",
    "schedule.total_epochs",
    "data.source",
    "data.kind",
    "data.train_samples",
    "data.eval_samples",
    "data.classes",
    "data.noise",
    "data.image_shape",
    "data.seed",
    "data.train_path",
    "data.eval_path",
    "augment.normalize",
    "augment.flip",
    "augment.flip_probability",
    "augment.crop",
    "augment.pad",
    "augment.crop_size",
    "augment.mixup",
    "run.seed",
    "run.workers",
    "run.out",
    "run.wall_time",
    "sweep.p_last",
    "sweep.depths",
    "expectation.draws",
    "expectation.block",
    "expectation.batch",
    "gradcheck.tolerance",
    "gradcheck.eps",
    "gradcheck.batch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// `alpha:beta` pairs separated by commas, or `off`.
fn parse_pool(key: &str, value: &str) -> Result<Option<Vec<(f64, f64)>>> {
    if value.trim() == "off" {
        return Ok(None);
    }
    value
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: pair {pair:?} must look like alpha:beta")))?;
            Ok((parse(key, a)?, parse(key, b)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn parse_shape(key: &str, value: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = value
        .split('x')
        .map(|d| parse(key, d))
        .collect::<Result<_>>()?;
    <[usize; 3]>::try_from(dims)
        .map_err(|_| Error::Config(format!("{key}: expected CxHxW, got {value:?}")))
}

fn option_text<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults, then applies `overrides`
    /// (`key=value` strings) and validates.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            if entries.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, k.trim())));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} must look like key=value")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_entries(&entries)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = entries.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {unknown}")));
        }
        let mut cfg = Self::default();
        // Fields of the data source are collected first and assembled once.
        let mut data = DataFields::from(&cfg.data);
        for key in KEYS {
            if let Some(value) = entries.get(*key) {
                cfg.apply(key, value, &mut data, entries)?;
            }
        }
        cfg.data = data.build()?;
        let [c, h, w] = cfg.data.image_shape();
        cfg.arch.num_classes = cfg.data.classes();
        cfg.arch.input_shape = (c, h, w);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(
        &mut self,
        key: &str,
        v: &str,
        data: &mut DataFields,
        entries: &BTreeMap<String, String>,
    ) -> Result<()> {
        let arch = &mut self.arch;
        let reg = &mut arch.regularizer;
        match key {
            "arch.family" => arch.family = parse::<Family>(key, v)?,
            "arch.depth" => arch.depth = parse(key, v)?,
            "arch.block" => arch.block = parse::<BlockKind>(key, v)?,
            "arch.widen_factor" => arch.widen_factor = parse(key, v)?,
            "arch.pyramid_alpha" => arch.pyramid_alpha = parse(key, v)?,
            "arch.cardinality" => arch.cardinality = parse(key, v)?,
            "arch.base_width" => arch.base_width = parse(key, v)?,
            "arch.stages" => arch.stages = parse(key, v)?,
            "arch.erase_relu" => arch.erase_relu = parse_bool(key, v)?,
            "arch.bn_end" => arch.bn_end = parse_bool(key, v)?,
            "arch.insertion" => arch.insertion = parse::<Insertion>(key, v)?,
            "arch.bn_eps" => arch.bn_eps = parse(key, v)?,
            "arch.bn_momentum" => arch.bn_momentum = parse(key, v)?,
            "regularizer.preset" => {
                reg.coefficients = CoefficientSpec::preset(v.trim())?;
                if !entries.contains_key("regularizer.kind") {
                    reg.kind = if v.trim() == "shake-shake" {
                        RegularizerKind::ShakeShake
                    } else {
                        RegularizerKind::ShakeDrop
                    };
                }
            }
            "regularizer.kind" => {
                reg.kind = parse::<RegularizerKind>(key, v)?;
                if !entries.contains_key("regularizer.preset") {
                    reg.coefficients = match reg.kind {
                        RegularizerKind::None => CoefficientSpec::fixed(1.0, 1.0),
                        RegularizerKind::RandomDrop => CoefficientSpec::fixed(0.0, 0.0),
                        RegularizerKind::ShakeDrop => CoefficientSpec::shakedrop_bn_end(),
                        RegularizerKind::ShakeShake | RegularizerKind::SingleBranchShake => {
                            CoefficientSpec::shake_shake()
                        }
                    };
                }
            }
            "regularizer.alpha" => reg.coefficients.alpha = parse::<Coefficient>(key, v)?,
            "regularizer.beta" => reg.coefficients.beta = parse::<Coefficient>(key, v)?,
            "regularizer.pool" => reg.coefficients.pool = parse_pool(key, v)?,
            "regularizer.p_last" => reg.p_last = parse(key, v)?,
            "regularizer.granularity" => reg.granularity = parse::<Granularity>(key, v)?,
            "optimizer.base_lr" => self.optimizer.base_lr = parse(key, v)?,
            "optimizer.momentum" => self.optimizer.momentum = parse(key, v)?,
            "optimizer.nesterov" => self.optimizer.nesterov = parse_bool(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "schedule.milestones" => self.schedule.milestones = parse_list(key, v)?,
            "schedule.factor" => self.schedule.factor = parse(key, v)?,
            "schedule.total_epochs" => self.schedule.total_epochs = parse(key, v)?,
            "data.source" => data.source = v.trim().to_string(),
            "data.kind" => data.kind = parse(key, v)?,
            "data.train_samples" => data.train_samples = parse(key, v)?,
            "data.eval_samples" => data.eval_samples = parse(key, v)?,
            "data.classes" => data.classes = parse(key, v)?,
            "data.noise" => data.noise = parse(key, v)?,
            "data.image_shape" => data.image_shape = parse_shape(key, v)?,
            "data.seed" => data.seed = parse(key, v)?,
            "data.train_path" => data.train_path = Some(PathBuf::from(v.trim())),
            "data.eval_path" => data.eval_path = Some(PathBuf::from(v.trim())),
            "augment.normalize" => self.augment.normalize = parse_bool(key, v)?,
            "augment.flip" => self.augment.flip = parse_bool(key, v)?,
            "augment.flip_probability" => self.augment.flip_probability = parse(key, v)?,
            "augment.crop" => self.augment.crop_enabled = parse_bool(key, v)?,
            "augment.pad" => self.augment.pad = parse(key, v)?,
            "augment.crop_size" => {
                self.augment.crop = match v.trim() {
                    "auto" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "augment.mixup" => {
                self.augment.mixup = match v.trim() {
                    "off" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "run.seed" => self.seed = parse(key, v)?,
            "run.workers" => self.workers = parse(key, v)?,
            "run.out" => self.out = PathBuf::from(v.trim()),
            "run.wall_time" => self.record_wall_time = parse_bool(key, v)?,
            "sweep.p_last" => self.sweep.p_last = parse_list(key, v)?,
            "sweep.depths" => self.sweep.depths = parse_list(key, v)?,
            "expectation.draws" => self.expectation.draws = parse(key, v)?,
            "expectation.block" => {
                self.expectation.block = match v.trim() {
                    "last" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "expectation.batch" => self.expectation.batch = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gradcheck.eps" => self.gradcheck.eps = parse(key, v)?,
            "gradcheck.batch" => self.gradcheck.batch = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Checks every component before any data is loaded or computed.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        let [_, h, w] = self.data.image_shape();
        self.augment.validate(h, w)?;
        if let DataSource::Synthetic {
            train_samples,
            eval_samples,
            classes,
            ..
        } = &self.data
        {
            if *train_samples < *classes || *eval_samples == 0 {
                return Err(Error::Config(format!(
                    "synthetic data needs at least {classes} training and one evaluation sample"
                )));
            }
            if self.optimizer.batch_size > *train_samples {
                return Err(Error::Config(format!(
                    "batch_size {} exceeds {train_samples} training samples",
                    self.optimizer.batch_size
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        if let Some(p) = self.sweep.p_last.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("sweep.p_last value {p} outside [0, 1]")));
        }
        if self.expectation.draws < 1000 {
            return Err(Error::Config(format!(
                "expectation.draws must be at least 1000, got {}",
                self.expectation.draws
            )));
        }
        if self.expectation.batch == 0 || self.gradcheck.batch == 0 {
            return Err(Error::Config("expectation.batch and gradcheck.batch must be >= 1".into()));
        }
        if !(self.gradcheck.tolerance > 0.0 && self.gradcheck.eps > 0.0) {
            return Err(Error::Config("gradcheck tolerance and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            augment: self.augment.clone(),
            seed: self.seed,
            replicas: self.workers,
            record_wall_time: self.record_wall_time,
        }
    }

    /// Every key with its effective value, in application order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.arch;
        let r = &a.regularizer;
        let pool = match &r.coefficients.pool {
            None => "off".to_string(),
            Some(p) => p.iter().map(|(x, y)| format!("{x}:{y}")).collect::<Vec<_>>().join(","),
        };
        let data = DataFields::from(&self.data);
        let shape = data.image_shape.map(|d| d.to_string()).join("x");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let mut pairs = vec![
            ("arch.family", a.family.to_string()),
            ("arch.depth", a.depth.to_string()),
            ("arch.block", a.block.to_string()),
            ("arch.widen_factor", a.widen_factor.to_string()),
            ("arch.pyramid_alpha", a.pyramid_alpha.to_string()),
            ("arch.cardinality", a.cardinality.to_string()),
            ("arch.base_width", a.base_width.to_string()),
            ("arch.stages", a.stages.to_string()),
            ("arch.erase_relu", a.erase_relu.to_string()),
            ("arch.bn_end", a.bn_end.to_string()),
            ("arch.insertion", a.insertion.to_string()),
            ("arch.bn_eps", a.bn_eps.to_string()),
            ("arch.bn_momentum", a.bn_momentum.to_string()),
            ("regularizer.kind", r.kind.to_string()),
            ("regularizer.alpha", r.coefficients.alpha.to_string()),
            ("regularizer.beta", r.coefficients.beta.to_string()),
            ("regularizer.pool", pool),
            ("regularizer.p_last", r.p_last.to_string()),
            ("regularizer.granularity", r.granularity.as_str().to_string()),
            ("optimizer.base_lr", self.optimizer.base_lr.to_string()),
            ("optimizer.momentum", self.optimizer.momentum.to_string()),
            ("optimizer.nesterov", self.optimizer.nesterov.to_string()),
            ("optimizer.weight_decay", self.optimizer.weight_decay.to_string()),
            ("optimizer.batch_size", self.optimizer.batch_size.to_string()),
            ("schedule.milestones", join(&self.schedule.milestones)),
            ("schedule.factor", self.schedule.factor.to_string()),
            ("schedule.total_epochs", self.schedule.total_epochs.to_string()),
            ("data.source", data.source.clone()),
            ("data.kind", data.kind.to_string()),
            ("data.train_samples", data.train_samples.to_string()),
            ("data.eval_samples", data.eval_samples.to_string()),
            ("data.classes", data.classes.to_string()),
            ("data.noise", data.noise.to_string()),
            ("data.image_shape", shape),
            ("data.seed", data.seed.to_string()),
            ("data.train_path", path(&data.train_path)),
            ("data.eval_path", path(&data.eval_path)),
            ("augment.normalize", self.augment.normalize.to_string()),
            ("augment.flip", self.augment.flip.to_string()),
            ("augment.flip_probability", self.augment.flip_probability.to_string()),
            ("augment.crop", self.augment.crop_enabled.to_string()),
            ("augment.pad", self.augment.pad.to_string()),
            ("augment.crop_size", option_text(&self.augment.crop, "auto")),
            ("augment.mixup", option_text(&self.augment.mixup, "off")),
            ("run.seed", self.seed.to_string()),
            ("run.workers", self.workers.to_string()),
            ("run.out", self.out.display().to_string()),
            ("run.wall_time", self.record_wall_time.to_string()),
            ("sweep.p_last", join(&self.sweep.p_last)),
            ("sweep.depths", join(&self.sweep.depths)),
            ("expectation.draws", self.expectation.draws.to_string()),
            ("expectation.block", option_text(&self.expectation.block, "last")),
            ("expectation.batch", self.expectation.batch.to_string()),
            ("gradcheck.tolerance", self.gradcheck.tolerance.to_string()),
            ("gradcheck.eps", self.gradcheck.eps.to_string()),
            ("gradcheck.batch", self.gradcheck.batch.to_string()),
        ];
        // Empty paths are not meaningful values; leave them out.
        pairs.retain(|(k, v)| !(k.ends_with("_path") && v.is_empty()));
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Loose data-source fields while parsing.
struct DataFields {
    source: String,
    kind: SynthKind,
    train_samples: usize,
    eval_samples: usize,
    classes: usize,
    noise: f64,
    image_shape: [usize; 3],
    seed: u64,
    train_path: Option<PathBuf>,
    eval_path: Option<PathBuf>,
}

impl DataFields {
    fn from(src: &DataSource) -> Self {
        let mut f = DataFields {
            source: "synthetic".into(),
            kind: SynthKind::StripedImages,
            train_samples: 2000,
            eval_samples: 500,
            classes: 4,
            noise: 0.5,
            image_shape: [3, 8, 8],
            seed: 0,
            train_path: None,
            eval_path: None,
        };
        match src {
            DataSource::Synthetic {
                kind,
                train_samples,
                eval_samples,
                classes,
                noise,
                image_shape,
                seed,
            } => {
                f.kind = *kind;
                f.train_samples = *train_samples;
                f.eval_samples = *eval_samples;
                f.classes = *classes;
                f.noise = *noise;
                f.image_shape = *image_shape;
                f.seed = *seed;
            }
            DataSource::Cifar {
                variant,
                train_path,
                eval_path,
            } => {
                f.source = match variant {
                    CifarVariant::Cifar10 => "cifar10".into(),
                    CifarVariant::Cifar100 => "cifar100".into(),
                };
                f.train_path = Some(train_path.clone());
                f.eval_path = Some(eval_path.clone());
            }
        }
        f
    }

    fn build(self) -> Result<DataSource> {
        let cifar = |variant| {
            let need = |p: Option<PathBuf>, key: &str| {
                p.ok_or_else(|| Error::Config(format!("{key} is required for CIFAR data")))
            };
            Ok(DataSource::Cifar {
                variant,
                train_path: need(self.train_path.clone(), "data.train_path")?,
                eval_path: need(self.eval_path.clone(), "data.eval_path")?,
            })
        };
        match self.source.as_str() {
            "synthetic" => Ok(DataSource::Synthetic {
                kind: self.kind,
                train_samples: self.train_samples,
                eval_samples: self.eval_samples,
                classes: self.classes,
                noise: self.noise,
                image_shape: self.image_shape,
                seed: self.seed,
            }),
            "cifar10" => cifar(CifarVariant::Cifar10),
            "cifar100" => cifar(CifarVariant::Cifar100),
            other => Err(Error::Config(format!(
                "data.source must be synthetic, cifar10 or cifar100, got {other:?}"
            ))),
        }
    }
}
