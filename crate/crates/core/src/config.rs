//! Run configuration: flat `key=value` lines with `#` comments. Keys match
//! the long command-line flags without the leading dashes.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::bde::{BdeConfig, MutationFactor};
use crate::data::{load_idx, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::nn::optim::StepDecay;
use crate::nn::{presets, LayerSpec};
use crate::trainer::TrainConfig;

pub const VAL_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synth,
    Idx { images: PathBuf, labels: PathBuf },
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(Self::Synth);
        }
        let paths = s.strip_prefix("idx:").ok_or_else(|| Error::Config(format!("unknown dataset {s:?}")))?;
        match paths.split_once(',') {
            Some((images, labels)) if !images.is_empty() && !labels.is_empty() => {
                Ok(Self::Idx { images: images.into(), labels: labels.into() })
            }
            _ => Err(Error::Config(format!("expected idx:<images>,<labels>, got {s:?}"))),
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synth => f.write_str("synth"),
            Self::Idx { images, labels } => write!(f, "idx:{},{}", images.display(), labels.display()),
        }
    }
}

fn parse_mutation(s: &str) -> Result<MutationFactor> {
    if s == "random" {
        return Ok(MutationFactor::Random);
    }
    let value = s
        .strip_prefix("fixed:")
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Error::Config(format!("expected random or fixed:<f>, got {s:?}")))?;
    Ok(MutationFactor::Fixed(value))
}

fn mutation_text(m: MutationFactor) -> String {
    match m {
        MutationFactor::Random => "random".into(),
        MutationFactor::Fixed(f) => format!("fixed:{f}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub net: String,
    pub pop_size: usize,
    pub init_p: f64,
    pub cr: f64,
    pub mutation: MutationFactor,
    /// Defaults to half the epoch budget.
    pub stagnation_epochs: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub topk: Vec<usize>,
    pub threads: usize,
    pub active_units: Option<usize>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_size: usize,
    /// Keep only the first `limit` samples of an IDX dataset (0 keeps all).
    pub limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synth,
            net: "smallcnn".into(),
            pop_size: 8,
            init_p: 0.5,
            cr: 0.1,
            mutation: MutationFactor::Random,
            stagnation_epochs: None,
            epochs: 60,
            batch_size: 32,
            lr: 0.3,
            lr_step: 50,
            weight_decay: 1e-6,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            topk: vec![1, 3, 5],
            threads: 0,
            active_units: None,
            synth_classes: 10,
            synth_per_class: 200,
            synth_size: 12,
            limit: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "net",
        "pop-size",
        "init-p",
        "cr",
        "mutation",
        "stagnation-epochs",
        "epochs",
        "batch-size",
        "lr",
        "lr-step",
        "weight-decay",
        "seed",
        "out",
        "topk",
        "threads",
        "active-units",
        "synth-classes",
        "synth-per-class",
        "synth-size",
        "limit",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = value.parse()?,
            "net" => {
                if presets::by_name(value, 2).is_none() {
                    return Err(Error::Config(format!("unknown net {value:?}, expected toy10, mlp or smallcnn")));
                }
                self.net = value.into();
            }
            "pop-size" => self.pop_size = num(key, value)?,
            "init-p" => self.init_p = num(key, value)?,
            "cr" => self.cr = num(key, value)?,
            "mutation" => self.mutation = parse_mutation(value)?,
            "stagnation-epochs" => self.stagnation_epochs = Some(num(key, value)?),
            "epochs" => self.epochs = num(key, value)?,
            "batch-size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr-step" => self.lr_step = num(key, value)?,
            "weight-decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = value.into(),
            "topk" => {
                self.topk = value.split(',').map(|k| num(key, k.trim())).collect::<Result<_>>()?;
            }
            "threads" => self.threads = num(key, value)?,
            "active-units" => self.active_units = if value == "none" { None } else { Some(num(key, value)?) },
            "synth-classes" => self.synth_classes = num(key, value)?,
            "synth-per-class" => self.synth_per_class = num(key, value)?,
            "synth-size" => self.synth_size = num(key, value)?,
            "limit" => self.limit = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn resolved_stagnation(&self) -> usize {
        self.stagnation_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: StepDecay { base: self.lr, step: self.lr_step, gamma: 0.1 },
            weight_decay: self.weight_decay,
            bde: BdeConfig {
                pop_size: self.pop_size,
                mutation: self.mutation,
                crossover_rate: self.cr,
                init_p: self.init_p,
                active_units: self.active_units,
            },
            stagnation_epochs: self.resolved_stagnation(),
            seed: self.seed,
            topk: self.topk.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the dataset and splits it with a seed derived from the run seed.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut data = match &self.dataset {
            DatasetSource::Synth => {
                synth_dataset(self.synth_classes, self.synth_per_class, self.synth_size, self.seed)?
            }
            DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        if self.limit > 0 {
            data.truncate(self.limit);
        }
        data.split(VAL_FRACTION, TEST_FRACTION, split_seed(self.seed))?;
        Ok(data)
    }

    pub fn layer_specs(&self, num_classes: usize) -> Result<Vec<LayerSpec>> {
        presets::by_name(&self.net, num_classes).ok_or_else(|| Error::Config(format!("unknown net {:?}", self.net)))
    }
}

/// Seed for the dataset split, decorrelated from the training stream.
pub fn split_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_5B11_7000_0001
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let topk: Vec<String> = self.topk.iter().map(ToString::to_string).collect();
        writeln!(f, "dataset={}", self.dataset)?;
        writeln!(f, "net={}", self.net)?;
        writeln!(f, "pop-size={}", self.pop_size)?;
        writeln!(f, "init-p={}", self.init_p)?;
        writeln!(f, "cr={}", self.cr)?;
        writeln!(f, "mutation={}", mutation_text(self.mutation))?;
        writeln!(f, "stagnation-epochs={}", self.resolved_stagnation())?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch-size={}", self.batch_size)?;
        writeln!(f, "lr={}", self.lr)?;
        writeln!(f, "lr-step={}", self.lr_step)?;
        writeln!(f, "weight-decay={}", self.weight_decay)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "out={}", self.out.display())?;
        writeln!(f, "topk={}", topk.join(","))?;
        writeln!(f, "threads={}", self.threads)?;
        match self.active_units {
            Some(k) => writeln!(f, "active-units={k}")?,
            None => writeln!(f, "active-units=none")?,
        }
        writeln!(f, "synth-classes={}", self.synth_classes)?;
        writeln!(f, "synth-per-class={}", self.synth_per_class)?;
        writeln!(f, "synth-size={}", self.synth_size)?;
        writeln!(f, "limit={}", self.limit)
    }
}
