//! Run configuration: a preset, overlaid by a TOML file, overlaid by
//! command-line flags.
//!
//! ```toml
//! preset = "desk"
//!
//! [model]
//! layers = [784, 500, 500, 500]
//!
//! [train]
//! negatives = "random"
//!
//! [run]
//! mode = "all"
//! nodes = 4
//! ```
//!
//! Every key is optional; missing keys keep the preset's value.
//! [`RunConfig::to_toml`] writes the fully resolved form.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use ffpipe_core::dataset::PartitionScheme;
use ffpipe_core::{ClassifierMode, Mode, NegStrategy, TrainingPlan};
use serde::{Deserialize, Serialize};

use crate::error::{PipeError, Result};
use crate::transport::{TransportKind, DEFAULT_TIMEOUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(PipeError::Config(format!("unknown preset `{other}` (paper or desk)"))),
        }
    }
}

impl Preset {
    pub fn plan(self) -> TrainingPlan {
        match self {
            Preset::Paper => TrainingPlan::paper(),
            Preset::Desk => TrainingPlan::desk(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Gaussian blobs generated from the seed; for tests and benchmarks.
    Blobs,
}

impl FromStr for DatasetKind {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(PipeError::Config(format!("unknown dataset `{other}` (mnist, cifar10 or blobs)"))),
        }
    }
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Blobs => "blobs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = PipeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(PipeError::Config(format!("unknown precision `{other}` (f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    /// Use only the first `n` training instances.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// How federated runs split the training set.
    pub partition: PartitionScheme,
    /// Instance count for generated blob data (train and test each).
    pub blobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub plan: TrainingPlan,
    pub data: DataConfig,
    pub precision: Precision,
    pub transport: TransportKind,
    /// TCP addresses of workers `0..N` followed by the collector. Empty
    /// means pick free loopback ports.
    pub addresses: Vec<SocketAddr>,
    pub out: PathBuf,
    pub timeout: Duration,
    pub batch_delay: Duration,
    /// Write every k-th epoch row to the metrics CSV.
    pub metrics_every: u32,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub adam: AdamSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Option<Vec<usize>>,
    pub classes: Option<usize>,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<u32>,
    pub splits: Option<u32>,
    pub batch_size: Option<usize>,
    pub lr_ff: Option<f64>,
    pub lr_head: Option<f64>,
    pub cooldown_start_epoch: Option<u32>,
    pub seed: Option<u64>,
    pub negatives: Option<String>,
    pub neg_lag: Option<u32>,
    pub classifier: Option<String>,
    pub shuffle: Option<bool>,
    pub precision: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSection {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Option<String>,
    pub nodes: Option<usize>,
    pub transport: Option<String>,
    pub addresses: Option<Vec<String>>,
    pub out: Option<String>,
    pub timeout_s: Option<f64>,
    pub batch_delay_ms: Option<f64>,
    pub metrics_every: Option<u32>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<String>,
    pub dir: Option<String>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub partition: Option<String>,
    pub blobs: Option<usize>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| PipeError::Config(format!("{key}: {e}")))
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipeError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| PipeError::Config(format!("{}: {e}", path.display())))
    }

    /// Copies every key that is set into `self`.
    pub fn merge(&mut self, other: ConfigFile) {
        macro_rules! take {
            ($($sec:ident . $key:ident),* $(,)?) => {
                $(if other.$sec.$key.is_some() { self.$sec.$key = other.$sec.$key; })*
            };
        }
        if other.preset.is_some() {
            self.preset = other.preset;
        }
        take!(
            model.layers, model.classes, model.theta,
            train.epochs, train.splits, train.batch_size, train.lr_ff, train.lr_head,
            train.cooldown_start_epoch, train.seed, train.negatives, train.neg_lag,
            train.classifier, train.shuffle, train.precision,
            adam.beta1, adam.beta2, adam.eps,
            run.mode, run.nodes, run.transport, run.addresses, run.out, run.timeout_s,
            run.batch_delay_ms, run.metrics_every,
            data.dataset, data.dir, data.train_limit, data.test_limit, data.partition, data.blobs,
        );
    }

    /// The preset overlaid with every key that is set, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let preset: Preset = match &self.preset {
            Some(p) => p.parse()?,
            None => Preset::Paper,
        };
        let mut plan = preset.plan();
        let (m, t, a, r, d) = (&self.model, &self.train, &self.adam, &self.run, &self.data);

        let kind: DatasetKind = match &d.dataset {
            Some(s) => s.parse()?,
            None => DatasetKind::Mnist,
        };
        if kind == DatasetKind::Cifar10 && m.layers.is_none() {
            plan.layer_dims[0] = 3072;
        }
        if let Some(v) = &m.layers {
            plan.layer_dims = v.clone();
        }
        if let Some(v) = m.classes {
            plan.num_classes = v;
        }
        if let Some(v) = m.theta {
            plan.theta = v;
        }
        if let Some(v) = t.epochs {
            plan.epochs = v;
        }
        if let Some(v) = t.splits {
            plan.splits = v;
        }
        if let Some(v) = t.batch_size {
            plan.batch_size = v;
        }
        if let Some(v) = t.lr_ff {
            plan.lr_ff = v;
        }
        if let Some(v) = t.lr_head {
            plan.lr_head = v;
        }
        plan.cooldown_start_epoch = match t.cooldown_start_epoch {
            Some(v) => v,
            None if t.epochs.is_some() => plan.epochs / 2,
            None => plan.cooldown_start_epoch,
        };
        if let Some(v) = t.seed {
            plan.seed = v;
        }
        if let Some(v) = &t.negatives {
            plan.neg_strategy = parse::<NegStrategy>("train.negatives", v)?;
        }
        if let Some(v) = &t.classifier {
            plan.classifier = parse::<ClassifierMode>("train.classifier", v)?;
        }
        if let Some(v) = t.shuffle {
            plan.shuffle = v;
        }
        if let Some(v) = a.beta1 {
            plan.adam.beta1 = v;
        }
        if let Some(v) = a.beta2 {
            plan.adam.beta2 = v;
        }
        if let Some(v) = a.eps {
            plan.adam.eps = v;
        }
        let mode = match &r.mode {
            Some(v) => parse::<Mode>("run.mode", v)?,
            None => Mode::Sequential,
        };
        let nodes = match (mode, r.nodes) {
            (_, Some(n)) => n,
            (Mode::SingleLayer, None) => plan.layer_count(),
            (_, None) => 1,
        };
        plan = plan.with_mode(mode, nodes);
        if let Some(v) = t.neg_lag {
            plan.neg_lag = v;
        }
        plan.validate()?;

        let precision = match &t.precision {
            Some(v) => v.parse()?,
            None => Precision::F32,
        };
        let transport = match &r.transport {
            Some(v) => v.parse()?,
            None => TransportKind::InProcess,
        };
        let addresses = r
            .addresses
            .iter()
            .flatten()
            .map(|a| parse::<SocketAddr>("run.addresses", a))
            .collect::<Result<Vec<_>>>()?;
        if !addresses.is_empty() && addresses.len() != plan.nodes + 1 {
            return Err(PipeError::Config(format!(
                "run.addresses lists {} endpoints; {} workers need {} (the last is the collector)",
                addresses.len(),
                plan.nodes,
                plan.nodes + 1
            )));
        }
        let secs = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(Duration::from_secs_f64(v))
            } else {
                Err(PipeError::Config(format!("{key} must be a non-negative number, got {v}")))
            }
        };
        let timeout = match r.timeout_s {
            Some(v) => secs("run.timeout_s", v)?,
            None => DEFAULT_TIMEOUT,
        };
        let batch_delay = secs("run.batch_delay_ms", r.batch_delay_ms.unwrap_or(0.0) / 1e3)?;
        let metrics_every = r.metrics_every.unwrap_or(1);
        if metrics_every == 0 {
            return Err(PipeError::Config("run.metrics_every must be at least 1".into()));
        }
        let default_dir = match kind {
            DatasetKind::Mnist => "data/mnist",
            DatasetKind::Cifar10 => "data/cifar-10-batches-bin",
            DatasetKind::Blobs => "",
        };
        let data = DataConfig {
            kind,
            dir: PathBuf::from(d.dir.as_deref().unwrap_or(default_dir)),
            train_limit: d.train_limit,
            test_limit: d.test_limit,
            partition: match &d.partition {
                Some(v) => parse("data.partition", v)?,
                None => PartitionScheme::ByClass,
            },
            blobs: d.blobs.unwrap_or(2000),
        };
        Ok(RunConfig {
            preset,
            plan,
            data,
            precision,
            transport,
            addresses,
            out: PathBuf::from(r.out.as_deref().unwrap_or("runs/latest")),
            timeout,
            batch_delay,
            metrics_every,
        })
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        ConfigFile {
            preset: Some(preset.as_str().into()),
            ..ConfigFile::default()
        }
        .resolve()
        .expect("presets are valid")
    }

    /// Every key with its resolved value; loading the output gives back
    /// the same configuration.
    pub fn to_file(&self) -> ConfigFile {
        let p = &self.plan;
        ConfigFile {
            preset: Some(self.preset.as_str().into()),
            model: ModelSection {
                layers: Some(p.layer_dims.clone()),
                classes: Some(p.num_classes),
                theta: Some(p.theta),
            },
            train: TrainSection {
                epochs: Some(p.epochs),
                splits: Some(p.splits),
                batch_size: Some(p.batch_size),
                lr_ff: Some(p.lr_ff),
                lr_head: Some(p.lr_head),
                cooldown_start_epoch: Some(p.cooldown_start_epoch),
                seed: Some(p.seed),
                negatives: Some(p.neg_strategy.to_string()),
                neg_lag: Some(p.neg_lag),
                classifier: Some(p.classifier.to_string()),
                shuffle: Some(p.shuffle),
                precision: Some(
                    match self.precision {
                        Precision::F32 => "f32",
                        Precision::F64 => "f64",
                    }
                    .into(),
                ),
            },
            adam: AdamSection {
                beta1: Some(p.adam.beta1),
                beta2: Some(p.adam.beta2),
                eps: Some(p.adam.eps),
            },
            run: RunSection {
                mode: Some(p.mode.to_string()),
                nodes: Some(p.nodes),
                transport: Some(self.transport.to_string()),
                addresses: Some(self.addresses.iter().map(|a| a.to_string()).collect()),
                out: Some(self.out.display().to_string()),
                timeout_s: Some(self.timeout.as_secs_f64()),
                batch_delay_ms: Some(self.batch_delay.as_secs_f64() * 1e3),
                metrics_every: Some(self.metrics_every),
            },
            data: DataSection {
                dataset: Some(self.data.kind.as_str().into()),
                dir: Some(self.data.dir.display().to_string()),
                train_limit: self.data.train_limit,
                test_limit: self.data.test_limit,
                partition: Some(self.data.partition.to_string()),
                blobs: Some(self.data.blobs),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_paper_setup() {
        let c = ConfigFile::default().resolve().unwrap();
        let p = &c.plan;
        assert_eq!(p.layer_dims, vec![784, 2000, 2000, 2000, 2000]);
        assert_eq!((p.batch_size, p.epochs, p.splits), (64, 100, 100));
        assert_eq!((p.lr_ff, p.lr_head, p.theta), (0.01, 0.0001, 0.01));
        assert_eq!(p.cooldown_start_epoch, 50);
        assert_eq!(c.timeout, Duration::from_secs(120));
    }

    #[test]
    fn desk_preset_and_overrides() {
        let c = ConfigFile::from_toml(
            "preset = \"desk\"\n[train]\nnegatives = \"random\"\n[run]\nmode = \"all\"\nnodes = 4\n",
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(c.plan.layer_dims, vec![784, 500, 500, 500]);
        assert_eq!((c.plan.epochs, c.plan.splits), (20, 20));
        assert_eq!(c.plan.neg_strategy, NegStrategy::Random);
        assert_eq!((c.plan.mode, c.plan.nodes, c.plan.neg_lag), (Mode::AllLayers, 4, 4));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut f = ConfigFile::from_toml("preset = \"desk\"\n[run]\nmode = \"single\"\n[data]\ntrain_limit = 100\n").unwrap();
        let c = f.resolve().unwrap();
        assert_eq!(c.plan.nodes, 3);
        let text = c.to_toml();
        let back = ConfigFile::from_toml(&text).unwrap().resolve().unwrap();
        assert_eq!(back, c);
        f.merge(ConfigFile::from_toml("[train]\nseed = 9\n").unwrap());
        assert_eq!(f.resolve().unwrap().plan.seed, 9);
        assert_eq!(f.resolve().unwrap().data.train_limit, Some(100));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "[model]\nlayerz = [1]\n",
            "preset = \"huge\"\n",
            "[run]\nmode = \"single\"\nnodes = 2\n",
            "[train]\nsplits = 7\n",
            "[run]\ntransport = \"udp\"\n",
            "[run]\nnodes = 2\nmode = \"all\"\naddresses = [\"127.0.0.1:1\"]\n",
            "[run]\ntimeout_s = -1\n",
        ] {
            let r = ConfigFile::from_toml(text).and_then(|f| f.resolve());
            assert!(r.is_err(), "{text}");
        }
    }

    #[test]
    fn cifar_defaults_to_its_input_width() {
        let c = ConfigFile::from_toml("[data]\ndataset = \"cifar10\"\n").unwrap().resolve().unwrap();
        assert_eq!(c.plan.layer_dims[0], 3072);
        assert_eq!(c.data.dir, PathBuf::from("data/cifar-10-batches-bin"));
    }
}
