//! Run configuration, read from a TOML file.
//!
//! ```toml
//! task = "A"                 # A | B
//! head = "siamese"           # siamese | binary
//! template = "more_sense"    # optional, binary head only
//! output_dir = "runs/quickstart"
//!
//! [encoder]
//! d_model = 32
//! n_heads = 2
//! n_layers = 2
//! d_ff = 64
//! max_sequence_length = 24
//! pooling = "mean"           # cls | mean
//! max_vocab_size = 5000
//!
//! [train]
//! batch_size = 32
//! lr = 1e-3
//! epochs = 30
//! seed = 7
//!
//! [data]
//! synthetic = { seed = 1, train = 512, dev = 128 }
//! # or: train_data / train_answers / dev_data / dev_answers (CSV paths)
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dataset::{SyntheticSpec, TemplateSpec};
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Task, TaskFormat};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    pub pooling: Pooling,
    pub max_vocab_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        EncoderSection {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            max_sequence_length: d.max_sequence_length,
            pooling: d.pooling,
            max_vocab_size: 20_000,
        }
    }
}

impl EncoderSection {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_sequence_length: self.max_sequence_length,
            pooling: self.pooling,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    #[serde(default = "default_categories")]
    pub categories: usize,
    #[serde(default = "default_objects")]
    pub objects_per_category: usize,
}

fn default_categories() -> usize {
    SyntheticSpec::default().categories
}

fn default_objects() -> usize {
    SyntheticSpec::default().objects_per_category
}

impl SyntheticSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            categories: self.categories,
            objects_per_category: self.objects_per_category,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSection>,
    pub train_data: Option<PathBuf>,
    pub train_answers: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub dev_answers: Option<PathBuf>,
}

/// Where training and dev examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSection),
    Files {
        train_data: PathBuf,
        train_answers: PathBuf,
        dev_data: PathBuf,
        dev_answers: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    task: Task,
    head: HeadKind,
    template: Option<String>,
    template_pattern: Option<String>,
    output_dir: PathBuf,
    #[serde(default)]
    encoder: EncoderSection,
    #[serde(default)]
    train: TrainConfig,
    data: DataSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub head: HeadKind,
    pub template: Option<TemplateSpec>,
    pub output_dir: PathBuf,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub data: DataSource,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawRunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

        let template = match (raw.template, raw.template_pattern) {
            (None, None) => None,
            (Some(name), None) => Some(TemplateSpec::builtin(&name)?),
            (name, Some(pattern)) => Some(TemplateSpec::new(
                name.unwrap_or_else(|| "custom".to_string()),
                pattern,
            )?),
        };

        let d = raw.data;
        let data = match (d.synthetic, d.train_data, d.train_answers, d.dev_data, d.dev_answers) {
            (Some(s), None, None, None, None) => {
                if s.train == 0 || s.dev == 0 {
                    return Err(Error::Config("synthetic train and dev sizes must be >= 1".into()));
                }
                DataSource::Synthetic(s)
            }
            (None, Some(td), Some(ta), Some(dd), Some(da)) => DataSource::Files {
                train_data: resolve(td),
                train_answers: resolve(ta),
                dev_data: resolve(dd),
                dev_answers: resolve(da),
            },
            _ => {
                return Err(Error::Config(
                    "[data] needs either `synthetic` or all of train_data, train_answers, dev_data, dev_answers"
                        .into(),
                ))
            }
        };

        let cfg = RunConfig {
            task: raw.task,
            head: raw.head,
            template,
            output_dir: resolve(raw.output_dir),
            encoder: raw.encoder,
            train: raw.train,
            data,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    pub fn format(&self) -> TaskFormat {
        TaskFormat {
            task: self.task,
            head: self.head,
            template: self.template.clone(),
            max_len: self.encoder.max_sequence_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.format().validate()?;
        self.train.validate()?;
        self.encoder.encoder_config(1).validate()?;
        if self.encoder.max_vocab_size < 5 {
            return Err(Error::Config("max_vocab_size must be at least 5".into()));
        }
        Ok(())
    }
}
