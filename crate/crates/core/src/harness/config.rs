//! Experiment description: data source, model choice, optimisation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::OptimizerKind;
use crate::datasets::{self, ImageDataset, MNIST_CLASSES, MNIST_SIDE};
use crate::encoding::{DictionaryMode, EncodedSample, Encoder, FeatureDictionary, FeatureSchema, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Architecture, AttentionPath, ConvLayer, ModelConfig, PermutationKind};
use crate::permutation::PermutationSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Train and test subsets both drawn from the MNIST training file.
    Mnist {
        dir: PathBuf,
        n_train: usize,
        n_test: usize,
        /// Scramble rows and columns with the designed 28-element permutation.
        #[serde(default)]
        synthesized: bool,
        /// Seed of the subset draw; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
    },
    Tabular {
        path: PathBuf,
        schema: PathBuf,
        #[serde(default = "default_ratio")]
        train_ratio: f64,
        #[serde(default = "default_true")]
        stratified: bool,
        #[serde(default = "default_mode")]
        dictionary: DictionaryMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
    },
}

fn default_ratio() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

fn default_mode() -> DictionaryMode {
    DictionaryMode::PerFeature
}

/// Named MNIST presets, or a layout whose input sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    EapcrMnist {
        level: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutation: Option<PermutationKind>,
    },
    EacrMnist {
        level: usize,
    },
    MlpMnist {
        k: usize,
    },
    PlainCnnMnist,
    Custom {
        arch: Architecture,
        #[serde(default)]
        embed_size: usize,
        #[serde(default)]
        conv: Vec<ConvLayer>,
        #[serde(default)]
        adaptive_out: usize,
        hidden: usize,
        dropout: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutation: Option<PermutationKind>,
        #[serde(default)]
        attention: AttentionPath,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_side: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Stop after the first epoch that ends past this many seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_s: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}: line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Mnist { dir, .. } => fix(dir),
            DataConfig::Tabular { path, schema, .. } => {
                fix(path);
                fix(schema);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", t.lr)));
        }
        match &self.data {
            DataConfig::Mnist { n_train, n_test, .. } if *n_train == 0 || *n_test == 0 => {
                Err(Error::Config("n_train and n_test must be positive".into()))
            }
            DataConfig::Tabular { train_ratio, .. } if !(*train_ratio > 0.0 && *train_ratio < 1.0) => {
                Err(Error::Config(format!("train_ratio {train_ratio} not in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn data_seed(&self) -> u64 {
        match &self.data {
            DataConfig::Mnist { data_seed, .. } | DataConfig::Tabular { data_seed, .. } => {
                data_seed.unwrap_or(self.seed)
            }
        }
    }
}

/// Encoded train/test sets plus what the model needs to size itself.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
    pub task: TaskKind,
    pub n_features: usize,
    pub n_classes: usize,
    pub dictionary: FeatureDictionary,
    pub encoder: Option<Encoder>,
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

pub fn load_mnist_train(dir: &Path) -> Result<ImageDataset> {
    datasets::load_mnist_idx(dir.join(MNIST_TRAIN_IMAGES), dir.join(MNIST_TRAIN_LABELS))
}

impl PreparedData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.data_seed();
        match &cfg.data {
            DataConfig::Mnist {
                dir,
                n_train,
                n_test,
                synthesized,
                ..
            } => {
                let full = load_mnist_train(dir)?;
                let (mut train, mut test) = datasets::draw_subsets(&full, *n_train, *n_test, seed)?;
                if *synthesized {
                    let p = PermutationSpec::designed(MNIST_SIDE)?;
                    train = datasets::synthesize_frp_free(&train, &p)?;
                    test = datasets::synthesize_frp_free(&test, &p)?;
                }
                Ok(Self::from_images(&train, &test))
            }
            DataConfig::Tabular {
                path,
                schema,
                train_ratio,
                stratified,
                dictionary,
                ..
            } => {
                let schema = FeatureSchema::load(schema)?;
                let ds = datasets::load_tabular(path, &schema)?;
                let (train, test) = ds.split(*train_ratio, seed, *stratified)?;
                let encoder = Encoder::fit(&schema, &train.rows, *dictionary)?;
                Ok(Self {
                    train: encoder.encode_all(&train.rows)?,
                    test: encoder.encode_all(&test.rows)?,
                    task: schema.target.task,
                    n_features: schema.n_features(),
                    n_classes: encoder.n_classes(),
                    dictionary: encoder.dictionary.clone(),
                    encoder: Some(encoder),
                })
            }
        }
    }

    pub fn from_images(train: &ImageDataset, test: &ImageDataset) -> Self {
        let n = train.pixels();
        Self {
            train: train.encode(),
            test: test.encode(),
            task: TaskKind::Classification,
            n_features: n,
            n_classes: MNIST_CLASSES,
            dictionary: FeatureDictionary::binary_shared(n),
            encoder: None,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.n_classes,
            TaskKind::Regression => 1,
        }
    }
}

impl ModelSpec {
    /// Full model configuration for the given data.
    pub fn resolve(&self, data: &PreparedData) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::EapcrMnist { level, permutation } => {
                let mut c = ModelConfig::eapcr_mnist(*level)?;
                if let Some(p) = permutation {
                    c.permutation = Some(*p);
                }
                c
            }
            ModelSpec::EacrMnist { level } => ModelConfig::eacr_mnist(*level)?,
            ModelSpec::MlpMnist { k } => ModelConfig::mlp_mnist(*k)?,
            ModelSpec::PlainCnnMnist => ModelConfig::plain_cnn_mnist(),
            ModelSpec::Custom {
                arch,
                embed_size,
                conv,
                adaptive_out,
                hidden,
                dropout,
                permutation,
                attention,
                image_side,
            } => ModelConfig {
                arch: *arch,
                n_features: data.n_features,
                vocab_size: data.dictionary.vocab_size(),
                embed_size: *embed_size,
                conv: conv.clone(),
                adaptive_out: *adaptive_out,
                hidden: *hidden,
                outputs: data.outputs(),
                dropout: *dropout,
                permutation: match arch {
                    Architecture::Eapcr => Some(permutation.unwrap_or(PermutationKind::Designed)),
                    _ => None,
                },
                attention: *attention,
                image_side: *image_side,
            },
        };
        if cfg.n_features != data.n_features
            || cfg.vocab_size != data.dictionary.vocab_size()
            || cfg.outputs != data.outputs()
        {
            return Err(Error::Config(format!(
                "model expects {} features, {} indices, {} outputs; data has {}, {}, {}",
                cfg.n_features,
                cfg.vocab_size,
                cfg.outputs,
                data.n_features,
                data.dictionary.vocab_size(),
                data.outputs()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
