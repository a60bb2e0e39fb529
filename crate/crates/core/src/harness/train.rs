//! Mini-batch training, evaluation and the persisted run record.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PreparedData, TrainConfig};
use super::metrics::{classification_metrics, regression_metrics, Metrics};
use crate::autodiff::{Optimizer, Real, Tape};
use crate::encoding::{EncodedSample, Target, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig, Prediction, TargetNorm};

/// Independent seed for a numbered sub-stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped early by the wall-clock budget.
    TimeLimit {
        epochs_done: usize,
    },
    Diverged {
        epoch: usize,
        batch: usize,
        /// Non-finite losses are written as `null` and read back as NaN.
        #[serde(with = "nullable_f64")]
        loss: f64,
    },
}

mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub metrics: Metrics,
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub epochs: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
    pub last: Option<Metrics>,
    pub status: RunStatus,
}

fn sample_loss<T: Real>(
    model: &Model<T>,
    s: &EncodedSample,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape<T>, f64, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let fv = model.forward(&mut tape, &s.indices_usize(), true, rng)?;
    let loss = model.loss(&mut tape, fv.logits, s.target)?;
    let value = tape.value(loss).data()[0].as_f64();
    Ok((tape, value, loss))
}

/// Seeded mini-batch training with an evaluation on `test` after every
/// epoch. Batch gradients are the mean of per-sample gradients.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[EncodedSample],
    test_set: &[EncodedSample],
    cfg: &TrainConfig,
    seed: u64,
    timing: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainResult> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Data("training and test sets must be non-empty".into()));
    }
    if model.config().task() == TaskKind::Regression && model.target_norm().is_none() {
        let values: Vec<f64> = train_set.iter().map(|s| s.target.value()).collect();
        model.set_target_norm(Some(TargetNorm::fit(&values)));
    }
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.lr)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DROPOUT));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut result = TrainResult {
        epochs: Vec::new(),
        best: None,
        last: None,
        status: RunStatus::Completed,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params_mut().zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (tape, value, loss) = sample_loss(model, &train_set[i], &mut dropout_rng)?;
                batch_loss += value;
                tape.backward(loss)?.accumulate_into(&tape, model.params_mut());
            }
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || !model.params().grads_finite() {
                result.status = RunStatus::Diverged {
                    epoch,
                    batch: b,
                    loss: mean,
                };
                return Ok(result);
            }
            model.params_mut().scale_grads(T::lit(1.0 / batch.len() as f64));
            opt.step(model.params_mut())?;
            model.record_update();
            loss_sum += batch_loss;
        }
        let metrics = evaluate(model, test_set)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            test_metric: metrics.headline(),
            wall_s: timing.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&rec);
        result.epochs.push(rec);
        if result.best.as_ref().is_none_or(|b| is_better(&metrics, &b.metrics)) {
            result.best = Some(BestEpoch {
                epoch,
                metrics: metrics.clone(),
            });
        }
        result.last = Some(metrics);
        if let Some(limit) = cfg.max_wall_s {
            if start.elapsed().as_secs_f64() > limit && epoch < cfg.epochs {
                result.status = RunStatus::TimeLimit { epochs_done: epoch };
                break;
            }
        }
    }
    Ok(result)
}

fn is_better(a: &Metrics, b: &Metrics) -> bool {
    a.headline() > b.headline()
}

/// Evaluation-mode predictions for every sample.
pub fn predict_all<T: Real>(model: &Model<T>, samples: &[EncodedSample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| model.predict(&s.indices_usize())).collect()
}

/// Scores `model` on `samples` with dropout disabled.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[EncodedSample]) -> Result<Metrics> {
    let preds = predict_all(model, samples)?;
    match model.config().task() {
        TaskKind::Classification => {
            let truth = samples
                .iter()
                .map(|s| {
                    s.target
                        .class()
                        .ok_or_else(|| Error::Data("regression target in a classification set".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Class(c) => *c,
                    Prediction::Value(_) => unreachable!("classification model"),
                })
                .collect();
            classification_metrics(&truth, &pred, model.config().outputs)
        }
        TaskKind::Regression => {
            let truth: Vec<f64> = samples
                .iter()
                .map(|s| match s.target {
                    Target::Value(v) => Ok(v),
                    Target::Class(_) => Err(Error::Data("class target in a regression set".into())),
                })
                .collect::<Result<_>>()?;
            let pred: Vec<f64> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Value(v) => *v,
                    Prediction::Class(c) => *c as f64,
                })
                .collect();
            regression_metrics(&truth, &pred)
        }
    }
}

/// Everything needed to audit or replay one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub reproducible: bool,
    pub model: ModelConfig,
    pub param_count: usize,
    pub dictionary_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
    pub last: Option<Metrics>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    /// Files written next to the record, by role.
    pub artifacts: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Final metrics of the run (last epoch).
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.last.as_ref()
    }
}

/// Options that do not belong to the experiment itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Omit wall-clock fields so the record depends only on config and seed.
    pub reproducible: bool,
    /// Directory for the record, checkpoint and encoder; nothing is written when absent.
    pub out_dir: Option<std::path::PathBuf>,
}

/// A trained model together with its record.
pub struct Run {
    pub record: RunRecord,
    pub model: Model<f32>,
    pub data: PreparedData,
}

pub fn build_model(model_cfg: ModelConfig, data: &PreparedData, seed: u64) -> Result<Model<f32>> {
    let arch = model_cfg.arch;
    let mut model = Model::<f32>::new(model_cfg, derive_seed(seed, STREAM_INIT))?;
    if matches!(arch, Architecture::Mlp | Architecture::PlainCnn) {
        model.set_index_values_from(&data.dictionary)?;
    }
    Ok(model)
}

/// Loads the data, builds and trains the model, and writes artifacts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Run> {
    cfg.validate()?;
    let data = PreparedData::load(cfg)?;
    run_prepared(cfg, data, opts, on_epoch)
}

/// As [`run_experiment`] with data already in memory.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    data: PreparedData,
    opts: &RunOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Run> {
    let model_cfg = cfg.model.resolve(&data)?;
    let mut model = build_model(model_cfg.clone(), &data, cfg.seed)?;
    let start = Instant::now();
    let result = train(
        &mut model,
        &data.train,
        &data.test,
        &cfg.train,
        cfg.seed,
        !opts.reproducible,
        on_epoch,
    )?;
    let dictionary_hash = data.dictionary.hash();
    let mut record = RunRecord {
        name: cfg.name.clone(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        reproducible: opts.reproducible,
        param_count: model_cfg.param_count(),
        model: model_cfg,
        dictionary_hash: dictionary_hash.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        epochs: result.epochs,
        best: result.best,
        last: result.last,
        status: result.status,
        wall_time_s: (!opts.reproducible).then(|| start.elapsed().as_secs_f64()),
        artifacts: BTreeMap::new(),
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model
            .to_checkpoint(&dictionary_hash)
            .save(dir.join("checkpoint.json"))?;
        record.artifacts.insert("checkpoint".into(), "checkpoint.json".into());
        if let Some(enc) = &data.encoder {
            enc.save(dir.join("encoder.json"))?;
            record.artifacts.insert("encoder".into(), "encoder.json".into());
        }
        record.artifacts.insert("record".into(), "record.json".into());
        record.save(dir.join("record.json"))?;
    }
    Ok(Run { record, model, data })
}
