use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{inject_label_noise, make_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::estimator::{SnapshotContext, TraceSnapshot};
use crate::model::ModelSpec;

pub const CONFIG_FILE: &str = "config.json";
pub const SNAPSHOT_FILE: &str = "snapshots.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const META_FILE: &str = "meta.json";

/// Which batch a snapshot is evaluated on.
pub const SNAPSHOT_BATCH: &str = "current training mini-batch, before the update";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub learning_rate: f64,
    /// `lr(t) = base · ½(1 + cos(π t / T))` when set, constant otherwise.
    pub cosine: bool,
    /// Coefficient `λ` of the `λ‖θ‖²` term in the taped loss.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            learning_rate: 0.1,
            cosine: true,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data_order: u64,
    pub probes: u64,
    pub label_noise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    /// `mlp-small` or `mlp-tied`; ignored when `model` is given.
    pub architecture: String,
    /// A model in the text format, overriding `architecture`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub dataset: DatasetSpec,
    pub eta: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub snapshot_every: u64,
    #[serde(rename = "K")]
    pub probes: usize,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1), got {}", self.eta));
        }
        if self.snapshot_every == 0 || self.batch_size == 0 || self.epochs == 0 || self.probes == 0 {
            return bad("snapshot_every, batch_size, epochs and K must all be at least 1".into());
        }
        let n = self.dataset.classes * self.dataset.train_per_class;
        if self.batch_size > n {
            return bad(format!("batch size {} exceeds the {n} training points", self.batch_size));
        }
        if !(self.optimizer.learning_rate > 0.0) || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        self.model_spec()?.validate()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = match &self.model {
            Some(text) => ModelSpec::parse(text)?,
            None => ModelSpec::architecture(&self.architecture, self.dataset.input_dim, self.dataset.classes)?,
        };
        if spec.input != self.dataset.input_dim || spec.output_dim() != self.dataset.classes {
            return Err(Error::InvalidModel(format!(
                "model maps {} → {} but the data is {} → {}",
                spec.input,
                spec.output_dim(),
                self.dataset.input_dim,
                self.dataset.classes
            )));
        }
        Ok(spec.with_weight_decay(self.optimizer.weight_decay))
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.dataset.classes * self.dataset.train_per_class / self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.epochs) as u64
    }

    /// 1-based epoch containing `step`.
    pub fn epoch_of(&self, step: u64) -> usize {
        step as usize / self.steps_per_epoch() + 1
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        let base = self.optimizer.learning_rate;
        if self.optimizer.cosine {
            let frac = step as f64 / self.total_steps() as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            base
        }
    }

    pub fn data(&self) -> Result<Dataset> {
        inject_label_noise(&make_dataset(&self.dataset)?, self.eta, self.seeds.label_noise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { step: u64, reason: String },
    /// No summary was written; the stream was cut short.
    Interrupted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub snapshots: u64,
    /// One per update plus one per snapshot.
    pub gradient_passes: u64,
    pub hvps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_loss: f64,
    /// Against the (possibly noisy) training labels.
    pub train_accuracy: f64,
    pub clean_train_accuracy: f64,
    pub test_accuracy: f64,
    /// Share of corrupted points predicted as their corrupted label.
    pub memorised_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub layer_names: Vec<String>,
    pub layer_sizes: Vec<usize>,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
    pub snapshot_batch: String,
    pub corrupted_fraction: f64,
    pub status: RunStatus,
    pub counters: Counters,
    pub metrics: Option<FinalMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub snapshots: Vec<TraceSnapshot>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn run_id(&self) -> &str {
        &self.summary.config.run_id
    }

    pub fn eta(&self) -> f64 {
        self.summary.config.eta
    }

    pub fn is_completed(&self) -> bool {
        self.summary.status == RunStatus::Completed
    }
}

struct Sink {
    dir: PathBuf,
    stream: BufWriter<File>,
}

impl Sink {
    fn open(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        let path = dir.join(SNAPSHOT_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            stream: BufWriter::new(file),
        })
    }

    fn append(&mut self, snap: &TraceSnapshot) -> Result<()> {
        let path = self.dir.join(SNAPSHOT_FILE);
        snap.write_jsonl(&mut self.stream)
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::io(&path, e))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn predictions(spec: &ModelSpec, params: &[f64], xs: &[Vec<f64>]) -> Result<Vec<usize>> {
    let batch = crate::model::Batch::classification(xs, &vec![0; xs.len()])?;
    let out = spec.predict(params, batch.inputs())?;
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64
}

fn final_metrics(spec: &ModelSpec, params: &[f64], data: &Dataset) -> Result<FinalMetrics> {
    let train_loss = spec.forward(params, &data.full_train_batch()?)?.loss();
    let pred = predictions(spec, params, &data.train_x)?;
    let test_pred = predictions(spec, params, &data.test_x)?;
    let corrupted: Vec<usize> = (0..data.train_len()).filter(|&i| data.corrupted[i]).collect();
    let memorised_fraction = (!corrupted.is_empty()).then(|| {
        corrupted.iter().filter(|&&i| pred[i] == data.train_y[i]).count() as f64 / corrupted.len() as f64
    });
    Ok(FinalMetrics {
        train_loss,
        train_accuracy: accuracy(&pred, &data.train_y),
        clean_train_accuracy: accuracy(&pred, &data.clean_y),
        test_accuracy: accuracy(&test_pred, &data.test_y),
        memorised_fraction,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFiniteNode { .. } | Error::NonFiniteProbe { .. })
}

/// SGD with momentum and (optionally) cosine decay, taking a single-pass trace
/// snapshot every `snapshot_every` steps on the mini-batch about to be used.
///
/// With `out`, the config is written first, each snapshot is appended to the
/// JSONL stream as soon as it exists, and the summary plus wall-clock metadata
/// are written at the end.
pub fn train_with_monitoring(config: &RunConfig, out: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let spec = config.model_spec()?;
    let data = config.data()?;
    let partition = spec.partition();
    let mut sink = out.map(|dir| Sink::open(dir, config)).transpose()?;

    let mut params = spec.init_params(config.seeds.init);
    let mut velocity = vec![0.0; params.len()];
    let steps_per_epoch = config.steps_per_epoch();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seeds.data_order);
    let mut counters = Counters::default();
    let mut snapshots = Vec::new();
    let mut status = RunStatus::Completed;
    let mut order: Vec<usize> = (0..data.train_len()).collect();

    'training: for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for b in 0..steps_per_epoch {
            let step = (epoch * steps_per_epoch + b) as u64;
            let idx = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let batch = data.train_batch(idx)?;

            if step.is_multiple_of(config.snapshot_every) {
                let mut graph = spec.forward(&params, &batch)?;
                let loss = graph.loss();
                let taken = if loss.is_finite() {
                    graph.gradient(true).and_then(|_| {
                        TraceSnapshot::take(
                            &graph,
                            config.seeds.probes,
                            config.probes,
                            SnapshotContext {
                                run_id: &config.run_id,
                                step,
                                epoch: epoch + 1,
                                batch_id: b,
                                eta: config.eta,
                                loss,
                            },
                        )
                    })
                } else {
                    Err(Error::NonFiniteNode { node: 0 })
                };
                counters.gradient_passes += 1;
                match taken {
                    Ok(snap) => {
                        counters.snapshots += 1;
                        counters.hvps += config.probes as u64;
                        if let Some(s) = sink.as_mut() {
                            s.append(&snap)?;
                        }
                        snapshots.push(snap);
                    }
                    Err(e) if is_divergence(&e) => {
                        status = RunStatus::Failed {
                            step,
                            reason: format!("non-finite curvature at snapshot: {e}"),
                        };
                        break 'training;
                    }
                    Err(e) => return Err(e),
                }
            }

            let mut graph = spec.forward(&params, &batch)?;
            let loss = graph.loss();
            let grad = if loss.is_finite() {
                graph.gradient(false)
            } else {
                Err(Error::NonFiniteNode { node: 0 })
            };
            counters.gradient_passes += 1;
            let grad = match grad {
                Ok(g) => g,
                Err(e) if is_divergence(&e) => {
                    status = RunStatus::Failed {
                        step,
                        reason: format!("non-finite loss or gradient: {e}"),
                    };
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            let lr = config.learning_rate(step);
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.optimizer.momentum * *v + g;
                *p -= lr * *v;
            }
            counters.steps += 1;
        }
    }

    let metrics = match status {
        RunStatus::Completed => Some(final_metrics(&spec, &params, &data)?),
        _ => None,
    };
    if let RunStatus::Failed { step, reason } = &status {
        log::warn!("run {} failed at step {step}: {reason}", config.run_id);
    }
    let summary = RunSummary {
        config: config.clone(),
        layer_names: partition.groups().iter().map(|g| g.name.clone()).collect(),
        layer_sizes: partition.groups().iter().map(|g| g.len).collect(),
        steps_per_epoch,
        total_steps: config.total_steps(),
        snapshot_batch: SNAPSHOT_BATCH.to_string(),
        corrupted_fraction: data.corrupted_fraction(),
        status,
        counters,
        metrics,
    };
    let wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(s) = sink {
        write_json(&s.dir.join(RECORD_FILE), &summary)?;
        write_json(&s.dir.join(META_FILE), &serde_json::json!({ "wall_clock_secs": wall_clock_secs }))?;
    }
    Ok(RunRecord {
        summary,
        snapshots,
        wall_clock_secs,
    })
}

/// Reads a run directory written by [`train_with_monitoring`]. A missing
/// summary marks the run as interrupted; the snapshot stream is read up to the
/// last complete step.
pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let read = |name: &str| -> Result<Option<String>> {
        let path = dir.join(name);
        match fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    };
    let stream_path = dir.join(SNAPSHOT_FILE);
    let stream = File::open(&stream_path).map_err(|e| Error::io(&stream_path, e))?;
    let snapshots = crate::estimator::read_jsonl(std::io::BufReader::new(stream), &stream_path.display().to_string())?;
    let summary = match read(RECORD_FILE)? {
        Some(text) => serde_json::from_str(&text).map_err(|e| Error::json(dir.join(RECORD_FILE).display().to_string(), e))?,
        None => {
            let text = read(CONFIG_FILE)?.ok_or_else(|| Error::Io {
                path: dir.join(CONFIG_FILE),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing run config"),
            })?;
            let config: RunConfig =
                serde_json::from_str(&text).map_err(|e| Error::json(dir.join(CONFIG_FILE).display().to_string(), e))?;
            let spec = config.model_spec()?;
            let partition = spec.partition();
            RunSummary {
                layer_names: partition.groups().iter().map(|g| g.name.clone()).collect(),
                layer_sizes: partition.groups().iter().map(|g| g.len).collect(),
                steps_per_epoch: config.steps_per_epoch(),
                total_steps: config.total_steps(),
                snapshot_batch: SNAPSHOT_BATCH.to_string(),
                corrupted_fraction: config.data()?.corrupted_fraction(),
                status: RunStatus::Interrupted,
                counters: Counters::default(),
                metrics: None,
                config,
            }
        }
    };
    let wall_clock_secs = read(META_FILE)?
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("wall_clock_secs").and_then(|x| x.as_f64()))
        .unwrap_or(f64::NAN);
    Ok(RunRecord {
        summary,
        snapshots,
        wall_clock_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            run_id: "tiny".into(),
            architecture: "mlp-small".into(),
            model: Some("input = 3\nlayer = dense 4 tanh\nlayer = dense 3 identity\n".into()),
            dataset: DatasetSpec {
                classes: 3,
                train_per_class: 8,
                test_per_class: 4,
                input_dim: 3,
                separation: 2.0,
                spread: 0.5,
                seed: 1,
            },
            eta: 0.0,
            optimizer: OptimizerConfig::default(),
            batch_size: 6,
            epochs: 3,
            snapshot_every: 1,
            probes: 4,
            seeds: Seeds {
                init: 1,
                data_order: 2,
                probes: 3,
                label_noise: 4,
            },
        }
    }

    #[test]
    fn counters_follow_the_schedule() {
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        cfg.batch_size = 6;
        let rec = train_with_monitoring(&cfg, None).unwrap();
        let c = rec.summary.counters;
        assert_eq!(c.steps, 12);
        assert_eq!(c.snapshots, 12);
        assert_eq!(c.hvps, 4 * 12);
        assert_eq!(c.gradient_passes, c.steps + c.snapshots);
        let steps: Vec<u64> = rec.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = tiny_config();
        assert_eq!(cfg.learning_rate(0), 0.1);
        let half = cfg.learning_rate(cfg.total_steps() / 2);
        assert!((half - 0.05).abs() < 1e-12);
    }

    #[test]
    fn divergence_marks_the_run_failed() {
        let mut cfg = tiny_config();
        cfg.optimizer.learning_rate = 1e200;
        cfg.optimizer.cosine = false;
        let rec = train_with_monitoring(&cfg, None).unwrap();
        assert!(matches!(rec.summary.status, RunStatus::Failed { .. }), "{:?}", rec.summary.status);
        assert!(!rec.snapshots.is_empty());
        assert!(rec.summary.metrics.is_none());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny_config();
        cfg.eta = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.snapshot_every = 0;
        assert!(cfg.validate().is_err());
    }
}
