//! Epoch loop with frozen-noise validation, plateau learning-rate halving,
//! early stopping and best-weight retention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::FlowNoise;
use crate::model::Amortizer;
use crate::nn::{AdamWConfig, Mode, OptimizerState, ParamStore, Tape};
use crate::params::Topic;
use crate::rng::{derive_seed, stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 70,
            early_stop_patience: 10,
            lr_patience: 4,
            lr_factor: 0.5,
            lr_min: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.early_stop_patience == 0 || self.lr_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return bad("learning rates must satisfy 0 < lr_min <= lr");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub final_lr: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        out
    }

    /// Writes `train_report.csv` and `train_report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train_report.csv"), self.to_csv())?;
        fs::write(dir.join("train_report.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Plateau bookkeeping. Both counters reset on improvement and advance on
/// every non-improving epoch; the learning-rate counter also resets after
/// each reduction.
#[derive(Debug, Clone)]
pub struct Schedule {
    config: TrainConfig,
    best: f64,
    best_epoch: usize,
    stale: usize,
    lr_stale: usize,
    lr: f64,
}

impl Schedule {
    pub fn new(config: TrainConfig) -> Self {
        Schedule {
            config,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            lr_stale: 0,
            lr: config.lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }

    /// Records the validation loss of `epoch`; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            self.lr_stale = 0;
            return true;
        }
        self.stale += 1;
        self.lr_stale += 1;
        if self.lr_stale >= self.config.lr_patience {
            self.lr = (self.lr * self.config.lr_factor).max(self.config.lr_min);
            self.lr_stale = 0;
        }
        false
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.config.early_stop_patience
    }
}

/// What the epoch loop needs from a model.
pub trait EpochModel {
    type Snapshot;

    /// One pass over the training data; returns the mean training loss.
    fn train_epoch(&mut self, lr: f64) -> Result<f64>;
    fn validation_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: &Self::Snapshot) -> Result<()>;
    fn save(&self, dir: &Path) -> Result<()>;
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

/// Runs epochs until patience or `max_epochs` is exhausted, then restores
/// the best weights. With `checkpoint`, the best weights are written there
/// on every improvement and after an aborted run.
pub fn run_schedule<M: EpochModel>(
    model: &mut M,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let mut schedule = Schedule::new(*config);
    let mut best = model.snapshot();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        let outcome = model
            .train_epoch(lr)
            .and_then(|l| finite(l, "training loss"))
            .and_then(|train| Ok((train, finite(model.validation_loss()?, "validation loss")?)));
        let (train_loss, val_loss) = match outcome {
            Ok(v) => v,
            Err(e) => {
                model.restore(&best)?;
                if let Some(dir) = checkpoint {
                    model.save(dir)?;
                }
                return Err(e);
            }
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if schedule.observe(epoch, val_loss) {
            best = model.snapshot();
            if let Some(dir) = checkpoint {
                model.save(dir)?;
            }
        }
        if schedule.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    model.restore(&best)?;
    let (best_epoch, best_val_loss) = schedule.best();
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        stop_reason,
        final_lr: schedule.lr(),
    })
}

/// One training pair: valid-frame features and the generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `T × k` (or `T × input_dim` for a pass-through model).
    pub features: Array2<f32>,
    pub theta: Array1<f64>,
}

/// Stratified split by topic. Each topic contributes
/// `round(count · val_fraction)` items to validation. Returned indices are
/// sorted.
pub fn split_dataset(topics: &[Topic], val_fraction: f64, rng: &mut Stream) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for topic in Topic::ALL {
        let mut idx: Vec<usize> = topics.iter().enumerate().filter(|(_, t)| **t == topic).map(|(i, _)| i).collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("split leaves an empty training or validation set".into()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn theta_matrix(items: &[&Example]) -> Array2<f64> {
    let d = items[0].theta.len();
    Array2::from_shape_fn((items.len(), d), |(i, j)| items[i].theta[j])
}

/// The amortized posterior bound to its data and optimizer.
pub struct FlowTrainer<'d> {
    pub model: Amortizer,
    pub store: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    train: &'d [Example],
    val: &'d [Example],
    val_noise: FlowNoise,
    batch_size: usize,
    rng: Stream,
    /// Extra metadata written into every checkpoint.
    pub checkpoint_metadata: Value,
}

impl<'d> FlowTrainer<'d> {
    pub fn new(
        model: Amortizer,
        store: ParamStore<f32>,
        train: &'d [Example],
        val: &'d [Example],
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyRequest("training and validation sets must be nonempty"));
        }
        let d = model.param_dim();
        if train.iter().chain(val).any(|e| e.theta.len() != d) {
            return Err(Error::shape("example theta width differs from the model"));
        }
        let optimizer = OptimizerState::new(
            &store,
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let val_noise = FlowNoise::draw(val.len(), d, &mut stream(derive_seed(config.seed, "validation-noise")));
        Ok(FlowTrainer {
            model,
            store,
            optimizer,
            train,
            val,
            val_noise,
            batch_size: config.batch_size,
            rng: stream(derive_seed(config.seed, "batches")),
            checkpoint_metadata: json!({}),
        })
    }

    /// Mean validation loss under the frozen noise, dropout off.
    pub fn evaluate_validation(&self) -> Result<f64> {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..self.val.len()).collect();
        for rows in idx.chunks(self.batch_size) {
            let items: Vec<&Example> = rows.iter().map(|&i| &self.val[i]).collect();
            let noise = self.val_noise.select(rows);
            let loss = self.batch_loss(&items, &noise, &mut Mode::Eval)?.0;
            total += loss * rows.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }

    fn batch_loss(&self, items: &[&Example], noise: &FlowNoise, mode: &mut Mode<'_>) -> Result<(f64, Tape<f32>, crate::nn::NodeId)> {
        let feats: Vec<ArrayView2<f32>> = items.iter().map(|e| e.features.view()).collect();
        let theta = theta_matrix(items);
        let mut tape = Tape::new();
        let loss = self.model.loss(&mut tape, &self.store, &feats, theta.view(), noise, mode)?;
        Ok((f64::from(tape.scalar(loss)), tape, loss))
    }
}

impl EpochModel for FlowTrainer<'_> {
    type Snapshot = Vec<ndarray::ArrayD<f32>>;

    fn train_epoch(&mut self, lr: f64) -> Result<f64> {
        self.optimizer.config.lr = lr;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let d = self.model.param_dim();
        let mut total = 0.0;
        for rows in order.chunks(self.batch_size) {
            let items: Vec<&Example> = rows.iter().map(|&i| &self.train[i]).collect();
            let noise = FlowNoise::draw(rows.len(), d, &mut self.rng);
            let mut rng = std::mem::replace(&mut self.rng, stream(0));
            let result = self.batch_loss(&items, &noise, &mut Mode::Train(&mut rng));
            self.rng = rng;
            let (loss, tape, node) = result?;
            tape.backward(node, &mut self.store)?;
            self.optimizer.step(&mut self.store)?;
            total += loss * rows.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }

    fn validation_loss(&mut self) -> Result<f64> {
        self.evaluate_validation()
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.store.snapshot()
    }

    fn restore(&mut self, snapshot: &Self::Snapshot) -> Result<()> {
        self.store.restore(snapshot)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.model
            .save(dir, &self.store, Some(&self.optimizer), self.checkpoint_metadata.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed validation-loss trace; weights are the epoch number.
    struct Scripted {
        trace: Vec<f64>,
        epoch: usize,
        weight: f64,
        lrs: Vec<f64>,
    }

    impl Scripted {
        fn new(trace: Vec<f64>) -> Self {
            Scripted {
                trace,
                epoch: 0,
                weight: 0.0,
                lrs: Vec::new(),
            }
        }
    }

    impl EpochModel for Scripted {
        type Snapshot = f64;
        fn train_epoch(&mut self, lr: f64) -> Result<f64> {
            self.lrs.push(lr);
            self.epoch += 1;
            self.weight = self.epoch as f64;
            Ok(1.0)
        }
        fn validation_loss(&mut self) -> Result<f64> {
            Ok(self.trace[self.epoch - 1])
        }
        fn snapshot(&self) -> f64 {
            self.weight
        }
        fn restore(&mut self, s: &f64) -> Result<()> {
            self.weight = *s;
            Ok(())
        }
        fn save(&self, _: &Path) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn plateau_halves_after_four_and_stops_after_ten() {
        let mut trace = vec![5.0, 4.0, 3.0];
        trace.extend(std::iter::repeat_n(3.5, 20));
        let mut m = Scripted::new(trace);
        let cfg = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
        let report = run_schedule(&mut m, &cfg, None).unwrap();
        assert_eq!(report.stop_reason, StopReason::EarlyStop);
        assert_eq!(report.best_epoch, 3);
        assert_eq!(report.epochs.len(), 13);
        assert_eq!(m.weight, 3.0);
        // Epochs 4..=7 stale -> halved for epoch 8; 8..=11 -> halved for 12.
        assert_eq!(&m.lrs[..7], &[1e-3; 7]);
        assert_eq!(&m.lrs[7..11], &[5e-4; 4]);
        assert_eq!(&m.lrs[11..], &[2.5e-4; 2]);
        assert_eq!(report.final_lr, 2.5e-4);
    }

    #[test]
    fn single_epoch_stops_on_max_epochs() {
        let mut m = Scripted::new(vec![1.0]);
        let cfg = TrainConfig { max_epochs: 1, ..TrainConfig::default() };
        let r = run_schedule(&mut m, &cfg, None).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert_eq!(r.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn lr_is_floored_and_never_increases() {
        let mut trace = vec![1.0];
        trace.extend(std::iter::repeat_n(2.0, 60));
        let mut m = Scripted::new(trace);
        let cfg = TrainConfig {
            lr: 1e-5,
            lr_min: 3e-6,
            early_stop_patience: 60,
            max_epochs: 61,
            ..TrainConfig::default()
        };
        run_schedule(&mut m, &cfg, None).unwrap();
        assert!(m.lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.lrs.iter().all(|&l| l >= 3e-6));
        assert_eq!(*m.lrs.last().unwrap(), 3e-6);
    }

    #[test]
    fn nan_aborts_and_restores_best() {
        struct Nan(Scripted);
        impl EpochModel for Nan {
            type Snapshot = f64;
            fn train_epoch(&mut self, lr: f64) -> Result<f64> {
                self.0.train_epoch(lr)
            }
            fn validation_loss(&mut self) -> Result<f64> {
                self.0.validation_loss()
            }
            fn snapshot(&self) -> f64 {
                self.0.snapshot()
            }
            fn restore(&mut self, s: &f64) -> Result<()> {
                self.0.restore(s)
            }
            fn save(&self, _: &Path) -> Result<()> {
                Ok(())
            }
        }
        let mut m = Nan(Scripted::new(vec![2.0, 1.0, 1.5, f64::NAN]));
        let dir = tempfile::tempdir().unwrap();
        let r = run_schedule(&mut m, &TrainConfig::default(), Some(dir.path()));
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(m.0.weight, 2.0);
    }

    #[test]
    fn stratified_split() {
        let topics: Vec<Topic> = Topic::ALL.iter().flat_map(|t| std::iter::repeat_n(*t, 10)).collect();
        let (tr, va) = split_dataset(&topics, 0.1, &mut stream(1)).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        for t in Topic::ALL {
            assert_eq!(va.iter().filter(|&&i| topics[i] == t).count(), 1);
        }
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_dataset(&topics, 0.1, &mut stream(1)).unwrap(), (tr, va));
        assert!(split_dataset(&topics, 1.0, &mut stream(1)).is_err());
        assert!(split_dataset(&topics, 0.0, &mut stream(1)).is_err());
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let r = TrainReport {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 2.0, val_loss: 1.5, lr: 1e-4 }],
            best_epoch: 1,
            best_val_loss: 1.5,
            stop_reason: StopReason::MaxEpochs,
            final_lr: 1e-4,
        };
        assert_eq!(r.to_csv(), "epoch,train_loss,val_loss,lr\n1,2,1.5,0.0001\n");
    }
}
