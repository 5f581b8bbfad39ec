//! The amortized posterior: a summary network (or a pass-through mean) that
//! conditions the velocity network.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::{cfm_loss, sample_posterior, FlowConfig, FlowNoise, PosteriorDraws, Solver, VelocityNet};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointManifest, Mode, NodeId, OptimizerState, ParamStore, Scalar, Tape};
use crate::rng::{derive_seed, stream};
use crate::summary::{stack_frames, SummaryConfig, SummaryNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryKind {
    Network(SummaryConfig),
    /// The condition is the plain mean of the input frames.
    PassThrough { input_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub summary: SummaryKind,
    pub flow: FlowConfig,
    /// The flow runs on `(θ - theta_center) / theta_scale`.
    pub theta_center: f64,
    pub theta_scale: f64,
}

impl ModelConfig {
    /// Full backbone over `k` PCA features with the default flow, with θ
    /// standardized by the moments of the uniform unit-interval prior.
    pub fn standard(k: usize) -> Self {
        let summary = SummaryConfig::new(k);
        ModelConfig {
            summary: SummaryKind::Network(summary),
            flow: FlowConfig {
                cond_dim: summary.embed_dim,
                ..FlowConfig::default()
            },
            theta_center: 0.5,
            theta_scale: (1.0f64 / 12.0).sqrt(),
        }
    }

    pub fn pass_through(input_dim: usize, param_dim: usize) -> Self {
        ModelConfig {
            summary: SummaryKind::PassThrough { input_dim },
            flow: FlowConfig {
                param_dim,
                cond_dim: input_dim,
                ..FlowConfig::default()
            },
            theta_center: 0.0,
            theta_scale: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.summary {
            SummaryKind::Network(c) => c.input_dim,
            SummaryKind::PassThrough { input_dim } => input_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.theta_center.is_finite() || !(self.theta_scale.is_finite() && self.theta_scale > 0.0) {
            return Err(Error::Config("theta scaling must be finite with a positive scale".into()));
        }
        let cond = match self.summary {
            SummaryKind::Network(c) => c.embed_dim,
            SummaryKind::PassThrough { input_dim } => input_dim,
        };
        if cond != self.flow.cond_dim {
            return Err(Error::Config(format!(
                "summary output width {cond} differs from flow condition width {}",
                self.flow.cond_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Amortizer {
    pub config: ModelConfig,
    summary: Option<SummaryNet>,
    pub flow: VelocityNet,
}

impl Amortizer {
    /// Registers freshly initialized parameters; initialization draws come
    /// from a stream derived from `seed`.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = stream(derive_seed(seed, "init"));
        let mut store = ParamStore::new();
        let summary = match config.summary {
            SummaryKind::Network(c) => Some(SummaryNet::register(&mut store, c, &mut rng)?),
            SummaryKind::PassThrough { .. } => None,
        };
        let flow = VelocityNet::register(&mut store, config.flow, &mut rng)?;
        Ok((Amortizer { config, summary, flow }, store))
    }

    pub fn bind<T: Scalar>(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let summary = match config.summary {
            SummaryKind::Network(c) => Some(SummaryNet::bind(store, c)?),
            SummaryKind::PassThrough { .. } => None,
        };
        let flow = VelocityNet::bind(store, config.flow)?;
        Ok(Amortizer { config, summary, flow })
    }

    pub fn param_dim(&self) -> usize {
        self.config.flow.param_dim
    }

    /// `B × C` condition node for a batch of valid-frame feature blocks.
    pub fn condition<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &[ArrayView2<T>],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        match &self.summary {
            Some(net) => net.forward(tape, store, features, mode),
            None => {
                let (x, segments) = stack_frames(features, self.config.input_dim())?;
                let x = tape.input(x);
                tape.segment_mean(x, segments)
            }
        }
    }

    /// Flow-matching loss for a batch; `theta` is `B × D`.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &[ArrayView2<T>],
        theta: ArrayView2<f64>,
        noise: &FlowNoise,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        if features.len() != theta.nrows() {
            return Err(Error::shape("feature and theta batch sizes differ"));
        }
        let cond = self.condition(tape, store, features, mode)?;
        let (c, s) = (self.config.theta_center, self.config.theta_scale);
        let scaled = theta.mapv(|v| (v - c) / s);
        cfm_loss(&self.flow, tape, store, scaled.view(), cond, noise, mode)
    }

    /// Evaluation-mode conditions, one row per sequence.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, features: &[ArrayView2<T>]) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let node = self.condition(&mut tape, store, features, &mut Mode::Eval)?;
        let out = tape.into_value(node);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("summary embedding is not finite".into()));
        }
        Ok(out)
    }

    /// Posterior draws for one observation's valid-frame features.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        features: ArrayView2<T>,
        count: usize,
        solver: Solver,
        rng: &mut R,
        observation: impl Into<String>,
    ) -> Result<PosteriorDraws> {
        let cond = self.embed(store, &[features])?;
        let field = self.flow.field(store, cond.row(0))?;
        let mut draws = sample_posterior(&field, count, solver, rng, observation)?;
        let (c, s) = (self.config.theta_center, self.config.theta_scale);
        draws.samples.mapv_inplace(|v| v * s + c);
        Ok(draws)
    }

    fn metadata(&self, extra: Value) -> Value {
        json!({ "kind": "amortizer", "model": self.config, "extra": extra })
    }

    pub fn save<T: Scalar>(
        &self,
        dir: &Path,
        store: &ParamStore<T>,
        optimizer: Option<&OptimizerState<T>>,
        extra: Value,
    ) -> Result<()> {
        save_checkpoint(dir, store, optimizer, self.metadata(extra))
    }

    #[allow(clippy::type_complexity)]
    pub fn load<T: Scalar>(
        dir: &Path,
    ) -> Result<(Self, ParamStore<T>, Option<OptimizerState<T>>, CheckpointManifest)> {
        let (store, opt, manifest) = load_checkpoint::<T>(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest.metadata["model"].clone())
            .map_err(|e| Error::artifact(dir, format!("model config: {e}")))?;
        let model = Amortizer::bind(config, &store)?;
        Ok((model, store, opt, manifest))
    }
}
