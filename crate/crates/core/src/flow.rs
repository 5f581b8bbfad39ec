//! Conditional flow matching: the linear noise path, the velocity network,
//! the training loss and the reverse-time ODE sampler.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{add_dense, bind_dense, Dense};
use crate::nn::{gelu, sin_time_embed, Mode, NodeId, ParamStore, Scalar, Tape};
use crate::params::NUM_DIMS;

/// A point on the path between a parameter vector (`t = 0`) and noise
/// (`t = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub theta_t: Array1<f64>,
    pub t: f64,
}

/// `θ_t = (1 − t)θ + tε` and its target velocity `ε − θ`.
pub fn construct_path(
    theta: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    t: f64,
) -> Result<(FlowState, Array1<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            value: t,
            domain: "[0, 1]",
        });
    }
    if theta.len() != eps.len() {
        return Err(Error::shape("theta and eps differ in length"));
    }
    let theta_t = if t == 1.0 {
        eps.to_owned()
    } else {
        &theta * (1.0 - t) + &eps * t
    };
    Ok((FlowState { theta_t, t }, &eps - &theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub param_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            param_dim: NUM_DIMS,
            cond_dim: 128,
            time_dim: 8,
            hidden: 128,
            dropout: 0.05,
        }
    }
}

/// `û(θ_t, h, t)`: an MLP over `[θ_t; h; embed(t)]`.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: FlowConfig,
    hidden1: Dense,
    hidden2: Dense,
    out: Dense,
}

impl VelocityNet {
    fn input_dim(c: &FlowConfig) -> usize {
        c.param_dim + c.cond_dim + c.time_dim
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.param_dim == 0 || config.hidden == 0 || config.time_dim == 0 || config.time_dim % 2 != 0 {
            return Err(Error::Config("flow widths must be positive and the time embedding even".into()));
        }
        let h = config.hidden;
        Ok(VelocityNet {
            config,
            hidden1: add_dense(store, "flow.hidden1", Self::input_dim(&config), h, rng)?,
            hidden2: add_dense(store, "flow.hidden2", h, h, rng)?,
            out: add_dense(store, "flow.out", h, config.param_dim, rng)?,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: FlowConfig) -> Result<Self> {
        let h = config.hidden;
        Ok(VelocityNet {
            config,
            hidden1: bind_dense(store, "flow.hidden1", Self::input_dim(&config), h)?,
            hidden2: bind_dense(store, "flow.hidden2", h, h)?,
            out: bind_dense(store, "flow.out", h, config.param_dim)?,
        })
    }

    fn time_features<T: Scalar>(&self, t: &[f64]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((t.len(), self.config.time_dim));
        for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
            row.assign(&sin_time_embed::<T>(ti, self.config.time_dim)?);
        }
        Ok(out)
    }

    /// Velocity for a batch: `theta_t` is `B × D`, `cond` a `B × C` node,
    /// `t` one time per row.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        theta_t: Array2<T>,
        cond: NodeId,
        t: &[f64],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let b = theta_t.nrows();
        if t.len() != b || tape.value(cond).nrows() != b {
            return Err(Error::shape("flow batch rows disagree"));
        }
        if theta_t.ncols() != self.config.param_dim || tape.value(cond).ncols() != self.config.cond_dim {
            return Err(Error::shape(format!(
                "flow input {}+{} does not match configured {}+{}",
                theta_t.ncols(),
                tape.value(cond).ncols(),
                self.config.param_dim,
                self.config.cond_dim
            )));
        }
        let x = tape.input(theta_t);
        let temb = tape.input(self.time_features(t)?);
        let z = tape.concat(&[x, cond, temb])?;
        let rate = self.config.dropout;
        let z = tape.dense(store, z, self.hidden1.w, Some(self.hidden1.b))?;
        let z = tape.gelu(z);
        let z = tape.dropout(z, rate, mode)?;
        let z = tape.dense(store, z, self.hidden2.w, Some(self.hidden2.b))?;
        let z = tape.gelu(z);
        let z = tape.dropout(z, rate, mode)?;
        tape.dense(store, z, self.out.w, Some(self.out.b))
    }

    /// Evaluation-mode field for one fixed condition `h`. The condition's
    /// contribution to the first layer is computed once.
    pub fn field<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, cond: ArrayView1<T>) -> Result<ConditionedField<'a, T>> {
        let c = &self.config;
        if cond.len() != c.cond_dim {
            return Err(Error::shape(format!("condition has width {}, expected {}", cond.len(), c.cond_dim)));
        }
        let w1 = store.matrix(self.hidden1.w)?;
        let bias = cond.dot(&w1.slice(s![c.param_dim..c.param_dim + c.cond_dim, ..])) + &store.vector(self.hidden1.b)?;
        Ok(ConditionedField {
            net: self,
            store,
            bias,
        })
    }
}

/// A dynamics `dθ/dt = v(θ, t)` over a batch of states.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, theta: ArrayView2<f64>, t: f64) -> Result<Array2<f64>>;
}

pub struct ConditionedField<'a, T> {
    net: &'a VelocityNet,
    store: &'a ParamStore<T>,
    bias: Array1<T>,
}

impl<T: Scalar> VelocityField for ConditionedField<'_, T> {
    fn dim(&self) -> usize {
        self.net.config.param_dim
    }

    fn velocity(&self, theta: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let c = &self.net.config;
        let w1 = self.store.matrix(self.net.hidden1.w)?;
        let temb = sin_time_embed::<T>(t, c.time_dim)?;
        let row_bias = temb.dot(&w1.slice(s![c.param_dim + c.cond_dim.., ..])) + &self.bias;
        let x = theta.mapv(T::of);
        let mut z = x.dot(&w1.slice(s![..c.param_dim, ..]));
        z += &row_bias;
        z.mapv_inplace(gelu);
        let mut z = z.dot(&self.store.matrix(self.net.hidden2.w)?) + &self.store.vector(self.net.hidden2.b)?;
        z.mapv_inplace(gelu);
        let out = z.dot(&self.store.matrix(self.net.out.w)?) + &self.store.vector(self.net.out.b)?;
        Ok(out.mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
    }
}

/// Per-item noise and times for the flow loss, drawable once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNoise {
    /// `B × D` standard normals.
    pub eps: Array2<f64>,
    /// `t ~ U(0, 1)` per item.
    pub t: Vec<f64>,
}

impl FlowNoise {
    pub fn draw<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let eps = Array2::from_shape_simple_fn((rows, dim), || {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        let t = (0..rows).map(|_| rng.random::<f64>()).collect();
        FlowNoise { eps, t }
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn select(&self, rows: &[usize]) -> FlowNoise {
        FlowNoise {
            eps: self.eps.select(Axis(0), rows),
            t: rows.iter().map(|&r| self.t[r]).collect(),
        }
    }
}

/// Flow-matching loss `mean_b ‖û(θ_t, h, t) − (ε − θ)‖²` with the given
/// noise, recorded on `tape`. `theta` is `B × D`; `cond` a `B × C` node.
pub fn cfm_loss<T: Scalar>(
    net: &VelocityNet,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    theta: ArrayView2<f64>,
    cond: NodeId,
    noise: &FlowNoise,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    if theta.nrows() == 0 {
        return Err(Error::EmptyRequest("flow loss requires a nonempty batch"));
    }
    if noise.eps.dim() != theta.dim() || noise.rows() != theta.nrows() {
        return Err(Error::shape("noise shape does not match theta"));
    }
    let mut theta_t = Array2::zeros(theta.raw_dim());
    let mut target = Array2::zeros(theta.raw_dim());
    for i in 0..theta.nrows() {
        let (state, v) = construct_path(theta.row(i), noise.eps.row(i), noise.t[i])?;
        theta_t.row_mut(i).assign(&state.theta_t);
        target.row_mut(i).assign(&v);
    }
    let pred = net.forward(tape, store, theta_t.mapv(T::of), cond, &noise.t, mode)?;
    let loss = tape.squared_error(pred, target.mapv(T::of))?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("flow-matching loss is not finite".into()));
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Solver {
    pub scheme: Scheme,
    pub steps: usize,
}

impl Default for Solver {
    fn default() -> Self {
        Solver {
            scheme: Scheme::Rk4,
            steps: 32,
        }
    }
}

fn check_finite(state: &Array2<f64>, step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver { step })
    }
}

/// Integrates from `t = 1` to `t = 0` on a uniform grid.
pub fn integrate(field: &dyn VelocityField, init: Array2<f64>, solver: Solver) -> Result<Array2<f64>> {
    if solver.steps == 0 {
        return Err(Error::Config("solver needs at least one step".into()));
    }
    if init.ncols() != field.dim() {
        return Err(Error::shape("initial state width differs from the field dimension"));
    }
    let n = solver.steps as f64;
    let mut x = init;
    for step in 0..solver.steps {
        let t0 = 1.0 - step as f64 / n;
        let t1 = 1.0 - (step + 1) as f64 / n;
        let dt = t1 - t0;
        match solver.scheme {
            Scheme::Euler => {
                let k1 = field.velocity(x.view(), t0)?;
                x.scaled_add(dt, &k1);
            }
            Scheme::Rk4 => {
                let mid = 0.5 * (t0 + t1);
                let k1 = field.velocity(x.view(), t0)?;
                let k2 = field.velocity((&x + &(&k1 * (0.5 * dt))).view(), mid)?;
                let k3 = field.velocity((&x + &(&k2 * (0.5 * dt))).view(), mid)?;
                let k4 = field.velocity((&x + &(&k3 * dt)).view(), t1)?;
                let incr = k1 + &k2 * 2.0 + &k3 * 2.0 + k4;
                x.scaled_add(dt / 6.0, &incr);
            }
        }
        check_finite(&x, step)?;
    }
    Ok(x)
}

/// Posterior samples for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// `S × D`.
    pub samples: Array2<f64>,
    pub observation: String,
    pub solver: Solver,
}

impl PosteriorDraws {
    pub fn count(&self) -> usize {
        self.samples.nrows()
    }
}

/// Draws `count` samples by integrating Gaussian starts back to `t = 0`.
pub fn sample_posterior<R: Rng + ?Sized>(
    field: &dyn VelocityField,
    count: usize,
    solver: Solver,
    rng: &mut R,
    observation: impl Into<String>,
) -> Result<PosteriorDraws> {
    if count == 0 {
        return Err(Error::EmptyRequest("posterior sampling requires at least one sample"));
    }
    let init = Array2::from_shape_simple_fn((count, field.dim()), || {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let samples = integrate(field, init, solver)?;
    Ok(PosteriorDraws {
        samples,
        observation: observation.into(),
        solver,
    })
}

pub fn posterior_mean(draws: &PosteriorDraws) -> Result<Array1<f64>> {
    draws
        .samples
        .mean_axis(Axis(0))
        .ok_or(Error::EmptyRequest("posterior mean of zero samples"))
}
