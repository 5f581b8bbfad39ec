//! The emulator `X = M(S; φ)`: a pluggable interface plus a synthetic brain
//! emulator whose ground truth is known.
//!
//! The synthetic emulator maps `(θ, topic)` to a vertex pattern
//! `b = W₂ · tanh(W₁ · [θ; θ⊙θ; onehot(topic)])`, adds a θ-dependent
//! sinusoidal temporal mode along a fixed direction, and overlays AR(1)
//! noise. `W₁`, `W₂` and the direction are drawn once from `params.seed`.

mod dataset;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Dimension, ScoreVector, Topic, NUM_DIMS, NUM_TOPICS};
use crate::rng::{derive_seed, stream, substream, Stream};
use crate::stimulus::StimulusSet;

pub use dataset::{Dataset, DatasetManifest, SampleRecord, DATASET_SCHEMA_VERSION};

/// Common training length all sequences are padded or truncated to.
pub const T_MAX: usize = 48;

const FEATURES: usize = 2 * NUM_DIMS + NUM_TOPICS;
/// Gain of the first map; puts tanh pre-activations around unit scale.
const W1_GAIN: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorParams {
    /// Seed of the fixed emulator weights (the role of φ).
    pub seed: u64,
    pub vertices: usize,
    pub hidden: usize,
    pub noise_sigma: f64,
    pub ar_rho: f64,
    /// Amplitude of the temporal mode.
    pub amplitude: f64,
    /// Scale of the second map, i.e. of the θ-dependent pattern.
    pub signal_scale: f64,
    pub t_min: usize,
    pub t_max_raw: usize,
}

impl Default for EmulatorParams {
    fn default() -> Self {
        EmulatorParams {
            seed: 0,
            vertices: 256,
            hidden: 64,
            noise_sigma: 0.1,
            ar_rho: 0.9,
            amplitude: 0.5,
            signal_scale: 0.3,
            t_min: 8,
            t_max_raw: 60,
        }
    }
}

impl EmulatorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("emulator: {m}")));
        if self.vertices == 0 || self.hidden == 0 {
            return bad("vertices and hidden must be positive");
        }
        if self.t_min == 0 || self.t_min > self.t_max_raw {
            return bad("require 1 <= t_min <= t_max_raw");
        }
        if !(0.0..1.0).contains(&self.ar_rho) {
            return bad("ar_rho must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !(self.amplitude >= 0.0) || !(self.signal_scale >= 0.0) {
            return bad("noise_sigma, amplitude and signal_scale must be non-negative");
        }
        Ok(())
    }
}

/// Anything that turns a latent score vector and topic into a `T × V`
/// response sequence.
pub trait Emulator: Sync {
    fn vertices(&self) -> usize;
    fn emulate(&self, theta: &ScoreVector, topic: Topic, rng: &mut Stream) -> Result<Array2<f32>>;
}

pub struct SyntheticEmulator {
    params: EmulatorParams,
    w1: Array2<f64>,
    w2: Array2<f64>,
    direction: Array1<f64>,
}

impl SyntheticEmulator {
    pub fn new(params: EmulatorParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(derive_seed(params.seed, "emulator-weights"));
        let mut normal = |n: usize, m: usize, scale: f64| {
            Array2::from_shape_simple_fn((n, m), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let w1 = normal(params.hidden, FEATURES, W1_GAIN / (FEATURES as f64).sqrt());
        let w2 = normal(params.vertices, params.hidden, params.signal_scale / (params.hidden as f64).sqrt());
        let direction = normal(params.vertices, 1, 1.0).column(0).to_owned();
        Ok(SyntheticEmulator {
            params,
            w1,
            w2,
            direction,
        })
    }

    pub fn params(&self) -> &EmulatorParams {
        &self.params
    }

    /// Noise-free, time-invariant pattern `b(θ, topic)`.
    pub fn base_pattern(&self, theta: &ScoreVector, topic: Topic) -> Array1<f64> {
        let mut f = Array1::zeros(FEATURES);
        for (d, &v) in theta.values().iter().enumerate() {
            f[d] = v;
            f[NUM_DIMS + d] = v * v;
        }
        f[2 * NUM_DIMS + topic.index()] = 1.0;
        let h = self.w1.dot(&f).mapv(f64::tanh);
        self.w2.dot(&h)
    }
}

impl Emulator for SyntheticEmulator {
    fn vertices(&self) -> usize {
        self.params.vertices
    }

    fn emulate(&self, theta: &ScoreVector, topic: Topic, rng: &mut Stream) -> Result<Array2<f32>> {
        let p = &self.params;
        let t_len = rng.random_range(p.t_min..=p.t_max_raw);
        let base = self.base_pattern(theta, topic);
        let freq = 1.0 + theta.get(Dimension::Arousal);
        let stationary = p.noise_sigma / (1.0 - p.ar_rho * p.ar_rho).sqrt();
        let mut eta: Array1<f64> =
            Array1::from_shape_simple_fn(p.vertices, || {
                let z: f64 = StandardNormal.sample(&mut *rng);
                stationary * z
            });
        let mut frames = Array2::zeros((t_len, p.vertices));
        for t in 0..t_len {
            if t > 0 {
                for e in eta.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    *e = p.ar_rho * *e + p.noise_sigma * z;
                }
            }
            let phase = (2.0 * std::f64::consts::PI * t as f64 * freq / t_len as f64).sin();
            let wave = p.amplitude * phase;
            for (((x, &b), &d), &e) in frames
                .row_mut(t)
                .iter_mut()
                .zip(base.iter())
                .zip(self.direction.iter())
                .zip(eta.iter())
            {
                *x = (b + wave * d + e) as f32;
            }
        }
        Ok(frames)
    }
}

/// A response sequence padded or truncated to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSequence {
    /// `t_max × V`; rows past the valid prefix are zero.
    pub frames: Array2<f32>,
    pub mask: Vec<bool>,
    /// Length before padding or truncation.
    pub length: usize,
}

impl ResponseSequence {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn valid_frames(&self) -> ArrayView2<'_, f32> {
        self.frames.slice(s![..self.valid_len(), ..])
    }
}

/// Keeps the first `t_max` frames, or zero-pads up to `t_max`.
pub fn pad_or_truncate(frames: ArrayView2<f32>, t_max: usize) -> Result<ResponseSequence> {
    let t = frames.nrows();
    if t == 0 {
        return Err(Error::EmptySequence("response has no frames"));
    }
    if t_max == 0 {
        return Err(Error::Config("t_max must be positive".into()));
    }
    let keep = t.min(t_max);
    let mut out = Array2::zeros((t_max, frames.ncols()));
    out.slice_mut(s![..keep, ..]).assign(&frames.slice(s![..keep, ..]));
    Ok(ResponseSequence {
        frames: out,
        mask: (0..t_max).map(|i| i < keep).collect(),
        length: t,
    })
}

/// One simulated example `(X_n, θ_n, S_n)`; frames are unpadded.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub topic: Topic,
    pub theta: ScoreVector,
    pub frames: Array2<f32>,
    pub stimuli: Option<StimulusSet>,
}

/// Optional text stage run before the emulator.
pub type StimulusGenerator<'a> =
    dyn Fn(&ScoreVector, Topic, &mut Stream) -> Result<StimulusSet> + Sync + 'a;

/// Simulates every assignment entry. Sample `i` draws emulator noise from
/// substream `i` of `seed` and its stimuli from substream `i` of a derived
/// seed, so results do not depend on scheduling.
pub fn simulate_dataset(
    assignment: &[(Topic, ScoreVector)],
    emulator: &dyn Emulator,
    generator: Option<&StimulusGenerator<'_>>,
    seed: u64,
) -> Result<Vec<Simulation>> {
    if assignment.is_empty() {
        return Err(Error::EmptyRequest("simulate_dataset requires a nonempty assignment"));
    }
    let text_seed = derive_seed(seed, "stimuli");
    assignment
        .par_iter()
        .enumerate()
        .map(|(i, &(topic, theta))| {
            let stimuli = generator
                .map(|g| g(&theta, topic, &mut substream(text_seed, i as u64)))
                .transpose()?;
            let frames = emulator.emulate(&theta, topic, &mut substream(seed, i as u64))?;
            Ok(Simulation {
                topic,
                theta,
                frames,
                stimuli,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{balanced_assignment, sample_prior};

    fn emulator(params: EmulatorParams) -> SyntheticEmulator {
        SyntheticEmulator::new(params).unwrap()
    }

    #[test]
    fn noiseless_static_frames_equal_base_pattern() {
        let e = emulator(EmulatorParams {
            noise_sigma: 0.0,
            amplitude: 0.0,
            ..Default::default()
        });
        let theta = ScoreVector::new([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let frames = e.emulate(&theta, Topic::Science, &mut stream(1)).unwrap();
        let base = e.base_pattern(&theta, Topic::Science).mapv(|v| v as f32);
        for row in frames.rows() {
            assert_eq!(row, base);
        }
    }

    #[test]
    fn emulate_is_deterministic_and_length_bounded() {
        let e = emulator(EmulatorParams::default());
        let theta = ScoreVector::splat(0.4).unwrap();
        let a = e.emulate(&theta, Topic::Culture, &mut stream(8)).unwrap();
        let b = e.emulate(&theta, Topic::Culture, &mut stream(8)).unwrap();
        assert_eq!(a, b);
        assert!((8..=60).contains(&a.nrows()));
        assert_eq!(a.ncols(), 256);
    }

    #[test]
    fn padding_rules() {
        let f = Array2::from_shape_fn((48, 3), |(i, j)| (i * 3 + j) as f32 + 1.0);
        let s = pad_or_truncate(f.view(), 48).unwrap();
        assert_eq!(s.frames, f);
        assert!(s.mask.iter().all(|m| *m));

        let f = Array2::from_elem((3, 2), 1.0f32);
        let s = pad_or_truncate(f.view(), 5).unwrap();
        assert_eq!(s.mask, vec![true, true, true, false, false]);
        assert!(s.frames.slice(s![3.., ..]).iter().all(|v| *v == 0.0));
        assert_eq!(s.length, 3);
        assert_eq!(s.valid_frames(), f);

        let f = Array2::from_shape_fn((50, 2), |(i, _)| i as f32);
        let s = pad_or_truncate(f.view(), 48).unwrap();
        assert_eq!(s.frames.nrows(), 48);
        assert_eq!(s.frames[[47, 0]], 47.0);
        assert_eq!(s.length, 50);
        assert_eq!(s.valid_len(), 48);

        assert!(matches!(
            pad_or_truncate(Array2::<f32>::zeros((0, 2)).view(), 48),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(SyntheticEmulator::new(EmulatorParams { ar_rho: 1.0, ..Default::default() }).is_err());
        assert!(SyntheticEmulator::new(EmulatorParams { t_min: 70, ..Default::default() }).is_err());
        assert!(SyntheticEmulator::new(EmulatorParams { vertices: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn adjacent_frames_are_highly_correlated() {
        let e = emulator(EmulatorParams::default());
        let assignment = balanced_assignment(100, &mut stream(3)).unwrap();
        let sims = simulate_dataset(&assignment, &e, None, 17).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &sims {
            for t in 1..s.frames.nrows() {
                let a: Vec<f64> = s.frames.row(t - 1).iter().map(|v| *v as f64).collect();
                let b: Vec<f64> = s.frames.row(t).iter().map(|v| *v as f64).collect();
                total += pearson_oracle(&a, &b);
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean >= 0.9, "mean adjacent-frame correlation {mean}");
    }

    fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn base_pattern_identifies_theta_by_nearest_neighbour() {
        let e = emulator(EmulatorParams::default());
        let bank = sample_prior(2000, &mut stream(21)).unwrap();
        let topic = Topic::Weather;
        let patterns: Vec<Array1<f64>> = bank.iter().map(|t| e.base_pattern(t, topic)).collect();
        let mut rng = stream(22);
        for (i, theta) in bank.iter().enumerate().step_by(20) {
            let noisy = &patterns[i]
                + &Array1::from_shape_simple_fn(256, || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    1e-3 * z
                });
            let nearest = patterns
                .iter()
                .enumerate()
                .map(|(j, p)| (j, (p - &noisy).mapv(|v| v * v).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            for d in 0..NUM_DIMS {
                assert!((bank[nearest].values()[d] - theta.values()[d]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn dataset_size_and_optional_stimuli() {
        let e = emulator(EmulatorParams { vertices: 16, hidden: 8, ..Default::default() });
        let assignment = balanced_assignment(3, &mut stream(0)).unwrap();
        let sims = simulate_dataset(&assignment, &e, None, 5).unwrap();
        assert_eq!(sims.len(), 30);
        assert!(sims.iter().all(|s| s.stimuli.is_none()));
        let gen = |theta: &ScoreVector, topic: Topic, rng: &mut Stream| {
            Ok(crate::stimulus::generate_mock(theta, topic, rng))
        };
        let with_text = simulate_dataset(&assignment, &e, Some(&gen), 5).unwrap();
        assert!(with_text.iter().all(|s| s.stimuli.is_some()));
        // The text stage does not perturb the emulator draws.
        assert_eq!(sims[4].frames, with_text[4].frames);
        assert!(simulate_dataset(&[], &e, None, 5).is_err());
    }
}
