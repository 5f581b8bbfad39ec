//! Glue between simulated datasets and the model: truncation to `T_max`,
//! feature extraction and batch posterior sampling.

use ndarray::{s, Array1, ArrayView2};
use rayon::prelude::*;

use crate::emulator::Simulation;
use crate::error::{Error, Result};
use crate::flow::{PosteriorDraws, Solver};
use crate::model::Amortizer;
use crate::nn::ParamStore;
use crate::rng::substream;
use crate::summary::Preprocessor;
use crate::trainer::Example;

/// The valid prefix (at most `t_max` frames) of every simulation.
pub fn valid_prefixes(sims: &[Simulation], t_max: usize) -> Vec<ArrayView2<'_, f32>> {
    sims.iter()
        .map(|s| s.frames.slice(s![..s.frames.nrows().min(t_max), ..]))
        .collect()
}

pub fn fit_preprocessor(sims: &[Simulation], t_max: usize, k: usize, dataset_hash: &str) -> Result<Preprocessor> {
    if sims.is_empty() {
        return Err(Error::EmptyRequest("no simulations to fit the preprocessor on"));
    }
    Preprocessor::fit(&valid_prefixes(sims, t_max), k, dataset_hash)
}

pub fn build_examples(sims: &[Simulation], pre: &Preprocessor, t_max: usize) -> Result<Vec<Example>> {
    sims.par_iter()
        .zip(valid_prefixes(sims, t_max))
        .map(|(sim, frames)| {
            Ok(Example {
                features: pre.features::<f32>(frames)?,
                theta: Array1::from(sim.theta.values().to_vec()),
            })
        })
        .collect()
}

/// Posterior draws for every example. Observation `i` starts from
/// substream `i` of `seed`.
pub fn sample_all(
    model: &Amortizer,
    store: &ParamStore<f32>,
    examples: &[Example],
    count: usize,
    solver: Solver,
    seed: u64,
) -> Result<Vec<PosteriorDraws>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            model.sample(
                store,
                ex.features.view(),
                count,
                solver,
                &mut substream(seed, i as u64),
                format!("sample_{i:06}"),
            )
        })
        .collect()
}
