//! Central finite-difference checks of the composed model's gradients.

use brainsbi_core::flow::{FlowConfig, FlowNoise};
use brainsbi_core::model::{Amortizer, ModelConfig, SummaryKind};
use brainsbi_core::nn::{Mode, ParamStore, Tape};
use brainsbi_core::rng::stream;
use brainsbi_core::summary::SummaryConfig;
use ndarray::{Array2, ArrayView2};
use rand::Rng;

const H: f64 = 1e-5;

fn tiny() -> ModelConfig {
    ModelConfig {
        summary: SummaryKind::Network(SummaryConfig {
            input_dim: 4,
            width: 8,
            embed_dim: 8,
            dropout: 0.1,
        }),
        flow: FlowConfig {
            param_dim: 6,
            cond_dim: 8,
            time_dim: 8,
            hidden: 8,
            dropout: 0.05,
        },
        theta_center: 0.5,
        theta_scale: (1.0f64 / 12.0).sqrt(),
    }
}

fn loss(model: &Amortizer, store: &ParamStore<f64>, feats: &[Array2<f64>], theta: ArrayView2<f64>, noise: &FlowNoise) -> (f64, Tape<f64>, brainsbi_core::nn::NodeId) {
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let mut tape = Tape::new();
    let node = model.loss(&mut tape, store, &views, theta, noise, &mut Mode::Eval).unwrap();
    (tape.scalar(node), tape, node)
}

/// Returns the worst relative error over every parameter scalar.
fn max_relative_error(model: &Amortizer, store: &mut ParamStore<f64>, feats: &[Array2<f64>], theta: &Array2<f64>, noise: &FlowNoise) -> f64 {
    let (_, tape, node) = loss(model, store, feats, theta.view(), noise);
    tape.backward(node, store).unwrap();
    let analytic: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).as_slice().unwrap()[k];
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig + H;
            let up = loss(model, store, feats, theta.view(), noise).0;
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig - H;
            let down = loss(model, store, feats, theta.view(), noise).0;
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[pi].as_slice().unwrap()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn composed_model_gradients_match_finite_differences() {
    let (model, mut store) = Amortizer::init::<f64>(tiny(), 11).unwrap();
    let mut rng = stream(12);
    let feats: Vec<Array2<f64>> = [3usize, 5, 1]
        .iter()
        .map(|&t| Array2::from_shape_simple_fn((t, 4), || rng.random_range(-1.5..1.5)))
        .collect();
    let theta = Array2::from_shape_simple_fn((3, 6), || rng.random::<f64>());
    let noise = FlowNoise::draw(3, 6, &mut rng);
    let worst = max_relative_error(&model, &mut store, &feats, &theta, &noise);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn pass_through_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        flow: FlowConfig {
            hidden: 8,
            ..ModelConfig::pass_through(5, 6).flow
        },
        ..ModelConfig::pass_through(5, 6)
    };
    let (model, mut store) = Amortizer::init::<f64>(cfg, 2).unwrap();
    let mut rng = stream(3);
    let feats: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_simple_fn((1, 5), || rng.random_range(-1.0..1.0))).collect();
    let theta = Array2::from_shape_simple_fn((4, 6), || rng.random::<f64>());
    let noise = FlowNoise::draw(4, 6, &mut rng);
    let worst = max_relative_error(&model, &mut store, &feats, &theta, &noise);
    assert!(worst < 1e-4, "max relative error {worst}");
}
