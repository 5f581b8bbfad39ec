//! Summary backbone: vertex-wise standardization, a fixed PCA projection,
//! a residual MLP applied per frame, masked mean pooling and a small head.

mod pca;

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::layers::{add_dense, add_norm, bind_dense, bind_norm, Dense, Norm};
use crate::nn::{load_checkpoint, save_checkpoint, Mode, NodeId, ParamStore, Scalar, Tape};

pub use pca::{fit_pca, PcaBasis, PcaMethod, COVARIANCE_LIMIT, GRAM_LIMIT, POWER_STEPS};

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_COMPONENTS: usize = 32;
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn vertices(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, frames: ArrayView2<f32>) -> Result<Array2<f64>> {
        if frames.ncols() != self.vertices() {
            return Err(Error::shape(format!(
                "frames have {} vertices, standardizer expects {}",
                frames.ncols(),
                self.vertices()
            )));
        }
        let mut z = frames.mapv(f64::from);
        z -= &self.mean;
        z /= &self.std;
        Ok(z)
    }
}

/// Per-vertex mean and population standard deviation over every frame of
/// every sequence.
pub fn fit_standardizer(sequences: &[ArrayView2<f32>]) -> Result<Standardizer> {
    let v = sequences
        .first()
        .map(|s| s.ncols())
        .ok_or(Error::EmptyRequest("standardizer requires at least one sequence"))?;
    if sequences.iter().any(|s| s.ncols() != v) {
        return Err(Error::shape("sequences differ in vertex count"));
    }
    let n: usize = sequences.iter().map(|s| s.nrows()).sum();
    if n == 0 {
        return Err(Error::EmptySequence("standardizer saw no frames"));
    }
    let mut mean = Array1::<f64>::zeros(v);
    for s in sequences {
        for row in s.rows() {
            mean.zip_mut_with(&row, |m, &x| *m += f64::from(x));
        }
    }
    mean /= n as f64;
    let mut var = Array1::<f64>::zeros(v);
    for s in sequences {
        for row in s.rows() {
            ndarray::Zip::from(&mut var)
                .and(&row)
                .and(&mean)
                .for_each(|acc, &x, &m| *acc += (f64::from(x) - m).powi(2));
        }
    }
    let std = var.mapv(|s| (s / n as f64).sqrt().max(STD_FLOOR));
    Ok(Standardizer { mean, std })
}

/// The non-trainable front end: standardization followed by PCA.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub standardizer: Standardizer,
    pub pca: PcaBasis,
    /// Hash of the dataset the front end was fit on.
    pub dataset_hash: String,
}

impl Preprocessor {
    pub fn fit(sequences: &[ArrayView2<f32>], k: usize, dataset_hash: impl Into<String>) -> Result<Self> {
        let standardizer = fit_standardizer(sequences)?;
        let blocks = sequences
            .iter()
            .map(|s| standardizer.apply(s.view()))
            .collect::<Result<Vec<_>>>()?;
        let pca = fit_pca(&blocks, k)?;
        Ok(Preprocessor {
            standardizer,
            pca,
            dataset_hash: dataset_hash.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.pca.k()
    }

    /// `T × V` raw frames to `T × k` features.
    pub fn features<T: Scalar>(&self, frames: ArrayView2<f32>) -> Result<Array2<T>> {
        let z = self.standardizer.apply(frames)?;
        Ok(self.pca.project(z.view()).mapv(T::of))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = ParamStore::<f64>::new();
        store.add("standardizer.mean", self.standardizer.mean.clone().into_dyn())?;
        store.add("standardizer.std", self.standardizer.std.clone().into_dyn())?;
        store.add("pca.components", self.pca.components.clone().into_dyn())?;
        store.add("pca.explained_variance", self.pca.explained_variance.clone().into_dyn())?;
        let meta = json!({
            "kind": "preprocessor",
            "pca_method": self.pca.method,
            "dataset_hash": self.dataset_hash,
        });
        save_checkpoint(dir, &store, None, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, _, manifest) = load_checkpoint::<f64>(dir)?;
        let get = |name: &str| -> Result<ArrayD<f64>> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::artifact(dir, format!("missing tensor {name}")))?;
            Ok(store.value(id).clone())
        };
        let vec = |a: ArrayD<f64>| a.into_dimensionality::<Ix1>().map_err(|e| Error::artifact(dir, e.to_string()));
        let method: PcaMethod = serde_json::from_value(manifest.metadata["pca_method"].clone())?;
        let dataset_hash = manifest.metadata["dataset_hash"]
            .as_str()
            .ok_or_else(|| Error::artifact(dir, "missing dataset_hash"))?
            .to_string();
        let pre = Preprocessor {
            standardizer: Standardizer {
                mean: vec(get("standardizer.mean")?)?,
                std: vec(get("standardizer.std")?)?,
            },
            pca: PcaBasis {
                components: get("pca.components")?
                    .into_dimensionality::<Ix2>()
                    .map_err(|e| Error::artifact(dir, e.to_string()))?,
                explained_variance: vec(get("pca.explained_variance")?)?,
                method,
            },
            dataset_hash,
        };
        if pre.pca.vertices() != pre.standardizer.vertices() {
            return Err(Error::artifact(dir, "PCA and standardizer disagree on vertex count"));
        }
        Ok(pre)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    /// PCA feature width `k`.
    pub input_dim: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

impl SummaryConfig {
    pub fn new(input_dim: usize) -> Self {
        SummaryConfig {
            input_dim,
            width: 128,
            embed_dim: EMBED_DIM,
            dropout: 0.1,
        }
    }
}

/// Parameter handles for the trainable part of the backbone.
#[derive(Debug, Clone)]
pub struct SummaryNet {
    pub config: SummaryConfig,
    block_norm: Norm,
    block_in: Dense,
    block_out: Dense,
    skip: Dense,
    head_norm: Norm,
    head_in: Dense,
    head_out: Dense,
}

impl SummaryNet {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: SummaryConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let SummaryConfig {
            input_dim: k,
            width: w,
            embed_dim: e,
            ..
        } = config;
        if k == 0 || w == 0 || e == 0 {
            return Err(Error::Config("summary widths must be positive".into()));
        }
        Ok(SummaryNet {
            config,
            block_norm: add_norm(store, "summary.block.norm", k)?,
            block_in: add_dense(store, "summary.block.dense_in", k, w, rng)?,
            block_out: add_dense(store, "summary.block.dense_out", w, w, rng)?,
            skip: add_dense(store, "summary.skip", k, w, rng)?,
            head_norm: add_norm(store, "summary.head.norm", w)?,
            head_in: add_dense(store, "summary.head.dense_in", w, w, rng)?,
            head_out: add_dense(store, "summary.head.dense_out", w, e, rng)?,
        })
    }

    /// Re-attaches to parameters already present in `store` (for example
    /// after loading a checkpoint).
    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: SummaryConfig) -> Result<Self> {
        let SummaryConfig {
            input_dim: k,
            width: w,
            embed_dim: e,
            ..
        } = config;
        Ok(SummaryNet {
            config,
            block_norm: bind_norm(store, "summary.block.norm", k)?,
            block_in: bind_dense(store, "summary.block.dense_in", k, w)?,
            block_out: bind_dense(store, "summary.block.dense_out", w, w)?,
            skip: bind_dense(store, "summary.skip", k, w)?,
            head_norm: bind_norm(store, "summary.head.norm", w)?,
            head_in: bind_dense(store, "summary.head.dense_in", w, w)?,
            head_out: bind_dense(store, "summary.head.dense_out", w, e)?,
        })
    }

    /// Embeds a batch of sequences, each given as its valid `T_i × k`
    /// features. Returns a `B × embed_dim` node.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &[ArrayView2<T>],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let (x, segments) = stack_frames(features, self.config.input_dim)?;
        let rate = self.config.dropout;
        let x = tape.input(x);
        let h = tape.layer_norm(store, x, self.block_norm.gain, self.block_norm.offset)?;
        let h = tape.dense(store, h, self.block_in.w, Some(self.block_in.b))?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, rate, mode)?;
        let h = tape.dense(store, h, self.block_out.w, Some(self.block_out.b))?;
        let h = tape.dropout(h, rate, mode)?;
        let skip = tape.dense(store, x, self.skip.w, Some(self.skip.b))?;
        let h = tape.add(h, skip)?;
        let pooled = tape.segment_mean(h, segments)?;
        let g = tape.layer_norm(store, pooled, self.head_norm.gain, self.head_norm.offset)?;
        let g = tape.dense(store, g, self.head_in.w, Some(self.head_in.b))?;
        let g = tape.gelu(g);
        let g = tape.dropout(g, rate, mode)?;
        tape.dense(store, g, self.head_out.w, Some(self.head_out.b))
    }
}

/// Row-stacks per-sequence feature blocks and records each block's rows.
pub(crate) fn stack_frames<T: Scalar>(
    features: &[ArrayView2<T>],
    width: usize,
) -> Result<(Array2<T>, Vec<Range<usize>>)> {
    if features.is_empty() {
        return Err(Error::EmptyRequest("summary requires at least one sequence"));
    }
    let mut segments = Vec::with_capacity(features.len());
    let mut start = 0;
    for f in features {
        if f.ncols() != width {
            return Err(Error::shape(format!(
                "feature width {} does not match summary input {width}",
                f.ncols()
            )));
        }
        if f.nrows() == 0 {
            return Err(Error::EmptySequence("sequence has no valid frames"));
        }
        segments.push(start..start + f.nrows());
        start += f.nrows();
    }
    let x = ndarray::concatenate(Axis(0), features).expect("widths checked");
    Ok((x, segments))
}

/// `h(X)` for one observation: only the valid (masked-in) frames of
/// `frames` are read.
pub fn summarize<T: Scalar>(
    frames: ArrayView2<f32>,
    mask: &[bool],
    pre: &Preprocessor,
    net: &SummaryNet,
    store: &ParamStore<T>,
    mode: &mut Mode<'_>,
) -> Result<Array1<T>> {
    if mask.len() != frames.nrows() {
        return Err(Error::shape("mask length differs from frame count"));
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::EmptySequence("mask selects no frames"));
    }
    let valid = frames.select(Axis(0), &rows);
    let feats = pre.features::<T>(valid.view())?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, &[feats.view()], mode)?;
    let emb = tape.into_value(out).row(0).to_owned();
    if emb.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("summary embedding is not finite".into()));
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::pad_or_truncate;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn frames(t: usize, v: usize, seed: u64) -> Array2<f32> {
        let mut rng = stream(seed);
        Array2::from_shape_simple_fn((t, v), || {
            let z: f32 = StandardNormal.sample(&mut rng);
            z
        })
    }

    fn setup(v: usize, k: usize) -> (Preprocessor, SummaryNet, ParamStore<f32>) {
        let train: Vec<_> = (0..6).map(|i| frames(10 + i, v, 100 + i as u64)).collect();
        let views: Vec<_> = train.iter().map(|f| f.view()).collect();
        let pre = Preprocessor::fit(&views, k, "test").unwrap();
        let mut store = ParamStore::new();
        let net = SummaryNet::register(&mut store, SummaryConfig::new(k), &mut stream(1)).unwrap();
        (pre, net, store)
    }

    #[test]
    fn standardizer_floors_constant_vertices() {
        let x = Array2::<f32>::from_elem((5, 3), 2.0);
        let s = fit_standardizer(&[x.view()]).unwrap();
        assert!(s.std.iter().all(|&v| v == STD_FLOOR));
        assert!(s.mean.iter().all(|&m| m == 2.0));
        let z = s.apply(x.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardizer_matches_population_moments() {
        let a = frames(7, 4, 1);
        let b = frames(3, 4, 2);
        let s = fit_standardizer(&[a.view(), b.view()]).unwrap();
        let all = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap().mapv(f64::from);
        for j in 0..4 {
            let col = all.column(j);
            let m = col.sum() / 10.0;
            let sd = (col.mapv(|x| (x - m).powi(2)).sum() / 10.0).sqrt();
            assert!((s.mean[j] - m).abs() < 1e-12);
            assert!((s.std[j] - sd).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_and_permutation_leave_embedding_unchanged() {
        let (pre, net, store) = setup(16, 6);
        let x = frames(13, 16, 7);
        let tight = pad_or_truncate(x.view(), 13).unwrap();
        let padded = pad_or_truncate(x.view(), 48).unwrap();
        let a = summarize(tight.frames.view(), &tight.mask, &pre, &net, &store, &mut Mode::Eval).unwrap();
        let b = summarize(padded.frames.view(), &padded.mask, &pre, &net, &store, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);

        let mut order: Vec<usize> = (0..13).collect();
        order.reverse();
        order.swap(2, 9);
        let shuffled = x.select(Axis(0), &order);
        let c = summarize(shuffled.view(), &[true; 13], &pre, &net, &store, &mut Mode::Eval).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn single_valid_frame_pools_to_itself() {
        let (pre, net, store) = setup(8, 4);
        let x = frames(5, 8, 3);
        let mut mask = vec![false; 5];
        mask[2] = true;
        let a = summarize(x.view(), &mask, &pre, &net, &store, &mut Mode::Eval).unwrap();
        let b = summarize(x.slice(ndarray::s![2..3, ..]), &[true], &pre, &net, &store, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            summarize(x.view(), &[false; 5], &pre, &net, &store, &mut Mode::Eval),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn embedding_has_configured_width_and_dropout_only_in_training() {
        let (pre, net, store) = setup(8, 4);
        let x = frames(9, 8, 4);
        let mask = vec![true; 9];
        let e1 = summarize(x.view(), &mask, &pre, &net, &store, &mut Mode::Eval).unwrap();
        let e2 = summarize(x.view(), &mask, &pre, &net, &store, &mut Mode::Eval).unwrap();
        assert_eq!(e1.len(), EMBED_DIM);
        assert_eq!(e1, e2);
        let mut rng = stream(5);
        let t = summarize(x.view(), &mask, &pre, &net, &store, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(e1, t);
    }

    #[test]
    fn preprocessor_round_trips_through_disk() {
        let (pre, _, _) = setup(8, 4);
        let dir = tempfile::tempdir().unwrap();
        pre.save(dir.path()).unwrap();
        assert_eq!(Preprocessor::load(dir.path()).unwrap(), pre);
    }

    #[test]
    fn bind_recovers_registered_layout() {
        let (_, net, store) = setup(8, 4);
        let again = SummaryNet::bind(&store, net.config).unwrap();
        assert_eq!(format!("{:?}", again), format!("{:?}", net));
        let wrong = SummaryConfig::new(5);
        assert!(SummaryNet::bind(&store, wrong).is_err());
    }
}
