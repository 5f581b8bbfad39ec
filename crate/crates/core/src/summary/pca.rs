//! Fixed PCA basis over standardized frames.
//!
//! Route selection:
//! - at most [`GRAM_LIMIT`] pooled frames: eigendecomposition of the
//!   frame Gram matrix `Z Zᵀ`;
//! - otherwise, at most [`COVARIANCE_LIMIT`] vertices: eigendecomposition of
//!   `Zᵀ Z`;
//! - otherwise: randomized subspace iteration with [`POWER_STEPS`] steps.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const GRAM_LIMIT: usize = 4096;
pub const COVARIANCE_LIMIT: usize = 4096;
pub const POWER_STEPS: usize = 10;
const OVERSAMPLE: usize = 10;
const SKETCH_SEED: u64 = 0x5eed_0f_9ca;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMethod {
    Gram,
    Covariance,
    Randomized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `k × V`, orthonormal rows.
    pub components: Array2<f64>,
    /// Variance of the training projections along each component,
    /// nonincreasing.
    pub explained_variance: Array1<f64>,
    pub method: PcaMethod,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn vertices(&self) -> usize {
        self.components.ncols()
    }

    /// Projects standardized `T × V` frames to `T × k`.
    pub fn project(&self, standardized: ArrayView2<f64>) -> Array2<f64> {
        standardized.dot(&self.components.t())
    }
}

/// Fits a `k`-component basis to centered frames given as per-sample blocks
/// (each `T_i × V`).
pub fn fit_pca(blocks: &[Array2<f64>], k: usize) -> Result<PcaBasis> {
    let v = blocks
        .first()
        .map(|b| b.ncols())
        .ok_or(Error::EmptyRequest("PCA requires at least one sample"))?;
    if blocks.iter().any(|b| b.ncols() != v) {
        return Err(Error::shape("PCA blocks differ in vertex count"));
    }
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    if k == 0 || k > n.min(v) {
        return Err(Error::Rank {
            requested: k,
            available: n.min(v),
        });
    }
    let denom = (n.max(2) - 1) as f64;
    let (vectors, values, method) = if n <= GRAM_LIMIT {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let z = ndarray::concatenate(Axis(0), &views).expect("widths checked");
        let (u, lambda) = top_eigen(&z.dot(&z.t()), k);
        // v_i = Zᵀ u_i / sqrt(λ_i); degenerate directions are completed below.
        let mut comps = Array2::zeros((k, v));
        for i in 0..k {
            if lambda[i] > eig_floor(&lambda) {
                let col = z.t().dot(&u.column(i)) / lambda[i].sqrt();
                comps.row_mut(i).assign(&col);
            }
        }
        (comps, lambda, PcaMethod::Gram)
    } else if v <= COVARIANCE_LIMIT {
        let mut c = Array2::zeros((v, v));
        for b in blocks {
            c += &b.t().dot(b);
        }
        let (u, lambda) = top_eigen(&c, k);
        (u.t().to_owned(), lambda, PcaMethod::Covariance)
    } else {
        let (comps, lambda) = randomized(blocks, v, k);
        (comps, lambda, PcaMethod::Randomized)
    };
    let floor = eig_floor(&values);
    let mut components = vectors;
    complete_orthonormal(&mut components, &values, floor);
    for mut row in components.rows_mut() {
        let pivot = row.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            row.mapv_inplace(|x| -x);
        }
    }
    let explained_variance = values.mapv(|l| if l > floor { l / denom } else { 0.0 });
    Ok(PcaBasis {
        components,
        explained_variance,
        method,
    })
}

fn eig_floor(values: &Array1<f64>) -> f64 {
    let max = values.iter().copied().fold(0.0, f64::max);
    (max * 1e-10).max(1e-12)
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues descending and
/// clamped at zero; eigenvectors as columns.
fn top_eigen(m: &Array2<f64>, k: usize) -> (Array2<f64>, Array1<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vecs = Array2::zeros((n, k));
    let mut vals = Array1::zeros(k);
    for (out, &idx) in order.iter().take(k).enumerate() {
        vals[out] = eig.eigenvalues[idx].max(0.0);
        for r in 0..n {
            vecs[[r, out]] = eig.eigenvectors[(r, idx)];
        }
    }
    (vecs, vals)
}

fn gram_apply(blocks: &[Array2<f64>], q: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(q.raw_dim());
    for b in blocks {
        out += &b.t().dot(&b.dot(q));
    }
    out
}

fn orthonormalize_columns(m: &Array2<f64>) -> Array2<f64> {
    let dm = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    let q = dm.qr().q();
    Array2::from_shape_fn((q.nrows(), q.ncols()), |(i, j)| q[(i, j)])
}

fn randomized(blocks: &[Array2<f64>], v: usize, k: usize) -> (Array2<f64>, Array1<f64>) {
    let l = (k + OVERSAMPLE).min(v);
    let mut rng = stream(SKETCH_SEED);
    let omega = Array2::from_shape_simple_fn((v, l), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let mut q = orthonormalize_columns(&gram_apply(blocks, &omega));
    for _ in 0..POWER_STEPS {
        q = orthonormalize_columns(&gram_apply(blocks, &q));
    }
    let small = q.t().dot(&gram_apply(blocks, &q));
    let (u, lambda) = top_eigen(&small, k);
    (q.dot(&u).t().to_owned(), lambda)
}

/// Replaces rows whose eigenvalue is at the floor with unit vectors
/// orthogonal to every other row (Gram–Schmidt over the standard basis).
fn complete_orthonormal(rows: &mut Array2<f64>, values: &Array1<f64>, floor: f64) {
    let (k, v) = rows.dim();
    let mut candidate = 0;
    for i in 0..k {
        if values[i] > floor {
            continue;
        }
        loop {
            let mut e = Array1::zeros(v);
            e[candidate % v] = 1.0;
            candidate += 1;
            for j in 0..k {
                if j != i && (values[j] > floor || j < i) {
                    let r = rows.row(j);
                    let dot = r.dot(&e);
                    e.scaled_add(-dot, &r);
                }
            }
            let norm = e.dot(&e).sqrt();
            if norm > 1e-6 {
                rows.row_mut(i).assign(&(e / norm));
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn gram_error(b: &PcaBasis) -> f64 {
        let g = b.components.dot(&b.components.t());
        let eye = Array2::<f64>::eye(b.k());
        (&g - &eye).iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn centered(mut z: Array2<f64>) -> Array2<f64> {
        let mean = z.mean_axis(Axis(0)).unwrap();
        z -= &mean;
        z
    }

    #[test]
    fn rank_two_frames_reconstruct_exactly() {
        let mut rng = stream(3);
        let basis = Array2::from_shape_simple_fn((2, 10), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let coef = Array2::from_shape_simple_fn((60, 2), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let z = centered(coef.dot(&basis));
        let blocks = vec![z.slice(ndarray::s![..30, ..]).to_owned(), z.slice(ndarray::s![30.., ..]).to_owned()];
        let pca = fit_pca(&blocks, 2).unwrap();
        let recon = pca.project(z.view()).dot(&pca.components);
        let err = (&recon - &z).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-5, "reconstruction error {err}");

        let pca3 = fit_pca(&blocks, 3).unwrap();
        assert!(pca3.explained_variance[2] < 1e-9);
        assert!(gram_error(&pca3) < 1e-5);
    }

    #[test]
    fn projected_variances_match_eigen_oracle() {
        let mut rng = stream(5);
        let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.3, 0.2, 0.1];
        let z = centered(Array2::from_shape_fn((400, 8), |(_, j)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * scales[j]
        }));
        let mix = orthonormalize_columns(&Array2::from_shape_fn((8, 8), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + if i == j { 4.0 } else { 0.0 }));
        let z = z.dot(&mix);
        let pca = fit_pca(&[z.clone()], 4).unwrap();
        // Oracle: eigenvalues of the sample covariance, computed directly.
        let cov = z.t().dot(&z) / (z.nrows() - 1) as f64;
        let (_, oracle) = top_eigen(&cov, 4);
        let proj = pca.project(z.view());
        for i in 0..4 {
            let col = proj.column(i);
            let var = col.dot(&col) / (z.nrows() - 1) as f64;
            assert!((var - pca.explained_variance[i]).abs() / var < 1e-3);
            assert!((oracle[i] - pca.explained_variance[i]).abs() / oracle[i] < 1e-3);
        }
        assert!(pca.explained_variance.windows(2).into_iter().all(|w| w[0] >= w[1]));
    }

    #[test]
    fn all_routes_agree() {
        let mut rng = stream(9);
        let scales: Vec<f64> = (0..12).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let z = centered(Array2::from_shape_fn((200, 12), |(_, j)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * scales[j]
        }));
        let blocks = vec![z];
        let gram = fit_pca(&blocks, 3).unwrap();
        let mut c = Array2::zeros((12, 12));
        c += &blocks[0].t().dot(&blocks[0]);
        let (u, lambda) = top_eigen(&c, 3);
        let (r, rl) = randomized(&blocks, 12, 3);
        for i in 0..3 {
            let a = gram.components.row(i);
            assert!((a.dot(&u.column(i)).abs() - 1.0).abs() < 1e-6);
            assert!((a.dot(&r.row(i)).abs() - 1.0).abs() < 1e-6);
            assert!((lambda[i] - rl[i]).abs() / lambda[i] < 1e-8);
        }
    }

    #[test]
    fn identical_frames_give_zero_variance_and_orthonormal_basis() {
        let z = Array2::<f64>::zeros((20, 6));
        let pca = fit_pca(&[z], 3).unwrap();
        assert!(pca.explained_variance.iter().all(|v| *v == 0.0));
        assert!(gram_error(&pca) < 1e-5);
    }

    #[test]
    fn too_many_components_is_a_rank_error() {
        let z = Array2::<f64>::ones((3, 6));
        assert!(matches!(fit_pca(&[z.clone()], 4), Err(Error::Rank { requested: 4, available: 3 })));
        assert!(matches!(fit_pca(&[z], 0), Err(Error::Rank { .. })));
        assert!(fit_pca(&[], 1).is_err());
    }
}
