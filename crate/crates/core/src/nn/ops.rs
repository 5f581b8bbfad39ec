use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · W + b` with `x: n × in`, `W: in × out`, `b: out`.
pub fn dense_forward<T: Scalar>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    b: Option<ArrayView1<T>>,
) -> Result<Array2<T>> {
    if x.ncols() != w.nrows() {
        return Err(Error::shape(format!(
            "dense input width {} does not match weight rows {}",
            x.ncols(),
            w.nrows()
        )));
    }
    let mut y = x.dot(&w);
    if let Some(b) = b {
        if b.len() != w.ncols() {
            return Err(Error::shape(format!(
                "bias length {} does not match output width {}",
                b.len(),
                w.ncols()
            )));
        }
        y += &b;
    }
    Ok(y)
}

/// Row-wise layer normalization. Returns the output together with the
/// normalized input and per-row inverse standard deviation (for backward).
pub fn layer_norm<T: Scalar>(
    x: ArrayView2<T>,
    gain: ArrayView1<T>,
    offset: ArrayView1<T>,
) -> Result<(Array2<T>, Array2<T>, Array1<T>)> {
    let f = x.ncols();
    if gain.len() != f || offset.len() != f {
        return Err(Error::shape(format!(
            "layer norm over {f} features with gain {} / offset {}",
            gain.len(),
            offset.len()
        )));
    }
    let n = T::of(f as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gain + &offset;
    Ok((y, xhat, inv_std))
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Inverted dropout. Returns the output and the applied mask (entries 0 or
/// `1/(1-rate)`); identity with no mask outside training.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: ArrayView2<T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Array2<T>, Option<Array2<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain {
            value: rate,
            domain: "dropout rate in [0, 1)",
        });
    }
    if !training || rate == 0.0 {
        return Ok((x.to_owned(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    Ok((&x * &mask, Some(mask)))
}

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`: interleaved
/// `sin(ω_i t), cos(ω_i t)` with `ω_i` spaced geometrically from π to 100π.
pub fn sin_time_embed<T: Scalar>(t: f64, dim: usize) -> Result<Array1<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::shape(format!("time embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let omega = std::f64::consts::PI * 100f64.powf(frac);
        out[2 * i] = T::of((omega * t).sin());
        out[2 * i + 1] = T::of((omega * t).cos());
    }
    Ok(out)
}

/// Backward of [`layer_norm`] with respect to its input.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: ArrayView2<T>,
    xhat: ArrayView2<T>,
    inv_std: ArrayView1<T>,
    gain: ArrayView1<T>,
) -> Array2<T> {
    let n = T::of(xhat.ncols() as f64);
    let dxhat = &dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(xhat.rows())
        .and(&inv_std)
        .for_each(|mut out, g, h, &inv| {
            let sum_g = g.sum();
            let sum_gh = g.iter().zip(h.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for ((o, &gi), &hi) in out.iter_mut().zip(g.iter()).zip(h.iter()) {
                *o = inv / n * (n * gi - sum_g - hi * sum_gh);
            }
        });
    dx
}

pub(crate) fn column_sums<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    x.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array2};

    #[test]
    fn identity_dense() {
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]];
        let w = Array2::<f64>::eye(3);
        let b = Array1::<f64>::zeros(3);
        assert_eq!(dense_forward(x.view(), w.view(), Some(b.view())).unwrap(), x);
        assert!(dense_forward(x.view(), Array2::<f64>::eye(2).view(), None).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = array![[3.0f64, 3.0, 3.0, 3.0]];
        let g = Array1::ones(4);
        let o = Array1::zeros(4);
        let (y, _, _) = layer_norm(x.view(), g.view(), o.view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = array![[1.0f64, 2.0, 3.0, 6.0]];
        let (y, _, _) = layer_norm(x.view(), Array1::ones(4).view(), Array1::zeros(4).view()).unwrap();
        let mean = y.sum() / 4.0;
        let var = y.mapv(|v| v * v).sum() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_asymptotics() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn dropout_is_identity_at_eval() {
        let x = array![[1.0f32, 2.0], [3.0, 4.0]];
        let (y, mask) = dropout(x.view(), 0.5, &mut stream(0), false).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        assert!(dropout(x.view(), 1.0, &mut stream(0), true).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Array2::from_shape_fn((4, 8), |(i, j)| 1.0 + i as f64 + 0.5 * j as f64);
        let mut rng = stream(42);
        let mut acc = Array2::<f64>::zeros((4, 8));
        let trials = 20_000;
        for _ in 0..trials {
            acc += &dropout(x.view(), 0.1, &mut rng, true).unwrap().0;
        }
        acc /= trials as f64;
        for (a, b) in acc.iter().zip(x.iter()) {
            assert!((a - b).abs() / b < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e = sin_time_embed::<f64>(0.0, 8).unwrap();
        assert_eq!(e.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sin_time_embed::<f64>(0.5, 8).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12); // sin(π/2)
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert!(sin_time_embed::<f64>(0.5, 7).is_err());
        assert!(sin_time_embed::<f64>(0.5, 0).is_err());
    }
}
