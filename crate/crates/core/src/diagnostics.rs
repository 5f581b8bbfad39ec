//! Recovery and calibration metrics over posterior draws.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::PosteriorDraws;
use crate::rng::{stream, Stream};

pub const DEFAULT_GRID: usize = 100;
pub const DEFAULT_REPLICATIONS: usize = 1000;

/// Sample Pearson correlation.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson inputs differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation matrix of the columns of `x` (`N × D`).
pub fn cross_correlation(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = x.ncols();
    let mut r = Array2::eye(d);
    for i in 0..d {
        for j in (i + 1)..d {
            let v = pearson(x.column(i), x.column(j))?;
            r[[i, j]] = v;
            r[[j, i]] = v;
        }
    }
    if d == 1 {
        pearson(x.column(0), x.column(0))?;
    }
    Ok(r)
}

/// Largest absolute off-diagonal entry.
pub fn max_off_diagonal(r: &Array2<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for ((i, j), v) in r.indexed_iter() {
        if i != j {
            m = m.max(v.abs());
        }
    }
    m
}

fn check_draws(truths: ArrayView2<f64>, draws: &[PosteriorDraws]) -> Result<()> {
    if truths.nrows() != draws.len() {
        return Err(Error::shape(format!(
            "{} truths but {} posterior draw sets",
            truths.nrows(),
            draws.len()
        )));
    }
    for d in draws {
        if d.samples.nrows() == 0 {
            return Err(Error::EmptyRequest("posterior draw set is empty"));
        }
        if d.samples.ncols() != truths.ncols() {
            return Err(Error::shape("posterior draws and truths differ in dimension"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Per-dimension correlation between posterior means and truths.
    pub pearson: Vec<f64>,
    /// Correlations between posterior-mean columns.
    pub cross_correlation: Array2<f64>,
    /// Sample-level RMSE over every draw.
    pub bayes_rmse: Vec<f64>,
    /// RMSE of the posterior means.
    pub mean_rmse: Vec<f64>,
    pub observations: usize,
    pub samples_per_observation: Vec<usize>,
}

pub fn posterior_means(draws: &[PosteriorDraws]) -> Result<Array2<f64>> {
    let d = draws.first().map(|x| x.samples.ncols()).unwrap_or(0);
    let mut out = Array2::zeros((draws.len(), d));
    for (mut row, x) in out.rows_mut().into_iter().zip(draws) {
        row.assign(&x.samples.mean_axis(Axis(0)).ok_or(Error::EmptyRequest("empty draws"))?);
    }
    Ok(out)
}

/// Per-dimension recovery metrics. The Bayes RMSE is evaluated as
/// `sqrt(mean squared error of the means + mean posterior variance)`,
/// which equals the sample-level double sum and cannot fall below the
/// posterior-mean RMSE.
pub fn recovery_report(truths: ArrayView2<f64>, draws: &[PosteriorDraws]) -> Result<RecoveryReport> {
    check_draws(truths, draws)?;
    if truths.nrows() < 2 {
        return Err(Error::EmptyRequest("recovery needs at least two observations"));
    }
    let (n, d) = truths.dim();
    let means = posterior_means(draws)?;
    let mut bias = Array1::<f64>::zeros(d);
    let mut spread = Array1::<f64>::zeros(d);
    for (i, x) in draws.iter().enumerate() {
        let s = x.samples.nrows() as f64;
        for j in 0..d {
            let m = means[[i, j]];
            bias[j] += (m - truths[[i, j]]).powi(2);
            spread[j] += x.samples.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / s;
        }
    }
    let n_f = n as f64;
    let mean_rmse: Vec<f64> = bias.iter().map(|b| (b / n_f).sqrt()).collect();
    let bayes_rmse: Vec<f64> = bias.iter().zip(&spread).map(|(b, v)| (b / n_f + v / n_f).sqrt()).collect();
    let pearson = (0..d)
        .map(|j| pearson(means.column(j), truths.column(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveryReport {
        pearson,
        cross_correlation: cross_correlation(means.view())?,
        bayes_rmse,
        mean_rmse,
        observations: n,
        samples_per_observation: draws.iter().map(|x| x.samples.nrows()).collect(),
    })
}

/// Fractional ranks of each truth within its draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStatistics {
    /// `N × D`, entries in `[0, 1]`.
    pub ranks: Array2<f64>,
    pub samples: usize,
    /// Seed of the tie-breaking stream.
    pub seed: u64,
}

/// `rank = #{s : draw_s < truth} / S`; draws equal to the truth are counted
/// below it with a uniformly random share.
pub fn rank_statistics(truths: ArrayView2<f64>, draws: &[PosteriorDraws], seed: u64) -> Result<RankStatistics> {
    check_draws(truths, draws)?;
    let s = draws.first().map(|x| x.samples.nrows()).ok_or(Error::EmptyRequest("no observations"))?;
    if draws.iter().any(|x| x.samples.nrows() != s) {
        return Err(Error::shape("posterior draw sets differ in sample count"));
    }
    let mut rng = stream(seed);
    let (n, d) = truths.dim();
    let mut ranks = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let t = truths[[i, j]];
            let col = draws[i].samples.column(j);
            let below = col.iter().filter(|&&v| v < t).count();
            let ties = col.iter().filter(|&&v| v == t).count();
            let extra = if ties > 0 { rng.random_range(0..=ties) } else { 0 };
            ranks[[i, j]] = (below + extra) as f64 / s as f64;
        }
    }
    Ok(RankStatistics { ranks, samples: s, seed })
}

/// Evaluation points strictly inside `(0, 1)`.
pub fn ecdf_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|i| i as f64 / (points + 1) as f64).collect()
}

/// CDF of a fractional rank under calibration (`k / S`, `k` uniform on
/// `0..=S`).
fn null_cdf(z: f64, samples: usize) -> f64 {
    let k = (z * samples as f64 + 1e-12).floor().min(samples as f64);
    (k + 1.0) / (samples as f64 + 1.0)
}

/// `ECDF(z) − F₀(z)` on `grid`.
pub fn ecdf_difference(ranks: ArrayView1<f64>, samples: usize, grid: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    grid.iter()
        .map(|&z| {
            let count = sorted.partition_point(|&r| r <= z + 1e-12);
            count as f64 / n - null_cdf(z, samples)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfBand {
    pub grid: Vec<f64>,
    /// Simultaneous half-width at each grid point.
    pub half_width: Vec<f64>,
    pub observations: usize,
    pub samples: usize,
    pub alpha: f64,
}

fn draw_ranks(n: usize, samples: usize, rng: &mut Stream) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(0..=samples) as f64 / samples as f64)
}

/// Simultaneous `1 − alpha` band for the ECDF difference of `n` calibrated
/// ranks, by Monte Carlo over `replications` rank sets.
pub fn ecdf_band(
    n: usize,
    samples: usize,
    alpha: f64,
    replications: usize,
    grid_points: usize,
    rng: &mut Stream,
) -> Result<EcdfBand> {
    if n < 10 {
        return Err(Error::EmptyRequest("ECDF band needs at least 10 observations"));
    }
    if samples == 0 || replications == 0 || grid_points == 0 {
        return Err(Error::Config("samples, replications and grid size must be positive".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            value: alpha,
            domain: "(0, 1)",
        });
    }
    let grid = ecdf_grid(grid_points);
    let mut maxima: Vec<f64> = (0..replications)
        .map(|_| {
            let ranks = draw_ranks(n, samples, rng);
            ecdf_difference(ranks.view(), samples, &grid)
                .into_iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * replications as f64).ceil() as usize).clamp(1, replications) - 1;
    let width = maxima[idx].max(f64::MIN_POSITIVE);
    Ok(EcdfBand {
        half_width: vec![width; grid.len()],
        grid,
        observations: n,
        samples,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ranks: RankStatistics,
    pub band: EcdfBand,
    /// One ECDF-difference curve per dimension, on `band.grid`.
    pub ecdf_difference: Vec<Vec<f64>>,
    /// Share of grid points outside the band, per dimension.
    pub fraction_outside: Vec<f64>,
    pub pass: Vec<bool>,
}

impl CalibrationReport {
    pub fn failing_dimensions(&self) -> usize {
        self.pass.iter().filter(|p| !**p).count()
    }
}

pub fn calibration_report(
    truths: ArrayView2<f64>,
    draws: &[PosteriorDraws],
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    let ranks = rank_statistics(truths, draws, seed)?;
    let mut rng = stream(seed ^ 0xeCdF);
    let band = ecdf_band(truths.nrows(), ranks.samples, alpha, replications, DEFAULT_GRID, &mut rng)?;
    let mut curves = Vec::new();
    let mut fraction_outside = Vec::new();
    let mut pass = Vec::new();
    for j in 0..truths.ncols() {
        let curve = ecdf_difference(ranks.ranks.column(j), ranks.samples, &band.grid);
        let outside = curve.iter().zip(&band.half_width).filter(|(c, w)| c.abs() > **w).count();
        fraction_outside.push(outside as f64 / curve.len() as f64);
        pass.push(outside == 0);
        curves.push(curve);
    }
    Ok(CalibrationReport {
        ranks,
        band,
        ecdf_difference: curves,
        fraction_outside,
        pass,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Plot-ready CSV: one row per observation and dimension with the truth,
/// posterior mean and central 50% / 95% interval endpoints.
pub fn export_recovery_plot_data(
    truths: ArrayView2<f64>,
    draws: &[PosteriorDraws],
    labels: &[&str],
) -> Result<String> {
    check_draws(truths, draws)?;
    if labels.len() != truths.ncols() {
        return Err(Error::shape("one label per dimension required"));
    }
    let mut out = String::from("observation,dimension,truth,mean,q025,q250,q750,q975\n");
    for (i, x) in draws.iter().enumerate() {
        for (j, label) in labels.iter().enumerate() {
            let mut col = x.samples.column(j).to_vec();
            col.sort_by(f64::total_cmp);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                x.observation,
                label,
                truths[[i, j]],
                mean,
                quantile(&col, 0.025),
                quantile(&col, 0.25),
                quantile(&col, 0.75),
                quantile(&col, 0.975)
            );
        }
    }
    Ok(out)
}

/// Agreement between generating scores and scores recovered from text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub pearson: Vec<f64>,
    /// Correlations between recovered-score columns.
    pub cross_correlation: Array2<f64>,
    pub observations: usize,
}

pub fn cycle_report(truths: ArrayView2<f64>, recovered: ArrayView2<f64>) -> Result<CycleReport> {
    if truths.dim() != recovered.dim() {
        return Err(Error::shape("truths and recovered scores differ in shape"));
    }
    let pearson = (0..truths.ncols())
        .map(|j| pearson(truths.column(j), recovered.column(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CycleReport {
        pearson,
        cross_correlation: cross_correlation(recovered)?,
        observations: truths.nrows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Solver;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn draws_from(samples: Array2<f64>) -> PosteriorDraws {
        PosteriorDraws {
            samples,
            observation: "o".into(),
            solver: Solver::default(),
        }
    }

    fn normal(rng: &mut Stream) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn pearson_examples() {
        let a = array![1.0, 2.0, 3.0, 4.0];
        assert!((pearson(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(a.view(), (-&a).view()).unwrap() + 1.0).abs() < 1e-15);
        let b = array![1.0, 2.0, 3.0, 100.0];
        // Direct covariance / (σa σb) computation.
        let (ma, mb) = (2.5, 26.5);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let expected = cov / (va * vb).sqrt();
        assert!((pearson(a.view(), b.view()).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            pearson(a.view(), array![1.0, 1.0, 1.0, 1.0].view()),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn point_masses_and_offsets() {
        let truths = array![[0.1, 0.9], [0.5, 0.2], [0.7, 0.4]];
        let exact: Vec<_> = truths.rows().into_iter().map(|r| draws_from(r.insert_axis(Axis(0)).to_owned())).collect();
        let r = recovery_report(truths.view(), &exact).unwrap();
        assert!(r.pearson.iter().all(|p| (p - 1.0).abs() < 1e-12));
        assert!(r.bayes_rmse.iter().all(|v| *v == 0.0));
        let shifted: Vec<_> = truths
            .rows()
            .into_iter()
            .map(|r| draws_from((&r + 0.1).insert_axis(Axis(0)).to_owned()))
            .collect();
        let r = recovery_report(truths.view(), &shifted).unwrap();
        assert!(r.pearson.iter().all(|p| (p - 1.0).abs() < 1e-12));
        assert!(r.bayes_rmse.iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn bayes_rmse_matches_brute_force_double_sum() {
        let truths = array![[0.2], [0.6]];
        let draws = vec![draws_from(array![[0.1], [0.4]]), draws_from(array![[0.9], [0.5]])];
        let r = recovery_report(truths.view(), &draws).unwrap();
        let terms = [(0.1f64 - 0.2).powi(2), (0.4f64 - 0.2).powi(2), (0.9f64 - 0.6).powi(2), (0.5f64 - 0.6).powi(2)];
        let expected = (terms.iter().sum::<f64>() / 4.0).sqrt();
        assert!((r.bayes_rmse[0] - expected).abs() < 1e-12);
        assert!(r.bayes_rmse[0] >= r.mean_rmse[0]);
    }

    #[test]
    fn ranks_examples() {
        let truths = array![[0.25], [-1.0], [2.0]];
        let one = array![[0.1], [0.2], [0.3], [0.4]];
        let draws = vec![draws_from(one.clone()), draws_from(one.clone()), draws_from(one)];
        let r = rank_statistics(truths.view(), &draws, 0).unwrap();
        assert_eq!(r.ranks.column(0).to_vec(), vec![0.5, 0.0, 1.0]);
        let uneven = vec![draws_from(array![[0.0]]), draws_from(array![[0.0], [1.0]]), draws_from(array![[0.0]])];
        assert!(rank_statistics(truths.view(), &uneven, 0).is_err());
    }

    #[test]
    fn ties_are_split_randomly() {
        let truths = array![[0.5]];
        let draws = vec![draws_from(Array2::from_elem((10, 1), 0.5))];
        let seen: std::collections::BTreeSet<u64> = (0..50)
            .map(|seed| (rank_statistics(truths.view(), &draws, seed).unwrap().ranks[[0, 0]] * 10.0).round() as u64)
            .collect();
        assert!(seen.len() > 3);
    }

    #[test]
    fn band_shrinks_with_n_and_alpha() {
        let w = |n, alpha| ecdf_band(n, 500, alpha, 1000, 100, &mut stream(1)).unwrap().half_width[0];
        let ratio = w(400, 0.05) / w(200, 0.05);
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.15 * std::f64::consts::FRAC_1_SQRT_2, "{ratio}");
        let wide = w(100, 0.05);
        let narrow = w(100, 0.5);
        let tiny = w(100, 0.999);
        assert!(wide > narrow && narrow > tiny && tiny > 0.0);
        assert!(tiny < 0.4 * wide);
    }

    #[test]
    fn uniform_ranks_pass_band() {
        let mut rng = stream(2);
        let band = ecdf_band(100, 100, 0.05, 1000, 100, &mut rng).unwrap();
        let passes = (0..200)
            .filter(|_| {
                let ranks = draw_ranks(100, 100, &mut rng);
                ecdf_difference(ranks.view(), 100, &band.grid)
                    .iter()
                    .zip(&band.half_width)
                    .all(|(c, w)| c.abs() <= *w)
            })
            .count();
        assert!(passes >= 186, "{passes}/200");
    }

    /// Truths θ ~ N(0, 1) observed as x = θ + N(0, 1); the exact posterior
    /// is N(x/2, 1/2).
    fn conjugate_trial(n: usize, s: usize, sd_scale: f64, rng: &mut Stream) -> (Array2<f64>, Vec<PosteriorDraws>) {
        let d = 6;
        let truths = Array2::from_shape_simple_fn((n, d), || normal(rng));
        let draws = truths
            .rows()
            .into_iter()
            .map(|t| {
                let x: Array1<f64> = t.mapv(|v| v + normal(rng));
                let sd = 0.5f64.sqrt() * sd_scale;
                draws_from(Array2::from_shape_fn((s, d), |(_, j)| x[j] / 2.0 + sd * normal(rng)))
            })
            .collect();
        (truths, draws)
    }

    #[test]
    fn exact_posterior_is_calibrated_per_dimension() {
        let mut rng = stream(4);
        let trials = 40;
        let mut dim_passes = 0;
        for t in 0..trials {
            let (truths, draws) = conjugate_trial(100, 100, 1.0, &mut rng);
            let r = calibration_report(truths.view(), &draws, 0.05, 300, t).unwrap();
            dim_passes += r.pass.iter().filter(|p| **p).count();
        }
        let rate = dim_passes as f64 / (6 * trials) as f64;
        assert!(rate >= 0.9, "{rate}");
    }

    #[test]
    fn overconfident_posterior_exits_band() {
        let mut rng = stream(5);
        let (truths, draws) = conjugate_trial(200, 500, 0.5, &mut rng);
        let r = calibration_report(truths.view(), &draws, 0.05, 1000, 1).unwrap();
        assert_eq!(r.failing_dimensions(), 6);
    }

    #[test]
    fn rmse_decomposition_and_psd_cross_correlation() {
        let mut rng = stream(6);
        let (truths, draws) = conjugate_trial(50, 40, 1.0, &mut rng);
        let r = recovery_report(truths.view(), &draws).unwrap();
        for j in 0..6 {
            assert!(r.bayes_rmse[j] >= r.mean_rmse[j]);
        }
        let c = &r.cross_correlation;
        assert_eq!(c, &c.t().to_owned());
        let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(6, 6, |i, j| c[[i, j]]));
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-8));
    }

    #[test]
    fn iid_ranks_are_uniform_by_ks() {
        let mut rng = stream(8);
        let n = 100;
        let crit = 1.36 / (n as f64).sqrt();
        let ok = (0..100)
            .filter(|_| {
                let truths = Array2::from_shape_simple_fn((n, 1), || normal(&mut rng));
                let draws: Vec<_> = (0..n)
                    .map(|_| draws_from(Array2::from_shape_simple_fn((200, 1), || normal(&mut rng))))
                    .collect();
                let r = rank_statistics(truths.view(), &draws, 0).unwrap();
                let mut ranks = r.ranks.column(0).to_vec();
                ranks.sort_by(f64::total_cmp);
                let ks = ranks
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
                    .fold(0.0, f64::max);
                ks < crit + 1.0 / 200.0
            })
            .count();
        assert!(ok >= 90, "{ok}");
    }

    #[test]
    fn export_rows_have_ordered_intervals() {
        let mut rng = stream(9);
        let (truths, draws) = conjugate_trial(5, 50, 1.0, &mut rng);
        let labels = ["a", "b", "c", "d", "e", "f"];
        let csv = export_recovery_plot_data(truths.view(), &draws, &labels).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 5 * 6);
        for line in &lines[1..] {
            let v: Vec<f64> = line.split(',').skip(4).map(|x| x.parse().unwrap()).collect();
            assert!(v[0] <= v[1] && v[1] <= v[2] && v[2] <= v[3]);
        }
    }

    #[test]
    fn cycle_report_of_identical_scores() {
        let mut rng = stream(10);
        let x = Array2::from_shape_simple_fn((30, 6), || rng.random::<f64>());
        let r = cycle_report(x.view(), x.view()).unwrap();
        assert!(r.pearson.iter().all(|p| (p - 1.0).abs() < 1e-12));
    }
}
