//! Independent numerical oracles shared by the integration suites. Nothing
//! here calls into the EP engine; everything is brute force.
#![allow(dead_code)]

use gpprog::data::{assign_re_structure, BiomarkerSpec, Cohort, IndividualRecord, Observation, RandomEffectKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} g(x) dx`, from the
/// eigen-decomposition of the Jacobi matrix (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Expectation of `g(X)` for `X ~ N(mu, var)` by Gauss–Hermite.
pub fn gh_expect(mu: f64, var: f64, nodes: &(Vec<f64>, Vec<f64>), g: impl Fn(f64) -> f64) -> f64 {
    let s = (2.0 * var).sqrt();
    nodes
        .0
        .iter()
        .zip(&nodes.1)
        .map(|(&x, &w)| w * g(mu + s * x))
        .sum::<f64>()
        / PI.sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Normal CDF by Simpson integration of the density, for the oracles only.
pub fn phi_cdf_oracle(z: f64) -> f64 {
    if z > 0.0 {
        return 1.0 - phi_cdf_oracle(-z);
    }
    // lower tail integrated directly keeps relative accuracy
    simpson(z - 40.0, z, 8000, |x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt())
}

pub fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Exact GP regression on one block by dense inversion: observations with
/// covariance `R`, derivative rows unobserved.
pub struct ExactGp {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_marginal: f64,
    /// Mean and covariance of the derivative rows given the data.
    pub m_d: DVector<f64>,
    pub p_d: DMatrix<f64>,
}

pub fn exact_gp(c: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> ExactGp {
    let n = y.len();
    let m = c.nrows();
    let a = c.view((0, 0), (n, n)) + r;
    let a_inv = a.clone().try_inverse().expect("invertible");
    let c_o = c.columns(0, n).into_owned(); // m × n
    let mean = &c_o * (&a_inv * y);
    let cov = c - &c_o * &a_inv * c_o.transpose();
    let det = a.clone().lu().determinant();
    let log_marginal = -0.5 * det.ln() - 0.5 * y.dot(&(&a_inv * y)) - 0.5 * n as f64 * (2.0 * PI).ln();
    let d = m - n;
    let m_d = mean.rows(n, d).into_owned();
    let p_d = cov.view((n, n), (d, d)).into_owned();
    ExactGp { mean, cov, log_marginal, m_d, p_d }
}

/// A small deterministic cohort with `nb` biomarkers and `n` individuals,
/// increasing noisy trajectories, a few visits each.
pub fn small_cohort(nb: usize, n: usize, seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let biomarkers: Vec<BiomarkerSpec> = (0..nb)
        .map(|b| BiomarkerSpec {
            name: format!("b{b}"),
            eta: 0.3 + 0.1 * b as f64,
            length_scale: 2.0 + 0.5 * b as f64,
            noise_sd: 0.1,
            lambda: 1e-6,
        })
        .collect();
    let individuals = (0..n)
        .map(|j| {
            let start = rng.random_range(-3.0..3.0);
            let visits = 1 + (j % 4);
            let mut observations = Vec::new();
            for v in 0..visits {
                for b in 0..nb {
                    let t: f64 = start + v as f64;
                    let f = 1.0 / (1.0 + (-(0.8 + 0.2 * b as f64) * t).exp());
                    let noise: f64 = rng.random_range(-0.1..0.1);
                    observations.push(Observation { biomarker: b, time: v as f64, value: f + noise });
                }
            }
            let mut ind = IndividualRecord {
                id: format!("s{j}"),
                observations,
                time_shift: start,
                random_effect: RandomEffectKind::Zero,
            };
            ind.random_effect = assign_re_structure(&ind, nb);
            ind
        })
        .collect();
    let mut c = Cohort { biomarkers, individuals, derivative_grid: vec![] };
    c.reposition_grid(10);
    c
}

/// EP's log marginal in the five-term form, evaluated densely with finite
/// site variances. `cavities` are `(mu_minus, var_minus)` per site.
pub fn five_term_log_marginal(
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    site_mu: &[f64],
    site_var: &[f64],
    cavities: &[(f64, f64)],
    lambda: f64,
) -> f64 {
    let n = y.len();
    let d = site_mu.len();
    let mut noise = DMatrix::zeros(n + d, n + d);
    noise.view_mut((0, 0), (n, n)).copy_from(r);
    for l in 0..d {
        noise[(n + l, n + l)] = site_var[l];
    }
    let mtx = c + noise;
    let z = DVector::from_iterator(n + d, y.iter().copied().chain(site_mu.iter().copied()));
    let inv = mtx.clone().try_inverse().expect("invertible");
    let logdet = mtx.lu().determinant().ln();
    let mut out = -0.5 * logdet - 0.5 * z.dot(&(&inv * &z)) - 0.5 * n as f64 * (2.0 * PI).ln();
    for l in 0..d {
        let (mu_m, var_m) = cavities[l];
        out += (mu_m - site_mu[l]).powi(2) / (2.0 * (var_m + site_var[l]));
        out += phi_cdf_oracle(mu_m / (lambda * lambda + var_m).sqrt()).ln();
        out += 0.5 * (var_m + site_var[l]).ln();
    }
    out
}

/// Predictive mean and covariance of `f` at `times` for one block by dense
/// inversion: sites enter as Gaussian pseudo-observations of the slope,
/// vacuous ones are dropped.
pub fn dense_predict(
    blk: &gpprog::kernels::BiomarkerBlock,
    sites: &[gpprog::ep::Site],
    times: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    use gpprog::kernels::{se_cov, se_cov_d1};
    let n = blk.n_obs();
    let c = blk.prior();
    let active: Vec<usize> = (0..n).chain((0..sites.len()).filter(|&l| sites[l].tau > 0.0).map(|l| n + l)).collect();
    let m = active.len();
    let mut k = DMatrix::zeros(m, m);
    for (i, &a) in active.iter().enumerate() {
        for (j, &b) in active.iter().enumerate() {
            k[(i, j)] = c[(a, b)];
        }
    }
    let r = blk.obs_noise();
    let mut z = DVector::zeros(m);
    for (i, &a) in active.iter().enumerate() {
        if a < n {
            z[i] = blk.rows[a].value;
            for (j, &b) in active.iter().enumerate() {
                if b < n {
                    k[(i, j)] += r[(a, b)];
                }
            }
        } else {
            let s = &sites[a - n];
            z[i] = s.nu / s.tau;
            k[(i, i)] += 1.0 / s.tau;
        }
    }
    let (eta, l) = (blk.eta, blk.length_scale);
    let q = times.len();
    let mut ks = DMatrix::zeros(q, m);
    for (p, &t) in times.iter().enumerate() {
        for (i, &a) in active.iter().enumerate() {
            ks[(p, i)] = if a < n {
                se_cov(t, blk.rows[a].warped, eta, l)
            } else {
                se_cov_d1(t, blk.grid[a - n], eta, l)
            };
        }
    }
    let inv = k.try_inverse().expect("invertible");
    let mean = &ks * &inv * z;
    let prior = DMatrix::from_fn(q, q, |a, b| se_cov(times[a], times[b], eta, l));
    let cov = prior - &ks * inv * ks.transpose();
    (mean, cov)
}

/// `log N(y | mean, cov)` with a dense inverse and LU determinant.
pub fn dense_log_normal(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let r = y - mean;
    let inv = cov.clone().try_inverse().expect("invertible");
    let det = cov.clone().lu().determinant();
    -0.5 * r.dot(&(&inv * &r)) - 0.5 * det.ln() - 0.5 * y.len() as f64 * (2.0 * PI).ln()
}
