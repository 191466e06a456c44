//! Squared-exponential covariance of the fixed effect and of its derivative
//! process, random-effect covariances, and assembly of the joint prior over
//! observations and derivative points.
//!
//! Every covariance in the model is block-diagonal across biomarkers, so the
//! joint prior is stored as one [`BiomarkerBlock`] per biomarker. Within a
//! block the rows are the biomarker's observations (grouped by individual)
//! followed by its derivative points.

use crate::data::{Cohort, RandomEffectKind};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Relative diagonal jitter added to every prior block before factorization.
pub const JITTER: f64 = 1e-8;

/// `η exp(-(t1-t2)²/(2l²))`
pub fn se_cov(t1: f64, t2: f64, eta: f64, l: f64) -> f64 {
    let r = t1 - t2;
    eta * (-0.5 * r * r / (l * l)).exp()
}

/// `Cov(f(t), f'(t'))`, the derivative of [`se_cov`] in its second argument.
pub fn se_cov_d1(t: f64, t_prime: f64, eta: f64, l: f64) -> f64 {
    let r = t - t_prime;
    let l2 = l * l;
    eta * r / l2 * (-0.5 * r * r / l2).exp()
}

/// `Cov(f'(t1'), f'(t2'))`, the mixed second derivative of [`se_cov`].
pub fn se_cov_d2(t1_prime: f64, t2_prime: f64, eta: f64, l: f64) -> f64 {
    let r = t1_prime - t2_prime;
    let l2 = l * l;
    eta / l2 * (1.0 - r * r / l2) * (-0.5 * r * r / l2).exp()
}

// l·∂/∂l of the three kernels
fn se_cov_dlogl(r: f64, eta: f64, l: f64) -> f64 {
    let q = r * r / (l * l);
    eta * (-0.5 * q).exp() * q
}

fn se_cov_d1_dlogl(r: f64, eta: f64, l: f64) -> f64 {
    let l2 = l * l;
    let q = r * r / l2;
    eta * r / l2 * (-0.5 * q).exp() * (q - 2.0)
}

fn se_cov_d2_dlogl(r: f64, eta: f64, l: f64) -> f64 {
    let l2 = l * l;
    let q = r * r / l2;
    eta / l2 * (-0.5 * q).exp() * (-2.0 + 5.0 * q - q * q)
}

/// Covariance of one individual's random effect for biomarker `b` between two
/// of their observation times.
pub fn re_cov(kind: &RandomEffectKind, b: usize, t1: f64, t2: f64) -> f64 {
    match kind {
        RandomEffectKind::Zero => 0.0,
        RandomEffectKind::Iid { sigma } => {
            if t1 == t2 {
                sigma[b] * sigma[b]
            } else {
                0.0
            }
        }
        RandomEffectKind::Linear { sigma, t_bar } => sigma[b] * sigma[b] * (t1 - t_bar) * (t2 - t_bar),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub individual: usize,
    /// Raw time τ.
    pub time: f64,
    /// Warped time τ + d.
    pub warped: f64,
    pub value: f64,
}

/// Joint prior of one biomarker.
#[derive(Debug, Clone)]
pub struct BiomarkerBlock {
    pub biomarker: usize,
    pub eta: f64,
    pub length_scale: f64,
    pub noise_sd: f64,
    pub lambda: f64,
    pub rows: Vec<ObsRow>,
    /// `(individual, start, len)` of each individual's rows, in row order.
    pub segments: Vec<(usize, usize, usize)>,
    pub grid: Vec<f64>,
    pub k_ff: DMatrix<f64>,
    pub k_fd: DMatrix<f64>,
    pub k_dd: DMatrix<f64>,
    /// Random-effect covariance over the observation rows.
    pub s: DMatrix<f64>,
    /// Observation noise variances.
    pub e: DVector<f64>,
    pub jitter: f64,
}

impl BiomarkerBlock {
    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_deriv(&self) -> usize {
        self.grid.len()
    }

    pub fn dim(&self) -> usize {
        self.n_obs() + self.n_deriv()
    }

    pub fn y(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.value))
    }

    /// `[[K_ff, K_fd], [K_fdᵀ, K_dd]] + jitter·I`.
    pub fn prior(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let m = self.dim();
        let mut c = DMatrix::zeros(m, m);
        c.view_mut((0, 0), (n, n)).copy_from(&self.k_ff);
        c.view_mut((0, n), (n, m - n)).copy_from(&self.k_fd);
        c.view_mut((n, 0), (m - n, n)).copy_from(&self.k_fd.transpose());
        c.view_mut((n, n), (m - n, m - n)).copy_from(&self.k_dd);
        for i in 0..m {
            c[(i, i)] += self.jitter;
        }
        c
    }

    /// Observation noise plus random effects, `Σ_ε + Σ_S`.
    pub fn obs_noise(&self) -> DMatrix<f64> {
        let mut r = self.s.clone();
        for i in 0..self.n_obs() {
            r[(i, i)] += self.e[i];
        }
        r
    }

    /// Cross-covariance of `f(t*)` with every block row.
    pub fn cross_f(&self, t_star: f64) -> DVector<f64> {
        let (eta, l) = (self.eta, self.length_scale);
        DVector::from_iterator(
            self.dim(),
            self.rows
                .iter()
                .map(|r| se_cov(t_star, r.warped, eta, l))
                .chain(self.grid.iter().map(|&g| se_cov_d1(t_star, g, eta, l))),
        )
    }

    /// Cross-covariance of `f'(t*)` with every block row.
    pub fn cross_df(&self, t_star: f64) -> DVector<f64> {
        let (eta, l) = (self.eta, self.length_scale);
        DVector::from_iterator(
            self.dim(),
            self.rows
                .iter()
                .map(|r| se_cov_d1(r.warped, t_star, eta, l))
                .chain(self.grid.iter().map(|&g| se_cov_d2(t_star, g, eta, l))),
        )
    }

    /// `∂C/∂log η`.
    pub fn d_prior_dlog_eta(&self) -> DMatrix<f64> {
        // every entry, jitter included, is proportional to η
        self.prior()
    }

    /// `∂C/∂log l`.
    pub fn d_prior_dlog_l(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let m = self.dim();
        let (eta, l) = (self.eta, self.length_scale);
        let mut c = DMatrix::zeros(m, m);
        for i in 0..n {
            for k in 0..n {
                c[(i, k)] = se_cov_dlogl(self.rows[i].warped - self.rows[k].warped, eta, l);
            }
            for (a, &g) in self.grid.iter().enumerate() {
                let v = se_cov_d1_dlogl(self.rows[i].warped - g, eta, l);
                c[(i, n + a)] = v;
                c[(n + a, i)] = v;
            }
        }
        for (a, &g1) in self.grid.iter().enumerate() {
            for (b, &g2) in self.grid.iter().enumerate() {
                c[(n + a, n + b)] = se_cov_d2_dlogl(g1 - g2, eta, l);
            }
        }
        if l < 1.0 {
            for i in 0..m {
                c[(i, i)] -= 2.0 * self.jitter;
            }
        }
        c
    }

    /// Derivative of `C[row, col]` with respect to the warped time of
    /// observation `row`, holding the other argument fixed. Derivative
    /// columns are indexed from `n_obs()`.
    pub fn d_prior_dtime(&self, row: usize, col: usize) -> f64 {
        let (eta, l) = (self.eta, self.length_scale);
        let t = self.rows[row].warped;
        let n = self.n_obs();
        if col < n {
            -se_cov_d1(t, self.rows[col].warped, eta, l)
        } else {
            se_cov_d2(t, self.grid[col - n], eta, l)
        }
    }

    /// Derivative of `C[n+a, col]` with respect to derivative location `a`.
    pub fn d_prior_dgrid(&self, a: usize, col: usize) -> f64 {
        let (eta, l) = (self.eta, self.length_scale);
        let g = self.grid[a];
        let n = self.n_obs();
        if col < n {
            // C[i, n+a] = se_cov_d1(t_i, g)
            -se_cov_d2(self.rows[col].warped, g, eta, l)
        } else {
            // d/dg1 of se_cov_d2(g1, g2)
            let r = g - self.grid[col - n];
            let l2 = l * l;
            let q = r * r / l2;
            eta / (l2 * l2) * r * (-0.5 * q).exp() * (q - 3.0)
        }
    }
}

/// Block-diagonal joint prior over all biomarkers.
#[derive(Debug, Clone)]
pub struct JointGp {
    pub blocks: Vec<BiomarkerBlock>,
}

impl JointGp {
    /// Warped times of every observation, in block row order.
    pub fn warped_times(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.rows.iter().map(|r| r.warped))
            .collect()
    }

    /// Full prior matrix with all observation rows first (block by block),
    /// then all derivative rows. Cross-biomarker entries are zero.
    pub fn dense_prior(&self) -> DMatrix<f64> {
        let n_obs: usize = self.blocks.iter().map(|b| b.n_obs()).sum();
        let total: usize = self.blocks.iter().map(|b| b.dim()).sum();
        let mut out = DMatrix::zeros(total, total);
        let mut idx = Vec::new();
        let (mut o, mut d) = (0, n_obs);
        for b in &self.blocks {
            let mut rows: Vec<usize> = (o..o + b.n_obs()).collect();
            rows.extend(d..d + b.n_deriv());
            o += b.n_obs();
            d += b.n_deriv();
            idx.push(rows);
        }
        for (b, rows) in self.blocks.iter().zip(&idx) {
            let c = b.prior();
            for (i, &gi) in rows.iter().enumerate() {
                for (k, &gk) in rows.iter().enumerate() {
                    out[(gi, gk)] = c[(i, k)];
                }
            }
        }
        out
    }
}

/// Builds the per-biomarker joint blocks of `cohort` under its current
/// time shifts, hyperparameters and derivative grid.
pub fn assemble_joint(cohort: &Cohort) -> Result<JointGp> {
    cohort.validate()?;
    let blocks = (0..cohort.biomarkers.len())
        .map(|b| assemble_block(cohort, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointGp { blocks })
}

pub fn assemble_block(cohort: &Cohort, b: usize) -> Result<BiomarkerBlock> {
    let spec = &cohort.biomarkers[b];
    let (eta, l) = (spec.eta, spec.length_scale);
    let mut rows = Vec::new();
    let mut segments = Vec::new();
    for (j, ind) in cohort.individuals.iter().enumerate() {
        let start = rows.len();
        for o in ind.observations.iter().filter(|o| o.biomarker == b) {
            rows.push(ObsRow {
                individual: j,
                time: o.time,
                warped: o.time + ind.time_shift,
                value: o.value,
            });
        }
        if rows.len() > start {
            segments.push((j, start, rows.len() - start));
        }
    }
    let grid = cohort.derivative_grid[b].clone();
    let n = rows.len();
    let d = grid.len();
    let k_ff = DMatrix::from_fn(n, n, |i, k| se_cov(rows[i].warped, rows[k].warped, eta, l));
    let k_fd = DMatrix::from_fn(n, d, |i, a| se_cov_d1(rows[i].warped, grid[a], eta, l));
    let k_dd = DMatrix::from_fn(d, d, |a, c| se_cov_d2(grid[a], grid[c], eta, l));
    let mut s = DMatrix::zeros(n, n);
    for &(j, start, len) in &segments {
        let kind = &cohort.individuals[j].random_effect;
        for i in start..start + len {
            for k in start..start + len {
                s[(i, k)] = re_cov(kind, b, rows[i].time, rows[k].time);
            }
        }
    }
    let e = DVector::from_element(n, spec.noise_sd * spec.noise_sd);
    let block = BiomarkerBlock {
        biomarker: b,
        eta,
        length_scale: l,
        noise_sd: spec.noise_sd,
        lambda: spec.lambda,
        rows,
        segments,
        grid,
        k_ff,
        k_fd,
        k_dd,
        s,
        e,
        jitter: JITTER * eta * (1.0f64).max(1.0 / (l * l)),
    };
    if block.dim() > 0 && block.prior().cholesky().is_none() {
        return Err(Error::Numerical(format!(
            "prior covariance of biomarker {} ({}) is not positive definite after jitter",
            b, spec.name
        )));
    }
    Ok(block)
}
