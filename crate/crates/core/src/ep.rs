//! Expectation propagation over the probit likelihoods of the virtual
//! derivative observations.
//!
//! Within one biomarker block the observations enter through an exact
//! Gaussian likelihood, so the derivative values are first conditioned on
//! the data: `f' | y ~ N(m, P)`. EP then runs on this low-dimensional
//! Gaussian with one site per derivative point. Sites are stored in natural
//! parameters (`tau = 1/σ̃²`, `nu = μ̃/σ̃²`) so a vacuous site is simply zero.

use crate::error::{Error, Result};
use crate::kernels::{BiomarkerBlock, JointGp};
use crate::normal;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Site variance used when a proposed update would be non-positive.
pub const CLAMPED_SITE_VAR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteOrder {
    Forward,
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpOptions {
    /// Fraction of the proposed natural-parameter step taken per update.
    pub damping: f64,
    pub max_sweeps: usize,
    /// Bound on the relative natural-parameter change of the last sweep.
    pub tol: f64,
    pub order: SiteOrder,
}

impl Default for EpOptions {
    fn default() -> Self {
        EpOptions {
            damping: 0.8,
            max_sweeps: 100,
            tol: 1e-6,
            order: SiteOrder::Forward,
        }
    }
}

/// One local Gaussian approximation `Z̃ N(f'|μ̃, σ̃²)`.
///
/// `log_scale` is the site's log normalizer once the Gaussian factor is
/// written as `exp(-τ f'²/2 + ν f')`; it stays finite for vacuous sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub tau: f64,
    pub nu: f64,
    pub log_scale: f64,
}

impl Site {
    pub const VACUOUS: Site = Site { tau: 0.0, nu: 0.0, log_scale: 0.0 };

    pub fn mean(&self) -> f64 {
        self.nu / self.tau
    }

    pub fn var(&self) -> f64 {
        if self.tau > 0.0 {
            1.0 / self.tau
        } else {
            f64::INFINITY
        }
    }

    pub fn is_vacuous(&self) -> bool {
        self.tau == 0.0 && self.nu == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cavity {
    pub mu: f64,
    pub var: f64,
}

impl Cavity {
    fn tau(&self) -> f64 {
        1.0 / self.var
    }

    fn nu(&self) -> f64 {
        self.mu / self.var
    }
}

/// Removes `site` from the posterior marginal `N(mu, var)`. Returns `None`
/// when the cavity variance would be non-positive.
pub fn cavity(mu: f64, var: f64, site: &Site) -> Option<Cavity> {
    let tau = 1.0 / var - site.tau;
    if !(tau > 0.0) || !tau.is_finite() {
        return None;
    }
    let nu = mu / var - site.nu;
    Some(Cavity { mu: nu / tau, var: 1.0 / tau })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    /// Normalizer `Φ(z)`.
    pub z: f64,
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
}

/// Moments of `N(x|mu_minus, var_minus) Φ(x/λ)`.
pub fn tilted_moments(mu_minus: f64, var_minus: f64, lambda: f64) -> TiltedMoments {
    let s = (lambda * lambda + var_minus).sqrt();
    let z = mu_minus / s;
    let r = normal::inv_mills(z);
    let log_z = normal::log_cdf(z);
    let mean = mu_minus + var_minus * r / s;
    let var = var_minus - var_minus * var_minus * r * (z + r) / (s * s);
    TiltedMoments { z: log_z.exp(), log_z, mean, var }
}

/// Site log normalizer such that cavity × site reproduces `log_z`.
fn site_log_scale(cav: &Cavity, site: &Site, log_z: f64) -> f64 {
    let (tm, nm) = (cav.tau(), cav.nu());
    let (t, n) = (site.tau, site.nu);
    log_z + 0.5 * (t / tm).ln_1p() + (nm * nm * t - 2.0 * nm * n * tm - n * n * tm) / (2.0 * tm * (tm + t))
}

/// EP over the derivative sites of one biomarker.
#[derive(Debug, Clone)]
pub struct DerivativeEp {
    /// Mean of the derivative values given the observations.
    pub m: DVector<f64>,
    /// Covariance of the derivative values given the observations.
    pub p: DMatrix<f64>,
    pub lambda: f64,
    pub sites: Vec<Site>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub skipped: usize,
    pub clamped: usize,
}

/// What happened to a site during [`DerivativeEp::update_site`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiteOutcome {
    Updated { change: f64 },
    Clamped { change: f64 },
    Skipped,
}

impl DerivativeEp {
    pub fn new(m: DVector<f64>, p: DMatrix<f64>, lambda: f64, sites: Vec<Site>) -> Result<Self> {
        let d = m.len();
        let mut ep = DerivativeEp {
            m,
            p,
            lambda,
            sites,
            mu: DVector::zeros(d),
            sigma: DMatrix::zeros(d, d),
            skipped: 0,
            clamped: 0,
        };
        ep.refresh()?;
        Ok(ep)
    }

    /// Recomputes the site posterior `N(mu, sigma)` from scratch.
    pub fn refresh(&mut self) -> Result<()> {
        let (mu, sigma) = site_posterior(&self.m, &self.p, &self.sites)?;
        self.mu = mu;
        self.sigma = sigma;
        Ok(())
    }

    pub fn cavity(&self, l: usize) -> Option<Cavity> {
        cavity(self.mu[l], self.sigma[(l, l)], &self.sites[l])
    }

    /// One damped moment-matching update of site `l` followed by a rank-one
    /// refresh of the posterior.
    pub fn update_site(&mut self, l: usize, damping: f64) -> SiteOutcome {
        let Some(cav) = self.cavity(l) else {
            self.skipped += 1;
            return SiteOutcome::Skipped;
        };
        let tm = tilted_moments(cav.mu, cav.var, self.lambda);
        let mut tau_new = 1.0 / tm.var - cav.tau();
        let mut nu_new = tm.mean / tm.var - cav.nu();
        let mut clamped = false;
        if tau_new.abs() <= 1e-12 * cav.tau() {
            // tilted equals cavity to working precision
            tau_new = 0.0;
        } else if !(tau_new > 0.0) || !tau_new.is_finite() {
            tau_new = 1.0 / CLAMPED_SITE_VAR;
            nu_new = tm.mean / CLAMPED_SITE_VAR;
            clamped = true;
            self.clamped += 1;
        }
        let old = self.sites[l];
        let tau = (1.0 - damping) * old.tau + damping * tau_new;
        let nu = (1.0 - damping) * old.nu + damping * nu_new;
        let (dt, dn) = (tau - old.tau, nu - old.nu);
        let change = (dt.abs() / (1.0 + old.tau.abs())).max(dn.abs() / (1.0 + old.nu.abs()));

        let s_col = self.sigma.column(l).into_owned();
        let denom = 1.0 + dt * s_col[l];
        let mu_l = self.mu[l];
        self.sigma -= (&s_col * s_col.transpose()) * (dt / denom);
        self.mu += &s_col * ((dn - dt * mu_l) / denom);

        let site = Site { tau, nu, log_scale: 0.0 };
        self.sites[l] = Site { log_scale: site_log_scale(&cav, &site, tm.log_z), ..site };
        if clamped {
            SiteOutcome::Clamped { change }
        } else {
            SiteOutcome::Updated { change }
        }
    }

    /// Recomputes every site's `log_scale` against its current cavity.
    fn finalize_scales(&mut self) {
        for l in 0..self.sites.len() {
            if let Some(cav) = self.cavity(l) {
                let tm = tilted_moments(cav.mu, cav.var, self.lambda);
                self.sites[l].log_scale = site_log_scale(&cav, &self.sites[l], tm.log_z);
            }
        }
    }
}

/// `N(mu, Σ)` proportional to `N(m, P) Π exp(-τ_l x_l²/2 + ν_l x_l)`.
fn site_posterior(m: &DVector<f64>, p: &DMatrix<f64>, sites: &[Site]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = m.len();
    if d == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let sw = DVector::from_iterator(d, sites.iter().map(|s| s.tau.sqrt()));
    let nu = DVector::from_iterator(d, sites.iter().map(|s| s.nu));
    let chol = chol_b(p, &sw)?;
    // V = L⁻¹ S P
    let sp = DMatrix::from_fn(d, d, |i, k| sw[i] * p[(i, k)]);
    let v = chol.l().solve_lower_triangular(&sp).expect("triangular solve");
    let sigma = p - v.transpose() * &v;
    let w = &nu - DVector::from_fn(d, |i, _| sites[i].tau * m[i]);
    let mu = m + &sigma * w;
    Ok((mu, sigma))
}

/// Cholesky of `I + S P S`.
fn chol_b(p: &DMatrix<f64>, sw: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = sw.len();
    let b = DMatrix::from_fn(d, d, |i, k| sw[i] * p[(i, k)] * sw[k] + if i == k { 1.0 } else { 0.0 });
    b.cholesky()
        .ok_or_else(|| Error::Numerical("I + S P S is not positive definite".into()))
}

/// Everything needed to predict from, score, and differentiate one fitted
/// biomarker block with its sites held fixed.
#[derive(Debug, Clone)]
pub struct BlockPosterior {
    pub block: BiomarkerBlock,
    pub sites: Vec<Site>,
    chol_a: Cholesky<f64, Dyn>,
    /// `A⁻¹ C_od` with `A = C_oo + Σ_ε + Σ_S`.
    a_inv_c_od: DMatrix<f64>,
    m: DVector<f64>,
    p: DMatrix<f64>,
    sw: DVector<f64>,
    chol_b: Cholesky<f64, Dyn>,
    /// `(C + Σ̃_joint)⁻¹ μ̃_joint`.
    pub alpha: DVector<f64>,
}

impl BlockPosterior {
    /// Conditions the derivative rows of `block` on its observations.
    fn condition(block: &BiomarkerBlock) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let n = block.n_obs();
        let d = block.n_deriv();
        let c = block.prior();
        let a = c.view((0, 0), (n, n)) + block.obs_noise();
        let chol_a = a.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "observation covariance of biomarker {} is not positive definite",
                block.biomarker
            ))
        })?;
        let c_od = c.view((0, n), (n, d)).into_owned();
        let a_inv_c_od = chol_a.solve(&c_od);
        let y = block.y();
        let m = a_inv_c_od.transpose() * &y;
        let mut p = c.view((n, n), (d, d)) - c_od.transpose() * &a_inv_c_od;
        p = (&p + p.transpose()) * 0.5;
        Ok((chol_a, a_inv_c_od, m, p))
    }

    pub fn new(block: BiomarkerBlock, sites: Vec<Site>) -> Result<Self> {
        if sites.len() != block.n_deriv() {
            return Err(Error::Invalid(format!(
                "{} sites for {} derivative points",
                sites.len(),
                block.n_deriv()
            )));
        }
        let (chol_a, a_inv_c_od, m, p) = Self::condition(&block)?;
        Self::assemble(block, sites, chol_a, a_inv_c_od, m, p)
    }

    fn assemble(
        block: BiomarkerBlock,
        sites: Vec<Site>,
        chol_a: Cholesky<f64, Dyn>,
        a_inv_c_od: DMatrix<f64>,
        m: DVector<f64>,
        p: DMatrix<f64>,
    ) -> Result<Self> {
        let d = sites.len();
        let sw = DVector::from_iterator(d, sites.iter().map(|s| s.tau.sqrt()));
        let chol_b = chol_b(&p, &sw)?;
        // derivative part: (P + T⁻¹)⁻¹ (μ̃ - m) = w - S B⁻¹ S P w, w = ν̃ - T m
        let w = DVector::from_fn(d, |i, _| sites[i].nu - sites[i].tau * m[i]);
        let spw = sw.component_mul(&(&p * &w));
        let alpha_d = &w - sw.component_mul(&chol_b.solve(&spw));
        let y = block.y();
        let alpha_o = chol_a.solve(&(y - block.k_fd.clone() * &alpha_d));
        let n = block.n_obs();
        let mut alpha = DVector::zeros(n + d);
        alpha.rows_mut(0, n).copy_from(&alpha_o);
        alpha.rows_mut(n, d).copy_from(&alpha_d);
        Ok(BlockPosterior { block, sites, chol_a, a_inv_c_od, m, p, sw, chol_b, alpha })
    }

    /// `(P + T⁻¹)⁻¹ = S B⁻¹ S`.
    fn g(&self) -> DMatrix<f64> {
        let d = self.sw.len();
        let binv = self.chol_b.inverse();
        DMatrix::from_fn(d, d, |i, k| self.sw[i] * binv[(i, k)] * self.sw[k])
    }

    /// `(C + Σ̃_joint)⁻¹`, finite even with vacuous sites.
    pub fn m_inv(&self) -> DMatrix<f64> {
        let n = self.block.n_obs();
        let d = self.block.n_deriv();
        let a_inv = self.chol_a.inverse();
        let g = self.g();
        let e = &self.a_inv_c_od;
        let eg = e * &g;
        let mut out = DMatrix::zeros(n + d, n + d);
        out.view_mut((0, 0), (n, n)).copy_from(&(a_inv + &eg * e.transpose()));
        out.view_mut((0, n), (n, d)).copy_from(&(-&eg));
        out.view_mut((n, 0), (d, n)).copy_from(&(-eg.transpose()));
        out.view_mut((n, n), (d, d)).copy_from(&g);
        out
    }

    /// Predictive mean and variance of `f(t*)`, or of `f'(t*)` when
    /// `derivative` is set.
    pub fn predict_at(&self, t_star: f64, derivative: bool) -> (f64, f64) {
        let k = if derivative { self.block.cross_df(t_star) } else { self.block.cross_f(t_star) };
        let prior = if derivative {
            self.block.eta / (self.block.length_scale * self.block.length_scale)
        } else {
            self.block.eta
        };
        let mean = k.dot(&self.alpha);
        (mean, prior - self.explained(&k))
    }

    /// `kᵀ (C + Σ̃_joint)⁻¹ k` by blocks.
    fn explained(&self, k: &DVector<f64>) -> f64 {
        let n = self.block.n_obs();
        let d = self.block.n_deriv();
        let k_o = k.rows(0, n).into_owned();
        let a_inv_k = self.chol_a.solve(&k_o);
        let u = k.rows(n, d) - self.block.k_fd.transpose() * &a_inv_k;
        let su = self.sw.component_mul(&u);
        k_o.dot(&a_inv_k) + su.dot(&self.chol_b.solve(&su))
    }

    /// Joint predictive covariance of `f` at several times.
    pub fn predict_cov(&self, times: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.block.n_obs();
        let d = self.block.n_deriv();
        let q = times.len();
        let ks: Vec<DVector<f64>> = times.iter().map(|&t| self.block.cross_f(t)).collect();
        let mean = DVector::from_iterator(q, ks.iter().map(|k| k.dot(&self.alpha)));
        // W_o = A⁻¹ K_o, U = K_d - C_doW_o, then kᵀM⁻¹k' = k_oᵀW_o' + (SU)ᵀB⁻¹(SU')
        let k_o = DMatrix::from_fn(n, q, |i, c| ks[c][i]);
        let k_d = DMatrix::from_fn(d, q, |i, c| ks[c][n + i]);
        let w_o = self.chol_a.solve(&k_o);
        let u = k_d - self.block.k_fd.transpose() * &w_o;
        let su = DMatrix::from_fn(d, q, |i, c| self.sw[i] * u[(i, c)]);
        let explained = k_o.transpose() * &w_o + su.transpose() * self.chol_b.solve(&su);
        let (eta, l) = (self.block.eta, self.block.length_scale);
        let prior = DMatrix::from_fn(q, q, |a, b| crate::kernels::se_cov(times[a], times[b], eta, l));
        let mut cov = prior - explained;
        cov = (&cov + cov.transpose()) * 0.5;
        (mean, cov)
    }

    /// Joint posterior `N(μ, Σ)` over `[f(obs); f'(grid)]`.
    pub fn joint_posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let c = self.block.prior();
        let mu = &c * &self.alpha;
        let mut sigma = &c - &c * self.m_inv() * &c;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        (mu, sigma)
    }

    /// Log marginal likelihood of the block with its sites held fixed.
    pub fn log_marginal(&self) -> f64 {
        let y = self.block.y();
        let n = y.len();
        let a_inv_y = self.chol_a.solve(&y);
        let log_det_a = 2.0 * self.chol_a.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut f = -0.5 * y.dot(&a_inv_y) - 0.5 * log_det_a - 0.5 * n as f64 * LN_2PI;

        let d = self.sites.len();
        if d == 0 {
            return f;
        }
        let w = DVector::from_fn(d, |i, _| self.sites[i].nu - self.sites[i].tau * self.m[i]);
        let pw = &self.p * &w;
        let spw = self.sw.component_mul(&pw);
        // wᵀΣw with Σ = P - PSB⁻¹SP
        let w_sigma_w = w.dot(&pw) - spw.dot(&self.chol_b.solve(&spw));
        let log_det_b = 2.0 * self.chol_b.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let nu_m: f64 = self.sites.iter().zip(self.m.iter()).map(|(s, &mi)| s.nu * mi - 0.5 * s.tau * mi * mi).sum();
        let scales: f64 = self.sites.iter().map(|s| s.log_scale).sum();
        f += -0.5 * log_det_b + 0.5 * w_sigma_w + nu_m + scales;
        f
    }

    /// Marginals of the site posterior at the derivative points.
    pub fn derivative_marginals(&self) -> Vec<(f64, f64)> {
        let d = self.sites.len();
        let (mu, sigma) = site_posterior(&self.m, &self.p, &self.sites).expect("factorized before");
        (0..d).map(|i| (mu[i], sigma[(i, i)])).collect()
    }

    pub fn cavities(&self) -> Vec<Option<Cavity>> {
        self.derivative_marginals()
            .iter()
            .zip(&self.sites)
            .map(|(&(mu, var), s)| cavity(mu, var, s))
            .collect()
    }
}

/// Converged (or best-effort) EP state of one biomarker.
#[derive(Debug, Clone)]
pub struct BlockEp {
    pub posterior: BlockPosterior,
    pub log_marginal: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub skipped: usize,
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct EpState {
    pub blocks: Vec<BlockEp>,
    pub log_marginal: f64,
    pub converged: bool,
}

impl EpState {
    pub fn sites(&self) -> Vec<Vec<Site>> {
        self.blocks.iter().map(|b| b.posterior.sites.clone()).collect()
    }
}

/// Runs EP on one block from vacuous sites.
pub fn ep_run_block(block: BiomarkerBlock, opts: &EpOptions) -> Result<BlockEp> {
    let d = block.n_deriv();
    let (chol_a, a_inv_c_od, m, p) = BlockPosterior::condition(&block)?;
    let mut ep = DerivativeEp::new(m.clone(), p.clone(), block.lambda, vec![Site::VACUOUS; d])?;
    let mut order: Vec<usize> = (0..d).collect();
    let mut rng = match opts.order {
        SiteOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        SiteOrder::Forward => None,
    };
    let mut converged = d == 0;
    let mut sweeps = 0;
    while !converged && sweeps < opts.max_sweeps {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let mut max_change = 0.0f64;
        for &l in &order {
            match ep.update_site(l, opts.damping) {
                SiteOutcome::Updated { change } | SiteOutcome::Clamped { change } => {
                    max_change = max_change.max(change)
                }
                SiteOutcome::Skipped => {}
            }
        }
        ep.refresh()?;
        sweeps += 1;
        converged = max_change < opts.tol;
    }
    ep.finalize_scales();
    let posterior = BlockPosterior::assemble(block, ep.sites.clone(), chol_a, a_inv_c_od, m, p)?;
    let log_marginal = posterior.log_marginal();
    Ok(BlockEp {
        posterior,
        log_marginal,
        sweeps,
        converged,
        skipped: ep.skipped,
        clamped: ep.clamped,
    })
}

/// Runs EP independently on every biomarker block.
pub fn ep_run(joint: &JointGp, opts: &EpOptions) -> Result<EpState> {
    let blocks = joint
        .blocks
        .iter()
        .map(|b| ep_run_block(b.clone(), opts))
        .collect::<Result<Vec<_>>>()?;
    let log_marginal = blocks.iter().map(|b| b.log_marginal).sum();
    let converged = blocks.iter().all(|b| b.converged);
    Ok(EpState { blocks, log_marginal, converged })
}
