//! Penalized EP marginal likelihood, its gradient with sites held fixed, and
//! the alternating conjugate-gradient fit over hyperparameters, random-effect
//! scales and time shifts.

use crate::data::{Cohort, DEFAULT_DERIVATIVE_POINTS, DEFAULT_RE_SD};
use crate::ep::{ep_run, BlockPosterior, EpOptions, EpState, Site, SiteOrder};
use crate::error::{Error, Result};
use crate::kernels::{assemble_block, BiomarkerBlock};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian prior on one scalar. An infinite `sd` makes it flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: f64,
    pub sd: f64,
}

impl Prior {
    pub fn new(mean: f64, sd: f64) -> Self {
        Prior { mean, sd }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if self.sd.is_infinite() {
            return 0.0;
        }
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * LN_2PI
    }

    pub fn grad(&self, x: f64) -> f64 {
        if self.sd.is_infinite() {
            return 0.0;
        }
        -(x - self.mean) / (self.sd * self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    /// Conjugate-gradient iterations per parameter block per outer iteration.
    pub cg_iters: usize,
    /// Stop once the objective changes by less than this between outer iterations.
    pub tol: f64,
    /// Prior means of `log η_b` and `log l_b`; `None` uses the data-driven
    /// defaults (log sample variance, log half time range).
    pub log_eta_mean: Option<f64>,
    pub log_eta_sd: f64,
    pub log_l_mean: Option<f64>,
    pub log_l_sd: f64,
    pub log_noise_mean: f64,
    pub log_noise_sd: f64,
    pub log_re_mean: f64,
    pub log_re_sd: f64,
    /// Prior sd of every time shift; `None` uses the pooled time range.
    pub shift_sd: Option<f64>,
    pub lambda: f64,
    pub derivative_points: usize,
    /// Reset hyperparameters, shifts and random effects to the defaults
    /// before fitting. When off the cohort's current values are the start.
    pub initialize: bool,
    pub ep: EpOptions,
    /// Visit EP sites in a seeded random order instead of left to right.
    pub shuffle_sites: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer_iters: 30,
            cg_iters: 10,
            tol: 1e-3,
            log_eta_mean: None,
            log_eta_sd: 1.0,
            log_l_mean: None,
            log_l_sd: 1.0,
            log_noise_mean: 0.1f64.ln(),
            log_noise_sd: 1.0,
            log_re_mean: DEFAULT_RE_SD.ln(),
            log_re_sd: 0.5,
            shift_sd: None,
            lambda: 1e-6,
            derivative_points: DEFAULT_DERIVATIVE_POINTS,
            initialize: true,
            ep: EpOptions::default(),
            shuffle_sites: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let sds = [self.log_eta_sd, self.log_l_sd, self.log_noise_sd, self.log_re_sd, self.shift_sd.unwrap_or(1.0)];
        if self.max_outer_iters == 0 || self.cg_iters == 0 {
            return Err(Error::Invalid("iteration counts must be at least 1".into()));
        }
        if sds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("prior sds must be positive".into()));
        }
        if !(self.lambda > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Invalid("lambda must be positive and tol non-negative".into()));
        }
        if !(self.ep.damping > 0.0 && self.ep.damping <= 1.0) || self.ep.max_sweeps == 0 {
            return Err(Error::Invalid("EP damping must be in (0, 1] with at least one sweep".into()));
        }
        Ok(())
    }
}

/// Resolved priors for one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub log_eta: Vec<Prior>,
    pub log_l: Vec<Prior>,
    pub log_noise: Prior,
    pub log_re: Prior,
    pub shift: Prior,
}

impl Priors {
    pub fn new(cohort: &Cohort, config: &FitConfig) -> Self {
        let range = pooled_time_range(cohort);
        let log_eta = (0..cohort.biomarkers.len())
            .map(|b| Prior::new(config.log_eta_mean.unwrap_or_else(|| sample_variance(cohort, b).ln()), config.log_eta_sd))
            .collect();
        let log_l = vec![Prior::new(config.log_l_mean.unwrap_or((0.5 * range).ln()), config.log_l_sd); cohort.biomarkers.len()];
        Priors {
            log_eta,
            log_l,
            log_noise: Prior::new(config.log_noise_mean, config.log_noise_sd),
            log_re: Prior::new(config.log_re_mean, config.log_re_sd),
            shift: Prior::new(0.0, config.shift_sd.unwrap_or(range)),
        }
    }

    /// Priors that contribute nothing, so the objective is the bare log marginal.
    pub fn flat(n_biomarkers: usize) -> Self {
        let flat = Prior::new(0.0, f64::INFINITY);
        Priors {
            log_eta: vec![flat; n_biomarkers],
            log_l: vec![flat; n_biomarkers],
            log_noise: flat,
            log_re: flat,
            shift: flat,
        }
    }
}

/// Range of raw observation times over the whole cohort, 1 if degenerate.
pub fn pooled_time_range(cohort: &Cohort) -> f64 {
    let (lo, hi) = cohort
        .individuals
        .iter()
        .flat_map(|i| i.observations.iter().map(|o| o.time))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if hi - lo > 1e-12 {
        hi - lo
    } else {
        1.0
    }
}

/// Unbiased sample variance of one biomarker's values, floored at 1e-4.
pub fn sample_variance(cohort: &Cohort, b: usize) -> f64 {
    let v: Vec<f64> = cohort
        .individuals
        .iter()
        .flat_map(|i| i.observations.iter().filter(|o| o.biomarker == b).map(|o| o.value))
        .collect();
    if v.len() < 2 {
        return 1e-4;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
    var.max(1e-4)
}

/// The three parameter groups optimized in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    /// `[log η_b, log l_b, log σ_b]` for every biomarker.
    Hyper,
    /// `log σ_b^j` for every individual with a random effect, biomarker-major within each individual.
    Individual,
    /// `d^j` for every individual.
    Shifts,
}

pub fn get_params(cohort: &Cohort, block: ParamBlock) -> Vec<f64> {
    match block {
        ParamBlock::Hyper => cohort
            .biomarkers
            .iter()
            .flat_map(|b| [b.eta.ln(), b.length_scale.ln(), b.noise_sd.ln()])
            .collect(),
        ParamBlock::Individual => cohort
            .individuals
            .iter()
            .filter_map(|i| i.random_effect.sigmas())
            .flat_map(|s| s.iter().map(|v| v.ln()))
            .collect(),
        ParamBlock::Shifts => cohort.individuals.iter().map(|i| i.time_shift).collect(),
    }
}

pub fn set_params(cohort: &mut Cohort, block: ParamBlock, x: &[f64]) {
    match block {
        ParamBlock::Hyper => {
            for (b, chunk) in cohort.biomarkers.iter_mut().zip(x.chunks(3)) {
                b.eta = chunk[0].exp();
                b.length_scale = chunk[1].exp();
                b.noise_sd = chunk[2].exp();
            }
        }
        ParamBlock::Individual => {
            let mut it = x.iter();
            for ind in &mut cohort.individuals {
                if let Some(s) = ind.random_effect.sigmas_mut() {
                    for v in s.iter_mut() {
                        *v = it.next().expect("parameter vector too short").exp();
                    }
                }
            }
        }
        ParamBlock::Shifts => {
            for (ind, &d) in cohort.individuals.iter_mut().zip(x) {
                ind.time_shift = d;
            }
        }
    }
}

/// Sum of every log-prior density at the cohort's current parameters.
pub fn log_prior(cohort: &Cohort, priors: &Priors) -> f64 {
    let mut out = 0.0;
    for (b, spec) in cohort.biomarkers.iter().enumerate() {
        out += priors.log_eta[b].log_pdf(spec.eta.ln());
        out += priors.log_l[b].log_pdf(spec.length_scale.ln());
        out += priors.log_noise.log_pdf(spec.noise_sd.ln());
    }
    for ind in &cohort.individuals {
        if let Some(s) = ind.random_effect.sigmas() {
            out += s.iter().map(|v| priors.log_re.log_pdf(v.ln())).sum::<f64>();
        }
        out += priors.shift.log_pdf(ind.time_shift);
    }
    out
}

fn log_prior_grad(cohort: &Cohort, priors: &Priors, block: ParamBlock) -> Vec<f64> {
    match block {
        ParamBlock::Hyper => cohort
            .biomarkers
            .iter()
            .enumerate()
            .flat_map(|(b, s)| {
                [
                    priors.log_eta[b].grad(s.eta.ln()),
                    priors.log_l[b].grad(s.length_scale.ln()),
                    priors.log_noise.grad(s.noise_sd.ln()),
                ]
            })
            .collect(),
        ParamBlock::Individual => get_params(cohort, block).iter().map(|&x| priors.log_re.grad(x)).collect(),
        ParamBlock::Shifts => get_params(cohort, block).iter().map(|&x| priors.shift.grad(x)).collect(),
    }
}

/// Penalized log marginal: EP is run to convergence from vacuous sites.
/// Numerical failures give `-∞`.
pub fn objective(cohort: &Cohort, priors: &Priors, ep: &EpOptions) -> f64 {
    match crate::kernels::assemble_joint(cohort).and_then(|j| ep_run(&j, ep)) {
        Ok(state) => state.log_marginal + log_prior(cohort, priors),
        Err(e) => {
            log::warn!("objective evaluation failed: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// Penalized log marginal with the given EP sites held fixed.
pub fn objective_with_sites(cohort: &Cohort, sites: &[Vec<Site>], priors: &Priors) -> Result<f64> {
    let mut out = log_prior(cohort, priors);
    for (b, s) in sites.iter().enumerate() {
        let post = BlockPosterior::new(assemble_block(cohort, b)?, s.clone())?;
        out += post.log_marginal();
    }
    Ok(out)
}

/// `α αᵀ - (C + Σ̃_joint)⁻¹`; half its trace against `∂M` is the gradient.
fn gradient_kernel(post: &BlockPosterior) -> DMatrix<f64> {
    &post.alpha * post.alpha.transpose() - post.m_inv()
}

/// Gradient of [`objective_with_sites`] with respect to one parameter block.
pub fn grad_objective(cohort: &Cohort, sites: &[Vec<Site>], priors: &Priors, block: ParamBlock) -> Result<Vec<f64>> {
    let mut grad = log_prior_grad(cohort, priors, block);
    // offsets of each individual's random-effect parameters
    let mut re_offset = vec![None; cohort.individuals.len()];
    let mut k = 0;
    for (j, ind) in cohort.individuals.iter().enumerate() {
        if ind.random_effect.sigmas().is_some() {
            re_offset[j] = Some(k);
            k += cohort.biomarkers.len();
        }
    }
    for (b, s) in sites.iter().enumerate() {
        let blk = assemble_block(cohort, b)?;
        let post = BlockPosterior::new(blk, s.clone())?;
        let q = gradient_kernel(&post);
        let blk = &post.block;
        match block {
            ParamBlock::Hyper => {
                let n = blk.n_obs();
                grad[3 * b] += 0.5 * q.dot(&blk.d_prior_dlog_eta());
                grad[3 * b + 1] += 0.5 * q.dot(&blk.d_prior_dlog_l());
                let noise_var = blk.noise_sd * blk.noise_sd;
                grad[3 * b + 2] += (0..n).map(|i| q[(i, i)]).sum::<f64>() * noise_var;
            }
            ParamBlock::Individual => {
                for &(j, start, len) in &blk.segments {
                    if let Some(off) = re_offset[j] {
                        // ∂R/∂log σ_b^j = 2 S_j
                        let mut acc = 0.0;
                        for r in start..start + len {
                            for c in start..start + len {
                                acc += q[(r, c)] * blk.s[(r, c)];
                            }
                        }
                        grad[off + b] += acc;
                    }
                }
            }
            ParamBlock::Shifts => {
                for &(j, start, len) in &blk.segments {
                    grad[j] += shift_gradient(blk, &q, start, len);
                }
            }
        }
    }
    Ok(grad)
}

fn shift_gradient(blk: &BiomarkerBlock, q: &DMatrix<f64>, start: usize, len: usize) -> f64 {
    // entries within the individual's own rows depend on time differences only
    let mut acc = 0.0;
    for r in start..start + len {
        for c in (0..start).chain(start + len..blk.dim()) {
            acc += q[(r, c)] * blk.d_prior_dtime(r, c);
        }
    }
    acc
}

/// Gradient of the fixed-site log marginal with respect to every derivative
/// location, per biomarker.
pub fn grad_grid(cohort: &Cohort, sites: &[Vec<Site>]) -> Result<Vec<Vec<f64>>> {
    sites
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let post = BlockPosterior::new(assemble_block(cohort, b)?, s.clone())?;
            let q = gradient_kernel(&post);
            let blk = &post.block;
            let n = blk.n_obs();
            Ok((0..blk.n_deriv())
                .map(|a| (0..blk.dim()).map(|c| q[(n + a, c)] * blk.d_prior_dgrid(a, c)).sum())
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub cohort: Cohort,
    pub state: EpState,
    pub priors: Priors,
    /// Penalized objective at the start of every outer iteration and after the last.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        self.state.log_marginal + log_prior(&self.cohort, &self.priors)
    }
}

/// Resets hyperparameters, shifts, random effects and the derivative grid
/// to the scale-aware defaults.
pub fn initialize(cohort: &mut Cohort, config: &FitConfig) {
    let range = pooled_time_range(cohort);
    for b in 0..cohort.biomarkers.len() {
        let eta = sample_variance(cohort, b);
        let spec = &mut cohort.biomarkers[b];
        spec.eta = eta;
        spec.length_scale = 0.5 * range;
        spec.noise_sd = 0.25 * eta.sqrt();
        spec.lambda = config.lambda;
    }
    for ind in &mut cohort.individuals {
        ind.time_shift = 0.0;
    }
    cohort.assign_random_effects();
    cohort.reposition_grid(config.derivative_points);
}

/// Shifts every `d^j` so that they average to zero.
pub fn center_shifts(cohort: &mut Cohort) {
    let n = cohort.individuals.len();
    if n == 0 {
        return;
    }
    let mean = cohort.individuals.iter().map(|i| i.time_shift).sum::<f64>() / n as f64;
    for ind in &mut cohort.individuals {
        ind.time_shift -= mean;
    }
}

fn max_step(block: ParamBlock, priors: &Priors) -> f64 {
    match block {
        ParamBlock::Hyper | ParamBlock::Individual => 1.0,
        ParamBlock::Shifts => {
            if priors.shift.sd.is_finite() {
                0.5 * priors.shift.sd
            } else {
                1.0
            }
        }
    }
}

/// Polak–Ribière conjugate-gradient ascent with Armijo backtracking on one
/// parameter block, sites fixed. Returns the final surrogate objective.
fn cg_block(cohort: &mut Cohort, sites: &[Vec<Site>], priors: &Priors, block: ParamBlock, iters: usize) -> Result<f64> {
    let mut x = get_params(cohort, block);
    if x.is_empty() {
        return objective_with_sites(cohort, sites, priors);
    }
    let eval = |base: &Cohort, x: &[f64]| -> f64 {
        let mut c = base.clone();
        set_params(&mut c, block, x);
        objective_with_sites(&c, sites, priors).unwrap_or(f64::NEG_INFINITY)
    };
    let mut f = objective_with_sites(cohort, sites, priors)?;
    let mut g = grad_objective(cohort, sites, priors, block)?;
    let mut p = g.clone();
    let cap = max_step(block, priors);
    for _ in 0..iters {
        let mut slope: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            p = g.clone();
            slope = g.iter().map(|v| v * v).sum();
        }
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        let p_max = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = (cap / p_max).min(1.0);
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            let fc = eval(cohort, &cand);
            if fc.is_finite() && fc >= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        x = cand;
        set_params(cohort, block, &x);
        let g_new = grad_objective(cohort, sites, priors, block)?;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let beta = (g_new.iter().zip(&g).map(|(a, b)| a * (a - b)).sum::<f64>() / gg).max(0.0);
        p = g_new.iter().zip(&p).map(|(a, b)| a + beta * b).collect();
        g = g_new;
        let done = (fc - f).abs() < 1e-10 * (1.0 + f.abs());
        f = fc;
        if done {
            break;
        }
    }
    Ok(f)
}

/// Alternating maximization of the penalized EP log marginal.
pub fn fit(cohort: &Cohort, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if cohort.individuals.is_empty() {
        return Err(Error::Empty("cohort has no individuals".into()));
    }
    let mut cohort = cohort.clone();
    if config.initialize {
        initialize(&mut cohort, config);
    } else if cohort.derivative_grid.iter().any(|g| g.len() != config.derivative_points)
        || cohort.derivative_grid.len() != cohort.biomarkers.len()
    {
        cohort.reposition_grid(config.derivative_points);
    }
    cohort.validate()?;
    let priors = Priors::new(&cohort, config);
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, Cohort, EpState)> = None;
    let mut converged = false;

    for it in 0..=config.max_outer_iters {
        let mut ep = config.ep;
        if config.shuffle_sites {
            ep.order = SiteOrder::Shuffled(config.seed.wrapping_add(it as u64));
        }
        let state = crate::kernels::assemble_joint(&cohort).and_then(|j| ep_run(&j, &ep))?;
        if !state.converged {
            warnings.push(format!("iteration {it}: EP did not converge"));
        }
        let f = state.log_marginal + log_prior(&cohort, &priors);
        if !f.is_finite() {
            return Err(Error::Numerical(format!("iteration {it}: objective is {f}")));
        }
        if let Some(&prev) = trace.last() {
            if f < prev {
                warnings.push(format!("iteration {it}: objective dipped by {:.3e}", prev - f));
            }
        }
        log::debug!("outer iteration {it}: objective {f:.6}");
        let improvement = trace.last().map(|&prev| (f - prev).abs());
        trace.push(f);
        if best.as_ref().is_none_or(|(bf, _, _)| f > *bf) {
            best = Some((f, cohort.clone(), state.clone()));
        }
        if improvement.is_some_and(|d| d < config.tol) {
            converged = true;
            break;
        }
        if it == config.max_outer_iters {
            break;
        }
        let sites = state.sites();
        for block in [ParamBlock::Hyper, ParamBlock::Individual, ParamBlock::Shifts] {
            cg_block(&mut cohort, &sites, &priors, block, config.cg_iters)?;
        }
        center_shifts(&mut cohort);
        cohort.reposition_grid(config.derivative_points);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let (_, cohort, state) = best.expect("at least one iteration");
    Ok(FitResult { cohort, state, priors, trace, converged, warnings })
}
