//! Synthetic sigmoid cohorts and the time-shift recovery benchmark.

use crate::data::{assign_re_structure, BiomarkerSpec, Cohort, IndividualRecord, Observation, RandomEffectKind};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub n_biomarkers: usize,
    /// Observation noise sd, in score units.
    pub sigma: f64,
    /// Sd of the sigmoid slopes. The default reads `N(0, .06)` as a variance.
    pub alpha_sd: f64,
    /// Flip negative slopes so every curve increases with disease time.
    pub orient_increasing: bool,
    /// Use these slopes instead of drawing them, e.g. to sample several
    /// groups on the same trajectories.
    pub alpha: Option<Vec<f64>>,
    pub tau_span: (f64, f64),
    /// Inclusive range of visit counts per biomarker.
    pub samples_per_biomarker: (usize, usize),
    /// Spacing between consecutive visits, in years.
    pub visit_interval: f64,
    pub derivative_points: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 20,
            n_biomarkers: 4,
            sigma: 0.1,
            alpha_sd: 0.06f64.sqrt(),
            orient_increasing: true,
            alpha: None,
            tau_span: (0.0, 15.0),
            samples_per_biomarker: (1, 4),
            visit_interval: 1.0,
            derivative_points: crate::data::DEFAULT_DERIVATIVE_POINTS,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.samples_per_biomarker;
        let longest = (hi.max(1) - 1) as f64 * self.visit_interval;
        if self.n < 2 {
            return Err(Error::Invalid("need at least 2 individuals".into()));
        }
        if self.alpha.as_ref().is_some_and(|a| a.len() != self.n_biomarkers) {
            return Err(Error::Invalid("slope override has the wrong length".into()));
        }
        if self.n_biomarkers == 0 {
            return Err(Error::Invalid("need at least 1 biomarker".into()));
        }
        if !(self.sigma >= 0.0) || !(self.alpha_sd >= 0.0) {
            return Err(Error::Invalid("sigma and alpha_sd must be non-negative".into()));
        }
        if !(self.tau_span.1 > self.tau_span.0) {
            return Err(Error::Invalid("tau_span is degenerate".into()));
        }
        if lo == 0 || lo > hi || !(self.visit_interval > 0.0) {
            return Err(Error::Invalid("visit counts must satisfy 1 <= lo <= hi with positive spacing".into()));
        }
        if longest > self.tau_span.1 - self.tau_span.0 {
            return Err(Error::Invalid("visits do not fit inside tau_span".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Mean disease time of each individual's visits, `μ^j`.
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub truth: SynthTruth,
}

pub fn sigmoid(alpha: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (-alpha * tau).exp())
}

pub fn biomarker_name(k: usize) -> String {
    format!("b{:02}", k + 1)
}

/// Draws a cohort of noisy sigmoid trajectories. Each individual shares one
/// initial visit across biomarkers; times are stored centered on the
/// individual's mean visit time.
pub fn gen_sigmoid_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let slope = Normal::new(0.0, config.alpha_sd).map_err(|e| Error::Invalid(e.to_string()))?;
    let drawn: Vec<f64> = (0..config.n_biomarkers)
        .map(|_| {
            let a: f64 = slope.sample(&mut rng);
            if config.orient_increasing {
                a.abs()
            } else {
                a
            }
        })
        .collect();
    let alpha = config.alpha.clone().unwrap_or(drawn);
    let noise = Normal::new(0.0, config.sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let (lo, hi) = config.samples_per_biomarker;
    let mut individuals = Vec::with_capacity(config.n);
    let mut mu = Vec::with_capacity(config.n);
    for j in 0..config.n {
        let counts: Vec<usize> = (0..config.n_biomarkers).map(|_| rng.random_range(lo..=hi)).collect();
        let longest = (*counts.iter().max().unwrap() - 1) as f64 * config.visit_interval;
        let start = rng.random_range(config.tau_span.0..=config.tau_span.1 - longest);
        let centre = start + 0.5 * longest;
        let mut observations = Vec::new();
        for (k, &count) in counts.iter().enumerate() {
            for v in 0..count {
                let tau = start + v as f64 * config.visit_interval;
                let eps = if config.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                observations.push(Observation {
                    biomarker: k,
                    time: tau - centre,
                    value: sigmoid(alpha[k], tau) + eps,
                });
            }
        }
        let mut ind = IndividualRecord {
            id: format!("s{:04}", j + 1),
            observations,
            time_shift: 0.0,
            random_effect: RandomEffectKind::Zero,
        };
        ind.random_effect = assign_re_structure(&ind, config.n_biomarkers);
        individuals.push(ind);
        mu.push(centre);
    }
    let biomarkers = (0..config.n_biomarkers).map(|k| BiomarkerSpec::new(biomarker_name(k))).collect();
    let mut cohort = Cohort { biomarkers, individuals, derivative_grid: vec![] };
    cohort.reposition_grid(config.derivative_points);
    Ok(SynthCohort { cohort, truth: SynthTruth { mu, alpha } })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub r2: f64,
    pub abs_r: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Invalid("correlation needs at least 3 individuals".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between fitted shifts and true individual time centres.
pub fn eval_timeshift_correlation(fitted: &Cohort, truth: &SynthTruth) -> Result<Correlation> {
    let d: Vec<f64> = fitted.individuals.iter().map(|i| i.time_shift).collect();
    let r = pearson(&d, &truth.mu)?;
    Ok(Correlation { r, r2: r * r, abs_r: r.abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub n: usize,
    pub n_biomarkers: usize,
    pub sigma: f64,
}

impl BenchCell {
    /// Every cell of the published grid.
    pub fn table1() -> Vec<BenchCell> {
        let mut out = Vec::new();
        for n in [20, 100] {
            for n_biomarkers in [4, 8] {
                for sigma in [0.1, 0.2, 0.3, 0.4] {
                    out.push(BenchCell { n, n_biomarkers, sigma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cell: BenchCell,
    pub rep: usize,
    /// `None` when generation or fitting failed.
    pub correlation: Option<Correlation>,
    pub seconds: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub synth: SynthConfig,
    /// Record wall-clock seconds; when off the column is zero so output is
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 10,
            seed: 0,
            fit: FitConfig::default(),
            synth: SynthConfig::default(),
            timing: true,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one repetition. Cells that differ only in noise level share
/// trajectories and designs, so their comparison is paired.
pub fn rep_seed(seed: u64, cell: &BenchCell, rep: usize) -> u64 {
    splitmix(splitmix(splitmix(seed ^ cell.n as u64) ^ cell.n_biomarkers as u64) ^ rep as u64)
}

fn run_one(cell: BenchCell, rep: usize, opts: &BenchOptions) -> BenchRow {
    let start = Instant::now();
    let config = SynthConfig {
        n: cell.n,
        n_biomarkers: cell.n_biomarkers,
        sigma: cell.sigma,
        seed: rep_seed(opts.seed, &cell, rep),
        ..opts.synth.clone()
    };
    let outcome = gen_sigmoid_cohort(&config).and_then(|s| {
        let result = fit(&s.cohort, &opts.fit)?;
        Ok((eval_timeshift_correlation(&result.cohort, &s.truth)?, result.converged))
    });
    let seconds = if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    match outcome {
        Ok((c, converged)) => BenchRow { cell, rep, correlation: Some(c), seconds, converged },
        Err(e) => {
            log::warn!("cell {cell:?} rep {rep} failed: {e}");
            BenchRow { cell, rep, correlation: None, seconds, converged: false }
        }
    }
}

/// Generates, fits and scores every repetition of every cell in parallel.
/// Rows come back in cell-then-repetition order whatever the scheduling.
pub fn benchmark_table1(cells: &[BenchCell], opts: &BenchOptions) -> Vec<BenchRow> {
    let jobs: Vec<(BenchCell, usize)> = cells
        .iter()
        .flat_map(|&c| (0..opts.repetitions).map(move |r| (c, r)))
        .collect();
    jobs.into_par_iter().map(|(c, r)| run_one(c, r, opts)).collect()
}

pub const BENCH_HEADER: &str = "N,Nb,sigma,rep,r,r2,seconds,converged";

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for row in rows {
        let (r, r2) = match row.correlation {
            Some(c) => (c.r.to_string(), c.r2.to_string()),
            None => ("NaN".into(), "NaN".into()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.cell.n, row.cell.n_biomarkers, row.cell.sigma, row.rep, r, r2, row.seconds, row.converged
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: BenchCell,
    /// Repetitions that produced a correlation.
    pub completed: usize,
    pub mean_r: f64,
    pub mean_r2: f64,
    pub sd_r2: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn summarize(rows: &[BenchRow]) -> Vec<CellSummary> {
    let mut cells: Vec<BenchCell> = Vec::new();
    for row in rows {
        if !cells.contains(&row.cell) {
            cells.push(row.cell);
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let cs: Vec<Correlation> = rows.iter().filter(|r| r.cell == cell).filter_map(|r| r.correlation).collect();
            let r: Vec<f64> = cs.iter().map(|c| c.r).collect();
            let r2: Vec<f64> = cs.iter().map(|c| c.r2).collect();
            let (mean_r2, sd_r2) = mean_sd(&r2);
            CellSummary { cell, completed: cs.len(), mean_r: mean_sd(&r).0, mean_r2, sd_r2 }
        })
        .collect()
}

/// Table with one line per cell: `mean (sd)` of r².
pub fn format_summary(summary: &[CellSummary]) -> String {
    let mut out = String::from("    N  Nb  sigma  reps  r2 mean (sd)\n");
    for s in summary {
        out.push_str(&format!(
            "{:>5} {:>3} {:>6} {:>5}  {:.2} ({:.2})\n",
            s.cell.n, s.cell.n_biomarkers, s.cell.sigma, s.completed, s.mean_r2, s.sd_r2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint_and_flat_case() {
        assert_eq!(sigmoid(0.7, 0.0), 0.5);
        for t in [0.0, 3.0, 15.0] {
            assert_eq!(sigmoid(0.0, t), 0.5);
        }
    }

    #[test]
    fn rep_seed_ignores_noise_level() {
        let a = BenchCell { n: 20, n_biomarkers: 4, sigma: 0.1 };
        let b = BenchCell { sigma: 0.4, ..a };
        assert_eq!(rep_seed(3, &a, 2), rep_seed(3, &b, 2));
        assert_ne!(rep_seed(3, &a, 2), rep_seed(3, &a, 3));
    }

    #[test]
    fn config_rejects_overlong_visits() {
        let c = SynthConfig { tau_span: (0.0, 2.0), ..SynthConfig::default() };
        assert!(c.validate().is_err());
        assert!(SynthConfig { n: 1, ..SynthConfig::default() }.validate().is_err());
    }
}
