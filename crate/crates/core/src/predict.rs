//! Posterior predictive trajectories and staging of new individuals.

use crate::data::{Cohort, Observation};
use crate::ep::{BlockPosterior, Site};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::kernels::assemble_block;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default number of candidate stages.
pub const STAGE_POINTS: usize = 201;

/// A fitted cohort with one posterior per biomarker, ready for prediction.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub cohort: Cohort,
    pub posteriors: Vec<BlockPosterior>,
}

impl FittedModel {
    pub fn from_fit(fit: &FitResult) -> Self {
        FittedModel {
            cohort: fit.cohort.clone(),
            posteriors: fit.state.blocks.iter().map(|b| b.posterior.clone()).collect(),
        }
    }

    /// Rebuilds the posteriors of `cohort` from stored EP sites.
    pub fn from_sites(cohort: Cohort, sites: Vec<Vec<Site>>) -> Result<Self> {
        cohort.validate()?;
        if sites.len() != cohort.biomarkers.len() {
            return Err(Error::Invalid(format!(
                "{} site vectors for {} biomarkers",
                sites.len(),
                cohort.biomarkers.len()
            )));
        }
        let posteriors = sites
            .into_iter()
            .enumerate()
            .map(|(b, s)| BlockPosterior::new(assemble_block(&cohort, b)?, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(FittedModel { cohort, posteriors })
    }

    pub fn sites(&self) -> Vec<Vec<Site>> {
        self.posteriors.iter().map(|p| p.sites.clone()).collect()
    }

    pub fn n_biomarkers(&self) -> usize {
        self.posteriors.len()
    }

    /// Predictive mean and variance of biomarker `b` at disease time `t`.
    pub fn predict_curve(&self, b: usize, t: f64) -> (f64, f64) {
        self.posteriors[b].predict_at(t, false)
    }

    /// Predictive mean and variance of the slope of biomarker `b` at `t`.
    pub fn predict_slope(&self, b: usize, t: f64) -> (f64, f64) {
        self.posteriors[b].predict_at(t, true)
    }

    pub fn mean_length_scale(&self) -> f64 {
        let bs = &self.cohort.biomarkers;
        bs.iter().map(|b| b.length_scale).sum::<f64>() / bs.len() as f64
    }

    /// Default staging grid: the warped training range widened by twice the
    /// mean length scale on both sides.
    pub fn default_stage_grid(&self) -> StageGrid {
        let (lo, hi) = self.cohort.pooled_warped_range().unwrap_or((0.0, 1.0));
        let pad = 2.0 * self.mean_length_scale();
        StageGrid { lo: lo - pad, hi: hi + pad, points: STAGE_POINTS }
    }

    /// Log-likelihood of a subject's observations if their first visit sits
    /// at disease time `t`. Biomarkers are independent given `t`; within a
    /// biomarker the visits share the joint predictive at `t + Δ`.
    pub fn stage_log_likelihood(&self, subject: &StageSubject, t: f64) -> f64 {
        let t0 = subject.first_time();
        let mut out = 0.0;
        for b in 0..self.n_biomarkers() {
            let obs: Vec<&Observation> = subject.observations.iter().filter(|o| o.biomarker == b).collect();
            if obs.is_empty() {
                continue;
            }
            let times: Vec<f64> = obs.iter().map(|o| t + o.time - t0).collect();
            let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.value));
            let (mean, mut cov) = self.posteriors[b].predict_cov(&times);
            let noise = self.cohort.biomarkers[b].noise_sd.powi(2);
            for i in 0..times.len() {
                cov[(i, i)] += noise;
            }
            out += gaussian_log_pdf(&y, &mean, cov);
        }
        out
    }

    pub fn stage(&self, subject: &StageSubject, grid: &StageGrid) -> Result<StagePosterior> {
        subject.validate(self.n_biomarkers())?;
        grid.validate()?;
        if let Some((lo, hi)) = self.cohort.pooled_warped_range() {
            if grid.lo > lo || grid.hi < hi {
                log::warn!(
                    "stage grid [{}, {}] does not cover the training range [{lo}, {hi}]",
                    grid.lo,
                    grid.hi
                );
            }
        }
        let points = grid.points();
        let log_density: Vec<f64> = points.iter().map(|&t| self.stage_log_likelihood(subject, t)).collect();
        StagePosterior::from_log_density(points, log_density)
    }
}

/// `log N(y | mean, cov)` by Cholesky; a non-positive-definite covariance
/// scores `-∞`.
pub fn gaussian_log_pdf(y: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> f64 {
    let n = y.len();
    let Some(chol) = cov.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let r = y - mean;
    let z = chol.solve(&r);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * r.dot(&z) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI
}

/// Observations of one new individual. `time` is relative within the
/// subject; only differences between visits matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSubject {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl StageSubject {
    fn first_time(&self) -> f64 {
        self.observations.iter().map(|o| o.time).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self, n_biomarkers: usize) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Empty(format!("subject {} has no observed biomarkers", self.id)));
        }
        for o in &self.observations {
            if o.biomarker >= n_biomarkers {
                return Err(Error::Invalid(format!("subject {} references biomarker {}", self.id, o.biomarker)));
            }
            if !o.time.is_finite() || !o.value.is_finite() {
                return Err(Error::Invalid(format!("subject {} has a non-finite observation", self.id)));
            }
        }
        Ok(())
    }
}

/// Reads staging subjects from a long-format CSV against the model's
/// biomarker names. Empty or `NA` values mark a biomarker as not observed,
/// so a subject can appear with no usable observation; such subjects are
/// returned with an empty list. Unknown biomarker names are an error.
pub fn read_stage_csv<R: std::io::Read>(reader: R, biomarkers: &[String]) -> Result<Vec<StageSubject>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "time", "biomarker", "value"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header subject_id,time,biomarker,value, got {headers:?}"),
        });
    }
    let mut subjects: Vec<StageSubject> = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let (id, time, name, value) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        let time: f64 = time
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| Error::Parse { line, msg: format!("bad time {time:?}") })?;
        let j = match subjects.iter().position(|s| s.id == id) {
            Some(j) => j,
            None => {
                subjects.push(StageSubject { id: id.to_string(), observations: vec![] });
                subjects.len() - 1
            }
        };
        let Some(b) = biomarkers.iter().position(|n| n == name) else {
            if !unknown.iter().any(|u| u == name) {
                unknown.push(name.to_string());
            }
            continue;
        };
        if value.is_empty() || value.eq_ignore_ascii_case("na") || value.eq_ignore_ascii_case("nan") {
            continue;
        }
        let value: f64 = value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse { line, msg: format!("bad value {value:?}") })?;
        let obs = &mut subjects[j].observations;
        if obs.iter().any(|o| o.biomarker == b && o.time == time) {
            return Err(Error::Duplicate { subject: id.to_string(), time, biomarker: name.to_string() });
        }
        obs.push(Observation { biomarker: b, time, value });
    }
    if !unknown.is_empty() {
        return Err(Error::Invalid(format!("unknown biomarker(s): {}", unknown.join(", "))));
    }
    if subjects.is_empty() {
        return Err(Error::Empty("no observation rows".into()));
    }
    Ok(subjects)
}

/// Uniform grid of candidate stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl StageGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || self.points < 2 || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Invalid(format!(
                "stage grid needs lo < hi and at least 2 points (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        crate::data::equispaced(self.lo, self.hi, self.points)
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePosterior {
    pub grid: Vec<f64>,
    /// Unnormalized log likelihood per grid point.
    pub log_density: Vec<f64>,
    /// Posterior mass per grid point under a uniform prior.
    pub density: Vec<f64>,
    pub mean: f64,
    pub map_stage: f64,
    /// Central 90% interval by cumulative mass.
    pub credible_interval: (f64, f64),
}

impl StagePosterior {
    pub fn from_log_density(grid: Vec<f64>, log_density: Vec<f64>) -> Result<Self> {
        let top = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::Numerical("stage likelihood is not finite anywhere on the grid".into()));
        }
        let w: Vec<f64> = log_density.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let density: Vec<f64> = w.iter().map(|v| v / total).collect();
        let mean = grid.iter().zip(&density).map(|(t, p)| t * p).sum();
        let map = (0..grid.len())
            .max_by(|&a, &b| log_density[a].total_cmp(&log_density[b]).then(b.cmp(&a)))
            .expect("non-empty grid");
        let quantile = |q: f64| {
            let mut acc = 0.0;
            for (t, p) in grid.iter().zip(&density) {
                acc += p;
                if acc >= q {
                    return *t;
                }
            }
            *grid.last().unwrap()
        };
        let credible_interval = (quantile(0.05), quantile(0.95));
        Ok(StagePosterior {
            map_stage: grid[map],
            grid,
            log_density,
            density,
            mean,
            credible_interval,
        })
    }
}

/// Linear-interpolation quantile between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Labels each stage positive when it reaches the `q`-quantile of a
/// reference group's time shifts. Returns the labels and the threshold.
pub fn classify_by_reference(stages: &[f64], reference: &[f64], q: f64) -> Result<(Vec<bool>, f64)> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Invalid(format!("quantile level {q} outside (0, 1)")));
    }
    let threshold = quantile(reference, q)?;
    Ok((stages.iter().map(|&s| s >= threshold).collect(), threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_quantile_interpolates() {
        let r: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((quantile(&r, 0.1).unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(quantile(&r, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&r, 1.0).unwrap(), 10.0);
        let (labels, th) = classify_by_reference(&[0.0, 0.5], &r, 0.1).unwrap();
        assert!(labels.iter().all(|l| !l));
        assert!((th - 1.9).abs() < 1e-12);
        assert!(classify_by_reference(&[1.0], &[], 0.1).is_err());
        assert!(classify_by_reference(&[1.0], &r, 1.0).is_err());
    }

    #[test]
    fn posterior_from_flat_likelihood() {
        let grid = vec![0.0, 1.0, 2.0, 3.0];
        let p = StagePosterior::from_log_density(grid, vec![-3.0; 4]).unwrap();
        assert!((p.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p.mean - 1.5).abs() < 1e-12);
        assert_eq!(p.map_stage, 0.0);
        assert_eq!(p.credible_interval, (0.0, 3.0));
    }

    #[test]
    fn all_infinite_likelihood_is_an_error() {
        assert!(StagePosterior::from_log_density(vec![0.0, 1.0], vec![f64::NEG_INFINITY; 2]).is_err());
    }

    #[test]
    fn stage_csv_marks_missing_and_rejects_unknown() {
        let names = vec!["a".to_string(), "b".to_string()];
        let text = "subject_id,time,biomarker,value\nx,0,a,0.5\nx,0,b,NA\ny,0,b,\n";
        let s = read_stage_csv(text.as_bytes(), &names).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].observations.len(), 1);
        assert!(s[1].observations.is_empty());
        let bad = "subject_id,time,biomarker,value\nx,0,a,0.5\nx,0,zz,0.1\nx,0,qq,0.1\n";
        let err = read_stage_csv(bad.as_bytes(), &names).unwrap_err().to_string();
        assert!(err.contains("zz") && err.contains("qq"), "{err}");
        let dup = "subject_id,time,biomarker,value\nx,0,a,0.5\nx,0,a,0.6\n";
        assert!(read_stage_csv(dup.as_bytes(), &names).is_err());
    }

    #[test]
    fn gaussian_log_pdf_standard() {
        let y = DVector::from_vec(vec![0.0]);
        let v = gaussian_log_pdf(&y, &y, DMatrix::from_element(1, 1, 1.0));
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }
}
