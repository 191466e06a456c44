//! Cohort, biomarker and observation types, long-format CSV ingestion,
//! quantile scoring, and the random-effect structure rule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Number of virtual derivative points placed per biomarker.
pub const DEFAULT_DERIVATIVE_POINTS: usize = 10;
/// Initial standard deviation of every random-effect block.
pub const DEFAULT_RE_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSpec {
    pub name: String,
    /// Marginal variance of the fixed-effect trajectory.
    pub eta: f64,
    pub length_scale: f64,
    pub noise_sd: f64,
    /// Probit scale of the derivative likelihood; smaller is stricter.
    pub lambda: f64,
}

impl BiomarkerSpec {
    pub fn new(name: impl Into<String>) -> Self {
        BiomarkerSpec {
            name: name.into(),
            eta: 1.0,
            length_scale: 1.0,
            noise_sd: 0.1,
            lambda: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && self.length_scale > 0.0
            && self.noise_sd >= 0.0
            && self.lambda > 0.0
            && self.eta.is_finite()
            && self.length_scale.is_finite()
            && self.noise_sd.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "biomarker {}: need eta>0, length_scale>0, noise_sd>=0, lambda>0 (got {:?})",
                self.name, self
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub biomarker: usize,
    /// Raw observational time, before the individual time shift.
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RandomEffectKind {
    Zero,
    /// Independent per-visit deviation, one standard deviation per biomarker.
    Iid { sigma: Vec<f64> },
    /// Random slope about the individual's mean observation time.
    Linear { sigma: Vec<f64>, t_bar: f64 },
}

impl RandomEffectKind {
    pub fn sigma(&self, biomarker: usize) -> f64 {
        match self {
            RandomEffectKind::Zero => 0.0,
            RandomEffectKind::Iid { sigma } | RandomEffectKind::Linear { sigma, .. } => {
                sigma[biomarker]
            }
        }
    }

    pub fn sigmas(&self) -> Option<&[f64]> {
        match self {
            RandomEffectKind::Zero => None,
            RandomEffectKind::Iid { sigma } | RandomEffectKind::Linear { sigma, .. } => {
                Some(sigma)
            }
        }
    }

    pub fn sigmas_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            RandomEffectKind::Zero => None,
            RandomEffectKind::Iid { sigma } | RandomEffectKind::Linear { sigma, .. } => {
                Some(sigma)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    pub observations: Vec<Observation>,
    pub time_shift: f64,
    pub random_effect: RandomEffectKind,
}

impl IndividualRecord {
    /// Distinct raw observation times, ascending.
    pub fn visit_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.observations.iter().map(|o| o.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub biomarkers: Vec<BiomarkerSpec>,
    pub individuals: Vec<IndividualRecord>,
    /// Derivative locations per biomarker, in warped time.
    pub derivative_grid: Vec<Vec<f64>>,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        if self.derivative_grid.len() != self.biomarkers.len() {
            return Err(Error::Invalid(format!(
                "derivative grid has {} rows for {} biomarkers",
                self.derivative_grid.len(),
                self.biomarkers.len()
            )));
        }
        for b in &self.biomarkers {
            b.validate()?;
        }
        for ind in &self.individuals {
            if ind.observations.is_empty() {
                return Err(Error::Invalid(format!("individual {} has no observations", ind.id)));
            }
            if !ind.time_shift.is_finite() {
                return Err(Error::Invalid(format!("individual {} has a non-finite shift", ind.id)));
            }
            for o in &ind.observations {
                if o.biomarker >= self.biomarkers.len() {
                    return Err(Error::Invalid(format!(
                        "individual {} references biomarker index {}",
                        ind.id, o.biomarker
                    )));
                }
                if !o.time.is_finite() || !o.value.is_finite() {
                    return Err(Error::Invalid(format!("individual {} has a non-finite observation", ind.id)));
                }
            }
            if let Some(s) = ind.random_effect.sigmas() {
                if s.len() != self.biomarkers.len() || s.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Invalid(format!(
                        "individual {} has invalid random-effect sds",
                        ind.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_observations(&self) -> usize {
        self.individuals.iter().map(|i| i.observations.len()).sum()
    }

    pub fn biomarker_index(&self, name: &str) -> Option<usize> {
        self.biomarkers.iter().position(|b| b.name == name)
    }

    /// Range of warped observation times `τ + d` of one biomarker, if observed.
    pub fn warped_range(&self, biomarker: usize) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ind in &self.individuals {
            for o in ind.observations.iter().filter(|o| o.biomarker == biomarker) {
                let t = o.time + ind.time_shift;
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Range of warped times over every observation.
    pub fn pooled_warped_range(&self) -> Option<(f64, f64)> {
        (0..self.biomarkers.len())
            .filter_map(|b| self.warped_range(b))
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }

    /// Places `points` equally spaced derivative locations per biomarker
    /// over its current warped-time range.
    pub fn reposition_grid(&mut self, points: usize) {
        let pooled = self.pooled_warped_range().unwrap_or((0.0, 1.0));
        self.derivative_grid = (0..self.biomarkers.len())
            .map(|b| {
                let (lo, hi) = self.warped_range(b).unwrap_or(pooled);
                equispaced(lo, hi, points)
            })
            .collect();
    }

    /// Assigns the random-effect structure of every individual by visit count.
    pub fn assign_random_effects(&mut self) {
        let nb = self.biomarkers.len();
        for ind in &mut self.individuals {
            ind.random_effect = assign_re_structure(ind, nb);
        }
    }
}

/// `n` equally spaced points over `[lo, hi]`; a degenerate range is widened
/// by one time unit either side.
pub fn equispaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = if hi - lo > 1e-12 { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Random-effect structure from the number of distinct visit times:
/// four or more visits get a random slope, two or three an i.i.d. term,
/// a single visit none.
pub fn assign_re_structure(individual: &IndividualRecord, n_biomarkers: usize) -> RandomEffectKind {
    let visits = individual.visit_times();
    match visits.len() {
        0 | 1 => RandomEffectKind::Zero,
        2 | 3 => RandomEffectKind::Iid {
            sigma: vec![DEFAULT_RE_SD; n_biomarkers],
        },
        k => RandomEffectKind::Linear {
            sigma: vec![DEFAULT_RE_SD; n_biomarkers],
            t_bar: visits.iter().sum::<f64>() / k as f64,
        },
    }
}

#[derive(Debug, serde::Deserialize)]
struct LongRow {
    subject_id: String,
    time: String,
    biomarker: String,
    value: String,
}

/// Reads a long-format CSV (`subject_id,time,biomarker,value`). Individuals
/// keep their order of first appearance; biomarkers are sorted by name.
pub fn load_long_csv(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_long_csv(file)
}

pub fn read_long_csv<R: Read>(reader: R) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let expected = ["subject_id", "time", "biomarker", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::Empty("no header row".into()));
        }
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header subject_id,time,biomarker,value, got {:?}", headers),
        });
    }

    let mut biomarkers: Vec<BiomarkerSpec> = Vec::new();
    let mut bm_index: HashMap<String, usize> = HashMap::new();
    let mut individuals: Vec<IndividualRecord> = Vec::new();
    let mut ind_index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(String, u64, usize), ()> = HashMap::new();

    for (i, rec) in rdr.deserialize::<LongRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let time: f64 = row.time.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric time {:?}", row.time),
        })?;
        let value: f64 = row.value.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric value {:?}", row.value),
        })?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::Parse { line, msg: "non-finite time or value".into() });
        }
        if row.subject_id.is_empty() || row.biomarker.is_empty() {
            return Err(Error::Parse { line, msg: "empty subject_id or biomarker".into() });
        }
        let b = *bm_index.entry(row.biomarker.clone()).or_insert_with(|| {
            biomarkers.push(BiomarkerSpec::new(row.biomarker.clone()));
            biomarkers.len() - 1
        });
        let j = *ind_index.entry(row.subject_id.clone()).or_insert_with(|| {
            individuals.push(IndividualRecord {
                id: row.subject_id.clone(),
                observations: Vec::new(),
                time_shift: 0.0,
                random_effect: RandomEffectKind::Zero,
            });
            individuals.len() - 1
        });
        if seen.insert((row.subject_id.clone(), time.to_bits(), b), ()).is_some() {
            return Err(Error::Duplicate {
                subject: row.subject_id,
                time,
                biomarker: row.biomarker,
            });
        }
        individuals[j].observations.push(Observation { biomarker: b, time, value });
    }
    if individuals.is_empty() {
        return Err(Error::Empty("no observation rows".into()));
    }
    // canonical biomarker order: by name
    let mut order: Vec<usize> = (0..biomarkers.len()).collect();
    order.sort_by(|&a, &b| biomarkers[a].name.cmp(&biomarkers[b].name));
    let mut remap = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let biomarkers: Vec<BiomarkerSpec> = order.iter().map(|&i| biomarkers[i].clone()).collect();
    for o in individuals.iter_mut().flat_map(|i| i.observations.iter_mut()) {
        o.biomarker = remap[o.biomarker];
    }
    let n_bm = biomarkers.len();
    Ok(Cohort {
        biomarkers,
        individuals,
        derivative_grid: vec![Vec::new(); n_bm],
    })
}

/// Writes the cohort's observations in long format.
pub fn write_long_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["subject_id", "time", "biomarker", "value"]).map_err(io)?;
    for ind in &cohort.individuals {
        for o in &ind.observations {
            w.write_record([
                ind.id.as_str(),
                &o.time.to_string(),
                &cohort.biomarkers[o.biomarker].name,
                &o.value.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    IncreasingAbnormal,
    DecreasingAbnormal,
}

/// Empirical-CDF scoring frozen on a reference sample. Scores are average
/// ranks rescaled to `[0, 1]`; new values are interpolated between the
/// reference values and clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransform {
    pub direction: Direction,
    /// Distinct oriented reference values, ascending, with their scores.
    pub knots: Vec<(f64, f64)>,
}

impl QuantileTransform {
    pub fn fit(values: &[f64], direction: Direction) -> Result<Self> {
        let mut v: Vec<f64> = values.iter().map(|&x| orient(x, direction)).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite value in quantile fit".into()));
        }
        v.sort_by(f64::total_cmp);
        if v.len() < 2 || v.first() == v.last() {
            return Err(Error::Degenerate(format!("{} value(s), no spread", v.len())));
        }
        let n = v.len();
        let mut knots = Vec::new();
        let mut i = 0;
        while i < n {
            let mut k = i;
            while k + 1 < n && v[k + 1] == v[i] {
                k += 1;
            }
            // 0-based ranks i..=k share the average rank
            let avg_rank = 0.5 * (i + k) as f64;
            knots.push((v[i], avg_rank / (n - 1) as f64));
            i = k + 1;
        }
        // average ranks of tied extremes fall inside (0,1); pin the ends
        let last = knots.len() - 1;
        knots[0].1 = 0.0;
        knots[last].1 = 1.0;
        Ok(QuantileTransform { direction, knots })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let x = orient(x, self.direction);
        let k = &self.knots;
        if x <= k[0].0 {
            return 0.0;
        }
        if x >= k[k.len() - 1].0 {
            return 1.0;
        }
        let hi = k.partition_point(|p| p.0 <= x);
        let (x0, s0) = k[hi - 1];
        let (x1, s1) = k[hi];
        if x == x0 {
            return s0;
        }
        (s0 + (s1 - s0) * (x - x0) / (x1 - x0)).clamp(0.0, 1.0)
    }
}

fn orient(x: f64, d: Direction) -> f64 {
    match d {
        Direction::IncreasingAbnormal => x,
        Direction::DecreasingAbnormal => -x,
    }
}

/// Quantile scores of `values` against themselves.
pub fn quantile_transform(values: &[f64], direction: Direction) -> Result<Vec<f64>> {
    let qt = QuantileTransform::fit(values, direction)?;
    Ok(values.iter().map(|&x| qt.apply(x)).collect())
}

/// Fits one transform per biomarker on the pooled values of `cohort` and
/// rewrites every observation as its score.
pub fn score_cohort(cohort: &mut Cohort, directions: &[Direction]) -> Result<Vec<QuantileTransform>> {
    let nb = cohort.biomarkers.len();
    if directions.len() != nb {
        return Err(Error::Invalid(format!("{} directions for {nb} biomarkers", directions.len())));
    }
    let mut pooled = vec![Vec::new(); nb];
    for o in cohort.individuals.iter().flat_map(|i| &i.observations) {
        pooled[o.biomarker].push(o.value);
    }
    let transforms = pooled
        .iter()
        .zip(directions)
        .enumerate()
        .map(|(b, (vals, &dir))| {
            QuantileTransform::fit(vals, dir).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("{} ({m})", cohort.biomarkers[b].name)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    apply_scores(cohort, &transforms);
    Ok(transforms)
}

pub fn apply_scores(cohort: &mut Cohort, transforms: &[QuantileTransform]) {
    for ind in &mut cohort.individuals {
        for o in &mut ind.observations {
            o.value = transforms[o.biomarker].apply(o.value);
        }
    }
}
