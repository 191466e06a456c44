//! Flat `key = value` settings merged from an optional file and the command
//! line. Flags win over the file.

use crate::Failure;
use gpprog::fit::FitConfig;
use gpprog::predict::{StageGrid, STAGE_POINTS};
use gpprog::synth::SynthConfig;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

const KNOWN: &[&str] = &[
    // fit
    "seed",
    "max_outer_iters",
    "cg_iters",
    "tol",
    "lambda",
    "derivative_points",
    "log_eta_mean",
    "log_eta_sd",
    "log_l_mean",
    "log_l_sd",
    "log_noise_mean",
    "log_noise_sd",
    "log_re_mean",
    "log_re_sd",
    "shift_sd",
    "ep_damping",
    "ep_max_sweeps",
    "ep_tol",
    "shuffle_sites",
    "score",
    "decreasing",
    // predict / stage
    "grid_span",
    "points",
    // simulate / benchmark
    "n",
    "nb",
    "sigma",
    "alpha_sd",
    "orient_increasing",
    "reps",
    "timing",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::input(format!("config line {}: expected key=value, got {raw:?}", i + 1)));
            };
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::input(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), Failure> {
        let key = key.to_ascii_lowercase();
        if !KNOWN.contains(&key.as_str()) {
            return Err(Failure::input(format!("unknown setting {key:?}")));
        }
        self.values.insert(key, value.into());
        Ok(())
    }

    /// Applies a flag value if one was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), Failure> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::input(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, Failure> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.values
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    pub fn fit_config(&self) -> Result<FitConfig, Failure> {
        let d = FitConfig::default();
        let mut c = FitConfig {
            max_outer_iters: self.get_or("max_outer_iters", d.max_outer_iters)?,
            cg_iters: self.get_or("cg_iters", d.cg_iters)?,
            tol: self.get_or("tol", d.tol)?,
            log_eta_mean: self.get("log_eta_mean")?,
            log_eta_sd: self.get_or("log_eta_sd", d.log_eta_sd)?,
            log_l_mean: self.get("log_l_mean")?,
            log_l_sd: self.get_or("log_l_sd", d.log_l_sd)?,
            log_noise_mean: self.get_or("log_noise_mean", d.log_noise_mean)?,
            log_noise_sd: self.get_or("log_noise_sd", d.log_noise_sd)?,
            log_re_mean: self.get_or("log_re_mean", d.log_re_mean)?,
            log_re_sd: self.get_or("log_re_sd", d.log_re_sd)?,
            shift_sd: self.get("shift_sd")?,
            lambda: self.get_or("lambda", d.lambda)?,
            derivative_points: self.get_or("derivative_points", d.derivative_points)?,
            shuffle_sites: self.get_or("shuffle_sites", d.shuffle_sites)?,
            seed: self.get_or("seed", d.seed)?,
            ..d
        };
        c.ep.damping = self.get_or("ep_damping", c.ep.damping)?;
        c.ep.max_sweeps = self.get_or("ep_max_sweeps", c.ep.max_sweeps)?;
        c.ep.tol = self.get_or("ep_tol", c.ep.tol)?;
        c.validate().map_err(|e| Failure::input(e.to_string()))?;
        Ok(c)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, Failure> {
        let d = SynthConfig::default();
        let c = SynthConfig {
            n: self.get_or("n", d.n)?,
            n_biomarkers: self.get_or("nb", d.n_biomarkers)?,
            sigma: self.get_or("sigma", d.sigma)?,
            alpha_sd: self.get_or("alpha_sd", d.alpha_sd)?,
            orient_increasing: self.get_or("orient_increasing", d.orient_increasing)?,
            derivative_points: self.get_or("derivative_points", d.derivative_points)?,
            seed: self.get_or("seed", d.seed)?,
            ..d
        };
        c.validate().map_err(|e| Failure::input(e.to_string()))?;
        Ok(c)
    }

    /// Stage grid from `grid_span = lo,hi` and `points`, falling back to
    /// `default` for anything unset.
    pub fn stage_grid(&self, default: StageGrid) -> Result<StageGrid, Failure> {
        let mut g = default;
        if let Some(span) = self.values.get("grid_span") {
            let parts: Vec<f64> = span
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::input(format!("grid_span must be lo,hi (got {span:?})")))?;
            if parts.len() != 2 {
                return Err(Failure::input(format!("grid_span must be lo,hi (got {span:?})")));
            }
            g.lo = parts[0];
            g.hi = parts[1];
        }
        g.points = self.get_or("points", if g.points == 0 { STAGE_POINTS } else { g.points })?;
        g.validate().map_err(|e| Failure::input(e.to_string()))?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let s = Settings::parse("# run settings\nseed = 4\n\nlambda=1e-3  # strict\n").unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(4));
        assert_eq!(s.get::<f64>("lambda").unwrap(), Some(1e-3));
    }

    #[test]
    fn flags_override_file() {
        let mut s = Settings::parse("seed=4\nmax_outer_iters=3").unwrap();
        s.flag("seed", Some(9u64)).unwrap();
        s.flag::<u64>("max_outer_iters", None).unwrap();
        let c = s.fit_config().unwrap();
        assert_eq!((c.seed, c.max_outer_iters), (9, 3));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Settings::parse("colour=blue").is_err());
        assert!(Settings::parse("seed").is_err());
        let s = Settings::parse("seed=abc").unwrap();
        assert!(s.fit_config().is_err());
        let s = Settings::parse("grid_span=1").unwrap();
        assert!(s.stage_grid(StageGrid { lo: 0.0, hi: 1.0, points: 5 }).is_err());
    }

    #[test]
    fn grid_span_and_points() {
        let s = Settings::parse("grid_span=-3,4\npoints=8").unwrap();
        let g = s.stage_grid(StageGrid { lo: 0.0, hi: 1.0, points: 201 }).unwrap();
        assert_eq!((g.lo, g.hi, g.points), (-3.0, 4.0, 8));
    }
}
