//! Versioned JSON model files. A model file holds everything needed to
//! predict and stage without refitting: the fitted cohort (hyperparameters,
//! shifts, random effects, derivative grid), the EP sites, and optionally
//! the quantile transforms used to score raw values.

use crate::data::{Cohort, QuantileTransform};
use crate::ep::Site;
use crate::error::{Error, Result};
use crate::predict::FittedModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "gpprog-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub cohort: Cohort,
    pub sites: Vec<Vec<Site>>,
    #[serde(default)]
    pub transforms: Option<Vec<QuantileTransform>>,
    /// Penalized objective at the saved parameters.
    #[serde(default)]
    pub objective: Option<f64>,
}

impl ModelFile {
    pub fn new(model: &FittedModel, transforms: Option<Vec<QuantileTransform>>, objective: Option<f64>) -> Self {
        ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            cohort: model.cohort.clone(),
            sites: model.sites(),
            transforms,
            objective,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != FORMAT {
            return Err(Error::Format(format!("not a model file (format {:?})", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::Format(format!("unsupported model version {}", file.version)));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Rebuilds the predictive posteriors.
    pub fn model(&self) -> Result<FittedModel> {
        FittedModel::from_sites(self.cohort.clone(), self.sites.clone())
    }
}
