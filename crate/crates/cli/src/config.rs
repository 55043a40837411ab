//! Declarative run configuration: a single TOML document holding the model
//! spec, the column-role mapping and estimation options. Command-line flags
//! override scalar options only, so model specs stay diffable.

use std::collections::BTreeSet;
use std::path::Path;

use lamark::data::PanelSchema;
use lamark::em::FitOptions;
use lamark::params::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default = "default_responses")]
    pub responses: Vec<String>,
    /// Covariate columns to load (the union with the model's declared
    /// columns is loaded automatically).
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub weight: Option<String>,
    /// Field delimiter override; auto-detected when absent.
    #[serde(default)]
    pub delimiter: Option<String>,
}

fn default_id() -> String {
    "id".into()
}
fn default_time() -> String {
    "time".into()
}
fn default_responses() -> Vec<String> {
    vec!["y1".into()]
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            id: default_id(),
            time: default_time(),
            responses: default_responses(),
            covariates: Vec::new(),
            cluster: None,
            weight: None,
            delimiter: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptionsSection {
    pub starts: usize,
    pub seed: u64,
    pub tol_loglik: f64,
    pub tol_param: f64,
    pub max_iter: usize,
}

impl Default for OptionsSection {
    fn default() -> Self {
        let d = FitOptions::default();
        OptionsSection {
            starts: d.starts,
            seed: d.seed,
            tol_loglik: d.tol_loglik,
            tol_param: d.tol_param,
            max_iter: d.max_iter,
        }
    }
}

impl OptionsSection {
    pub fn to_fit_options(&self) -> FitOptions {
        FitOptions {
            starts: self.starts,
            seed: self.seed,
            tol_loglik: self.tol_loglik,
            tol_param: self.tol_param,
            max_iter: self.max_iter,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub options: OptionsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("config `{}`: {e}", path.display()))?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Column-role mapping with the model's covariate columns folded in.
    pub fn schema(&self) -> PanelSchema {
        let mut covariates: Vec<String> = self.data.covariates.clone();
        let mut seen: BTreeSet<String> = covariates.iter().cloned().collect();
        for col in self
            .model
            .covariates
            .columns
            .iter()
            .chain(self.model.cluster_covariates.iter())
        {
            if seen.insert(col.clone()) {
                covariates.push(col.clone());
            }
        }
        PanelSchema {
            id: self.data.id.clone(),
            time: self.data.time.clone(),
            responses: self.data.responses.clone(),
            covariates,
            cluster: self.data.cluster.clone(),
            weight: self.data.weight.clone(),
            delimiter: self
                .data
                .delimiter
                .as_ref()
                .and_then(|d| d.as_bytes().first().copied()),
        }
    }
}
