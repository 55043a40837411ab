//! Fit reports: a hierarchical TOML document carrying the spec, dimensions,
//! estimates (both as resolved probabilities and as the exact coordinate
//! vector), standard errors and convergence diagnostics. The coordinate
//! vector makes reports lossless: `decode` and `simulate` rebuild the exact
//! fitted parameters from a report.

use std::path::Path;

use lamark::coords::Chart;
use lamark::data::PanelDataset;
use lamark::em::FitResult;
use lamark::inference::InferenceReport;
use lamark::params::{Dims, ModelParams, ModelSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataInfo {
    pub n: usize,
    pub t_len: usize,
    pub r: usize,
    pub levels: Vec<usize>,
    pub level_labels: Vec<Vec<String>>,
    #[serde(default)]
    pub n_clusters: Option<usize>,
}

impl DataInfo {
    pub fn from_panel(data: &PanelDataset) -> Self {
        DataInfo {
            n: data.n,
            t_len: data.t_len,
            r: data.r,
            levels: data.levels.clone(),
            level_labels: data.level_labels.clone(),
            n_clusters: data.n_clusters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitInfo {
    pub loglik: f64,
    pub g: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub monotone_measurement: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartInfo {
    pub start: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsInfo {
    /// Exact free-parameter coordinates (lossless round-trip).
    pub coords: Vec<f64>,
    pub labels: Vec<String>,
    pub pi: Vec<f64>,
    /// Transition matrices for t = 2..=T, row-major.
    pub trans: Vec<Vec<Vec<f64>>>,
    /// Conditional response probabilities per variable, `[t][u][y]`.
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub label: String,
    pub value: f64,
    #[serde(default)]
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceInfo {
    pub locally_identifiable: bool,
    pub rank: usize,
    pub dim: usize,
    pub sv_ratio: f64,
    pub estimates: Vec<EstimateRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub starts: usize,
    pub data: DataInfo,
    pub model: ModelSpec,
    pub fit: FitInfo,
    pub params: ParamsInfo,
    #[serde(default)]
    pub start_summaries: Vec<StartInfo>,
    #[serde(default)]
    pub inference: Option<InferenceInfo>,
}

fn nested3(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    (0..m.dim().0)
        .map(|u| (0..m.dim().1).map(|v| m[(u, v)]).collect())
        .collect()
}

impl Report {
    pub fn build(
        command: &str,
        data: &PanelDataset,
        spec: &ModelSpec,
        result: &FitResult,
        seed: u64,
        starts: usize,
        inference: Option<&InferenceReport>,
    ) -> Result<Report, String> {
        let dims = Dims::new(spec, data.t_len, &data.levels);
        let chart = Chart::new(spec, &dims).map_err(|e| e.to_string())?;
        let coords = chart.flatten(&result.params).map_err(|e| e.to_string())?;
        let g = chart.len();
        let (aic, bic) =
            lamark::inference::information_criteria(result.loglik, g, data.total_weight());
        let p = &result.params;
        let params = ParamsInfo {
            coords,
            labels: chart.labels(),
            pi: p.pi.to_vec(),
            trans: p.trans.iter().map(nested3).collect(),
            phi: p
                .phi
                .iter()
                .map(|phi| {
                    let (t_len, k, l) = phi.dim();
                    (0..t_len)
                        .map(|t| {
                            (0..k)
                                .map(|u| (0..l).map(|y| phi[(t, u, y)]).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            rho: p.rho.as_ref().map(|r| r.to_vec()),
        };
        let inference_info = inference.map(|inf| InferenceInfo {
            locally_identifiable: inf.locally_identifiable,
            rank: inf.rank,
            dim: params.coords.len(),
            sv_ratio: inf.sv_ratio,
            estimates: params
                .labels
                .iter()
                .zip(&params.coords)
                .enumerate()
                .map(|(j, (label, &value))| EstimateRow {
                    label: label.clone(),
                    value,
                    se: inf.standard_errors.as_ref().map(|se| se[j]),
                })
                .collect(),
        });
        Ok(Report {
            schema_version: 1,
            command: command.to_string(),
            seed,
            starts,
            data: DataInfo::from_panel(data),
            model: spec.clone(),
            fit: FitInfo {
                loglik: result.loglik,
                g,
                aic,
                bic,
                converged: result.converged,
                iterations: result.iterations,
                monotone_measurement: lamark::params::check_monotonicity(&result.params),
            },
            params,
            start_summaries: result
                .start_summaries
                .iter()
                .map(|s| StartInfo {
                    start: s.start,
                    loglik: s.loglik,
                    iterations: s.iterations,
                    converged: s.converged,
                    error: s.error.clone(),
                })
                .collect(),
            inference: inference_info,
        })
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string_pretty(self).map_err(|e| format!("report serialization: {e}"))
    }

    pub fn load(path: &Path) -> Result<Report, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read report `{}`: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("report `{}`: {e}", path.display()))
    }

    /// Rebuild the exact fitted parameters from the stored coordinates.
    pub fn rebuild_params(&self) -> Result<ModelParams, String> {
        let dims = Dims::new(&self.model, self.data.t_len, &self.data.levels);
        let chart = Chart::new(&self.model, &dims).map_err(|e| e.to_string())?;
        chart.unflatten(&self.params.coords).map_err(|e| e.to_string())
    }

    /// Flat CSV table of the estimates (label, value, se).
    pub fn estimates_csv(&self) -> String {
        let mut out = String::from("label,value,se\n");
        match &self.inference {
            Some(inf) => {
                for row in &inf.estimates {
                    let se = row
                        .se
                        .map(|x| x.to_string())
                        .unwrap_or_default();
                    out.push_str(&format!("{},{},{}\n", row.label, row.value, se));
                }
            }
            None => {
                for (label, value) in self.params.labels.iter().zip(&self.params.coords) {
                    out.push_str(&format!("{label},{value},\n"));
                }
            }
        }
        out
    }
}
