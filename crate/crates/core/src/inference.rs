//! Post-fit inference: score via the EM identity, observed information by
//! numerical differentiation of the score, standard errors, local
//! identifiability, information criteria and likelihood-ratio tests
//! (including chi-bar-squared nulls for boundary hypotheses).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::coords::{Chart, CoordScale};
use crate::data::PanelDataset;
use crate::em::{e_step, groups, DataRef};
use crate::error::{LmError, Result};
use crate::multilevel::{cluster_structure, e_step_ml, ml_groups_for_block};
use crate::params::{Dims, ModelParams, ModelSpec};

/// Score of the incomplete-data log-likelihood at `params`, computed as the
/// gradient of the expected complete-data log-likelihood at the E-step
/// (the EM identity), in the chosen coordinate scale.
pub fn em_score(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: DataRef,
    scale: CoordScale,
) -> Result<Vec<f64>> {
    let chart = Chart::with_scale(spec, dims, scale)?;
    let coords = chart.flatten(params)?;
    let mut out = vec![0.0; chart.len()];
    if spec.is_multilevel() {
        let panel = match data {
            DataRef::Panel(d) => d,
            _ => return Err(LmError::Data("multilevel score needs subject data".into())),
        };
        let structure = cluster_structure(panel, spec)?;
        let (counts, _) = e_step_ml(params, spec, dims, panel, &structure)?;
        for block in &chart.blocks {
            if block.len == 0 {
                continue;
            }
            let g = ml_groups_for_block(&chart, block, &counts, spec, dims, panel, &structure)?;
            let local = crate::scoring::score(&g, &coords[block.offset..block.offset + block.len])?;
            for (j, v) in local.iter().enumerate() {
                out[block.offset + j] = *v;
            }
        }
        return Ok(out);
    }
    let (counts, _) = e_step(params, spec, dims, data)?;
    let panel: Option<&PanelDataset> = match data {
        DataRef::Panel(d) => Some(d),
        DataRef::Patterns(_) => None,
    };
    for block in &chart.blocks {
        if block.len == 0 {
            continue;
        }
        let g = groups::groups_for_block(&chart, block, &counts, spec, dims, panel)?;
        let local = crate::scoring::score(&g, &coords[block.offset..block.offset + block.len])?;
        for (j, v) in local.iter().enumerate() {
            out[block.offset + j] = *v;
        }
    }
    Ok(out)
}

/// Observed information, standard errors and local identifiability.
#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub labels: Vec<String>,
    pub score: Vec<f64>,
    /// Observed information `J = -d s / d theta`, symmetrized.
    pub information: DMatrix<f64>,
    /// Standard errors from `diag(J^-1)`; `None` when `J` is singular.
    pub standard_errors: Option<Vec<f64>>,
    pub rank: usize,
    /// Smallest over largest singular value of `J`.
    pub sv_ratio: f64,
    /// Full rank of `J` at the estimate.
    pub locally_identifiable: bool,
}

/// Step policy: `h_j = max(base, base * |theta_j|)` central differences.
#[derive(Debug, Clone, Copy)]
pub struct StepPolicy {
    pub base: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy { base: 1e-6 }
    }
}

/// Observed information as minus the central-difference derivative of the
/// EM-identity score, symmetrized as `(J + J') / 2`.
pub fn observed_information(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: DataRef,
    scale: CoordScale,
    step: StepPolicy,
) -> Result<InferenceReport> {
    let chart = Chart::with_scale(spec, dims, scale)?;
    let theta = chart.flatten(params)?;
    let dim = theta.len();
    let score0 = em_score(params, spec, dims, data, scale)?;
    let mut j = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let h = step.base.max(step.base * theta[col].abs());
        let mut up = theta.clone();
        up[col] += h;
        let mut dn = theta.clone();
        dn[col] -= h;
        let params_up = chart.unflatten(&up)?;
        let params_dn = chart.unflatten(&dn)?;
        let s_up = em_score(&params_up, spec, dims, data, scale)?;
        let s_dn = em_score(&params_dn, spec, dims, data, scale)?;
        for row in 0..dim {
            j[(row, col)] = -(s_up[row] - s_dn[row]) / (2.0 * h);
        }
    }
    // symmetrize
    for a in 0..dim {
        for b in a + 1..dim {
            let avg = 0.5 * (j[(a, b)] + j[(b, a)]);
            j[(a, b)] = avg;
            j[(b, a)] = avg;
        }
    }
    let svd = j.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let sv_ratio = if max_sv > 0.0 { min_sv / max_sv } else { 0.0 };
    let rank = if max_sv == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&sv| sv > max_sv * 1e-8)
            .count()
    };
    let locally_identifiable = rank == dim && dim > 0;
    let standard_errors = if locally_identifiable {
        j.clone().try_inverse().map(|inv| {
            (0..dim)
                .map(|c| inv[(c, c)].max(0.0).sqrt())
                .collect::<Vec<f64>>()
        })
    } else {
        None
    };
    Ok(InferenceReport {
        labels: chart.labels(),
        score: score0,
        information: j,
        standard_errors,
        rank,
        sv_ratio,
        locally_identifiable,
    })
}

/// `AIC = -2 l + 2 g` and `BIC = -2 l + g log(n)`.
pub fn information_criteria(loglik: f64, g: usize, n: f64) -> (f64, f64) {
    let aic = -2.0 * loglik + 2.0 * g as f64;
    let bic = -2.0 * loglik + g as f64 * n.ln();
    (aic, bic)
}

/// Survival function of the chi-squared distribution with a point mass at
/// zero for `df = 0`.
pub fn chi_squared_survival(df: usize, x: f64) -> f64 {
    if df == 0 {
        return if x <= 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive df");
    dist.sf(x)
}

/// Null distribution of the likelihood-ratio statistic.
#[derive(Debug, Clone)]
pub enum NullDistribution {
    ChiSquared { df: usize },
    /// Mixture of chi-squared distributions with the given weights for
    /// `df = 0, 1, 2, ...`.
    ChiBar { weights: Vec<f64> },
    /// Chi-bar mixture with Monte Carlo weights from the cone-projection
    /// count of `dim` boundary constraints.
    ChiBarMonteCarlo { dim: usize, draws: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct LrTest {
    pub statistic: f64,
    pub p_value: f64,
    /// Mixture weights actually used (chi-bar nulls).
    pub weights: Option<Vec<f64>>,
    /// Simulation standard error of the p-value (Monte Carlo weights).
    pub mc_se: Option<f64>,
}

/// Standard normal draw by Box-Muller from a seeded stream.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Monte Carlo chi-bar weights: the distribution of the number of positive
/// components of the projection of a Gaussian draw onto the non-negative
/// orthant. With `covariance = None` the metric is the identity and the
/// projection is componentwise.
pub fn chi_bar_weights_montecarlo(
    dim: usize,
    covariance: Option<&DMatrix<f64>>,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if dim == 0 || dim > 12 {
        return Err(LmError::Spec(format!(
            "chi-bar Monte Carlo supports 1..=12 constraints, got {dim}"
        )));
    }
    let chol = match covariance {
        Some(v) => Some(
            v.clone()
                .cholesky()
                .ok_or_else(|| LmError::Numerical("covariance not positive definite".into()))?,
        ),
        None => None,
    };
    let precision = covariance.map(|v| {
        v.clone()
            .try_inverse()
            .expect("positive definite covariance inverts")
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC4B);
    let mut hist = vec![0usize; dim + 1];
    for _ in 0..draws {
        let zraw = DVector::from_fn(dim, |_, _| standard_normal(&mut rng));
        let z = match &chol {
            Some(c) => c.l() * zraw,
            None => zraw,
        };
        let positive = match &precision {
            None => z.iter().filter(|&&x| x > 0.0).count(),
            Some(a) => project_orthant_count(&z, a),
        };
        hist[positive] += 1;
    }
    Ok(hist.iter().map(|&c| c as f64 / draws as f64).collect())
}

/// Number of positive components of the projection of `z` onto the
/// non-negative orthant in the metric of `a` (the precision matrix), found
/// by enumerating active sets and checking the KKT conditions.
fn project_orthant_count(z: &DVector<f64>, a: &DMatrix<f64>) -> usize {
    let d = z.len();
    for free_mask in 0..(1usize << d) {
        let free: Vec<usize> = (0..d).filter(|&j| free_mask & (1 << j) != 0).collect();
        let bound: Vec<usize> = (0..d).filter(|&j| free_mask & (1 << j) == 0).collect();
        // x_free solves A_ff (x_f - z_f) = A_fb z_b; x_bound = 0
        let mut x = DVector::zeros(d);
        if !free.is_empty() {
            let aff = DMatrix::from_fn(free.len(), free.len(), |r, c| a[(free[r], free[c])]);
            let mut rhs = DVector::zeros(free.len());
            for (r, &fr) in free.iter().enumerate() {
                let mut acc = 0.0;
                for &b in &bound {
                    acc += a[(fr, b)] * z[b];
                }
                rhs[r] = acc;
            }
            let sol = match aff.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            for (r, &fr) in free.iter().enumerate() {
                x[fr] = z[fr] + sol[r];
            }
        }
        // primal feasibility on the free set
        if free.iter().any(|&f| x[f] <= 0.0) {
            continue;
        }
        // dual feasibility on the bound set: [A (x - z)]_b >= 0
        let grad = a * (&x - z);
        if bound.iter().any(|&b| grad[b] < -1e-10) {
            continue;
        }
        return free.len();
    }
    // fall back to the identity-metric count (should be unreachable)
    z.iter().filter(|&&x| x > 0.0).count()
}

/// Likelihood-ratio test `D = -2 [l0 - l1]` against the declared null.
pub fn lr_test(loglik_full: f64, loglik_constrained: f64, null: &NullDistribution) -> Result<LrTest> {
    let mut d = 2.0 * (loglik_full - loglik_constrained);
    if d < -1e-6 {
        return Err(LmError::Numerical(format!(
            "negative LR statistic {d:.3e}: models not nested or fits not converged"
        )));
    }
    if d < 0.0 {
        d = 0.0;
    }
    let (p, weights, mc_se) = match null {
        NullDistribution::ChiSquared { df } => (chi_squared_survival(*df, d), None, None),
        NullDistribution::ChiBar { weights } => {
            let p = weights
                .iter()
                .enumerate()
                .map(|(j, &w)| w * chi_squared_survival(j, d))
                .sum();
            (p, Some(weights.clone()), None)
        }
        NullDistribution::ChiBarMonteCarlo { dim, draws, seed } => {
            let weights = chi_bar_weights_montecarlo(*dim, None, *draws, *seed)?;
            let p: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, &w)| w * chi_squared_survival(j, d))
                .sum();
            // per-draw p-values are survival values indexed by the drawn
            // component count; their spread gives the simulation SE
            let mut var = 0.0;
            for (j, &w) in weights.iter().enumerate() {
                let pj = chi_squared_survival(j, d);
                var += w * (pj - p) * (pj - p);
            }
            let se = (var / *draws as f64).sqrt();
            (p, Some(weights), Some(se))
        }
    };
    Ok(LrTest {
        statistic: d,
        p_value: p,
        weights,
        mc_se,
    })
}
