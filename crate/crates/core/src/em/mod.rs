//! EM estimation: expected counts, closed-form and Fisher-scoring M-steps,
//! multi-start orchestration and convergence control.

pub mod groups;
pub mod start;

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::coords::{BlockKind, Chart};
use crate::data::{aggregate_patterns, PanelDataset, PatternTable};
use crate::error::{LmError, Result};
use crate::params::{
    canonicalize, CovariatePlacement, Dims, InitialSpec, MeasurementSpec, ModelParams, ModelSpec,
    TransitionSpec,
};
use crate::recursions::{posteriors, LatticeResult};
use crate::scoring::{maximize, ScoringOptions};

/// Either raw subjects or an aggregated pattern table.
#[derive(Debug, Clone, Copy)]
pub enum DataRef<'a> {
    Panel(&'a PanelDataset),
    Patterns(&'a PatternTable),
}

impl<'a> From<&'a PanelDataset> for DataRef<'a> {
    fn from(d: &'a PanelDataset) -> Self {
        DataRef::Panel(d)
    }
}

impl<'a> From<&'a PatternTable> for DataRef<'a> {
    fn from(d: &'a PatternTable) -> Self {
        DataRef::Patterns(d)
    }
}

impl<'a> DataRef<'a> {
    pub fn t_len(&self) -> usize {
        match self {
            DataRef::Panel(d) => d.t_len,
            DataRef::Patterns(p) => p.t_len,
        }
    }

    pub fn levels(&self) -> &[usize] {
        match self {
            DataRef::Panel(d) => &d.levels,
            DataRef::Patterns(p) => &p.levels,
        }
    }

    pub fn r(&self) -> usize {
        match self {
            DataRef::Panel(d) => d.r,
            DataRef::Patterns(p) => p.r,
        }
    }
}

/// Posterior summaries of one unit (subject), kept when Fisher-scoring
/// blocks need subject-specific designs.
#[derive(Debug, Clone)]
pub struct UnitPosteriors {
    pub post_state: Array2<f64>,
    pub post_pair: Vec<Array2<f64>>,
    pub weight: f64,
}

/// Expected complete-data counts assembled at the E-step.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    /// Expected occupancy at occasion 1, length `k`.
    pub a1: Array1<f64>,
    /// Expected occupancy per occasion, `T x k`.
    pub at: Array2<f64>,
    /// Expected transitions for `t = 2..=T` (index `t - 2`), each `k x k`.
    pub atrans: Vec<Array2<f64>>,
    /// Expected state-response counts per variable, `T x k x l_j`.
    pub aresp: Vec<Array3<f64>>,
    /// Expected joint-cell counts `k x 6` pooled over occasions
    /// (bivariate marginal spec only).
    pub aresp_joint: Option<Array2<f64>>,
    /// Per-subject posteriors for covariate designs.
    pub unit_post: Option<Vec<UnitPosteriors>>,
    /// Total weight (the effective `n`).
    pub n_total: f64,
}

impl ExpectedCounts {
    pub(crate) fn empty(dims: &Dims, keep_units: bool, joint: bool) -> Self {
        ExpectedCounts {
            a1: Array1::zeros(dims.k),
            at: Array2::zeros((dims.t_len, dims.k)),
            atrans: (1..dims.t_len).map(|_| Array2::zeros((dims.k, dims.k))).collect(),
            aresp: dims
                .levels
                .iter()
                .map(|&l| Array3::zeros((dims.t_len, dims.k, l)))
                .collect(),
            aresp_joint: if joint {
                Some(Array2::zeros((dims.k, 6)))
            } else {
                None
            },
            unit_post: if keep_units { Some(Vec::new()) } else { None },
            n_total: 0.0,
        }
    }

    pub(crate) fn absorb(&mut self, lat: &LatticeResult, responses: &dyn Fn(usize, usize) -> usize, w: f64) {
        let (t_len, k) = lat.post_state.dim();
        for u in 0..k {
            self.a1[u] += w * lat.post_state[(0, u)];
        }
        for t in 0..t_len {
            for u in 0..k {
                self.at[(t, u)] += w * lat.post_state[(t, u)];
            }
        }
        for (idx, pair) in lat.post_pair.iter().enumerate() {
            for u in 0..k {
                for v in 0..k {
                    self.atrans[idx][(u, v)] += w * pair[(u, v)];
                }
            }
        }
        let r = self.aresp.len();
        for t in 0..t_len {
            for j in 0..r {
                let y = responses(t, j);
                for u in 0..k {
                    self.aresp[j][(t, u, y)] += w * lat.post_state[(t, u)];
                }
            }
        }
        if let Some(joint) = self.aresp_joint.as_mut() {
            for t in 0..t_len {
                let cell = responses(t, 0) * 3 + responses(t, 1);
                for u in 0..k {
                    joint[(u, cell)] += w * lat.post_state[(t, u)];
                }
            }
        }
        self.n_total += w;
    }

    /// Verify the count identities (mass conservation and marginal
    /// consistency) to the stated tolerance.
    pub fn check_identities(&self, tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        if !close(self.a1.sum(), self.n_total) {
            return Err(LmError::Numerical(format!(
                "sum a1 = {} != n = {}",
                self.a1.sum(),
                self.n_total
            )));
        }
        let (t_len, k) = self.at.dim();
        for t in 0..t_len {
            if !close(self.at.row(t).sum(), self.n_total) {
                return Err(LmError::Numerical(format!("occupancy at t={} loses mass", t + 1)));
            }
        }
        for (idx, m) in self.atrans.iter().enumerate() {
            for u in 0..k {
                if !close(m.row(u).sum(), self.at[(idx, u)]) {
                    return Err(LmError::Numerical(format!(
                        "transition rows at t={} inconsistent with occupancy",
                        idx + 2
                    )));
                }
            }
            for v in 0..k {
                if !close(m.column(v).sum(), self.at[(idx + 1, v)]) {
                    return Err(LmError::Numerical(format!(
                        "transition columns at t={} inconsistent with occupancy",
                        idx + 2
                    )));
                }
            }
        }
        for (j, a) in self.aresp.iter().enumerate() {
            let (_, _, l) = a.dim();
            for t in 0..t_len {
                for u in 0..k {
                    let s: f64 = (0..l).map(|y| a[(t, u, y)]).sum();
                    if !close(s, self.at[(t, u)]) {
                        return Err(LmError::Numerical(format!(
                            "response counts for variable {} at (t={},u={}) inconsistent",
                            j + 1,
                            t + 1,
                            u + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// --- emissions ---------------------------------------------------------------

/// Emission matrix (`T x k`) of one response configuration under shared
/// probabilities: product over variables, or the joint table under the
/// bivariate spec.
pub fn emissions_shared(
    params: &ModelParams,
    pattern: &[usize],
    t_len: usize,
    r: usize,
) -> Array2<f64> {
    let k = params.k();
    let mut em = Array2::from_elem((t_len, k), 1.0);
    if let Some(joint) = &params.phi_joint {
        for t in 0..t_len {
            let cell = pattern[t * r] * 3 + pattern[t * r + 1];
            for u in 0..k {
                em[(t, u)] = joint[(u, cell)];
            }
        }
        return em;
    }
    for t in 0..t_len {
        for (j, phi) in params.phi.iter().enumerate() {
            let y = pattern[t * r + j];
            for u in 0..k {
                em[(t, u)] *= phi[(t, u, y)];
            }
        }
    }
    em
}

/// Emission matrix of one subject under measurement covariates.
pub fn emissions_for_subject(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    i: usize,
) -> Result<Array2<f64>> {
    let k = dims.k;
    let t_len = dims.t_len;
    let beta = params
        .beta
        .as_ref()
        .ok_or_else(|| LmError::Params("measurement covariates need beta".into()))?;
    let mut em = Array2::from_elem((t_len, k), 1.0);
    for t in 0..t_len {
        let row = subject_cov_row(spec, dims, data, i, t);
        match spec.measurement {
            MeasurementSpec::StateIntercept { link } => {
                let mut pos = 0;
                for (j, &l) in dims.levels.iter().enumerate() {
                    let width = crate::covariates::measurement_block_len(link, k, l, dims.p_cov);
                    let beta_j = &beta[pos..pos + width];
                    pos += width;
                    let y = data.responses[(i, t, j)];
                    for u in 0..k {
                        let p = crate::covariates::resolve_measurement(link, beta_j, k, l, u, &row)?;
                        em[(t, u)] *= p[y];
                    }
                }
            }
            MeasurementSpec::BivariateMarginal => {
                let cell = data.responses[(i, t, 0)] * 3 + data.responses[(i, t, 1)];
                for u in 0..k {
                    let eta = bivariate_eta_for(beta, k, dims.p_cov, u, &row);
                    let joint = crate::covariates::bivariate_joint_from_eta(&eta)?;
                    em[(t, u)] *= joint[cell];
                }
            }
            _ => {
                return Err(LmError::Spec(
                    "measurement covariates need a link-parameterized measurement model".into(),
                ))
            }
        }
    }
    Ok(em)
}

/// Predictor of the bivariate table for state `u` at one covariate row.
pub(crate) fn bivariate_eta_for(beta: &[f64], k: usize, p: usize, u: usize, row: &[f64]) -> [f64; 5] {
    let dot = |slopes: &[f64]| -> f64 { slopes.iter().zip(row).map(|(&s, &x)| s * x).sum() };
    let base = 3 * k + 2;
    let (b1, b2, b3) = if p > 0 {
        (
            dot(&beta[base..base + p]),
            dot(&beta[base + p..base + 2 * p]),
            dot(&beta[base + 2 * p..base + 3 * p]),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    [
        beta[u] + b1,
        beta[k + u] + b2,
        beta[2 * k + u] + b3,
        beta[3 * k],
        beta[3 * k + 1],
    ]
}

/// Covariate row of subject `i` at occasion `t` (user columns plus lag
/// one-hots of the observed previous response).
pub fn subject_cov_row(
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    i: usize,
    t: usize,
) -> Vec<f64> {
    let x_store;
    let x_row: Option<&[f64]> = match &data.covariates {
        Some(x) if !spec.covariates.columns.is_empty() => {
            let mut vals = Vec::with_capacity(spec.covariates.columns.len());
            for name in &spec.covariates.columns {
                let col = data
                    .covariate_names
                    .iter()
                    .position(|c| c == name)
                    .expect("covariate column checked at fit start");
                vals.push(x[(i, t, col)]);
            }
            x_store = vals;
            Some(&x_store)
        }
        _ => None,
    };
    let prev;
    let prev_y: Option<&[usize]> = if spec.covariates.lags > 0 && t > 0 {
        prev = (0..dims.r)
            .map(|j| data.responses[(i, t - 1, j)])
            .collect::<Vec<_>>();
        Some(&prev)
    } else {
        None
    };
    crate::covariates::covariate_row(x_row, prev_y, &dims.levels, spec.covariates.lags)
}

/// Chain of one subject under latent covariates (shared parts fall back to
/// the resolved shared objects).
pub fn chain_for_subject(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    i: usize,
) -> Result<(Array1<f64>, Vec<Array2<f64>>)> {
    let link = crate::coords::latent_link(spec);
    let pi = match spec.initial {
        InitialSpec::CovariateLogit => {
            let d1 = params
                .delta1
                .as_ref()
                .ok_or_else(|| LmError::Params("covariate initial needs delta1".into()))?;
            let row = subject_cov_row(spec, dims, data, i, 0);
            Array1::from_vec(crate::covariates::resolve_latent_initial(
                link, d1, dims.k, &row,
            )?)
        }
        _ => params.pi.clone(),
    };
    let trans = match spec.transition {
        TransitionSpec::CovariateLogit { mask } => {
            let d2 = params
                .delta2
                .as_ref()
                .ok_or_else(|| LmError::Params("covariate transitions need delta2".into()))?;
            let mut out = Vec::with_capacity(dims.t_len.saturating_sub(1));
            for t in 1..dims.t_len {
                let row = subject_cov_row(spec, dims, data, i, t);
                out.push(crate::covariates::resolve_latent_transition(
                    link, d2, dims.k, mask, &row,
                )?);
            }
            out
        }
        _ => params.trans.clone(),
    };
    Ok((pi, trans))
}

// --- E-step ------------------------------------------------------------------

fn needs_unit_posteriors(spec: &ModelSpec) -> bool {
    spec.covariates.placement != CovariatePlacement::None
}

/// One E-step: expected counts and the log-likelihood at `params`.
pub fn e_step(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: DataRef,
) -> Result<(ExpectedCounts, f64)> {
    let per_subject = needs_unit_posteriors(spec);
    let joint = matches!(spec.measurement, MeasurementSpec::BivariateMarginal);

    if !per_subject {
        // subject-invariant manifest distribution: work on patterns
        let owned;
        let table: &PatternTable = match data {
            DataRef::Patterns(p) => p,
            DataRef::Panel(d) => {
                owned = aggregate_patterns(d)?;
                &owned
            }
        };
        let lattices: Vec<Result<LatticeResult>> = table
            .patterns
            .par_iter()
            .map(|pattern| {
                let em = emissions_shared(params, pattern, table.t_len, table.r);
                posteriors(params.pi.view(), &params.trans, em.view())
            })
            .collect();
        let mut counts = ExpectedCounts::empty(dims, false, joint);
        let mut loglik = 0.0;
        for (p_idx, lat) in lattices.into_iter().enumerate() {
            let lat = lat.map_err(|e| name_pattern(e, table, p_idx))?;
            let w = table.counts[p_idx];
            loglik += w * lat.log_f;
            let pattern = &table.patterns[p_idx];
            counts.absorb(&lat, &|t, j| pattern[t * table.r + j], w);
        }
        return Ok((counts, loglik));
    }

    let panel = match data {
        DataRef::Panel(d) => d,
        DataRef::Patterns(_) => {
            return Err(LmError::Data(
                "covariate models need subject-level data, not a pattern table".into(),
            ))
        }
    };
    let lattices: Vec<Result<LatticeResult>> = (0..panel.n)
        .into_par_iter()
        .map(|i| {
            let em = if spec.has_measurement_covariates() {
                emissions_for_subject(params, spec, dims, panel, i)?
            } else {
                emissions_shared(params, &panel.pattern_of(i), dims.t_len, dims.r)
            };
            let (pi, trans) = chain_for_subject(params, spec, dims, panel, i)?;
            posteriors(pi.view(), &trans, em.view())
        })
        .collect();
    let mut counts = ExpectedCounts::empty(dims, true, joint);
    let mut loglik = 0.0;
    for (i, lat) in lattices.into_iter().enumerate() {
        let lat = lat.map_err(|e| name_subject(e, panel, i))?;
        let w = panel.weight(i);
        loglik += w * lat.log_f;
        counts.absorb(&lat, &|t, j| panel.responses[(i, t, j)], w);
        counts.unit_post.as_mut().unwrap().push(UnitPosteriors {
            post_state: lat.post_state.clone(),
            post_pair: lat.post_pair.clone(),
            weight: w,
        });
    }
    Ok((counts, loglik))
}

fn name_pattern(e: LmError, table: &PatternTable, idx: usize) -> LmError {
    match e {
        LmError::ZeroMass { occasion, .. } => LmError::ZeroMass {
            occasion,
            unit: format!("pattern {:?}", table.patterns[idx]),
        },
        other => other,
    }
}

fn name_subject(e: LmError, panel: &PanelDataset, i: usize) -> LmError {
    match e {
        LmError::ZeroMass { occasion, .. } => LmError::ZeroMass {
            occasion,
            unit: format!("subject `{}`", panel.subject_ids[i]),
        },
        other => other,
    }
}

/// Log-likelihood at `params` without assembling counts.
pub fn loglik(params: &ModelParams, spec: &ModelSpec, dims: &Dims, data: DataRef) -> Result<f64> {
    if spec.is_multilevel() {
        let panel = match data {
            DataRef::Panel(d) => d,
            _ => return Err(LmError::Data("multilevel likelihood needs subjects".into())),
        };
        return crate::multilevel::multilevel_loglik(params, spec, dims, panel);
    }
    e_step(params, spec, dims, data).map(|(_, ll)| ll)
}

// --- M-step ------------------------------------------------------------------

const DENOM_EPS: f64 = 1e-10;

/// Closed-form updates legitimately produce zero cells (a category that
/// received no expected mass); clamp them to the link floor before mapping
/// back to coordinates.
fn clamp_row(row: &[f64]) -> Vec<f64> {
    row.iter().map(|&x| x.max(crate::links::PROB_FLOOR)).collect()
}

pub(crate) fn mlogit_coords(row: &[f64]) -> Vec<f64> {
    crate::links::apply_link(
        crate::links::LinkKind::Multinomial { reference: 0 },
        &clamp_row(row),
    )
    .expect("probability row")
}

fn diag_coords(row: &[f64], diag: usize) -> Vec<f64> {
    crate::links::apply_link(
        crate::links::LinkKind::Multinomial { reference: diag },
        &clamp_row(row),
    )
    .expect("probability row")
}

/// One M-step: closed-form updates where explicit solutions exist, a single
/// Fisher-scoring maximization per structural block otherwise (a generalized
/// EM step that never decreases the expected complete-data log-likelihood).
pub fn m_step(
    counts: &ExpectedCounts,
    spec: &ModelSpec,
    dims: &Dims,
    current: &ModelParams,
    data: Option<&PanelDataset>,
    scoring: &ScoringOptions,
) -> Result<ModelParams> {
    let chart = Chart::new(spec, dims)?;
    let mut coords = chart.flatten(current)?;
    for block in &chart.blocks {
        if block.len == 0 {
            continue;
        }
        let slice_range = block.offset..block.offset + block.len;
        match (block.kind, closed_form(block.kind, spec)) {
            (BlockKind::Measurement, true) => {
                let mut new = Vec::with_capacity(block.len);
                let time_varying = matches!(spec.measurement, MeasurementSpec::Free);
                for (j, &l) in dims.levels.iter().enumerate() {
                    for t in 0..dims.t_len {
                        if !time_varying && t > 0 {
                            continue;
                        }
                        for u in 0..dims.k {
                            let (num, denom): (Vec<f64>, f64) = if time_varying {
                                (
                                    (0..l).map(|y| counts.aresp[j][(t, u, y)]).collect(),
                                    counts.at[(t, u)],
                                )
                            } else {
                                (
                                    (0..l)
                                        .map(|y| {
                                            (0..dims.t_len)
                                                .map(|s| counts.aresp[j][(s, u, y)])
                                                .sum()
                                        })
                                        .collect(),
                                    (0..dims.t_len).map(|s| counts.at[(s, u)]).sum(),
                                )
                            };
                            if denom < DENOM_EPS {
                                // keep the current row
                                let cur: Vec<f64> =
                                    (0..l).map(|y| current.phi[j][(t, u, y)]).collect();
                                new.extend(mlogit_coords(&cur));
                            } else {
                                let row: Vec<f64> = num.iter().map(|&x| x / denom).collect();
                                new.extend(mlogit_coords(&row));
                            }
                        }
                    }
                }
                coords[slice_range].copy_from_slice(&new);
            }
            (BlockKind::Initial, true) => {
                if matches!(spec.initial, InitialSpec::Free) && dims.k > 1 {
                    let pi: Vec<f64> = counts.a1.iter().map(|&x| x / counts.n_total).collect();
                    coords[slice_range].copy_from_slice(&mlogit_coords(&pi));
                }
            }
            (BlockKind::Transition, true) => {
                let mut new = Vec::with_capacity(block.len);
                let k = dims.k;
                let mut push_row = |pooled: &Array2<f64>, current_m: &Array2<f64>, u: usize| {
                    let denom: f64 = pooled.row(u).sum();
                    if denom < DENOM_EPS {
                        let cur: Vec<f64> = (0..k).map(|v| current_m[(u, v)]).collect();
                        new.extend(diag_coords(&cur, u));
                    } else {
                        let row: Vec<f64> = (0..k).map(|v| pooled[(u, v)] / denom).collect();
                        new.extend(diag_coords(&row, u));
                    }
                };
                match spec.transition {
                    TransitionSpec::Free => {
                        for (idx, m) in counts.atrans.iter().enumerate() {
                            for u in 0..k {
                                push_row(m, &current.trans[idx], u);
                            }
                        }
                    }
                    TransitionSpec::Homogeneous => {
                        let mut pooled = Array2::zeros((k, k));
                        for m in &counts.atrans {
                            pooled += m;
                        }
                        for u in 0..k {
                            push_row(&pooled, &current.trans[0], u);
                        }
                    }
                    TransitionSpec::PartiallyHomogeneous { tbar } => {
                        let segments: Vec<(usize, usize)> = if tbar == dims.t_len {
                            vec![(0, dims.t_len - 1)]
                        } else {
                            vec![(0, tbar - 1), (tbar - 1, dims.t_len - 1)]
                        };
                        for (lo, hi) in segments {
                            let mut pooled = Array2::zeros((k, k));
                            for m in &counts.atrans[lo..hi] {
                                pooled += m;
                            }
                            for u in 0..k {
                                push_row(&pooled, &current.trans[lo], u);
                            }
                        }
                    }
                    _ => unreachable!("closed_form listed a structural transition"),
                }
                coords[slice_range].copy_from_slice(&new);
            }
            _ => {
                // structural block: one Fisher-scoring maximization
                let block_groups = groups::groups_for_block(&chart, block, counts, spec, dims, data)?;
                let theta0 = coords[slice_range.clone()].to_vec();
                let outcome = maximize(&block_groups, &theta0, scoring)?;
                coords[slice_range].copy_from_slice(&outcome.theta);
            }
        }
    }
    chart.unflatten(&coords)
}

fn closed_form(kind: BlockKind, spec: &ModelSpec) -> bool {
    match kind {
        BlockKind::Measurement => matches!(
            spec.measurement,
            MeasurementSpec::Free | MeasurementSpec::TimeInvariant
        ),
        BlockKind::Initial => matches!(spec.initial, InitialSpec::Free | InitialSpec::Uniform),
        BlockKind::Transition => matches!(
            spec.transition,
            TransitionSpec::Free
                | TransitionSpec::Homogeneous
                | TransitionSpec::PartiallyHomogeneous { .. }
                | TransitionSpec::Identity
        ),
        _ => false,
    }
}

// --- fit ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of random starts on top of the deterministic one.
    pub starts: usize,
    pub seed: u64,
    /// Relative log-likelihood change below which EM may stop.
    pub tol_loglik: f64,
    /// Maximum absolute coordinate change below which EM may stop.
    pub tol_param: f64,
    pub max_iter: usize,
    pub scoring: ScoringOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 9,
            seed: 0,
            tol_loglik: 1e-8,
            tol_param: 1e-6,
            max_iter: 5000,
            scoring: ScoringOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StartSummary {
    pub start: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub counts: ExpectedCounts,
    pub start_summaries: Vec<StartSummary>,
    /// Log-likelihood sequence of the winning run.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood sequences of every run (for monotonicity checks).
    pub traces: Vec<Vec<f64>>,
    /// Posterior cluster-class weights (multilevel fits only), `H x m`.
    pub cluster_posteriors: Option<Array2<f64>>,
    /// State relabelling applied at the end (`perm[new] = old`).
    pub permutation: Vec<usize>,
}

struct EmRun {
    params: ModelParams,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn run_em(
    start: ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: DataRef,
    panel: Option<&PanelDataset>,
    opts: &FitOptions,
) -> Result<EmRun> {
    let chart = Chart::new(spec, dims)?;
    let mut params = start;
    let (mut counts, mut ll) = e_step(&params, spec, dims, data)?;
    let mut trace = vec![ll];
    let mut coords = chart.flatten(&params)?;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let new_params = m_step(&counts, spec, dims, &params, panel, &opts.scoring)?;
        let (new_counts, new_ll) = e_step(&new_params, spec, dims, data)?;
        let new_coords = chart.flatten(&new_params)?;
        iterations += 1;
        trace.push(new_ll);
        let rel = (new_ll - ll).abs() / new_ll.abs().max(1.0);
        let dparam = coords
            .iter()
            .zip(&new_coords)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        params = new_params;
        counts = new_counts;
        ll = new_ll;
        coords = new_coords;
        if rel < opts.tol_loglik && dparam < opts.tol_param {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params,
        loglik: ll,
        iterations,
        converged,
        trace,
    })
}

fn check_compat(spec: &ModelSpec, data: &PanelDataset) -> Result<()> {
    spec.validate()?;
    for name in spec
        .covariates
        .columns
        .iter()
        .chain(spec.cluster_covariates.iter())
    {
        if !data.covariate_names.iter().any(|c| c == name) {
            return Err(LmError::Data(format!(
                "covariate column `{name}` not present in the data"
            )));
        }
    }
    if spec.is_multilevel() && data.cluster.is_none() {
        return Err(LmError::Data(
            "multilevel spec needs a cluster column in the data".into(),
        ));
    }
    if matches!(spec.measurement, MeasurementSpec::BivariateMarginal)
        && (data.r != 2 || data.levels != vec![2, 3])
    {
        return Err(LmError::Spec(
            "the bivariate marginal model needs two responses with 2 and 3 levels".into(),
        ));
    }
    if let TransitionSpec::PartiallyHomogeneous { tbar } = spec.transition {
        if !(2..=data.t_len).contains(&tbar) {
            return Err(LmError::Spec(format!(
                "tbar = {tbar} outside 2..={}",
                data.t_len
            )));
        }
    }
    Ok(())
}

/// Maximum likelihood fit by multi-start EM.
///
/// One deterministic start (quantile-split measurement probabilities) plus
/// `starts` random starts; the solution with the highest converged
/// log-likelihood wins and is state-relabelled when the spec permits.
pub fn fit<'a>(
    data: impl Into<DataRef<'a>>,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<FitResult> {
    let data = data.into();
    let panel: Option<&PanelDataset> = match data {
        DataRef::Panel(d) => {
            check_compat(spec, d)?;
            Some(d)
        }
        DataRef::Patterns(_) => None,
    };
    if spec.is_multilevel() {
        let panel = panel.ok_or_else(|| {
            LmError::Data("multilevel fits need subject-level data".into())
        })?;
        return crate::multilevel::fit_multilevel(panel, spec, options);
    }
    let dims = Dims::new(spec, data.t_len(), data.levels());

    // aggregate once when the manifest distribution is subject-invariant
    let owned_table;
    let (run_data, run_panel): (DataRef, Option<&PanelDataset>) = if needs_unit_posteriors(spec) {
        (data, panel)
    } else {
        match data {
            DataRef::Patterns(p) => (DataRef::Patterns(p), None),
            DataRef::Panel(d) => {
                owned_table = aggregate_patterns(d)?;
                (DataRef::Patterns(&owned_table), None)
            }
        }
    };

    let mut starts: Vec<ModelParams> = Vec::with_capacity(options.starts + 1);
    starts.push(start::deterministic_start(spec, &dims, run_data)?);
    for r in 0..options.starts {
        starts.push(start::random_start(spec, &dims, options.seed, r as u64)?);
    }

    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    let mut best: Option<EmRun> = None;
    for (s_idx, start_params) in starts.into_iter().enumerate() {
        match run_em(start_params, spec, &dims, run_data, run_panel, options) {
            Ok(run) => {
                summaries.push(StartSummary {
                    start: s_idx,
                    loglik: run.loglik,
                    iterations: run.iterations,
                    converged: run.converged,
                    error: None,
                });
                traces.push(run.trace.clone());
                // highest final log-likelihood wins; convergence only breaks
                // near-ties (a stuck run that formally converged must not
                // beat a better run that ran out of iterations)
                let better = match &best {
                    None => true,
                    Some(b) => {
                        run.loglik > b.loglik + 1e-9
                            || ((run.loglik - b.loglik).abs() <= 1e-9
                                && run.converged
                                && !b.converged)
                    }
                };
                if better {
                    best = Some(run);
                }
            }
            Err(e) => {
                summaries.push(StartSummary {
                    start: s_idx,
                    loglik: f64::NEG_INFINITY,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
                traces.push(Vec::new());
            }
        }
    }
    let best = best.ok_or_else(|| LmError::NoConvergence {
        context: "every EM start failed".into(),
        iterations: options.max_iter,
    })?;

    let (params, permutation) = canonicalize(&best.params, spec);
    let (counts, loglik) = e_step(&params, spec, &dims, run_data)?;
    Ok(FitResult {
        params,
        loglik,
        iterations: best.iterations,
        converged: best.converged,
        counts,
        start_summaries: summaries,
        loglik_trace: best.trace,
        traces,
        cluster_posteriors: None,
        permutation,
    })
}
