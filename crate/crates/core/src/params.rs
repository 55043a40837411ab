//! Model specification and parameter containers.
//!
//! A [`ModelSpec`] declares the latent-state count, the constraint family on
//! the measurement and latent sides, covariate placement and the multilevel
//! layer. A [`ModelParams`] always carries resolved probability objects
//! (initial vector, transition matrices, conditional response probabilities)
//! plus the structural coefficient blocks that generate them under
//! constrained specifications.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};
use crate::links::{apply_link, LinkKind};

/// Link family for measurement-side parameterizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFamily {
    /// Binary logit (two categories only).
    Logit,
    /// Reference-category logits against category 0.
    Multinomial,
    /// Cumulative logits for ordinal responses.
    Global,
    /// Continuation logits for ordinal responses.
    Continuation,
}

impl LinkFamily {
    pub fn kind(self) -> LinkKind {
        match self {
            LinkFamily::Logit => LinkKind::BinaryLogit,
            LinkFamily::Multinomial => LinkKind::Multinomial { reference: 0 },
            LinkFamily::Global => LinkKind::Global,
            LinkFamily::Continuation => LinkKind::Continuation,
        }
    }

    /// Number of slope coefficients per covariate column for a variable with
    /// `l` categories: multinomial logits carry one slope per non-reference
    /// category, cumulative and continuation logits share a single slope
    /// across cuts.
    pub fn slopes_per_covariate(self, l: usize) -> usize {
        match self {
            LinkFamily::Multinomial => l - 1,
            _ => 1,
        }
    }
}

/// Constraint family for the conditional response probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeasurementSpec {
    /// Unconstrained, time-varying probabilities.
    Free,
    /// Probabilities constant over occasions.
    TimeInvariant,
    /// Time-invariant probabilities parameterized through a link with one
    /// intercept vector per state; the form that covariates extend.
    StateIntercept { link: LinkFamily },
    /// Binary success logit `xi_u - psi_t` with `psi_1 = 0` for
    /// identification.
    Rasch,
    /// Joint distribution of two responses (binary, three-level) through
    /// marginal logits and two global log-odds ratios.
    BivariateMarginal,
}

/// Constraint on the initial probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialSpec {
    Free,
    /// `pi_u = 1/k`, skipped at the M-step.
    Uniform,
    /// Subject-specific initial probabilities from covariates; the link is
    /// declared in the covariate placement.
    CovariateLogit,
}

/// Structural-zero pattern for transition matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMask {
    /// Moves allowed only to adjacent states.
    Tridiagonal,
}

/// Constraint family for the transition probabilities.
///
/// The linear and logit kinds are time-homogeneous: one coefficient vector is
/// shared by all occasions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransitionSpec {
    Free,
    Homogeneous,
    /// One matrix for transitions up to occasion `tbar`, another after it.
    PartiallyHomogeneous { tbar: usize },
    /// No transitions: the chain is frozen at its initial state.
    Identity,
    /// All off-diagonal elements share a single value.
    EqualOffDiagonal,
    /// `pi_{v|u} = pi_{u|v}`, one parameter per unordered pair.
    Symmetric,
    /// Moves only to higher-labelled states; strictly-lower cells are 0.
    UpperTriangular,
    /// Logits with respect to the diagonal element, optionally masked.
    LogitDiagonal {
        #[serde(default)]
        mask: Option<TransitionMask>,
    },
    /// Cumulative logits per row, for ordered states.
    LogitGlobal,
    /// Subject-specific transitions from covariates.
    CovariateLogit {
        #[serde(default)]
        mask: Option<TransitionMask>,
    },
}

/// Link used when covariates act on the latent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentCovLink {
    Multinomial,
    Global,
}

/// Where covariates enter the model; at most one side, never both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariatePlacement {
    None,
    Measurement,
    Latent { link: LatentCovLink },
}

/// Covariate declaration: placement, columns and lagged-response depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub placement: CovariatePlacement,
    #[serde(default)]
    pub columns: Vec<String>,
    /// Lagged responses entering the design as one-hot encodings of the
    /// previous occasion's response; 0 or 1.
    #[serde(default)]
    pub lags: usize,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            placement: CovariatePlacement::None,
            columns: Vec::new(),
            lags: 0,
        }
    }
}

/// Declarative model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Latent-state count.
    pub k: usize,
    /// Cluster-class count; `Some` switches on the multilevel layer.
    #[serde(default)]
    pub m: Option<usize>,
    pub measurement: MeasurementSpec,
    pub initial: InitialSpec,
    pub transition: TransitionSpec,
    #[serde(default)]
    pub covariates: CovariateSpec,
    /// Cluster-level covariate columns (multilevel only).
    #[serde(default)]
    pub cluster_covariates: Vec<String>,
    /// Let the multilevel transition intercepts vary with the occasion.
    #[serde(default)]
    pub time_varying_ml_intercepts: bool,
}

impl ModelSpec {
    /// Minimal basic-model spec: free measurement, free initial, free
    /// transitions, no covariates.
    pub fn basic(k: usize) -> Self {
        ModelSpec {
            k,
            m: None,
            measurement: MeasurementSpec::Free,
            initial: InitialSpec::Free,
            transition: TransitionSpec::Free,
            covariates: CovariateSpec::default(),
            cluster_covariates: Vec::new(),
            time_varying_ml_intercepts: false,
        }
    }

    pub fn is_multilevel(&self) -> bool {
        self.m.is_some()
    }

    pub fn has_latent_covariates(&self) -> bool {
        matches!(self.initial, InitialSpec::CovariateLogit)
            || matches!(self.transition, TransitionSpec::CovariateLogit { .. })
            || (self.is_multilevel() && !self.covariates.columns.is_empty())
    }

    pub fn has_measurement_covariates(&self) -> bool {
        matches!(self.covariates.placement, CovariatePlacement::Measurement)
            && (!self.covariates.columns.is_empty() || self.covariates.lags > 0)
    }

    /// Structural validity of the spec itself (data-independent parts).
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LmError::Spec("k must be at least 1".into()));
        }
        if let Some(m) = self.m {
            if m == 0 {
                return Err(LmError::Spec("m must be at least 1".into()));
            }
        }
        let cov_latent = matches!(self.covariates.placement, CovariatePlacement::Latent { .. });
        let cov_measure = matches!(self.covariates.placement, CovariatePlacement::Measurement);
        let uses_latent_cov = matches!(self.initial, InitialSpec::CovariateLogit)
            || matches!(self.transition, TransitionSpec::CovariateLogit { .. });
        if uses_latent_cov && !cov_latent && !self.is_multilevel() {
            return Err(LmError::Spec(
                "covariate-logit initial/transition specs need covariates placed in the latent model"
                    .into(),
            ));
        }
        if cov_latent && cov_measure {
            return Err(LmError::Spec(
                "covariates may enter the measurement model or the latent model, not both".into(),
            ));
        }
        if cov_measure
            && !matches!(
                self.measurement,
                MeasurementSpec::StateIntercept { .. } | MeasurementSpec::BivariateMarginal
            )
        {
            return Err(LmError::Spec(
                "measurement covariates need a link-parameterized measurement model".into(),
            ));
        }
        if self.covariates.lags > 1 {
            return Err(LmError::Spec(
                "only first-order response lags are supported".into(),
            ));
        }
        if self.is_multilevel() {
            if cov_measure {
                return Err(LmError::Spec(
                    "the multilevel model places covariates in the latent model only".into(),
                ));
            }
            if matches!(self.measurement, MeasurementSpec::BivariateMarginal) {
                return Err(LmError::Spec(
                    "bivariate marginal measurement is not available in the multilevel model"
                        .into(),
                ));
            }
        }
        if !self.is_multilevel() && !self.cluster_covariates.is_empty() {
            return Err(LmError::Spec(
                "cluster covariates need a multilevel spec (set m)".into(),
            ));
        }
        Ok(())
    }
}

/// Free off-diagonal destinations per row under a mask (diagonal excluded).
pub fn mask_cells(k: usize, mask: Option<TransitionMask>) -> Vec<Vec<usize>> {
    (0..k)
        .map(|u| {
            (0..k)
                .filter(|&v| {
                    v != u
                        && match mask {
                            None => true,
                            Some(TransitionMask::Tridiagonal) => v + 1 == u || v == u + 1,
                        }
                })
                .collect()
        })
        .collect()
}

/// Problem dimensions derived from a spec and a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    pub k: usize,
    pub t_len: usize,
    pub r: usize,
    pub levels: Vec<usize>,
    /// Width of the subject-occasion covariate row, including lag encodings.
    pub p_cov: usize,
    /// Width of the cluster covariate vector.
    pub q_cluster: usize,
    /// Cluster-class count (0 when not multilevel).
    pub m: usize,
}

impl Dims {
    pub fn new(spec: &ModelSpec, t_len: usize, levels: &[usize]) -> Self {
        let lag_width: usize = if spec.covariates.lags > 0 {
            levels.iter().map(|&l| l - 1).sum()
        } else {
            0
        };
        let p_cov = match spec.covariates.placement {
            CovariatePlacement::None if !spec.is_multilevel() => 0,
            _ => spec.covariates.columns.len() + lag_width,
        };
        Dims {
            k: spec.k,
            t_len,
            r: levels.len(),
            levels: levels.to_vec(),
            p_cov,
            q_cluster: spec.cluster_covariates.len(),
            m: spec.m.unwrap_or(0),
        }
    }
}

/// The full parameter vector: resolved probability objects plus structural
/// coefficient blocks. Layouts of the coefficient blocks are fixed by the
/// coordinate chart in [`crate::coords`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Initial probabilities (baseline subject under covariate specs;
    /// baseline chain under the multilevel spec).
    pub pi: Array1<f64>,
    /// Transition matrices for `t = 2..=T`, index `t - 2`.
    pub trans: Vec<Array2<f64>>,
    /// Conditional response probabilities per variable, shape `T x k x l_j`.
    pub phi: Vec<Array3<f64>>,
    /// Joint response table `k x (l1*l2)` for the bivariate marginal spec.
    pub phi_joint: Option<Array2<f64>>,
    /// Measurement structural coefficients.
    pub beta: Option<Vec<f64>>,
    /// Transition structural coefficients (linear and logit families).
    pub delta: Option<Vec<f64>>,
    /// Covariate coefficients for the initial probabilities.
    pub delta1: Option<Vec<f64>>,
    /// Covariate coefficients for the transition probabilities.
    pub delta2: Option<Vec<f64>>,
    /// Cluster-class masses (multilevel).
    pub rho: Option<Array1<f64>>,
    /// Cluster-covariate logit coefficients (multilevel).
    pub gamma: Option<Vec<f64>>,
    /// Multilevel initial-probability block `[delta0 | cuts | slopes]`.
    pub ml_initial: Option<Vec<f64>>,
    /// Multilevel transition block `[eta0 | row cuts | slopes]`.
    pub ml_trans: Option<Vec<f64>>,
}

impl ModelParams {
    /// Assemble a basic parameter set from resolved probabilities.
    pub fn from_probs(pi: Array1<f64>, trans: Vec<Array2<f64>>, phi: Vec<Array3<f64>>) -> Self {
        ModelParams {
            pi,
            trans,
            phi,
            phi_joint: None,
            beta: None,
            delta: None,
            delta1: None,
            delta2: None,
            rho: None,
            gamma: None,
            ml_initial: None,
            ml_trans: None,
        }
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn t_len(&self) -> usize {
        self.phi.first().map_or(1, |p| p.dim().0)
    }
}

/// A single invariant violation found by [`validate_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

/// Report listing every violated invariant; empty iff the parameters are
/// valid under the spec.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

const SIMPLEX_TOL: f64 = 1e-8;

fn check_simplex(report: &mut ValidationReport, location: &str, p: &[f64]) {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        report.push(location, format!("probabilities sum {sum:.6} != 1"));
    }
    if p.iter().any(|&x| x < -1e-12 || !x.is_finite()) {
        report.push(location, "negative or non-finite probability".to_string());
    }
}

/// Check every invariant of a parameter set under a spec and report each
/// violation with its location.
pub fn validate_params(params: &ModelParams, spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = spec.k;
    if params.pi.len() != k {
        report.push("pi", format!("length {} != k = {k}", params.pi.len()));
        return report;
    }
    check_simplex(&mut report, "pi", params.pi.as_slice().unwrap());
    if matches!(spec.initial, InitialSpec::Uniform) {
        for u in 0..k {
            if (params.pi[u] - 1.0 / k as f64).abs() > SIMPLEX_TOL {
                report.push("pi", "uniform initial probabilities violated");
                break;
            }
        }
    }

    for (idx, m) in params.trans.iter().enumerate() {
        let t = idx + 2;
        if m.dim() != (k, k) {
            report.push(format!("trans[t={t}]"), "shape mismatch");
            continue;
        }
        for u in 0..k {
            let row: Vec<f64> = (0..k).map(|v| m[(u, v)]).collect();
            let total: f64 = row.iter().sum();
            if total.abs() < SIMPLEX_TOL {
                report.push(
                    format!("trans[t={t}][u={}]", u + 1),
                    "unreachable row: all transition probabilities are 0",
                );
                continue;
            }
            check_simplex(&mut report, &format!("trans[t={t}][u={}]", u + 1), &row);
        }
        let masked = match spec.transition {
            TransitionSpec::LogitDiagonal { mask } | TransitionSpec::CovariateLogit { mask } => {
                mask.map(|ms| mask_cells(k, Some(ms)))
            }
            TransitionSpec::UpperTriangular => Some(
                (0..k)
                    .map(|u| (u + 1..k).collect::<Vec<usize>>())
                    .collect(),
            ),
            _ => None,
        };
        if let Some(allowed) = masked {
            for u in 0..k {
                for v in 0..k {
                    if v != u && !allowed[u].contains(&v) && m[(u, v)].abs() > 1e-12 {
                        report.push(
                            format!("trans[t={t}][u={},v={}]", u + 1, v + 1),
                            "structural zero violated",
                        );
                    }
                }
            }
        }
        match spec.transition {
            TransitionSpec::Identity => {
                for u in 0..k {
                    if (m[(u, u)] - 1.0).abs() > SIMPLEX_TOL {
                        report.push(format!("trans[t={t}]"), "identity transition violated");
                        break;
                    }
                }
            }
            TransitionSpec::EqualOffDiagonal if k > 1 => {
                let d = m[(0, 1.min(k - 1))];
                for u in 0..k {
                    for v in 0..k {
                        if u != v && (m[(u, v)] - d).abs() > SIMPLEX_TOL {
                            report.push(
                                format!("trans[t={t}]"),
                                "off-diagonal elements are not all equal",
                            );
                        }
                    }
                }
            }
            TransitionSpec::Symmetric => {
                for u in 0..k {
                    for v in u + 1..k {
                        if (m[(u, v)] - m[(v, u)]).abs() > SIMPLEX_TOL {
                            report.push(format!("trans[t={t}]"), "transition matrix not symmetric");
                        }
                    }
                }
            }
            _ => {}
        }
    }

    for (j, phi) in params.phi.iter().enumerate() {
        let (t_len, kk, _l) = phi.dim();
        if kk != k {
            report.push(format!("phi[{}]", j + 1), "state axis mismatch");
            continue;
        }
        for t in 0..t_len {
            for u in 0..k {
                let row: Vec<f64> = phi
                    .index_axis(ndarray::Axis(0), t)
                    .index_axis(ndarray::Axis(0), u)
                    .to_vec();
                check_simplex(
                    &mut report,
                    &format!("phi[{}][t={},u={}]", j + 1, t + 1, u + 1),
                    &row,
                );
            }
        }
    }
    if let Some(joint) = &params.phi_joint {
        for u in 0..joint.dim().0 {
            let row: Vec<f64> = joint.row(u).to_vec();
            check_simplex(&mut report, &format!("phi_joint[u={}]", u + 1), &row);
        }
    }
    if let Some(rho) = &params.rho {
        check_simplex(&mut report, "rho", rho.as_slice().unwrap());
    }
    report
}

/// Check the monotonicity hypothesis: the per-variable mean response category
/// is non-decreasing in the state label at every occasion.
pub fn check_monotonicity(params: &ModelParams) -> bool {
    for phi in &params.phi {
        let (t_len, k, l) = phi.dim();
        for t in 0..t_len {
            for u in 1..k {
                let mean = |s: usize| -> f64 { (0..l).map(|y| y as f64 * phi[(t, s, y)]).sum() };
                if mean(u) + 1e-12 < mean(u - 1) {
                    return false;
                }
            }
        }
    }
    true
}

/// Specs closed under state permutation, for which fitted states are
/// relabelled so a scalar state score is non-decreasing. Masked, ordered,
/// covariate and multilevel specs are structurally ordered already and are
/// left untouched.
pub fn is_canonicalizable(spec: &ModelSpec) -> bool {
    if spec.is_multilevel() || spec.covariates.placement != CovariatePlacement::None {
        return false;
    }
    let measurement_ok = matches!(
        spec.measurement,
        MeasurementSpec::Free
            | MeasurementSpec::TimeInvariant
            | MeasurementSpec::Rasch
            | MeasurementSpec::StateIntercept { .. }
    );
    let initial_ok = matches!(spec.initial, InitialSpec::Free | InitialSpec::Uniform);
    let transition_ok = matches!(
        spec.transition,
        TransitionSpec::Free
            | TransitionSpec::Homogeneous
            | TransitionSpec::PartiallyHomogeneous { .. }
            | TransitionSpec::Identity
            | TransitionSpec::EqualOffDiagonal
            | TransitionSpec::Symmetric
            | TransitionSpec::LogitDiagonal { mask: None }
    );
    measurement_ok && initial_ok && transition_ok
}

/// Scalar score used to order states: mean response category averaged over
/// occasions and variables (for binary data this is the success probability).
pub fn state_scores(params: &ModelParams) -> Vec<f64> {
    let k = params.k();
    let mut scores = vec![0.0; k];
    let mut denom = 0.0;
    for phi in &params.phi {
        let (t_len, _, l) = phi.dim();
        for t in 0..t_len {
            for (u, score) in scores.iter_mut().enumerate() {
                *score += (0..l).map(|y| y as f64 * phi[(t, u, y)]).sum::<f64>();
            }
        }
        denom += t_len as f64;
    }
    for s in &mut scores {
        *s /= denom.max(1.0);
    }
    scores
}

/// The fully-free spec is identified only up to an independent state
/// permutation at every occasion: with time-varying emissions and
/// transitions, relabelling occasion `t` by `sigma_t` and remapping
/// `pi, Pi^(t), phi^(t)` accordingly leaves the manifest distribution
/// untouched.
fn per_occasion_gauge(spec: &ModelSpec) -> bool {
    matches!(spec.measurement, MeasurementSpec::Free)
        && matches!(spec.transition, TransitionSpec::Free)
        && matches!(spec.initial, InitialSpec::Free | InitialSpec::Uniform)
}

/// Mean response category of each state at one occasion.
fn occasion_scores(params: &ModelParams, t: usize) -> Vec<f64> {
    let k = params.k();
    let mut scores = vec![0.0; k];
    for phi in &params.phi {
        let l = phi.dim().2;
        for (u, score) in scores.iter_mut().enumerate() {
            *score += (0..l).map(|y| y as f64 * phi[(t, u, y)]).sum::<f64>();
        }
    }
    scores
}

fn sort_perm(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    perm
}

/// Relabel the fully-free spec so the state score is non-decreasing at every
/// occasion (its gauge freedom is one permutation per occasion).
fn canonicalize_per_occasion(params: &ModelParams) -> (ModelParams, Vec<usize>) {
    let t_len = params.t_len();
    let perms: Vec<Vec<usize>> = (0..t_len)
        .map(|t| sort_perm(&occasion_scores(params, t)))
        .collect();
    let mut out = params.clone();
    for (new_u, &old_u) in perms[0].iter().enumerate() {
        out.pi[new_u] = params.pi[old_u];
    }
    for (idx, (m_out, m_in)) in out.trans.iter_mut().zip(&params.trans).enumerate() {
        let row_perm = &perms[idx];
        let col_perm = &perms[idx + 1];
        for (new_u, &old_u) in row_perm.iter().enumerate() {
            for (new_v, &old_v) in col_perm.iter().enumerate() {
                m_out[(new_u, new_v)] = m_in[(old_u, old_v)];
            }
        }
    }
    for (phi_out, phi_in) in out.phi.iter_mut().zip(&params.phi) {
        let l = phi_in.dim().2;
        for (t, perm) in perms.iter().enumerate() {
            for (new_u, &old_u) in perm.iter().enumerate() {
                for y in 0..l {
                    phi_out[(t, new_u, y)] = phi_in[(t, old_u, y)];
                }
            }
        }
    }
    let first = perms[0].clone();
    (out, first)
}

/// Relabel states so the state score is non-decreasing. Returns the permuted
/// parameters and the applied permutation (`perm[new] = old`; the occasion-1
/// permutation when the spec has per-occasion gauge freedom). Specs outside
/// [`is_canonicalizable`] are returned unchanged.
pub fn canonicalize(params: &ModelParams, spec: &ModelSpec) -> (ModelParams, Vec<usize>) {
    let k = params.k();
    let identity: Vec<usize> = (0..k).collect();
    if !is_canonicalizable(spec) || k <= 1 {
        return (params.clone(), identity);
    }
    if per_occasion_gauge(spec) {
        return canonicalize_per_occasion(params);
    }
    let scores = state_scores(params);
    let perm = sort_perm(&scores);
    if perm == identity {
        return (params.clone(), identity);
    }

    let mut out = params.clone();
    for (new_u, &old_u) in perm.iter().enumerate() {
        out.pi[new_u] = params.pi[old_u];
    }
    for (m_out, m_in) in out.trans.iter_mut().zip(&params.trans) {
        for (new_u, &old_u) in perm.iter().enumerate() {
            for (new_v, &old_v) in perm.iter().enumerate() {
                m_out[(new_u, new_v)] = m_in[(old_u, old_v)];
            }
        }
    }
    for (phi_out, phi_in) in out.phi.iter_mut().zip(&params.phi) {
        let (t_len, _, l) = phi_in.dim();
        for t in 0..t_len {
            for (new_u, &old_u) in perm.iter().enumerate() {
                for y in 0..l {
                    phi_out[(t, new_u, y)] = phi_in[(t, old_u, y)];
                }
            }
        }
    }

    // Structural blocks: permute (Rasch abilities, per-state intercepts) or
    // rebuild from the permuted probabilities where the block is saturated.
    match spec.measurement {
        MeasurementSpec::Rasch => {
            if let Some(beta) = &mut out.beta {
                let old = params.beta.as_ref().unwrap();
                for (new_u, &old_u) in perm.iter().enumerate() {
                    beta[new_u] = old[old_u];
                }
            }
        }
        MeasurementSpec::StateIntercept { link }
            if out.beta.is_some() => {
                let mut beta = Vec::new();
                for phi in &out.phi {
                    let l = phi.dim().2;
                    for u in 0..k {
                        let row: Vec<f64> = (0..l).map(|y| phi[(0, u, y)]).collect();
                        beta.extend(apply_link(link.kind(), &row).unwrap());
                    }
                }
                out.beta = Some(beta);
            }
        _ => {}
    }
    match spec.transition {
        TransitionSpec::Symmetric => {
            if out.delta.is_some() && !out.trans.is_empty() {
                let m = &out.trans[0];
                let mut delta = Vec::new();
                for u in 0..k {
                    for v in u + 1..k {
                        delta.push(m[(u, v)]);
                    }
                }
                out.delta = Some(delta);
            }
        }
        TransitionSpec::LogitDiagonal { mask: None }
            if out.delta.is_some() && !out.trans.is_empty() => {
                let m = &out.trans[0];
                let mut delta = Vec::new();
                for u in 0..k {
                    for v in 0..k {
                        if v != u {
                            delta.push((m[(u, v)].max(1e-300) / m[(u, u)].max(1e-300)).ln());
                        }
                    }
                }
                out.delta = Some(delta);
            }
        _ => {}
    }
    (out, perm)
}

/// The built-in constraint families as named specs, used by the acceptance
/// suite and the monotonicity checks. `tbar` parameterizes the partial
/// homogeneity split; the Rasch entry needs binary univariate data.
pub fn builtin_constraint_specs(k: usize, tbar: usize) -> Vec<(String, ModelSpec)> {
    let base = ModelSpec::basic(k);
    let with = |measurement: MeasurementSpec, transition: TransitionSpec| -> ModelSpec {
        ModelSpec {
            measurement,
            transition,
            ..base.clone()
        }
    };
    let ti = MeasurementSpec::TimeInvariant;
    let mut out = vec![
        ("free".to_string(), base.clone()),
        ("time_invariant".to_string(), with(ti, TransitionSpec::Free)),
        (
            "homogeneous".to_string(),
            with(ti, TransitionSpec::Homogeneous),
        ),
        (
            "partially_homogeneous".to_string(),
            with(ti, TransitionSpec::PartiallyHomogeneous { tbar }),
        ),
        ("identity".to_string(), with(ti, TransitionSpec::Identity)),
        (
            "equal_off_diagonal".to_string(),
            with(ti, TransitionSpec::EqualOffDiagonal),
        ),
        ("symmetric".to_string(), with(ti, TransitionSpec::Symmetric)),
        (
            "upper_triangular".to_string(),
            with(ti, TransitionSpec::UpperTriangular),
        ),
        (
            "logit_diagonal".to_string(),
            with(ti, TransitionSpec::LogitDiagonal { mask: None }),
        ),
        (
            "tridiagonal".to_string(),
            with(
                ti,
                TransitionSpec::LogitDiagonal {
                    mask: Some(TransitionMask::Tridiagonal),
                },
            ),
        ),
        (
            "logit_global".to_string(),
            with(ti, TransitionSpec::LogitGlobal),
        ),
        (
            "state_intercept_global".to_string(),
            with(
                MeasurementSpec::StateIntercept {
                    link: LinkFamily::Global,
                },
                TransitionSpec::Homogeneous,
            ),
        ),
        (
            "rasch".to_string(),
            with(MeasurementSpec::Rasch, TransitionSpec::Homogeneous),
        ),
    ];
    let mut uniform = with(ti, TransitionSpec::Homogeneous);
    uniform.initial = InitialSpec::Uniform;
    out.push(("uniform_initial".to_string(), uniform));
    out
}
