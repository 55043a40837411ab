//! Grouped categorical likelihood machinery.
//!
//! Every constrained M-step and the EM-identity score reduce to the same
//! shape: maximize `sum_g sum_y a_{g,y} log p_{g,y}(theta)` where each group
//! `g` carries expected counts over the categories of one cell and a
//! differentiable map from a coefficient block to its probability vector.
//! With `D_g = dp_g/dtheta` the score is `sum_g D_g' (a_g / p_g)` and the
//! expected information is `sum_g n_g D_g' diag(1/p_g) D_g`, which reproduces
//! the classical binary-logit and multinomial-logit formulas.

use nalgebra::{DMatrix, DVector};

use crate::error::{LmError, Result};
use crate::links::{invert_link_with_jacobian, LinkKind};

/// Interior bound for linear-in-probability models; iterates whose cells
/// fall outside `[EPS, 1 - EPS]` are rejected and the step halved.
pub const LINEAR_PROB_EPS: f64 = 1e-8;

/// Nonlinear inner transform applied to a coefficient block before the
/// linear design: identity, or decreasing-cut expansion on marked segments.
#[derive(Debug, Clone)]
pub enum InnerTransform {
    Identity,
    /// Within the block, each `(start, len)` segment holds a first cut
    /// followed by log decrements; it expands to strictly decreasing cuts.
    DecreasingCuts { segments: Vec<(usize, usize)> },
}

impl InnerTransform {
    fn apply(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            InnerTransform::Identity => theta.to_vec(),
            InnerTransform::DecreasingCuts { segments } => {
                let mut out = theta.to_vec();
                for &(start, len) in segments {
                    let cuts = crate::coords::cuts_from_s(&theta[start..start + len]);
                    out[start..start + len].copy_from_slice(&cuts);
                }
                out
            }
        }
    }

    /// Jacobian `d inner / d theta` (square).
    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = theta.len();
        let mut jac = DMatrix::identity(d, d);
        if let InnerTransform::DecreasingCuts { segments } = self {
            for &(start, len) in segments {
                let seg = crate::coords::cuts_jacobian(&theta[start..start + len]);
                for r in 0..len {
                    for c in 0..len {
                        jac[(start + r, start + c)] = seg[(r, c)];
                    }
                }
            }
        }
        jac
    }
}

/// Affine predictor map `eta = design * transform(theta) + offset`.
#[derive(Debug, Clone)]
pub struct EtaMap {
    pub design: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub transform: InnerTransform,
}

impl EtaMap {
    pub fn dense(design: DMatrix<f64>) -> Self {
        let rows = design.nrows();
        EtaMap {
            design,
            offset: DVector::zeros(rows),
            transform: InnerTransform::Identity,
        }
    }

    fn eval(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let inner = self.transform.apply(theta);
        let inner_v = DVector::from_vec(inner);
        let eta = &self.design * &inner_v + &self.offset;
        let jac = match self.transform {
            InnerTransform::Identity => self.design.clone(),
            _ => &self.design * self.transform.jacobian(theta),
        };
        (eta, jac)
    }
}

/// Probability model of one group.
#[derive(Debug, Clone)]
pub enum GroupModel {
    /// `p = invlink(eta(theta))` through one of the link families.
    Linked { link: LinkKind, eta: EtaMap },
    /// Softmax over `dim` cells with a fixed reference cell of weight one,
    /// free cells listed in `cells` (remaining cells are structural zeros).
    MaskedSoftmax {
        dim: usize,
        reference: usize,
        cells: Vec<usize>,
        eta: EtaMap,
    },
    /// Linear-in-probability model: `p[cells] = design * theta`, the
    /// complement cell absorbs the remainder.
    LinearSimplex {
        dim: usize,
        complement: usize,
        cells: Vec<usize>,
        design: DMatrix<f64>,
    },
    /// Six-cell bivariate table parameterized by marginal logits and
    /// log-odds ratios; inverted numerically.
    Bivariate { eta: EtaMap },
}

/// Expected counts plus the probability model of one cell.
#[derive(Debug, Clone)]
pub struct Group {
    pub counts: Vec<f64>,
    pub model: GroupModel,
}

impl Group {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Probability vector and Jacobian `dp/dtheta` at `theta`.
    pub fn eval(&self, theta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        match &self.model {
            GroupModel::Linked { link, eta } => {
                let (eta_v, deta) = eta.eval(theta);
                let (p, dp_deta) = invert_link_with_jacobian(*link, eta_v.as_slice())?;
                Ok((p, dp_deta * deta))
            }
            GroupModel::MaskedSoftmax {
                dim,
                reference,
                cells,
                eta,
            } => {
                let (eta_v, deta) = eta.eval(theta);
                let mut w = vec![0.0; *dim];
                // the reference cell has implicit predictor 0
                let shift = eta_v.iter().cloned().fold(0.0_f64, f64::max);
                let mut z = (-shift).exp();
                w[*reference] = (-shift).exp();
                for (idx, &v) in cells.iter().enumerate() {
                    let e = (eta_v[idx] - shift).exp();
                    w[v] = e;
                    z += e;
                }
                let p: Vec<f64> = w.iter().map(|&x| x / z).collect();
                // dp_v/deta_c = p_v (I[v = cell_c] - p_{cell_c})
                let mut dp_deta = DMatrix::zeros(*dim, cells.len());
                for (c, &vc) in cells.iter().enumerate() {
                    for v in 0..*dim {
                        dp_deta[(v, c)] = p[v] * (if v == vc { 1.0 } else { 0.0 } - p[vc]);
                    }
                }
                Ok((p, dp_deta * deta))
            }
            GroupModel::LinearSimplex {
                dim,
                complement,
                cells,
                design,
            } => {
                let th = DVector::from_row_slice(theta);
                let vals = design * th;
                let mut p = vec![0.0; *dim];
                let mut rest = 0.0;
                for (idx, &cell) in cells.iter().enumerate() {
                    p[cell] = vals[idx];
                    rest += vals[idx];
                }
                p[*complement] = 1.0 - rest;
                let feasible =
                    |x: f64| x.is_finite() && (x == 0.0 || x >= LINEAR_PROB_EPS - 1e-15);
                if !p.iter().all(|&x| feasible(x)) || p[*complement] < LINEAR_PROB_EPS - 1e-15 {
                    return Err(LmError::Numerical(
                        "linear probability model left the feasible interior".into(),
                    ));
                }
                let mut jac = DMatrix::zeros(*dim, theta.len());
                for (idx, &cell) in cells.iter().enumerate() {
                    for c in 0..theta.len() {
                        jac[(cell, c)] = design[(idx, c)];
                        jac[(*complement, c)] -= design[(idx, c)];
                    }
                }
                Ok((p, jac))
            }
            GroupModel::Bivariate { eta } => {
                let (eta_v, deta) = eta.eval(theta);
                let eta_arr: [f64; 5] = [eta_v[0], eta_v[1], eta_v[2], eta_v[3], eta_v[4]];
                let (p, dp_deta) = crate::covariates::bivariate_joint_with_jacobian(&eta_arr)?;
                Ok((p.to_vec(), dp_deta * deta))
            }
        }
    }
}

/// `sum_g sum_y a_{g,y} log p_{g,y}(theta)`; cells with zero counts are
/// skipped so structural zeros contribute nothing.
pub fn objective(groups: &[Group], theta: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for g in groups {
        let (p, _) = g.eval(theta)?;
        for (y, &a) in g.counts.iter().enumerate() {
            if a > 0.0 {
                if p[y] <= 0.0 {
                    return Err(LmError::Numerical(
                        "zero probability at a cell with positive expected count".into(),
                    ));
                }
                total += a * p[y].ln();
            }
        }
    }
    Ok(total)
}

/// Score vector of the grouped objective.
pub fn score(groups: &[Group], theta: &[f64]) -> Result<DVector<f64>> {
    let mut s = DVector::zeros(theta.len());
    for g in groups {
        let (p, jac) = g.eval(theta)?;
        for (y, &a) in g.counts.iter().enumerate() {
            if a != 0.0 {
                if p[y] <= 0.0 {
                    return Err(LmError::Numerical(
                        "zero probability at a cell with positive expected count".into(),
                    ));
                }
                let w = a / p[y];
                for c in 0..theta.len() {
                    s[c] += w * jac[(y, c)];
                }
            }
        }
    }
    Ok(s)
}

/// Expected (Fisher) information of the grouped objective.
pub fn fisher_information(groups: &[Group], theta: &[f64]) -> Result<DMatrix<f64>> {
    let dim = theta.len();
    let mut info = DMatrix::zeros(dim, dim);
    for g in groups {
        let n_g = g.total();
        if n_g <= 0.0 {
            continue;
        }
        let (p, jac) = g.eval(theta)?;
        for (y, &py) in p.iter().enumerate() {
            if py <= 1e-300 {
                continue;
            }
            let w = n_g / py;
            for a in 0..dim {
                let ja = jac[(y, a)];
                if ja == 0.0 {
                    continue;
                }
                for b in a..dim {
                    info[(a, b)] += w * ja * jac[(y, b)];
                }
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    Ok(info)
}

#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            max_iter: 100,
            tol: 1e-10,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoringOutcome {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn rank_of(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if max_sv == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&sv| sv > max_sv * 1e-12)
        .count()
}

/// Fisher scoring with step-halving. The returned objective never falls
/// below the starting objective, so one call per EM iteration preserves
/// monotonicity of the outer algorithm.
pub fn maximize(groups: &[Group], theta0: &[f64], opts: &ScoringOptions) -> Result<ScoringOutcome> {
    let mut theta = theta0.to_vec();
    if theta.is_empty() {
        return Ok(ScoringOutcome {
            theta,
            objective: objective(groups, &[])?,
            iterations: 0,
        });
    }
    let mut obj = objective(groups, &theta)?;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let s = score(groups, &theta)?;
        let info = fisher_information(groups, &theta)?;
        let lu = info.clone().lu();
        let step = match lu.solve(&s) {
            Some(step) if step.iter().all(|x| x.is_finite()) => step,
            _ => {
                return Err(LmError::Singular {
                    context: "Fisher scoring".into(),
                    rank: rank_of(&info),
                    dim: theta.len(),
                });
            }
        };
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(&t, &d)| t + lambda * d)
                .collect();
            match objective(groups, &cand) {
                Ok(cand_obj) if cand_obj.is_finite() && cand_obj >= obj - 1e-12 => {
                    accepted = Some((cand, cand_obj));
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        iterations += 1;
        match accepted {
            Some((cand, cand_obj)) => {
                let gain = cand_obj - obj;
                theta = cand;
                obj = cand_obj;
                if gain < opts.tol {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(ScoringOutcome {
        theta,
        objective: obj,
        iterations,
    })
}
