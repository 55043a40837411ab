//! Covariate designs: subject/occasion-specific probabilities for covariates
//! placed in the measurement model or in the latent model, plus the bivariate
//! marginal parameterization for two response variables.
//!
//! Coefficient layouts (fixed; the coordinate chart addresses them):
//!
//! * measurement, per variable `j` with `l` categories:
//!   `[intercepts: k blocks of (l-1)] [slopes]` where multinomial links carry
//!   `(l-1) x p` category-major slopes and binary/global/continuation links a
//!   single shared slope per covariate column;
//! * bivariate marginal: `[xi1 (k)] [xi2 (k)] [xi3 (k)] [beta4] [beta5]`
//!   plus `[beta1 (p)] [beta2 (p)] [beta3 (p)]` when covariates are present;
//! * latent initial, multinomial link (reference = state 1):
//!   `[intercepts (k-1)] [slopes (k-1) x p, state-major]`;
//! * latent initial, global link: `[cut block (k-1), reparameterized]
//!   [slopes p, shared across cuts]`;
//! * latent transition, multinomial link (reference = diagonal):
//!   `[intercepts, one per free off-diagonal cell, row-major] [slopes p,
//!   shared]`; masked cells stay exactly zero;
//! * latent transition, global link: `[k cut blocks of (k-1)] [slopes p,
//!   shared]`.
//!
//! Lagged responses enter a covariate row as one-hot encodings of the
//! previous occasion's response (category 0 is the reference); occasion 1
//! carries zeros in the lag slots.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::coords::cuts_from_s;
use crate::error::{LmError, Result};
use crate::links::{invert_link, LinkKind};
use crate::params::{mask_cells, Dims, LatentCovLink, LinkFamily, TransitionMask};

/// Covariate row for one subject-occasion: user columns followed by lag
/// one-hot encodings. `prev_y` is the previous occasion's response vector
/// (`None` at occasion 1, where lag slots are zero).
pub fn covariate_row(
    x_row: Option<&[f64]>,
    prev_y: Option<&[usize]>,
    levels: &[usize],
    lags: usize,
) -> Vec<f64> {
    let mut row = x_row.map(|x| x.to_vec()).unwrap_or_default();
    if lags > 0 {
        for (j, &lj) in levels.iter().enumerate() {
            for cat in 1..lj {
                let hit = prev_y.map(|y| y[j] == cat).unwrap_or(false);
                row.push(if hit { 1.0 } else { 0.0 });
            }
        }
    }
    row
}

// --- measurement placement --------------------------------------------------

/// Length of the measurement coefficient vector for one variable.
pub fn measurement_block_len(link: LinkFamily, k: usize, l: usize, p: usize) -> usize {
    k * (l - 1) + p * link.slopes_per_covariate(l)
}

/// Predictor for variable `j`, state `u` given a covariate row; `beta_j` is
/// that variable's coefficient block.
pub fn measurement_eta(
    link: LinkFamily,
    beta_j: &[f64],
    k: usize,
    l: usize,
    u: usize,
    row: &[f64],
) -> Vec<f64> {
    let p = row.len();
    let mut eta: Vec<f64> = beta_j[u * (l - 1)..(u + 1) * (l - 1)].to_vec();
    let slopes = &beta_j[k * (l - 1)..];
    match link {
        LinkFamily::Multinomial => {
            for (c, e) in eta.iter_mut().enumerate() {
                for (col, &x) in row.iter().enumerate() {
                    *e += slopes[c * p + col] * x;
                }
            }
        }
        _ => {
            let shift: f64 = slopes.iter().zip(row).map(|(&s, &x)| s * x).sum();
            for e in &mut eta {
                *e += shift;
            }
        }
    }
    eta
}

/// Conditional response probabilities for variable `j`, state `u` at one
/// subject-occasion.
pub fn resolve_measurement(
    link: LinkFamily,
    beta_j: &[f64],
    k: usize,
    l: usize,
    u: usize,
    row: &[f64],
) -> Result<Vec<f64>> {
    invert_link(link.kind(), &measurement_eta(link, beta_j, k, l, u, row))
}

/// Design matrix `(l-1) x len(beta_j)` of the measurement predictor in the
/// variable's coefficient block.
pub fn measurement_design(
    link: LinkFamily,
    k: usize,
    l: usize,
    u: usize,
    row: &[f64],
) -> DMatrix<f64> {
    let p = row.len();
    let width = measurement_block_len(link, k, l, p);
    let mut z = DMatrix::zeros(l - 1, width);
    for c in 0..l - 1 {
        z[(c, u * (l - 1) + c)] = 1.0;
    }
    let slope_base = k * (l - 1);
    match link {
        LinkFamily::Multinomial => {
            for c in 0..l - 1 {
                for (col, &x) in row.iter().enumerate() {
                    z[(c, slope_base + c * p + col)] = x;
                }
            }
        }
        _ => {
            for c in 0..l - 1 {
                for (col, &x) in row.iter().enumerate() {
                    z[(c, slope_base + col)] = x;
                }
            }
        }
    }
    z
}

// --- latent placement -------------------------------------------------------

/// Initial-probability vector for one subject.
pub fn resolve_latent_initial(
    link: LatentCovLink,
    delta1: &[f64],
    k: usize,
    row: &[f64],
) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let p = row.len();
    match link {
        LatentCovLink::Multinomial => {
            let mut eta = vec![0.0; k - 1];
            for (u, e) in eta.iter_mut().enumerate() {
                *e = delta1[u];
                for (col, &x) in row.iter().enumerate() {
                    *e += delta1[(k - 1) + u * p + col] * x;
                }
            }
            invert_link(LinkKind::Multinomial { reference: 0 }, &eta)
        }
        LatentCovLink::Global => {
            let cuts = cuts_from_s(&delta1[..k - 1]);
            let shift: f64 = delta1[k - 1..]
                .iter()
                .zip(row)
                .map(|(&s, &x)| s * x)
                .sum();
            let eta: Vec<f64> = cuts.iter().map(|&c| c + shift).collect();
            invert_link(LinkKind::Global, &eta)
        }
    }
}

/// Transition matrix for one subject-occasion.
pub fn resolve_latent_transition(
    link: LatentCovLink,
    delta2: &[f64],
    k: usize,
    mask: Option<TransitionMask>,
    row: &[f64],
) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((k, k));
    if k == 1 {
        m[(0, 0)] = 1.0;
        return Ok(m);
    }
    match link {
        LatentCovLink::Multinomial => {
            let cells = mask_cells(k, mask);
            let n_cells: usize = cells.iter().map(|c| c.len()).sum();
            let slopes = &delta2[n_cells..];
            let shift: f64 = slopes.iter().zip(row).map(|(&s, &x)| s * x).sum();
            let mut idx = 0;
            for u in 0..k {
                let eta: Vec<f64> = cells[u]
                    .iter()
                    .map(|_| {
                        let e = delta2[idx] + shift;
                        idx += 1;
                        e
                    })
                    .collect();
                let p = crate::coords::invert_masked_diag_logit(k, u, &cells[u], &eta);
                for v in 0..k {
                    m[(u, v)] = p[v];
                }
            }
        }
        LatentCovLink::Global => {
            let slopes = &delta2[k * (k - 1)..];
            let shift: f64 = slopes.iter().zip(row).map(|(&s, &x)| s * x).sum();
            for u in 0..k {
                let cuts = cuts_from_s(&delta2[u * (k - 1)..(u + 1) * (k - 1)]);
                let eta: Vec<f64> = cuts.iter().map(|&c| c + shift).collect();
                let p = invert_link(LinkKind::Global, &eta)?;
                for v in 0..k {
                    m[(u, v)] = p[v];
                }
            }
        }
    }
    Ok(m)
}

/// Resolve the whole chain of one subject: initial vector plus transition
/// matrices for `t = 2..=T`, honoring the spec's constraint choices for
/// whichever side is not covariate-driven.
pub fn resolve_latent(
    link: LatentCovLink,
    delta1: Option<&[f64]>,
    delta2: Option<&[f64]>,
    dims: &Dims,
    mask: Option<TransitionMask>,
    rows: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
    let k = dims.k;
    let pi = match delta1 {
        Some(d1) => resolve_latent_initial(link, d1, k, &rows[0])?,
        None => vec![1.0 / k as f64; k],
    };
    let mut trans = Vec::with_capacity(dims.t_len.saturating_sub(1));
    if let Some(d2) = delta2 {
        for row in rows.iter().take(dims.t_len).skip(1) {
            trans.push(resolve_latent_transition(link, d2, k, mask, row)?);
        }
    }
    Ok((pi, trans))
}

// --- bivariate marginal parameterization -------------------------------------

/// Marginal and association contrasts of a 2 x 3 joint table, cells in
/// row-major `(y1, y2)` order: the local logit of `Y1`, the two global logits
/// of `Y2`, and the two global log-odds ratios.
pub fn bivariate_eta_from_joint(p: &[f64; 6]) -> [f64; 5] {
    let p0 = p[0];
    let p1 = p[1];
    let p2 = p[2];
    let p3 = p[3];
    let p4 = p[4];
    let p5 = p[5];
    [
        ((p3 + p4 + p5) / (p0 + p1 + p2)).ln(),
        ((p1 + p2 + p4 + p5) / (p0 + p3)).ln(),
        ((p2 + p5) / (p0 + p1 + p3 + p4)).ln(),
        (((p4 + p5) * p0) / ((p1 + p2) * p3)).ln(),
        ((p5 * (p0 + p1)) / (p2 * (p3 + p4))).ln(),
    ]
}

fn bivariate_residual(logp: &[f64; 6], eta: &[f64; 5]) -> ([f64; 6], f64) {
    let p: Vec<f64> = logp.iter().map(|&x| x.exp()).collect();
    let parr = [p[0], p[1], p[2], p[3], p[4], p[5]];
    let cur = bivariate_eta_from_joint(&parr);
    let mut g = [0.0; 6];
    let mut norm = 0.0_f64;
    for c in 0..5 {
        g[c] = cur[c] - eta[c];
        norm = norm.max(g[c].abs());
    }
    let sum: f64 = p.iter().sum();
    g[5] = sum - 1.0;
    norm = norm.max(g[5].abs());
    (g, norm)
}

fn bivariate_jac_logp(logp: &[f64; 6]) -> DMatrix<f64> {
    // derivative of [C log(M p); sum p] with respect to log p, using
    // d/dlogp_j log(m'p) = m_j p_j / (m'p)
    let p: Vec<f64> = logp.iter().map(|&x| x.exp()).collect();
    let mut jac = DMatrix::zeros(6, 6);
    let add = |contrast: usize, cells: &[usize], sign: f64, jac: &mut DMatrix<f64>| {
        let total: f64 = cells.iter().map(|&c| p[c]).sum();
        for &j in cells {
            jac[(contrast, j)] += sign * p[j] / total;
        }
    };
    // eta1 = log P(Y1=1) - log P(Y1=0)
    add(0, &[3, 4, 5], 1.0, &mut jac);
    add(0, &[0, 1, 2], -1.0, &mut jac);
    // eta2 = log P(Y2>=1) - log P(Y2=0)
    add(1, &[1, 2, 4, 5], 1.0, &mut jac);
    add(1, &[0, 3], -1.0, &mut jac);
    // eta3 = log P(Y2>=2) - log P(Y2<2)
    add(2, &[2, 5], 1.0, &mut jac);
    add(2, &[0, 1, 3, 4], -1.0, &mut jac);
    // eta4 = log P(1,>=1) + log P(0,<1) - log P(0,>=1) - log P(1,<1)
    add(3, &[4, 5], 1.0, &mut jac);
    add(3, &[0], 1.0, &mut jac);
    add(3, &[1, 2], -1.0, &mut jac);
    add(3, &[3], -1.0, &mut jac);
    // eta5 = log P(1,>=2) + log P(0,<2) - log P(0,>=2) - log P(1,<2)
    add(4, &[5], 1.0, &mut jac);
    add(4, &[0, 1], 1.0, &mut jac);
    add(4, &[2], -1.0, &mut jac);
    add(4, &[3, 4], -1.0, &mut jac);
    for j in 0..6 {
        jac[(5, j)] = p[j];
    }
    jac
}

/// Invert the bivariate marginal map: find the unique joint table whose
/// marginal logits and log-odds ratios equal `eta`. Damped Newton iteration
/// on log-probabilities with simplex renormalization; the residual must fall
/// below 1e-12 in the infinity norm or an error is returned (never a silent
/// clamp).
pub fn bivariate_joint_from_eta(eta: &[f64; 5]) -> Result<[f64; 6]> {
    let mut logp = [(1.0_f64 / 6.0).ln(); 6];
    let (_, mut norm) = bivariate_residual(&logp, eta);
    for _ in 0..200 {
        if norm < 1e-12 {
            let p = logp.map(|x| x.exp());
            return Ok(p);
        }
        let (g, _) = bivariate_residual(&logp, eta);
        let jac = bivariate_jac_logp(&logp);
        let rhs = nalgebra::DVector::from_row_slice(&g);
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| LmError::Numerical("bivariate inversion: singular Jacobian".into()))?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = logp;
            for j in 0..6 {
                cand[j] -= lambda * step[j];
            }
            // renormalize onto the simplex in log space
            let total: f64 = cand.iter().map(|&x| x.exp()).sum();
            let log_total = total.ln();
            for c in cand.iter_mut() {
                *c -= log_total;
            }
            let (_, cand_norm) = bivariate_residual(&cand, eta);
            if cand_norm.is_finite() && cand_norm < norm {
                logp = cand;
                norm = cand_norm;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if norm < 1e-10 {
        let p = logp.map(|x| x.exp());
        return Ok(p);
    }
    Err(LmError::NoConvergence {
        context: format!("bivariate marginal inversion (residual {norm:.3e})"),
        iterations: 200,
    })
}

/// Joint table plus the Jacobian `dp/deta` (6 x 5), obtained from the
/// implicit function theorem at the solution.
pub fn bivariate_joint_with_jacobian(eta: &[f64; 5]) -> Result<([f64; 6], DMatrix<f64>)> {
    let p = bivariate_joint_from_eta(eta)?;
    let logp = p.map(|x| x.ln());
    // [d eta / d logp; d simplex / d logp] dlogp = [d eta; 0]
    let jac = bivariate_jac_logp(&logp);
    let lu = jac.lu();
    let mut dp_deta = DMatrix::zeros(6, 5);
    for c in 0..5 {
        let mut rhs = nalgebra::DVector::zeros(6);
        rhs[c] = 1.0;
        let dlogp = lu
            .solve(&rhs)
            .ok_or_else(|| LmError::Numerical("bivariate Jacobian singular".into()))?;
        for j in 0..6 {
            dp_deta[(j, c)] = p[j] * dlogp[j];
        }
    }
    Ok((p, dp_deta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_coefficients_give_uniform_measurement() {
        let k = 2;
        let l = 3;
        let beta = vec![0.0; measurement_block_len(LinkFamily::Multinomial, k, l, 1)];
        let p = resolve_measurement(LinkFamily::Multinomial, &beta, k, l, 0, &[0.4]).unwrap();
        for &x in &p {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn binary_link_logistic_evaluation() {
        // Z row = (1, x) with beta = (0, 1), x = 2 -> phi_1 = logistic(2)
        let k = 1;
        let beta = vec![0.0, 1.0];
        let p = resolve_measurement(LinkFamily::Logit, &beta, k, 2, 0, &[2.0]).unwrap();
        assert_relative_eq!(p[1], 0.8807970779778823, epsilon = 1e-9);
    }

    #[test]
    fn latent_intercepts_only_worked_row() {
        // diagonal-reference logits all log(0.25/0.5) with k=3:
        // row for u = 1 is (0.5, 0.25, 0.25)
        let k = 3;
        let e = (0.25_f64 / 0.5).ln();
        let mut delta2 = vec![e; 6];
        delta2.extend([0.0; 0]);
        let m =
            resolve_latent_transition(LatentCovLink::Multinomial, &delta2, k, None, &[]).unwrap();
        assert_relative_eq!(m[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 1)], 0.25, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 2)], 0.25, epsilon = 1e-12);
        for u in 0..3 {
            assert_relative_eq!(m.row(u).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_delta_gives_uniform_rows() {
        let k = 3;
        let delta1 = vec![0.0; (k - 1) * (1 + 1)];
        let pi = resolve_latent_initial(LatentCovLink::Multinomial, &delta1, k, &[0.7]).unwrap();
        for &x in &pi {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
        let delta2 = vec![0.0; k * (k - 1) + 1];
        let m =
            resolve_latent_transition(LatentCovLink::Multinomial, &delta2, k, None, &[0.7])
                .unwrap();
        for u in 0..k {
            for v in 0..k {
                assert_relative_eq!(m[(u, v)], 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lag_one_hot_encoding() {
        let row = covariate_row(Some(&[1.5]), Some(&[2, 0]), &[3, 2], 1);
        // x, then y1 one-hots (cats 1,2), then y2 one-hot (cat 1)
        assert_eq!(row, vec![1.5, 0.0, 1.0, 0.0]);
        let row0 = covariate_row(Some(&[1.5]), None, &[3, 2], 1);
        assert_eq!(row0, vec![1.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bivariate_uniform_case() {
        // eta = (0, log 2, -log 2, 0, 0) inverts to the uniform table
        let eta = [0.0, 2.0_f64.ln(), -(2.0_f64.ln()), 0.0, 0.0];
        let p = bivariate_joint_from_eta(&eta).unwrap();
        for &x in &p {
            assert_relative_eq!(x, 1.0 / 6.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn bivariate_independence_is_product_of_marginals() {
        // zero log-odds ratios with arbitrary marginal logits: the joint is
        // the outer product of its marginals (independence oracle)
        let eta1 = 0.8_f64;
        let g1 = 0.9_f64;
        let g2 = -0.4_f64;
        let eta = [eta1, g1, g2, 0.0, 0.0];
        let p = bivariate_joint_from_eta(&eta).unwrap();
        let m1 = invert_link(LinkKind::BinaryLogit, &[eta1]).unwrap();
        let m2 = invert_link(LinkKind::Global, &[g1, g2]).unwrap();
        for y1 in 0..2 {
            for y2 in 0..3 {
                assert_relative_eq!(p[y1 * 3 + y2], m1[y1] * m2[y2], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn bivariate_round_trip_random_tables() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..6).map(|_| -(rng.random::<f64>()).ln() + 0.02).collect();
            let s: f64 = raw.iter().sum();
            let p0: Vec<f64> = raw.iter().map(|&x| x / s).collect();
            let parr = [p0[0], p0[1], p0[2], p0[3], p0[4], p0[5]];
            let eta = bivariate_eta_from_joint(&parr);
            let back = bivariate_joint_from_eta(&eta).unwrap();
            for j in 0..6 {
                assert!((back[j] - p0[j]).abs() < 1e-8, "{back:?} vs {p0:?}");
            }
        }
    }

    #[test]
    fn bivariate_jacobian_matches_finite_differences() {
        let eta = [0.3, 0.7, -0.5, 0.4, -0.2];
        let (_, jac) = bivariate_joint_with_jacobian(&eta).unwrap();
        let h = 1e-6;
        for c in 0..5 {
            let mut up = eta;
            up[c] += h;
            let mut dn = eta;
            dn[c] -= h;
            let pu = bivariate_joint_from_eta(&up).unwrap();
            let pd = bivariate_joint_from_eta(&dn).unwrap();
            for j in 0..6 {
                let fd = (pu[j] - pd[j]) / (2.0 * h);
                assert_relative_eq!(jac[(j, c)], fd, epsilon = 1e-6, max_relative = 1e-4);
            }
        }
    }
}
