//! Link functions mapping between probability vectors and linear predictors.
//!
//! A probability vector of length `l` maps to a predictor vector of length
//! `l - 1`. Four families are supported: reference-category (multinomial)
//! logits, cumulative (global) logits, continuation logits and logits taken
//! with respect to an arbitrary reference index (used for transition rows,
//! where the diagonal element is the natural reference).

use nalgebra::DMatrix;

use crate::error::{LmError, Result};

/// Probabilities are clamped to this interior before taking logs so that
/// predictors stay finite; the perturbation is below every test tolerance.
pub const PROB_FLOOR: f64 = 1e-12;

/// Link family together with the reference information it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    /// Binary logit `log(p1/p0)`; only valid for `l = 2`.
    BinaryLogit,
    /// Reference-category logits `log(p_y / p_ref)` for `y != ref`.
    Multinomial { reference: usize },
    /// Cumulative logits `log(P(Y >= y) / P(Y < y))`, `y = 1..l-1`.
    Global,
    /// Continuation logits `log(P(Y >= y) / p_{y-1})`, `y = 1..l-1`.
    Continuation,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Success probability of the Rasch parameterization: ability minus difficulty
/// through the logistic function.
#[inline]
pub fn rasch_probability(xi: f64, psi: f64) -> f64 {
    logistic(xi - psi)
}

fn clamp_probs(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&x| x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect()
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(LmError::Numerical(format!(
            "link needs at least 2 categories, got {}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !x.is_finite() || x <= 0.0) {
        return Err(LmError::Numerical(
            "link undefined: probability vector has a non-positive component".into(),
        ));
    }
    Ok(())
}

/// Map a strictly positive probability vector to its predictor vector.
pub fn apply_link(kind: LinkKind, p: &[f64]) -> Result<Vec<f64>> {
    check_simplex(p)?;
    let p = clamp_probs(p);
    let l = p.len();
    match kind {
        LinkKind::BinaryLogit => {
            if l != 2 {
                return Err(LmError::Numerical(format!(
                    "binary logit needs l = 2, got {l}"
                )));
            }
            Ok(vec![(p[1] / p[0]).ln()])
        }
        LinkKind::Multinomial { reference } => {
            if reference >= l {
                return Err(LmError::Numerical(format!(
                    "reference {reference} out of range for l = {l}"
                )));
            }
            Ok((0..l)
                .filter(|&y| y != reference)
                .map(|y| (p[y] / p[reference]).ln())
                .collect())
        }
        LinkKind::Global => {
            // survival[y] = P(Y >= y)
            let mut eta = Vec::with_capacity(l - 1);
            let mut upper: f64 = p.iter().sum();
            for item in p.iter().take(l - 1) {
                upper -= item;
                let lower = 1.0 - upper;
                eta.push((upper / lower).ln());
            }
            Ok(eta)
        }
        LinkKind::Continuation => {
            let mut eta = Vec::with_capacity(l - 1);
            let mut upper: f64 = p.iter().sum();
            for (y, item) in p.iter().enumerate().take(l - 1) {
                upper -= item;
                eta.push((upper / p[y]).ln());
            }
            Ok(eta)
        }
    }
}

/// Map a predictor vector back to a probability vector.
///
/// The global family requires strictly decreasing predictors; every other
/// family inverts for any finite input.
pub fn invert_link(kind: LinkKind, eta: &[f64]) -> Result<Vec<f64>> {
    invert_link_with_jacobian(kind, eta).map(|(p, _)| p)
}

/// Invert a link and also return the Jacobian `dp/deta` as an `l x (l-1)`
/// matrix. The Jacobian is what Fisher scoring and the EM-identity score
/// need; computing it next to the inverse keeps the two consistent.
pub fn invert_link_with_jacobian(kind: LinkKind, eta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if eta.iter().any(|x| !x.is_finite()) {
        return Err(LmError::Numerical(
            "link inversion with non-finite predictor".into(),
        ));
    }
    let l = eta.len() + 1;
    match kind {
        LinkKind::BinaryLogit => {
            if l != 2 {
                return Err(LmError::Numerical(format!(
                    "binary logit needs l = 2, got {l}"
                )));
            }
            let p1 = logistic(eta[0]);
            let d = p1 * (1.0 - p1);
            let jac = DMatrix::from_row_slice(2, 1, &[-d, d]);
            Ok((vec![1.0 - p1, p1], jac))
        }
        LinkKind::Multinomial { reference } => {
            if reference >= l {
                return Err(LmError::Numerical(format!(
                    "reference {reference} out of range for l = {l}"
                )));
            }
            // exp(eta) in the non-reference slots, 1 in the reference slot,
            // shifted by the max exponent for stability.
            let mut logw = vec![0.0_f64; l];
            let mut idx = 0;
            for (y, lw) in logw.iter_mut().enumerate() {
                if y != reference {
                    *lw = eta[idx];
                    idx += 1;
                }
            }
            let maxw = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|&x| (x - maxw).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|&x| x / z).collect();
            // dp_y/deta_c = p_y (I[y = cat(c)] - p_cat(c))
            let cats: Vec<usize> = (0..l).filter(|&y| y != reference).collect();
            let mut jac = DMatrix::zeros(l, l - 1);
            for (c, &yc) in cats.iter().enumerate() {
                for y in 0..l {
                    jac[(y, c)] = p[y] * (if y == yc { 1.0 } else { 0.0 } - p[yc]);
                }
            }
            Ok((p, jac))
        }
        LinkKind::Global => {
            for w in eta.windows(2) {
                if w[1] >= w[0] {
                    return Err(LmError::Numerical(
                        "global link inversion needs strictly decreasing predictors".into(),
                    ));
                }
            }
            // survival S_y = sigma(eta_y) for y = 1..l-1, S_0 = 1, S_l = 0.
            let s: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
            let mut p = Vec::with_capacity(l);
            for y in 0..l {
                let hi = if y == 0 { 1.0 } else { s[y - 1] };
                let lo = if y == l - 1 { 0.0 } else { s[y] };
                p.push(hi - lo);
            }
            if p.iter().any(|&x| x <= 0.0) {
                return Err(LmError::Numerical(
                    "global link inversion left the simplex interior".into(),
                ));
            }
            let mut jac = DMatrix::zeros(l, l - 1);
            for (c, &sc) in s.iter().enumerate() {
                let d = sc * (1.0 - sc);
                // S_{c+1} enters p_{c+1} with +, p_c with -
                jac[(c + 1, c)] += d;
                jac[(c, c)] -= d;
            }
            Ok((p, jac))
        }
        LinkKind::Continuation => {
            // S_y = prod_{c<=y} sigma(eta_c), S_0 = 1; p_y = S_y - S_{y+1}.
            let sig: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
            let mut s = vec![1.0_f64; l];
            for y in 1..l {
                s[y] = s[y - 1] * sig[y - 1];
            }
            let mut p = Vec::with_capacity(l);
            for y in 0..l {
                let nxt = if y == l - 1 { 0.0 } else { s[y + 1] };
                p.push(s[y] - nxt);
            }
            // dS_y/deta_c = S_y (1 - sigma(eta_c)) for c <= y (cuts are 1-based)
            let mut jac = DMatrix::zeros(l, l - 1);
            for c in 0..l - 1 {
                let dfac = 1.0 - sig[c];
                for y in 0..l {
                    let ds_y = if y > c { s[y] * dfac } else { 0.0 };
                    let ds_next = if y + 1 < l && y + 1 > c {
                        s[y + 1] * dfac
                    } else {
                        0.0
                    };
                    jac[(y, c)] = ds_y - ds_next;
                }
            }
            Ok((p, jac))
        }
    }
}

/// Logits of a transition row with respect to its diagonal element:
/// `log(p_v / p_u)` for `v != u`. Equivalent to a reference-category link
/// with the diagonal as reference.
pub fn diagonal_reference(diagonal: usize) -> LinkKind {
    LinkKind::Multinomial {
        reference: diagonal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn global_worked_example() {
        let eta = apply_link(LinkKind::Global, &[0.25, 0.25, 0.5]).unwrap();
        assert_relative_eq!(eta[0], 3.0_f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(eta[1], 0.0, epsilon = 1e-12);
        let p = invert_link(LinkKind::Global, &[3.0_f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(p[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(p[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn continuation_worked_example() {
        let eta = apply_link(LinkKind::Continuation, &[0.25, 0.25, 0.5]).unwrap();
        assert_relative_eq!(eta[0], 3.0_f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(eta[1], 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn multinomial_uniform_is_zero() {
        let eta = apply_link(
            LinkKind::Multinomial { reference: 0 },
            &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        )
        .unwrap();
        assert!(eta.iter().all(|&x| x.abs() < 1e-12));
        let p = invert_link(LinkKind::Multinomial { reference: 0 }, &[0.0, 0.0]).unwrap();
        for &x in &p {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn binary_logit_value() {
        let p = invert_link(LinkKind::BinaryLogit, &[2.0]).unwrap();
        assert_relative_eq!(p[1], 0.8807970779778823, epsilon = 1e-9);
    }

    #[test]
    fn rasch_values() {
        assert_relative_eq!(rasch_probability(1.0, 1.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(
            rasch_probability(2.0, 0.0),
            0.8807970779778823,
            epsilon = 1e-9
        );
        // monotone decreasing in difficulty
        let mut last = f64::INFINITY;
        for i in 0..10 {
            let v = rasch_probability(0.5, -2.0 + i as f64 * 0.5);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn rasch_monotone_in_ability() {
        // ordered abilities give ordered success probabilities at every t
        let xi = [-1.0, -0.2, 0.7, 2.0];
        for psi in [-1.5, 0.0, 0.8] {
            let probs: Vec<f64> = xi.iter().map(|&x| rasch_probability(x, psi)).collect();
            for w in probs.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn global_requires_decreasing_eta() {
        assert!(invert_link(LinkKind::Global, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_component_rejected() {
        assert!(apply_link(LinkKind::Global, &[0.0, 0.5, 0.5]).is_err());
    }

    fn random_simplex(seed: u64, l: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..l)
            .map(|_| -(rng.random::<f64>().max(1e-9)).ln() + 0.05)
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|&x| x / s).collect()
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let kinds = [
            LinkKind::Multinomial { reference: 1 },
            LinkKind::Global,
            LinkKind::Continuation,
            LinkKind::BinaryLogit,
        ];
        for (i, kind) in kinds.iter().enumerate() {
            let l = if matches!(kind, LinkKind::BinaryLogit) {
                2
            } else {
                4
            };
            let p0 = random_simplex(40 + i as u64, l);
            let eta0 = apply_link(*kind, &p0).unwrap();
            let (_, jac) = invert_link_with_jacobian(*kind, &eta0).unwrap();
            let h = 1e-6;
            for c in 0..l - 1 {
                let mut up = eta0.clone();
                up[c] += h;
                let mut dn = eta0.clone();
                dn[c] -= h;
                let pu = invert_link(*kind, &up).unwrap();
                let pd = invert_link(*kind, &dn).unwrap();
                for y in 0..l {
                    let fd = (pu[y] - pd[y]) / (2.0 * h);
                    assert_relative_eq!(jac[(y, c)], fd, epsilon = 1e-7, max_relative = 1e-5);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_all_families(seed in 0u64..400, l in 2usize..=6) {
            let p = random_simplex(seed, l);
            let mut kinds = vec![
                LinkKind::Multinomial { reference: 0 },
                LinkKind::Multinomial { reference: l - 1 },
                LinkKind::Global,
                LinkKind::Continuation,
            ];
            if l == 2 {
                kinds.push(LinkKind::BinaryLogit);
            }
            for kind in kinds {
                let eta = apply_link(kind, &p).unwrap();
                let back = invert_link(kind, &eta).unwrap();
                for y in 0..l {
                    prop_assert!((back[y] - p[y]).abs() < 1e-12, "family {:?}", kind);
                }
                let eta2 = apply_link(kind, &back).unwrap();
                for c in 0..l - 1 {
                    prop_assert!((eta2[c] - eta[c]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn global_inverse_valid_for_decreasing_eta(seed in 0u64..200, l in 2usize..=6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut eta = Vec::with_capacity(l - 1);
            let mut cur = 3.0 * rng.random::<f64>();
            for _ in 0..l - 1 {
                cur -= 0.05 + 2.0 * rng.random::<f64>();
                eta.push(cur);
            }
            let p = invert_link(LinkKind::Global, &eta).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }
    }
}
