//! Forward-backward recursions for one response configuration.
//!
//! Everything here works on resolved probabilities: an initial vector, a
//! sequence of transition matrices and an emission matrix with one row per
//! occasion. Numerical stability comes from normalizing the forward and
//! backward vectors at every step while accumulating log normalizers, so the
//! manifest log-probability is exact and posteriors fall out of normalized
//! quantities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{LmError, Result};

/// Forward/backward quantities and posteriors for one configuration.
#[derive(Debug, Clone)]
pub struct LatticeResult {
    /// Log manifest probability `log f(y)`.
    pub log_f: f64,
    /// Normalized forward vectors, shape `T x k`.
    pub forward: Array2<f64>,
    /// Per-step log normalizers of the forward recursion; they sum to `log_f`.
    pub forward_log_scale: Vec<f64>,
    /// Normalized backward vectors, shape `T x k`.
    pub backward: Array2<f64>,
    /// Per-step log normalizers of the backward recursion.
    pub backward_log_scale: Vec<f64>,
    /// Posterior state marginals `r^(t)(u | y)`, shape `T x k`.
    pub post_state: Array2<f64>,
    /// Posterior pair probabilities `R^(t)(u, v | y)` for `t = 2..=T`
    /// (index `t - 2`), each `k x k` with the origin state by row.
    pub post_pair: Vec<Array2<f64>>,
}

fn check_dims(
    pi: ArrayView1<f64>,
    trans: &[Array2<f64>],
    emissions: ArrayView2<f64>,
) -> Result<(usize, usize)> {
    let k = pi.len();
    let (t_len, ke) = emissions.dim();
    if ke != k {
        return Err(LmError::Numerical(format!(
            "emission width {ke} does not match k = {k}"
        )));
    }
    if t_len == 0 {
        return Err(LmError::Numerical("empty occasion axis".into()));
    }
    if trans.len() != t_len - 1 {
        return Err(LmError::Numerical(format!(
            "{} transition matrices for T = {t_len}",
            trans.len()
        )));
    }
    for m in trans {
        if m.dim() != (k, k) {
            return Err(LmError::Numerical("transition matrix shape mismatch".into()));
        }
    }
    Ok((k, t_len))
}

/// Scaled forward recursion.
///
/// Returns the normalized forward vectors, the per-step log normalizers and
/// the manifest log-probability. An all-zero emission row (an observation the
/// model deems impossible) is reported as a distinct error.
pub fn forward(
    pi: ArrayView1<f64>,
    trans: &[Array2<f64>],
    emissions: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<f64>, f64)> {
    let (k, t_len) = check_dims(pi, trans, emissions)?;
    let mut q = Array2::zeros((t_len, k));
    let mut log_scale = Vec::with_capacity(t_len);
    let mut cur = Array1::zeros(k);
    for u in 0..k {
        cur[u] = pi[u] * emissions[(0, u)];
    }
    let mut log_f = 0.0;
    for t in 0..t_len {
        if t > 0 {
            let prev = q.row(t - 1);
            let tr = &trans[t - 1];
            let mut next = Array1::zeros(k);
            for v in 0..k {
                let mut acc = 0.0;
                for u in 0..k {
                    acc += prev[u] * tr[(u, v)];
                }
                next[v] = acc * emissions[(t, v)];
            }
            cur = next;
        }
        let c: f64 = cur.sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(LmError::ZeroMass {
                occasion: t + 1,
                unit: String::new(),
            });
        }
        log_f += c.ln();
        log_scale.push(c.ln());
        for u in 0..k {
            q[(t, u)] = cur[u] / c;
        }
    }
    Ok((q, log_scale, log_f))
}

/// Scaled backward recursion; the occasion-`T` vector is all ones before
/// normalization.
pub fn backward(
    pi: ArrayView1<f64>,
    trans: &[Array2<f64>],
    emissions: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let (k, t_len) = check_dims(pi, trans, emissions)?;
    let mut q = Array2::zeros((t_len, k));
    let mut log_scale = vec![0.0; t_len];
    let mut cur = Array1::from_elem(k, 1.0);
    let c0 = k as f64;
    log_scale[t_len - 1] = c0.ln();
    for u in 0..k {
        q[(t_len - 1, u)] = cur[u] / c0;
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        let next = q.row(t + 1);
        let tr = &trans[t];
        for u in 0..k {
            let mut acc = 0.0;
            for v in 0..k {
                acc += tr[(u, v)] * emissions[(t + 1, v)] * next[v];
            }
            cur[u] = acc;
        }
        let c: f64 = cur.sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(LmError::ZeroMass {
                occasion: t + 1,
                unit: String::new(),
            });
        }
        log_scale[t] = c.ln();
        for u in 0..k {
            q[(t, u)] = cur[u] / c;
        }
    }
    Ok((q, log_scale))
}

/// Full lattice: forward, backward, posterior marginals and pair posteriors.
///
/// Pair posteriors are normalized matrices; marginals are taken from them so
/// the consistency identities hold by construction.
pub fn posteriors(
    pi: ArrayView1<f64>,
    trans: &[Array2<f64>],
    emissions: ArrayView2<f64>,
) -> Result<LatticeResult> {
    let (k, t_len) = check_dims(pi, trans, emissions)?;
    let (fwd, fwd_scale, log_f) = forward(pi, trans, emissions)?;
    let (bwd, bwd_scale) = backward(pi, trans, emissions)?;

    let mut post_state = Array2::zeros((t_len, k));
    let mut post_pair = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        let mut pair = Array2::zeros((k, k));
        let tr = &trans[t - 1];
        let mut total = 0.0;
        for u in 0..k {
            for v in 0..k {
                let w = fwd[(t - 1, u)] * tr[(u, v)] * emissions[(t, v)] * bwd[(t, v)];
                pair[(u, v)] = w;
                total += w;
            }
        }
        if total <= 0.0 || !total.is_finite() {
            return Err(LmError::ZeroMass {
                occasion: t + 1,
                unit: String::new(),
            });
        }
        pair.mapv_inplace(|x| x / total);
        post_pair.push(pair);
    }

    if t_len == 1 {
        // no pairs; the marginal is the normalized forward-backward product
        let mut total = 0.0;
        for u in 0..k {
            let w = fwd[(0, u)] * bwd[(0, u)];
            post_state[(0, u)] = w;
            total += w;
        }
        for u in 0..k {
            post_state[(0, u)] /= total;
        }
    } else {
        for u in 0..k {
            post_state[(0, u)] = post_pair[0].row(u).sum();
        }
        for t in 1..t_len {
            for v in 0..k {
                post_state[(t, v)] = post_pair[t - 1].column(v).sum();
            }
        }
    }

    Ok(LatticeResult {
        log_f,
        forward: fwd,
        forward_log_scale: fwd_scale,
        backward: bwd,
        backward_log_scale: bwd_scale,
        post_state,
        post_pair,
    })
}

#[cfg(test)]
pub(crate) mod test_oracles {
    use super::*;

    /// Brute-force manifest probability: sum of the joint over all `k^T`
    /// latent paths. Independent of the recursion implementation.
    pub fn brute_force_manifest(
        pi: ArrayView1<f64>,
        trans: &[Array2<f64>],
        emissions: ArrayView2<f64>,
    ) -> f64 {
        let k = pi.len();
        let t_len = emissions.dim().0;
        let mut total = 0.0;
        let n_paths = k.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % k);
                c /= k;
            }
            let mut p = pi[path[0]] * emissions[(0, path[0])];
            for t in 1..t_len {
                p *= trans[t - 1][(path[t - 1], path[t])] * emissions[(t, path[t])];
            }
            total += p;
        }
        total
    }

    /// Random valid model and emission matrix for one observed configuration.
    pub fn random_instance(
        seed: u64,
        k: usize,
        t_len: usize,
    ) -> (Array1<f64>, Vec<Array2<f64>>, Array2<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut simplex = |len: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..len)
                .map(|_| -(rng.random::<f64>().max(1e-12)).ln() + 0.02)
                .collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|&x| x / s).collect()
        };
        let pi = Array1::from_vec(simplex(k));
        let mut trans = Vec::new();
        for _ in 1..t_len {
            let mut m = Array2::zeros((k, k));
            for u in 0..k {
                let row = simplex(k);
                for v in 0..k {
                    m[(u, v)] = row[v];
                }
            }
            trans.push(m);
        }
        let mut em = Array2::zeros((t_len, k));
        for t in 0..t_len {
            for u in 0..k {
                em[(t, u)] = 0.05 + 0.95 * rng.random::<f64>();
            }
        }
        (pi, trans, em)
    }

    /// Brute-force posterior marginal `p(U^(t) = u | y)`.
    pub fn brute_force_posterior(
        pi: ArrayView1<f64>,
        trans: &[Array2<f64>],
        emissions: ArrayView2<f64>,
        t: usize,
        u: usize,
    ) -> f64 {
        let k = pi.len();
        let t_len = emissions.dim().0;
        let mut total = 0.0;
        let mut hit = 0.0;
        let n_paths = k.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % k);
                c /= k;
            }
            let mut p = pi[path[0]] * emissions[(0, path[0])];
            for s in 1..t_len {
                p *= trans[s - 1][(path[s - 1], path[s])] * emissions[(s, path[s])];
            }
            total += p;
            if path[t] == u {
                hit += p;
            }
        }
        hit / total
    }
}

#[cfg(test)]
mod tests {
    use super::test_oracles::*;
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Worked instance used throughout the tests: k=2, T=2, binary response,
    /// y = (1, 1). Brute-force mass over the 4 paths is 0.2868.
    pub fn worked_instance() -> (Array1<f64>, Vec<Array2<f64>>, Array2<f64>) {
        let pi = array![0.6, 0.4];
        let trans = vec![array![[0.7, 0.3], [0.2, 0.8]]];
        // emission of y=1: phi_{1|1} = 0.1, phi_{1|2} = 0.9 at both occasions
        let emissions = array![[0.1, 0.9], [0.1, 0.9]];
        (pi, trans, emissions)
    }

    #[test]
    fn forward_worked_example() {
        let (pi, trans, em) = worked_instance();
        let (_, _, log_f) = forward(pi.view(), &trans, em.view()).unwrap();
        assert_relative_eq!(log_f.exp(), 0.2868, epsilon = 1e-12);
    }

    #[test]
    fn forward_k1_is_product_of_emissions() {
        let pi = array![1.0];
        let trans = vec![Array2::from_elem((1, 1), 1.0); 3];
        let em = array![[0.3], [0.5], [0.2], [0.9]];
        let (_, _, log_f) = forward(pi.view(), &trans, em.view()).unwrap();
        assert_relative_eq!(log_f, (0.3_f64 * 0.5 * 0.2 * 0.9).ln(), epsilon = 1e-12);
    }

    #[test]
    fn forward_t1_symmetric_average() {
        let pi = array![0.5, 0.5];
        let em = array![[0.2, 0.8]];
        let (_, _, log_f) = forward(pi.view(), &[], em.view()).unwrap();
        assert_relative_eq!(log_f.exp(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn backward_initialization_and_consistency() {
        let (pi, trans, em) = worked_instance();
        let (bwd, bscale) = backward(pi.view(), &trans, em.view()).unwrap();
        // t = T row is the normalized all-ones vector
        for u in 0..2 {
            assert_relative_eq!(bwd[(1, u)], 0.5, epsilon = 1e-15);
        }
        // sum_u q^(1)(u) qstar^(1)(u) recovers f(y): undo both scalings
        let (fwd, fscale, _) = forward(pi.view(), &trans, em.view()).unwrap();
        let mut f = 0.0;
        for u in 0..2 {
            f += fwd[(0, u)] * bwd[(0, u)];
        }
        let log_restore: f64 = fscale[0] + bscale.iter().sum::<f64>();
        assert_relative_eq!(f * log_restore.exp(), 0.2868, epsilon = 1e-12);
    }

    #[test]
    fn posterior_worked_example() {
        let (pi, trans, em) = worked_instance();
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        // enumerate all path joints, sum those with u^(1)=2, normalize
        assert_relative_eq!(lat.post_state[(0, 1)], 0.2664 / 0.2868, epsilon = 1e-12);
        assert_relative_eq!(lat.post_pair[0][(1, 1)], 0.2592 / 0.2868, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_emission_forces_posterior() {
        // identity emission: state u emits category u-1 with certainty
        let pi = array![0.5, 0.5];
        let trans = vec![array![[0.5, 0.5], [0.5, 0.5]]; 2];
        // observed y = (0, 1, 0)
        let em = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        for (t, &u) in [0usize, 1, 0].iter().enumerate() {
            assert_relative_eq!(lat.post_state[(t, u)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_single_state_posteriors() {
        let pi = array![1.0];
        let trans = vec![Array2::from_elem((1, 1), 1.0); 2];
        let em = array![[0.4], [0.7], [0.6]];
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        for t in 0..3 {
            assert_relative_eq!(lat.post_state[(t, 0)], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_emission_is_distinct_error() {
        let pi = array![0.5, 0.5];
        let trans = vec![array![[0.5, 0.5], [0.5, 0.5]]];
        let em = array![[0.5, 0.5], [0.0, 0.0]];
        match forward(pi.view(), &trans, em.view()) {
            Err(LmError::ZeroMass { occasion, .. }) => assert_eq!(occasion, 2),
            other => panic!("expected ZeroMass, got {other:?}"),
        }
    }


    #[test]
    fn oracle_equivalence_random_models() {
        for seed in 0..60 {
            let k = 1 + (seed as usize % 3);
            let t_len = 1 + (seed as usize % 6);
            let (pi, trans, em) = random_instance(seed, k, t_len);
            let (_, _, log_f) = forward(pi.view(), &trans, em.view()).unwrap();
            let brute = brute_force_manifest(pi.view(), &trans, em.view());
            assert!(
                (log_f - brute.ln()).abs() < 1e-10,
                "seed {seed}: {log_f} vs {}",
                brute.ln()
            );
        }
    }

    #[test]
    fn posterior_identities_random_models() {
        for seed in 100..130 {
            let k = 2 + (seed as usize % 2);
            let t_len = 2 + (seed as usize % 4);
            let (pi, trans, em) = random_instance(seed, k, t_len);
            let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
            for t in 0..t_len {
                assert_relative_eq!(lat.post_state.row(t).sum(), 1.0, epsilon = 1e-10);
            }
            for (idx, pair) in lat.post_pair.iter().enumerate() {
                assert_relative_eq!(pair.sum(), 1.0, epsilon = 1e-10);
                for u in 0..k {
                    assert_relative_eq!(
                        pair.row(u).sum(),
                        lat.post_state[(idx, u)],
                        epsilon = 1e-10
                    );
                }
                for v in 0..k {
                    assert_relative_eq!(
                        pair.column(v).sum(),
                        lat.post_state[(idx + 1, v)],
                        epsilon = 1e-10
                    );
                }
            }
            // spot-check the marginals against the path-enumeration oracle
            let mid = t_len / 2;
            for u in 0..k {
                let oracle = brute_force_posterior(pi.view(), &trans, em.view(), mid, u);
                assert_relative_eq!(lat.post_state[(mid, u)], oracle, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn emission_scale_invariance() {
        let (pi, trans, em) = random_instance(7, 3, 4);
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        let mut scaled = em.clone();
        let factor = 37.5;
        for u in 0..3 {
            scaled[(2, u)] *= factor;
        }
        let lat2 = posteriors(pi.view(), &trans, scaled.view()).unwrap();
        assert_relative_eq!(lat2.log_f, lat.log_f + factor.ln(), epsilon = 1e-10);
        for t in 0..4 {
            for u in 0..3 {
                assert_relative_eq!(
                    lat2.post_state[(t, u)],
                    lat.post_state[(t, u)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn long_sequence_no_underflow() {
        let k = 5;
        let t_len = 10_000;
        let (pi, trans_one, _) = random_instance(11, k, 2);
        let trans = vec![trans_one[0].clone(); t_len - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut em = Array2::zeros((t_len, k));
        for t in 0..t_len {
            for u in 0..k {
                em[(t, u)] = 0.01 + 0.5 * rng.random::<f64>();
            }
        }
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        assert!(lat.log_f.is_finite());
        assert!(lat.log_f < 0.0);
        for t in (0..t_len).step_by(999) {
            assert_relative_eq!(lat.post_state.row(t).sum(), 1.0, epsilon = 1e-9);
        }
    }
}
