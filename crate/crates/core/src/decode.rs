//! Path prediction: global MAP state sequences (Viterbi) and per-occasion
//! marginal MAP states. All arithmetic in log space; ties break toward the
//! smallest state index.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::data::PanelDataset;
use crate::error::{LmError, Result};
use crate::params::{Dims, ModelParams, ModelSpec};
use crate::recursions::{posteriors, LatticeResult};

/// Decoded latent path of one subject. States are reported 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    /// Global MAP sequence (Viterbi), entries in `1..=k`.
    pub path: Vec<usize>,
    /// Log joint probability `log p(path, y)`.
    pub log_joint: f64,
    /// Per-occasion marginal MAP states, entries in `1..=k`.
    pub marginal: Vec<usize>,
    /// Posterior mass of each marginal MAP state.
    pub marginal_mass: Vec<f64>,
}

/// Viterbi forward pass plus backtracking over resolved probabilities.
/// Returns the 0-based path and its log joint probability.
pub fn viterbi(
    pi: ArrayView1<f64>,
    trans: &[Array2<f64>],
    emissions: ArrayView2<f64>,
) -> Result<(Vec<usize>, f64)> {
    let k = pi.len();
    let (t_len, ke) = emissions.dim();
    if ke != k || trans.len() + 1 != t_len {
        return Err(LmError::Numerical("viterbi dimension mismatch".into()));
    }
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let mut score = Array2::from_elem((t_len, k), f64::NEG_INFINITY);
    let mut back: Vec<Vec<usize>> = vec![vec![0; k]; t_len];
    for u in 0..k {
        score[(0, u)] = ln(pi[u]) + ln(emissions[(0, u)]);
    }
    for t in 1..t_len {
        for v in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_u = 0;
            for u in 0..k {
                let cand = score[(t - 1, u)] + ln(trans[t - 1][(u, v)]);
                if cand > best {
                    best = cand;
                    best_u = u;
                }
            }
            score[(t, v)] = best + ln(emissions[(t, v)]);
            back[t][v] = best_u;
        }
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for u in 0..k {
        if score[(t_len - 1, u)] > best {
            best = score[(t_len - 1, u)];
            last = u;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(LmError::ZeroMass {
            occasion: t_len,
            unit: String::new(),
        });
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        path[t] = back[t + 1][path[t + 1]];
    }
    Ok((path, best))
}

/// Per-occasion marginal MAP states from the posterior marginals; ties break
/// toward the smallest index.
pub fn local_decode(lattice: &LatticeResult) -> (Vec<usize>, Vec<f64>) {
    let (t_len, k) = lattice.post_state.dim();
    let mut states = Vec::with_capacity(t_len);
    let mut mass = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut best = 0;
        for u in 1..k {
            if lattice.post_state[(t, u)] > lattice.post_state[(t, best)] {
                best = u;
            }
        }
        states.push(best);
        mass.push(lattice.post_state[(t, best)]);
    }
    (states, mass)
}

/// Decode one subject of a dataset under fitted parameters, resolving
/// subject-specific probabilities where the spec demands them. Multilevel
/// chains are resolved at the posterior-mode cluster class.
pub fn decode_subject(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    i: usize,
    cluster_class: Option<usize>,
) -> Result<DecodedPath> {
    let em = if spec.has_measurement_covariates() {
        crate::em::emissions_for_subject(params, spec, dims, data, i)?
    } else {
        crate::em::emissions_shared(params, &data.pattern_of(i), dims.t_len, dims.r)
    };
    let (pi, trans) = if spec.is_multilevel() {
        let w = cluster_class.unwrap_or(0);
        crate::multilevel::resolve_member_chain(params, spec, dims, data, i, w)?
    } else {
        crate::em::chain_for_subject(params, spec, dims, data, i)?
    };
    let (path, log_joint) = viterbi(pi.view(), &trans, em.view())?;
    let lattice = posteriors(pi.view(), &trans, em.view())?;
    let (marginal, marginal_mass) = local_decode(&lattice);
    Ok(DecodedPath {
        path: path.into_iter().map(|u| u + 1).collect(),
        log_joint,
        marginal: marginal.into_iter().map(|u| u + 1).collect(),
        marginal_mass,
    })
}

/// Decode every subject; for multilevel fits the cluster classes come from
/// the posterior-mode class of each cluster.
pub fn decode_all(
    params: &ModelParams,
    spec: &ModelSpec,
    data: &PanelDataset,
    cluster_modes: Option<&[usize]>,
) -> Result<Vec<DecodedPath>> {
    let dims = Dims::new(spec, data.t_len, &data.levels);

    (0..data.n)
        .map(|i| {
            let w = match (cluster_modes, &data.cluster) {
                (Some(modes), Some(cl)) => Some(modes[cl[i]]),
                _ => None,
            };
            decode_subject(params, spec, &dims, data, i, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn worked() -> (ndarray::Array1<f64>, Vec<Array2<f64>>, Array2<f64>) {
        (
            array![0.6, 0.4],
            vec![array![[0.7, 0.3], [0.2, 0.8]]],
            array![[0.1, 0.9], [0.1, 0.9]],
        )
    }

    /// Exhaustive maximization over all k^T paths.
    fn brute_force_map(
        pi: ArrayView1<f64>,
        trans: &[Array2<f64>],
        em: ArrayView2<f64>,
    ) -> (Vec<usize>, f64) {
        let k = pi.len();
        let t_len = em.dim().0;
        let mut best = (vec![0; t_len], f64::NEG_INFINITY);
        for code in 0..k.pow(t_len as u32) {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % k);
                c /= k;
            }
            let mut lp = pi[path[0]].ln() + em[(0, path[0])].ln();
            for t in 1..t_len {
                lp += trans[t - 1][(path[t - 1], path[t])].ln() + em[(t, path[t])].ln();
            }
            if lp > best.1 {
                best = (path, lp);
            }
        }
        best
    }

    #[test]
    fn worked_example_path() {
        let (pi, trans, em) = worked();
        let (path, lj) = viterbi(pi.view(), &trans, em.view()).unwrap();
        assert_eq!(path, vec![1, 1]);
        assert_relative_eq!(lj.exp(), 0.2592, epsilon = 1e-12);
    }

    #[test]
    fn single_state_path() {
        let pi = array![1.0];
        let trans = vec![Array2::from_elem((1, 1), 1.0); 2];
        let em = array![[0.4], [0.6], [0.9]];
        let (path, _) = viterbi(pi.view(), &trans, em.view()).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn identity_emission_recovers_observations() {
        let pi = array![0.5, 0.5];
        let trans = vec![array![[0.5, 0.5], [0.5, 0.5]]; 2];
        let em = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]; // y = (0, 1, 0)
        let (path, _) = viterbi(pi.view(), &trans, em.view()).unwrap();
        assert_eq!(path, vec![0, 1, 0]);
    }

    #[test]
    fn viterbi_matches_brute_force() {
        for seed in 0..60 {
            let k = 2 + (seed as usize % 2);
            let t_len = 2 + (seed as usize % 5);
            let (pi, trans, em) = crate::recursions::test_oracles::random_instance(seed, k, t_len);
            let (path, lj) = viterbi(pi.view(), &trans, em.view()).unwrap();
            let (bpath, blj) = brute_force_map(pi.view(), &trans, em.view());
            assert_relative_eq!(lj, blj, epsilon = 1e-10);
            // equal log-joints are accepted as ties
            if (lj - blj).abs() > 1e-12 {
                assert_eq!(path, bpath);
            }
        }
    }

    #[test]
    fn local_decode_ties_to_smallest_index() {
        let pi = array![0.5, 0.5];
        let em = array![[0.3, 0.3]];
        let lat = posteriors(pi.view(), &[], em.view()).unwrap();
        let (states, mass) = local_decode(&lat);
        assert_eq!(states, vec![0]);
        assert_relative_eq!(mass[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn local_decode_worked_example() {
        let (pi, trans, em) = worked();
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        let (states, mass) = local_decode(&lat);
        assert_eq!(states, vec![1, 1]);
        assert_relative_eq!(mass[0], 0.2664 / 0.2868, epsilon = 1e-10);
    }

    #[test]
    fn near_deterministic_posteriors_agree_with_viterbi() {
        let pi = array![0.5, 0.5];
        let trans = vec![array![[0.9, 0.1], [0.1, 0.9]]; 3];
        let em = array![[0.99, 0.01], [0.98, 0.02], [0.01, 0.99], [0.02, 0.98]];
        let lat = posteriors(pi.view(), &trans, em.view()).unwrap();
        let (states, mass) = local_decode(&lat);
        let (path, _) = viterbi(pi.view(), &trans, em.view()).unwrap();
        if mass.iter().all(|&m| m > 0.99) {
            assert_eq!(states, path);
        }
    }
}
