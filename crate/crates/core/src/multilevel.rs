//! Multilevel layer: a discrete cluster-level random effect with `m` support
//! points modulating every member's chain through global logits.
//!
//! Coefficient layouts (addressed by the coordinate chart):
//!
//! * mixture: without cluster covariates the class masses `rho` live on
//!   reference-category logits; with covariates
//!   `[gamma0 (m-1)] [gamma1 (m-1) x q, class-major]`;
//! * initial block: `[delta0 (m-1)] [cut block (k-1), reparameterized]
//!   [delta2 slopes (p)]` with `delta0_1 = 0` for identification;
//! * transition block: `[eta0 (m-1) x n_seg] [k cut blocks of (k-1)]
//!   [eta2 slopes (p)]` with `eta0_1 = 0`; `n_seg` is `T - 1` when the
//!   intercepts vary with the occasion, else 1.
//!
//! Cut intercepts are stored as a first cut plus log decrements, so they are
//! strictly decreasing in the cut index for every coefficient value, which is
//! what the global-logit parameterization needs to invert.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::coords::{cuts_from_s, BlockKind, Chart};
use crate::data::PanelDataset;
use crate::em::{
    emissions_shared, start, ExpectedCounts, FitOptions, FitResult, StartSummary, UnitPosteriors,
};
use crate::error::{LmError, Result};
use crate::links::{invert_link, LinkKind};
use crate::params::{Dims, MeasurementSpec, ModelParams, ModelSpec};
use crate::recursions::{posteriors, LatticeResult};
use crate::scoring::{maximize, EtaMap, Group, GroupModel, InnerTransform, ScoringOptions};

/// Cluster layout of a panel.
#[derive(Debug, Clone)]
pub struct ClusterStructure {
    pub n_clusters: usize,
    pub sizes: Vec<usize>,
    /// Member subject indices per cluster.
    pub members: Vec<Vec<usize>>,
    /// Cluster covariate rows, `H x q`.
    pub z: Array2<f64>,
}

/// Build the cluster structure, pulling cluster covariates from the first
/// member (they must be constant within the cluster and over occasions).
pub fn cluster_structure(data: &PanelDataset, spec: &ModelSpec) -> Result<ClusterStructure> {
    let cluster = data
        .cluster
        .as_ref()
        .ok_or_else(|| LmError::Data("multilevel model needs cluster labels".into()))?;
    let h_count = data.cluster_labels.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); h_count];
    for (i, &h) in cluster.iter().enumerate() {
        members[h].push(i);
    }
    if members.iter().any(|m| m.is_empty()) {
        return Err(LmError::Data("empty cluster".into()));
    }
    let q = spec.cluster_covariates.len();
    let mut z = Array2::zeros((h_count, q));
    if q > 0 {
        let x = data
            .covariates
            .as_ref()
            .ok_or_else(|| LmError::Data("cluster covariates declared but no covariate data".into()))?;
        let cols: Vec<usize> = spec
            .cluster_covariates
            .iter()
            .map(|name| {
                data.covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| LmError::Data(format!("cluster covariate `{name}` missing")))
            })
            .collect::<Result<_>>()?;
        for (h, mem) in members.iter().enumerate() {
            for (cq, &col) in cols.iter().enumerate() {
                let v = x[(mem[0], 0, col)];
                z[(h, cq)] = v;
                for &i in mem {
                    for t in 0..data.t_len {
                        if (x[(i, t, col)] - v).abs() > 1e-9 {
                            return Err(LmError::Data(format!(
                                "cluster covariate `{}` varies within cluster `{}`",
                                spec.cluster_covariates[cq], data.cluster_labels[h]
                            )));
                        }
                    }
                }
            }
        }
    }
    let sizes = members.iter().map(|m| m.len()).collect();
    Ok(ClusterStructure {
        n_clusters: h_count,
        sizes,
        members,
        z,
    })
}

/// Class masses of one cluster from the multinomial logit parameterization.
pub fn resolve_cluster_mixture(gamma: &[f64], m: usize, z_h: &[f64]) -> Result<Vec<f64>> {
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let q = z_h.len();
    let mut eta = vec![0.0; m - 1];
    for (w, e) in eta.iter_mut().enumerate() {
        *e = gamma[w];
        for (col, &zv) in z_h.iter().enumerate() {
            *e += gamma[(m - 1) + w * q + col] * zv;
        }
    }
    invert_link(LinkKind::Multinomial { reference: 0 }, &eta)
}

/// Initial-state distribution of a member's chain in cluster class `w`.
pub fn ml_initial_probs(
    ml_ini: &[f64],
    k: usize,
    m: usize,
    w: usize,
    x_row: &[f64],
) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let cuts = cuts_from_s(&ml_ini[m - 1..m - 1 + k - 1]);
    let slopes = &ml_ini[m - 1 + k - 1..];
    let shift = if w > 0 { ml_ini[w - 1] } else { 0.0 }
        + slopes.iter().zip(x_row).map(|(&s, &x)| s * x).sum::<f64>();
    let eta: Vec<f64> = cuts.iter().map(|&c| c + shift).collect();
    invert_link(LinkKind::Global, &eta)
}

/// Transition matrix of a member's chain in cluster class `w` at occasion
/// `t` (`t >= 2`; `n_seg > 1` means occasion-specific intercepts).
pub fn ml_transition_matrix(
    ml_tra: &[f64],
    k: usize,
    m: usize,
    n_seg: usize,
    seg: usize,
    w: usize,
    x_row: &[f64],
) -> Result<Array2<f64>> {
    let mut mat = Array2::zeros((k, k));
    if k == 1 {
        mat[(0, 0)] = 1.0;
        return Ok(mat);
    }
    let rows_off = (m - 1) * n_seg;
    let slopes = &ml_tra[rows_off + k * (k - 1)..];
    let shift = if w > 0 {
        ml_tra[(w - 1) * n_seg + seg]
    } else {
        0.0
    } + slopes.iter().zip(x_row).map(|(&s, &x)| s * x).sum::<f64>();
    for u in 0..k {
        let cuts = cuts_from_s(&ml_tra[rows_off + u * (k - 1)..rows_off + (u + 1) * (k - 1)]);
        let eta: Vec<f64> = cuts.iter().map(|&c| c + shift).collect();
        let p = invert_link(LinkKind::Global, &eta)?;
        for v in 0..k {
            mat[(u, v)] = p[v];
        }
    }
    Ok(mat)
}

fn n_seg(spec: &ModelSpec, dims: &Dims) -> usize {
    if spec.time_varying_ml_intercepts {
        dims.t_len.saturating_sub(1).max(1)
    } else {
        1
    }
}

/// Chain of one member for one cluster class.
pub fn resolve_member_chain(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    i: usize,
    w: usize,
) -> Result<(Array1<f64>, Vec<Array2<f64>>)> {
    let ml_ini = params
        .ml_initial
        .as_ref()
        .ok_or_else(|| LmError::Params("multilevel model needs ml_initial".into()))?;
    let row0 = crate::em::subject_cov_row(spec, dims, data, i, 0);
    let pi = Array1::from_vec(ml_initial_probs(ml_ini, dims.k, dims.m, w, &row0)?);
    let mut trans = Vec::with_capacity(dims.t_len.saturating_sub(1));
    if dims.t_len > 1 {
        let ml_tra = params
            .ml_trans
            .as_ref()
            .ok_or_else(|| LmError::Params("multilevel model needs ml_trans".into()))?;
        let segs = n_seg(spec, dims);
        for t in 1..dims.t_len {
            let seg = if segs > 1 { t - 1 } else { 0 };
            let row = crate::em::subject_cov_row(spec, dims, data, i, t);
            trans.push(ml_transition_matrix(
                ml_tra, dims.k, dims.m, segs, seg, w, &row,
            )?);
        }
    }
    Ok((pi, trans))
}

fn mixture_log_masses(
    params: &ModelParams,
    dims: &Dims,
    structure: &ClusterStructure,
    h: usize,
) -> Result<Vec<f64>> {
    let m = dims.m;
    let rho: Vec<f64> = if dims.q_cluster == 0 {
        params
            .rho
            .as_ref()
            .ok_or_else(|| LmError::Params("multilevel model needs rho".into()))?
            .to_vec()
    } else {
        let gamma = params
            .gamma
            .as_ref()
            .ok_or_else(|| LmError::Params("cluster covariates need gamma".into()))?;
        resolve_cluster_mixture(gamma, m, structure.z.row(h).to_slice().unwrap())?
    };
    Ok(rho.iter().map(|&x| x.max(1e-300).ln()).collect())
}

struct ClusterEval {
    log_f: f64,
    /// Posterior class weights.
    b: Vec<f64>,
    /// Per member, per class lattice.
    lattices: Vec<Vec<LatticeResult>>,
}

fn eval_cluster(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    structure: &ClusterStructure,
    h: usize,
) -> Result<ClusterEval> {
    let m = dims.m;
    let log_rho = mixture_log_masses(params, dims, structure, h)?;
    let mut lattices: Vec<Vec<LatticeResult>> = Vec::with_capacity(structure.members[h].len());
    let mut log_p_given_w = vec![0.0_f64; m];
    for &i in &structure.members[h] {
        let em = emissions_shared(params, &data.pattern_of(i), dims.t_len, dims.r);
        let mut per_w = Vec::with_capacity(m);
        for (w, lpw) in log_p_given_w.iter_mut().enumerate() {
            let (pi, trans) = resolve_member_chain(params, spec, dims, data, i, w)?;
            let lat = posteriors(pi.view(), &trans, em.view()).map_err(|e| match e {
                LmError::ZeroMass { occasion, .. } => LmError::ZeroMass {
                    occasion,
                    unit: format!("subject `{}`", data.subject_ids[i]),
                },
                other => other,
            })?;
            *lpw += lat.log_f;
            per_w.push(lat);
        }
        lattices.push(per_w);
    }
    // stabilized log-sum-exp over classes
    let terms: Vec<f64> = (0..m).map(|w| log_rho[w] + log_p_given_w[w]).collect();
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_f = mx + terms.iter().map(|&t| (t - mx).exp()).sum::<f64>().ln();
    let b: Vec<f64> = terms.iter().map(|&t| (t - log_f).exp()).collect();
    Ok(ClusterEval { log_f, b, lattices })
}

/// Manifest log-probability of one cluster's responses.
pub fn cluster_loglik(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    structure: &ClusterStructure,
    h: usize,
) -> Result<f64> {
    eval_cluster(params, spec, dims, data, structure, h).map(|e| e.log_f)
}

/// Full multilevel log-likelihood `sum_h log f_h`.
pub fn multilevel_loglik(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
) -> Result<f64> {
    let structure = cluster_structure(data, spec)?;
    let evals: Vec<Result<f64>> = (0..structure.n_clusters)
        .into_par_iter()
        .map(|h| cluster_loglik(params, spec, dims, data, &structure, h))
        .collect();
    let mut total = 0.0;
    for e in evals {
        total += e?;
    }
    Ok(total)
}

/// Expected counts of the multilevel E-step.
#[derive(Debug, Clone)]
pub struct MlCounts {
    /// Posterior class weights, `H x m`.
    pub b: Array2<f64>,
    /// Measurement-side counts pooled over classes (drives the phi update
    /// and the count identities).
    pub shared: ExpectedCounts,
    /// Initial-state counts per class, `m x k`.
    pub init_by_w: Array2<f64>,
    /// Transition counts per class and occasion, `(T-1) x m x (k*k)`.
    pub trans_by_w: Array3<f64>,
    /// Per member and class posteriors weighted by `b`, kept when
    /// individual covariates demand subject-specific designs.
    pub member_post: Option<Vec<Vec<UnitPosteriors>>>,
}

/// Multilevel E-step: posterior class weights plus conditional expected
/// counts; returns the log-likelihood as the second element.
pub fn e_step_ml(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    structure: &ClusterStructure,
) -> Result<(MlCounts, f64)> {
    let m = dims.m;
    let k = dims.k;
    let keep_members = dims.p_cov > 0;
    let evals: Vec<Result<ClusterEval>> = (0..structure.n_clusters)
        .into_par_iter()
        .map(|h| eval_cluster(params, spec, dims, data, structure, h))
        .collect();
    let mut counts = MlCounts {
        b: Array2::zeros((structure.n_clusters, m)),
        shared: ExpectedCounts::empty(dims, false, false),
        init_by_w: Array2::zeros((m, k)),
        trans_by_w: Array3::zeros((dims.t_len.saturating_sub(1), m, k * k)),
        member_post: if keep_members { Some(Vec::new()) } else { None },
    };
    let mut loglik = 0.0;
    for (h, eval) in evals.into_iter().enumerate() {
        let eval = eval?;
        loglik += eval.log_f;
        for w in 0..m {
            counts.b[(h, w)] = eval.b[w];
        }
        for (local_idx, &i) in structure.members[h].iter().enumerate() {
            let mut per_w_store = Vec::new();
            for w in 0..m {
                let bw = eval.b[w];
                let lat = &eval.lattices[local_idx][w];
                // class weights of one member sum to one, so the shared
                // counts behave exactly like single-level expected counts
                counts
                    .shared
                    .absorb(lat, &|t, j| data.responses[(i, t, j)], bw);
                for u in 0..k {
                    counts.init_by_w[(w, u)] += bw * lat.post_state[(0, u)];
                }
                for (idx, pair) in lat.post_pair.iter().enumerate() {
                    for u in 0..k {
                        for v in 0..k {
                            counts.trans_by_w[(idx, w, u * k + v)] += bw * pair[(u, v)];
                        }
                    }
                }
                if keep_members {
                    per_w_store.push(UnitPosteriors {
                        post_state: lat.post_state.clone(),
                        post_pair: lat.post_pair.clone(),
                        weight: bw,
                    });
                }
            }
            if let Some(store) = counts.member_post.as_mut() {
                store.push(per_w_store);
            }
        }
    }
    Ok((counts, loglik))
}

/// Groups for the multilevel blocks of the chart (measurement groups come
/// from the shared counts through the basic builders).
pub fn ml_groups_for_block(
    chart: &Chart,
    block: &crate::coords::Block,
    counts: &MlCounts,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
    structure: &ClusterStructure,
) -> Result<Vec<Group>> {
    let k = dims.k;
    let m = dims.m;
    let width = block.len;
    let mut out = Vec::new();
    match block.kind {
        BlockKind::Measurement => {
            return crate::em::groups::groups_for_block(
                chart,
                block,
                &counts.shared,
                spec,
                dims,
                Some(data),
            );
        }
        BlockKind::MlMixture => {
            if m == 1 {
                return Ok(out);
            }
            if dims.q_cluster == 0 {
                // one pooled multinomial cell
                let pooled: Vec<f64> = (0..m).map(|w| counts.b.column(w).sum()).collect();
                let mut design = DMatrix::zeros(m - 1, width);
                for w in 0..m - 1 {
                    design[(w, w)] = 1.0;
                }
                out.push(Group {
                    counts: pooled,
                    model: GroupModel::Linked {
                        link: LinkKind::Multinomial { reference: 0 },
                        eta: EtaMap::dense(design),
                    },
                });
            } else {
                let q = dims.q_cluster;
                for h in 0..structure.n_clusters {
                    let mut design = DMatrix::zeros(m - 1, width);
                    for w in 0..m - 1 {
                        design[(w, w)] = 1.0;
                        for col in 0..q {
                            design[(w, (m - 1) + w * q + col)] = structure.z[(h, col)];
                        }
                    }
                    out.push(Group {
                        counts: counts.b.row(h).to_vec(),
                        model: GroupModel::Linked {
                            link: LinkKind::Multinomial { reference: 0 },
                            eta: EtaMap::dense(design),
                        },
                    });
                }
            }
        }
        BlockKind::MlInitial => {
            if k == 1 {
                return Ok(out);
            }
            let transform = InnerTransform::DecreasingCuts {
                segments: vec![(m - 1, k - 1)],
            };
            let design_for = |w: usize, x_row: &[f64]| -> DMatrix<f64> {
                let mut d = DMatrix::zeros(k - 1, width);
                for c in 0..k - 1 {
                    if w > 0 {
                        d[(c, w - 1)] = 1.0;
                    }
                    d[(c, (m - 1) + c)] = 1.0;
                    for (col, &x) in x_row.iter().enumerate() {
                        d[(c, (m - 1) + (k - 1) + col)] = x;
                    }
                }
                d
            };
            if dims.p_cov == 0 {
                for w in 0..m {
                    out.push(Group {
                        counts: counts.init_by_w.row(w).to_vec(),
                        model: GroupModel::Linked {
                            link: LinkKind::Global,
                            eta: EtaMap {
                                design: design_for(w, &[]),
                                offset: DVector::zeros(k - 1),
                                transform: transform.clone(),
                            },
                        },
                    });
                }
            } else {
                let members = counts.member_post.as_ref().ok_or_else(|| {
                    LmError::Numerical("covariate multilevel M-step needs member posteriors".into())
                })?;
                let mut subj = 0;
                for h in 0..structure.n_clusters {
                    for &i in &structure.members[h] {
                        let row = crate::em::subject_cov_row(spec, dims, data, i, 0);
                        for (w, unit) in members[subj].iter().enumerate() {
                            let c: Vec<f64> =
                                (0..k).map(|u| unit.weight * unit.post_state[(0, u)]).collect();
                            out.push(Group {
                                counts: c,
                                model: GroupModel::Linked {
                                    link: LinkKind::Global,
                                    eta: EtaMap {
                                        design: design_for(w, &row),
                                        offset: DVector::zeros(k - 1),
                                        transform: transform.clone(),
                                    },
                                },
                            });
                        }
                        subj += 1;
                    }
                }
            }
        }
        BlockKind::MlTransition => {
            if k == 1 || dims.t_len < 2 {
                return Ok(out);
            }
            let segs = n_seg(spec, dims);
            let rows_off = (m - 1) * segs;
            let transform = InnerTransform::DecreasingCuts {
                segments: (0..k).map(|u| (rows_off + u * (k - 1), k - 1)).collect(),
            };
            let design_for = |w: usize, seg: usize, u: usize, x_row: &[f64]| -> DMatrix<f64> {
                let mut d = DMatrix::zeros(k - 1, width);
                for c in 0..k - 1 {
                    if w > 0 {
                        d[(c, (w - 1) * segs + seg)] = 1.0;
                    }
                    d[(c, rows_off + u * (k - 1) + c)] = 1.0;
                    for (col, &x) in x_row.iter().enumerate() {
                        d[(c, rows_off + k * (k - 1) + col)] = x;
                    }
                }
                d
            };
            if dims.p_cov == 0 {
                for seg in 0..segs {
                    // pool occasions within a segment
                    let idx_range: Vec<usize> = if segs == 1 {
                        (0..dims.t_len - 1).collect()
                    } else {
                        vec![seg]
                    };
                    for w in 0..m {
                        for u in 0..k {
                            let mut c = vec![0.0; k];
                            for &idx in &idx_range {
                                for (v, cv) in c.iter_mut().enumerate() {
                                    *cv += counts.trans_by_w[(idx, w, u * k + v)];
                                }
                            }
                            out.push(Group {
                                counts: c,
                                model: GroupModel::Linked {
                                    link: LinkKind::Global,
                                    eta: EtaMap {
                                        design: design_for(w, seg, u, &[]),
                                        offset: DVector::zeros(k - 1),
                                        transform: transform.clone(),
                                    },
                                },
                            });
                        }
                    }
                }
            } else {
                let members = counts.member_post.as_ref().ok_or_else(|| {
                    LmError::Numerical("covariate multilevel M-step needs member posteriors".into())
                })?;
                let mut subj = 0;
                for h in 0..structure.n_clusters {
                    for &i in &structure.members[h] {
                        for (w, unit) in members[subj].iter().enumerate() {
                            for (idx, pair) in unit.post_pair.iter().enumerate() {
                                let seg = if segs > 1 { idx } else { 0 };
                                let row = crate::em::subject_cov_row(spec, dims, data, i, idx + 1);
                                for u in 0..k {
                                    let c: Vec<f64> =
                                        (0..k).map(|v| unit.weight * pair[(u, v)]).collect();
                                    out.push(Group {
                                        counts: c,
                                        model: GroupModel::Linked {
                                            link: LinkKind::Global,
                                            eta: EtaMap {
                                                design: design_for(w, seg, u, &row),
                                                offset: DVector::zeros(k - 1),
                                                transform: transform.clone(),
                                            },
                                        },
                                    });
                                }
                            }
                        }
                        subj += 1;
                    }
                }
            }
        }
        _ => {
            return Err(LmError::Spec(
                "basic blocks are lowered by the EM module".into(),
            ))
        }
    }
    Ok(out)
}

/// Posterior-mode cluster class per cluster at the given parameters.
pub fn cluster_class_modes(
    params: &ModelParams,
    spec: &ModelSpec,
    dims: &Dims,
    data: &PanelDataset,
) -> Result<Vec<usize>> {
    let structure = cluster_structure(data, spec)?;
    let (counts, _) = e_step_ml(params, spec, dims, data, &structure)?;
    Ok((0..structure.n_clusters)
        .map(|h| {
            let mut best = 0;
            for w in 1..dims.m {
                if counts.b[(h, w)] > counts.b[(h, best)] {
                    best = w;
                }
            }
            best
        })
        .collect())
}

fn m_step_ml(
    counts: &MlCounts,
    spec: &ModelSpec,
    dims: &Dims,
    current: &ModelParams,
    data: &PanelDataset,
    structure: &ClusterStructure,
    scoring: &ScoringOptions,
) -> Result<ModelParams> {
    let chart = Chart::new(spec, dims)?;
    let mut coords = chart.flatten(current)?;
    for block in &chart.blocks {
        if block.len == 0 {
            continue;
        }
        let range = block.offset..block.offset + block.len;
        match block.kind {
            BlockKind::Measurement => {
                // closed forms via the shared counts
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
                                    (0..l).map(|y| counts.shared.aresp[j][(t, u, y)]).collect(),
                                    counts.shared.at[(t, u)],
                                )
                            } else {
                                (
                                    (0..l)
                                        .map(|y| {
                                            (0..dims.t_len)
                                                .map(|s| counts.shared.aresp[j][(s, u, y)])
                                                .sum()
                                        })
                                        .collect(),
                                    (0..dims.t_len).map(|s| counts.shared.at[(s, u)]).sum(),
                                )
                            };
                            if denom < 1e-10 {
                                let cur: Vec<f64> =
                                    (0..l).map(|y| current.phi[j][(t, u, y)]).collect();
                                new.extend(crate::em::mlogit_coords(&cur));
                            } else {
                                let row: Vec<f64> = num.iter().map(|&x| x / denom).collect();
                                new.extend(crate::em::mlogit_coords(&row));
                            }
                        }
                    }
                }
                coords[range].copy_from_slice(&new);
            }
            BlockKind::MlMixture if dims.q_cluster == 0 => {
                // closed form: class masses are average posterior weights
                if dims.m > 1 {
                    let h_total = structure.n_clusters as f64;
                    let rho: Vec<f64> =
                        (0..dims.m).map(|w| counts.b.column(w).sum() / h_total).collect();
                    let c = crate::em::mlogit_coords(&rho);
                    coords[range].copy_from_slice(&c);
                }
            }
            _ => {
                let block_groups =
                    ml_groups_for_block(&chart, block, counts, spec, dims, data, structure)?;
                let theta0 = coords[range.clone()].to_vec();
                let outcome = maximize(&block_groups, &theta0, scoring)?;
                coords[range].copy_from_slice(&outcome.theta);
            }
        }
    }
    chart.unflatten(&coords)
}

/// Multilevel EM with multi-start orchestration.
pub fn fit_multilevel(
    data: &PanelDataset,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    let structure = cluster_structure(data, spec)?;
    if data.weights.is_some() {
        return Err(LmError::Data(
            "subject weights are not supported in the multilevel model".into(),
        ));
    }
    let dims = Dims::new(spec, data.t_len, &data.levels);
    let chart = Chart::new(spec, &dims)?;

    struct Run {
        params: ModelParams,
        loglik: f64,
        iterations: usize,
        converged: bool,
        trace: Vec<f64>,
    }

    let run_one = |start_params: ModelParams| -> Result<Run> {
        let mut params = start_params;
        let (mut counts, mut ll) = e_step_ml(&params, spec, &dims, data, &structure)?;
        let mut coords = chart.flatten(&params)?;
        let mut trace = vec![ll];
        let mut converged = false;
        let mut iterations = 0;
        for _ in 0..options.max_iter {
            let new_params =
                m_step_ml(&counts, spec, &dims, &params, data, &structure, &options.scoring)?;
            let (new_counts, new_ll) = e_step_ml(&new_params, spec, &dims, data, &structure)?;
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
            if rel < options.tol_loglik && dparam < options.tol_param {
                converged = true;
                break;
            }
        }
        Ok(Run {
            params,
            loglik: ll,
            iterations,
            converged,
            trace,
        })
    };

    let mut starts: Vec<ModelParams> = Vec::with_capacity(options.starts + 1);
    starts.push(start::deterministic_start(spec, &dims, data.into())?);
    for r in 0..options.starts {
        starts.push(start::random_start(spec, &dims, options.seed, r as u64)?);
    }
    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    let mut best: Option<Run> = None;
    for (s_idx, sp) in starts.into_iter().enumerate() {
        match run_one(sp) {
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
        context: "every multilevel EM start failed".into(),
        iterations: options.max_iter,
    })?;
    let (counts, loglik) = e_step_ml(&best.params, spec, &dims, data, &structure)?;
    Ok(FitResult {
        params: best.params,
        loglik,
        iterations: best.iterations,
        converged: best.converged,
        counts: counts.shared.clone(),
        start_summaries: summaries,
        loglik_trace: best.trace,
        traces,
        cluster_posteriors: Some(counts.b),
        permutation: (0..dims.k).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    fn ml_spec(k: usize, m: usize) -> ModelSpec {
        let mut spec = ModelSpec::basic(k);
        spec.measurement = MeasurementSpec::TimeInvariant;
        spec.m = Some(m);
        spec
    }

    /// Coordinates for a small m=2, k=2 model with well separated states.
    fn ml_params(spec: &ModelSpec, dims: &Dims) -> ModelParams {
        let chart = Chart::new(spec, dims).unwrap();
        let mut coords = vec![0.0; chart.len()];
        // measurement: state 1 logit -2, state 2 logit +2
        coords[0] = -2.0;
        coords[1] = 2.0;
        // mixture logit: rho = (0.4, 0.6)
        coords[2] = (0.6_f64 / 0.4).ln();
        // initial: delta0_2 = 1.2, first cut = 0.3
        coords[3] = 1.2;
        coords[4] = 0.3;
        // transitions: eta0_2 = -0.4, row cuts chosen to pull diagonally
        coords[5] = -0.4;
        coords[6] = -1.5; // row 1 cut: stay low
        coords[7] = 1.5; // row 2 cut: stay high
        chart.unflatten(&coords).unwrap()
    }

    #[test]
    fn mixture_worked_examples() {
        // gamma = 0 gives the uniform distribution over classes
        let g = vec![0.0, 0.0];
        let rho = resolve_cluster_mixture(&g, 3, &[]).unwrap();
        for &x in &rho {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-12);
        }
        assert_eq!(resolve_cluster_mixture(&[], 1, &[]).unwrap(), vec![1.0]);
        let g = vec![3.0_f64.ln()];
        let rho = resolve_cluster_mixture(&g, 2, &[]).unwrap();
        assert_relative_eq!(rho[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(rho[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn initial_probs_from_global_cuts() {
        // k = 3, cuts (1, -1): survival probabilities sigma(1), sigma(-1)
        let k = 3;
        let m = 2;
        // layout [delta0 (1); s (2); slopes (0)]; cuts (1, -1) -> s = (1, ln 2)
        let ml_ini = vec![0.0, 1.0, 2.0_f64.ln()];
        let pi = ml_initial_probs(&ml_ini, k, m, 0, &[]).unwrap();
        let s1 = crate::links::logistic(1.0);
        let s2 = crate::links::logistic(-1.0);
        assert_relative_eq!(pi[0], 1.0 - s1, epsilon = 1e-12);
        assert_relative_eq!(pi[1], s1 - s2, epsilon = 1e-12);
        assert_relative_eq!(pi[2], s2, epsilon = 1e-12);
        assert_relative_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(pi.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn zero_parameters_give_uniform_chain() {
        let k = 2;
        let m = 2;
        let ml_ini = vec![0.0, 0.0];
        let pi = ml_initial_probs(&ml_ini, k, m, 0, &[]).unwrap();
        assert_relative_eq!(pi[0], 0.5, epsilon = 1e-12);
        let ml_tra = vec![0.0, 0.0, 0.0];
        let mat = ml_transition_matrix(&ml_tra, k, m, 1, 0, 0, &[]).unwrap();
        for u in 0..k {
            for v in 0..k {
                assert_relative_eq!(mat[(u, v)], 0.5, epsilon = 1e-12);
            }
        }
    }

    fn small_cluster_data() -> PanelDataset {
        // two clusters of two members, T = 2, binary
        let resp =
            Array3::from_shape_vec((4, 2, 1), vec![0, 0, 1, 1, 1, 0, 0, 1]).unwrap();
        PanelDataset::new(resp, vec![2])
            .unwrap()
            .with_cluster(vec![0, 0, 1, 1], vec!["a".into(), "b".into()])
            .unwrap()
    }

    /// Exhaustive oracle: enumerate the cluster class and every member's
    /// latent path.
    fn brute_force_cluster(
        params: &ModelParams,
        spec: &ModelSpec,
        dims: &Dims,
        data: &PanelDataset,
        members: &[usize],
        rho: &[f64],
    ) -> f64 {
        let k = dims.k;
        let t_len = dims.t_len;
        let mut total = 0.0;
        for (w, &rw) in rho.iter().enumerate() {
            let mut prod = 1.0;
            for &i in members {
                let (pi, trans) =
                    resolve_member_chain(params, spec, dims, data, i, w).unwrap();
                let mut member_sum = 0.0;
                for code in 0..k.pow(t_len as u32) {
                    let mut path = Vec::with_capacity(t_len);
                    let mut c = code;
                    for _ in 0..t_len {
                        path.push(c % k);
                        c /= k;
                    }
                    let mut p = pi[path[0]] * params.phi[0][(0, path[0], data.responses[(i, 0, 0)])];
                    for t in 1..t_len {
                        p *= trans[t - 1][(path[t - 1], path[t])]
                            * params.phi[0][(t, path[t], data.responses[(i, t, 0)])];
                    }
                    member_sum += p;
                }
                prod *= member_sum;
            }
            total += rw * prod;
        }
        total.ln()
    }

    #[test]
    fn cluster_loglik_matches_brute_force() {
        let spec = ml_spec(2, 2);
        let data = small_cluster_data();
        let dims = Dims::new(&spec, 2, &[2]);
        let params = ml_params(&spec, &dims);
        let structure = cluster_structure(&data, &spec).unwrap();
        let rho = params.rho.as_ref().unwrap().to_vec();
        for h in 0..2 {
            let got = cluster_loglik(&params, &spec, &dims, &data, &structure, h).unwrap();
            let want =
                brute_force_cluster(&params, &spec, &dims, &data, &structure.members[h], &rho);
            assert_relative_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_member_single_class_equals_manifest() {
        let mut spec = ml_spec(2, 1);
        spec.m = Some(1);
        let resp = Array3::from_shape_vec((1, 2, 1), vec![0, 1]).unwrap();
        let data = PanelDataset::new(resp, vec![2])
            .unwrap()
            .with_cluster(vec![0], vec!["a".into()])
            .unwrap();
        let dims = Dims::new(&spec, 2, &[2]);
        let chart = Chart::new(&spec, &dims).unwrap();
        let coords = vec![-1.2, 0.8, 0.4, -0.3, 0.6];
        assert_eq!(chart.len(), coords.len());
        let params = chart.unflatten(&coords).unwrap();
        let structure = cluster_structure(&data, &spec).unwrap();
        let got = cluster_loglik(&params, &spec, &dims, &data, &structure, 0).unwrap();
        // same chain evaluated by the plain forward recursion
        let (pi, trans) = resolve_member_chain(&params, &spec, &dims, &data, 0, 0).unwrap();
        let em = emissions_shared(&params, &data.pattern_of(0), 2, 1);
        let (_, _, want) =
            crate::recursions::forward(pi.view(), &trans, em.view()).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn identical_support_points_collapse_the_mixture() {
        let spec = ml_spec(2, 2);
        let data = small_cluster_data();
        let dims = Dims::new(&spec, 2, &[2]);
        let chart = Chart::new(&spec, &dims).unwrap();
        // delta0_2 = 0 and eta0_2 = 0 make both classes identical
        let coords = vec![-2.0, 2.0, (0.5_f64 / 0.5).ln(), 0.0, 0.3, 0.0, -1.5, 1.5];
        let params = chart.unflatten(&coords).unwrap();
        let structure = cluster_structure(&data, &spec).unwrap();
        let got = cluster_loglik(&params, &spec, &dims, &data, &structure, 0).unwrap();
        let (pi, trans) = resolve_member_chain(&params, &spec, &dims, &data, 0, 0).unwrap();
        let mut want = 0.0;
        for &i in &structure.members[0] {
            let em = emissions_shared(&params, &data.pattern_of(i), 2, 1);
            let (_, _, lf) = crate::recursions::forward(pi.view(), &trans, em.view()).unwrap();
            want += lf;
        }
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn identical_clusters_get_identical_posteriors() {
        // clusters a and b carry identical member data
        let resp = Array3::from_shape_vec(
            (4, 2, 1),
            vec![0, 1, 1, 1, 0, 1, 1, 1],
        )
        .unwrap();
        let data = PanelDataset::new(resp, vec![2])
            .unwrap()
            .with_cluster(vec![0, 0, 1, 1], vec!["a".into(), "b".into()])
            .unwrap();
        let spec = ml_spec(2, 2);
        let dims = Dims::new(&spec, 2, &[2]);
        let params = ml_params(&spec, &dims);
        let structure = cluster_structure(&data, &spec).unwrap();
        let (counts, _) = e_step_ml(&params, &spec, &dims, &data, &structure).unwrap();
        for w in 0..2 {
            assert_relative_eq!(counts.b[(0, w)], counts.b[(1, w)], epsilon = 1e-12);
        }
        let total0: f64 = (0..2).map(|w| counts.b[(0, w)]).sum();
        assert_relative_eq!(total0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn member_permutation_leaves_cluster_loglik_unchanged() {
        let spec = ml_spec(2, 2);
        let data = small_cluster_data();
        let dims = Dims::new(&spec, 2, &[2]);
        let params = ml_params(&spec, &dims);
        let structure = cluster_structure(&data, &spec).unwrap();
        let base = cluster_loglik(&params, &spec, &dims, &data, &structure, 0).unwrap();
        // swap the two members of cluster 0
        let resp2 =
            Array3::from_shape_vec((4, 2, 1), vec![1, 1, 0, 0, 1, 0, 0, 1]).unwrap();
        let data2 = PanelDataset::new(resp2, vec![2])
            .unwrap()
            .with_cluster(vec![0, 0, 1, 1], vec!["a".into(), "b".into()])
            .unwrap();
        let structure2 = cluster_structure(&data2, &spec).unwrap();
        let swapped = cluster_loglik(&params, &spec, &dims, &data2, &structure2, 0).unwrap();
        assert_relative_eq!(base, swapped, epsilon = 1e-12);
    }

    #[test]
    fn cluster_class_recovery_with_separated_support_points() {
        // H = 50 clusters of 10 members, two well-separated support points:
        // fitted posteriors should give >= 90% mass to the generating class
        // for >= 80% of the clusters (up to class relabelling).
        let spec = ml_spec(2, 2);
        let dims = Dims::new(&spec, 4, &[2]);
        let chart = Chart::new(&spec, &dims).unwrap();
        let mut coords = vec![0.0; chart.len()];
        coords[0] = -2.2; // low state
        coords[1] = 2.2; // high state
        coords[2] = 0.0; // rho uniform
        coords[3] = 3.0; // delta0_2: class 2 starts high
        coords[4] = -1.5; // initial cut
        coords[5] = -2.5; // eta0_2: class 2 moves down less
        coords[6] = -1.4;
        coords[7] = 1.4;
        let truth = chart.unflatten(&coords).unwrap();
        let sim = crate::data::simulate_panel(&crate::data::SimulateOptions {
            spec: &spec,
            params: &truth,
            n: 0,
            seed: 33,
            covariates: None,
            cluster_sizes: Some(vec![10; 50]),
        })
        .unwrap();
        let res = fit_multilevel(
            &sim.data,
            &spec,
            &FitOptions {
                starts: 2,
                max_iter: 1500,
                tol_param: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        let b = res.cluster_posteriors.as_ref().unwrap();
        let classes = sim.cluster_classes.as_ref().unwrap();
        let hits = |swap: bool| -> usize {
            (0..50)
                .filter(|&h| {
                    let w = if swap { 1 - classes[h] } else { classes[h] };
                    b[(h, w)] >= 0.9
                })
                .count()
        };
        let best = hits(false).max(hits(true));
        assert!(best >= 40, "only {best}/50 clusters recovered");
        // the mixture log-likelihood dominates every single-component bound
        let dims = Dims::new(&spec, 4, &[2]);
        let structure = cluster_structure(&sim.data, &spec).unwrap();
        for h in 0..5 {
            let log_f =
                cluster_loglik(&res.params, &spec, &dims, &sim.data, &structure, h).unwrap();
            let rho = res.params.rho.as_ref().unwrap();
            for w in 0..2 {
                let mut member_sum = rho[w].ln();
                for &i in &structure.members[h] {
                    let (pi, trans) =
                        resolve_member_chain(&res.params, &spec, &dims, &sim.data, i, w).unwrap();
                    let em = emissions_shared(&res.params, &sim.data.pattern_of(i), 4, 1);
                    let (_, _, lf) =
                        crate::recursions::forward(pi.view(), &trans, em.view()).unwrap();
                    member_sum += lf;
                }
                assert!(log_f >= member_sum - 1e-10);
            }
        }
    }

    #[test]
    fn multilevel_em_is_monotone_and_fits() {
        let spec = ml_spec(2, 2);
        let dims = Dims::new(&spec, 3, &[2]);
        let chart = Chart::new(&spec, &dims).unwrap();
        let mut coords = vec![0.0; chart.len()];
        coords[0] = -2.2;
        coords[1] = 2.2;
        coords[2] = 0.4;
        coords[3] = 2.5;
        coords[4] = -1.0;
        coords[5] = -2.0;
        coords[6] = -1.2;
        coords[7] = 1.2;
        let truth = chart.unflatten(&coords).unwrap();
        let sim = crate::data::simulate_panel(&crate::data::SimulateOptions {
            spec: &spec,
            params: &truth,
            n: 0,
            seed: 5,
            covariates: None,
            cluster_sizes: Some(vec![8; 60]),
        })
        .unwrap();
        let res = fit_multilevel(
            &sim.data,
            &spec,
            &FitOptions {
                starts: 2,
                max_iter: 2000,
                tol_param: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.converged, "iters={} ll={}", res.iterations, res.loglik);
        for trace in &res.traces {
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "multilevel EM decreased: {w:?}");
            }
        }
        let b = res.cluster_posteriors.as_ref().unwrap();
        for h in 0..60 {
            assert_relative_eq!(b.row(h).sum(), 1.0, epsilon = 1e-10);
        }
        // recompute the loglik independently
        let direct = multilevel_loglik(&res.params, &spec, &dims, &sim.data).unwrap();
        assert_relative_eq!(direct, res.loglik, epsilon = 1e-8);
    }
}
