//! Lowering of coordinate blocks onto grouped categorical likelihoods.
//!
//! For each block of the chart this module assembles the groups whose summed
//! objective is the corresponding component of the expected complete-data
//! log-likelihood. The same groups drive the Fisher-scoring M-steps and the
//! EM-identity score, so the two can never disagree on a layout.

use nalgebra::{DMatrix, DVector};

use super::{subject_cov_row, ExpectedCounts};
use crate::coords::{Block, BlockKind, Chart, CoordScale};
use crate::data::PanelDataset;
use crate::error::{LmError, Result};
use crate::links::LinkKind;
use crate::params::{
    mask_cells, Dims, InitialSpec, LatentCovLink, MeasurementSpec, ModelSpec, TransitionSpec,
};
use crate::scoring::{EtaMap, Group, GroupModel, InnerTransform};

fn selection(rows: usize, width: usize, offset: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, width);
    for r in 0..rows {
        m[(r, offset + r)] = 1.0;
    }
    m
}

fn linked_selection(link: LinkKind, counts: Vec<f64>, width: usize, offset: usize) -> Group {
    let rows = counts.len() - 1;
    Group {
        counts,
        model: GroupModel::Linked {
            link,
            eta: EtaMap::dense(selection(rows, width, offset)),
        },
    }
}

fn prob_scale_group(counts: Vec<f64>, complement: usize, width: usize, offset: usize) -> Group {
    let dim = counts.len();
    let cells: Vec<usize> = (0..dim).filter(|&c| c != complement).collect();
    Group {
        counts,
        model: GroupModel::LinearSimplex {
            dim,
            complement,
            cells,
            design: selection(dim - 1, width, offset),
        },
    }
}

/// Groups whose objective is the block's component of the expected
/// complete-data log-likelihood, with designs over block-local coordinates.
pub fn groups_for_block(
    chart: &Chart,
    block: &Block,
    counts: &ExpectedCounts,
    spec: &ModelSpec,
    dims: &Dims,
    data: Option<&PanelDataset>,
) -> Result<Vec<Group>> {
    match block.kind {
        BlockKind::Measurement => measurement_groups(chart, block, counts, spec, dims, data),
        BlockKind::Initial => initial_groups(chart, block, counts, spec, dims, data),
        BlockKind::Transition => transition_groups(chart, block, counts, spec, dims, data),
        _ => Err(LmError::Spec(
            "multilevel blocks are lowered by the multilevel module".into(),
        )),
    }
}

fn pooled_resp(counts: &ExpectedCounts, j: usize, u: usize, l: usize, t_len: usize) -> Vec<f64> {
    (0..l)
        .map(|y| (0..t_len).map(|t| counts.aresp[j][(t, u, y)]).sum())
        .collect()
}

fn measurement_groups(
    chart: &Chart,
    block: &Block,
    counts: &ExpectedCounts,
    spec: &ModelSpec,
    dims: &Dims,
    data: Option<&PanelDataset>,
) -> Result<Vec<Group>> {
    let k = dims.k;
    let t_len = dims.t_len;
    let width = block.len;
    let mut out = Vec::new();
    let has_cov = spec.has_measurement_covariates();
    match spec.measurement {
        MeasurementSpec::Free => {
            let mut offset = 0;
            for (j, &l) in dims.levels.iter().enumerate() {
                for t in 0..t_len {
                    for u in 0..k {
                        let c: Vec<f64> = (0..l).map(|y| counts.aresp[j][(t, u, y)]).collect();
                        out.push(match chart.scale {
                            CoordScale::Link => linked_selection(
                                LinkKind::Multinomial { reference: 0 },
                                c,
                                width,
                                offset,
                            ),
                            CoordScale::Probability => prob_scale_group(c, 0, width, offset),
                        });
                        offset += l - 1;
                    }
                }
            }
        }
        MeasurementSpec::TimeInvariant => {
            let mut offset = 0;
            for (j, &l) in dims.levels.iter().enumerate() {
                for u in 0..k {
                    let c = pooled_resp(counts, j, u, l, t_len);
                    out.push(match chart.scale {
                        CoordScale::Link => linked_selection(
                            LinkKind::Multinomial { reference: 0 },
                            c,
                            width,
                            offset,
                        ),
                        CoordScale::Probability => prob_scale_group(c, 0, width, offset),
                    });
                    offset += l - 1;
                }
            }
        }
        MeasurementSpec::StateIntercept { link } => {
            if !has_cov {
                let mut offset = 0;
                for (j, &l) in dims.levels.iter().enumerate() {
                    for u in 0..k {
                        let c = pooled_resp(counts, j, u, l, t_len);
                        out.push(linked_selection(link.kind(), c, width, offset));
                        offset += l - 1;
                    }
                }
            } else {
                let panel = data.ok_or_else(|| {
                    LmError::Data("measurement covariate groups need subject data".into())
                })?;
                let units = counts.unit_post.as_ref().ok_or_else(|| {
                    LmError::Numerical("covariate M-step needs per-subject posteriors".into())
                })?;
                let p = dims.p_cov;
                for (i, unit) in units.iter().enumerate() {
                    for t in 0..t_len {
                        let row = subject_cov_row(spec, dims, panel, i, t);
                        let mut block_off = 0;
                        for (j, &l) in dims.levels.iter().enumerate() {
                            let bw = crate::covariates::measurement_block_len(link, k, l, p);
                            let y = panel.responses[(i, t, j)];
                            for u in 0..k {
                                let w = unit.weight * unit.post_state[(t, u)];
                                if w <= 0.0 {
                                    continue;
                                }
                                let mut c = vec![0.0; l];
                                c[y] = w;
                                let local = crate::covariates::measurement_design(link, k, l, u, &row);
                                let mut design = DMatrix::zeros(l - 1, width);
                                for rr in 0..l - 1 {
                                    for cc in 0..bw {
                                        design[(rr, block_off + cc)] = local[(rr, cc)];
                                    }
                                }
                                out.push(Group {
                                    counts: c,
                                    model: GroupModel::Linked {
                                        link: link.kind(),
                                        eta: EtaMap::dense(design),
                                    },
                                });
                            }
                            block_off += bw;
                        }
                    }
                }
            }
        }
        MeasurementSpec::Rasch => {
            for t in 0..t_len {
                for u in 0..k {
                    let c: Vec<f64> = (0..2).map(|y| counts.aresp[0][(t, u, y)]).collect();
                    let mut design = DMatrix::zeros(1, width);
                    design[(0, u)] = 1.0;
                    if t > 0 {
                        design[(0, k + t - 1)] = -1.0;
                    }
                    out.push(Group {
                        counts: c,
                        model: GroupModel::Linked {
                            link: LinkKind::BinaryLogit,
                            eta: EtaMap::dense(design),
                        },
                    });
                }
            }
        }
        MeasurementSpec::BivariateMarginal => {
            let bivariate_design = |u: usize, row: &[f64]| -> DMatrix<f64> {
                let mut d = DMatrix::zeros(5, width);
                d[(0, u)] = 1.0;
                d[(1, k + u)] = 1.0;
                d[(2, 2 * k + u)] = 1.0;
                d[(3, 3 * k)] = 1.0;
                d[(4, 3 * k + 1)] = 1.0;
                let base = 3 * k + 2;
                let p = row.len();
                for (col, &x) in row.iter().enumerate() {
                    d[(0, base + col)] = x;
                    d[(1, base + p + col)] = x;
                    d[(2, base + 2 * p + col)] = x;
                }
                d
            };
            if !has_cov {
                let joint = counts.aresp_joint.as_ref().ok_or_else(|| {
                    LmError::Numerical("bivariate M-step needs joint-cell counts".into())
                })?;
                for u in 0..k {
                    out.push(Group {
                        counts: joint.row(u).to_vec(),
                        model: GroupModel::Bivariate {
                            eta: EtaMap::dense(bivariate_design(u, &[])),
                        },
                    });
                }
            } else {
                let panel = data.ok_or_else(|| {
                    LmError::Data("measurement covariate groups need subject data".into())
                })?;
                let units = counts.unit_post.as_ref().ok_or_else(|| {
                    LmError::Numerical("covariate M-step needs per-subject posteriors".into())
                })?;
                for (i, unit) in units.iter().enumerate() {
                    for t in 0..t_len {
                        let row = subject_cov_row(spec, dims, panel, i, t);
                        let cell = panel.responses[(i, t, 0)] * 3 + panel.responses[(i, t, 1)];
                        for u in 0..k {
                            let w = unit.weight * unit.post_state[(t, u)];
                            if w <= 0.0 {
                                continue;
                            }
                            let mut c = vec![0.0; 6];
                            c[cell] = w;
                            out.push(Group {
                                counts: c,
                                model: GroupModel::Bivariate {
                                    eta: EtaMap::dense(bivariate_design(u, &row)),
                                },
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn initial_groups(
    chart: &Chart,
    block: &Block,
    counts: &ExpectedCounts,
    spec: &ModelSpec,
    dims: &Dims,
    data: Option<&PanelDataset>,
) -> Result<Vec<Group>> {
    let k = dims.k;
    let width = block.len;
    let mut out = Vec::new();
    match spec.initial {
        InitialSpec::Uniform => {}
        InitialSpec::Free => {
            if k > 1 {
                let c = counts.a1.to_vec();
                out.push(match chart.scale {
                    CoordScale::Link => {
                        linked_selection(LinkKind::Multinomial { reference: 0 }, c, width, 0)
                    }
                    CoordScale::Probability => prob_scale_group(c, 0, width, 0),
                });
            }
        }
        InitialSpec::CovariateLogit => {
            let panel = data.ok_or_else(|| {
                LmError::Data("covariate initial groups need subject data".into())
            })?;
            let units = counts.unit_post.as_ref().ok_or_else(|| {
                LmError::Numerical("covariate M-step needs per-subject posteriors".into())
            })?;
            let p = dims.p_cov;
            let link = crate::coords::latent_link(spec);
            for (i, unit) in units.iter().enumerate() {
                let row = subject_cov_row(spec, dims, panel, i, 0);
                let c: Vec<f64> = (0..k).map(|u| unit.weight * unit.post_state[(0, u)]).collect();
                let model = match link {
                    LatentCovLink::Multinomial => {
                        let mut design = DMatrix::zeros(k - 1, width);
                        for u in 0..k - 1 {
                            design[(u, u)] = 1.0;
                            for (col, &x) in row.iter().enumerate() {
                                design[(u, (k - 1) + u * p + col)] = x;
                            }
                        }
                        GroupModel::Linked {
                            link: LinkKind::Multinomial { reference: 0 },
                            eta: EtaMap::dense(design),
                        }
                    }
                    LatentCovLink::Global => {
                        let mut design = DMatrix::zeros(k - 1, width);
                        for cidx in 0..k - 1 {
                            design[(cidx, cidx)] = 1.0;
                            for (col, &x) in row.iter().enumerate() {
                                design[(cidx, (k - 1) + col)] = x;
                            }
                        }
                        GroupModel::Linked {
                            link: LinkKind::Global,
                            eta: EtaMap {
                                design,
                                offset: DVector::zeros(k - 1),
                                transform: InnerTransform::DecreasingCuts {
                                    segments: vec![(0, k - 1)],
                                },
                            },
                        }
                    }
                };
                out.push(Group { counts: c, model });
            }
        }
    }
    Ok(out)
}

fn pooled_trans_rows(counts: &ExpectedCounts, range: std::ops::Range<usize>, k: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; k]; k];
    for m in &counts.atrans[range] {
        for u in 0..k {
            for v in 0..k {
                rows[u][v] += m[(u, v)];
            }
        }
    }
    rows
}

/// Index of the unordered pair `(u, v)` in lexicographic `u < v` order.
fn pair_index(k: usize, u: usize, v: usize) -> usize {
    let (a, b) = if u < v { (u, v) } else { (v, u) };
    a * k - a * (a + 1) / 2 + (b - a - 1)
}

fn transition_groups(
    chart: &Chart,
    block: &Block,
    counts: &ExpectedCounts,
    spec: &ModelSpec,
    dims: &Dims,
    data: Option<&PanelDataset>,
) -> Result<Vec<Group>> {
    let k = dims.k;
    let t_len = dims.t_len;
    let width = block.len;
    let mut out = Vec::new();
    if t_len < 2 || k < 2 {
        return Ok(out);
    }
    let n_trans = t_len - 1;
    let masked_softmax_identity = |u: usize, cells: Vec<usize>, c: Vec<f64>, offset: usize| -> Group {
        Group {
            counts: c,
            model: GroupModel::MaskedSoftmax {
                dim: k,
                reference: u,
                cells: cells.clone(),
                eta: EtaMap::dense(selection(cells.len(), width, offset)),
            },
        }
    };
    match spec.transition {
        TransitionSpec::Identity => {}
        TransitionSpec::Free => {
            let mut offset = 0;
            for idx in 0..n_trans {
                for u in 0..k {
                    let c: Vec<f64> = (0..k).map(|v| counts.atrans[idx][(u, v)]).collect();
                    out.push(match chart.scale {
                        CoordScale::Link => {
                            let cells: Vec<usize> = (0..k).filter(|&v| v != u).collect();
                            masked_softmax_identity(u, cells, c, offset)
                        }
                        CoordScale::Probability => prob_scale_group(c, u, width, offset),
                    });
                    offset += k - 1;
                }
            }
        }
        TransitionSpec::Homogeneous => {
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            let mut offset = 0;
            for (u, c) in rows.into_iter().enumerate() {
                out.push(match chart.scale {
                    CoordScale::Link => {
                        let cells: Vec<usize> = (0..k).filter(|&v| v != u).collect();
                        masked_softmax_identity(u, cells, c, offset)
                    }
                    CoordScale::Probability => prob_scale_group(c, u, width, offset),
                });
                offset += k - 1;
            }
        }
        TransitionSpec::PartiallyHomogeneous { tbar } => {
            let segments: Vec<std::ops::Range<usize>> = if tbar == t_len {
                std::iter::once(0..n_trans).collect()
            } else {
                vec![0..tbar - 1, tbar - 1..n_trans]
            };
            let mut offset = 0;
            for seg in segments {
                let rows = pooled_trans_rows(counts, seg, k);
                for (u, c) in rows.into_iter().enumerate() {
                    out.push(match chart.scale {
                        CoordScale::Link => {
                            let cells: Vec<usize> = (0..k).filter(|&v| v != u).collect();
                            masked_softmax_identity(u, cells, c, offset)
                        }
                        CoordScale::Probability => prob_scale_group(c, u, width, offset),
                    });
                    offset += k - 1;
                }
            }
        }
        TransitionSpec::EqualOffDiagonal => {
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            for (u, c) in rows.into_iter().enumerate() {
                let cells: Vec<usize> = (0..k).filter(|&v| v != u).collect();
                out.push(Group {
                    counts: c,
                    model: GroupModel::LinearSimplex {
                        dim: k,
                        complement: u,
                        cells: cells.clone(),
                        design: DMatrix::from_element(cells.len(), 1, 1.0),
                    },
                });
            }
        }
        TransitionSpec::Symmetric => {
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            for (u, c) in rows.into_iter().enumerate() {
                let cells: Vec<usize> = (0..k).filter(|&v| v != u).collect();
                let mut design = DMatrix::zeros(cells.len(), width);
                for (idx, &v) in cells.iter().enumerate() {
                    design[(idx, pair_index(k, u, v))] = 1.0;
                }
                out.push(Group {
                    counts: c,
                    model: GroupModel::LinearSimplex {
                        dim: k,
                        complement: u,
                        cells,
                        design,
                    },
                });
            }
        }
        TransitionSpec::UpperTriangular => {
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            for (u, c) in rows.into_iter().enumerate() {
                if u == k - 1 {
                    continue; // absorbing last state: no free cells
                }
                let cells: Vec<usize> = (u + 1..k).collect();
                let mut design = DMatrix::zeros(cells.len(), width);
                for (idx, &v) in cells.iter().enumerate() {
                    design[(idx, pair_index(k, u, v))] = 1.0;
                }
                out.push(Group {
                    counts: c,
                    model: GroupModel::LinearSimplex {
                        dim: k,
                        complement: u,
                        cells,
                        design,
                    },
                });
            }
        }
        TransitionSpec::LogitDiagonal { mask } => {
            let cells = mask_cells(k, mask);
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            let mut offset = 0;
            for (u, c) in rows.into_iter().enumerate() {
                if cells[u].is_empty() {
                    continue;
                }
                out.push(masked_softmax_identity(u, cells[u].clone(), c, offset));
                offset += cells[u].len();
            }
        }
        TransitionSpec::LogitGlobal => {
            let rows = pooled_trans_rows(counts, 0..n_trans, k);
            let segments: Vec<(usize, usize)> = (0..k).map(|u| (u * (k - 1), k - 1)).collect();
            for (u, c) in rows.into_iter().enumerate() {
                out.push(Group {
                    counts: c,
                    model: GroupModel::Linked {
                        link: LinkKind::Global,
                        eta: EtaMap {
                            design: selection(k - 1, width, u * (k - 1)),
                            offset: DVector::zeros(k - 1),
                            transform: InnerTransform::DecreasingCuts {
                                segments: segments.clone(),
                            },
                        },
                    },
                });
            }
        }
        TransitionSpec::CovariateLogit { mask } => {
            let panel = data.ok_or_else(|| {
                LmError::Data("covariate transition groups need subject data".into())
            })?;
            let units = counts.unit_post.as_ref().ok_or_else(|| {
                LmError::Numerical("covariate M-step needs per-subject posteriors".into())
            })?;
            let link = crate::coords::latent_link(spec);
            match link {
                LatentCovLink::Multinomial => {
                    let cells = mask_cells(k, mask);
                    let n_cells: usize = cells.iter().map(|c| c.len()).sum();
                    let mut cell_offset = vec![0usize; k];
                    let mut acc = 0;
                    for u in 0..k {
                        cell_offset[u] = acc;
                        acc += cells[u].len();
                    }
                    for (i, unit) in units.iter().enumerate() {
                        for (idx, pair) in unit.post_pair.iter().enumerate() {
                            let row = subject_cov_row(spec, dims, panel, i, idx + 1);
                            for u in 0..k {
                                if cells[u].is_empty() {
                                    continue;
                                }
                                let c: Vec<f64> =
                                    (0..k).map(|v| unit.weight * pair[(u, v)]).collect();
                                let mut design = DMatrix::zeros(cells[u].len(), width);
                                for cc in 0..cells[u].len() {
                                    design[(cc, cell_offset[u] + cc)] = 1.0;
                                    for (col, &x) in row.iter().enumerate() {
                                        design[(cc, n_cells + col)] = x;
                                    }
                                }
                                out.push(Group {
                                    counts: c,
                                    model: GroupModel::MaskedSoftmax {
                                        dim: k,
                                        reference: u,
                                        cells: cells[u].clone(),
                                        eta: EtaMap::dense(design),
                                    },
                                });
                            }
                        }
                    }
                }
                LatentCovLink::Global => {
                    let segments: Vec<(usize, usize)> =
                        (0..k).map(|u| (u * (k - 1), k - 1)).collect();
                    for (i, unit) in units.iter().enumerate() {
                        for (idx, pair) in unit.post_pair.iter().enumerate() {
                            let row = subject_cov_row(spec, dims, panel, i, idx + 1);
                            for u in 0..k {
                                let c: Vec<f64> =
                                    (0..k).map(|v| unit.weight * pair[(u, v)]).collect();
                                let mut design = DMatrix::zeros(k - 1, width);
                                for cidx in 0..k - 1 {
                                    design[(cidx, u * (k - 1) + cidx)] = 1.0;
                                    for (col, &x) in row.iter().enumerate() {
                                        design[(cidx, k * (k - 1) + col)] = x;
                                    }
                                }
                                out.push(Group {
                                    counts: c,
                                    model: GroupModel::Linked {
                                        link: LinkKind::Global,
                                        eta: EtaMap {
                                            design,
                                            offset: DVector::zeros(k - 1),
                                            transform: InnerTransform::DecreasingCuts {
                                                segments: segments.clone(),
                                            },
                                        },
                                    },
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
