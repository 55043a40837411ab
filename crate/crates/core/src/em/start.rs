//! Start strategies for the multi-start EM.
//!
//! The deterministic start splits subjects into `k` groups by their
//! occasion-1 response score and uses smoothed group frequencies as
//! measurement probabilities, a diagonally-dominant transition matrix and a
//! uniform initial vector. Random starts draw Dirichlet(1) rows for
//! probability objects and uniform(-1, 1) structural coefficients; ordered
//! cut blocks are drawn in their unconstrained reparameterization, so every
//! draw is feasible.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataRef;
use crate::coords::{s_from_cuts, Chart};
use crate::error::Result;
use crate::links::{apply_link, LinkKind};
use crate::params::{
    mask_cells, Dims, InitialSpec, LatentCovLink, MeasurementSpec, ModelParams, ModelSpec,
    TransitionSpec,
};

fn diagonal_pull_matrix(k: usize) -> Array2<f64> {
    let mut m = Array2::from_elem((k, k), 0.2 / k as f64);
    for u in 0..k {
        m[(u, u)] += 0.8;
    }
    m
}

/// Smoothed per-group response frequencies from a k-quantile split of the
/// occasion-1 responses. Shape per variable: `T x k x l_j`.
fn quantile_frequencies(dims: &Dims, data: DataRef) -> Vec<Array3<f64>> {
    let k = dims.k;
    let t_len = dims.t_len;
    // unit scores and weights
    let (scores, weights, n_units): (Vec<f64>, Vec<f64>, usize) = match data {
        DataRef::Patterns(table) => {
            let s = table
                .patterns
                .iter()
                .map(|p| (0..dims.r).map(|j| p[j] as f64).sum())
                .collect();
            (s, table.counts.clone(), table.patterns.len())
        }
        DataRef::Panel(d) => {
            let s = (0..d.n)
                .map(|i| (0..d.r).map(|j| d.responses[(i, 0, j)] as f64).sum())
                .collect();
            ((s), (0..d.n).map(|i| d.weight(i)).collect(), d.n)
        }
    };
    let mut order: Vec<usize> = (0..n_units).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    // group assignment by cumulative weight
    let mut group = vec![0usize; n_units];
    let mut acc = 0.0;
    for &idx in &order {
        let g = ((acc / total) * k as f64).floor() as usize;
        group[idx] = g.min(k - 1);
        acc += weights[idx];
    }
    let mut freq: Vec<Array3<f64>> = dims
        .levels
        .iter()
        .map(|&l| Array3::from_elem((t_len, k, l), 0.5))
        .collect();
    let response = |unit: usize, t: usize, j: usize| -> usize {
        match data {
            DataRef::Patterns(table) => table.response(unit, t, j),
            DataRef::Panel(d) => d.responses[(unit, t, j)],
        }
    };
    for unit in 0..n_units {
        let g = group[unit];
        for t in 0..t_len {
            for j in 0..dims.r {
                freq[j][(t, g, response(unit, t, j))] += weights[unit];
            }
        }
    }
    for f in &mut freq {
        let (t_len, k, l) = f.dim();
        for t in 0..t_len {
            for u in 0..k {
                let s: f64 = (0..l).map(|y| f[(t, u, y)]).sum();
                for y in 0..l {
                    f[(t, u, y)] /= s;
                }
            }
        }
    }
    freq
}

fn phi_row(freq: &Array3<f64>, t: usize, u: usize) -> Vec<f64> {
    let l = freq.dim().2;
    (0..l).map(|y| freq[(t, u, y)]).collect()
}

fn pooled_row(freq: &Array3<f64>, u: usize) -> Vec<f64> {
    let (t_len, _, l) = freq.dim();
    let mut row: Vec<f64> = (0..l)
        .map(|y| (0..t_len).map(|t| freq[(t, u, y)]).sum())
        .collect();
    let s: f64 = row.iter().sum();
    for x in &mut row {
        *x /= s;
    }
    row
}

/// Deterministic start: quantile-split measurement probabilities, uniform
/// initial vector, diagonally dominant transitions, zero covariate slopes.
pub fn deterministic_start(spec: &ModelSpec, dims: &Dims, data: DataRef) -> Result<ModelParams> {
    let chart = Chart::new(spec, dims)?;
    let k = dims.k;
    let t_len = dims.t_len;
    let freq = quantile_frequencies(dims, data);
    let mut coords = Vec::with_capacity(chart.len());

    // measurement block
    match spec.measurement {
        MeasurementSpec::Free => {
            for f in &freq {
                for t in 0..t_len {
                    for u in 0..k {
                        coords.extend(apply_link(
                            LinkKind::Multinomial { reference: 0 },
                            &phi_row(f, t, u),
                        )?);
                    }
                }
            }
        }
        MeasurementSpec::TimeInvariant => {
            for f in &freq {
                for u in 0..k {
                    coords.extend(apply_link(
                        LinkKind::Multinomial { reference: 0 },
                        &pooled_row(f, u),
                    )?);
                }
            }
        }
        MeasurementSpec::StateIntercept { link } => {
            let p = if spec.has_measurement_covariates() {
                dims.p_cov
            } else {
                0
            };
            for (j, f) in freq.iter().enumerate() {
                for u in 0..k {
                    coords.extend(apply_link(link.kind(), &pooled_row(f, u))?);
                }
                coords.extend(std::iter::repeat_n(0.0, p * link.slopes_per_covariate(dims.levels[j])));
            }
        }
        MeasurementSpec::Rasch => {
            // xi from the first occasion (psi_1 = 0), psi from state averages
            let f = &freq[0];
            let eta = |t: usize, u: usize| -> f64 {
                (f[(t, u, 1)].max(1e-9) / f[(t, u, 0)].max(1e-9)).ln()
            };
            let xi: Vec<f64> = (0..k).map(|u| eta(0, u)).collect();
            coords.extend(xi.iter());
            for t in 1..t_len {
                let psi = (0..k).map(|u| xi[u] - eta(t, u)).sum::<f64>() / k as f64;
                coords.push(psi);
            }
        }
        MeasurementSpec::BivariateMarginal => {
            let p = if spec.has_measurement_covariates() {
                dims.p_cov
            } else {
                0
            };
            let mut xi2 = Vec::new();
            let mut xi3 = Vec::new();
            for u in 0..k {
                let cuts = apply_link(LinkKind::Global, &pooled_row(&freq[1], u))?;
                xi2.push(cuts[0]);
                xi3.push(cuts[1]);
            }
            for u in 0..k {
                let m1 = pooled_row(&freq[0], u);
                coords.push((m1[1] / m1[0]).ln());
            }
            coords.extend(xi2);
            coords.extend(xi3);
            coords.push(0.0); // beta4
            coords.push(0.0); // beta5
            coords.extend(std::iter::repeat_n(0.0, 3 * p));
        }
    }

    if spec.is_multilevel() {
        ml_start_coords(spec, dims, &mut coords)?;
        return chart.unflatten(&coords);
    }

    // initial block: uniform
    match spec.initial {
        InitialSpec::Free => {
            coords.extend(std::iter::repeat_n(0.0, k.saturating_sub(1)));
        }
        InitialSpec::Uniform => {}
        InitialSpec::CovariateLogit => match crate::coords::latent_link(spec) {
            LatentCovLink::Multinomial => {
                coords.extend(std::iter::repeat_n(0.0, (k - 1) * (1 + dims.p_cov)));
            }
            LatentCovLink::Global => {
                let uniform = vec![1.0 / k as f64; k];
                coords.extend(s_from_cuts(&apply_link(LinkKind::Global, &uniform)?)?);
                coords.extend(std::iter::repeat_n(0.0, dims.p_cov));
            }
        },
    }

    // transition block: 0.8 I + 0.2/k
    if t_len > 1 && k > 1 {
        let m = diagonal_pull_matrix(k);
        let row = |u: usize| -> Vec<f64> { (0..k).map(|v| m[(u, v)]).collect() };
        let diag_logit = ((0.2 / k as f64) / (0.8 + 0.2 / k as f64)).ln();
        match spec.transition {
            TransitionSpec::Free => {
                for _ in 1..t_len {
                    coords.extend(std::iter::repeat_n(diag_logit, k * (k - 1)));
                }
            }
            TransitionSpec::Homogeneous => {
                coords.extend(std::iter::repeat_n(diag_logit, k * (k - 1)));
            }
            TransitionSpec::PartiallyHomogeneous { tbar } => {
                let n_seg = if tbar == t_len { 1 } else { 2 };
                coords.extend(std::iter::repeat_n(diag_logit, n_seg * k * (k - 1)));
            }
            TransitionSpec::Identity => {}
            TransitionSpec::EqualOffDiagonal => coords.push(0.2 / k as f64),
            TransitionSpec::Symmetric | TransitionSpec::UpperTriangular => {
                coords.extend(std::iter::repeat_n(0.2 / k as f64, k * (k - 1) / 2));
            }
            TransitionSpec::LogitDiagonal { mask } => {
                let total: usize = mask_cells(k, mask).iter().map(|c| c.len()).sum();
                coords.extend(std::iter::repeat_n(diag_logit, total));
            }
            TransitionSpec::LogitGlobal => {
                for u in 0..k {
                    coords.extend(s_from_cuts(&apply_link(LinkKind::Global, &row(u))?)?);
                }
            }
            TransitionSpec::CovariateLogit { mask } => match crate::coords::latent_link(spec) {
                LatentCovLink::Multinomial => {
                    let total: usize = mask_cells(k, mask).iter().map(|c| c.len()).sum();
                    coords.extend(std::iter::repeat_n(diag_logit, total));
                    coords.extend(std::iter::repeat_n(0.0, dims.p_cov));
                }
                LatentCovLink::Global => {
                    for u in 0..k {
                        coords.extend(s_from_cuts(&apply_link(LinkKind::Global, &row(u))?)?);
                    }
                    coords.extend(std::iter::repeat_n(0.0, dims.p_cov));
                }
            },
        }
    }
    chart.unflatten(&coords)
}

fn ml_start_coords(spec: &ModelSpec, dims: &Dims, coords: &mut Vec<f64>) -> Result<()> {
    let k = dims.k;
    let m = dims.m;
    // mixture: uniform classes, zero cluster-covariate slopes
    if dims.q_cluster == 0 {
        coords.extend(std::iter::repeat_n(0.0, m - 1));
    } else {
        coords.extend(std::iter::repeat_n(0.0, (m - 1) * (1 + dims.q_cluster)));
    }
    // class intercepts get a deterministic spread: identical support points
    // sit on the exchangeable saddle, where EM has exactly zero gradient
    coords.extend((1..m).map(|w| 0.6 * w as f64));
    if k > 1 {
        let uniform = vec![1.0 / k as f64; k];
        coords.extend(s_from_cuts(&apply_link(LinkKind::Global, &uniform)?)?);
    }
    coords.extend(std::iter::repeat_n(0.0, dims.p_cov));
    // transitions: spread eta0 the same way, per-row cuts of the
    // diagonal-pull matrix
    if dims.t_len > 1 {
        let n_seg = if spec.time_varying_ml_intercepts {
            dims.t_len - 1
        } else {
            1
        };
        for w in 1..m {
            coords.extend(std::iter::repeat_n(-0.4 * w as f64, n_seg));
        }
        let mat = diagonal_pull_matrix(k);
        for u in 0..k {
            if k > 1 {
                let row: Vec<f64> = (0..k).map(|v| mat[(u, v)]).collect();
                coords.extend(s_from_cuts(&apply_link(LinkKind::Global, &row)?)?);
            }
        }
        coords.extend(std::iter::repeat_n(0.0, dims.p_cov));
    }
    Ok(())
}

fn dirichlet(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l)
        .map(|_| -(rng.random::<f64>().max(1e-12)).ln() + 1e-3)
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|&x| x / s).collect()
}

fn unif(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * rng.random::<f64>() - 1.0
}

/// Random start number `index` for the run seed.
pub fn random_start(spec: &ModelSpec, dims: &Dims, seed: u64, index: u64) -> Result<ModelParams> {
    let chart = Chart::new(spec, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5747_0000 + index);
    let k = dims.k;
    let t_len = dims.t_len;
    let mut coords = Vec::with_capacity(chart.len());

    match spec.measurement {
        MeasurementSpec::Free => {
            for &l in &dims.levels {
                for _ in 0..t_len * k {
                    coords.extend(apply_link(
                        LinkKind::Multinomial { reference: 0 },
                        &dirichlet(&mut rng, l),
                    )?);
                }
            }
        }
        MeasurementSpec::TimeInvariant => {
            for &l in &dims.levels {
                for _ in 0..k {
                    coords.extend(apply_link(
                        LinkKind::Multinomial { reference: 0 },
                        &dirichlet(&mut rng, l),
                    )?);
                }
            }
        }
        MeasurementSpec::StateIntercept { link } => {
            let p = if spec.has_measurement_covariates() {
                dims.p_cov
            } else {
                0
            };
            for &l in &dims.levels {
                for _ in 0..k {
                    coords.extend(apply_link(link.kind(), &dirichlet(&mut rng, l))?);
                }
                for _ in 0..p * link.slopes_per_covariate(l) {
                    coords.push(unif(&mut rng));
                }
            }
        }
        MeasurementSpec::Rasch => {
            for _ in 0..k + t_len - 1 {
                coords.push(unif(&mut rng));
            }
        }
        MeasurementSpec::BivariateMarginal => {
            let p = if spec.has_measurement_covariates() {
                dims.p_cov
            } else {
                0
            };
            let mut xi1 = Vec::new();
            let mut xi2 = Vec::new();
            let mut xi3 = Vec::new();
            for _ in 0..k {
                let m1 = dirichlet(&mut rng, 2);
                xi1.push((m1[1] / m1[0]).ln());
                let cuts = apply_link(LinkKind::Global, &dirichlet(&mut rng, 3))?;
                xi2.push(cuts[0]);
                xi3.push(cuts[1]);
            }
            coords.extend(xi1);
            coords.extend(xi2);
            coords.extend(xi3);
            coords.push(unif(&mut rng));
            coords.push(unif(&mut rng));
            for _ in 0..3 * p {
                coords.push(unif(&mut rng));
            }
        }
    }

    if spec.is_multilevel() {
        let m = dims.m;
        if dims.q_cluster == 0 {
            if m > 1 {
                coords.extend(apply_link(
                    LinkKind::Multinomial { reference: 0 },
                    &dirichlet(&mut rng, m),
                )?);
            }
        } else {
            for _ in 0..(m - 1) * (1 + dims.q_cluster) {
                coords.push(unif(&mut rng));
            }
        }
        let ini_len = (m - 1) + (k - 1) + dims.p_cov;
        for _ in 0..ini_len {
            coords.push(unif(&mut rng));
        }
        if t_len > 1 {
            let n_seg = if spec.time_varying_ml_intercepts {
                t_len - 1
            } else {
                1
            };
            for _ in 0..(m - 1) * n_seg + k * (k - 1) + dims.p_cov {
                coords.push(unif(&mut rng));
            }
        }
        return chart.unflatten(&coords);
    }

    match spec.initial {
        InitialSpec::Free => {
            if k > 1 {
                coords.extend(apply_link(
                    LinkKind::Multinomial { reference: 0 },
                    &dirichlet(&mut rng, k),
                )?);
            }
        }
        InitialSpec::Uniform => {}
        InitialSpec::CovariateLogit => {
            let len = match crate::coords::latent_link(spec) {
                LatentCovLink::Multinomial => (k - 1) * (1 + dims.p_cov),
                LatentCovLink::Global => (k - 1) + dims.p_cov,
            };
            for _ in 0..len {
                coords.push(unif(&mut rng));
            }
        }
    }

    if t_len > 1 && k > 1 {
        let mut diag_row = |u: usize| -> Result<Vec<f64>> {
            let p = dirichlet(&mut rng, k);
            apply_link(LinkKind::Multinomial { reference: u }, &p)
        };
        match spec.transition {
            TransitionSpec::Free => {
                for _ in 1..t_len {
                    for u in 0..k {
                        let row = diag_row(u)?;
                        coords.extend(row);
                    }
                }
            }
            TransitionSpec::Homogeneous => {
                for u in 0..k {
                    let row = diag_row(u)?;
                    coords.extend(row);
                }
            }
            TransitionSpec::PartiallyHomogeneous { tbar } => {
                let n_seg = if tbar == t_len { 1 } else { 2 };
                for _ in 0..n_seg {
                    for u in 0..k {
                        let row = diag_row(u)?;
                        coords.extend(row);
                    }
                }
            }
            TransitionSpec::Identity => {}
            TransitionSpec::EqualOffDiagonal => {
                coords.push((0.02 + 0.9 * rng.random::<f64>()) / (k as f64 - 1.0));
            }
            TransitionSpec::Symmetric | TransitionSpec::UpperTriangular => {
                for _ in 0..k * (k - 1) / 2 {
                    coords.push((0.02 + 0.75 * rng.random::<f64>()) / (k as f64 - 1.0));
                }
            }
            TransitionSpec::LogitDiagonal { mask } => {
                let cells = mask_cells(k, mask);
                for cell_row in cells.iter() {
                    if cell_row.is_empty() {
                        continue;
                    }
                    let p = dirichlet(&mut rng, cell_row.len() + 1);
                    for idx in 0..cell_row.len() {
                        coords.push((p[idx + 1] / p[0]).ln());
                    }
                }
            }
            TransitionSpec::LogitGlobal => {
                for _ in 0..k * (k - 1) {
                    coords.push(unif(&mut rng));
                }
            }
            TransitionSpec::CovariateLogit { mask } => match crate::coords::latent_link(spec) {
                LatentCovLink::Multinomial => {
                    let cells = mask_cells(k, mask);
                    for cell_row in cells.iter() {
                        if cell_row.is_empty() {
                            continue;
                        }
                        let p = dirichlet(&mut rng, cell_row.len() + 1);
                        for idx in 0..cell_row.len() {
                            coords.push((p[idx + 1] / p[0]).ln());
                        }
                    }
                    for _ in 0..dims.p_cov {
                        coords.push(unif(&mut rng));
                    }
                }
                LatentCovLink::Global => {
                    for _ in 0..k * (k - 1) + dims.p_cov {
                        coords.push(unif(&mut rng));
                    }
                }
            },
        }
    }
    chart.unflatten(&coords)
}
