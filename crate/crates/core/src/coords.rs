//! Free-parameter coordinate chart.
//!
//! Every spec family maps to a flat vector of unconstrained coordinates:
//! unconstrained probabilities go through their canonical links, linear
//! transition designs keep their probability-scale coefficients, and ordered
//! cut intercepts (global-logit blocks) are stored as a first cut plus log
//! decrements so any real vector resolves to strictly decreasing cuts.
//!
//! The chart is the single source of truth for the number of non-redundant
//! parameters and for the layout of every structural coefficient block; the
//! EM score, the observed information and the Fisher-scoring M-steps all
//! address parameters through it.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};

use crate::covariates::bivariate_joint_from_eta;
use crate::error::{LmError, Result};
use crate::links::{apply_link, invert_link, LinkKind};
use crate::params::{
    mask_cells, CovariatePlacement, Dims, InitialSpec, LatentCovLink, MeasurementSpec,
    ModelParams, ModelSpec, TransitionSpec,
};

/// Scale used for unconstrained-probability blocks: canonical links by
/// default, or raw probabilities (omitting the reference category) for
/// diagnostics that need probability-scale derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordScale {
    Link,
    Probability,
}

/// One contiguous block of coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Measurement,
    Initial,
    Transition,
    MlMixture,
    MlInitial,
    MlTransition,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
}

/// Coordinate chart for a spec at given dimensions.
#[derive(Debug, Clone)]
pub struct Chart {
    pub spec: ModelSpec,
    pub dims: Dims,
    pub scale: CoordScale,
    pub blocks: Vec<Block>,
    len: usize,
}

// --- ordered-cut reparameterization ---------------------------------------

/// Strictly decreasing cuts from free parameters: `c_0 = s_0`,
/// `c_j = c_{j-1} - exp(s_j)`.
pub fn cuts_from_s(s: &[f64]) -> Vec<f64> {
    let mut cuts = Vec::with_capacity(s.len());
    for (j, &sj) in s.iter().enumerate() {
        if j == 0 {
            cuts.push(sj);
        } else {
            cuts.push(cuts[j - 1] - sj.exp());
        }
    }
    cuts
}

/// Inverse of [`cuts_from_s`]; requires strictly decreasing cuts.
pub fn s_from_cuts(cuts: &[f64]) -> Result<Vec<f64>> {
    let mut s = Vec::with_capacity(cuts.len());
    for (j, &c) in cuts.iter().enumerate() {
        if j == 0 {
            s.push(c);
        } else {
            let gap = cuts[j - 1] - c;
            if gap <= 0.0 || gap.is_nan() {
                return Err(LmError::Params(
                    "cut intercepts must be strictly decreasing".into(),
                ));
            }
            s.push(gap.ln());
        }
    }
    Ok(s)
}

/// Jacobian `d cuts / d s`, lower triangular.
pub fn cuts_jacobian(s: &[f64]) -> DMatrix<f64> {
    let d = s.len();
    let mut jac = DMatrix::zeros(d, d);
    for c in 0..d {
        jac[(c, 0)] = 1.0;
        for j in 1..=c {
            jac[(c, j)] = -s[j].exp();
        }
    }
    jac
}

// --- layout ----------------------------------------------------------------

fn measurement_len(spec: &ModelSpec, dims: &Dims) -> Result<usize> {
    let k = dims.k;
    let t_len = dims.t_len;
    let p = if spec.has_measurement_covariates() {
        dims.p_cov
    } else {
        0
    };
    Ok(match spec.measurement {
        MeasurementSpec::Free => dims.levels.iter().map(|&l| t_len * k * (l - 1)).sum(),
        MeasurementSpec::TimeInvariant => dims.levels.iter().map(|&l| k * (l - 1)).sum(),
        MeasurementSpec::StateIntercept { link } => dims
            .levels
            .iter()
            .map(|&l| k * (l - 1) + p * link.slopes_per_covariate(l))
            .sum(),
        MeasurementSpec::Rasch => {
            if dims.r != 1 || dims.levels != vec![2] {
                return Err(LmError::Spec(
                    "the Rasch measurement model needs a single binary response".into(),
                ));
            }
            k + (t_len - 1)
        }
        MeasurementSpec::BivariateMarginal => {
            if dims.r != 2 || dims.levels != vec![2, 3] {
                return Err(LmError::Spec(
                    "the bivariate marginal model needs two responses with 2 and 3 levels".into(),
                ));
            }
            3 * k + 2 + 3 * p
        }
    })
}

fn initial_len(spec: &ModelSpec, dims: &Dims) -> usize {
    let k = dims.k;
    match spec.initial {
        InitialSpec::Free => k - 1,
        InitialSpec::Uniform => 0,
        InitialSpec::CovariateLogit => match latent_link(spec) {
            LatentCovLink::Multinomial => (k - 1) * (1 + dims.p_cov),
            LatentCovLink::Global => (k - 1) + dims.p_cov,
        },
    }
}

pub(crate) fn latent_link(spec: &ModelSpec) -> LatentCovLink {
    match spec.covariates.placement {
        CovariatePlacement::Latent { link } => link,
        _ => LatentCovLink::Multinomial,
    }
}

fn transition_len(spec: &ModelSpec, dims: &Dims) -> Result<usize> {
    let k = dims.k;
    let t_len = dims.t_len;
    if t_len < 2 {
        return Ok(0);
    }
    Ok(match spec.transition {
        TransitionSpec::Free => (t_len - 1) * k * (k - 1),
        TransitionSpec::Homogeneous => k * (k - 1),
        TransitionSpec::PartiallyHomogeneous { tbar } => {
            if !(2..=t_len).contains(&tbar) {
                return Err(LmError::Spec(format!(
                    "tbar = {tbar} out of range 2..={t_len}"
                )));
            }
            let segments = if tbar == t_len { 1 } else { 2 };
            segments * k * (k - 1)
        }
        TransitionSpec::Identity => 0,
        TransitionSpec::EqualOffDiagonal => usize::from(k > 1),
        TransitionSpec::Symmetric | TransitionSpec::UpperTriangular => k * (k - 1) / 2,
        TransitionSpec::LogitDiagonal { mask } => {
            mask_cells(k, mask).iter().map(|c| c.len()).sum()
        }
        TransitionSpec::LogitGlobal => k * (k - 1),
        TransitionSpec::CovariateLogit { mask } => match latent_link(spec) {
            LatentCovLink::Multinomial => {
                mask_cells(k, mask).iter().map(|c| c.len()).sum::<usize>() + dims.p_cov
            }
            LatentCovLink::Global => {
                if mask.is_some() {
                    return Err(LmError::Spec(
                        "sparsity masks combine with diagonal-reference logits, not global logits"
                            .into(),
                    ));
                }
                k * (k - 1) + dims.p_cov
            }
        },
    })
}

fn ml_lens(spec: &ModelSpec, dims: &Dims) -> (usize, usize, usize) {
    let m = dims.m;
    let k = dims.k;
    let mixture = if dims.q_cluster == 0 {
        m - 1
    } else {
        (m - 1) * (1 + dims.q_cluster)
    };
    let initial = (m - 1) + (k - 1) + dims.p_cov;
    let n_seg = if spec.time_varying_ml_intercepts {
        dims.t_len.saturating_sub(1).max(1)
    } else {
        1
    };
    let transition = (m - 1) * n_seg + k * (k - 1) + dims.p_cov;
    (mixture, initial, transition)
}

impl Chart {
    pub fn new(spec: &ModelSpec, dims: &Dims) -> Result<Chart> {
        Chart::with_scale(spec, dims, CoordScale::Link)
    }

    pub fn with_scale(spec: &ModelSpec, dims: &Dims, scale: CoordScale) -> Result<Chart> {
        spec.validate()?;
        if scale == CoordScale::Probability {
            let ok = matches!(
                spec.measurement,
                MeasurementSpec::Free | MeasurementSpec::TimeInvariant
            ) && matches!(spec.initial, InitialSpec::Free | InitialSpec::Uniform)
                && matches!(
                    spec.transition,
                    TransitionSpec::Free
                        | TransitionSpec::Homogeneous
                        | TransitionSpec::PartiallyHomogeneous { .. }
                        | TransitionSpec::Identity
                )
                && !spec.is_multilevel();
            if !ok {
                return Err(LmError::Spec(
                    "probability-scale coordinates exist only for unconstrained specs".into(),
                ));
            }
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |kind: BlockKind, len: usize, offset: &mut usize| {
            blocks.push(Block {
                kind,
                offset: *offset,
                len,
            });
            *offset += len;
        };
        push(
            BlockKind::Measurement,
            measurement_len(spec, dims)?,
            &mut offset,
        );
        if spec.is_multilevel() {
            let (mix, ini, tra) = ml_lens(spec, dims);
            push(BlockKind::MlMixture, mix, &mut offset);
            push(BlockKind::MlInitial, ini, &mut offset);
            if dims.t_len > 1 {
                push(BlockKind::MlTransition, tra, &mut offset);
            }
        } else {
            push(BlockKind::Initial, initial_len(spec, dims), &mut offset);
            push(
                BlockKind::Transition,
                transition_len(spec, dims)?,
                &mut offset,
            );
        }
        Ok(Chart {
            spec: spec.clone(),
            dims: dims.clone(),
            scale,
            blocks,
            len: offset,
        })
    }

    /// Number of non-redundant free parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block(&self, kind: BlockKind) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    fn mlogit_or_prob(&self, p: &[f64]) -> Result<Vec<f64>> {
        match self.scale {
            CoordScale::Link => apply_link(LinkKind::Multinomial { reference: 0 }, p),
            CoordScale::Probability => Ok(p[1..].to_vec()),
        }
    }

    fn inv_mlogit_or_prob(&self, coords: &[f64]) -> Result<Vec<f64>> {
        match self.scale {
            CoordScale::Link => invert_link(LinkKind::Multinomial { reference: 0 }, coords),
            CoordScale::Probability => {
                let rest: f64 = coords.iter().sum();
                let mut p = vec![1.0 - rest];
                p.extend_from_slice(coords);
                Ok(p)
            }
        }
    }

    fn diag_logit_or_prob(&self, row: &[f64], diag: usize) -> Result<Vec<f64>> {
        match self.scale {
            CoordScale::Link => apply_link(LinkKind::Multinomial { reference: diag }, row),
            CoordScale::Probability => Ok(row
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != diag)
                .map(|(_, &x)| x)
                .collect()),
        }
    }

    fn inv_diag_logit_or_prob(&self, coords: &[f64], diag: usize) -> Result<Vec<f64>> {
        match self.scale {
            CoordScale::Link => invert_link(LinkKind::Multinomial { reference: diag }, coords),
            CoordScale::Probability => {
                let rest: f64 = coords.iter().sum();
                let k = coords.len() + 1;
                let mut p = Vec::with_capacity(k);
                let mut idx = 0;
                for v in 0..k {
                    if v == diag {
                        p.push(1.0 - rest);
                    } else {
                        p.push(coords[idx]);
                        idx += 1;
                    }
                }
                Ok(p)
            }
        }
    }

    /// Map parameters to the flat coordinate vector.
    pub fn flatten(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len);
        self.flatten_measurement(params, &mut out)?;
        if self.spec.is_multilevel() {
            self.flatten_ml(params, &mut out)?;
        } else {
            self.flatten_initial(params, &mut out)?;
            self.flatten_transition(params, &mut out)?;
        }
        debug_assert_eq!(out.len(), self.len);
        Ok(out)
    }

    fn flatten_measurement(&self, params: &ModelParams, out: &mut Vec<f64>) -> Result<()> {
        let k = self.dims.k;
        let t_len = self.dims.t_len;
        match self.spec.measurement {
            MeasurementSpec::Free => {
                for phi in &params.phi {
                    let l = phi.dim().2;
                    for t in 0..t_len {
                        for u in 0..k {
                            let row: Vec<f64> = (0..l).map(|y| phi[(t, u, y)]).collect();
                            out.extend(self.mlogit_or_prob(&row)?);
                        }
                    }
                }
            }
            MeasurementSpec::TimeInvariant => {
                for phi in &params.phi {
                    let l = phi.dim().2;
                    for u in 0..k {
                        let row: Vec<f64> = (0..l).map(|y| phi[(0, u, y)]).collect();
                        out.extend(self.mlogit_or_prob(&row)?);
                    }
                }
            }
            MeasurementSpec::StateIntercept { link } => match &params.beta {
                Some(beta) => out.extend_from_slice(beta),
                None => {
                    if self.spec.has_measurement_covariates() {
                        return Err(LmError::Params(
                            "measurement covariate spec without coefficients".into(),
                        ));
                    }
                    for phi in &params.phi {
                        let l = phi.dim().2;
                        for u in 0..k {
                            let row: Vec<f64> = (0..l).map(|y| phi[(0, u, y)]).collect();
                            out.extend(apply_link(link.kind(), &row)?);
                        }
                    }
                }
            },
            MeasurementSpec::Rasch | MeasurementSpec::BivariateMarginal => {
                let beta = params
                    .beta
                    .as_ref()
                    .ok_or_else(|| LmError::Params("structural measurement needs beta".into()))?;
                out.extend_from_slice(beta);
            }
        }
        Ok(())
    }

    fn flatten_initial(&self, params: &ModelParams, out: &mut Vec<f64>) -> Result<()> {
        match self.spec.initial {
            InitialSpec::Free => {
                if self.dims.k > 1 {
                    out.extend(self.mlogit_or_prob(params.pi.as_slice().unwrap())?);
                }
            }
            InitialSpec::Uniform => {}
            InitialSpec::CovariateLogit => {
                let d1 = params
                    .delta1
                    .as_ref()
                    .ok_or_else(|| LmError::Params("covariate initial needs delta1".into()))?;
                out.extend_from_slice(d1);
            }
        }
        Ok(())
    }

    fn flatten_transition(&self, params: &ModelParams, out: &mut Vec<f64>) -> Result<()> {
        let k = self.dims.k;
        let t_len = self.dims.t_len;
        if t_len < 2 || k == 0 {
            return Ok(());
        }
        let row = |m: &Array2<f64>, u: usize| -> Vec<f64> { (0..k).map(|v| m[(u, v)]).collect() };
        match self.spec.transition {
            TransitionSpec::Free => {
                for m in &params.trans {
                    for u in 0..k {
                        if k > 1 {
                            out.extend(self.diag_logit_or_prob(&row(m, u), u)?);
                        }
                    }
                }
            }
            TransitionSpec::Homogeneous => {
                let m = &params.trans[0];
                for u in 0..k {
                    if k > 1 {
                        out.extend(self.diag_logit_or_prob(&row(m, u), u)?);
                    }
                }
            }
            TransitionSpec::PartiallyHomogeneous { tbar } => {
                let mut reps: Vec<&Array2<f64>> = vec![&params.trans[0]];
                if tbar < t_len {
                    reps.push(&params.trans[tbar - 1]);
                }
                for m in reps {
                    for u in 0..k {
                        if k > 1 {
                            out.extend(self.diag_logit_or_prob(&row(m, u), u)?);
                        }
                    }
                }
            }
            TransitionSpec::Identity => {}
            TransitionSpec::EqualOffDiagonal => {
                if k > 1 {
                    match &params.delta {
                        Some(d) => out.extend_from_slice(d),
                        None => out.push(params.trans[0][(0, 1)]),
                    }
                }
            }
            TransitionSpec::Symmetric => match &params.delta {
                Some(d) => out.extend_from_slice(d),
                None => {
                    let m = &params.trans[0];
                    for u in 0..k {
                        for v in u + 1..k {
                            out.push(m[(u, v)]);
                        }
                    }
                }
            },
            TransitionSpec::UpperTriangular => match &params.delta {
                Some(d) => out.extend_from_slice(d),
                None => {
                    let m = &params.trans[0];
                    for u in 0..k {
                        for v in u + 1..k {
                            out.push(m[(u, v)]);
                        }
                    }
                }
            },
            TransitionSpec::LogitDiagonal { mask } => {
                let m = &params.trans[0];
                let cells = mask_cells(k, mask);
                for u in 0..k {
                    for &v in &cells[u] {
                        out.push((m[(u, v)].max(1e-300) / m[(u, u)].max(1e-300)).ln());
                    }
                }
            }
            TransitionSpec::LogitGlobal => {
                let m = &params.trans[0];
                for u in 0..k {
                    let cuts = apply_link(LinkKind::Global, &row(m, u))?;
                    out.extend(s_from_cuts(&cuts)?);
                }
            }
            TransitionSpec::CovariateLogit { .. } => {
                let d2 = params
                    .delta2
                    .as_ref()
                    .ok_or_else(|| LmError::Params("covariate transitions need delta2".into()))?;
                out.extend_from_slice(d2);
            }
        }
        Ok(())
    }

    fn flatten_ml(&self, params: &ModelParams, out: &mut Vec<f64>) -> Result<()> {
        if self.dims.q_cluster == 0 {
            let rho = params
                .rho
                .as_ref()
                .ok_or_else(|| LmError::Params("multilevel model needs rho".into()))?;
            if self.dims.m > 1 {
                out.extend(apply_link(
                    LinkKind::Multinomial { reference: 0 },
                    rho.as_slice().unwrap(),
                )?);
            }
        } else {
            let gamma = params
                .gamma
                .as_ref()
                .ok_or_else(|| LmError::Params("cluster covariates need gamma".into()))?;
            out.extend_from_slice(gamma);
        }
        let ini = params
            .ml_initial
            .as_ref()
            .ok_or_else(|| LmError::Params("multilevel model needs ml_initial".into()))?;
        out.extend_from_slice(ini);
        if self.dims.t_len > 1 {
            let tra = params
                .ml_trans
                .as_ref()
                .ok_or_else(|| LmError::Params("multilevel model needs ml_trans".into()))?;
            out.extend_from_slice(tra);
        }
        Ok(())
    }

    /// Map a flat coordinate vector back to parameters with all shared
    /// probability objects resolved (baseline covariate row for covariate
    /// specs, first cluster class for the multilevel spec).
    pub fn unflatten(&self, coords: &[f64]) -> Result<ModelParams> {
        if coords.len() != self.len {
            return Err(LmError::Params(format!(
                "coordinate vector has length {}, chart needs {}",
                coords.len(),
                self.len
            )));
        }
        let k = self.dims.k;
        let t_len = self.dims.t_len;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Vec<f64> {
            let s = coords[cursor..cursor + n].to_vec();
            cursor += n;
            s
        };

        // measurement
        let mut phi: Vec<Array3<f64>> = Vec::with_capacity(self.dims.r);
        let mut phi_joint = None;
        let mut beta = None;
        match self.spec.measurement {
            MeasurementSpec::Free => {
                for &l in &self.dims.levels {
                    let mut arr = Array3::zeros((t_len, k, l));
                    for t in 0..t_len {
                        for u in 0..k {
                            let p = self.inv_mlogit_or_prob(&take(l - 1))?;
                            for y in 0..l {
                                arr[(t, u, y)] = p[y];
                            }
                        }
                    }
                    phi.push(arr);
                }
            }
            MeasurementSpec::TimeInvariant => {
                for &l in &self.dims.levels {
                    let mut arr = Array3::zeros((t_len, k, l));
                    for u in 0..k {
                        let p = self.inv_mlogit_or_prob(&take(l - 1))?;
                        for t in 0..t_len {
                            for y in 0..l {
                                arr[(t, u, y)] = p[y];
                            }
                        }
                    }
                    phi.push(arr);
                }
            }
            MeasurementSpec::StateIntercept { link } => {
                let len = self.block(BlockKind::Measurement).unwrap().len;
                let b = take(len);
                let p_cov = if self.spec.has_measurement_covariates() {
                    self.dims.p_cov
                } else {
                    0
                };
                let mut pos = 0;
                for &l in &self.dims.levels {
                    let mut arr = Array3::zeros((t_len, k, l));
                    for u in 0..k {
                        let eta = &b[pos + u * (l - 1)..pos + (u + 1) * (l - 1)];
                        let p = invert_link(link.kind(), eta)?;
                        for t in 0..t_len {
                            for y in 0..l {
                                arr[(t, u, y)] = p[y];
                            }
                        }
                    }
                    pos += k * (l - 1) + p_cov * link.slopes_per_covariate(l);
                    phi.push(arr);
                }
                beta = Some(b);
            }
            MeasurementSpec::Rasch => {
                let b = take(k + t_len - 1);
                let mut arr = Array3::zeros((t_len, k, 2));
                for t in 0..t_len {
                    let psi = if t == 0 { 0.0 } else { b[k + t - 1] };
                    for u in 0..k {
                        let p1 = crate::links::rasch_probability(b[u], psi);
                        arr[(t, u, 0)] = 1.0 - p1;
                        arr[(t, u, 1)] = p1;
                    }
                }
                phi.push(arr);
                beta = Some(b);
            }
            MeasurementSpec::BivariateMarginal => {
                let p_cov = if self.spec.has_measurement_covariates() {
                    self.dims.p_cov
                } else {
                    0
                };
                let b = take(3 * k + 2 + 3 * p_cov);
                let mut joint = Array2::zeros((k, 6));
                let mut arr1 = Array3::zeros((t_len, k, 2));
                let mut arr2 = Array3::zeros((t_len, k, 3));
                for u in 0..k {
                    let eta = [b[u], b[k + u], b[2 * k + u], b[3 * k], b[3 * k + 1]];
                    let cells = bivariate_joint_from_eta(&eta)?;
                    for (c, &p) in cells.iter().enumerate() {
                        joint[(u, c)] = p;
                    }
                    for t in 0..t_len {
                        for y1 in 0..2 {
                            arr1[(t, u, y1)] = cells[y1 * 3] + cells[y1 * 3 + 1] + cells[y1 * 3 + 2];
                        }
                        for y2 in 0..3 {
                            arr2[(t, u, y2)] = cells[y2] + cells[3 + y2];
                        }
                    }
                }
                phi.push(arr1);
                phi.push(arr2);
                phi_joint = Some(joint);
                beta = Some(b);
            }
        }

        let mut params = ModelParams::from_probs(
            Array1::from_elem(k, 1.0 / k as f64),
            Vec::new(),
            phi,
        );
        params.phi_joint = phi_joint;
        params.beta = beta;

        if self.spec.is_multilevel() {
            self.unflatten_ml(&mut params, coords, &mut cursor)?;
            return Ok(params);
        }

        // initial
        match self.spec.initial {
            InitialSpec::Free => {
                if k > 1 {
                    params.pi = Array1::from_vec(self.inv_mlogit_or_prob(&take(k - 1))?);
                }
            }
            InitialSpec::Uniform => {}
            InitialSpec::CovariateLogit => {
                let len = self.block(BlockKind::Initial).unwrap().len;
                let d1 = take(len);
                params.pi = Array1::from_vec(match latent_link(&self.spec) {
                    LatentCovLink::Multinomial => invert_link(
                        LinkKind::Multinomial { reference: 0 },
                        &d1[..k - 1],
                    )?,
                    LatentCovLink::Global => {
                        invert_link(LinkKind::Global, &cuts_from_s(&d1[..k - 1]))?
                    }
                });
                params.delta1 = Some(d1);
            }
        }

        // transitions
        if t_len >= 2 {
            let eye = || {
                let mut m = Array2::zeros((k, k));
                for u in 0..k {
                    m[(u, u)] = 1.0;
                }
                m
            };
            let fill_from_row = |rows: Vec<Vec<f64>>| -> Array2<f64> {
                let mut m = Array2::zeros((k, k));
                for (u, row) in rows.into_iter().enumerate() {
                    for (v, x) in row.into_iter().enumerate() {
                        m[(u, v)] = x;
                    }
                }
                m
            };
            match self.spec.transition {
                TransitionSpec::Free => {
                    for _ in 1..t_len {
                        let mut rows = Vec::with_capacity(k);
                        for u in 0..k {
                            if k > 1 {
                                rows.push(self.inv_diag_logit_or_prob(&take(k - 1), u)?);
                            } else {
                                rows.push(vec![1.0]);
                            }
                        }
                        params.trans.push(fill_from_row(rows));
                    }
                }
                TransitionSpec::Homogeneous => {
                    let mut rows = Vec::with_capacity(k);
                    for u in 0..k {
                        if k > 1 {
                            rows.push(self.inv_diag_logit_or_prob(&take(k - 1), u)?);
                        } else {
                            rows.push(vec![1.0]);
                        }
                    }
                    let m = fill_from_row(rows);
                    params.trans = vec![m; t_len - 1];
                }
                TransitionSpec::PartiallyHomogeneous { tbar } => {
                    let mut seg = Vec::new();
                    let n_seg = if tbar == t_len { 1 } else { 2 };
                    for _ in 0..n_seg {
                        let mut rows = Vec::with_capacity(k);
                        for u in 0..k {
                            if k > 1 {
                                rows.push(self.inv_diag_logit_or_prob(&take(k - 1), u)?);
                            } else {
                                rows.push(vec![1.0]);
                            }
                        }
                        seg.push(fill_from_row(rows));
                    }
                    for t in 2..=t_len {
                        let which = if t <= tbar { 0 } else { 1 };
                        params.trans.push(seg[which].clone());
                    }
                }
                TransitionSpec::Identity => {
                    params.trans = vec![eye(); t_len - 1];
                }
                TransitionSpec::EqualOffDiagonal => {
                    let d = if k > 1 { take(1) } else { Vec::new() };
                    let dv = d.first().copied().unwrap_or(0.0);
                    let mut m = Array2::from_elem((k, k), dv);
                    for u in 0..k {
                        m[(u, u)] = 1.0 - (k as f64 - 1.0) * dv;
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta = Some(d);
                }
                TransitionSpec::Symmetric => {
                    let d = take(k * (k - 1) / 2);
                    let mut m = Array2::zeros((k, k));
                    let mut idx = 0;
                    for u in 0..k {
                        for v in u + 1..k {
                            m[(u, v)] = d[idx];
                            m[(v, u)] = d[idx];
                            idx += 1;
                        }
                    }
                    for u in 0..k {
                        let off: f64 = (0..k).filter(|&v| v != u).map(|v| m[(u, v)]).sum();
                        m[(u, u)] = 1.0 - off;
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta = Some(d);
                }
                TransitionSpec::UpperTriangular => {
                    let d = take(k * (k - 1) / 2);
                    let mut m = Array2::zeros((k, k));
                    let mut idx = 0;
                    for u in 0..k {
                        for v in u + 1..k {
                            m[(u, v)] = d[idx];
                            idx += 1;
                        }
                        let off: f64 = (u + 1..k).map(|v| m[(u, v)]).sum();
                        m[(u, u)] = 1.0 - off;
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta = Some(d);
                }
                TransitionSpec::LogitDiagonal { mask } => {
                    let cells = mask_cells(k, mask);
                    let total: usize = cells.iter().map(|c| c.len()).sum();
                    let d = take(total);
                    let mut m = Array2::zeros((k, k));
                    let mut idx = 0;
                    for u in 0..k {
                        let eta = &d[idx..idx + cells[u].len()];
                        idx += cells[u].len();
                        let p = invert_masked_diag_logit(k, u, &cells[u], eta);
                        for v in 0..k {
                            m[(u, v)] = p[v];
                        }
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta = Some(d);
                }
                TransitionSpec::LogitGlobal => {
                    let d = take(k * (k - 1));
                    let mut m = Array2::zeros((k, k));
                    for u in 0..k {
                        let s = &d[u * (k - 1)..(u + 1) * (k - 1)];
                        let p = invert_link(LinkKind::Global, &cuts_from_s(s))?;
                        for v in 0..k {
                            m[(u, v)] = p[v];
                        }
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta = Some(d);
                }
                TransitionSpec::CovariateLogit { mask } => {
                    let len = self.block(BlockKind::Transition).unwrap().len;
                    let d2 = take(len);
                    let mut m = Array2::zeros((k, k));
                    match latent_link(&self.spec) {
                        LatentCovLink::Multinomial => {
                            let cells = mask_cells(k, mask);
                            let mut idx = 0;
                            for u in 0..k {
                                let eta = &d2[idx..idx + cells[u].len()];
                                idx += cells[u].len();
                                let p = invert_masked_diag_logit(k, u, &cells[u], eta);
                                for v in 0..k {
                                    m[(u, v)] = p[v];
                                }
                            }
                        }
                        LatentCovLink::Global => {
                            for u in 0..k {
                                let s = &d2[u * (k - 1)..(u + 1) * (k - 1)];
                                let p = invert_link(LinkKind::Global, &cuts_from_s(s))?;
                                for v in 0..k {
                                    m[(u, v)] = p[v];
                                }
                            }
                        }
                    }
                    params.trans = vec![m; t_len - 1];
                    params.delta2 = Some(d2);
                }
            }
        }
        Ok(params)
    }

    fn unflatten_ml(
        &self,
        params: &mut ModelParams,
        coords: &[f64],
        cursor: &mut usize,
    ) -> Result<()> {
        let k = self.dims.k;
        let m = self.dims.m;
        let t_len = self.dims.t_len;
        let mut take = |n: usize| -> Vec<f64> {
            let s = coords[*cursor..*cursor + n].to_vec();
            *cursor += n;
            s
        };
        if self.dims.q_cluster == 0 {
            let c = take(m.saturating_sub(1));
            params.rho = Some(Array1::from_vec(if m > 1 {
                invert_link(LinkKind::Multinomial { reference: 0 }, &c)?
            } else {
                vec![1.0]
            }));
        } else {
            let g = take(self.block(BlockKind::MlMixture).unwrap().len);
            // baseline cluster (z = 0): intercepts only
            let eta: Vec<f64> = (0..m - 1).map(|w| g[w]).collect();
            params.rho = Some(Array1::from_vec(invert_link(
                LinkKind::Multinomial { reference: 0 },
                &eta,
            )?));
            params.gamma = Some(g);
        }
        let ini = take(self.block(BlockKind::MlInitial).unwrap().len);
        // baseline chain: first cluster class, zero covariates
        if k > 1 {
            let cuts = cuts_from_s(&ini[m - 1..m - 1 + k - 1]);
            params.pi = Array1::from_vec(invert_link(LinkKind::Global, &cuts)?);
        }
        params.ml_initial = Some(ini);
        if t_len > 1 {
            let tra = take(self.block(BlockKind::MlTransition).unwrap().len);
            let n_seg = if self.spec.time_varying_ml_intercepts {
                t_len - 1
            } else {
                1
            };
            let rows_off = (m - 1) * n_seg;
            let mut mat = Array2::zeros((k, k));
            for u in 0..k {
                if k > 1 {
                    let s = &tra[rows_off + u * (k - 1)..rows_off + (u + 1) * (k - 1)];
                    let p = invert_link(LinkKind::Global, &cuts_from_s(s))?;
                    for v in 0..k {
                        mat[(u, v)] = p[v];
                    }
                } else {
                    mat[(u, u)] = 1.0;
                }
            }
            params.trans = vec![mat; t_len - 1];
            params.ml_trans = Some(tra);
        }
        Ok(())
    }

    /// Human-readable label per coordinate, aligned with `flatten`.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len);
        let k = self.dims.k;
        let t_len = self.dims.t_len;
        let suffix = match self.scale {
            CoordScale::Link => "",
            CoordScale::Probability => ".prob",
        };
        match self.spec.measurement {
            MeasurementSpec::Free => {
                for (j, &l) in self.dims.levels.iter().enumerate() {
                    for t in 0..t_len {
                        for u in 0..k {
                            for y in 1..l {
                                out.push(format!("phi[{}][t={},u={},y={y}]{suffix}", j + 1, t + 1, u + 1));
                            }
                        }
                    }
                }
            }
            MeasurementSpec::TimeInvariant => {
                for (j, &l) in self.dims.levels.iter().enumerate() {
                    for u in 0..k {
                        for y in 1..l {
                            out.push(format!("phi[{}][u={},y={y}]{suffix}", j + 1, u + 1));
                        }
                    }
                }
            }
            MeasurementSpec::StateIntercept { link } => {
                let p = if self.spec.has_measurement_covariates() {
                    self.dims.p_cov
                } else {
                    0
                };
                for (j, &l) in self.dims.levels.iter().enumerate() {
                    for u in 0..k {
                        for c in 1..l {
                            out.push(format!("beta[{}][u={},cut={c}]", j + 1, u + 1));
                        }
                    }
                    let reps = link.slopes_per_covariate(l);
                    for rep in 0..reps {
                        for col in 0..p {
                            out.push(format!("beta[{}][slope={},col={}]", j + 1, rep + 1, col + 1));
                        }
                    }
                }
            }
            MeasurementSpec::Rasch => {
                for u in 0..k {
                    out.push(format!("xi[{}]", u + 1));
                }
                for t in 1..t_len {
                    out.push(format!("psi[{}]", t + 1));
                }
            }
            MeasurementSpec::BivariateMarginal => {
                for name in ["xi1", "xi2", "xi3"] {
                    for u in 0..k {
                        out.push(format!("{name}[{}]", u + 1));
                    }
                }
                out.push("beta4".into());
                out.push("beta5".into());
                if self.spec.has_measurement_covariates() {
                    for name in ["beta1", "beta2", "beta3"] {
                        for col in 0..self.dims.p_cov {
                            out.push(format!("{name}[col={}]", col + 1));
                        }
                    }
                }
            }
        }
        if self.spec.is_multilevel() {
            let m = self.dims.m;
            if self.dims.q_cluster == 0 {
                for w in 1..m {
                    out.push(format!("rho[{}].logit", w + 1));
                }
            } else {
                for w in 1..m {
                    out.push(format!("gamma0[{}]", w + 1));
                }
                for w in 1..m {
                    for q in 0..self.dims.q_cluster {
                        out.push(format!("gamma1[{},col={}]", w + 1, q + 1));
                    }
                }
            }
            for w in 1..m {
                out.push(format!("delta0[{}]", w + 1));
            }
            for c in 1..k {
                out.push(format!("delta1[cut={}].s", c + 1));
            }
            for col in 0..self.dims.p_cov {
                out.push(format!("delta2[col={}]", col + 1));
            }
            if t_len > 1 {
                let n_seg = if self.spec.time_varying_ml_intercepts {
                    t_len - 1
                } else {
                    1
                };
                for w in 1..m {
                    for seg in 0..n_seg {
                        if n_seg == 1 {
                            out.push(format!("eta0[{}]", w + 1));
                        } else {
                            out.push(format!("eta0[{},t={}]", w + 1, seg + 2));
                        }
                    }
                }
                for u in 0..k {
                    for c in 1..k {
                        out.push(format!("eta1[u={},cut={}].s", u + 1, c + 1));
                    }
                }
                for col in 0..self.dims.p_cov {
                    out.push(format!("eta2[col={}]", col + 1));
                }
            }
            return out;
        }
        match self.spec.initial {
            InitialSpec::Free => {
                for u in 1..k {
                    out.push(format!("pi[{}]{}", u + 1, if suffix.is_empty() { ".logit" } else { suffix }));
                }
            }
            InitialSpec::Uniform => {}
            InitialSpec::CovariateLogit => match latent_link(&self.spec) {
                LatentCovLink::Multinomial => {
                    for u in 1..k {
                        out.push(format!("delta1.int[{}]", u + 1));
                    }
                    for u in 1..k {
                        for col in 0..self.dims.p_cov {
                            out.push(format!("delta1.slope[{},col={}]", u + 1, col + 1));
                        }
                    }
                }
                LatentCovLink::Global => {
                    for c in 1..k {
                        out.push(format!("delta1.cut[{}].s", c + 1));
                    }
                    for col in 0..self.dims.p_cov {
                        out.push(format!("delta1.slope[col={}]", col + 1));
                    }
                }
            },
        }
        if t_len > 1 {
            let trans_label = |t: Option<usize>, u: usize, v: usize| -> String {
                match t {
                    Some(t) => format!("trans[t={t}][u={},v={}]{suffix}", u + 1, v + 1),
                    None => format!("trans[u={},v={}]{suffix}", u + 1, v + 1),
                }
            };
            match self.spec.transition {
                TransitionSpec::Free => {
                    for t in 2..=t_len {
                        for u in 0..k {
                            for v in 0..k {
                                if v != u {
                                    out.push(trans_label(Some(t), u, v));
                                }
                            }
                        }
                    }
                }
                TransitionSpec::Homogeneous => {
                    for u in 0..k {
                        for v in 0..k {
                            if v != u {
                                out.push(trans_label(None, u, v));
                            }
                        }
                    }
                }
                TransitionSpec::PartiallyHomogeneous { tbar } => {
                    let n_seg = if tbar == t_len { 1 } else { 2 };
                    for seg in 0..n_seg {
                        for u in 0..k {
                            for v in 0..k {
                                if v != u {
                                    out.push(format!(
                                        "trans.seg{}[u={},v={}]{suffix}",
                                        seg + 1,
                                        u + 1,
                                        v + 1
                                    ));
                                }
                            }
                        }
                    }
                }
                TransitionSpec::Identity => {}
                TransitionSpec::EqualOffDiagonal => {
                    if k > 1 {
                        out.push("delta".into());
                    }
                }
                TransitionSpec::Symmetric | TransitionSpec::UpperTriangular => {
                    for u in 0..k {
                        for v in u + 1..k {
                            out.push(format!("delta[u={},v={}]", u + 1, v + 1));
                        }
                    }
                }
                TransitionSpec::LogitDiagonal { mask } => {
                    for (u, row) in mask_cells(k, mask).iter().enumerate() {
                        for &v in row {
                            out.push(format!("delta[u={},v={}].logit", u + 1, v + 1));
                        }
                    }
                }
                TransitionSpec::LogitGlobal => {
                    for u in 0..k {
                        for c in 1..k {
                            out.push(format!("delta[u={},cut={}].s", u + 1, c + 1));
                        }
                    }
                }
                TransitionSpec::CovariateLogit { mask } => match latent_link(&self.spec) {
                    LatentCovLink::Multinomial => {
                        for (u, row) in mask_cells(k, mask).iter().enumerate() {
                            for &v in row {
                                out.push(format!("delta2.int[u={},v={}]", u + 1, v + 1));
                            }
                        }
                        for col in 0..self.dims.p_cov {
                            out.push(format!("delta2.slope[col={}]", col + 1));
                        }
                    }
                    LatentCovLink::Global => {
                        for u in 0..k {
                            for c in 1..k {
                                out.push(format!("delta2.cut[u={},cut={}].s", u + 1, c + 1));
                            }
                        }
                        for col in 0..self.dims.p_cov {
                            out.push(format!("delta2.slope[col={}]", col + 1));
                        }
                    }
                },
            }
        }
        out
    }
}

/// Invert diagonal-reference logits over a masked row: free cells carry the
/// softmax weights, structurally-zero cells stay exactly 0.
pub fn invert_masked_diag_logit(k: usize, u: usize, cells: &[usize], eta: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; k];
    w[u] = 1.0;
    let mut z = 1.0;
    for (idx, &v) in cells.iter().enumerate() {
        let e = eta[idx].exp();
        w[v] = e;
        z += e;
    }
    w.iter().map(|&x| x / z).collect()
}

/// Number of non-redundant parameters of a spec at given dimensions.
pub fn count_free_parameters(spec: &ModelSpec, dims: &Dims) -> Result<usize> {
    Chart::new(spec, dims).map(|c| c.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dims(spec: &ModelSpec, t_len: usize, levels: &[usize]) -> Dims {
        Dims::new(spec, t_len, levels)
    }

    #[test]
    fn free_parameter_counts_match_closed_forms() {
        // unconstrained univariate: (k-1) + (T-1)k(k-1) + Tk(l-1)
        let spec = ModelSpec::basic(3);
        let d = dims(&spec, 5, &[3]);
        assert_eq!(count_free_parameters(&spec, &d).unwrap(), 2 + 24 + 30);

        // homogeneity + time-invariance: (k-1) + k(k-1) + k(l-1)
        let mut spec_c = ModelSpec::basic(3);
        spec_c.measurement = MeasurementSpec::TimeInvariant;
        spec_c.transition = TransitionSpec::Homogeneous;
        assert_eq!(count_free_parameters(&spec_c, &d).unwrap(), 2 + 6 + 6);
    }

    #[test]
    fn rasch_count_and_lr_df() {
        let mut spec = ModelSpec::basic(3);
        spec.measurement = MeasurementSpec::Rasch;
        let d = dims(&spec, 5, &[2]);
        let chart = Chart::new(&spec, &d).unwrap();
        let meas = chart.block(BlockKind::Measurement).unwrap();
        // T + (k - 1) measurement parameters with psi_1 = 0
        assert_eq!(meas.len, 7);
        // LR df against free time-varying measurement: kT - [T + (k-1)] = 8
        let free = ModelSpec::basic(3);
        let free_chart = Chart::new(&free, &dims(&free, 5, &[2])).unwrap();
        let free_meas = free_chart.block(BlockKind::Measurement).unwrap();
        assert_eq!(free_meas.len - meas.len, 8);
    }

    #[test]
    fn chart_round_trips_basic_params() {
        use ndarray::array;
        let spec = ModelSpec::basic(2);
        let d = dims(&spec, 3, &[2]);
        let chart = Chart::new(&spec, &d).unwrap();
        let phi = Array3::from_shape_vec(
            (3, 2, 2),
            vec![0.9, 0.1, 0.2, 0.8, 0.85, 0.15, 0.25, 0.75, 0.7, 0.3, 0.4, 0.6],
        )
        .unwrap();
        let params = ModelParams::from_probs(
            array![0.3, 0.7],
            vec![array![[0.8, 0.2], [0.3, 0.7]], array![[0.6, 0.4], [0.1, 0.9]]],
            vec![phi],
        );
        let coords = chart.flatten(&params).unwrap();
        assert_eq!(coords.len(), chart.len());
        let back = chart.unflatten(&coords).unwrap();
        assert_relative_eq!(back.pi[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(back.trans[1][(1, 1)], 0.9, epsilon = 1e-12);
        assert_relative_eq!(back.phi[0][(2, 1, 0)], 0.4, epsilon = 1e-12);
        let coords2 = chart.flatten(&back).unwrap();
        for (a, b) in coords.iter().zip(&coords2) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn chart_round_trips_structural_specs() {
        let mut spec = ModelSpec::basic(3);
        spec.measurement = MeasurementSpec::TimeInvariant;
        spec.transition = TransitionSpec::LogitGlobal;
        let d = dims(&spec, 4, &[3]);
        let chart = Chart::new(&spec, &d).unwrap();
        let mut coords: Vec<f64> = (0..chart.len())
            .map(|i| 0.3 * ((i as f64 * 0.7).sin()))
            .collect();
        // make the chart exercise nontrivial values
        coords[0] = -0.9;
        let params = chart.unflatten(&coords).unwrap();
        let report = crate::params::validate_params(&params, &spec);
        assert!(report.is_valid(), "{:?}", report.violations);
        let coords2 = chart.flatten(&params).unwrap();
        for (a, b) in coords.iter().zip(&coords2) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn tridiagonal_mask_has_structural_zeros() {
        let mut spec = ModelSpec::basic(4);
        spec.transition = TransitionSpec::LogitDiagonal {
            mask: Some(crate::params::TransitionMask::Tridiagonal),
        };
        let d = dims(&spec, 3, &[2]);
        let chart = Chart::new(&spec, &d).unwrap();
        // 1 + 2 + 2 + 1 free logits
        assert_eq!(chart.block(BlockKind::Transition).unwrap().len, 6);
        let coords = vec![0.1; chart.len()];
        let params = chart.unflatten(&coords).unwrap();
        let m = &params.trans[0];
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(0, 3)], 0.0);
        assert_eq!(m[(3, 0)], 0.0);
        for u in 0..4 {
            assert_relative_eq!(m.row(u).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cuts_reparameterization_round_trip() {
        let s = vec![0.8, -0.3, 0.5];
        let cuts = cuts_from_s(&s);
        assert!(cuts[0] > cuts[1] && cuts[1] > cuts[2]);
        let s2 = s_from_cuts(&cuts).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert!(s_from_cuts(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn builtin_pairs_have_consistent_df() {
        // the free spec dominates every built-in constrained spec, and the
        // difference of parameter counts is the LR df for nested pairs
        let free = ModelSpec::basic(3);
        let d = dims(&free, 5, &[2]);
        let g_free = count_free_parameters(&free, &d).unwrap();
        for (name, spec) in crate::params::builtin_constraint_specs(3, 3) {
            let g = count_free_parameters(&spec, &d).unwrap();
            assert!(g <= g_free, "{name}: {g} > {g_free}");
        }
        // known chain values at k = 3, T = 5, binary
        let g_of = |t: TransitionSpec| -> usize {
            let mut s = ModelSpec::basic(3);
            s.measurement = MeasurementSpec::TimeInvariant;
            s.transition = t;
            count_free_parameters(&s, &d).unwrap()
        };
        let base = 3 + 2; // time-invariant measurement + initial
        assert_eq!(g_of(TransitionSpec::Identity), base);
        assert_eq!(g_of(TransitionSpec::EqualOffDiagonal), base + 1);
        assert_eq!(g_of(TransitionSpec::Symmetric), base + 3);
        assert_eq!(g_of(TransitionSpec::UpperTriangular), base + 3);
        assert_eq!(g_of(TransitionSpec::Homogeneous), base + 6);
        assert_eq!(g_of(TransitionSpec::LogitGlobal), base + 6);
        assert_eq!(
            g_of(TransitionSpec::PartiallyHomogeneous { tbar: 3 }),
            base + 12
        );
        assert_eq!(g_of(TransitionSpec::Free), base + 24);
        // nested-pair dfs follow by subtraction, e.g. homogeneity against
        // the equal-off-diagonal null tests 5 constraints
        assert_eq!(
            g_of(TransitionSpec::Homogeneous) - g_of(TransitionSpec::EqualOffDiagonal),
            5
        );
    }

    #[test]
    fn labels_align_with_length() {
        for (name, spec) in crate::params::builtin_constraint_specs(3, 3) {
            let d = dims(&spec, 4, &[2]);
            let chart = Chart::new(&spec, &d).unwrap();
            assert_eq!(chart.labels().len(), chart.len(), "{name}");
        }
    }
}
