//! Cross-module behavior: the EM-identity score against finite differences
//! of the log-likelihood for every spec family, nesting reductions between
//! related specs, and normalization of subject-specific manifest
//! distributions.

use lamark::coords::{Chart, CoordScale};
use lamark::data::{simulate_panel, PanelDataset, SimulateOptions};
use lamark::em::{self, fit, start, DataRef, FitOptions};
use lamark::inference::em_score;
use lamark::params::{
    CovariatePlacement, CovariateSpec, Dims, InitialSpec, LatentCovLink, MeasurementSpec,
    ModelSpec, TransitionMask, TransitionSpec,
};
use ndarray::Array3;

fn covariate_values(n: usize, t_len: usize) -> (Array3<f64>, Vec<String>) {
    let mut x = Array3::zeros((n, t_len, 1));
    for i in 0..n {
        for t in 0..t_len {
            x[(i, t, 0)] = ((i % 5) as f64 - 2.0) / 2.0 + 0.1 * t as f64;
        }
    }
    (x, vec!["x1".into()])
}

/// Simulate a small panel from the spec itself, using a seeded random start
/// as the generating parameter value.
fn small_panel(spec: &ModelSpec, n: usize, t_len: usize, levels: &[usize], seed: u64) -> PanelDataset {
    let dims = Dims::new(spec, t_len, levels);
    let truth = start::random_start(spec, &dims, seed, 0).unwrap();
    let covariates = if spec.covariates.columns.is_empty() && spec.cluster_covariates.is_empty() {
        None
    } else {
        Some(covariate_values(n, t_len))
    };
    let cluster_sizes = if spec.is_multilevel() {
        Some(vec![3; n / 3])
    } else {
        None
    };
    simulate_panel(&SimulateOptions {
        spec,
        params: &truth,
        n,
        seed: seed + 1,
        covariates,
        cluster_sizes,
    })
    .unwrap()
    .data
}

fn check_score_matches_fd(name: &str, spec: &ModelSpec, data: &PanelDataset, seed: u64) {
    let dims = Dims::new(spec, data.t_len, &data.levels);
    let chart = Chart::new(spec, &dims).unwrap();
    let theta = chart
        .flatten(&start::random_start(spec, &dims, seed, 2).unwrap())
        .unwrap();
    let params = chart.unflatten(&theta).unwrap();
    let score = em_score(&params, spec, &dims, DataRef::Panel(data), CoordScale::Link)
        .unwrap_or_else(|e| panic!("{name}: score failed: {e}"));
    let h = 1e-5;
    for j in 0..theta.len() {
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        let lu = em::loglik(
            &chart.unflatten(&up).unwrap(),
            spec,
            &dims,
            DataRef::Panel(data),
        )
        .unwrap();
        let ld = em::loglik(
            &chart.unflatten(&dn).unwrap(),
            spec,
            &dims,
            DataRef::Panel(data),
        )
        .unwrap();
        let fd = (lu - ld) / (2.0 * h);
        let tol = 1e-6 * fd.abs().max(1.0);
        assert!(
            (score[j] - fd).abs() <= tol,
            "{name}: coordinate {j} ({}): score {} vs fd {}",
            chart.labels()[j],
            score[j],
            fd
        );
    }
}

#[test]
fn score_matches_fd_basic() {
    let spec = ModelSpec::basic(2);
    let data = small_panel(&spec, 14, 3, &[2], 100);
    check_score_matches_fd("basic", &spec, &data, 100);
}

#[test]
fn score_matches_fd_rasch() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::Rasch;
    spec.transition = TransitionSpec::Homogeneous;
    let data = small_panel(&spec, 14, 4, &[2], 101);
    check_score_matches_fd("rasch", &spec, &data, 101);
}

#[test]
fn score_matches_fd_homogeneous() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.transition = TransitionSpec::Homogeneous;
    let data = small_panel(&spec, 14, 4, &[3], 102);
    check_score_matches_fd("homogeneous", &spec, &data, 102);
}

#[test]
fn score_matches_fd_tridiagonal() {
    let mut spec = ModelSpec::basic(3);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.transition = TransitionSpec::LogitDiagonal {
        mask: Some(TransitionMask::Tridiagonal),
    };
    let data = small_panel(&spec, 16, 3, &[2], 103);
    check_score_matches_fd("tridiagonal", &spec, &data, 103);
}

#[test]
fn score_matches_fd_logit_global_and_linear() {
    let mut spec = ModelSpec::basic(3);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.transition = TransitionSpec::LogitGlobal;
    let data = small_panel(&spec, 16, 3, &[2], 104);
    check_score_matches_fd("logit_global", &spec, &data, 104);

    let mut spec2 = ModelSpec::basic(3);
    spec2.measurement = MeasurementSpec::TimeInvariant;
    spec2.transition = TransitionSpec::EqualOffDiagonal;
    let data2 = small_panel(&spec2, 16, 3, &[2], 105);
    check_score_matches_fd("equal_off_diagonal", &spec2, &data2, 105);
}

#[test]
fn score_matches_fd_state_intercept_links() {
    for link in [
        lamark::params::LinkFamily::Multinomial,
        lamark::params::LinkFamily::Global,
        lamark::params::LinkFamily::Continuation,
    ] {
        let mut spec = ModelSpec::basic(2);
        spec.measurement = MeasurementSpec::StateIntercept { link };
        spec.transition = TransitionSpec::Homogeneous;
        let data = small_panel(&spec, 14, 3, &[3], 106);
        check_score_matches_fd("state_intercept", &spec, &data, 106);
    }
}

#[test]
fn score_matches_fd_covariate_measurement() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::StateIntercept {
        link: lamark::params::LinkFamily::Logit,
    };
    spec.transition = TransitionSpec::Homogeneous;
    spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Measurement,
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&spec, 12, 3, &[2], 107);
    check_score_matches_fd("covariate_measurement", &spec, &data, 107);
}

#[test]
fn score_matches_fd_covariate_latent() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.initial = InitialSpec::CovariateLogit;
    spec.transition = TransitionSpec::CovariateLogit { mask: None };
    spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Multinomial,
        },
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&spec, 12, 3, &[2], 108);
    check_score_matches_fd("covariate_latent_multinomial", &spec, &data, 108);

    let mut spec_g = spec.clone();
    spec_g.covariates.placement = CovariatePlacement::Latent {
        link: LatentCovLink::Global,
    };
    let data_g = small_panel(&spec_g, 12, 3, &[2], 109);
    check_score_matches_fd("covariate_latent_global", &spec_g, &data_g, 109);
}

#[test]
fn score_matches_fd_covariate_latent_with_lags() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.initial = InitialSpec::CovariateLogit;
    spec.transition = TransitionSpec::CovariateLogit { mask: None };
    spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Multinomial,
        },
        columns: vec!["x1".into()],
        lags: 1,
    };
    let data = small_panel(&spec, 12, 3, &[2], 110);
    check_score_matches_fd("covariate_latent_lagged", &spec, &data, 110);
}

#[test]
fn score_matches_fd_bivariate() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::BivariateMarginal;
    spec.transition = TransitionSpec::Homogeneous;
    let data = small_panel(&spec, 14, 2, &[2, 3], 111);
    check_score_matches_fd("bivariate", &spec, &data, 111);
}

#[test]
fn score_matches_fd_multilevel() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.m = Some(2);
    let data = small_panel(&spec, 12, 3, &[2], 112);
    check_score_matches_fd("multilevel", &spec, &data, 112);

    // with individual covariates
    let mut spec_cov = spec.clone();
    spec_cov.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Global,
        },
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data_cov = small_panel(&spec_cov, 12, 3, &[2], 113);
    check_score_matches_fd("multilevel_covariate", &spec_cov, &data_cov, 113);
}

#[test]
fn score_vanishes_at_the_optimum() {
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::TimeInvariant;
    spec.transition = TransitionSpec::Homogeneous;
    let data = small_panel(&spec, 250, 4, &[2], 114);
    // drive EM to a tight optimum so the first-order condition is visible
    let res = fit(
        &data,
        &spec,
        &FitOptions {
            starts: 2,
            tol_loglik: 1e-13,
            tol_param: 1e-9,
            max_iter: 20_000,
            ..Default::default()
        },
    )
    .unwrap();
    let dims = Dims::new(&spec, 4, &[2]);
    let s = em_score(
        &res.params,
        &spec,
        &dims,
        DataRef::Panel(&data),
        CoordScale::Link,
    )
    .unwrap();
    let max = s.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    assert!(max < 1e-5, "score at optimum too large: {max}");
}

#[test]
fn bernoulli_closed_form_score() {
    // k = 1, T = 1, binary: on the logit coordinate s = n (ybar - phi1)
    let spec = ModelSpec::basic(1);
    let mut resp = Array3::zeros((10, 1, 1));
    for i in 0..4 {
        resp[(i, 0, 0)] = 1;
    }
    let data = PanelDataset::new(resp, vec![2]).unwrap();
    let dims = Dims::new(&spec, 1, &[2]);
    let chart = Chart::new(&spec, &dims).unwrap();
    let phi1 = 0.55_f64;
    let theta = vec![(phi1 / (1.0 - phi1)).ln()];
    let params = chart.unflatten(&theta).unwrap();
    let s = em_score(&params, &spec, &dims, DataRef::Panel(&data), CoordScale::Link).unwrap();
    // d l / d eta = sum_i (y_i - phi1)
    let expect = 10.0 * (0.4 - phi1);
    assert!((s[0] - expect).abs() < 1e-10, "{} vs {expect}", s[0]);
}

// --- nesting reductions -------------------------------------------------------

fn loglik_of(spec: &ModelSpec, params: &lamark::params::ModelParams, data: &PanelDataset) -> f64 {
    let dims = Dims::new(spec, data.t_len, &data.levels);
    em::loglik(params, spec, &dims, DataRef::Panel(data)).unwrap()
}

#[test]
fn zero_slope_measurement_covariates_reduce_to_state_intercepts() {
    let link = lamark::params::LinkFamily::Logit;
    let mut cov_spec = ModelSpec::basic(2);
    cov_spec.measurement = MeasurementSpec::StateIntercept { link };
    cov_spec.transition = TransitionSpec::Homogeneous;
    cov_spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Measurement,
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&cov_spec, 20, 3, &[2], 115);

    let mut plain_spec = cov_spec.clone();
    plain_spec.covariates = CovariateSpec::default();
    let plain_data = {
        let mut d = data.clone();
        d.covariates = None;
        d.covariate_names.clear();
        d
    };

    let dims_cov = Dims::new(&cov_spec, 3, &[2]);
    let chart_cov = Chart::new(&cov_spec, &dims_cov).unwrap();
    let dims_plain = Dims::new(&plain_spec, 3, &[2]);
    let chart_plain = Chart::new(&plain_spec, &dims_plain).unwrap();

    // shared intercepts, zero slopes
    let intercepts = [-0.8, 0.9];
    let trans_coords = [-1.4, -1.1];
    let mut cov_coords = vec![intercepts[0], intercepts[1], 0.0];
    cov_coords.extend([0.4, trans_coords[0], trans_coords[1]]);
    let mut plain_coords = vec![intercepts[0], intercepts[1]];
    plain_coords.extend([0.4, trans_coords[0], trans_coords[1]]);

    let p_cov = chart_cov.unflatten(&cov_coords).unwrap();
    let p_plain = chart_plain.unflatten(&plain_coords).unwrap();
    let l_cov = loglik_of(&cov_spec, &p_cov, &data);
    let l_plain = loglik_of(&plain_spec, &p_plain, &plain_data);
    assert!(
        (l_cov - l_plain).abs() < 1e-10,
        "covariate {l_cov} vs plain {l_plain}"
    );
}

#[test]
fn zero_slope_latent_covariates_reduce_to_logit_spec() {
    let mut cov_spec = ModelSpec::basic(2);
    cov_spec.measurement = MeasurementSpec::TimeInvariant;
    cov_spec.initial = InitialSpec::CovariateLogit;
    cov_spec.transition = TransitionSpec::CovariateLogit { mask: None };
    cov_spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Multinomial,
        },
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&cov_spec, 20, 3, &[2], 116);

    let mut plain_spec = ModelSpec::basic(2);
    plain_spec.measurement = MeasurementSpec::TimeInvariant;
    plain_spec.initial = InitialSpec::Free;
    plain_spec.transition = TransitionSpec::LogitDiagonal { mask: None };
    let plain_data = {
        let mut d = data.clone();
        d.covariates = None;
        d.covariate_names.clear();
        d
    };

    let meas = [-1.1, 1.3];
    let init_logit = [0.35];
    let trans_logits = [-1.2, -0.7];
    let dims_cov = Dims::new(&cov_spec, 3, &[2]);
    let chart_cov = Chart::new(&cov_spec, &dims_cov).unwrap();
    // layout: meas, [init int, init slopes], [trans ints, trans slope]
    let cov_coords = vec![
        meas[0],
        meas[1],
        init_logit[0],
        0.0,
        trans_logits[0],
        trans_logits[1],
        0.0,
    ];
    let p_cov = chart_cov.unflatten(&cov_coords).unwrap();

    let dims_plain = Dims::new(&plain_spec, 3, &[2]);
    let chart_plain = Chart::new(&plain_spec, &dims_plain).unwrap();
    let plain_coords = vec![meas[0], meas[1], init_logit[0], trans_logits[0], trans_logits[1]];
    let p_plain = chart_plain.unflatten(&plain_coords).unwrap();

    let l_cov = loglik_of(&cov_spec, &p_cov, &data);
    let l_plain = loglik_of(&plain_spec, &p_plain, &plain_data);
    assert!(
        (l_cov - l_plain).abs() < 1e-10,
        "covariate {l_cov} vs plain {l_plain}"
    );
}

#[test]
fn single_class_multilevel_reduces_to_covariate_latent_global() {
    let mut ml_spec = ModelSpec::basic(2);
    ml_spec.measurement = MeasurementSpec::TimeInvariant;
    ml_spec.m = Some(1);
    ml_spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Global,
        },
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&ml_spec, 12, 3, &[2], 117);

    let mut single_spec = ml_spec.clone();
    single_spec.m = None;
    single_spec.initial = InitialSpec::CovariateLogit;
    single_spec.transition = TransitionSpec::CovariateLogit { mask: None };
    let mut single_data = data.clone();
    single_data.cluster = None;
    single_data.cluster_labels.clear();

    let meas = [-1.0, 1.2];
    let ini = [0.3, 0.15];
    let row_cuts = [-0.9, 0.8];
    let slope = [0.25];

    let dims_ml = Dims::new(&ml_spec, 3, &[2]);
    let chart_ml = Chart::new(&ml_spec, &dims_ml).unwrap();
    // [meas | mixture(0) | delta0(0) cuts slopes | eta0(0) row_cuts slopes]
    let ml_coords = vec![
        meas[0], meas[1], ini[0], slope[0], row_cuts[0], row_cuts[1], ini[1],
    ];
    assert_eq!(chart_ml.len(), ml_coords.len());
    let p_ml = chart_ml.unflatten(&ml_coords).unwrap();

    let dims_single = Dims::new(&single_spec, 3, &[2]);
    let chart_single = Chart::new(&single_spec, &dims_single).unwrap();
    // [meas | init cuts + slopes | trans row cuts + slopes]
    let single_coords = vec![
        meas[0], meas[1], ini[0], slope[0], row_cuts[0], row_cuts[1], ini[1],
    ];
    assert_eq!(chart_single.len(), single_coords.len());
    let p_single = chart_single.unflatten(&single_coords).unwrap();

    let l_ml = loglik_of(&ml_spec, &p_ml, &data);
    let l_single = loglik_of(&single_spec, &p_single, &single_data);
    assert!(
        (l_ml - l_single).abs() < 1e-10,
        "multilevel {l_ml} vs single {l_single}"
    );
}

#[test]
fn homogeneous_params_evaluate_identically_under_free_spec() {
    let mut homog = ModelSpec::basic(2);
    homog.measurement = MeasurementSpec::TimeInvariant;
    homog.transition = TransitionSpec::Homogeneous;
    let data = small_panel(&homog, 30, 4, &[2], 118);
    let dims = Dims::new(&homog, 4, &[2]);
    let params = start::random_start(&homog, &dims, 9, 1).unwrap();
    let free = ModelSpec::basic(2);
    let l_h = loglik_of(&homog, &params, &data);
    let l_f = loglik_of(&free, &params, &data);
    assert!((l_h - l_f).abs() < 1e-12);
}

#[test]
fn subject_manifest_distributions_normalize() {
    // per-subject manifest probabilities sum to one over every pattern
    let mut spec = ModelSpec::basic(2);
    spec.measurement = MeasurementSpec::StateIntercept {
        link: lamark::params::LinkFamily::Logit,
    };
    spec.transition = TransitionSpec::Homogeneous;
    spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Measurement,
        columns: vec!["x1".into()],
        lags: 0,
    };
    let t_len = 2;
    let data = small_panel(&spec, 6, t_len, &[2], 119);
    let dims = Dims::new(&spec, t_len, &[2]);
    let params = start::random_start(&spec, &dims, 21, 0).unwrap();
    for i in 0..data.n {
        let mut total = 0.0;
        for code in 0..(1 << t_len) {
            let mut resp = Array3::zeros((1, t_len, 1));
            for t in 0..t_len {
                resp[(0, t, 0)] = (code >> t) & 1;
            }
            let mut one = PanelDataset::new(resp, vec![2]).unwrap();
            let x = data.covariates.as_ref().unwrap();
            let mut xi = Array3::zeros((1, t_len, 1));
            for t in 0..t_len {
                xi[(0, t, 0)] = x[(i, t, 0)];
            }
            one = one.with_covariates(xi, vec!["x1".into()]).unwrap();
            let ll = em::loglik(&params, &spec, &dims, DataRef::Panel(&one)).unwrap();
            total += ll.exp();
        }
        assert!((total - 1.0).abs() < 1e-10, "subject {i}: mass {total}");
    }
}

#[test]
fn covariate_and_multilevel_fits_pass_validation() {
    // closure under estimation for the families that Fisher scoring updates
    let mut cov_spec = ModelSpec::basic(2);
    cov_spec.measurement = MeasurementSpec::TimeInvariant;
    cov_spec.initial = InitialSpec::CovariateLogit;
    cov_spec.transition = TransitionSpec::CovariateLogit { mask: None };
    cov_spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Latent {
            link: LatentCovLink::Multinomial,
        },
        columns: vec!["x1".into()],
        lags: 0,
    };
    let data = small_panel(&cov_spec, 40, 3, &[2], 220);
    let res = fit(
        &data,
        &cov_spec,
        &FitOptions { starts: 1, max_iter: 150, ..Default::default() },
    )
    .unwrap();
    let report = lamark::params::validate_params(&res.params, &cov_spec);
    assert!(report.is_valid(), "{:?}", report.violations);

    let mut ml_spec = ModelSpec::basic(2);
    ml_spec.measurement = MeasurementSpec::TimeInvariant;
    ml_spec.m = Some(2);
    let ml_data = small_panel(&ml_spec, 30, 3, &[2], 221);
    let res = fit(
        &ml_data,
        &ml_spec,
        &FitOptions { starts: 1, max_iter: 150, ..Default::default() },
    )
    .unwrap();
    let report = lamark::params::validate_params(&res.params, &ml_spec);
    assert!(report.is_valid(), "{:?}", report.violations);
}

#[test]
fn aliased_design_reports_singular_information() {
    // duplicating a covariate column aliases its two coefficients
    let mut spec = ModelSpec::basic(1);
    spec.measurement = MeasurementSpec::StateIntercept {
        link: lamark::params::LinkFamily::Logit,
    };
    spec.covariates = CovariateSpec {
        placement: CovariatePlacement::Measurement,
        columns: vec!["x1".into(), "x2".into()],
        lags: 0,
    };
    let n = 12;
    let t_len = 2;
    let mut resp = Array3::zeros((n, t_len, 1));
    for i in 0..n {
        resp[(i, 0, 0)] = i % 2;
        resp[(i, 1, 0)] = (i / 2) % 2;
    }
    let mut x = Array3::zeros((n, t_len, 2));
    for i in 0..n {
        for t in 0..t_len {
            let v = (i % 4) as f64;
            x[(i, t, 0)] = v;
            x[(i, t, 1)] = v;
        }
    }
    let data = PanelDataset::new(resp, vec![2])
        .unwrap()
        .with_covariates(x, vec!["x1".into(), "x2".into()])
        .unwrap();
    let dims = Dims::new(&spec, t_len, &[2]);
    let params = start::random_start(&spec, &dims, 3, 0).unwrap();
    let report = lamark::inference::observed_information(
        &params,
        &spec,
        &dims,
        DataRef::Panel(&data),
        CoordScale::Link,
        lamark::inference::StepPolicy::default(),
    )
    .unwrap();
    assert!(!report.locally_identifiable);
    assert!(report.rank < 3);
    assert!(report.standard_errors.is_none());
}
