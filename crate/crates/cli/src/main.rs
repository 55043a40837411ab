//! `lamark` — fit, test, select and decode latent Markov models for
//! longitudinal categorical data.
//!
//! Subcommands: `fit`, `simulate`, `decode`, `select`, `lrtest`, `describe`.
//! Exit codes: 0 success, 1 input error, 2 non-convergence (results are
//! still written with the flag set).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lamark::coords::CoordScale;
use lamark::data::{load_panel, simulate_panel, write_panel, PanelDataset, SimulateOptions};
use lamark::em::{fit, DataRef};
use lamark::inference::{lr_test, observed_information, NullDistribution, StepPolicy};
use lamark::params::{
    Dims, InitialSpec, MeasurementSpec, ModelSpec, TransitionSpec,
};

use lamark_cli::config::{self, RunConfig};
use lamark_cli::report::Report;

#[derive(Parser)]
#[command(name = "lamark", version, about = "Latent Markov models for longitudinal categorical data")]
struct Cli {
    /// Worker threads (overrides the LAMARK_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    /// Hierarchical TOML report.
    Report,
    /// TOML report plus a flat CSV table of the estimates.
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum NullKind {
    /// Chi-squared with df from the parameter-count difference.
    Chisq,
    /// 50:50 mixture of a point mass at zero and chi-squared(1).
    Chibar,
    /// Chi-bar weights estimated by Monte Carlo cone projection.
    ChibarMc,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a report with estimates and standard errors.
    Fit(FitArgs),
    /// Draw a synthetic panel from fitted or specified parameters.
    Simulate(SimulateArgs),
    /// Predict latent paths (global and per-occasion) for every subject.
    Decode(DecodeArgs),
    /// Fit a range of state counts and tabulate AIC/BIC.
    Select(SelectArgs),
    /// Likelihood-ratio test between two fitted reports.
    Lrtest(LrtestArgs),
    /// Summarize a dataset.
    Describe(DescribeArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV/TSV panel.
    #[arg(long)]
    data: PathBuf,
    /// Model configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured number of random starts.
    #[arg(long)]
    starts: Option<usize>,
    /// Override the configured latent-state count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "report")]
    format: OutputFormat,
    /// Skip the observed-information pass (no standard errors).
    #[arg(long)]
    no_se: bool,
    /// Also export per-subject posterior state probabilities as CSV.
    #[arg(long)]
    export_posteriors: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Fitted report supplying the parameters.
    #[arg(long)]
    params: PathBuf,
    /// Number of subjects (ignored with --clusters or --covariates-from).
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cluster sizes, either comma-separated or `HxSIZE`.
    #[arg(long)]
    clusters: Option<String>,
    /// Panel whose covariate values (and clustering) the simulation reuses.
    #[arg(long)]
    covariates_from: Option<PathBuf>,
    /// Config for reading --covariates-from (defaults to conventional roles).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Config for the data schema (defaults to conventional roles).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Range of latent-state counts, e.g. `1..4` or `2`.
    #[arg(long, value_name = "LO..HI")]
    k_range: String,
    /// Range of cluster-class counts for multilevel selection.
    #[arg(long)]
    m_range: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "report")]
    format: OutputFormat,
}

#[derive(Args)]
struct LrtestArgs {
    /// Report of the unconstrained model.
    #[arg(long)]
    full: PathBuf,
    /// Report of the constrained model.
    #[arg(long)]
    constrained: PathBuf,
    #[arg(long, value_enum, default_value = "chisq")]
    null: NullKind,
    /// Monte Carlo draws for chibar-mc weights.
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("LAMARK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Decode(args) => run_decode(args),
        Command::Select(args) => run_select(args),
        Command::Lrtest(args) => run_lrtest(args),
        Command::Describe(args) => run_describe(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<PanelDataset, String> {
    let file = std::fs::File::open(path)
        .map_err(|e| format!("cannot open data `{}`: {e}", path.display()))?;
    load_panel(file, &cfg.schema()).map_err(|e| e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write `{}`: {e}", path.display()))
}

fn run_fit(args: FitArgs) -> Result<u8, String> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.options.seed = seed;
    }
    if let Some(starts) = args.starts {
        cfg.options.starts = starts;
    }
    if let Some(k) = args.k {
        cfg.model.k = k;
    }
    cfg.model.validate().map_err(|e| e.to_string())?;
    let data = load_data(&args.data, &cfg)?;
    let opts = cfg.options.to_fit_options();
    let result = fit(&data, &cfg.model, &opts).map_err(|e| e.to_string())?;

    let dims = Dims::new(&cfg.model, data.t_len, &data.levels);
    let inference = if args.no_se {
        None
    } else {
        match observed_information(
            &result.params,
            &cfg.model,
            &dims,
            DataRef::Panel(&data),
            CoordScale::Link,
            StepPolicy::default(),
        ) {
            Ok(rep) => Some(rep),
            Err(e) => {
                eprintln!("note: standard errors unavailable: {e}");
                None
            }
        }
    };
    let report = Report::build(
        "fit",
        &data,
        &cfg.model,
        &result,
        cfg.options.seed,
        cfg.options.starts,
        inference.as_ref(),
    )?;
    write_text(&args.out, &report.to_toml()?)?;
    if matches!(args.format, OutputFormat::Csv) {
        let csv_path = args.out.with_extension("csv");
        write_text(&csv_path, &report.estimates_csv())?;
    }
    if let Some(post_path) = &args.export_posteriors {
        export_posteriors(post_path, &data, &cfg.model, &result.params)?;
    }
    println!(
        "fit: loglik = {}, g = {}, AIC = {}, BIC = {}, converged = {}",
        report.fit.loglik, report.fit.g, report.fit.aic, report.fit.bic, report.fit.converged
    );
    Ok(if result.converged { 0 } else { 2 })
}

fn export_posteriors(
    path: &Path,
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &lamark::params::ModelParams,
) -> Result<(), String> {
    let dims = Dims::new(spec, data.t_len, &data.levels);
    let mut out = String::from("id,time,state,posterior\n");
    if spec.is_multilevel() {
        return Err("posterior export for multilevel fits goes through `decode`".into());
    }
    for i in 0..data.n {
        let em_matrix = if spec.has_measurement_covariates() {
            lamark::em::emissions_for_subject(params, spec, &dims, data, i)
                .map_err(|e| e.to_string())?
        } else {
            lamark::em::emissions_shared(params, &data.pattern_of(i), data.t_len, data.r)
        };
        let (pi, trans) = lamark::em::chain_for_subject(params, spec, &dims, data, i)
            .map_err(|e| e.to_string())?;
        let lat = lamark::recursions::posteriors(pi.view(), &trans, em_matrix.view())
            .map_err(|e| e.to_string())?;
        for t in 0..data.t_len {
            for u in 0..dims.k {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    data.subject_ids[i],
                    t + 1,
                    u + 1,
                    lat.post_state[(t, u)]
                ));
            }
        }
    }
    write_text(path, &out)
}

fn parse_cluster_sizes(text: &str) -> Result<Vec<usize>, String> {
    if let Some((h, s)) = text.split_once('x') {
        let h: usize = h.trim().parse().map_err(|_| "bad cluster count")?;
        let s: usize = s.trim().parse().map_err(|_| "bad cluster size")?;
        return Ok(vec![s; h]);
    }
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse()
                .map_err(|_| format!("bad cluster size `{tok}`"))
        })
        .collect()
}

fn run_simulate(args: SimulateArgs) -> Result<u8, String> {
    let report = Report::load(&args.params)?;
    let params = report.rebuild_params()?;
    let spec = report.model.clone();

    let mut covariates = None;
    let mut cluster_sizes = args
        .clusters
        .as_deref()
        .map(parse_cluster_sizes)
        .transpose()?;
    let mut n = args.n;
    if let Some(src) = &args.covariates_from {
        let cfg = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig {
                model: spec.clone(),
                data: config::DataSection {
                    responses: (1..=report.data.r).map(|j| format!("y{j}")).collect(),
                    covariates: spec.covariates.columns.clone(),
                    cluster: if spec.is_multilevel() {
                        Some("cluster".into())
                    } else {
                        None
                    },
                    ..Default::default()
                },
                options: Default::default(),
            },
        };
        let source = load_data(src, &cfg)?;
        n = source.n;
        if let Some(x) = &source.covariates {
            covariates = Some((x.clone(), source.covariate_names.clone()));
        }
        if cluster_sizes.is_none() {
            if let Some(cl) = &source.cluster {
                let mut sizes = vec![0usize; source.cluster_labels.len()];
                for &c in cl {
                    sizes[c] += 1;
                }
                cluster_sizes = Some(sizes);
            }
        }
    }
    if spec.is_multilevel() && cluster_sizes.is_none() {
        return Err("multilevel simulation needs --clusters or --covariates-from".into());
    }
    let sim = simulate_panel(&SimulateOptions {
        spec: &spec,
        params: &params,
        n,
        seed: args.seed,
        covariates,
        cluster_sizes,
    })
    .map_err(|e| e.to_string())?;
    let file = std::fs::File::create(&args.out)
        .map_err(|e| format!("cannot create `{}`: {e}", args.out.display()))?;
    write_panel(&sim.data, file).map_err(|e| e.to_string())?;
    println!("simulate: wrote {} subjects x {} occasions", sim.data.n, sim.data.t_len);
    Ok(0)
}

fn run_decode(args: DecodeArgs) -> Result<u8, String> {
    let report = Report::load(&args.params)?;
    let params = report.rebuild_params()?;
    let spec = report.model.clone();
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            model: spec.clone(),
            data: config::DataSection {
                responses: (1..=report.data.r).map(|j| format!("y{j}")).collect(),
                covariates: spec.covariates.columns.clone(),
                cluster: if spec.is_multilevel() {
                    Some("cluster".into())
                } else {
                    None
                },
                ..Default::default()
            },
            options: Default::default(),
        },
    };
    let data = load_data(&args.data, &cfg)?;
    let dims = Dims::new(&spec, data.t_len, &data.levels);
    let cluster_modes = if spec.is_multilevel() {
        Some(
            lamark::multilevel::cluster_class_modes(&params, &spec, &dims, &data)
                .map_err(|e| e.to_string())?,
        )
    } else {
        None
    };
    let paths = lamark::decode::decode_all(&params, &spec, &data, cluster_modes.as_deref())
        .map_err(|e| e.to_string())?;
    let mut out = String::from("id,time,viterbi_state,marginal_state,marginal_mass\n");
    for (i, decoded) in paths.iter().enumerate() {
        for t in 0..data.t_len {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                data.subject_ids[i],
                t + 1,
                decoded.path[t],
                decoded.marginal[t],
                decoded.marginal_mass[t]
            ));
        }
    }
    write_text(&args.out, &out)?;
    println!("decode: wrote paths for {} subjects", data.n);
    Ok(0)
}

fn parse_range(text: &str) -> Result<(usize, usize), String> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| "bad range")?;
        let hi: usize = hi.trim().parse().map_err(|_| "bad range")?;
        if lo == 0 || hi < lo {
            return Err(format!("empty range `{text}`"));
        }
        Ok((lo, hi))
    } else {
        let v: usize = text.trim().parse().map_err(|_| "bad range")?;
        if v == 0 {
            return Err("k must be positive".into());
        }
        Ok((v, v))
    }
}

#[derive(serde::Serialize)]
struct SelectRow {
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    g: usize,
    loglik: f64,
    aic: f64,
    bic: f64,
    converged: bool,
    selected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(serde::Serialize)]
struct SelectTable {
    command: String,
    seed: u64,
    rows: Vec<SelectRow>,
    selected_k: Option<usize>,
    selected_m: Option<usize>,
}

fn run_select(args: SelectArgs) -> Result<u8, String> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.options.seed = seed;
    }
    if let Some(starts) = args.starts {
        cfg.options.starts = starts;
    }
    let (k_lo, k_hi) = parse_range(&args.k_range)?;
    let m_values: Vec<Option<usize>> = match (&args.m_range, cfg.model.m) {
        (Some(r), _) => {
            let (lo, hi) = parse_range(r)?;
            (lo..=hi).map(Some).collect()
        }
        (None, m) => vec![m],
    };
    let data = load_data(&args.data, &cfg)?;
    let opts = cfg.options.to_fit_options();
    let mut rows = Vec::new();
    for k in k_lo..=k_hi {
        for &m in &m_values {
            let mut spec_k = cfg.model.clone();
            spec_k.k = k;
            spec_k.m = m;
            match fit(&data, &spec_k, &opts) {
                Ok(res) => {
                    let dims = Dims::new(&spec_k, data.t_len, &data.levels);
                    let g = lamark::coords::count_free_parameters(&spec_k, &dims)
                        .map_err(|e| e.to_string())?;
                    let (aic, bic) = lamark::inference::information_criteria(
                        res.loglik,
                        g,
                        data.total_weight(),
                    );
                    rows.push(SelectRow {
                        k,
                        m,
                        g,
                        loglik: res.loglik,
                        aic,
                        bic,
                        converged: res.converged,
                        selected: false,
                        error: None,
                    });
                }
                Err(e) => rows.push(SelectRow {
                    k,
                    m,
                    g: 0,
                    loglik: f64::NEG_INFINITY,
                    aic: f64::INFINITY,
                    bic: f64::INFINITY,
                    converged: false,
                    selected: false,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.error.is_none())
        .min_by(|(_, a), (_, b)| a.bic.partial_cmp(&b.bic).unwrap());
    let (selected_k, selected_m) = match best {
        Some((idx, _)) => {
            let (k, m) = (rows[idx].k, rows[idx].m);
            rows[idx].selected = true;
            (Some(k), m)
        }
        None => (None, None),
    };
    let table = SelectTable {
        command: "select".into(),
        seed: cfg.options.seed,
        rows,
        selected_k,
        selected_m,
    };
    match args.format {
        OutputFormat::Report => {
            let text =
                toml::to_string_pretty(&table).map_err(|e| format!("table serialization: {e}"))?;
            write_text(&args.out, &text)?;
        }
        OutputFormat::Csv => {
            let mut out = String::from("k,m,g,loglik,aic,bic,converged,selected,error\n");
            for r in &table.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.k,
                    r.m.map(|m| m.to_string()).unwrap_or_default(),
                    r.g,
                    r.loglik,
                    r.aic,
                    r.bic,
                    r.converged,
                    r.selected,
                    r.error.clone().unwrap_or_default()
                ));
            }
            write_text(&args.out, &out)?;
        }
    }
    match selected_k {
        Some(k) => println!("select: BIC chooses k = {k}"),
        None => println!("select: every fit failed"),
    }
    Ok(0)
}

/// Conservative structural nesting check between two specs.
fn is_nested(constrained: &ModelSpec, full: &ModelSpec) -> bool {
    if constrained.k != full.k
        || constrained.m != full.m
        || constrained.covariates != full.covariates
        || constrained.cluster_covariates != full.cluster_covariates
        || constrained.time_varying_ml_intercepts != full.time_varying_ml_intercepts
    {
        return false;
    }
    let meas = |c: &MeasurementSpec, f: &MeasurementSpec| -> bool {
        use MeasurementSpec::*;
        match (c, f) {
            (a, b) if a == b => true,
            (TimeInvariant, Free | Rasch | StateIntercept { .. }) => true,
            (StateIntercept { .. }, Free | TimeInvariant | StateIntercept { .. }) => true,
            (Rasch, Free) => true,
            _ => false,
        }
    };
    let init = |c: &InitialSpec, f: &InitialSpec| -> bool {
        matches!((c, f), (a, b) if a == b) || matches!((c, f), (InitialSpec::Uniform, InitialSpec::Free))
    };
    let trans = |c: &TransitionSpec, f: &TransitionSpec| -> bool {
        use TransitionSpec::*;
        match (c, f) {
            (a, b) if a == b => true,
            (Identity, EqualOffDiagonal | Symmetric | UpperTriangular | Homogeneous
                | PartiallyHomogeneous { .. } | Free) => true,
            (EqualOffDiagonal, Symmetric | Homogeneous | PartiallyHomogeneous { .. } | Free) => {
                true
            }
            (Symmetric | UpperTriangular, Homogeneous | PartiallyHomogeneous { .. } | Free) => true,
            (LogitDiagonal { mask: Some(_) }, LogitDiagonal { mask: None }) => true,
            (
                LogitDiagonal { mask: Some(_) },
                Homogeneous | PartiallyHomogeneous { .. } | Free,
            ) => true,
            (
                LogitDiagonal { mask: None } | LogitGlobal,
                Homogeneous | PartiallyHomogeneous { .. } | Free,
            ) => true,
            (Homogeneous, LogitDiagonal { mask: None } | LogitGlobal) => true,
            (Homogeneous, PartiallyHomogeneous { .. } | Free) => true,
            (PartiallyHomogeneous { .. }, Free) => true,
            _ => false,
        }
    };
    meas(&constrained.measurement, &full.measurement)
        && init(&constrained.initial, &full.initial)
        && trans(&constrained.transition, &full.transition)
}

fn run_lrtest(args: LrtestArgs) -> Result<u8, String> {
    let full = Report::load(&args.full)?;
    let constrained = Report::load(&args.constrained)?;
    if !is_nested(&constrained.model, &full.model) {
        return Err(
            "the constrained model's spec is not structurally nested in the full model's spec"
                .into(),
        );
    }
    if full.data.n != constrained.data.n
        || full.data.t_len != constrained.data.t_len
        || full.data.levels != constrained.data.levels
    {
        return Err("the two reports describe different datasets".into());
    }
    let df = full.fit.g.saturating_sub(constrained.fit.g);
    let null = match args.null {
        NullKind::Chisq => NullDistribution::ChiSquared { df },
        NullKind::Chibar => {
            if df != 1 {
                return Err(format!(
                    "the 50:50 chi-bar null applies to one boundary parameter; df here is {df} (use chibar-mc)"
                ));
            }
            NullDistribution::ChiBar {
                weights: vec![0.5, 0.5],
            }
        }
        NullKind::ChibarMc => NullDistribution::ChiBarMonteCarlo {
            dim: df,
            draws: args.draws,
            seed: args.seed,
        },
    };
    let test = lr_test(full.fit.loglik, constrained.fit.loglik, &null)
        .map_err(|e| e.to_string())?;
    println!("lrtest: D = {}", test.statistic);
    println!("lrtest: df = {df}");
    if let Some(w) = &test.weights {
        let formatted: Vec<String> = w.iter().map(|x| format!("{x:.4}")).collect();
        println!("lrtest: weights = [{}]", formatted.join(", "));
    }
    match test.mc_se {
        Some(se) => println!("lrtest: p = {} (mc se {se:.2e})", test.p_value),
        None => println!("lrtest: p = {}", test.p_value),
    }
    Ok(0)
}

fn run_describe(args: DescribeArgs) -> Result<u8, String> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            model: ModelSpec::basic(1),
            data: Default::default(),
            options: Default::default(),
        },
    };
    let data = load_data(&args.data, &cfg)?;
    println!("subjects: {}", data.n);
    println!("occasions: {}", data.t_len);
    println!("responses: {}", data.r);
    for (j, labels) in data.level_labels.iter().enumerate() {
        println!("  y{}: {} categories {:?}", j + 1, data.levels[j], labels);
    }
    if !data.covariate_names.is_empty() {
        println!("covariates: {:?}", data.covariate_names);
    }
    if let Some(n_clusters) = data.n_clusters() {
        println!("clusters: {n_clusters}");
    }
    if data.covariates.is_none() && data.cluster.is_none() {
        let table = lamark::data::aggregate_patterns(&data).map_err(|e| e.to_string())?;
        println!("distinct response patterns: {}", table.patterns.len());
    }
    Ok(0)
}
