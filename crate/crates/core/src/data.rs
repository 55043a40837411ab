//! Longitudinal categorical panel data: ingestion, validation, aggregation
//! and simulation.
//!
//! Data are balanced panels: `n` subjects observed at occasions `1..=T`, with
//! `r` categorical response variables per occasion. Input is long-format
//! delimited text (one row per subject-occasion); category codes are remapped
//! to dense 0-based integers per variable with the original labels retained.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LmError, Result};

/// A balanced panel of categorical responses with optional covariates,
/// cluster labels and subject weights. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub n: usize,
    pub t_len: usize,
    pub r: usize,
    /// Number of categories per response variable.
    pub levels: Vec<usize>,
    /// Responses, shape `n x T x r`, codes in `0..levels[j]`.
    pub responses: Array3<usize>,
    /// Optional numeric covariates, shape `n x T x p`.
    pub covariates: Option<Array3<f64>>,
    pub covariate_names: Vec<String>,
    /// Optional dense cluster index per subject.
    pub cluster: Option<Vec<usize>>,
    pub cluster_labels: Vec<String>,
    /// Optional positive per-subject frequency weights.
    pub weights: Option<Vec<f64>>,
    pub subject_ids: Vec<String>,
    /// Original category labels per variable (`level_labels[j][code]`).
    pub level_labels: Vec<Vec<String>>,
}

impl PanelDataset {
    /// Build a dataset from raw components, checking every invariant.
    pub fn new(responses: Array3<usize>, levels: Vec<usize>) -> Result<Self> {
        let (n, t_len, r) = responses.dim();
        if n == 0 || t_len == 0 || r == 0 {
            return Err(LmError::Data(format!(
                "empty panel: n={n}, T={t_len}, r={r}"
            )));
        }
        if levels.len() != r {
            return Err(LmError::Data(format!(
                "levels has {} entries for r={r} variables",
                levels.len()
            )));
        }
        for (j, &lj) in levels.iter().enumerate() {
            if lj < 2 {
                return Err(LmError::Data(format!(
                    "variable {} has {} categories; need at least 2",
                    j + 1,
                    lj
                )));
            }
        }
        for ((i, t, j), &y) in responses.indexed_iter() {
            if y >= levels[j] {
                return Err(LmError::Data(format!(
                    "response code {y} out of range 0..{} at subject {}, occasion {}, variable {}",
                    levels[j],
                    i + 1,
                    t + 1,
                    j + 1
                )));
            }
        }
        let subject_ids = (1..=n).map(|i| i.to_string()).collect();
        let level_labels = levels
            .iter()
            .map(|&lj| (0..lj).map(|c| c.to_string()).collect())
            .collect();
        Ok(PanelDataset {
            n,
            t_len,
            r,
            levels,
            responses,
            covariates: None,
            covariate_names: Vec::new(),
            cluster: None,
            cluster_labels: Vec::new(),
            weights: None,
            subject_ids,
            level_labels,
        })
    }

    pub fn with_covariates(mut self, x: Array3<f64>, names: Vec<String>) -> Result<Self> {
        let (n, t_len, p) = x.dim();
        if n != self.n || t_len != self.t_len {
            return Err(LmError::Data(format!(
                "covariate array is {n} x {t_len}, panel is {} x {}",
                self.n, self.t_len
            )));
        }
        if names.len() != p {
            return Err(LmError::Data("covariate name count mismatch".into()));
        }
        self.covariates = Some(x);
        self.covariate_names = names;
        Ok(self)
    }

    pub fn with_cluster(mut self, cluster: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if cluster.len() != self.n {
            return Err(LmError::Data("cluster vector length mismatch".into()));
        }
        let h = labels.len();
        if cluster.iter().any(|&c| c >= h) {
            return Err(LmError::Data("cluster index out of range".into()));
        }
        self.cluster = Some(cluster);
        self.cluster_labels = labels;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n {
            return Err(LmError::Data("weight vector length mismatch".into()));
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(LmError::Data("weights must be positive and finite".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Weight of subject `i` (1 when no weights are attached).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Total weight (equals `n` without explicit weights).
    pub fn total_weight(&self) -> f64 {
        self.weights
            .as_ref()
            .map_or(self.n as f64, |w| w.iter().sum())
    }

    /// Number of clusters, if clustered.
    pub fn n_clusters(&self) -> Option<usize> {
        self.cluster.as_ref().map(|_| self.cluster_labels.len())
    }

    /// Response configuration of one subject flattened in `(t, j)` order.
    pub fn pattern_of(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t_len * self.r);
        for t in 0..self.t_len {
            for j in 0..self.r {
                out.push(self.responses[(i, t, j)]);
            }
        }
        out
    }
}

/// Distinct response configurations with their frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTable {
    /// Each pattern is a `T*r` vector in `(t, j)` order.
    pub patterns: Vec<Vec<usize>>,
    pub counts: Vec<f64>,
    pub t_len: usize,
    pub r: usize,
    pub levels: Vec<usize>,
}

impl PatternTable {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn response(&self, pattern: usize, t: usize, j: usize) -> usize {
        self.patterns[pattern][t * self.r + j]
    }
}

/// Collapse a panel to its distinct response configurations.
///
/// Only valid when the manifest distribution is subject-invariant, so
/// covariates or clusters make this an error.
pub fn aggregate_patterns(data: &PanelDataset) -> Result<PatternTable> {
    if data.covariates.is_some() {
        return Err(LmError::Data(
            "cannot aggregate patterns with covariates present; use the per-subject likelihood"
                .into(),
        ));
    }
    if data.cluster.is_some() {
        return Err(LmError::Data(
            "cannot aggregate patterns with clusters present; use the multilevel likelihood"
                .into(),
        ));
    }
    let mut map: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for i in 0..data.n {
        *map.entry(data.pattern_of(i)).or_insert(0.0) += data.weight(i);
    }
    let (patterns, counts): (Vec<_>, Vec<_>) = map.into_iter().unzip();
    Ok(PatternTable {
        patterns,
        counts,
        t_len: data.t_len,
        r: data.r,
        levels: data.levels.clone(),
    })
}

/// Column-role mapping for long-format input.
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub id: String,
    pub time: String,
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
    pub cluster: Option<String>,
    pub weight: Option<String>,
    /// Field delimiter; auto-detected from the header when `None`.
    pub delimiter: Option<u8>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            id: "id".into(),
            time: "time".into(),
            responses: vec!["y1".into()],
            covariates: Vec::new(),
            cluster: None,
            weight: None,
            delimiter: None,
        }
    }
}

fn detect_delimiter(header: &str) -> u8 {
    let candidates = *b",\t;";
    let mut best = b',';
    let mut best_count = 0;
    for &d in &candidates {
        let count = header.bytes().filter(|&b| b == d).count();
        if count > best_count {
            best_count = count;
            best = d;
        }
    }
    best
}

/// Read a long-format delimited panel.
///
/// Requires one row per subject-occasion with occasions `1..=T` complete for
/// every subject; unbalanced panels are a hard error. Response values must be
/// integers and are recoded to dense 0-based codes per variable, sorted by
/// original value.
pub fn load_panel<R: Read>(mut source: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let header_line = text.lines().next().unwrap_or("");
    let delim = schema.delimiter.unwrap_or_else(|| detect_delimiter(header_line));

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LmError::Data(format!("column `{name}` not found in header")))
    };

    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let resp_cols: Vec<usize> = schema
        .responses
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let cov_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let cluster_col = schema.cluster.as_deref().map(col).transpose()?;
    let weight_col = schema.weight.as_deref().map(col).transpose()?;
    let r = resp_cols.len();
    if r == 0 {
        return Err(LmError::Data("no response columns declared".into()));
    }

    struct Row {
        id: String,
        time: usize,
        y: Vec<i64>,
        x: Vec<f64>,
        cluster: Option<String>,
        weight: Option<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (line_no, record) in reader.records().enumerate() {
        let record = record?;
        let get = |c: usize| -> Result<&str> {
            record
                .get(c)
                .ok_or_else(|| LmError::Data(format!("short row at line {}", line_no + 2)))
        };
        let time_raw = get(time_col)?;
        let time: usize = time_raw.parse().map_err(|_| {
            LmError::Data(format!(
                "non-integer occasion `{time_raw}` at line {}",
                line_no + 2
            ))
        })?;
        let mut y = Vec::with_capacity(r);
        for (&c, name) in resp_cols.iter().zip(&schema.responses) {
            let raw = get(c)?;
            let v: i64 = raw.parse().map_err(|_| {
                LmError::Data(format!(
                    "non-integer response `{raw}` in column `{name}` at line {}",
                    line_no + 2
                ))
            })?;
            y.push(v);
        }
        let mut x = Vec::with_capacity(cov_cols.len());
        for (&c, name) in cov_cols.iter().zip(&schema.covariates) {
            let raw = get(c)?;
            let v: f64 = raw.parse().map_err(|_| {
                LmError::Data(format!(
                    "non-numeric covariate `{raw}` in column `{name}` at line {}",
                    line_no + 2
                ))
            })?;
            x.push(v);
        }
        let cluster = cluster_col.map(|c| get(c).map(str::to_string)).transpose()?;
        let weight = weight_col
            .map(|c| -> Result<f64> {
                let raw = get(c)?;
                raw.parse().map_err(|_| {
                    LmError::Data(format!("non-numeric weight `{raw}` at line {}", line_no + 2))
                })
            })
            .transpose()?;
        rows.push(Row {
            id: get(id_col)?.to_string(),
            time,
            y,
            x,
            cluster,
            weight,
        });
    }
    if rows.is_empty() {
        return Err(LmError::Data("no data rows".into()));
    }

    // Subjects in order of first appearance.
    let mut subject_ids: Vec<String> = Vec::new();
    let mut subject_index: BTreeMap<String, usize> = BTreeMap::new();
    for row in &rows {
        if !subject_index.contains_key(&row.id) {
            subject_index.insert(row.id.clone(), subject_ids.len());
            subject_ids.push(row.id.clone());
        }
    }
    let n = subject_ids.len();
    let t_len = rows.iter().map(|r| r.time).max().unwrap();
    if rows.iter().any(|r| r.time == 0) {
        return Err(LmError::Data("occasions must be numbered from 1".into()));
    }

    // Balanced-design check: every subject needs occasions 1..=T exactly once.
    let mut seen = vec![vec![false; t_len]; n];
    for row in &rows {
        let i = subject_index[&row.id];
        if seen[i][row.time - 1] {
            return Err(LmError::Data(format!(
                "duplicate occasion {} for subject `{}`",
                row.time, row.id
            )));
        }
        seen[i][row.time - 1] = true;
    }
    for (i, flags) in seen.iter().enumerate() {
        if let Some(t) = flags.iter().position(|&s| !s) {
            return Err(LmError::Data(format!(
                "unbalanced panel: subject `{}` lacks occasion {}",
                subject_ids[i],
                t + 1
            )));
        }
    }

    // Dense recoding of response categories, per variable, sorted by value.
    let mut level_values: Vec<Vec<i64>> = vec![Vec::new(); r];
    for row in &rows {
        for (values, y) in level_values.iter_mut().zip(&row.y) {
            if !values.contains(y) {
                values.push(*y);
            }
        }
    }
    for v in &mut level_values {
        v.sort_unstable();
    }
    let levels: Vec<usize> = level_values.iter().map(|v| v.len()).collect();
    for (j, &lj) in levels.iter().enumerate() {
        if lj < 2 {
            return Err(LmError::Data(format!(
                "response column `{}` has {} distinct value(s); need at least 2",
                schema.responses[j], lj
            )));
        }
    }

    let mut responses = Array3::zeros((n, t_len, r));
    let p = cov_cols.len();
    let mut covariates = if p > 0 {
        Some(Array3::zeros((n, t_len, p)))
    } else {
        None
    };
    let mut cluster_raw: Vec<Option<String>> = vec![None; n];
    let mut weights_raw: Vec<Option<f64>> = vec![None; n];
    for row in &rows {
        let i = subject_index[&row.id];
        let t = row.time - 1;
        for (j, values) in level_values.iter().enumerate() {
            let code = values.binary_search(&row.y[j]).unwrap();
            responses[(i, t, j)] = code;
        }
        if let Some(x) = covariates.as_mut() {
            for (c, &v) in row.x.iter().enumerate() {
                x[(i, t, c)] = v;
            }
        }
        if let Some(cl) = &row.cluster {
            match &cluster_raw[i] {
                None => cluster_raw[i] = Some(cl.clone()),
                Some(prev) if prev != cl => {
                    return Err(LmError::Data(format!(
                        "subject `{}` appears in clusters `{prev}` and `{cl}`",
                        row.id
                    )));
                }
                _ => {}
            }
        }
        if let Some(w) = row.weight {
            match weights_raw[i] {
                None => weights_raw[i] = Some(w),
                Some(prev) if (prev - w).abs() > 1e-12 => {
                    return Err(LmError::Data(format!(
                        "subject `{}` has inconsistent weights",
                        row.id
                    )));
                }
                _ => {}
            }
        }
    }

    let mut data = PanelDataset::new(responses, levels)?;
    data.subject_ids = subject_ids;
    data.level_labels = level_values
        .iter()
        .map(|v| v.iter().map(|x| x.to_string()).collect())
        .collect();
    if let Some(x) = covariates {
        data = data.with_covariates(x, schema.covariates.clone())?;
    }
    if cluster_col.is_some() {
        let mut labels: Vec<String> = Vec::new();
        let mut cluster = Vec::with_capacity(n);
        for c in cluster_raw {
            let c = c.ok_or_else(|| LmError::Data("missing cluster label".into()))?;
            let idx = match labels.iter().position(|l| *l == c) {
                Some(i) => i,
                None => {
                    labels.push(c);
                    labels.len() - 1
                }
            };
            cluster.push(idx);
        }
        data = data.with_cluster(cluster, labels)?;
    }
    if weight_col.is_some() {
        let w: Vec<f64> = weights_raw
            .into_iter()
            .map(|w| w.ok_or_else(|| LmError::Data("missing weight".into())))
            .collect::<Result<_>>()?;
        data = data.with_weights(w)?;
    }
    Ok(data)
}

/// Write a panel in the long CSV format accepted by [`load_panel`], using the
/// original category labels.
pub fn write_panel<W: Write>(data: &PanelDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["id".to_string(), "time".to_string()];
    for j in 0..data.r {
        header.push(format!("y{}", j + 1));
    }
    header.extend(data.covariate_names.iter().cloned());
    if data.cluster.is_some() {
        header.push("cluster".into());
    }
    if data.weights.is_some() {
        header.push("weight".into());
    }
    w.write_record(&header)?;
    for i in 0..data.n {
        for t in 0..data.t_len {
            let mut rec = vec![data.subject_ids[i].clone(), (t + 1).to_string()];
            for j in 0..data.r {
                rec.push(data.level_labels[j][data.responses[(i, t, j)]].clone());
            }
            if let Some(x) = &data.covariates {
                for c in 0..x.dim().2 {
                    rec.push(format!("{}", x[(i, t, c)]));
                }
            }
            if let Some(cl) = &data.cluster {
                rec.push(data.cluster_labels[cl[i]].clone());
            }
            if let Some(ws) = &data.weights {
                rec.push(format!("{}", ws[i]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Simulation request: a spec, its parameters and the sampling frame.
#[derive(Debug)]
pub struct SimulateOptions<'a> {
    pub spec: &'a crate::params::ModelSpec,
    pub params: &'a crate::params::ModelParams,
    /// Subject count; overridden by the total of `cluster_sizes`.
    pub n: usize,
    pub seed: u64,
    /// User covariate values (`n x T x p`) with column names; lag encodings
    /// are derived, never supplied.
    pub covariates: Option<(Array3<f64>, Vec<String>)>,
    /// Cluster sizes for multilevel simulation.
    pub cluster_sizes: Option<Vec<usize>>,
}

/// A simulated panel with the generating latent paths (1-based states) and
/// cluster classes.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub data: PanelDataset,
    pub latent: Array2<usize>,
    pub cluster_classes: Option<Vec<usize>>,
}

/// Draw a panel from the generative process: chain from the initial and
/// transition probabilities, responses from the conditional response
/// distribution. Deterministic given the seed; per-subject streams are
/// independent, so the draw does not depend on evaluation order.
pub fn simulate_panel(opts: &SimulateOptions) -> Result<SimulatedPanel> {
    use crate::params::{CovariatePlacement, InitialSpec, MeasurementSpec, TransitionSpec};

    let spec = opts.spec;
    let params = opts.params;
    spec.validate()?;
    let report = crate::params::validate_params(params, spec);
    if !report.is_valid() {
        return Err(LmError::Params(format!(
            "cannot simulate from invalid parameters: {} at {}",
            report.violations[0].message, report.violations[0].location
        )));
    }
    let t_len = params.t_len();
    let r = params.phi.len();
    let levels: Vec<usize> = params.phi.iter().map(|p| p.dim().2).collect();
    let dims = crate::params::Dims::new(spec, t_len, &levels);
    let k = dims.k;

    let (n, cluster_of): (usize, Option<Vec<usize>>) = match &opts.cluster_sizes {
        Some(sizes) => {
            let n = sizes.iter().sum();
            let mut assign = Vec::with_capacity(n);
            for (h, &sz) in sizes.iter().enumerate() {
                assign.extend(std::iter::repeat_n(h, sz));
            }
            (n, Some(assign))
        }
        None => (opts.n, None),
    };
    if n == 0 {
        return Err(LmError::Data("cannot simulate an empty panel".into()));
    }
    if spec.is_multilevel() && cluster_of.is_none() {
        return Err(LmError::Spec("multilevel simulation needs cluster sizes".into()));
    }
    if (spec.covariates.placement != CovariatePlacement::None
        && !spec.covariates.columns.is_empty()
        || !spec.cluster_covariates.is_empty())
        && opts.covariates.is_none()
    {
        return Err(LmError::Data(
            "the spec declares covariate columns but no covariate values were supplied".into(),
        ));
    }
    if let Some((x, names)) = &opts.covariates {
        if x.dim().0 != n || x.dim().1 != t_len || names.len() != x.dim().2 {
            return Err(LmError::Data("covariate array shape mismatch".into()));
        }
    }

    // cluster classes from independent streams
    let cluster_classes: Option<Vec<usize>> = match (&cluster_of, spec.m) {
        (Some(assign), Some(m)) => {
            let n_clusters = assign.iter().max().unwrap() + 1;
            let q = dims.q_cluster;
            let mut classes = Vec::with_capacity(n_clusters);
            for h in 0..n_clusters {
                let rho: Vec<f64> = if q == 0 {
                    params
                        .rho
                        .as_ref()
                        .ok_or_else(|| LmError::Params("multilevel simulation needs rho".into()))?
                        .to_vec()
                } else {
                    let gamma = params.gamma.as_ref().ok_or_else(|| {
                        LmError::Params("cluster covariates need gamma".into())
                    })?;
                    let first = assign.iter().position(|&c| c == h).unwrap();
                    let (x, names) = opts.covariates.as_ref().unwrap();
                    let z: Vec<f64> = spec
                        .cluster_covariates
                        .iter()
                        .map(|name| {
                            let col = names.iter().position(|c| c == name).ok_or_else(|| {
                                LmError::Data(format!("cluster covariate `{name}` missing"))
                            })?;
                            Ok(x[(first, 0, col)])
                        })
                        .collect::<Result<_>>()?;
                    crate::multilevel::resolve_cluster_mixture(gamma, m, &z)?
                };
                let mut rng = subject_rng(opts.seed, 0x4C00_0000 + h as u64);
                classes.push(sample_categorical(&mut rng, &rho));
            }
            Some(classes)
        }
        _ => None,
    };

    let user_cols = &spec.covariates.columns;
    let cov_row = |i: usize, t: usize, prev_y: Option<&[usize]>| -> Vec<f64> {
        let store: Vec<f64>;
        let x_row: Option<&[f64]> = match &opts.covariates {
            Some((x, names)) if !user_cols.is_empty() => {
                store = user_cols
                    .iter()
                    .map(|name| {
                        let col = names.iter().position(|c| c == name).expect("checked");
                        x[(i, t, col)]
                    })
                    .collect();
                Some(&store)
            }
            _ => None,
        };
        crate::covariates::covariate_row(x_row, prev_y, &levels, spec.covariates.lags)
    };

    let latent_link = crate::coords::latent_link(spec);
    let mut responses = Array3::zeros((n, t_len, r));
    let mut latent = Array2::zeros((n, t_len));
    for i in 0..n {
        let mut rng = subject_rng(opts.seed, i as u64 + 1);
        let w = cluster_classes
            .as_ref()
            .zip(cluster_of.as_ref())
            .map(|(classes, assign)| classes[assign[i]]);
        let mut prev_y: Option<Vec<usize>> = None;
        let mut state = 0usize;
        for t in 0..t_len {
            let row = cov_row(i, t, prev_y.as_deref());
            // advance the chain
            if t == 0 {
                let pi: Vec<f64> = if spec.is_multilevel() {
                    let ml_ini = params.ml_initial.as_ref().ok_or_else(|| {
                        LmError::Params("multilevel simulation needs ml_initial".into())
                    })?;
                    crate::multilevel::ml_initial_probs(ml_ini, k, dims.m, w.unwrap(), &row)?
                } else if matches!(spec.initial, InitialSpec::CovariateLogit) {
                    let d1 = params
                        .delta1
                        .as_ref()
                        .ok_or_else(|| LmError::Params("needs delta1".into()))?;
                    crate::covariates::resolve_latent_initial(latent_link, d1, k, &row)?
                } else {
                    params.pi.to_vec()
                };
                state = sample_categorical(&mut rng, &pi);
            } else {
                let trans_row: Vec<f64> = if spec.is_multilevel() {
                    let ml_tra = params.ml_trans.as_ref().ok_or_else(|| {
                        LmError::Params("multilevel simulation needs ml_trans".into())
                    })?;
                    let n_seg = if spec.time_varying_ml_intercepts {
                        t_len - 1
                    } else {
                        1
                    };
                    let seg = if n_seg > 1 { t - 1 } else { 0 };
                    let m = crate::multilevel::ml_transition_matrix(
                        ml_tra,
                        k,
                        dims.m,
                        n_seg,
                        seg,
                        w.unwrap(),
                        &row,
                    )?;
                    (0..k).map(|v| m[(state, v)]).collect()
                } else if let TransitionSpec::CovariateLogit { mask } = spec.transition {
                    let d2 = params
                        .delta2
                        .as_ref()
                        .ok_or_else(|| LmError::Params("needs delta2".into()))?;
                    let m = crate::covariates::resolve_latent_transition(
                        latent_link,
                        d2,
                        k,
                        mask,
                        &row,
                    )?;
                    (0..k).map(|v| m[(state, v)]).collect()
                } else {
                    (0..k).map(|v| params.trans[t - 1][(state, v)]).collect()
                };
                state = sample_categorical(&mut rng, &trans_row);
            }
            latent[(i, t)] = state + 1;
            // draw responses given the state
            let mut y_now = Vec::with_capacity(r);
            if matches!(spec.measurement, MeasurementSpec::BivariateMarginal) {
                let joint: Vec<f64> = if spec.has_measurement_covariates() {
                    let beta = params.beta.as_ref().unwrap();
                    let eta = crate::em::bivariate_eta_for(beta, k, dims.p_cov, state, &row);
                    crate::covariates::bivariate_joint_from_eta(&eta)?.to_vec()
                } else {
                    let joint = params
                        .phi_joint
                        .as_ref()
                        .ok_or_else(|| LmError::Params("bivariate spec needs phi_joint".into()))?;
                    joint.row(state).to_vec()
                };
                let cell = sample_categorical(&mut rng, &joint);
                y_now.push(cell / 3);
                y_now.push(cell % 3);
            } else if spec.has_measurement_covariates() {
                let beta = params.beta.as_ref().unwrap();
                let link = match spec.measurement {
                    MeasurementSpec::StateIntercept { link } => link,
                    _ => unreachable!("validated"),
                };
                let mut pos = 0;
                for &l in &levels {
                    let width = crate::covariates::measurement_block_len(link, k, l, dims.p_cov);
                    let p = crate::covariates::resolve_measurement(
                        link,
                        &beta[pos..pos + width],
                        k,
                        l,
                        state,
                        &row,
                    )?;
                    pos += width;
                    y_now.push(sample_categorical(&mut rng, &p));
                }
            } else {
                for (j, &l) in levels.iter().enumerate() {
                    let p: Vec<f64> = (0..l).map(|y| params.phi[j][(t, state, y)]).collect();
                    y_now.push(sample_categorical(&mut rng, &p));
                }
            }
            for (j, &y) in y_now.iter().enumerate() {
                responses[(i, t, j)] = y;
            }
            prev_y = Some(y_now);
        }
    }

    let mut data = PanelDataset::new(responses, levels)?;
    if let Some((x, names)) = &opts.covariates {
        data = data.with_covariates(x.clone(), names.clone())?;
    }
    if let Some(assign) = cluster_of {
        let n_clusters = assign.iter().max().unwrap() + 1;
        let labels = (1..=n_clusters).map(|h| format!("c{h}")).collect();
        data = data.with_cluster(assign, labels)?;
    }
    Ok(SimulatedPanel {
        data,
        latent,
        cluster_classes,
    })
}

/// Inverse-CDF draw from a categorical distribution given by `probs`.
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// RNG for one subject: an independent, order-insensitive stream derived
/// from the run seed and the subject index.
pub(crate) fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv() -> &'static str {
        "id,time,y1\nA,1,1\nA,2,2\nA,3,1\nB,1,1\nB,2,1\nB,3,2\n"
    }

    #[test]
    fn load_basic_panel() {
        let data = load_panel(toy_csv().as_bytes(), &PanelSchema::default()).unwrap();
        assert_eq!(data.n, 2);
        assert_eq!(data.t_len, 3);
        assert_eq!(data.r, 1);
        assert_eq!(data.levels, vec![2]);
        // source codes {1,2} remapped to {0,1} with labels kept
        assert_eq!(data.responses[(0, 0, 0)], 0);
        assert_eq!(data.responses[(0, 1, 0)], 1);
        assert_eq!(data.level_labels[0], vec!["1", "2"]);
    }

    #[test]
    fn unbalanced_panel_rejected() {
        let text = "id,time,y1\n7,1,0\n7,3,1\n8,1,0\n8,2,1\n8,3,0\n";
        let err = load_panel(text.as_bytes(), &PanelSchema::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("unbalanced panel"), "{msg}");
        assert!(msg.contains("subject `7`"), "{msg}");
        assert!(msg.contains("occasion 2"), "{msg}");
    }

    #[test]
    fn non_integer_response_rejected() {
        let text = "id,time,y1\nA,1,high\nA,2,low\n";
        assert!(load_panel(text.as_bytes(), &PanelSchema::default()).is_err());
    }

    #[test]
    fn single_category_rejected() {
        let text = "id,time,y1\nA,1,3\nA,2,3\nB,1,3\nB,2,3\n";
        assert!(load_panel(text.as_bytes(), &PanelSchema::default()).is_err());
    }

    #[test]
    fn tsv_auto_detected() {
        let text = "id\ttime\ty1\nA\t1\t0\nA\t2\t1\n";
        let data = load_panel(text.as_bytes(), &PanelSchema::default()).unwrap();
        assert_eq!(data.n, 1);
        assert_eq!(data.t_len, 2);
    }

    #[test]
    fn aggregate_counts_mass() {
        // subjects with responses (0,1), (0,1), (1,1)
        let resp = Array3::from_shape_vec((3, 2, 1), vec![0, 1, 0, 1, 1, 1]).unwrap();
        let data = PanelDataset::new(resp, vec![2]).unwrap();
        let table = aggregate_patterns(&data).unwrap();
        assert_eq!(table.patterns.len(), 2);
        assert_eq!(table.patterns[0], vec![0, 1]);
        assert_eq!(table.counts[0], 2.0);
        assert_eq!(table.patterns[1], vec![1, 1]);
        assert_eq!(table.counts[1], 1.0);
        assert_eq!(table.total(), 3.0);
    }

    #[test]
    fn aggregate_degenerate_cases() {
        let resp = Array3::from_shape_vec((1, 2, 1), vec![0, 1]).unwrap();
        let data = PanelDataset::new(resp, vec![2]).unwrap();
        let table = aggregate_patterns(&data).unwrap();
        assert_eq!(table.patterns.len(), 1);
        assert_eq!(table.counts[0], 1.0);

        let resp = Array3::from_elem((5, 2, 1), 1usize);
        let data = PanelDataset::new(resp, vec![2]).unwrap();
        let table = aggregate_patterns(&data).unwrap();
        assert_eq!(table.patterns.len(), 1);
        assert_eq!(table.counts[0], 5.0);
    }

    #[test]
    fn aggregate_refuses_covariates() {
        let resp = Array3::zeros((2, 2, 1));
        let resp = {
            let mut r = resp;
            r[(0, 1, 0)] = 1;
            r
        };
        let x = Array3::zeros((2, 2, 1));
        let data = PanelDataset::new(resp, vec![2])
            .unwrap()
            .with_covariates(x, vec!["x1".into()])
            .unwrap();
        assert!(aggregate_patterns(&data).is_err());
    }

    fn identity_emission_params(k: usize, t_len: usize) -> crate::params::ModelParams {
        use ndarray::Array1;
        let mut phi = Array3::zeros((t_len, k, k));
        for t in 0..t_len {
            for u in 0..k {
                phi[(t, u, u)] = 1.0;
            }
        }
        let mut trans = Array2::from_elem((k, k), 1.0 / k as f64);
        for u in 0..k {
            trans[(u, u)] = 1.0 / k as f64;
        }
        crate::params::ModelParams::from_probs(
            Array1::from_elem(k, 1.0 / k as f64),
            vec![trans; t_len - 1],
            vec![phi],
        )
    }

    #[test]
    fn simulate_deterministic_given_seed() {
        let params = identity_emission_params(2, 3);
        let spec = crate::params::ModelSpec::basic(2);
        let opts = SimulateOptions {
            spec: &spec,
            params: &params,
            n: 40,
            seed: 9,
            covariates: None,
            cluster_sizes: None,
        };
        let a = simulate_panel(&opts).unwrap();
        let b = simulate_panel(&opts).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn simulate_single_state_is_constant_path() {
        let phi = Array3::from_shape_vec((2, 1, 2), vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let params = crate::params::ModelParams::from_probs(
            ndarray::Array1::from_elem(1, 1.0),
            vec![Array2::from_elem((1, 1), 1.0)],
            vec![phi],
        );
        let spec = crate::params::ModelSpec::basic(1);
        let sim = simulate_panel(&SimulateOptions {
            spec: &spec,
            params: &params,
            n: 25,
            seed: 4,
            covariates: None,
            cluster_sizes: None,
        })
        .unwrap();
        assert!(sim.latent.iter().all(|&u| u == 1));
    }

    #[test]
    fn simulate_identity_emission_reveals_latent_path() {
        let params = identity_emission_params(3, 4);
        let spec = crate::params::ModelSpec::basic(3);
        let sim = simulate_panel(&SimulateOptions {
            spec: &spec,
            params: &params,
            n: 30,
            seed: 11,
            covariates: None,
            cluster_sizes: None,
        })
        .unwrap();
        for i in 0..30 {
            for t in 0..4 {
                assert_eq!(sim.data.responses[(i, t, 0)] + 1, sim.latent[(i, t)]);
            }
        }
    }

    #[test]
    fn simulate_empirical_frequency_converges() {
        // k = 1, T = 1, binary with success probability 0.3
        let phi = Array3::from_shape_vec((1, 1, 2), vec![0.7, 0.3]).unwrap();
        let params = crate::params::ModelParams::from_probs(
            ndarray::Array1::from_elem(1, 1.0),
            Vec::new(),
            vec![phi],
        );
        let spec = crate::params::ModelSpec::basic(1);
        let n = 100_000;
        let sim = simulate_panel(&SimulateOptions {
            spec: &spec,
            params: &params,
            n,
            seed: 123,
            covariates: None,
            cluster_sizes: None,
        })
        .unwrap();
        let ones = (0..n)
            .filter(|&i| sim.data.responses[(i, 0, 0)] == 1)
            .count() as f64;
        assert!((ones / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn simulate_rejects_invalid_params() {
        let phi = Array3::from_shape_vec((1, 1, 2), vec![0.7, 0.7]).unwrap();
        let params = crate::params::ModelParams::from_probs(
            ndarray::Array1::from_elem(1, 1.0),
            Vec::new(),
            vec![phi],
        );
        let spec = crate::params::ModelSpec::basic(1);
        assert!(simulate_panel(&SimulateOptions {
            spec: &spec,
            params: &params,
            n: 5,
            seed: 1,
            covariates: None,
            cluster_sizes: None,
        })
        .is_err());
    }

    #[test]
    fn simulated_panels_round_trip_through_csv() {
        // every category appears at these sizes, so the dense recoding on
        // reload reproduces the dataset exactly
        let phi = Array3::from_shape_vec(
            (3, 2, 3),
            vec![
                0.5, 0.3, 0.2, 0.2, 0.3, 0.5, 0.5, 0.3, 0.2, 0.2, 0.3, 0.5, 0.5, 0.3, 0.2, 0.2,
                0.3, 0.5,
            ],
        )
        .unwrap();
        let params = crate::params::ModelParams::from_probs(
            ndarray::Array1::from_elem(2, 0.5),
            vec![Array2::from_elem((2, 2), 0.5); 2],
            vec![phi],
        );
        let spec = crate::params::ModelSpec::basic(2);
        for seed in 0..5 {
            let sim = simulate_panel(&SimulateOptions {
                spec: &spec,
                params: &params,
                n: 60,
                seed,
                covariates: None,
                cluster_sizes: None,
            })
            .unwrap();
            let mut buf = Vec::new();
            write_panel(&sim.data, &mut buf).unwrap();
            let schema = PanelSchema::default();
            let again = load_panel(buf.as_slice(), &schema).unwrap();
            assert_eq!(sim.data, again, "seed {seed}");
        }
    }

    #[test]
    fn round_trip_write_load() {
        let text = "id,time,y1,y2\nA,1,1,10\nA,2,3,20\nB,1,1,20\nB,2,2,10\n";
        let schema = PanelSchema {
            responses: vec!["y1".into(), "y2".into()],
            ..Default::default()
        };
        let data = load_panel(text.as_bytes(), &schema).unwrap();
        let mut buf = Vec::new();
        write_panel(&data, &mut buf).unwrap();
        let again = load_panel(buf.as_slice(), &schema).unwrap();
        assert_eq!(data, again);
    }
}
