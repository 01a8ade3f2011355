//! Experiment harness: method-comparison runs, labeled-set-size ablations,
//! volume-stratified summaries and CSV reporting.
//!
//! Determinism contract: `(spec, seeds)` fully determine every output byte.
//! Within one run seed, every method sees the same generated cases in the
//! same order, and the evaluation test set is shared. Per-stage randomness
//! is derived from `(spec seed, run seed, stage label)`, so adding a method
//! never perturbs another method's stream. Wall-clock durations are kept in
//! memory only; they never reach the output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::metrics::{self, CaseMetrics, StratumSummary};
use crate::net::{NetError, NetworkArchitecture};
use crate::rng;
use crate::stats::{self, StatError};
use crate::synth::{self, DataError, PhantomParams, SplitSet};
use crate::tensor::Tensor;
use crate::train::{LabeledExample, Method, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("config key {key:?}: {reason}")]
    BadConfig { key: String, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("{method}/seed {seed}/{stage}: {source}")]
    Leg {
        method: Method,
        seed: u64,
        stage: &'static str,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Dataset description: phantom knobs plus split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub phantom: PhantomParams,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomParams::default(),
            n_labeled: 10,
            n_unlabeled: 90,
            n_test: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetSpec,
    pub arch: NetworkArchitecture,
    pub methods: Vec<Method>,
    /// Per-method training configuration. The `method` and `seed` fields are
    /// overwritten per leg.
    pub train: BTreeMap<Method, TrainConfig>,
    pub seeds: Vec<u64>,
    pub ablation_labeled_counts: Option<Vec<usize>>,
    pub stratification_thresholds_ml: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let methods = vec![Method::Ttas, Method::Ts, Method::Supervised];
        let train = methods
            .iter()
            .map(|m| {
                (
                    *m,
                    TrainConfig {
                        method: *m,
                        ..TrainConfig::default()
                    },
                )
            })
            .collect();
        Self {
            name: "default".into(),
            dataset: DatasetSpec::default(),
            arch: NetworkArchitecture::default(),
            methods,
            train,
            seeds: vec![1, 2, 3, 4, 5],
            ablation_labeled_counts: None,
            stratification_thresholds_ml: vec![0.0, 0.8, 1.4],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.dataset.phantom.validate()?;
        if self.methods.is_empty() {
            return Err(ExperimentError::InvalidSpec("no methods".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(ExperimentError::InvalidSpec(format!(
                    "method {m} listed twice"
                )));
            }
            if !self.train.contains_key(m) {
                return Err(ExperimentError::InvalidSpec(format!(
                    "no train config for {m}"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidSpec("seeds must be nonempty".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(ExperimentError::InvalidSpec("seeds must be distinct".into()));
        }
        if let Some(counts) = &self.ablation_labeled_counts {
            if counts.is_empty() {
                return Err(ExperimentError::InvalidSpec("empty ablation counts".into()));
            }
            if !counts.windows(2).all(|w| w[0] > w[1]) {
                return Err(ExperimentError::InvalidSpec(
                    "ablation counts must be strictly decreasing".into(),
                ));
            }
            if counts[0] > self.dataset.n_labeled {
                return Err(ExperimentError::InvalidSpec(format!(
                    "ablation count {} exceeds available labeled cases {}",
                    counts[0], self.dataset.n_labeled
                )));
            }
        }
        if !self
            .stratification_thresholds_ml
            .windows(2)
            .all(|w| w[0] < w[1])
        {
            return Err(ExperimentError::InvalidSpec(
                "stratification thresholds must be ascending".into(),
            ));
        }
        for cfg in self.train.values() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Hash of the canonical spec description (stable across runs).
    pub fn hash(&self) -> u64 {
        let mut text = format!(
            "name={} labeled={} unlabeled={} test={} phantom={:?} arch={:?} seeds={:?} thresholds={:?}",
            self.name,
            self.dataset.n_labeled,
            self.dataset.n_unlabeled,
            self.dataset.n_test,
            self.dataset.phantom,
            self.arch,
            self.seeds,
            self.stratification_thresholds_ml,
        );
        for (m, cfg) in &self.train {
            let _ = write!(text, " train.{m}=[{}]", cfg.canonical_string());
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Metric rows of one `(method, seed)` training-and-evaluation leg.
#[derive(Debug, Clone)]
pub struct MethodSeedRun {
    pub method: Method,
    pub seed: u64,
    pub cases: Vec<CaseMetrics>,
    /// Wall-clock seconds; in-memory metadata only, never rendered.
    pub duration_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub stratification_thresholds_ml: Vec<f64>,
    pub config_hash: u64,
    /// Ordered by (method in spec order, seed in spec order).
    pub runs: Vec<MethodSeedRun>,
}

/// One aggregate line of summary.csv.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: Method,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

/// One paired-test line of stats.csv.
#[derive(Debug, Clone)]
pub struct PairedTestRow {
    pub metric: &'static str,
    pub method_a: Method,
    pub method_b: Method,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["dice", "precision", "asd_mm", "abvd_ml"];

fn metric_value(m: &CaseMetrics, name: &str) -> Option<f64> {
    match name {
        "dice" => Some(m.dice),
        "precision" => Some(m.precision),
        "asd_mm" => m.asd_mm,
        "abvd_ml" => Some(m.abvd_ml),
        _ => None,
    }
}

impl ExperimentReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = (u64, &CaseMetrics)> {
        self.runs
            .iter()
            .filter(move |r| r.method == method)
            .flat_map(|r| r.cases.iter().map(move |c| (r.seed, c)))
    }

    /// Pooled per-case values of one metric, aligned in (seed, case) order.
    pub fn metric_values(&self, method: Method, metric: &str) -> Vec<Option<f64>> {
        self.rows_for(method)
            .map(|(_, c)| metric_value(c, metric))
            .collect()
    }

    pub fn mean_metric(&self, method: Method, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .metric_values(method, metric)
            .into_iter()
            .flatten()
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut rows = Vec::new();
        for method in &self.methods {
            for metric in METRIC_NAMES {
                let vals: Vec<f64> = self
                    .metric_values(*method, metric)
                    .into_iter()
                    .flatten()
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let (sd, ci) = if vals.len() >= 2 {
                    let res = stats::mean_ci95(&vals).expect("n >= 2, finite");
                    let sd = {
                        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / (vals.len() - 1) as f64;
                        var.sqrt()
                    };
                    (Some(sd), res.ci)
                } else {
                    (None, None)
                };
                rows.push(AggregateRow {
                    method: *method,
                    metric,
                    n: vals.len(),
                    mean,
                    sd,
                    ci,
                });
            }
        }
        rows
    }

    /// Paired t-tests per metric for every ordered method pair. Pairs where
    /// either side is missing (undefined ASD) are dropped.
    pub fn paired_tests(&self) -> Vec<PairedTestRow> {
        let mut rows = Vec::new();
        for (i, a) in self.methods.iter().enumerate() {
            for b in self.methods.iter().skip(i + 1) {
                for metric in METRIC_NAMES {
                    let va = self.metric_values(*a, metric);
                    let vb = self.metric_values(*b, metric);
                    debug_assert_eq!(va.len(), vb.len(), "aligned test sets");
                    let (xs, ys): (Vec<f64>, Vec<f64>) = va
                        .into_iter()
                        .zip(vb)
                        .filter_map(|(x, y)| Some((x?, y?)))
                        .unzip();
                    if xs.len() < 2 {
                        continue;
                    }
                    match stats::paired_t_test(&xs, &ys) {
                        Ok(res) => rows.push(PairedTestRow {
                            metric,
                            method_a: *a,
                            method_b: *b,
                            t: res.statistic,
                            df: res.df.unwrap_or(f64::NAN),
                            p: res.p_value,
                        }),
                        Err(StatError::DegenerateDifferences) => {}
                        Err(e) => panic!("paired test on finite metric values: {e}"),
                    }
                }
            }
        }
        rows
    }

    pub fn stratified(&self, method: Method) -> Vec<StratumSummary> {
        let cases: Vec<(f64, f64)> = self
            .rows_for(method)
            .map(|(_, c)| (c.dice, c.vol_gt_ml))
            .collect();
        metrics::stratified_dice(&cases, &self.stratification_thresholds_ml)
    }
}

/// Stage seeds for one `(spec, run seed)` pair. The data stream is
/// method-independent so every method trains and evaluates on identical
/// cases.
fn data_seed(spec: &ExperimentSpec, run_seed: u64) -> u64 {
    rng::derive_seed(
        rng::derive_seed(spec.dataset.phantom.seed, &format!("run/{run_seed}")),
        "data",
    )
}

fn train_seed(spec: &ExperimentSpec, run_seed: u64, method: Method) -> u64 {
    rng::derive_seed(
        rng::derive_seed(spec.dataset.phantom.seed, &format!("run/{run_seed}")),
        &format!("train/{method}"),
    )
}

fn generate_run_split(spec: &ExperimentSpec, run_seed: u64) -> Result<SplitSet> {
    let phantom = PhantomParams {
        seed: data_seed(spec, run_seed),
        ..spec.dataset.phantom.clone()
    };
    Ok(synth::generate_split(
        &phantom,
        spec.dataset.n_labeled,
        spec.dataset.n_unlabeled,
        spec.dataset.n_test,
    )?)
}

fn leg_err(method: Method, seed: u64, stage: &'static str) -> impl Fn(ExperimentError) -> ExperimentError {
    move |source| ExperimentError::Leg {
        method,
        seed,
        stage,
        source: Box::new(source),
    }
}

/// Train one method on one seed's split and evaluate it on the test cases.
fn run_leg(
    spec: &ExperimentSpec,
    method: Method,
    run_seed: u64,
    labeled_limit: Option<usize>,
) -> Result<MethodSeedRun> {
    let start = Instant::now();
    let split = generate_run_split(spec, run_seed).map_err(leg_err(method, run_seed, "generate"))?;

    let labeled_cases = match labeled_limit {
        Some(limit) => &split.labeled[..limit.min(split.labeled.len())],
        None => &split.labeled[..],
    };
    let labeled: Vec<LabeledExample> = labeled_cases.iter().map(|c| c.to_labeled_example()).collect();
    let unlabeled: Vec<Tensor> = split.unlabeled.iter().map(|c| c.image.clone()).collect();

    let mut cfg = spec.train[&method].clone();
    cfg.method = method;
    cfg.seed = train_seed(spec, run_seed, method);
    let mut trainer =
        Trainer::new(spec.arch.clone(), cfg).map_err(|e| leg_err(method, run_seed, "train")(e.into()))?;
    trainer
        .train(&labeled, &unlabeled)
        .map_err(|e| leg_err(method, run_seed, "train")(e.into()))?;

    let mut cases = Vec::with_capacity(split.test.len());
    for case in &split.test {
        let batch = case.image.clone().into_batch();
        let probs = trainer
            .predict(&batch)
            .map_err(|e| leg_err(method, run_seed, "predict")(e.into()))?;
        let pred = synth::MaskVolume::from_probs(&probs, case.mask.spacing_mm)
            .map_err(|e| leg_err(method, run_seed, "binarize")(e.into()))?;
        let row = CaseMetrics::compute(&case.id, &pred, &case.mask)
            .map_err(|e| leg_err(method, run_seed, "metrics")(e.into()))?;
        cases.push(row);
    }
    Ok(MethodSeedRun {
        method,
        seed: run_seed,
        cases,
        duration_secs: start.elapsed().as_secs_f64(),
    })
}

fn run_legs(spec: &ExperimentSpec, labeled_limit: Option<usize>) -> Result<Vec<MethodSeedRun>> {
    let legs: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|m| spec.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        legs.par_iter()
            .map(|(m, s)| run_leg(spec, *m, *s, labeled_limit))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        legs.iter()
            .map(|(m, s)| run_leg(spec, *m, *s, labeled_limit))
            .collect()
    }
}

/// Train every configured method on every seed and evaluate on the shared
/// test sets.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let runs = run_legs(spec, None)?;
    Ok(ExperimentReport {
        name: spec.name.clone(),
        methods: spec.methods.clone(),
        seeds: spec.seeds.clone(),
        stratification_thresholds_ml: spec.stratification_thresholds_ml.clone(),
        config_hash: spec.hash(),
        runs,
    })
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub per_count: Vec<(usize, ExperimentReport)>,
}

impl AblationReport {
    pub fn report_for(&self, count: usize) -> Option<&ExperimentReport> {
        self.per_count
            .iter()
            .find(|(c, _)| *c == count)
            .map(|(_, r)| r)
    }
}

/// Repeat the experiment with the labeled set truncated to each count; the
/// unlabeled pool, the test set and all seeds stay identical.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationReport> {
    spec.validate()?;
    let counts = spec
        .ablation_labeled_counts
        .clone()
        .ok_or_else(|| ExperimentError::InvalidSpec("ablation requires labeled counts".into()))?;
    let mut per_count = Vec::with_capacity(counts.len());
    for count in counts {
        let runs = run_legs(spec, Some(count))?;
        per_count.push((
            count,
            ExperimentReport {
                name: format!("{}_labeled{count}", spec.name),
                methods: spec.methods.clone(),
                seeds: spec.seeds.clone(),
                stratification_thresholds_ml: spec.stratification_thresholds_ml.clone(),
                config_hash: spec.hash(),
                runs,
            },
        ));
    }
    Ok(AblationReport { per_count })
}

// ---- rendering ----

/// Format with six significant digits, trailing zeros trimmed; mirrors
/// printf's %.6g.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("always has exponent");
    let exp: i32 = exp.parse().expect("valid exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            let s = s.trim_end_matches('0').trim_end_matches('.');
            s.to_string()
        } else {
            s
        }
    } else {
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{exp}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(format_g6).unwrap_or_default()
}

const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Write cases.csv, summary.csv, stratified.csv, stats.csv and summary.txt
/// into `dir`. An `INCOMPLETE` marker file exists while writing and is
/// removed once every file is in place.
pub fn render_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, b"rendering\n")?;

    let mut written = Vec::new();

    let mut cases = String::from(
        "case_id,method,seed,dice,precision,asd_mm,vol_pred_ml,vol_gt_ml,abvd_ml\n",
    );
    for run in &report.runs {
        for c in &run.cases {
            let _ = writeln!(
                cases,
                "{},{},{},{},{},{},{},{},{}",
                c.case_id,
                run.method,
                run.seed,
                format_g6(c.dice),
                format_g6(c.precision),
                fmt_opt(c.asd_mm),
                format_g6(c.vol_pred_ml),
                format_g6(c.vol_gt_ml),
                format_g6(c.abvd_ml),
            );
        }
    }
    let path = dir.join("cases.csv");
    std::fs::write(&path, cases)?;
    written.push(path);

    let mut summary = String::from("method,metric,n,mean,sd,ci_lo,ci_hi\n");
    for row in report.aggregates() {
        let (lo, hi) = row.ci.map_or((None, None), |(a, b)| (Some(a), Some(b)));
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            row.method,
            row.metric,
            row.n,
            format_g6(row.mean),
            fmt_opt(row.sd),
            fmt_opt(lo),
            fmt_opt(hi),
        );
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary)?;
    written.push(path);

    let mut strat = String::from("method,threshold_ml,n,mean,sd,median,iqr\n");
    for method in &report.methods {
        for s in report.stratified(*method) {
            let _ = writeln!(
                strat,
                "{},{},{},{},{},{},{}",
                method,
                format_g6(s.threshold_ml),
                s.n,
                fmt_opt(s.mean),
                fmt_opt(s.sd),
                fmt_opt(s.median),
                fmt_opt(s.iqr),
            );
        }
    }
    let path = dir.join("stratified.csv");
    std::fs::write(&path, strat)?;
    written.push(path);

    let mut statcsv = String::from("metric,method_a,method_b,t_statistic,df,p_value\n");
    for row in report.paired_tests() {
        let _ = writeln!(
            statcsv,
            "{},{},{},{},{},{}",
            row.metric,
            row.method_a,
            row.method_b,
            format_g6(row.t),
            format_g6(row.df),
            format_g6(row.p),
        );
    }
    let path = dir.join("stats.csv");
    std::fs::write(&path, statcsv)?;
    written.push(path);

    let mut text = String::new();
    let _ = writeln!(text, "experiment: {}", report.name);
    let _ = writeln!(text, "config hash: {:016x}", report.config_hash);
    let _ = writeln!(
        text,
        "seeds: {}",
        report
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(text, "test cases per (method, seed): {}", report.runs.first().map_or(0, |r| r.cases.len()));
    for row in report.aggregates() {
        if row.metric == "dice" || row.metric == "abvd_ml" {
            let ci = row
                .ci
                .map(|(lo, hi)| format!(" (95% CI {} - {})", format_g6(lo), format_g6(hi)))
                .unwrap_or_default();
            let _ = writeln!(
                text,
                "{:<11} mean {}: {}{}",
                row.method.to_string(),
                row.metric,
                format_g6(row.mean),
                ci
            );
        }
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, text)?;
    written.push(path);

    std::fs::remove_file(&marker)?;
    Ok(written)
}

/// Render each count's report under `ablation_<count>/` plus a top-level
/// Dice table.
pub fn render_ablation(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut table = String::from("labeled_count,method,n,mean_dice,sd_dice\n");
    for (count, rep) in &report.per_count {
        let sub = dir.join(format!("ablation_{count}"));
        written.extend(render_report(rep, &sub)?);
        for row in rep.aggregates() {
            if row.metric == "dice" {
                let _ = writeln!(
                    table,
                    "{},{},{},{},{}",
                    count,
                    row.method,
                    row.n,
                    format_g6(row.mean),
                    fmt_opt(row.sd),
                );
            }
        }
    }
    let path = dir.join("ablation.csv");
    std::fs::write(&path, table)?;
    written.push(path);
    Ok(written)
}

// ---- config file ----

/// Parse the flat `key = value` config format. `#` starts a comment; keys
/// use dotted sections (`train.alpha`, `dataset.noise_sigma`).
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ExperimentError::BadConfig {
                key: format!("line {}", i + 1),
                reason: format!("expected `key = value`, got {raw:?}"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ExperimentError::BadConfig {
        key: key.to_string(),
        reason: format!("cannot parse {value:?}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_as::<T>(key, part.trim()))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = parse_list(key, value)?;
    if v.len() != 3 {
        return Err(ExperimentError::BadConfig {
            key: key.to_string(),
            reason: format!("expected three comma-separated values, got {}", v.len()),
        });
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = parse_list(key, value)?;
    if v.len() != 2 {
        return Err(ExperimentError::BadConfig {
            key: key.to_string(),
            reason: format!("expected two comma-separated values, got {}", v.len()),
        });
    }
    Ok((v[0], v[1]))
}

/// Apply one config entry to the spec. CLI flags reuse this with the same
/// key names, overriding file values.
pub fn apply_config_entry(spec: &mut ExperimentSpec, key: &str, value: &str) -> Result<()> {
    // Per-method training overrides: train.<method>.<field>.
    if let Some(rest) = key.strip_prefix("train.") {
        if let Some((method_name, field)) = rest.split_once('.') {
            let method = Method::parse(method_name).ok_or_else(|| ExperimentError::BadConfig {
                key: key.to_string(),
                reason: format!("unknown method {method_name:?}"),
            })?;
            let cfg = spec.train.entry(method).or_insert_with(|| TrainConfig {
                method,
                ..TrainConfig::default()
            });
            return apply_train_field(cfg, key, field, value);
        }
        // Global: apply to every configured method.
        let methods: Vec<Method> = spec.train.keys().copied().collect();
        for m in methods {
            let cfg = spec.train.get_mut(&m).expect("key exists");
            apply_train_field(cfg, key, rest, value)?;
        }
        return Ok(());
    }
    match key {
        "name" => spec.name = value.to_string(),
        "output_dir" => spec.output_dir = PathBuf::from(value),
        "methods" => {
            let methods: Vec<Method> = value
                .split(',')
                .map(|m| {
                    Method::parse(m.trim()).ok_or_else(|| ExperimentError::BadConfig {
                        key: key.to_string(),
                        reason: format!("unknown method {m:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            spec.methods = methods;
        }
        "seeds" => spec.seeds = parse_list(key, value)?,
        "ablation_labeled_counts" => {
            spec.ablation_labeled_counts = Some(parse_list(key, value)?)
        }
        "stratification_thresholds_ml" => {
            spec.stratification_thresholds_ml = parse_list(key, value)?
        }
        "dataset.n_labeled" => spec.dataset.n_labeled = parse_as(key, value)?,
        "dataset.n_unlabeled" => spec.dataset.n_unlabeled = parse_as(key, value)?,
        "dataset.n_test" => spec.dataset.n_test = parse_as(key, value)?,
        "dataset.seed" => spec.dataset.phantom.seed = parse_as(key, value)?,
        "dataset.image_size" => {
            let side: usize = parse_as(key, value)?;
            spec.dataset.phantom.image_size = (side, side);
        }
        "dataset.spacing_mm" => spec.dataset.phantom.spacing_mm = parse_triple(key, value)?,
        "dataset.effusion_area_range" => {
            spec.dataset.phantom.effusion_area_range = parse_pair(key, value)?
        }
        "dataset.noise_sigma" => spec.dataset.phantom.noise_sigma = parse_as(key, value)?,
        "dataset.intensity_levels" => {
            spec.dataset.phantom.intensity_levels = parse_triple(key, value)?
        }
        other => return Err(ExperimentError::UnknownConfigKey(other.to_string())),
    }
    Ok(())
}

fn apply_train_field(cfg: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<()> {
    use crate::losses::{PseudoMode, TauSchedule};
    use crate::train::TransferTiming;
    match field {
        "alpha" => cfg.alpha = parse_as(key, value)?,
        "assistant_transfer" => {
            cfg.assistant_transfer = match value {
                "per_batch" => TransferTiming::PerBatch,
                "per_epoch" => TransferTiming::PerEpoch,
                other => {
                    return Err(ExperimentError::BadConfig {
                        key: key.to_string(),
                        reason: format!("unknown transfer timing {other:?}"),
                    })
                }
            }
        }
        "student_alpha" => cfg.student_alpha = Some(parse_as(key, value)?),
        "gamma" => cfg.gamma = parse_as(key, value)?,
        "epochs" => cfg.epochs = parse_as(key, value)?,
        "batch_size" => cfg.batch_size = parse_as(key, value)?,
        "interleave" => cfg.interleave = parse_as(key, value)?,
        "tau" => {
            cfg.tau_schedule = TauSchedule::Constant {
                tau: parse_as(key, value)?,
            }
        }
        "tau_ramp" => {
            // start,end over the configured epochs
            let (start, end) = parse_pair(key, value)?;
            cfg.tau_schedule = TauSchedule::LinearRamp {
                tau_start: start,
                tau_end: end,
                total_epochs: cfg.epochs,
            };
        }
        "pseudo_mode" => {
            cfg.pseudo_mode = match value {
                "two_sided" => PseudoMode::TwoSided,
                "foreground_only" => PseudoMode::ForegroundOnly,
                other => {
                    return Err(ExperimentError::BadConfig {
                        key: key.to_string(),
                        reason: format!("unknown pseudo mode {other:?}"),
                    })
                }
            }
        }
        other => {
            return Err(ExperimentError::UnknownConfigKey(format!(
                "train.{other}"
            )))
        }
    }
    Ok(())
}

/// Build a spec from defaults, a parsed config file, and flag overrides (in
/// that precedence order).
pub fn build_spec(
    file_entries: &BTreeMap<String, String>,
    overrides: &[(String, String)],
) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::default();
    for (k, v) in file_entries {
        apply_config_entry(&mut spec, k, v)?;
    }
    for (k, v) in overrides {
        apply_config_entry(&mut spec, k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(dir: &Path) -> ExperimentSpec {
        let mut spec = ExperimentSpec::default();
        spec.dataset.phantom.image_size = (24, 24);
        spec.dataset.phantom.effusion_area_range = (0.04, 0.16);
        spec.dataset.n_labeled = 3;
        spec.dataset.n_unlabeled = 4;
        spec.dataset.n_test = 3;
        spec.seeds = vec![1, 2];
        spec.stratification_thresholds_ml = vec![0.0, 0.2];
        for cfg in spec.train.values_mut() {
            cfg.epochs = 2;
        }
        spec.output_dir = dir.to_path_buf();
        spec
    }

    #[test]
    fn format_g6_cases() {
        assert_eq!(format_g6(0.0), "0");
        assert_eq!(format_g6(1.0), "1");
        assert_eq!(format_g6(-2.5), "-2.5");
        assert_eq!(format_g6(0.123456789), "0.123457");
        assert_eq!(format_g6(1234567.0), "1.23457e6");
        assert_eq!(format_g6(0.000012345678), "1.23457e-5");
        assert_eq!(format_g6(100.0), "100");
        assert_eq!(format_g6(0.05), "0.05");
        assert_eq!(format_g6(99999.9), "99999.9");
        assert_eq!(format_g6(999999.4), "999999");
        assert_eq!(format_g6(0.0001), "0.0001");
    }

    #[test]
    fn spec_validation_catches_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path());
        spec.seeds = vec![1, 1];
        assert!(matches!(
            spec.validate(),
            Err(ExperimentError::InvalidSpec(_))
        ));

        let mut spec = tiny_spec(dir.path());
        spec.ablation_labeled_counts = Some(vec![2, 3]);
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec(dir.path());
        spec.ablation_labeled_counts = Some(vec![5]);
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec(dir.path());
        spec.stratification_thresholds_ml = vec![1.0, 0.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn experiment_rows_are_complete_and_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path());
        spec.methods = vec![Method::Supervised];
        spec.train.retain(|m, _| *m == Method::Supervised);
        spec.seeds = vec![7];
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.runs[0].cases.len(), 3);
    }

    #[test]
    fn methods_share_identical_test_cases_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let report = run_experiment(&spec).unwrap();
        for seed in &spec.seeds {
            let ids: Vec<Vec<&str>> = spec
                .methods
                .iter()
                .map(|m| {
                    report
                        .runs
                        .iter()
                        .find(|r| r.method == *m && r.seed == *seed)
                        .unwrap()
                        .cases
                        .iter()
                        .map(|c| c.case_id.as_str())
                        .collect()
                })
                .collect();
            assert!(ids.windows(2).all(|w| w[0] == w[1]));
            let gts: Vec<Vec<f64>> = spec
                .methods
                .iter()
                .map(|m| {
                    report
                        .runs
                        .iter()
                        .find(|r| r.method == *m && r.seed == *seed)
                        .unwrap()
                        .cases
                        .iter()
                        .map(|c| c.vol_gt_ml)
                        .collect()
                })
                .collect();
            assert!(gts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn rendered_outputs_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let report1 = run_experiment(&spec).unwrap();
        let report2 = run_experiment(&spec).unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        render_report(&report1, &d1).unwrap();
        render_report(&report2, &d2).unwrap();
        for file in ["cases.csv", "summary.csv", "stratified.csv", "stats.csv", "summary.txt"] {
            let a = std::fs::read(d1.join(file)).unwrap();
            let b = std::fs::read(d2.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs");
        }
        assert!(!d1.join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn cases_csv_has_the_contract_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path());
        spec.methods = vec![Method::Supervised];
        spec.train.retain(|m, _| *m == Method::Supervised);
        spec.seeds = vec![3];
        let report = run_experiment(&spec).unwrap();
        let out = dir.path().join("r");
        render_report(&report, &out).unwrap();
        let cases = std::fs::read_to_string(out.join("cases.csv")).unwrap();
        assert!(cases.starts_with(
            "case_id,method,seed,dice,precision,asd_mm,vol_pred_ml,vol_gt_ml,abvd_ml\n"
        ));
        assert_eq!(cases.lines().count(), 1 + 3);
    }

    #[test]
    fn summary_recomputable_from_cases() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let report = run_experiment(&spec).unwrap();
        for method in &report.methods {
            let dices: Vec<f64> = report
                .metric_values(*method, "dice")
                .into_iter()
                .flatten()
                .collect();
            let mean = dices.iter().sum::<f64>() / dices.len() as f64;
            let agg = report
                .aggregates()
                .into_iter()
                .find(|r| r.method == *method && r.metric == "dice")
                .unwrap();
            assert!((agg.mean - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn ablation_truncates_labeled_but_keeps_test_set() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path());
        spec.methods = vec![Method::Supervised];
        spec.train.retain(|m, _| *m == Method::Supervised);
        spec.seeds = vec![4];
        spec.ablation_labeled_counts = Some(vec![3, 1]);
        let ablation = run_ablation(&spec).unwrap();
        assert_eq!(ablation.per_count.len(), 2);
        let full = ablation.report_for(3).unwrap();
        let small = ablation.report_for(1).unwrap();
        let ids = |r: &ExperimentReport| {
            r.runs[0]
                .cases
                .iter()
                .map(|c| c.case_id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(full), ids(small));
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let text = "\
# experiment knobs
name = smoke
seeds = 3, 4
dataset.noise_sigma = 0.05
dataset.n_labeled = 4
train.alpha = 0.1
train.ttas.gamma = 0.9
methods = ttas,supervised
";
        let entries = parse_config_text(text).unwrap();
        let spec = build_spec(&entries, &[]).unwrap();
        assert_eq!(spec.name, "smoke");
        assert_eq!(spec.seeds, vec![3, 4]);
        assert_eq!(spec.dataset.phantom.noise_sigma, 0.05);
        assert_eq!(spec.dataset.n_labeled, 4);
        assert_eq!(spec.train[&Method::Ttas].alpha, 0.1);
        assert_eq!(spec.train[&Method::Ttas].gamma, 0.9);
        assert_eq!(spec.train[&Method::Supervised].gamma, 0.99);
        assert_eq!(spec.methods, vec![Method::Ttas, Method::Supervised]);

        let err = build_spec(&entries, &[("nonsense.key".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, ExperimentError::UnknownConfigKey(k) if k == "nonsense.key"));

        let bad = parse_config_text("train.alpha 0.1").unwrap_err();
        assert!(matches!(bad, ExperimentError::BadConfig { .. }));
    }

    #[test]
    fn flags_override_file_values() {
        let entries = parse_config_text("dataset.noise_sigma = 0.2").unwrap();
        let spec = build_spec(
            &entries,
            &[("dataset.noise_sigma".to_string(), "0.3".to_string())],
        )
        .unwrap();
        assert_eq!(spec.dataset.phantom.noise_sigma, 0.3);
    }
}
