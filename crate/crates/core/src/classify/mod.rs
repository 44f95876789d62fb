//! Churn classifiers on profile features or on stacked raw gaps, with a
//! stratified split and accuracy / TPR / FPR reporting.
//!
//! The positive class is `cancelled`.

mod forest;
mod knn;
mod lasso;
mod svm;

pub use forest::{default_mtry, DecisionTree, ForestConfig, RandomForest, DEFAULT_TREES};
pub use knn::{knn_predict, DEFAULT_K};
pub use lasso::{lasso_fit_raw, LassoFit, LassoModel, DEFAULT_PENALTY};
pub use svm::{poly_kernel, smo, SmoSolution, SvmConfig, SvmModel};

use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{ChurnLabel, Dataset};
use crate::features::{profile_names, CustomerProfile};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("customer {0} has no churn label")]
    Unlabelled(String),
    #[error("customer {0} has no journeys")]
    NoJourneys(String),
    #[error("customer {0} has no standardized profile")]
    NotStandardized(String),
    #[error("no customers")]
    Empty,
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    Ratio(f64),
    #[error("invalid classifier setting: {0}")]
    Config(String),
    #[error("unknown method {0:?} (expected svm, knn, rf or lasso)")]
    UnknownMethod(String),
    #[error("{0} predictions for {1} labels")]
    Length(usize, usize),
    #[error("report table: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Column centring and scaling learned on training rows. Columns with zero
/// spread are mapped to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        let mut scale = vec![0.0; p];
        if rows.is_empty() {
            return Self { mean, scale };
        }
        for j in 0..p {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = if rows.len() > 1 {
                rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean[j] = m;
            scale[j] = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        }
        Self { mean, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| if *s == 0.0 { 0.0 } else { (x - m) * s })
            .collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    ModelBased,
    Naive,
}

impl FeatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::ModelBased => "model_based",
            FeatureSource::Naive => "naive",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model_based" => Ok(FeatureSource::ModelBased),
            "naive" => Ok(FeatureSource::Naive),
            other => Err(ClassifyError::Format(format!("unknown feature source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<ChurnLabel>,
    pub source: FeatureSource,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    /// Model-based features from standardized profiles.
    pub fn from_profiles(profiles: &[CustomerProfile]) -> Result<Self, ClassifyError> {
        if profiles.is_empty() {
            return Err(ClassifyError::Empty);
        }
        let mut rows = Vec::with_capacity(profiles.len());
        let mut labels = Vec::with_capacity(profiles.len());
        for p in profiles {
            labels.push(
                p.label
                    .ok_or_else(|| ClassifyError::Unlabelled(p.customer_id.clone()))?,
            );
            rows.push(
                p.standardized
                    .clone()
                    .ok_or_else(|| ClassifyError::NotStandardized(p.customer_id.clone()))?,
            );
        }
        Ok(Self {
            ids: profiles.iter().map(|p| p.customer_id.clone()).collect(),
            names: profile_names(rows[0].len().saturating_sub(3)),
            rows,
            labels,
            source: FeatureSource::ModelBased,
        })
    }

    /// Rows restricted to `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            names: self.names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: self.source,
        }
    }

    pub fn positives(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == ChurnLabel::Cancelled).collect()
    }
}

/// How the per-journey gap count of the naive features is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveMode {
    /// Journey position `j` keeps `min_c(events of c's j-th journey) − 1` gaps.
    #[default]
    PerPosition,
    /// Every journey position keeps `min over all used journeys − 1` gaps.
    GlobalMin,
}

/// Stacked raw gaps over the first `J*` journeys (`J*` = smallest journey
/// count). A position where some customer has a single-event journey adds no
/// columns. Column `j{J}_g{G}` is gap `G` of journey `J`.
pub fn naive_features(data: &Dataset, mode: NaiveMode) -> Result<FeatureMatrix, ClassifyError> {
    if data.customers.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let mut labels = Vec::new();
    for c in &data.customers {
        if c.journeys.is_empty() {
            return Err(ClassifyError::NoJourneys(c.customer_id.clone()));
        }
        labels.push(
            c.label
                .ok_or_else(|| ClassifyError::Unlabelled(c.customer_id.clone()))?,
        );
    }
    let j_star = data.customers.iter().map(|c| c.journeys.len()).min().unwrap_or(0);
    let mut gaps_per_position: Vec<usize> = (0..j_star)
        .map(|j| {
            data.customers
                .iter()
                .map(|c| c.journeys[j].n_events())
                .min()
                .unwrap_or(1)
                - 1
        })
        .collect();
    if mode == NaiveMode::GlobalMin {
        let global = gaps_per_position.iter().copied().min().unwrap_or(0);
        gaps_per_position.iter_mut().for_each(|g| *g = global);
    }
    let mut names = Vec::new();
    for (j, &g) in gaps_per_position.iter().enumerate() {
        names.extend((1..=g).map(|i| format!("j{}_g{i}", j + 1)));
    }
    let rows = data
        .customers
        .iter()
        .map(|c| {
            c.journeys
                .iter()
                .zip(&gaps_per_position)
                .flat_map(|(journey, &g)| journey.gaps().take(g).collect::<Vec<_>>())
                .collect()
        })
        .collect();
    Ok(FeatureMatrix {
        ids: data.customers.iter().map(|c| c.customer_id.clone()).collect(),
        names,
        rows,
        labels,
        source: FeatureSource::Naive,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random split: each label keeps `round(ratio · n_label)` rows
/// for training. Index lists are returned in ascending order.
pub fn split_indices(labels: &[ChurnLabel], ratio: f64, seed: u64) -> Result<Split, ClassifyError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ClassifyError::Ratio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [ChurnLabel::Active, ChurnLabel::Cancelled] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

pub fn split_train_test(
    features: &FeatureMatrix,
    ratio: f64,
    seed: u64,
) -> Result<(FeatureMatrix, FeatureMatrix), ClassifyError> {
    let split = split_indices(&features.labels, ratio, seed)?;
    Ok((features.subset(&split.train), features.subset(&split.test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lasso,
    Knn,
    Rf,
    Svm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lasso, Method::Knn, Method::Rf, Method::Svm];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::Knn => "knn",
            Method::Rf => "rf",
            Method::Svm => "svm",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Lasso => "LASSO-LR",
            Method::Knn => "k-NN",
            Method::Rf => "Random forest",
            Method::Svm => "SVM (poly)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lasso" => Ok(Method::Lasso),
            "knn" => Ok(Method::Knn),
            "rf" | "forest" => Ok(Method::Rf),
            "svm" => Ok(Method::Svm),
            other => Err(ClassifyError::UnknownMethod(other.to_string())),
        }
    }
}

/// Comma-separated method list, e.g. `"svm,knn,rf,lasso"`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>, ClassifyError> {
    let mut out: Vec<Method> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub lasso_penalty: f64,
    pub knn_k: usize,
    pub forest: ForestConfig,
    pub svm: SvmConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lasso_penalty: DEFAULT_PENALTY,
            knn_k: DEFAULT_K,
            forest: ForestConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, n_train: usize, p: usize) -> Result<(), ClassifyError> {
        let bad = |m: String| Err(ClassifyError::Config(m));
        if !(self.lasso_penalty >= 0.0) {
            return bad(format!(
                "lasso penalty {} must be non-negative",
                self.lasso_penalty
            ));
        }
        if self.knn_k == 0 || self.knn_k > n_train {
            return bad(format!("k = {} must lie in 1..={n_train}", self.knn_k));
        }
        if self.forest.n_trees == 0 {
            return bad("forest needs at least one tree".into());
        }
        if let Some(m) = self.forest.mtry {
            if m == 0 || m > p.max(1) {
                return bad(format!("mtry = {m} must lie in 1..={p}"));
            }
        }
        if !(self.svm.cost > 0.0) || self.svm.degree == 0 {
            return bad("svm cost must be positive and degree at least 1".into());
        }
        Ok(())
    }
}

/// Trains `method` on `train` and predicts `test` (true = cancelled).
pub fn fit_predict(
    method: Method,
    cfg: &ClassifierConfig,
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
) -> Vec<bool> {
    match method {
        Method::Lasso => LassoModel::fit(train_x, train_y, cfg.lasso_penalty).predict(test_x),
        Method::Knn => knn_predict(train_x, train_y, test_x, cfg.knn_k),
        Method::Rf => RandomForest::fit(train_x, train_y, &cfg.forest).predict(test_x),
        Method::Svm => SvmModel::fit(train_x, train_y, &cfg.svm).predict(test_x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// `TP / (TP + FN)`; NaN without positives.
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    /// `FP / (FP + TN)`; NaN without negatives.
    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

pub fn evaluate(predictions: &[ChurnLabel], labels: &[ChurnLabel]) -> Result<Confusion, ClassifyError> {
    if predictions.len() != labels.len() {
        return Err(ClassifyError::Length(predictions.len(), labels.len()));
    }
    let mut c = Confusion::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (*p == ChurnLabel::Cancelled, *l == ChurnLabel::Cancelled) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn to_label(positive: bool) -> ChurnLabel {
    if positive {
        ChurnLabel::Cancelled
    } else {
        ChurnLabel::Active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub source: FeatureSource,
    pub n_train: usize,
    pub n_test: usize,
    pub confusion: Confusion,
}

impl ReportRow {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub split_ratio: f64,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
}

/// Fits every method on one seeded stratified split and scores the test part.
pub fn run_methods(
    features: &FeatureMatrix,
    methods: &[Method],
    cfg: &ClassifierConfig,
    ratio: f64,
    seed: u64,
) -> Result<Vec<ReportRow>, ClassifyError> {
    let split = split_indices(&features.labels, ratio, seed)?;
    run_on_split(features, methods, cfg, &split)
}

pub fn run_on_split(
    features: &FeatureMatrix,
    methods: &[Method],
    cfg: &ClassifierConfig,
    split: &Split,
) -> Result<Vec<ReportRow>, ClassifyError> {
    let train = features.subset(&split.train);
    let test = features.subset(&split.test);
    cfg.validate(train.n_rows(), features.n_cols())?;
    let train_y = train.positives();
    methods
        .iter()
        .map(|&method| {
            let preds: Vec<ChurnLabel> = fit_predict(method, cfg, &train.rows, &train_y, &test.rows)
                .into_iter()
                .map(to_label)
                .collect();
            Ok(ReportRow {
                method,
                source: features.source,
                n_train: train.n_rows(),
                n_test: test.n_rows(),
                confusion: evaluate(&preds, &test.labels)?,
            })
        })
        .collect()
}

fn fmt_rate(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.2}")
    }
}

impl ClassificationReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ClassifyError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "method",
            "source",
            "accuracy",
            "tpr",
            "fpr",
            "tp",
            "fn",
            "fp",
            "tn",
            "n_train",
            "n_test",
            "split_ratio",
            "seed",
        ])?;
        for r in &self.rows {
            let c = r.confusion;
            wtr.write_record([
                r.method.as_str().to_string(),
                r.source.as_str().to_string(),
                c.accuracy().to_string(),
                c.tpr().to_string(),
                c.fpr().to_string(),
                c.tp.to_string(),
                c.fn_.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                self.split_ratio.to_string(),
                self.seed.to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ClassifyError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        let (mut ratio, mut seed) = (f64::NAN, 0);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = || ClassifyError::Format(format!("line {}: malformed row", line + 2));
            let int = |i: usize| rec.get(i).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
            ratio = rec.get(11).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            seed = rec.get(12).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            rows.push(ReportRow {
                method: rec.get(0).ok_or_else(bad)?.parse()?,
                source: rec.get(1).ok_or_else(bad)?.parse()?,
                n_train: int(9)?,
                n_test: int(10)?,
                confusion: Confusion {
                    tp: int(5)?,
                    fn_: int(6)?,
                    fp: int(7)?,
                    tn: int(8)?,
                },
            });
        }
        Ok(Self {
            split_ratio: ratio,
            seed,
            rows,
        })
    }

    /// Method rows with Acc / TPR / FPR column groups per feature source.
    pub fn render_table(&self) -> String {
        let sources: Vec<FeatureSource> = [FeatureSource::ModelBased, FeatureSource::Naive]
            .into_iter()
            .filter(|s| self.rows.iter().any(|r| r.source == *s))
            .collect();
        let mut methods: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "Method");
        for s in &sources {
            let title = match s {
                FeatureSource::ModelBased => "Model-based",
                FeatureSource::Naive => "Raw data",
            };
            let _ = write!(out, " | {title:^20}");
        }
        out.push('\n');
        let _ = write!(out, "{:<16}", "");
        for _ in &sources {
            let _ = write!(out, " | {:>6} {:>6} {:>6}", "Acc", "TPR", "FPR");
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{:<16}", m.display_name());
            for s in &sources {
                match self.rows.iter().find(|r| r.method == m && r.source == *s) {
                    Some(r) => {
                        let c = r.confusion;
                        let _ = write!(
                            out,
                            " | {:>6} {:>6} {:>6}",
                            fmt_rate(c.accuracy()),
                            fmt_rate(c.tpr()),
                            fmt_rate(c.fpr())
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>6} {:>6} {:>6}", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        if let Some(r) = self.rows.first() {
            let _ = writeln!(
                out,
                "Training set {} customers, test set {} (split {}, seed {}); positive class = cancelled.",
                r.n_train, r.n_test, self.split_ratio, self.seed
            );
        }
        out
    }
}
