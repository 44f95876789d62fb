//! End-to-end workflow: prepare or simulate journeys, fit, diagnose, build
//! profiles, cluster, classify and render reports. Every stage records a
//! manifest with SHA-256 checksums of its inputs and outputs.
//!
//! Stage seeds come from the root seed: the first eight bytes (little
//! endian) of `SHA-256(root_seed as u64 LE ‖ stage name)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{
    naive_features, run_on_split, split_indices, ClassificationReport, ClassifierConfig, ClassifyError,
    FeatureMatrix, Method, NaiveMode,
};
use crate::cluster::{distance_matrix, ward_linkage, write_cluster_labels, ClusterError, Dendrogram};
use crate::event_log::{
    build_journeys, parse_and_label, read_channel_genres, read_journeys, read_labels, read_raw_log,
    truncate_dataset, write_journeys, Dataset, EventLogError, LabelTables, SessionRule,
};
use crate::features::{
    describe_percent_change, extract_profiles, group_correlations, read_profiles, standardize,
    write_profiles, CustomerProfile, FeatureError, PointEstimate,
};
use crate::model::PriorConfig;
use crate::sampler::{
    read_draws, run_mcmc, summarize, write_draws, McmcConfig, PosteriorSummary, SamplerError,
};
use crate::simulate::{simulate_dataset, truth_map, ScenarioConfig, SimulationError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing {}: run {stage} first", path.display())]
    MissingArtifact { stage: Stage, path: PathBuf },
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 1 usage/configuration, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingArtifact { .. } => 1,
            PipelineError::Data(_) | PipelineError::Io { .. } => 2,
            PipelineError::Numerical(_) => 3,
        }
    }
}

impl From<EventLogError> for PipelineError {
    fn from(e: EventLogError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SimulationError> for PipelineError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Scenario(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<SamplerError> for PipelineError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => PipelineError::Config(e.to_string()),
            SamplerError::NonFiniteInit(_) | SamplerError::Model(_) => {
                PipelineError::Numerical(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ClusterError> for PipelineError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::BadCut { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ClassifyError> for PipelineError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Ratio(_) | ClassifyError::Config(_) | ClassifyError::UnknownMethod(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path, stage: Stage) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        });
    }
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn finish(w: BufWriter<File>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e.into_error(),
        })?
        .sync_all()
        .map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    finish(w, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Simulate,
    Fit,
    Diagnose,
    Profile,
    Cluster,
    Classify,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::Prepare,
        Stage::Simulate,
        Stage::Fit,
        Stage::Diagnose,
        Stage::Profile,
        Stage::Cluster,
        Stage::Classify,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Simulate => "simulate",
            Stage::Fit => "fit",
            Stage::Diagnose => "diagnose",
            Stage::Profile => "profile",
            Stage::Cluster => "cluster",
            Stage::Classify => "classify",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

/// Stage seed derived from the root seed.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub logs: Vec<PathBuf>,
    /// Click-event table (`event_id`, header row).
    pub click_table: Option<PathBuf>,
    /// Context table (`event_id,url,tag`, header row).
    pub context_table: Option<PathBuf>,
    /// Optional `customer_id,label` table.
    pub labels: Option<PathBuf>,
    /// Optional `channel,genre` table merged into the session rule.
    pub channel_genres: Option<PathBuf>,
    pub delimiter: char,
    pub session: SessionRule,
    pub max_journeys: Option<usize>,
    pub max_events: Option<usize>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            logs: Vec::new(),
            click_table: None,
            context_table: None,
            labels: None,
            channel_genres: None,
            delimiter: ',',
            session: SessionRule::default(),
            max_journeys: None,
            max_events: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub estimate: PointEstimate,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            estimate: PointEstimate::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub split: f64,
    pub methods: Vec<Method>,
    /// Also score the stacked-raw-gaps baseline.
    pub naive: bool,
    pub naive_mode: NaiveMode,
    pub classifier: ClassifierConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            split: 0.7,
            methods: Method::ALL.to_vec(),
            naive: true,
            naive_mode: NaiveMode::PerPosition,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stages to run; by default prepare (when logs are configured) or
    /// simulate, followed by every downstream stage.
    pub stages: Option<Vec<Stage>>,
    pub prepare: PrepareConfig,
    pub scenario: ScenarioConfig,
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    pub profile: ProfileConfig,
    pub cluster: ClusterConfig,
    pub classify: ClassifyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("run"),
            stages: None,
            prepare: PrepareConfig::default(),
            scenario: ScenarioConfig::default(),
            mcmc: McmcConfig::default(),
            priors: PriorConfig::default(),
            profile: ProfileConfig::default(),
            cluster: ClusterConfig::default(),
            classify: ClassifyConfig::default(),
        }
    }
}

/// Parses JSON, reporting schema errors with the offending field path.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        PipelineError::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_json(&text).map_err(|e| match e {
        PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        self.priors
            .validate()
            .map_err(|e| PipelineError::Config(format!("priors: {e}")))?;
        if self.cluster.k == 0 {
            return Err(PipelineError::Config("cluster.k: must be at least 1".into()));
        }
        if !(self.classify.split > 0.0 && self.classify.split < 1.0) {
            return Err(PipelineError::Config("classify.split: must lie in (0, 1)".into()));
        }
        if self.stages().contains(&Stage::Simulate) {
            self.scenario.validate()?;
        }
        if self.stages().contains(&Stage::Prepare) {
            let p = &self.prepare;
            if p.logs.is_empty() || p.click_table.is_none() || p.context_table.is_none() {
                return Err(PipelineError::Config(
                    "prepare: logs, click_table and context_table are required".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut stages = match &self.stages {
            Some(s) => s.clone(),
            None => {
                let source = if self.prepare.logs.is_empty() {
                    Stage::Simulate
                } else {
                    Stage::Prepare
                };
                let mut v = vec![source];
                v.extend(&Stage::ORDER[2..]);
                v
            }
        };
        stages.sort();
        stages.dedup();
        stages
    }

    pub fn paths(&self) -> ArtifactPaths {
        ArtifactPaths::new(&self.out_dir)
    }

    /// Configuration with every stage seed replaced by its derived value.
    pub fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.scenario.seed = derive_seed(self.seed, Stage::Simulate.as_str());
        cfg.mcmc.seed = derive_seed(self.seed, Stage::Fit.as_str());
        cfg.classify.classifier.forest.seed = derive_seed(self.seed, "classify.forest");
        cfg
    }

    pub fn classify_seed(&self) -> u64 {
        derive_seed(self.seed, Stage::Classify.as_str())
    }
}

/// Fixed artifact layout under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub root: PathBuf,
    pub journeys: PathBuf,
    pub truth: PathBuf,
    pub draws: PathBuf,
    pub summary: PathBuf,
    pub table1: PathBuf,
    pub profiles: PathBuf,
    pub correlations: PathBuf,
    pub dendrogram: PathBuf,
    pub newick: PathBuf,
    pub clusters: PathBuf,
    pub report_csv: PathBuf,
    pub report_txt: PathBuf,
    pub manifests: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> Self {
        let p = |name: &str| root.join(name);
        Self {
            root: root.to_path_buf(),
            journeys: p("journeys.jsonl"),
            truth: p("truth.json"),
            draws: p("draws"),
            summary: p("summary.csv"),
            table1: p("table1.txt"),
            profiles: p("profiles.csv"),
            correlations: p("correlations.csv"),
            dendrogram: p("dendrogram.json"),
            newick: p("dendrogram.nwk"),
            clusters: p("clusters.csv"),
            report_csv: p("report.csv"),
            report_txt: p("report.txt"),
            manifests: p("manifests"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub inputs: Vec<FileChecksum>,
    pub outputs: Vec<FileChecksum>,
    pub duration_s: f64,
}

/// Checksums a file, or every file below a directory in sorted order.
pub fn checksum_path(path: &Path, relative_to: &Path) -> Result<Vec<FileChecksum>> {
    let mut files = Vec::new();
    let mut pending = vec![path.to_path_buf()];
    while let Some(p) = pending.pop() {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&p)
                .map_err(io_err(&p))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .map_err(io_err(&p))?;
            entries.sort();
            pending.extend(entries.into_iter().rev());
        } else {
            files.push(p);
        }
    }
    files
        .into_iter()
        .map(|f| {
            let mut reader = File::open(&f).map_err(io_err(&f))?;
            let mut hasher = Sha256::new();
            let mut buf = [0u8; 1 << 16];
            let mut bytes = 0u64;
            loop {
                let n = reader.read(&mut buf).map_err(io_err(&f))?;
                if n == 0 {
                    break;
                }
                bytes += n as u64;
                hasher.update(&buf[..n]);
            }
            let shown = f.strip_prefix(relative_to).unwrap_or(&f);
            Ok(FileChecksum {
                path: shown.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(hasher.finalize()),
                bytes,
            })
        })
        .collect()
}

fn manifest(
    stage: Stage,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    root: &Path,
    started: Instant,
) -> Result<Manifest> {
    let collect = |paths: &[&Path]| -> Result<Vec<FileChecksum>> {
        let mut out = Vec::new();
        for p in paths.iter().filter(|p| p.exists()) {
            out.extend(checksum_path(p, root)?);
        }
        Ok(out)
    };
    Ok(Manifest {
        stage,
        seed,
        inputs: collect(inputs)?,
        outputs: collect(outputs)?,
        duration_s: started.elapsed().as_secs_f64(),
    })
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(format!("{}.json", m.stage));
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, m).map_err(|e| PipelineError::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    finish(w, &path)
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| PipelineError::Config(format!("delimiter {c:?} must be a single ASCII character")))
}

/// Raw logs → labelled events → journeys file. Returns the dataset written.
pub fn prepare(cfg: &PrepareConfig, out: &Path) -> Result<Dataset> {
    let delim = delimiter_byte(cfg.delimiter)?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| PipelineError::Config(format!("prepare: {what} is required")))
    };
    let clicks = need(&cfg.click_table, "click_table")?;
    let contexts = need(&cfg.context_table, "context_table")?;
    let tables = LabelTables::from_readers(
        open(&clicks, Stage::Prepare)?,
        open(&contexts, Stage::Prepare)?,
        delim,
    )?;
    let mut records = Vec::new();
    for log in &cfg.logs {
        records.extend(read_raw_log(open(log, Stage::Prepare)?, delim)?);
    }
    let (events, stats) = parse_and_label(records, &tables);
    log::info!(
        "read {} records: {} dropped as non-click, {} unresolved",
        stats.read,
        stats.dropped_non_click,
        stats.unresolved
    );
    let mut rule = cfg.session.clone();
    if let Some(path) = &cfg.channel_genres {
        rule.channel_genres
            .extend(read_channel_genres(open(path, Stage::Prepare)?, delim)?);
    }
    let (mut data, sstats) = build_journeys(&events, &rule)?;
    log::info!(
        "{} journeys; {} zero gaps floored; {} events without genre",
        sstats.journeys,
        sstats.floored_gaps,
        sstats.missing_genre
    );
    if cfg.max_journeys.is_some() || cfg.max_events.is_some() {
        data = truncate_dataset(
            &data,
            cfg.max_journeys.unwrap_or(usize::MAX),
            cfg.max_events.unwrap_or(usize::MAX),
        );
    }
    if let Some(path) = &cfg.labels {
        data.apply_labels(&read_labels(open(path, Stage::Prepare)?, delim)?);
        data.validate()?;
    }
    let mut w = create(out)?;
    write_journeys(&data, &mut w)?;
    finish(w, out)?;
    Ok(data)
}

/// Scenario → journeys file plus a truth file (parameter name → value).
pub fn simulate(scenario: &ScenarioConfig, journeys_out: &Path, truth_out: &Path) -> Result<Dataset> {
    let (data, params) = simulate_dataset(scenario)?;
    let mut w = create(journeys_out)?;
    write_journeys(&data, &mut w)?;
    finish(w, journeys_out)?;
    let truth: BTreeMap<String, f64> = truth_map(scenario, &data, &params);
    let mut w = create(truth_out)?;
    serde_json::to_writer_pretty(&mut w, &truth).map_err(|e| PipelineError::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err(truth_out))?;
    finish(w, truth_out)?;
    Ok(data)
}

pub fn load_journeys(path: &Path, producer: Stage) -> Result<Dataset> {
    Ok(read_journeys(open(path, producer)?)?)
}

pub fn fit(journeys: &Path, mcmc: &McmcConfig, priors: &PriorConfig, draws_dir: &Path) -> Result<()> {
    let data = load_journeys(journeys, Stage::Prepare)?;
    let draws = run_mcmc(&data, priors, mcmc)?;
    for (i, chain) in draws.chains.iter().enumerate() {
        for a in chain
            .acceptance
            .iter()
            .filter(|a| a.kind == crate::sampler::UpdateKind::Metropolis)
        {
            log::info!("chain {}: {} acceptance {:.3}", i + 1, a.block, a.rate());
        }
    }
    if draws_dir.exists() {
        fs::remove_dir_all(draws_dir).map_err(io_err(draws_dir))?;
    }
    write_draws(&draws, draws_dir)?;
    Ok(())
}

fn global_rows(summary: &PosteriorSummary) -> Vec<String> {
    summary
        .rows
        .iter()
        .take_while(|r| !r.name.starts_with("d0["))
        .map(|r| r.name.clone())
        .collect()
}

/// Posterior summary table plus the estimate (sd) / interval rendering of
/// the global parameters.
pub fn diagnose(draws_dir: &Path, summary_out: &Path, table_out: &Path) -> Result<PosteriorSummary> {
    if !draws_dir.join("meta.json").exists() {
        return Err(PipelineError::MissingArtifact {
            stage: Stage::Fit,
            path: draws_dir.to_path_buf(),
        });
    }
    let draws = read_draws(draws_dir)?;
    let summary = summarize(&draws);
    for name in draws.global_names() {
        if let Some(r) = summary.get(name) {
            if r.rhat.is_some_and(|v| v > 1.05) {
                log::warn!("{name}: R-hat {:.3} above 1.05", r.rhat.unwrap_or(f64::NAN));
            }
        }
    }
    let mut w = create(summary_out)?;
    summary
        .write_csv(&mut w)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    finish(w, summary_out)?;
    write_text(table_out, &summary.render_table(draws.global_names()))?;
    Ok(summary)
}

/// Per-customer profiles from the draws, standardized, with optional group
/// correlation export (skipped with a warning when groups are too small).
pub fn profile(
    draws_dir: &Path,
    journeys: &Path,
    estimate: PointEstimate,
    profiles_out: &Path,
    correlations_out: Option<&Path>,
) -> Result<Vec<CustomerProfile>> {
    if !draws_dir.join("meta.json").exists() {
        return Err(PipelineError::MissingArtifact {
            stage: Stage::Fit,
            path: draws_dir.to_path_buf(),
        });
    }
    let data = load_journeys(journeys, Stage::Prepare)?;
    let draws = read_draws(draws_dir)?;
    let summary = summarize(&draws);
    let mut profiles = extract_profiles(&summary, &data, draws.config.model.n_genres, estimate)?;
    standardize(&mut profiles)?;
    let mut w = create(profiles_out)?;
    write_profiles(&profiles, &mut w)?;
    finish(w, profiles_out)?;
    if let Some(out) = correlations_out {
        match group_correlations(&profiles) {
            Ok(gc) => {
                let mut w = create(out)?;
                gc.write_csv(&mut w)?;
                finish(w, out)?;
            }
            Err(e) => log::warn!("group correlations skipped: {e}"),
        }
    }
    Ok(profiles)
}

fn load_profiles(path: &Path) -> Result<Vec<CustomerProfile>> {
    Ok(read_profiles(open(path, Stage::Profile)?)?)
}

fn standardized_rows(profiles: &[CustomerProfile]) -> Result<Vec<Vec<f64>>> {
    profiles
        .iter()
        .map(|p| {
            p.standardized.clone().ok_or_else(|| {
                PipelineError::Data(format!("customer {} has no standardized profile", p.customer_id))
            })
        })
        .collect()
}

/// Ward dendrogram of the standardized profiles, exported as JSON and
/// optionally Newick plus a `k`-cluster label table.
pub fn cluster(
    profiles_path: &Path,
    k: usize,
    dendrogram_out: &Path,
    newick_out: Option<&Path>,
    clusters_out: Option<&Path>,
) -> Result<Dendrogram> {
    let profiles = load_profiles(profiles_path)?;
    let rows = standardized_rows(&profiles)?;
    let leaf_labels = profiles
        .iter()
        .map(|p| match p.label {
            Some(l) => format!("{}_{}", p.customer_id, l.code()),
            None => p.customer_id.clone(),
        })
        .collect();
    let dend = ward_linkage(&distance_matrix(&rows)?)?.with_labels(leaf_labels)?;
    let assignment = dend.cut_tree(k)?;
    let mut w = create(dendrogram_out)?;
    dend.write_json(&mut w)?;
    finish(w, dendrogram_out)?;
    if let Some(out) = newick_out {
        write_text(out, &format!("{}\n", dend.to_newick()))?;
    }
    if let Some(out) = clusters_out {
        let ids: Vec<String> = profiles.iter().map(|p| p.customer_id.clone()).collect();
        let mut w = create(out)?;
        write_cluster_labels(&ids, &assignment, &mut w)?;
        finish(w, out)?;
    }
    Ok(dend)
}

/// Scores every method on model-based profiles and, when `naive_journeys`
/// is given, on stacked raw gaps, using one shared stratified split.
pub fn classify(
    profiles_path: &Path,
    naive_journeys: Option<&Path>,
    cfg: &ClassifyConfig,
    seed: u64,
    out: &Path,
) -> Result<ClassificationReport> {
    let profiles = load_profiles(profiles_path)?;
    let model = FeatureMatrix::from_profiles(&profiles)?;
    let split = split_indices(&model.labels, cfg.split, seed)?;
    let mut rows = run_on_split(&model, &cfg.methods, &cfg.classifier, &split)?;
    if let Some(path) = naive_journeys {
        let data = load_journeys(path, Stage::Prepare)?;
        let naive = naive_features(&data, cfg.naive_mode)?;
        let order: Vec<usize> = model
            .ids
            .iter()
            .map(|id| {
                naive.ids.iter().position(|n| n == id).ok_or_else(|| {
                    PipelineError::Data(format!("customer {id} missing from {}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        let naive = naive.subset(&order);
        if naive.labels != model.labels {
            return Err(PipelineError::Data(
                "labels differ between profiles and journeys".into(),
            ));
        }
        if naive.n_cols() == 0 {
            log::warn!("naive baseline has no columns; skipped");
        } else {
            rows.extend(run_on_split(&naive, &cfg.methods, &cfg.classifier, &split)?);
        }
    }
    let report = ClassificationReport {
        split_ratio: cfg.split,
        seed,
        rows,
    };
    let mut w = create(out)?;
    report.write_csv(&mut w)?;
    finish(w, out)?;
    Ok(report)
}

/// Text report: posterior table of the global parameters, genre effects as
/// percent changes, and the classification table when available.
pub fn render_report(summary: &PosteriorSummary, classification: Option<&ClassificationReport>) -> String {
    let mut out = String::new();
    out.push_str("Posterior summary of global parameters\n\n");
    out.push_str(&summary.render_table(&global_rows(summary)));
    out.push_str("\nGenre effects on mean gap time\n\n");
    let mut k = 1;
    while let Some(r) = summary.get(&format!("beta[{k}]")) {
        let _ = writeln!(
            out,
            "genre {k}: beta = {:.2} -> gaps after such events are {}",
            r.mean,
            describe_percent_change(r.mean)
        );
        k += 1;
    }
    if let Some(report) = classification {
        out.push_str("\nClassification of cancelled vs active customers\n\n");
        out.push_str(&report.render_table());
    }
    out
}

pub fn report(summary_path: &Path, classification: Option<&Path>, out: &Path) -> Result<String> {
    let summary = PosteriorSummary::read_csv(open(summary_path, Stage::Diagnose)?)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let class = match classification {
        Some(p) => Some(ClassificationReport::read_csv(open(p, Stage::Classify)?)?),
        None => None,
    };
    let text = render_report(&summary, class.as_ref());
    write_text(out, &text)?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifests: Vec<Manifest>,
}

/// Runs the configured stages in dependency order.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    config.validate()?;
    let cfg = config.seeded();
    let paths = cfg.paths();
    fs::create_dir_all(&paths.root).map_err(io_err(&paths.root))?;
    let root = paths.root.as_path();
    let mut manifests = Vec::new();
    for stage in cfg.stages() {
        let started = Instant::now();
        log::info!("stage {stage}");
        let m = match stage {
            Stage::Prepare => {
                prepare(&cfg.prepare, &paths.journeys)?;
                let mut inputs: Vec<&Path> = cfg.prepare.logs.iter().map(PathBuf::as_path).collect();
                inputs.extend(
                    [
                        &cfg.prepare.click_table,
                        &cfg.prepare.context_table,
                        &cfg.prepare.labels,
                        &cfg.prepare.channel_genres,
                    ]
                    .into_iter()
                    .flatten()
                    .map(PathBuf::as_path),
                );
                manifest(stage, None, &inputs, &[&paths.journeys], root, started)?
            }
            Stage::Simulate => {
                simulate(&cfg.scenario, &paths.journeys, &paths.truth)?;
                manifest(
                    stage,
                    Some(cfg.scenario.seed),
                    &[],
                    &[&paths.journeys, &paths.truth],
                    root,
                    started,
                )?
            }
            Stage::Fit => {
                fit(&paths.journeys, &cfg.mcmc, &cfg.priors, &paths.draws)?;
                manifest(
                    stage,
                    Some(cfg.mcmc.seed),
                    &[&paths.journeys],
                    &[&paths.draws],
                    root,
                    started,
                )?
            }
            Stage::Diagnose => {
                diagnose(&paths.draws, &paths.summary, &paths.table1)?;
                manifest(
                    stage,
                    None,
                    &[&paths.draws],
                    &[&paths.summary, &paths.table1],
                    root,
                    started,
                )?
            }
            Stage::Profile => {
                profile(
                    &paths.draws,
                    &paths.journeys,
                    cfg.profile.estimate,
                    &paths.profiles,
                    Some(&paths.correlations),
                )?;
                manifest(
                    stage,
                    None,
                    &[&paths.draws, &paths.journeys],
                    &[&paths.profiles, &paths.correlations],
                    root,
                    started,
                )?
            }
            Stage::Cluster => {
                cluster(
                    &paths.profiles,
                    cfg.cluster.k,
                    &paths.dendrogram,
                    Some(&paths.newick),
                    Some(&paths.clusters),
                )?;
                manifest(
                    stage,
                    None,
                    &[&paths.profiles],
                    &[&paths.dendrogram, &paths.newick, &paths.clusters],
                    root,
                    started,
                )?
            }
            Stage::Classify => {
                let naive = cfg.classify.naive.then_some(paths.journeys.as_path());
                classify(
                    &paths.profiles,
                    naive,
                    &cfg.classify,
                    cfg.classify_seed(),
                    &paths.report_csv,
                )?;
                let mut inputs = vec![paths.profiles.as_path()];
                inputs.extend(naive);
                manifest(
                    stage,
                    Some(cfg.classify_seed()),
                    &inputs,
                    &[&paths.report_csv],
                    root,
                    started,
                )?
            }
            Stage::Report => {
                if !paths.summary.exists() {
                    diagnose(&paths.draws, &paths.summary, &paths.table1)?;
                }
                let class = paths.report_csv.exists().then_some(paths.report_csv.as_path());
                report(&paths.summary, class, &paths.report_txt)?;
                let mut inputs = vec![paths.summary.as_path()];
                inputs.extend(class);
                manifest(stage, None, &inputs, &[&paths.report_txt], root, started)?
            }
        };
        write_manifest(&paths.manifests, &m)?;
        manifests.push(m);
    }
    Ok(RunSummary { manifests })
}
