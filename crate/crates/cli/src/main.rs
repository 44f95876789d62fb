use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvprofile::classify::{parse_methods, NaiveMode};
use tvprofile::features::PointEstimate;
use tvprofile::pipeline::{
    self, derive_seed, read_json_file, ClassifyConfig, PipelineConfig, PipelineError, PrepareConfig, Stage,
};
use tvprofile::sampler::McmcConfig;
use tvprofile::simulate::ScenarioConfig;

#[derive(Parser)]
#[command(
    name = "tvprofile",
    version,
    about = "Hierarchical modelling of TV viewing journeys"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sessionize raw click logs into journeys.
    Prepare(PrepareArgs),
    /// Draw journeys from a synthetic scenario.
    Simulate(SimulateArgs),
    /// Run the MCMC sampler.
    Fit(FitArgs),
    /// Posterior summary and convergence diagnostics.
    Diagnose(DiagnoseArgs),
    /// Per-customer behaviour profiles.
    Profile(ProfileArgs),
    /// Ward clustering of profiles.
    Cluster(ClusterArgs),
    /// Churn classification on profiles and raw gaps.
    Classify(ClassifyArgs),
    /// Text report from a posterior summary and classification table.
    Report(ReportArgs),
    /// Run the whole workflow from a configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw log files (comma separated or repeated).
    #[arg(long, required = true, value_delimiter = ',')]
    logs: Vec<PathBuf>,
    /// Click table and context table.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1)]
    tables: Vec<PathBuf>,
    #[arg(long, default_value_t = 1800.0)]
    gap_threshold_s: f64,
    /// Tags that always open a new journey.
    #[arg(long, value_delimiter = ',')]
    power_on: Vec<String>,
    /// `customer_id,label` table.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// `channel,genre` table.
    #[arg(long)]
    channel_genres: Option<PathBuf>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    max_journeys: Option<usize>,
    #[arg(long)]
    max_events: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON; the built-in two-group churn scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    journeys: PathBuf,
    /// MCMC configuration JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rendered table of the global parameters.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    journeys: PathBuf,
    #[arg(long, value_parser = parse_estimate, default_value = "mean")]
    estimate: PointEstimate,
    /// Group correlation matrices (active lower, cancelled upper).
    #[arg(long)]
    correlations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    newick: Option<PathBuf>,
    /// Cluster membership table for the `k`-cut.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    profiles: PathBuf,
    /// Journeys file for the stacked-raw-gaps baseline.
    #[arg(long)]
    naive: Option<PathBuf>,
    #[arg(long, value_parser = parse_naive_mode, default_value = "per_position")]
    naive_mode: NaiveMode,
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "svm,knn,rf,lasso")]
    methods: String,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    classification: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Subset of stages, comma separated.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
}

fn parse_estimate(s: &str) -> Result<PointEstimate, String> {
    match s {
        "mean" => Ok(PointEstimate::Mean),
        "median" => Ok(PointEstimate::Median),
        _ => Err(format!("expected mean or median, got {s:?}")),
    }
}

fn parse_naive_mode(s: &str) -> Result<NaiveMode, String> {
    match s {
        "per_position" => Ok(NaiveMode::PerPosition),
        "global_min" => Ok(NaiveMode::GlobalMin),
        _ => Err(format!("expected per_position or global_min, got {s:?}")),
    }
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Prepare(a) => {
            let [clicks, contexts]: [PathBuf; 2] = a.tables.try_into().map_err(|_| {
                PipelineError::Config("--tables expects two paths: click table, context table".into())
            })?;
            let mut cfg = PrepareConfig {
                logs: a.logs,
                click_table: Some(clicks),
                context_table: Some(contexts),
                labels: a.labels,
                channel_genres: a.channel_genres,
                delimiter: a.delimiter,
                max_journeys: a.max_journeys,
                max_events: a.max_events,
                ..PrepareConfig::default()
            };
            cfg.session.gap_threshold_s = a.gap_threshold_s;
            cfg.session.power_on_tags = a.power_on;
            let data = pipeline::prepare(&cfg, &a.out)?;
            let journeys: usize = data.customers.iter().map(|c| c.journeys.len()).sum();
            log::info!("{} customers, {journeys} journeys", data.customers.len());
        }
        Command::Simulate(a) => {
            let mut scenario: ScenarioConfig = match &a.scenario {
                Some(p) => read_json_file(p)?,
                None => ScenarioConfig::default(),
            };
            if let Some(seed) = a.seed {
                scenario.seed = seed;
            }
            scenario.validate()?;
            pipeline::simulate(&scenario, &a.out, &a.truth)?;
        }
        Command::Fit(a) => {
            let mut mcmc: McmcConfig = match &a.config {
                Some(p) => read_json_file(p)?,
                None => McmcConfig::default(),
            };
            if let Some(seed) = a.seed {
                mcmc.seed = seed;
            }
            mcmc.validate()?;
            pipeline::fit(&a.journeys, &mcmc, &Default::default(), &a.out)?;
        }
        Command::Diagnose(a) => {
            let table = a.table.unwrap_or_else(|| sibling(&a.out, "table1.txt"));
            let summary = pipeline::diagnose(&a.draws, &a.out, &table)?;
            log::info!("{} parameters summarized", summary.rows.len());
        }
        Command::Profile(a) => {
            pipeline::profile(
                &a.draws,
                &a.journeys,
                a.estimate,
                &a.out,
                a.correlations.as_deref(),
            )?;
        }
        Command::Cluster(a) => {
            pipeline::cluster(
                &a.profiles,
                a.k,
                &a.out,
                a.newick.as_deref(),
                a.labels_out.as_deref(),
            )?;
        }
        Command::Classify(a) => {
            let mut cfg = ClassifyConfig {
                split: a.split,
                methods: parse_methods(&a.methods)?,
                naive: a.naive.is_some(),
                naive_mode: a.naive_mode,
                ..ClassifyConfig::default()
            };
            cfg.classifier.forest.seed = derive_seed(a.seed, "classify.forest");
            if let Some(t) = a.trees {
                cfg.classifier.forest.n_trees = t;
            }
            let report = pipeline::classify(&a.profiles, a.naive.as_deref(), &cfg, a.seed, &a.out)?;
            print!("{}", report.render_table());
        }
        Command::Report(a) => {
            let text = pipeline::report(&a.summary, a.classification.as_deref(), &a.out)?;
            print!("{text}");
        }
        Command::Run(a) => {
            let mut cfg = match &a.config {
                Some(p) => read_json_file::<PipelineConfig>(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            if let Some(dir) = a.out_dir {
                cfg.out_dir = dir;
            }
            if !a.stages.is_empty() {
                cfg.stages = Some(
                    a.stages
                        .iter()
                        .map(|s| s.parse())
                        .collect::<Result<Vec<Stage>, _>>()?,
                );
            }
            let summary = pipeline::run_pipeline(&cfg)?;
            for m in &summary.manifests {
                log::info!("{}: {} outputs in {:.1}s", m.stage, m.outputs.len(), m.duration_s);
            }
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
