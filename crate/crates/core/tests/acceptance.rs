//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, Gamma};

use tvprofile::classify::{
    lasso_fit_raw, naive_features, poly_kernel, run_on_split, smo, split_indices, ClassificationReport,
    ClassifierConfig, Confusion, FeatureMatrix, FeatureSource, Method, NaiveMode, ReportRow,
};
use tvprofile::cluster::{distance_matrix, ward_linkage};
use tvprofile::event_log::Dataset;
use tvprofile::features::{
    describe_percent_change, extract_profiles, standardize, CustomerProfile, PointEstimate,
};
use tvprofile::model::{log_pdf_gamma_mean_disp, log_pmf_ztpois, PriorConfig};
use tvprofile::pipeline::{run_pipeline, PipelineConfig, Stage};
use tvprofile::sampler::{
    ess_from_chains, run_mcmc, summarize, ChainDraws, McmcConfig, ParamSummary, PosteriorSummary,
};
use tvprofile::simulate::{churn_scenario, reference_scenario, simulate_dataset, truth_map};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// AC1 ---------------------------------------------------------------------

fn ac1_densities() -> Outcome {
    let mut worst_sum = 0.0f64;
    for lambda in [0.1, 1.0, 5.0, 20.0] {
        let total: f64 = (1..=500u64)
            .map(|n| log_pmf_ztpois(n, lambda).unwrap().exp())
            .sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_gamma = 0.0f64;
    let mut at = 0.0;
    for _ in 0..1000 {
        let mu = rng.random_range(0.2..60.0);
        let psi = rng.random_range(0.1..25.0);
        let draw: f64 = rand_distr::Gamma::new(psi, mu / psi).unwrap().sample(&mut rng);
        let t = draw.max(1e-6);
        let ours = log_pdf_gamma_mean_disp(t, mu, psi).unwrap();
        let oracle = Gamma::new(psi, psi / mu).unwrap().ln_pdf(t);
        if (ours - oracle).abs() > worst_gamma {
            worst_gamma = (ours - oracle).abs();
            at = oracle;
        }
    }
    outcome(
        worst_sum <= 1e-8 && worst_gamma <= 1e-12,
        format!("max |sum pmf - 1| = {worst_sum:.2e}; max |log-density - oracle| = {worst_gamma:.2e} (at log-density {at:.1})"),
    )
}

// AC2 ---------------------------------------------------------------------

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Monte-Carlo standard errors of the mean and sd of a transformed chain set.
fn mcse_mean_sd(chains: &[Vec<f64>]) -> (f64, f64, f64, f64) {
    let pooled: Vec<f64> = chains.concat();
    let (m, sd) = mean_sd(&pooled);
    let ess = ess_from_chains(chains).unwrap().unwrap();
    let sq: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|v| (v - m).powi(2)).collect())
        .collect();
    let sq_pooled: Vec<f64> = sq.concat();
    let (_, sq_sd) = mean_sd(&sq_pooled);
    let ess_sq = ess_from_chains(&sq).unwrap().unwrap();
    let se_var = sq_sd / ess_sq.sqrt();
    (m, sd / ess.sqrt(), sd, se_var / (2.0 * sd))
}

fn ac2_prior_recovery() -> Outcome {
    let (data, _) = simulate_dataset(&reference_scenario(6, 5, 10, 3)).unwrap();
    let priors = PriorConfig {
        normal_var: 1.0,
        psi_shape: 2.0,
        psi_rate: 2.0,
        halfcauchy_scale: 1.0,
    };
    let cfg = McmcConfig {
        prior_only: true,
        seed: 17,
        ..McmcConfig::default()
    };
    let draws = run_mcmc(&data, &priors, &cfg).unwrap();
    let n = draws.n_chains() * draws.draws_per_chain();
    // δ, β₁ ~ N(0, 1); log σ_d has mean ln(scale) = 0 and sd π/2 under the
    // half-Cauchy, whose own moments do not exist.
    let checks: [(&str, fn(f64) -> f64, f64, f64); 3] = [
        ("delta", |x| x, 0.0, 1.0),
        ("beta[1]", |x| x, 0.0, 1.0),
        ("sigma_d", f64::ln, 0.0, std::f64::consts::FRAC_PI_2),
    ];
    let mut pass = n == 6000;
    let mut parts = vec![format!("{n} draws")];
    for (name, f, true_mean, true_sd) in checks {
        let chains: Vec<Vec<f64>> = draws
            .chains_of(name)
            .unwrap()
            .into_iter()
            .map(|c| c.into_iter().map(f).collect())
            .collect();
        let (m, se_m, sd, se_sd) = mcse_mean_sd(&chains);
        let zm = (m - true_mean) / se_m;
        let zs = (sd - true_sd) / se_sd;
        pass &= zm.abs() <= 3.0 && zs.abs() <= 3.0;
        let shown = if name == "sigma_d" { "log sigma_d" } else { name };
        parts.push(format!(
            "{shown}: mean {m:.3} (z {zm:+.2}), sd {sd:.3} (z {zs:+.2})"
        ));
    }
    outcome(pass, parts.join("; "))
}

// AC3 / AC4 ---------------------------------------------------------------

fn fit_summary(data: &Dataset, cfg: &McmcConfig) -> (ChainDraws, PosteriorSummary) {
    let draws = run_mcmc(data, &PriorConfig::default(), cfg).unwrap();
    let summary = summarize(&draws);
    (draws, summary)
}

fn ac3_recovery() -> Outcome {
    let scenario = reference_scenario(40, 50, 50, 2024);
    let (data, params) = simulate_dataset(&scenario).unwrap();
    let truth = truth_map(&scenario, &data, &params);
    let (draws, summary) = fit_summary(&data, &McmcConfig::default());
    let get = |name: &str| -> &ParamSummary { summary.get(name).unwrap() };
    let delta_ok = get("delta").covers(truth["delta"]);
    let beta_cov = (1..=8)
        .filter(|k| {
            let name = format!("beta[{k}]");
            get(&name).covers(truth[&name])
        })
        .count();
    let worst_rhat = draws
        .global_names()
        .iter()
        .map(|n| get(n).rhat.unwrap_or(f64::INFINITY))
        .fold(0.0f64, f64::max);
    let d = get("delta");
    outcome(
        delta_ok && beta_cov >= 6 && worst_rhat < 1.05,
        format!(
            "delta {:.3} [{:.3}, {:.3}] vs {:.2}; beta covered {beta_cov}/8; max global R-hat {worst_rhat:.3}",
            d.mean, d.lower, d.upper, truth["delta"]
        ),
    )
}

fn ac4_coverage() -> Outcome {
    let covered: Vec<bool> = (0..20u64)
        .into_par_iter()
        .map(|r| {
            let scenario = reference_scenario(10, 20, 50, 500 + r);
            let (data, _) = simulate_dataset(&scenario).unwrap();
            let cfg = McmcConfig {
                seed: 9000 + r,
                ..McmcConfig::default()
            };
            let (_, summary) = fit_summary(&data, &cfg);
            summary
                .get("delta")
                .unwrap()
                .covers(scenario.groups[0].globals.delta)
        })
        .collect();
    let hits = covered.iter().filter(|c| **c).count();
    outcome(
        hits >= 16,
        format!("delta 95% interval covers truth in {hits}/20 replicates"),
    )
}

// AC5 ---------------------------------------------------------------------

/// Greedy Ward by direct within-cluster sum-of-squares increments.
fn brute_ward(points: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut clusters: BTreeMap<usize, Vec<usize>> = (0..n).map(|i| (i, vec![i])).collect();
    let sse = |members: &[usize]| -> f64 {
        let dim = points[0].len();
        let mut c = vec![0.0; dim];
        for &m in members {
            for (cj, x) in c.iter_mut().zip(&points[m]) {
                *cj += x / members.len() as f64;
            }
        }
        members
            .iter()
            .map(|&m| {
                points[m]
                    .iter()
                    .zip(&c)
                    .map(|(x, cj)| (x - cj).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut merges = Vec::new();
    for step in 0..n - 1 {
        let ids: Vec<usize> = clusters.keys().copied().collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let mut joined = clusters[&a].clone();
                joined.extend(&clusters[&b]);
                let inc = sse(&joined) - sse(&clusters[&a]) - sse(&clusters[&b]);
                if best.is_none_or(|(v, _, _)| inc < v) {
                    best = Some((inc, a, b));
                }
            }
        }
        let (inc, a, b) = best.unwrap();
        let mut joined = clusters.remove(&a).unwrap();
        joined.extend(clusters.remove(&b).unwrap());
        clusters.insert(n + step, joined);
        merges.push((a, b, (2.0 * inc).sqrt()));
    }
    merges
}

fn ac5_ward() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    let trials = 300;
    for _ in 0..trials {
        let n = rng.random_range(2..=6);
        let dim = rng.random_range(1..=4);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0)
                    .collect()
            })
            .collect();
        let dend = ward_linkage(&distance_matrix(&points).unwrap()).unwrap();
        let oracle = brute_ward(&points);
        let same = dend.merges.len() == oracle.len()
            && dend.merges.iter().zip(&oracle).all(|(m, &(a, b, h))| {
                (m.a.min(m.b), m.a.max(m.b)) == (a, b) && (m.height - h).abs() <= 1e-9 * h.max(1.0)
            });
        let monotone = dend.merges.windows(2).all(|w| w[0].height <= w[1].height + 1e-12);
        let cuts = (1..=n).all(|k| {
            let labels = dend.cut_tree(k).unwrap();
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            distinct.len() == k
        });
        if !(same && monotone && cuts) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{trials} random sets (n <= 6): {failures} mismatches"),
    )
}

// AC6 / AC7 ---------------------------------------------------------------

fn fitted_profiles(data: &Dataset) -> Vec<CustomerProfile> {
    let (draws, summary) = fit_summary(data, &McmcConfig::default());
    let mut profiles =
        extract_profiles(&summary, data, draws.config.model.n_genres, PointEstimate::Mean).unwrap();
    standardize(&mut profiles).unwrap();
    profiles
}

struct ClassifierRun {
    model_rows: Vec<ReportRow>,
    naive_rows: Vec<ReportRow>,
    permuted_mean: BTreeMap<Method, f64>,
    n_train: usize,
    n_test: usize,
}

fn classifier_run() -> ClassifierRun {
    let (data, _) = simulate_dataset(&churn_scenario(40, 30, 50, 77)).unwrap();
    let profiles = fitted_profiles(&data);
    let model = FeatureMatrix::from_profiles(&profiles).unwrap();
    let cfg = ClassifierConfig::default();
    let split = split_indices(&model.labels, 0.7, 42).unwrap();
    let model_rows = run_on_split(&model, &Method::ALL, &cfg, &split).unwrap();

    let naive_all = naive_features(&data, NaiveMode::PerPosition).unwrap();
    let order: Vec<usize> = model
        .ids
        .iter()
        .map(|id| naive_all.ids.iter().position(|n| n == id).unwrap())
        .collect();
    let naive = naive_all.subset(&order);
    let naive_rows = run_on_split(&naive, &Method::ALL, &cfg, &split).unwrap();

    let per_split: Vec<Vec<ReportRow>> = (0..50u64)
        .into_par_iter()
        .map(|r| {
            let mut permuted = model.clone();
            permuted
                .labels
                .shuffle(&mut ChaCha8Rng::seed_from_u64(10_000 + r));
            let s = split_indices(&permuted.labels, 0.7, 20_000 + r).unwrap();
            run_on_split(&permuted, &Method::ALL, &cfg, &s).unwrap()
        })
        .collect();
    let permuted_mean = Method::ALL
        .iter()
        .map(|&m| {
            let accs: Vec<f64> = per_split
                .iter()
                .flat_map(|rows| {
                    rows.iter()
                        .filter(move |r| r.method == m)
                        .map(ReportRow::accuracy)
                })
                .collect();
            (m, accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    ClassifierRun {
        model_rows,
        naive_rows,
        permuted_mean,
        n_train: split.train.len(),
        n_test: split.test.len(),
    }
}

fn ac6_classifiers(run: &ClassifierRun) -> Outcome {
    let accs: Vec<String> = run
        .model_rows
        .iter()
        .map(|r| format!("{} {:.2}", r.method.as_str(), r.accuracy()))
        .collect();
    let perm: Vec<String> = run
        .permuted_mean
        .iter()
        .map(|(m, a)| format!("{} {a:.2}", m.as_str()))
        .collect();
    let pass = run.n_train == 28
        && run.n_test == 12
        && run.model_rows.len() == 4
        && run.model_rows.iter().all(|r| r.accuracy() >= 0.85)
        && run.permuted_mean.values().all(|a| (0.3..=0.7).contains(a));
    outcome(
        pass,
        format!(
            "{}/{} split; test accuracy: {}; permuted-label mean over 50 resplits: {}",
            run.n_train,
            run.n_test,
            accs.join(", "),
            perm.join(", ")
        ),
    )
}

fn ac7_model_vs_naive(run: &ClassifierRun) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let model = run.model_rows.iter().find(|r| r.method == m).unwrap().accuracy();
        let naive = run.naive_rows.iter().find(|r| r.method == m).unwrap().accuracy();
        if model >= naive {
            wins += 1;
        }
        parts.push(format!("{} {model:.2} vs {naive:.2}", m.as_str()));
    }
    outcome(
        wins >= 3,
        format!("model-based >= raw in {wins}/4 methods ({})", parts.join(", ")),
    )
}

// AC8 ---------------------------------------------------------------------

fn ac8_kkt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_lasso = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(30..80);
        let p = rng.random_range(2..12);
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let y: Vec<bool> = x
            .iter()
            .map(|r| {
                let eta: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
                rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let lambda = rng.random_range(0.002..0.15);
        let fit = lasso_fit_raw(&x, &y, lambda);
        let resid: Vec<f64> = x
            .iter()
            .zip(&y)
            .map(|(r, &yi)| {
                let eta = fit.intercept + r.iter().zip(&fit.coef).map(|(a, b)| a * b).sum::<f64>();
                f64::from(u8::from(yi)) - 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let nf = n as f64;
        worst_lasso = worst_lasso.max((resid.iter().sum::<f64>() / nf).abs());
        for j in 0..p {
            let g = -x.iter().zip(&resid).map(|(r, e)| r[j] * e).sum::<f64>() / nf;
            let viol = if fit.coef[j] == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * fit.coef[j].signum()).abs()
            };
            worst_lasso = worst_lasso.max(viol);
        }
    }
    let mut worst_sum = 0.0f64;
    let mut worst_box = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(10..50);
        let p = rng.random_range(1..6);
        let cost = rng.random_range(0.1..10.0);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut y: Vec<f64> = x
            .iter()
            .map(|r| {
                if r[0] + 0.5 * rng.sample::<f64, _>(StandardNormal) > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let gamma = 1.0 / p as f64;
        let k: Vec<Vec<f64>> = x
            .iter()
            .map(|a| x.iter().map(|b| poly_kernel(a, b, gamma, 0.0, 3)).collect())
            .collect();
        let sol = smo(&k, &y, cost, 1_000_000);
        worst_sum = worst_sum.max(sol.alpha.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs());
        for a in &sol.alpha {
            worst_box = worst_box.max((-a).max(a - cost).max(0.0));
        }
    }
    outcome(
        worst_lasso <= 1e-5 && worst_sum <= 1e-6 && worst_box == 0.0,
        format!(
            "LASSO max KKT violation {worst_lasso:.2e}; SVM max |sum alpha y| {worst_sum:.2e}, max box violation {worst_box:.1e}"
        ),
    )
}

// AC9 ---------------------------------------------------------------------

fn pipeline_outputs(threads: usize, dir: &std::path::Path) -> Vec<(Stage, Vec<(String, String)>)> {
    let mut cfg = PipelineConfig {
        seed: 99,
        out_dir: dir.to_path_buf(),
        scenario: churn_scenario(14, 6, 15, 0),
        mcmc: McmcConfig {
            n_adapt: 200,
            n_burnin: 300,
            n_iter: 1000,
            thin: 2,
            ..McmcConfig::default()
        },
        ..PipelineConfig::default()
    };
    cfg.classify.classifier.forest.n_trees = 200;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let summary = pool.install(|| run_pipeline(&cfg)).unwrap();
    summary
        .manifests
        .into_iter()
        .map(|m| {
            (
                m.stage,
                m.outputs.into_iter().map(|f| (f.path, f.sha256)).collect(),
            )
        })
        .collect()
}

fn ac9_determinism() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline_outputs(4, dirs[0].path());
    let b = pipeline_outputs(4, dirs[1].path());
    let c = pipeline_outputs(1, dirs[2].path());
    let files: usize = a.iter().map(|(_, o)| o.len()).sum();
    let stages: Vec<&str> = a.iter().map(|(s, _)| s.as_str()).collect();
    outcome(
        a == b && a == c && files > 0,
        format!(
            "{files} output files over stages [{}]: identical across reruns {}, across 4 vs 1 threads {}",
            stages.join(", "),
            a == b,
            a == c
        ),
    )
}

// AC10 --------------------------------------------------------------------

fn ac10_reports() -> Outcome {
    let summary = PosteriorSummary::new(vec![ParamSummary {
        name: "delta".into(),
        mean: 2.49,
        sd: 0.06,
        median: 2.49,
        lower: 2.37,
        upper: 2.61,
        rhat: Some(1.001),
        ess: Some(2500.0),
    }]);
    let t1 = summary.render_table(&["delta"]);
    let t1_ok = [
        "Estimate (sd)",
        "Lower 95%",
        "Upper 95%",
        "2.49 (0.06)",
        "2.37",
        "2.61",
    ]
    .iter()
    .all(|s| t1.contains(s));

    let confusion = Confusion {
        tp: 5,
        fn_: 0,
        fp: 1,
        tn: 6,
    };
    let rows = Method::ALL
        .iter()
        .flat_map(|&m| {
            [FeatureSource::ModelBased, FeatureSource::Naive].map(|source| ReportRow {
                method: m,
                source,
                n_train: 28,
                n_test: 12,
                confusion,
            })
        })
        .collect();
    let t2 = ClassificationReport {
        split_ratio: 0.7,
        seed: 42,
        rows,
    }
    .render_table();
    let t2_ok = ["Model-based", "Raw data", "Acc", "TPR", "FPR"]
        .iter()
        .all(|s| t2.contains(s))
        && Method::ALL.iter().all(|m| t2.contains(m.display_name()))
        && t2.contains("0.92")
        && t2.contains("1.00")
        && t2.contains("0.14");

    let p1 = describe_percent_change(-0.48);
    let p2 = describe_percent_change(-0.94);
    let pc_ok = p1 == "38% shorter" && p2 == "61% shorter";
    outcome(
        t1_ok && t2_ok && pc_ok,
        format!("summary table {t1_ok}; classification table {t2_ok}; -0.48 -> {p1}; -0.94 -> {p2}"),
    )
}

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let want = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut failed = 0;
    let mut report = |id: &str, f: &mut dyn FnMut() -> Outcome| {
        if !want(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{id} {status} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    };
    report("AC1", &mut ac1_densities);
    report("AC2", &mut ac2_prior_recovery);
    report("AC3", &mut ac3_recovery);
    report("AC4", &mut ac4_coverage);
    report("AC5", &mut ac5_ward);
    let mut classifier: Option<ClassifierRun> = None;
    report("AC6", &mut || {
        ac6_classifiers(classifier.insert(classifier_run()))
    });
    report("AC7", &mut || {
        ac7_model_vs_naive(classifier.get_or_insert_with(classifier_run))
    });
    report("AC8", &mut ac8_kkt);
    report("AC9", &mut ac9_determinism);
    report("AC10", &mut ac10_reports);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
