//! Split-chain R-hat, effective sample size and posterior summaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ChainDraws;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("need at least {need} chains, got {got}")]
    TooFewChains { need: usize, got: usize },
    #[error("need at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
}

fn trimmed(chains: &[Vec<f64>], min_chains: usize) -> Result<Vec<&[f64]>, DiagnosticError> {
    if chains.len() < min_chains {
        return Err(DiagnosticError::TooFewChains {
            need: min_chains,
            got: chains.len(),
        });
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(DiagnosticError::TooFewDraws(n));
    }
    Ok(chains.iter().map(|c| &c[..n]).collect())
}

fn mean(xs: &[f64]) -> f64 {
    // Offsetting by the first value keeps constant inputs exact.
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Split-chain potential scale reduction factor.
///
/// Every chain (trimmed to the shortest) is cut into two halves of
/// `h = ⌊n/2⌋` draws (the middle draw is dropped for odd `n`), giving `2m`
/// sequences. With `W` the mean within-sequence variance and `B/h` the
/// variance of sequence means, `R̂ = sqrt(((h-1)/h · W + B/h) / W)`.
///
/// When every sequence is identical, `B = 0` and `R̂ = sqrt((h-1)/h)`,
/// slightly below one. Returns `None` when all sequences have zero variance.
pub fn rhat_from_chains(chains: &[Vec<f64>]) -> Result<Option<f64>, DiagnosticError> {
    let chains = trimmed(chains, 2)?;
    let n = chains[0].len();
    let h = n / 2;
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..h], &c[n - h..]]).collect();
    let w = halves.iter().map(|s| sample_var(s)).sum::<f64>() / halves.len() as f64;
    if !(w > 0.0) {
        return Ok(None);
    }
    let means: Vec<f64> = halves.iter().map(|s| mean(s)).collect();
    let b_over_h = sample_var(&means);
    let hf = h as f64;
    let var_plus = (hf - 1.0) / hf * w + b_over_h;
    Ok(Some((var_plus / w).sqrt()))
}

pub fn rhat(draws: &ChainDraws, param: &str) -> Result<Option<f64>, DiagnosticError> {
    let chains = draws
        .chains_of(param)
        .ok_or_else(|| DiagnosticError::UnknownParameter(param.to_string()))?;
    rhat_from_chains(&chains)
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size using Geyer's initial positive sequence
/// with the monotone correction. Autocorrelations combine the within-chain
/// autocovariances with the between-chain variance. Returns `None` for
/// constant draws. The estimate is capped at `N·log10(N)` for `N` total draws.
pub fn ess_from_chains(chains: &[Vec<f64>]) -> Result<Option<f64>, DiagnosticError> {
    let chains = trimmed(chains, 1)?;
    let m = chains.len();
    let n = chains[0].len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| autocov(c, *mu, 0))
        .collect();
    let w = acov0.iter().sum::<f64>() / m as f64 * nf / (nf - 1.0);
    let b_over_n = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if !(var_plus > 0.0) {
        return Ok(None);
    }
    let rho = |lag: usize| -> f64 {
        if lag == 0 {
            return 1.0;
        }
        let mean_acov = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut tau_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau_sum += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * tau_sum).max(1.0 / (m as f64 * nf).log10());
    let total = (m * n) as f64;
    Ok(Some((total / tau).min(total * total.log10())))
}

pub fn ess(draws: &ChainDraws, param: &str) -> Result<Option<f64>, DiagnosticError> {
    let chains = draws
        .chains_of(param)
        .ok_or_else(|| DiagnosticError::UnknownParameter(param.to_string()))?;
    ess_from_chains(&chains)
}

/// Sample quantile by linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

impl ParamSummary {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Pooled-chain posterior summary of every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub rows: Vec<ParamSummary>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PosteriorSummary {
    pub fn new(rows: Vec<ParamSummary>) -> Self {
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.clone(), i))
            .collect();
        Self { rows, index }
    }

    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.index.get(name).map(|i| &self.rows[*i])
    }

    /// Delimited export: one row per parameter.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "parameter",
            "mean",
            "sd",
            "median",
            "lower_2.5",
            "upper_97.5",
            "rhat",
            "ess",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        for r in &self.rows {
            wtr.write_record([
                r.name.clone(),
                r.mean.to_string(),
                r.sd.to_string(),
                r.median.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                opt(r.rhat),
                opt(r.ess),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
            let opt = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
            rows.push(ParamSummary {
                name: rec.get(0).unwrap_or_default().to_string(),
                mean: num(1),
                sd: num(2),
                median: num(3),
                lower: num(4),
                upper: num(5),
                rhat: opt(6),
                ess: opt(7),
            });
        }
        Ok(Self::new(rows))
    }

    /// Estimate (sd) plus 95% interval table for the named parameters.
    pub fn render_table<S: AsRef<str>>(&self, names: &[S]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>16} {:>10} {:>10} {:>8} {:>8}",
            "Parameter", "Estimate (sd)", "Lower 95%", "Upper 95%", "R-hat", "ESS"
        );
        for name in names {
            let Some(r) = self.get(name.as_ref()) else {
                continue;
            };
            let _ = writeln!(
                out,
                "{:<14} {:>16} {:>10} {:>10} {:>8} {:>8}",
                r.name,
                format_estimate(r.mean, r.sd),
                format!("{:.2}", r.lower),
                format!("{:.2}", r.upper),
                r.rhat.map_or("NA".into(), |v| format!("{v:.3}")),
                r.ess.map_or("NA".into(), |v| format!("{v:.0}")),
            );
        }
        out.push_str(
            "Estimate = posterior mean, sd = posterior standard deviation; interval bounds \
             are type-7 (linear interpolation) 2.5% and 97.5% quantiles of the pooled draws.\n",
        );
        out
    }
}

/// `"2.49 (0.06)"`.
pub fn format_estimate(mean: f64, sd: f64) -> String {
    format!("{mean:.2} ({sd:.2})")
}

fn summarize_values(name: &str, chains: &[Vec<f64>]) -> ParamSummary {
    let mut pooled: Vec<f64> = chains.concat();
    let m = mean(&pooled);
    let sd = if pooled.len() > 1 {
        sample_var(&pooled).sqrt()
    } else {
        0.0
    };
    pooled.sort_by(f64::total_cmp);
    ParamSummary {
        name: name.to_string(),
        mean: m,
        sd,
        median: quantile_type7(&pooled, 0.5),
        lower: quantile_type7(&pooled, 0.025),
        upper: quantile_type7(&pooled, 0.975),
        rhat: rhat_from_chains(chains).ok().flatten(),
        ess: ess_from_chains(chains).ok().flatten(),
    }
}

/// Pooled mean, sd, median, type-7 2.5%/97.5% quantiles, split R-hat and ESS
/// for every parameter.
pub fn summarize(draws: &ChainDraws) -> PosteriorSummary {
    use rayon::prelude::*;
    let rows = (0..draws.n_params())
        .into_par_iter()
        .map(|idx| {
            let chains: Vec<Vec<f64>> = (0..draws.n_chains()).map(|c| draws.column(c, idx)).collect();
            summarize_values(&draws.names[idx], &chains)
        })
        .collect();
    PosteriorSummary::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_draws(seed: u64, n: usize, mean: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn ar1(seed: u64, n: usize, rho: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, (1.0 - rho * rho).sqrt()).unwrap();
        let mut x = d.sample(&mut rng) / (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                x = rho * x + d.sample(&mut rng);
                x
            })
            .collect()
    }

    #[test]
    fn rhat_iid_chains_near_one() {
        let chains = vec![normal_draws(1, 10_000, 0.0), normal_draws(2, 10_000, 0.0)];
        let r = rhat_from_chains(&chains).unwrap().unwrap();
        assert!(r < 1.01, "{r}");
    }

    #[test]
    fn rhat_separated_chains() {
        let chains = vec![normal_draws(1, 1000, 0.0), normal_draws(2, 1000, 10.0)];
        let r = rhat_from_chains(&chains).unwrap().unwrap();
        assert!(r > 3.0, "{r}");
    }

    #[test]
    fn rhat_identical_halves() {
        let half = normal_draws(5, 50, 0.0);
        let chain = [half.clone(), half].concat();
        let r = rhat_from_chains(&[chain.clone(), chain]).unwrap().unwrap();
        let expected = (49.0f64 / 50.0).sqrt();
        assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
    }

    #[test]
    fn rhat_preconditions() {
        assert!(matches!(
            rhat_from_chains(&[vec![1.0; 10]]),
            Err(DiagnosticError::TooFewChains { .. })
        ));
        assert!(matches!(
            rhat_from_chains(&[vec![1.0; 3], vec![1.0; 3]]),
            Err(DiagnosticError::TooFewDraws(3))
        ));
        assert_eq!(rhat_from_chains(&[vec![2.0; 10], vec![2.0; 10]]).unwrap(), None);
    }

    #[test]
    fn ess_iid() {
        let chains = vec![normal_draws(11, 5000, 0.0), normal_draws(12, 5000, 0.0)];
        let e = ess_from_chains(&chains).unwrap().unwrap();
        assert!((e / 10_000.0 - 1.0).abs() < 0.1, "{e}");
    }

    #[test]
    fn ess_ar1() {
        let chains = vec![ar1(21, 20_000, 0.9), ar1(22, 20_000, 0.9)];
        let e = ess_from_chains(&chains).unwrap().unwrap();
        let expected = 40_000.0 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.25, "{e} vs {expected}");
    }

    #[test]
    fn ess_constant() {
        assert_eq!(ess_from_chains(&[vec![3.0; 100], vec![3.0; 100]]).unwrap(), None);
    }

    #[test]
    fn quantiles_type7() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile_type7(&xs, 0.5), 50.5);
        assert!((quantile_type7(&xs, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile_type7(&xs, 0.975) - 97.525).abs() < 1e-12);
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0), 100.0);
    }

    #[test]
    fn constant_parameter_summary() {
        let s = summarize_values("x", &[vec![5.0; 10], vec![5.0; 10]]);
        assert_eq!((s.mean, s.sd, s.lower, s.upper), (5.0, 0.0, 5.0, 5.0));
        assert_eq!(s.rhat, None);
        assert_eq!(s.ess, None);
        let s = summarize_values("x", &[vec![0.1; 7]]);
        assert_eq!(s.mean, 0.1);
    }

    #[test]
    fn table_row_format() {
        let summary = PosteriorSummary::new(vec![ParamSummary {
            name: "delta".into(),
            mean: 2.49,
            sd: 0.06,
            median: 2.49,
            lower: 2.37,
            upper: 2.61,
            rhat: Some(1.001),
            ess: Some(5400.0),
        }]);
        let table = summary.render_table(&["delta"]);
        let row = table.lines().nth(1).unwrap();
        assert!(row.starts_with("delta"));
        assert!(row.contains("2.49 (0.06)"));
        assert!(row.contains("2.37") && row.contains("2.61"));
        assert!(table.contains("type-7"));
    }

    #[test]
    fn csv_round_trip() {
        let summary = PosteriorSummary::new(vec![ParamSummary {
            name: "b[1,2]".into(),
            mean: -0.25,
            sd: 0.5,
            median: -0.2,
            lower: -1.0,
            upper: 0.75,
            rhat: None,
            ess: Some(10.5),
        }]);
        let mut buf = Vec::new();
        summary.write_csv(&mut buf).unwrap();
        let back = PosteriorSummary::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, summary);
        assert_eq!(back.get("b[1,2]").unwrap().ess, Some(10.5));
    }
}
