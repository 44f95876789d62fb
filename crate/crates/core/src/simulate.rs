//! Synthetic journeys drawn from the hierarchical count-and-gap model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{ChurnLabel, CustomerJourneys, Dataset, Journey, JourneyEvent};
use crate::model::{
    clip_log_mean, ArLevel, CustomerParams, GlobalParams, HierarchicalParams, ModelSpec, ParamLayout,
    SessionParams,
};

/// Below this rate zero-truncated draws invert the truncated CDF; above it
/// zeros are rare enough that rejection is cheaper.
const ZTP_INVERSION_LIMIT: f64 = 30.0;

/// Break inserted between consecutive simulated journeys.
const JOURNEY_BREAK_MS: i64 = 3_600_000;

pub const SIM_TAG: &str = "E";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("zero-truncated Poisson rate must be positive and finite, got {0}")]
    Domain(f64),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("customer {customer} journey {journey}: {msg}")]
    NonFinite {
        customer: String,
        journey: usize,
        msg: String,
    },
}

/// Exact draw from Poisson(λ) conditioned on being at least one.
pub fn sample_ztpois<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64, SimulationError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SimulationError::Domain(lambda));
    }
    if lambda < ZTP_INVERSION_LIMIT {
        // P(N = n | N ≥ 1) = e^{-λ} λ^n / (n! (1 - e^{-λ})), walked upwards.
        let u: f64 = rng.random();
        let mut p = lambda / lambda.exp_m1();
        let mut cdf = p;
        let mut n = 1u64;
        while u > cdf {
            n += 1;
            p *= lambda / n as f64;
            let next = cdf + p;
            if next == cdf {
                break;
            }
            cdf = next;
        }
        Ok(n)
    } else {
        let pois = rand_distr::Poisson::new(lambda).map_err(|_| SimulationError::Domain(lambda))?;
        loop {
            let n = pois.sample(rng) as u64;
            if n >= 1 {
                return Ok(n);
            }
        }
    }
}

/// Customer-level population of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ChurnLabel>,
    pub fraction: f64,
    pub globals: GlobalParams,
    /// `φ_c ~ N(phi_mean, phi_sd²)`.
    pub phi_mean: f64,
    pub phi_sd: f64,
    /// `ψ_c ~ Gamma(psi_shape, rate = psi_rate)`.
    pub psi_shape: f64,
    pub psi_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_customers: usize,
    /// Journeys per customer.
    pub n_journeys: usize,
    #[serde(default = "default_genres")]
    pub n_genres: usize,
    /// Per-event genre probabilities (uniform when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre_probs: Option<Vec<f64>>,
    /// Event counts above this are truncated.
    pub max_events: usize,
    #[serde(default)]
    pub ar_level: ArLevel,
    pub groups: Vec<GroupConfig>,
    pub seed: u64,
}

fn default_genres() -> usize {
    crate::model::DEFAULT_GENRES
}

impl ScenarioConfig {
    /// Model structure implied by the scenario.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            n_genres: self.n_genres,
            count_covariate: self.groups.first().is_some_and(|g| g.globals.delta1.is_some()),
            ar_level: self.ar_level,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Scenario(m));
        if self.n_customers == 0 || self.n_journeys == 0 || self.max_events == 0 {
            return bad("customer, journey and event caps must be at least 1".into());
        }
        if self.n_genres == 0 || self.n_genres > u8::MAX as usize {
            return bad(format!("genre count {} out of range", self.n_genres));
        }
        if let Some(p) = &self.genre_probs {
            if p.len() != self.n_genres {
                return bad(format!(
                    "{} genre probabilities for {} genres",
                    p.len(),
                    self.n_genres
                ));
            }
            if p.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || p.iter().sum::<f64>() <= 0.0 {
                return bad("genre probabilities must be non-negative with positive sum".into());
            }
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let total: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || self.groups.iter().any(|g| !(g.fraction >= 0.0)) {
            return bad(format!(
                "group fractions must be non-negative and sum to 1 (sum {total})"
            ));
        }
        let labelled = self.groups.iter().filter(|g| g.label.is_some()).count();
        if labelled != 0 && labelled != self.groups.len() {
            return bad("either every group or no group carries a label".into());
        }
        let covariate = self.model_spec().count_covariate;
        for (i, g) in self.groups.iter().enumerate() {
            let gl = &g.globals;
            if gl.beta.len() != self.n_genres || gl.sigma_b.len() != self.n_genres {
                return bad(format!(
                    "group {}: beta/sigma_b must have {} entries",
                    i + 1,
                    self.n_genres
                ));
            }
            if (gl.delta1.is_some() && gl.sigma_d1.is_some()) != covariate
                || gl.delta1.is_some() != gl.sigma_d1.is_some()
            {
                return bad(format!(
                    "group {}: count covariate settings differ between groups",
                    i + 1
                ));
            }
            let sds = [gl.sigma_d, gl.sigma_p, g.phi_sd]
                .into_iter()
                .chain(gl.sigma_b.iter().copied())
                .chain(gl.sigma_d1);
            let locs = [gl.delta, g.phi_mean]
                .into_iter()
                .chain(gl.beta.iter().copied())
                .chain(gl.delta1);
            if sds.clone().any(|s| !(s >= 0.0 && s.is_finite())) || locs.clone().any(|x| !x.is_finite()) {
                return bad(format!(
                    "group {}: parameters must be finite with non-negative sds",
                    i + 1
                ));
            }
            if !(g.psi_shape > 0.0 && g.psi_rate > 0.0 && g.psi_shape.is_finite() && g.psi_rate.is_finite()) {
                return bad(format!("group {}: psi shape and rate must be positive", i + 1));
            }
        }
        Ok(())
    }

    /// Customers per group by largest remainder, summing to `n_customers`.
    pub fn group_sizes(&self) -> Vec<usize> {
        let n = self.n_customers as f64;
        let raw: Vec<f64> = self.groups.iter().map(|g| g.fraction * n).collect();
        let mut sizes: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            (raw[b] - raw[b].floor())
                .total_cmp(&(raw[a] - raw[a].floor()))
                .then(a.cmp(&b))
        });
        let mut left = self.n_customers - sizes.iter().sum::<usize>();
        for i in order.into_iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Genre effects of realistic magnitude (log seconds relative to the
/// overall gap level), one per genre.
pub const REFERENCE_BETA: [f64; 8] = [-0.19, -0.15, -0.24, -0.06, -0.48, -0.31, 0.03, -0.94];

fn reference_group(label: Option<ChurnLabel>, fraction: f64, delta: f64, beta_shift: f64) -> GroupConfig {
    GroupConfig {
        label,
        fraction,
        globals: GlobalParams {
            delta,
            beta: REFERENCE_BETA.iter().map(|b| b + beta_shift).collect(),
            sigma_d: 0.39,
            sigma_b: vec![0.5; 8],
            sigma_p: 0.23,
            delta1: None,
            sigma_d1: None,
        },
        phi_mean: -0.3,
        phi_sd: 0.05,
        psi_shape: 10.0,
        psi_rate: 10.0,
    }
}

/// Single unlabelled population with δ = 2.49, σ_d = 0.39, σ_p = 0.23 and
/// [`REFERENCE_BETA`] genre effects.
pub fn reference_scenario(
    n_customers: usize,
    n_journeys: usize,
    max_events: usize,
    seed: u64,
) -> ScenarioConfig {
    ScenarioConfig {
        n_customers,
        n_journeys,
        n_genres: 8,
        genre_probs: None,
        max_events,
        ar_level: ArLevel::Session,
        groups: vec![reference_group(None, 1.0, 2.49, 0.0)],
        seed,
    }
}

/// Two equal labelled groups: cancelled customers have δ higher by 1.0, φ
/// higher by 0.1 and gaps 0.5 longer on the log scale, with small
/// within-group spread.
pub fn churn_scenario(n_customers: usize, n_journeys: usize, max_events: usize, seed: u64) -> ScenarioConfig {
    let tighten = |mut g: GroupConfig, phi: f64| {
        g.globals.sigma_d = 0.2;
        g.globals.sigma_b = vec![0.15; 8];
        g.globals.sigma_p = 0.1;
        g.phi_mean = phi;
        g.phi_sd = 0.03;
        g
    };
    ScenarioConfig {
        groups: vec![
            tighten(reference_group(Some(ChurnLabel::Active), 0.5, 2.0, 0.0), -0.2),
            tighten(reference_group(Some(ChurnLabel::Cancelled), 0.5, 3.0, 0.5), -0.1),
        ],
        ..reference_scenario(n_customers, n_journeys, max_events, seed)
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        churn_scenario(40, 30, 50, 1)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

fn gamma_gap<R: Rng + ?Sized>(rng: &mut R, mu: f64, psi: f64) -> Option<f64> {
    let g = Gamma::new(psi, mu / psi).ok()?;
    let t = g.sample(rng);
    (t > 0.0 && t.is_finite()).then_some(t)
}

struct SimCustomer {
    journeys: CustomerJourneys,
    params: CustomerParams,
    session: SessionParams,
}

fn simulate_customer(
    scenario: &ScenarioConfig,
    group: &GroupConfig,
    genre_dist: &WeightedIndex<f64>,
    customer_id: String,
    mut rng: ChaCha8Rng,
) -> Result<SimCustomer, SimulationError> {
    let g = &group.globals;
    let k = scenario.n_genres;
    let d0 = normal(&mut rng, g.delta, g.sigma_d);
    let d1 = g.delta1.zip(g.sigma_d1).map(|(m, s)| normal(&mut rng, m, s));
    let b: Vec<f64> = (0..k)
        .map(|j| normal(&mut rng, g.beta[j], g.sigma_b[j]))
        .collect();
    let phi = normal(&mut rng, group.phi_mean, group.phi_sd);
    let psi = Gamma::new(group.psi_shape, 1.0 / group.psi_rate)
        .map_err(|e| SimulationError::Scenario(e.to_string()))?
        .sample(&mut rng);
    let nonfinite = |journey: usize, msg: String| SimulationError::NonFinite {
        customer: customer_id.clone(),
        journey,
        msg,
    };
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(nonfinite(1, format!("dispersion draw {psi} is not positive")));
    }

    let mut journeys = Vec::with_capacity(scenario.n_journeys);
    let mut p = Vec::with_capacity(scenario.n_journeys);
    let mut start_ms = 0i64;
    for s in 1..=scenario.n_journeys {
        let p_sc = match scenario.ar_level {
            ArLevel::Session => normal(&mut rng, phi, g.sigma_p),
            ArLevel::Customer => phi,
        };
        p.push(p_sc);
        let covariate = d1.map(|_| normal(&mut rng, 0.0, 1.0));
        let log_lambda = d0 + d1.zip(covariate).map_or(0.0, |(a, x)| a * x);
        let lambda = log_lambda.exp();
        let n = sample_ztpois(lambda, &mut rng)
            .map_err(|_| nonfinite(s, format!("event rate {lambda} is not finite")))?
            .min(scenario.max_events as u64) as usize;

        let genres: Vec<u8> = (0..n).map(|_| genre_dist.sample(&mut rng) as u8 + 1).collect();
        let mut events = Vec::with_capacity(n);
        let mut prev_gap: Option<f64> = None;
        let mut total_s = 0.0;
        for i in 0..n {
            let gap_s = if i == 0 {
                None
            } else {
                let eta = b[genres[i - 1] as usize - 1];
                let log_mu = clip_log_mean(eta + prev_gap.map_or(0.0, |t| p_sc * t));
                let mu = log_mu.exp();
                let t = gamma_gap(&mut rng, mu, psi).ok_or_else(|| {
                    nonfinite(
                        s,
                        format!("gap {i} with mean {mu} and dispersion {psi} is not positive and finite"),
                    )
                })?;
                total_s += t;
                prev_gap = Some(t);
                Some(t)
            };
            events.push(JourneyEvent {
                tag: SIM_TAG.to_string(),
                genre: Some(genres[i]),
                gap_s,
            });
        }
        let end_ms = start_ms + (total_s * 1000.0).round() as i64;
        journeys.push(Journey {
            customer_id: customer_id.clone(),
            journey_index: s,
            start_ms,
            end_ms,
            channel: String::new(),
            events,
            covariate,
        });
        start_ms = end_ms + JOURNEY_BREAK_MS;
    }
    Ok(SimCustomer {
        journeys: CustomerJourneys {
            customer_id,
            label: group.label,
            journeys,
        },
        params: CustomerParams { d0, d1, b, phi, psi },
        session: SessionParams { p },
    })
}

/// Simulates every customer of the scenario. Customers are numbered
/// `c001, c002, ...` group by group; customer `i` draws from stream `i` of a
/// ChaCha8 generator keyed by the scenario seed, so output is independent of
/// thread count. The returned `global` block is that of the first group.
pub fn simulate_dataset(scenario: &ScenarioConfig) -> Result<(Dataset, HierarchicalParams), SimulationError> {
    scenario.validate()?;
    let probs = scenario
        .genre_probs
        .clone()
        .unwrap_or_else(|| vec![1.0; scenario.n_genres]);
    let genre_dist = WeightedIndex::new(&probs).map_err(|e| SimulationError::Scenario(e.to_string()))?;
    let width = scenario.n_customers.to_string().len().max(3);
    let assignments: Vec<usize> = scenario
        .group_sizes()
        .into_iter()
        .enumerate()
        .flat_map(|(g, n)| std::iter::repeat_n(g, n))
        .collect();
    let customers: Vec<SimCustomer> = assignments
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            rng.set_stream(i as u64);
            simulate_customer(
                scenario,
                &scenario.groups[g],
                &genre_dist,
                format!("c{:0width$}", i + 1),
                rng,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut data = Dataset::default();
    let mut per_customer = Vec::with_capacity(customers.len());
    let mut per_session = Vec::with_capacity(customers.len());
    for c in customers {
        data.customers.push(c.journeys);
        per_customer.push(c.params);
        per_session.push(c.session);
    }
    let params = HierarchicalParams {
        global: scenario.groups[0].globals.clone(),
        per_customer,
        per_session,
    };
    Ok((data, params))
}

/// Parameter name → true value, in the sampler's naming. With several groups
/// each group's hyperparameters are added as `<group>:<name>` where `<group>`
/// is the label or the 1-based group number.
pub fn truth_map(
    scenario: &ScenarioConfig,
    data: &Dataset,
    params: &HierarchicalParams,
) -> BTreeMap<String, f64> {
    let spec = scenario.model_spec();
    let layout = ParamLayout::new(data, spec);
    let mut out: BTreeMap<String, f64> = layout.names().into_iter().zip(layout.flatten(params)).collect();
    if scenario.groups.len() > 1 {
        let empty = ParamLayout {
            spec,
            journeys_per_customer: Vec::new(),
        };
        for (i, g) in scenario.groups.iter().enumerate() {
            let prefix = g
                .label
                .map_or_else(|| (i + 1).to_string(), |l| l.as_str().to_string());
            let hp = HierarchicalParams {
                global: g.globals.clone(),
                per_customer: Vec::new(),
                per_session: Vec::new(),
            };
            for (name, v) in empty.names().into_iter().zip(empty.flatten(&hp)) {
                out.insert(format!("{prefix}:{name}"), v);
            }
        }
    }
    out
}
