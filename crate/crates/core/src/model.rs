//! Densities and the joint log-posterior of the hierarchical count / gap-time
//! model.
//!
//! Per journey `s` of customer `c`:
//!
//! ```text
//! N_sc            ~ ZTPoisson(λ_sc),        log λ_sc = d0_c (+ d1_c · x_sc)
//! T_isc | T_i-1   ~ Gamma(mean μ_isc, dispersion ψ_c)
//! log μ_isc       = b_c[genre_isc] + p_sc · T_i-1,sc        (clipped to ±30)
//! p_sc            ~ N(φ_c, σ_p²)
//! d0_c ~ N(δ, σ_d²),   b_kc ~ N(β_k, σ_bk²)
//! ```
//!
//! The gap preceding event `i + 1` belongs to the genre of event `i`. The first
//! gap of a journey has no predecessor and is conditioned on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{Dataset, Journey};

/// Bound on the gap-time log-mean before exponentiation.
pub const LOG_MEAN_CLIP: f64 = 30.0;

pub const DEFAULT_GENRES: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("customer {customer}, journey {journey}: genre {genre} outside 1..={k}")]
    Genre {
        customer: usize,
        journey: usize,
        genre: u8,
        k: usize,
    },
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln(1 - e^{-λ})` without cancellation at either end.
pub fn ln_one_minus_exp_neg(lambda: f64) -> f64 {
    if lambda < std::f64::consts::LN_2 {
        (-(-lambda).exp_m1()).ln()
    } else {
        (-(-lambda).exp()).ln_1p()
    }
}

/// Log-pmf of the zero-truncated Poisson. `n = 0` has probability zero.
pub fn log_pmf_ztpois(n: u64, lambda: f64) -> Result<f64, ModelError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ModelError::Domain(format!(
            "zero-truncated Poisson rate must be positive, got {lambda}"
        )));
    }
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let n = n as f64;
    Ok(n * lambda.ln() - lambda - ln_gamma(n + 1.0) - ln_one_minus_exp_neg(lambda))
}

/// Shape and rate of the gamma with mean `mu` and dispersion `psi`
/// (variance `mu² / psi`).
pub fn gamma_shape_rate(mu: f64, psi: f64) -> (f64, f64) {
    (psi, psi / mu)
}

/// Log-density of the mean–dispersion gamma.
pub fn log_pdf_gamma_mean_disp(t: f64, mu: f64, psi: f64) -> Result<f64, ModelError> {
    if !(t > 0.0 && mu > 0.0 && psi > 0.0) || !(t.is_finite() && mu.is_finite() && psi.is_finite()) {
        return Err(ModelError::Domain(format!(
            "gamma density needs t, mu, psi > 0 (got {t}, {mu}, {psi})"
        )));
    }
    Ok(gamma_log_kernel(t.ln(), t, mu.ln(), psi) + psi * psi.ln() - ln_gamma(psi))
}

/// The parts of the gamma log-density that depend on `t` or `mu`.
#[inline]
pub(crate) fn gamma_log_kernel(ln_t: f64, t: f64, ln_mu: f64, psi: f64) -> f64 {
    -psi * ln_mu + (psi - 1.0) * ln_t - psi * t * (-ln_mu).exp()
}

pub fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

pub fn log_half_cauchy_pdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = x / scale;
    std::f64::consts::LN_2 - (std::f64::consts::PI * scale).ln() - (z * z).ln_1p()
}

/// Gamma log-density in the shape–rate parameterization.
pub fn log_gamma_shape_rate_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

#[inline]
pub fn clip_log_mean(x: f64) -> f64 {
    x.clamp(-LOG_MEAN_CLIP, LOG_MEAN_CLIP)
}

/// Level at which the autoregressive coefficient varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArLevel {
    /// `p_sc ~ N(φ_c, σ_p²)` per journey.
    #[default]
    Session,
    /// `p_sc = φ_c` for every journey; `σ_p` is not part of the model.
    Customer,
}

/// Structural choices that fix the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub n_genres: usize,
    /// Adds `d1_c · x_sc` to the count log-rate, with `d1_c ~ N(δ1, σ_d1²)`.
    pub count_covariate: bool,
    pub ar_level: ArLevel,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_genres: DEFAULT_GENRES,
            count_covariate: false,
            ar_level: ArLevel::Session,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Variance of the normal priors on δ, β_k, φ_c (and δ1).
    pub normal_var: f64,
    pub psi_shape: f64,
    pub psi_rate: f64,
    /// Scale of the half-Cauchy priors on the standard deviations.
    pub halfcauchy_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            normal_var: 1000.0,
            psi_shape: 0.001,
            psi_rate: 0.001,
            halfcauchy_scale: 2.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = [
            self.normal_var,
            self.psi_shape,
            self.psi_rate,
            self.halfcauchy_scale,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ModelError::Domain(format!(
                "prior hyperparameters must be positive: {self:?}"
            )))
        }
    }

    pub fn normal_sd(&self) -> f64 {
        self.normal_var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub delta: f64,
    pub beta: Vec<f64>,
    pub sigma_d: f64,
    pub sigma_b: Vec<f64>,
    pub sigma_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_d1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerParams {
    pub d0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<f64>,
    pub b: Vec<f64>,
    pub phi: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionParams {
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalParams {
    pub global: GlobalParams,
    pub per_customer: Vec<CustomerParams>,
    pub per_session: Vec<SessionParams>,
}

impl HierarchicalParams {
    /// Autoregressive coefficient used for journey `s` of customer `c`.
    pub fn ar_coefficient(&self, spec: &ModelSpec, c: usize, s: usize) -> f64 {
        match spec.ar_level {
            ArLevel::Session => self.per_session[c].p[s],
            ArLevel::Customer => self.per_customer[c].phi,
        }
    }

    /// Checks lengths against the dataset and positivity of scales.
    pub fn check_shape(&self, data: &Dataset, spec: &ModelSpec) -> Result<(), ModelError> {
        let k = spec.n_genres;
        let g = &self.global;
        if g.beta.len() != k || g.sigma_b.len() != k {
            return Err(ModelError::Shape(format!(
                "expected {k} genre effects, got beta {} / sigma_b {}",
                g.beta.len(),
                g.sigma_b.len()
            )));
        }
        if spec.count_covariate != (g.delta1.is_some() && g.sigma_d1.is_some()) {
            return Err(ModelError::Shape(
                "count covariate hyperparameters must match the model spec".into(),
            ));
        }
        if self.per_customer.len() != data.n_customers() || self.per_session.len() != data.n_customers() {
            return Err(ModelError::Shape(format!(
                "{} customers in data, {} / {} parameter blocks",
                data.n_customers(),
                self.per_customer.len(),
                self.per_session.len()
            )));
        }
        for (c, (cp, cust)) in self.per_customer.iter().zip(&data.customers).enumerate() {
            if cp.b.len() != k {
                return Err(ModelError::Shape(format!(
                    "customer {}: {} genre effects, expected {k}",
                    c + 1,
                    cp.b.len()
                )));
            }
            if spec.count_covariate != cp.d1.is_some() {
                return Err(ModelError::Shape(format!(
                    "customer {}: count slope presence does not match the model spec",
                    c + 1
                )));
            }
            if spec.ar_level == ArLevel::Session && self.per_session[c].p.len() != cust.journeys.len() {
                return Err(ModelError::Shape(format!(
                    "customer {}: {} journeys but {} session coefficients",
                    c + 1,
                    cust.journeys.len(),
                    self.per_session[c].p.len()
                )));
            }
        }
        Ok(())
    }
}

/// Count rate and per-gap means of one journey.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictors {
    pub lambda: f64,
    /// One entry per gap (length `n_events - 1`). `None` for the first gap,
    /// which is conditioned on, and for every gap of a journey with an unknown
    /// genre.
    pub mu: Vec<Option<f64>>,
}

/// True when every event of the journey that opens a gap has a genre.
pub fn journey_has_genres(journey: &Journey) -> bool {
    let n = journey.events.len();
    journey.events[..n.saturating_sub(1)]
        .iter()
        .all(|e| e.genre.is_some())
}

pub fn linear_predictors(
    journey: &Journey,
    cp: &CustomerParams,
    p_sc: f64,
    n_genres: usize,
) -> Result<LinearPredictors, ModelError> {
    let mut log_lambda = cp.d0;
    if let (Some(d1), Some(x)) = (cp.d1, journey.covariate) {
        log_lambda += d1 * x;
    }
    let gaps: Vec<f64> = journey.gaps().collect();
    let mut mu = vec![None; gaps.len()];
    if journey_has_genres(journey) {
        for j in 1..gaps.len() {
            let genre = journey.events[j].genre.expect("checked above");
            if genre == 0 || genre as usize > n_genres {
                return Err(ModelError::Genre {
                    customer: 0,
                    journey: journey.journey_index,
                    genre,
                    k: n_genres,
                });
            }
            let eta = cp.b[genre as usize - 1];
            mu[j] = Some(clip_log_mean(eta + p_sc * gaps[j - 1]).exp());
        }
    }
    Ok(LinearPredictors {
        lambda: log_lambda.exp(),
        mu,
    })
}

/// The joint log-posterior split into its additive parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogPosteriorTerms {
    /// Zero-truncated Poisson terms of all journeys.
    pub counts: f64,
    /// Gamma gap-time terms.
    pub gaps: f64,
    /// `log N(p_sc; φ_c, σ_p²)` terms.
    pub sessions: f64,
    /// Customer-level random effects and priors on φ_c, ψ_c.
    pub customers: f64,
    /// Priors on δ, β, the standard deviations (and δ1).
    pub globals: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.likelihood() + self.prior()
    }

    pub fn likelihood(&self) -> f64 {
        self.counts + self.gaps
    }

    pub fn prior(&self) -> f64 {
        self.sessions + self.customers + self.globals
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("event-count likelihood", self.counts),
            ("gap-time likelihood", self.gaps),
            ("session autoregressive effects", self.sessions),
            ("customer random effects", self.customers),
            ("global priors", self.globals),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Log-density of the hyperpriors on the global parameters.
pub fn global_prior_terms(g: &GlobalParams, priors: &PriorConfig, spec: &ModelSpec) -> f64 {
    let nsd = priors.normal_sd();
    let hc = priors.halfcauchy_scale;
    let mut lp = log_normal_pdf(g.delta, 0.0, nsd) + log_half_cauchy_pdf(g.sigma_d, hc);
    for (beta, sb) in g.beta.iter().zip(&g.sigma_b) {
        lp += log_normal_pdf(*beta, 0.0, nsd) + log_half_cauchy_pdf(*sb, hc);
    }
    if spec.ar_level == ArLevel::Session {
        lp += log_half_cauchy_pdf(g.sigma_p, hc);
    }
    if let (Some(d1), Some(s1)) = (g.delta1, g.sigma_d1) {
        lp += log_normal_pdf(d1, 0.0, nsd) + log_half_cauchy_pdf(s1, hc);
    }
    lp
}

fn scale_ok(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

pub fn log_posterior_terms(
    data: &Dataset,
    params: &HierarchicalParams,
    priors: &PriorConfig,
    spec: &ModelSpec,
) -> Result<LogPosteriorTerms, ModelError> {
    params.check_shape(data, spec)?;
    let g = &params.global;
    let mut terms = LogPosteriorTerms {
        globals: global_prior_terms(g, priors, spec),
        ..Default::default()
    };
    let scales_ok = scale_ok(g.sigma_d)
        && g.sigma_b.iter().all(|s| scale_ok(*s))
        && (spec.ar_level == ArLevel::Customer || scale_ok(g.sigma_p))
        && g.sigma_d1.is_none_or(scale_ok);
    if !scales_ok {
        terms.globals = f64::NEG_INFINITY;
        return Ok(terms);
    }
    let nsd = priors.normal_sd();
    for (c, (cust, cp)) in data.customers.iter().zip(&params.per_customer).enumerate() {
        let mut cust_lp = log_normal_pdf(cp.d0, g.delta, g.sigma_d)
            + log_normal_pdf(cp.phi, 0.0, nsd)
            + log_gamma_shape_rate_pdf(cp.psi, priors.psi_shape, priors.psi_rate);
        for k in 0..spec.n_genres {
            cust_lp += log_normal_pdf(cp.b[k], g.beta[k], g.sigma_b[k]);
        }
        if let (Some(d1), Some(m1), Some(s1)) = (cp.d1, g.delta1, g.sigma_d1) {
            cust_lp += log_normal_pdf(d1, m1, s1);
        }
        terms.customers += cust_lp;
        if !(cp.psi > 0.0) {
            terms.customers = f64::NEG_INFINITY;
            continue;
        }
        let log_norm = cp.psi * cp.psi.ln() - ln_gamma(cp.psi);
        for (s, journey) in cust.journeys.iter().enumerate() {
            let p = params.ar_coefficient(spec, c, s);
            if spec.ar_level == ArLevel::Session {
                terms.sessions += log_normal_pdf(p, cp.phi, g.sigma_p);
            }
            if spec.count_covariate && journey.covariate.is_none() {
                return Err(ModelError::Shape(format!(
                    "customer {}, journey {}: count covariate missing",
                    c + 1,
                    s + 1
                )));
            }
            let lp = linear_predictors(journey, cp, p, spec.n_genres).map_err(|e| match e {
                ModelError::Genre {
                    journey, genre, k, ..
                } => ModelError::Genre {
                    customer: c + 1,
                    journey,
                    genre,
                    k,
                },
                other => other,
            })?;
            terms.counts += log_pmf_ztpois(journey.n_events() as u64, lp.lambda).unwrap_or(f64::NEG_INFINITY);
            for (t, mu) in journey.gaps().zip(&lp.mu) {
                if let Some(mu) = mu {
                    terms.gaps += gamma_log_kernel(t.ln(), t, mu.ln(), cp.psi) + log_norm;
                }
            }
        }
    }
    Ok(terms)
}

/// Joint log-posterior (unnormalized) of all parameters given the data.
pub fn joint_log_posterior(
    data: &Dataset,
    params: &HierarchicalParams,
    priors: &PriorConfig,
    spec: &ModelSpec,
) -> Result<f64, ModelError> {
    log_posterior_terms(data, params, priors, spec).map(|t| t.total())
}

/// Flat naming and ordering of every model parameter, shared by the sampler's
/// draw matrices and the draws files.
///
/// Names: `delta`, `beta[k]`, `sigma_d`, `sigma_b[k]`, `sigma_p`, `delta1`,
/// `sigma_d1`, then per customer `d0[c]`, `d1[c]`, `b[c,k]`, `phi[c]`,
/// `psi[c]`, then `p[c,s]`. Indices are 1-based; customers follow dataset
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub spec: ModelSpec,
    pub journeys_per_customer: Vec<usize>,
}

impl ParamLayout {
    pub fn new(data: &Dataset, spec: ModelSpec) -> Self {
        Self {
            spec,
            journeys_per_customer: data.customers.iter().map(|c| c.journeys.len()).collect(),
        }
    }

    pub fn n_global(&self) -> usize {
        let k = self.spec.n_genres;
        2 + 2 * k
            + usize::from(self.spec.ar_level == ArLevel::Session)
            + 2 * usize::from(self.spec.count_covariate)
    }

    pub fn per_customer_len(&self) -> usize {
        self.spec.n_genres + 3 + usize::from(self.spec.count_covariate)
    }

    pub fn len(&self) -> usize {
        let sessions: usize = match self.spec.ar_level {
            ArLevel::Session => self.journeys_per_customer.iter().sum(),
            ArLevel::Customer => 0,
        };
        self.n_global() + self.journeys_per_customer.len() * self.per_customer_len() + sessions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        let k = self.spec.n_genres;
        let mut names = vec!["delta".to_string()];
        names.extend((1..=k).map(|i| format!("beta[{i}]")));
        names.push("sigma_d".into());
        names.extend((1..=k).map(|i| format!("sigma_b[{i}]")));
        if self.spec.ar_level == ArLevel::Session {
            names.push("sigma_p".into());
        }
        if self.spec.count_covariate {
            names.push("delta1".into());
            names.push("sigma_d1".into());
        }
        for c in 1..=self.journeys_per_customer.len() {
            names.push(format!("d0[{c}]"));
            if self.spec.count_covariate {
                names.push(format!("d1[{c}]"));
            }
            names.extend((1..=k).map(|i| format!("b[{c},{i}]")));
            names.push(format!("phi[{c}]"));
            names.push(format!("psi[{c}]"));
        }
        if self.spec.ar_level == ArLevel::Session {
            for (c, &n) in self.journeys_per_customer.iter().enumerate() {
                names.extend((1..=n).map(|s| format!("p[{},{s}]", c + 1)));
            }
        }
        names
    }

    /// Names of the global parameters (the first `n_global` entries).
    pub fn global_names(&self) -> Vec<String> {
        let mut names = self.names();
        names.truncate(self.n_global());
        names
    }

    pub fn flatten(&self, params: &HierarchicalParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.flatten_into(params, &mut out);
        out
    }

    pub fn flatten_into(&self, params: &HierarchicalParams, out: &mut Vec<f64>) {
        let g = &params.global;
        out.push(g.delta);
        out.extend(&g.beta);
        out.push(g.sigma_d);
        out.extend(&g.sigma_b);
        if self.spec.ar_level == ArLevel::Session {
            out.push(g.sigma_p);
        }
        if self.spec.count_covariate {
            out.push(g.delta1.unwrap_or(f64::NAN));
            out.push(g.sigma_d1.unwrap_or(f64::NAN));
        }
        for cp in &params.per_customer {
            out.push(cp.d0);
            if self.spec.count_covariate {
                out.push(cp.d1.unwrap_or(f64::NAN));
            }
            out.extend(&cp.b);
            out.push(cp.phi);
            out.push(cp.psi);
        }
        if self.spec.ar_level == ArLevel::Session {
            for sp in &params.per_session {
                out.extend(&sp.p);
            }
        }
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<HierarchicalParams, ModelError> {
        if values.len() != self.len() {
            return Err(ModelError::Shape(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        let k = self.spec.n_genres;
        let mut it = values.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let delta = take(1)[0];
        let beta = take(k);
        let sigma_d = take(1)[0];
        let sigma_b = take(k);
        let sigma_p = match self.spec.ar_level {
            ArLevel::Session => take(1)[0],
            ArLevel::Customer => 0.0,
        };
        let (delta1, sigma_d1) = if self.spec.count_covariate {
            let v = take(2);
            (Some(v[0]), Some(v[1]))
        } else {
            (None, None)
        };
        let mut per_customer = Vec::with_capacity(self.journeys_per_customer.len());
        for _ in &self.journeys_per_customer {
            let d0 = take(1)[0];
            let d1 = self.spec.count_covariate.then(|| take(1)[0]);
            let b = take(k);
            let v = take(2);
            per_customer.push(CustomerParams {
                d0,
                d1,
                b,
                phi: v[0],
                psi: v[1],
            });
        }
        let per_session = self
            .journeys_per_customer
            .iter()
            .map(|&n| SessionParams {
                p: match self.spec.ar_level {
                    ArLevel::Session => take(n),
                    ArLevel::Customer => Vec::new(),
                },
            })
            .collect();
        Ok(HierarchicalParams {
            global: GlobalParams {
                delta,
                beta,
                sigma_d,
                sigma_b,
                sigma_p,
                delta1,
                sigma_d1,
            },
            per_customer,
            per_session,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{CustomerJourneys, JourneyEvent};

    fn poisson_normalized_oracle(n: usize, lambda: f64) -> f64 {
        let mut pmf = vec![(-lambda).exp()];
        for i in 1..=200 {
            let prev = pmf[i - 1];
            pmf.push(prev * lambda / i as f64);
        }
        let z: f64 = pmf[1..].iter().sum();
        pmf[n] / z
    }

    #[test]
    fn ztpois_matches_normalized_poisson() {
        let v = log_pmf_ztpois(1, 1.0).unwrap();
        let oracle = poisson_normalized_oracle(1, 1.0).ln();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
        assert!((v - (-0.54132)).abs() < 1e-5);
        for n in [2, 5, 17] {
            let v = log_pmf_ztpois(n, 3.3).unwrap();
            assert!((v - poisson_normalized_oracle(n as usize, 3.3).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ztpois_zero_is_impossible() {
        assert_eq!(log_pmf_ztpois(0, 1.0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn ztpois_normalizes() {
        let s: f64 = (1..=200).map(|n| log_pmf_ztpois(n, 2.0).unwrap().exp()).sum();
        assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ztpois_domain() {
        assert!(log_pmf_ztpois(1, 0.0).is_err());
        assert!(log_pmf_ztpois(1, -2.0).is_err());
        assert!(log_pmf_ztpois(1, f64::NAN).is_err());
    }

    #[test]
    fn ztpois_tiny_and_huge_rates() {
        // P(1 | N >= 1) -> 1 as lambda -> 0
        assert!(log_pmf_ztpois(1, 1e-12).unwrap().abs() < 1e-11);
        let v = log_pmf_ztpois(700, 700.0).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn gamma_exponential_special_case() {
        assert!((log_pdf_gamma_mean_disp(1.0, 1.0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        let (shape, rate) = gamma_shape_rate(2.0, 4.0);
        assert_eq!(shape / (rate * rate), 1.0);
    }

    #[test]
    fn gamma_domain() {
        assert!(log_pdf_gamma_mean_disp(0.0, 1.0, 1.0).is_err());
        assert!(log_pdf_gamma_mean_disp(1.0, -1.0, 1.0).is_err());
        assert!(log_pdf_gamma_mean_disp(1.0, 1.0, 0.0).is_err());
    }

    fn journey(gaps: &[f64], genres: &[u8]) -> Journey {
        let mut events = vec![JourneyEvent {
            tag: "x".into(),
            genre: Some(genres[0]),
            gap_s: None,
        }];
        for (i, g) in gaps.iter().enumerate() {
            events.push(JourneyEvent {
                tag: "x".into(),
                genre: Some(genres[i + 1]),
                gap_s: Some(*g),
            });
        }
        Journey {
            customer_id: "c".into(),
            journey_index: 1,
            start_ms: 0,
            end_ms: 0,
            channel: String::new(),
            events,
            covariate: None,
        }
    }

    fn cp(d0: f64, b: Vec<f64>) -> CustomerParams {
        CustomerParams {
            d0,
            d1: None,
            b,
            phi: 0.0,
            psi: 1.0,
        }
    }

    #[test]
    fn predictors() {
        let j = journey(&[2.0, 5.0], &[3, 3, 3]);
        let lp = linear_predictors(&j, &cp(2.49, vec![0.5; 8]), 0.1, 8).unwrap();
        assert!((lp.lambda - 12.061).abs() < 1e-3);
        assert_eq!(lp.mu[0], None);
        assert!((lp.mu[1].unwrap() - 0.7f64.exp()).abs() < 1e-12);

        let lp = linear_predictors(&j, &cp(0.0, vec![0.0; 8]), 0.0, 8).unwrap();
        assert_eq!(lp.mu[1], Some(1.0));
    }

    #[test]
    fn predictors_use_genre_of_opening_event() {
        let mut b = vec![0.0; 8];
        b[1] = 1.0;
        let j = journey(&[1.0, 1.0], &[1, 2, 1]);
        let lp = linear_predictors(&j, &cp(0.0, b), 0.0, 8).unwrap();
        assert!((lp.mu[1].unwrap() - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn predictors_clip_log_mean() {
        let j = journey(&[1000.0, 1.0], &[1, 1, 1]);
        let lp = linear_predictors(&j, &cp(0.0, vec![0.0; 8]), 1.0, 8).unwrap();
        assert_eq!(lp.mu[1], Some(LOG_MEAN_CLIP.exp()));
    }

    #[test]
    fn unknown_genre_drops_gamma_terms() {
        let mut j = journey(&[1.0, 1.0], &[1, 1, 1]);
        j.events[1].genre = None;
        let lp = linear_predictors(&j, &cp(0.0, vec![0.0; 8]), 0.0, 8).unwrap();
        assert!(lp.mu.iter().all(Option::is_none));
    }

    #[test]
    fn genre_out_of_range() {
        let j = journey(&[1.0, 1.0], &[1, 9, 1]);
        assert!(matches!(
            linear_predictors(&j, &cp(0.0, vec![0.0; 8]), 0.0, 8),
            Err(ModelError::Genre { genre: 9, .. })
        ));
    }

    #[test]
    fn layout_round_trip() {
        let data = Dataset {
            customers: vec![
                CustomerJourneys {
                    customer_id: "a".into(),
                    label: None,
                    journeys: vec![journey(&[1.0], &[1, 1]); 2],
                },
                CustomerJourneys {
                    customer_id: "b".into(),
                    label: None,
                    journeys: vec![journey(&[1.0], &[1, 1])],
                },
            ],
        };
        for spec in [
            ModelSpec::default(),
            ModelSpec {
                n_genres: 2,
                count_covariate: true,
                ar_level: ArLevel::Customer,
            },
        ] {
            let layout = ParamLayout::new(&data, spec);
            let names = layout.names();
            assert_eq!(names.len(), layout.len());
            let values: Vec<f64> = (0..layout.len()).map(|i| i as f64 + 0.5).collect();
            let params = layout.unflatten(&values).unwrap();
            assert_eq!(layout.flatten(&params), values);
        }
        let layout = ParamLayout::new(&data, ModelSpec::default());
        let names = layout.names();
        assert_eq!(names[0], "delta");
        assert_eq!(names[18], "sigma_p");
        assert_eq!(names[19], "d0[1]");
        assert_eq!(names[21], "b[1,2]");
        assert_eq!(names.last().unwrap(), "p[2,1]");
        assert_eq!(layout.len(), 19 + 2 * 11 + 3);
    }
}
