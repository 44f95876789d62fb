//! One Metropolis-within-Gibbs chain with cached gap-time predictors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::event_log::Dataset;
use crate::model::{
    clip_log_mean, journey_has_genres, ln_gamma, ln_one_minus_exp_neg, log_gamma_shape_rate_pdf,
    log_half_cauchy_pdf, log_normal_pdf, log_posterior_terms, ArLevel, CustomerParams, GlobalParams,
    HierarchicalParams, LogPosteriorTerms, ModelSpec, PriorConfig, SessionParams,
};

/// Lower bound on the initial dispersion estimate.
const PSI_INIT_FLOOR: f64 = 0.01;
const LOG_SCALE_MIN: f64 = -12.0;
const LOG_SCALE_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy)]
pub(crate) struct GapObs {
    pub t: f64,
    pub t_prev: f64,
    pub genre: usize,
    pub journey: usize,
}

/// Read-only per-customer view of the data in the form the updates need.
#[derive(Debug, Clone)]
pub(crate) struct CustomerData {
    pub n_events: Vec<f64>,
    pub ln_factorial: Vec<f64>,
    pub covariate: Vec<f64>,
    pub gaps: Vec<GapObs>,
    pub by_genre: Vec<Vec<usize>>,
    pub by_journey: Vec<(usize, usize)>,
    pub sum_ln_t: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelData {
    pub customers: Vec<CustomerData>,
}

impl ModelData {
    pub fn new(data: &Dataset, spec: &ModelSpec) -> Result<Self, SamplerError> {
        let k = spec.n_genres;
        let mut customers = Vec::with_capacity(data.n_customers());
        for (c, cust) in data.customers.iter().enumerate() {
            if cust.journeys.is_empty() {
                return Err(SamplerError::Structure(format!(
                    "customer {} ({}) has no journeys",
                    c + 1,
                    cust.customer_id
                )));
            }
            let mut cd = CustomerData {
                n_events: Vec::new(),
                ln_factorial: Vec::new(),
                covariate: Vec::new(),
                gaps: Vec::new(),
                by_genre: vec![Vec::new(); k],
                by_journey: Vec::new(),
                sum_ln_t: 0.0,
            };
            for (s, j) in cust.journeys.iter().enumerate() {
                let n = j.n_events() as f64;
                cd.n_events.push(n);
                cd.ln_factorial.push(ln_gamma(n + 1.0));
                let x = match (spec.count_covariate, j.covariate) {
                    (false, _) => 0.0,
                    (true, Some(x)) => x,
                    (true, None) => {
                        return Err(SamplerError::Structure(format!(
                            "customer {}, journey {}: count covariate missing",
                            c + 1,
                            s + 1
                        )))
                    }
                };
                cd.covariate.push(x);
                let start = cd.gaps.len();
                if journey_has_genres(j) {
                    let gaps: Vec<f64> = j.gaps().collect();
                    for i in 1..gaps.len() {
                        let genre = j.events[i].genre.expect("checked");
                        if genre == 0 || genre as usize > k {
                            return Err(SamplerError::Structure(format!(
                                "customer {}, journey {}: genre {genre} outside 1..={k}",
                                c + 1,
                                s + 1
                            )));
                        }
                        let idx = cd.gaps.len();
                        cd.by_genre[genre as usize - 1].push(idx);
                        cd.sum_ln_t += gaps[i].ln();
                        cd.gaps.push(GapObs {
                            t: gaps[i],
                            t_prev: gaps[i - 1],
                            genre: genre as usize - 1,
                            journey: s,
                        });
                    }
                }
                cd.by_journey.push((start, cd.gaps.len()));
            }
            customers.push(cd);
        }
        Ok(Self { customers })
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Starting point: log mean event counts for δ and d0, log mean gaps per
/// genre for β and b, zero autoregression, method-of-moments dispersion, unit
/// standard deviations.
pub(crate) fn initial_params(data: &Dataset, spec: &ModelSpec) -> HierarchicalParams {
    let k = spec.n_genres;
    let counts: Vec<f64> = data
        .customers
        .iter()
        .flat_map(|c| c.journeys.iter().map(|j| j.n_events() as f64))
        .collect();
    let delta = mean(&counts).map_or(0.0, f64::ln);

    let genre_gaps = |journeys: &[crate::event_log::Journey]| {
        let mut by_genre = vec![Vec::new(); k];
        for j in journeys {
            for (ev, gap) in j.events.iter().zip(j.gaps()) {
                if let Some(g) = ev.genre.filter(|g| (1..=k).contains(&(*g as usize))) {
                    by_genre[g as usize - 1].push(gap);
                }
            }
        }
        by_genre
    };
    let mut pooled = vec![Vec::new(); k];
    for c in &data.customers {
        for (k, gaps) in genre_gaps(&c.journeys).into_iter().enumerate() {
            pooled[k].extend(gaps);
        }
    }
    let beta: Vec<f64> = pooled.iter().map(|g| mean(g).map_or(0.0, f64::ln)).collect();

    let per_customer = data
        .customers
        .iter()
        .map(|c| {
            let counts: Vec<f64> = c.journeys.iter().map(|j| j.n_events() as f64).collect();
            let b = genre_gaps(&c.journeys)
                .iter()
                .zip(&beta)
                .map(|(g, fallback)| mean(g).map_or(*fallback, f64::ln))
                .collect();
            let gaps: Vec<f64> = c.journeys.iter().flat_map(|j| j.gaps()).collect();
            let psi = match mean(&gaps) {
                Some(m) if gaps.len() >= 2 => {
                    let var = gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64;
                    if var > 0.0 {
                        (m * m / var).max(PSI_INIT_FLOOR)
                    } else {
                        1.0
                    }
                }
                _ => 1.0,
            };
            CustomerParams {
                d0: mean(&counts).map_or(0.0, f64::ln),
                d1: spec.count_covariate.then_some(0.0),
                b,
                phi: 0.0,
                psi,
            }
        })
        .collect();
    let per_session = data
        .customers
        .iter()
        .map(|c| SessionParams {
            p: match spec.ar_level {
                ArLevel::Session => vec![0.0; c.journeys.len()],
                ArLevel::Customer => Vec::new(),
            },
        })
        .collect();
    HierarchicalParams {
        global: GlobalParams {
            delta,
            beta,
            sigma_d: 1.0,
            sigma_b: vec![1.0; k],
            sigma_p: match spec.ar_level {
                ArLevel::Session => 1.0,
                ArLevel::Customer => 0.0,
            },
            delta1: spec.count_covariate.then_some(0.0),
            sigma_d1: spec.count_covariate.then_some(1.0),
        },
        per_customer,
        per_session,
    }
}

/// Update blocks, in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Block {
    Delta,
    SigmaD,
    Beta,
    SigmaB,
    SigmaP,
    Delta1,
    SigmaD1,
    D0,
    D1,
    B,
    Phi,
    Psi,
    P,
}

impl Block {
    const ALL: [Block; 13] = [
        Block::Delta,
        Block::SigmaD,
        Block::Beta,
        Block::SigmaB,
        Block::SigmaP,
        Block::Delta1,
        Block::SigmaD1,
        Block::D0,
        Block::D1,
        Block::B,
        Block::Phi,
        Block::Psi,
        Block::P,
    ];

    fn name(self) -> &'static str {
        match self {
            Block::Delta => "delta",
            Block::SigmaD => "sigma_d",
            Block::Beta => "beta",
            Block::SigmaB => "sigma_b",
            Block::SigmaP => "sigma_p",
            Block::Delta1 => "delta1",
            Block::SigmaD1 => "sigma_d1",
            Block::D0 => "d0",
            Block::D1 => "d1",
            Block::B => "b",
            Block::Phi => "phi",
            Block::Psi => "psi",
            Block::P => "p",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    /// Exact conditional draw; always accepted.
    Gibbs,
    /// Adaptive random-walk Metropolis.
    Metropolis,
}

/// Acceptance counts of one update block after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub kind: UpdateKind,
    pub proposals: u64,
    pub accepted: u64,
}

impl BlockAcceptance {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Per-parameter log proposal scales.
#[derive(Debug, Clone)]
struct Scales {
    sigma_d: f64,
    sigma_b: Vec<f64>,
    sigma_p: f64,
    sigma_d1: f64,
    d0: Vec<f64>,
    d1: Vec<f64>,
    b: Vec<Vec<f64>>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    p: Vec<Vec<f64>>,
}

impl Scales {
    fn new(params: &HierarchicalParams, k: usize) -> Self {
        let c = params.per_customer.len();
        let ln = f64::ln;
        Self {
            sigma_d: ln(0.3),
            sigma_b: vec![ln(0.3); k],
            sigma_p: ln(0.3),
            sigma_d1: ln(0.3),
            d0: vec![ln(0.1); c],
            d1: vec![ln(0.1); c],
            b: vec![vec![ln(0.2); k]; c],
            phi: vec![ln(0.05); c],
            psi: vec![ln(0.2); c],
            p: params
                .per_session
                .iter()
                .map(|s| vec![ln(0.05); s.p.len()])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    proposals: u64,
    accepted: u64,
}

/// Adaptation gain for the current sweep, `None` once scales are frozen.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Phase {
    pub gain: Option<f64>,
    pub record: bool,
}

pub(crate) struct ChainState<'a> {
    dataset: &'a Dataset,
    data: &'a ModelData,
    priors: PriorConfig,
    spec: ModelSpec,
    prior_only: bool,
    target_accept: f64,
    pub params: HierarchicalParams,
    log_mu: Vec<Vec<f64>>,
    t_over_mu: Vec<Vec<f64>>,
    scratch_lm: Vec<f64>,
    scratch_tom: Vec<f64>,
    pub lp: f64,
    scales: Scales,
    counters: [Counter; 13],
    /// Recompute the full log-posterior after every move and compare.
    pub verify: bool,
    pub max_verify_error: f64,
}

impl<'a> ChainState<'a> {
    pub fn new(
        dataset: &'a Dataset,
        data: &'a ModelData,
        priors: PriorConfig,
        spec: ModelSpec,
        prior_only: bool,
        target_accept: f64,
    ) -> Result<Self, SamplerError> {
        let params = initial_params(dataset, &spec);
        let scales = Scales::new(&params, spec.n_genres);
        let mut state = Self {
            dataset,
            data,
            priors,
            spec,
            prior_only,
            target_accept,
            params,
            log_mu: Vec::new(),
            t_over_mu: Vec::new(),
            scratch_lm: Vec::new(),
            scratch_tom: Vec::new(),
            lp: 0.0,
            scales,
            counters: [Counter::default(); 13],
            verify: false,
            max_verify_error: 0.0,
        };
        state.refresh_caches();
        let terms = state.full_terms()?;
        if let Some(term) = terms.first_non_finite() {
            return Err(SamplerError::NonFiniteInit(term.to_string()));
        }
        state.lp = state.target_of(&terms);
        Ok(state)
    }

    fn target_of(&self, terms: &LogPosteriorTerms) -> f64 {
        if self.prior_only {
            terms.prior()
        } else {
            terms.total()
        }
    }

    fn full_terms(&self) -> Result<LogPosteriorTerms, SamplerError> {
        log_posterior_terms(self.dataset, &self.params, &self.priors, &self.spec).map_err(SamplerError::Model)
    }

    fn ar(&self, c: usize, s: usize) -> f64 {
        self.params.ar_coefficient(&self.spec, c, s)
    }

    fn refresh_caches(&mut self) {
        self.log_mu.clear();
        self.t_over_mu.clear();
        for (c, cd) in self.data.customers.iter().enumerate() {
            let b = &self.params.per_customer[c].b;
            let lm: Vec<f64> = cd
                .gaps
                .iter()
                .map(|g| clip_log_mean(b[g.genre] + self.ar(c, g.journey) * g.t_prev))
                .collect();
            let tom = cd.gaps.iter().zip(&lm).map(|(g, l)| g.t * (-l).exp()).collect();
            self.log_mu.push(lm);
            self.t_over_mu.push(tom);
        }
    }

    fn check(&mut self) {
        if !self.verify {
            return;
        }
        let terms = self.full_terms().expect("shape fixed at construction");
        let full = self.target_of(&terms);
        let err = (full - self.lp).abs();
        self.max_verify_error = self.max_verify_error.max(err);
        self.lp = full;
    }

    fn count(&mut self, block: Block, accepted: bool, phase: Phase) {
        if phase.record {
            let c = &mut self.counters[block as usize];
            c.proposals += 1;
            c.accepted += u64::from(accepted);
        }
    }

    pub fn acceptance(&self) -> Vec<BlockAcceptance> {
        Block::ALL
            .iter()
            .filter(|b| self.counters[**b as usize].proposals > 0)
            .map(|b| {
                let gibbs = matches!(b, Block::Delta | Block::Beta | Block::Delta1)
                    || (*b == Block::Phi && self.spec.ar_level == ArLevel::Session);
                let c = self.counters[*b as usize];
                BlockAcceptance {
                    block: b.name().to_string(),
                    kind: if gibbs {
                        UpdateKind::Gibbs
                    } else {
                        UpdateKind::Metropolis
                    },
                    proposals: c.proposals,
                    accepted: c.accepted,
                }
            })
            .collect()
    }

    /// Metropolis decision for log acceptance ratio `log_ratio`; adapts the
    /// log proposal scale toward the target acceptance rate.
    fn decide<R: Rng>(rng: &mut R, log_ratio: f64, log_scale: &mut f64, phase: Phase, target: f64) -> bool {
        let alpha = if log_ratio >= 0.0 {
            1.0
        } else if log_ratio.is_nan() {
            0.0
        } else {
            log_ratio.exp()
        };
        if let Some(gain) = phase.gain {
            *log_scale = (*log_scale + gain * (alpha - target)).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        }
        let u: f64 = rng.random();
        u < alpha
    }

    pub fn sweep<R: Rng>(&mut self, rng: &mut R, phase: Phase) {
        self.update_globals(rng, phase);
        for c in 0..self.data.customers.len() {
            self.update_customer(rng, c, phase);
        }
        if self.spec.ar_level == ArLevel::Session {
            for c in 0..self.data.customers.len() {
                for s in 0..self.data.customers[c].n_events.len() {
                    self.update_session(rng, c, s, phase);
                }
            }
        }
    }

    // ---------------------------------------------------------------------
    // global block

    /// Conjugate draw of a normal mean with a `N(0, prior_var)` prior given
    /// `xs ~ N(mean, sd²)`. Returns the new value and the log-posterior change.
    fn gibbs_normal_mean<R: Rng>(
        rng: &mut R,
        current: f64,
        xs: impl Iterator<Item = f64> + Clone,
        sd: f64,
        prior_sd: f64,
    ) -> (f64, f64) {
        let n = xs.clone().count() as f64;
        let sum: f64 = xs.clone().sum();
        let prec = 1.0 / (prior_sd * prior_sd) + n / (sd * sd);
        let m = sum / (sd * sd) / prec;
        let z: f64 = rng.sample(StandardNormal);
        let new = m + z / prec.sqrt();
        let lp = |mu: f64| {
            log_normal_pdf(mu, 0.0, prior_sd) + xs.clone().map(|x| log_normal_pdf(x, mu, sd)).sum::<f64>()
        };
        (new, lp(new) - lp(current))
    }

    /// Random-walk update of a standard deviation on the log scale, given the
    /// values it governs as `(x, mean)` pairs.
    fn rw_scale<R: Rng>(
        rng: &mut R,
        current: f64,
        pairs: &[(f64, f64)],
        hc_scale: f64,
        log_scale: &mut f64,
        phase: Phase,
        target: f64,
    ) -> Option<(f64, f64)> {
        let n = pairs.len() as f64;
        let ss: f64 = pairs.iter().map(|(x, m)| (x - m) * (x - m)).sum();
        let lp = |s: f64| {
            -n * (s.ln() + 0.918_938_533_204_672_8) - ss / (2.0 * s * s) + log_half_cauchy_pdf(s, hc_scale)
        };
        let z: f64 = rng.sample(StandardNormal);
        let proposed = current * (log_scale.exp() * z).exp();
        let delta = lp(proposed) - lp(current);
        let jac = proposed.ln() - current.ln();
        Self::decide(rng, delta + jac, log_scale, phase, target).then_some((proposed, delta))
    }

    fn update_globals<R: Rng>(&mut self, rng: &mut R, phase: Phase) {
        let target = self.target_accept;
        let nsd = self.priors.normal_sd();
        let hc = self.priors.halfcauchy_scale;
        let k = self.spec.n_genres;

        // δ | d0
        {
            let g = &self.params.global;
            let d0s = self.params.per_customer.iter().map(|c| c.d0);
            let (new, d) = Self::gibbs_normal_mean(rng, g.delta, d0s, g.sigma_d, nsd);
            self.params.global.delta = new;
            self.lp += d;
            self.count(Block::Delta, true, phase);
            self.check();
        }
        // σ_d
        {
            let delta = self.params.global.delta;
            let pairs: Vec<(f64, f64)> = self.params.per_customer.iter().map(|c| (c.d0, delta)).collect();
            let mut ls = self.scales.sigma_d;
            let res = Self::rw_scale(
                rng,
                self.params.global.sigma_d,
                &pairs,
                hc,
                &mut ls,
                phase,
                target,
            );
            self.scales.sigma_d = ls;
            self.count(Block::SigmaD, res.is_some(), phase);
            if let Some((s, d)) = res {
                self.params.global.sigma_d = s;
                self.lp += d;
                self.check();
            }
        }
        for kk in 0..k {
            let g = &self.params.global;
            let bs = self.params.per_customer.iter().map(|c| c.b[kk]);
            let (new, d) = Self::gibbs_normal_mean(rng, g.beta[kk], bs, g.sigma_b[kk], nsd);
            self.params.global.beta[kk] = new;
            self.lp += d;
            self.count(Block::Beta, true, phase);
            self.check();

            let pairs: Vec<(f64, f64)> = self.params.per_customer.iter().map(|c| (c.b[kk], new)).collect();
            let mut ls = self.scales.sigma_b[kk];
            let res = Self::rw_scale(
                rng,
                self.params.global.sigma_b[kk],
                &pairs,
                hc,
                &mut ls,
                phase,
                target,
            );
            self.scales.sigma_b[kk] = ls;
            self.count(Block::SigmaB, res.is_some(), phase);
            if let Some((s, d)) = res {
                self.params.global.sigma_b[kk] = s;
                self.lp += d;
                self.check();
            }
        }
        if self.spec.ar_level == ArLevel::Session {
            let pairs: Vec<(f64, f64)> = self
                .params
                .per_session
                .iter()
                .zip(&self.params.per_customer)
                .flat_map(|(sp, cp)| sp.p.iter().map(move |p| (*p, cp.phi)))
                .collect();
            let mut ls = self.scales.sigma_p;
            let res = Self::rw_scale(
                rng,
                self.params.global.sigma_p,
                &pairs,
                hc,
                &mut ls,
                phase,
                target,
            );
            self.scales.sigma_p = ls;
            self.count(Block::SigmaP, res.is_some(), phase);
            if let Some((s, d)) = res {
                self.params.global.sigma_p = s;
                self.lp += d;
                self.check();
            }
        }
        if self.spec.count_covariate {
            let g = &self.params.global;
            let (m1, s1) = (g.delta1.expect("spec"), g.sigma_d1.expect("spec"));
            let d1s = self.params.per_customer.iter().map(|c| c.d1.expect("spec"));
            let (new, d) = Self::gibbs_normal_mean(rng, m1, d1s, s1, nsd);
            self.params.global.delta1 = Some(new);
            self.lp += d;
            self.count(Block::Delta1, true, phase);
            self.check();

            let pairs: Vec<(f64, f64)> = self
                .params
                .per_customer
                .iter()
                .map(|c| (c.d1.expect("spec"), new))
                .collect();
            let mut ls = self.scales.sigma_d1;
            let res = Self::rw_scale(rng, s1, &pairs, hc, &mut ls, phase, target);
            self.scales.sigma_d1 = ls;
            self.count(Block::SigmaD1, res.is_some(), phase);
            if let Some((s, d)) = res {
                self.params.global.sigma_d1 = Some(s);
                self.lp += d;
                self.check();
            }
        }
    }

    // ---------------------------------------------------------------------
    // customer block

    fn count_loglik(&self, c: usize, d0: f64, d1: f64) -> f64 {
        if self.prior_only {
            return 0.0;
        }
        let cd = &self.data.customers[c];
        let mut ll = 0.0;
        for s in 0..cd.n_events.len() {
            let eta = d0 + d1 * cd.covariate[s];
            let lambda = eta.exp();
            ll += cd.n_events[s] * eta - lambda - ln_one_minus_exp_neg(lambda) - cd.ln_factorial[s];
        }
        ll
    }

    /// Fills the scratch buffers with proposed log-means for `indices` and
    /// returns the gap log-likelihood change.
    fn propose_gaps(
        &mut self,
        c: usize,
        indices: impl Iterator<Item = usize>,
        new_log_mean: impl Fn(&GapObs) -> f64,
    ) -> f64 {
        let cd = &self.data.customers[c];
        let psi = self.params.per_customer[c].psi;
        let (lm, tom) = (&self.log_mu[c], &self.t_over_mu[c]);
        self.scratch_lm.clear();
        self.scratch_tom.clear();
        let mut delta = 0.0;
        for i in indices {
            let g = &cd.gaps[i];
            let new_lm = clip_log_mean(new_log_mean(g));
            let new_tom = g.t * (-new_lm).exp();
            delta += -psi * (new_lm - lm[i]) - psi * (new_tom - tom[i]);
            self.scratch_lm.push(new_lm);
            self.scratch_tom.push(new_tom);
        }
        if self.prior_only {
            0.0
        } else {
            delta
        }
    }

    fn commit_gaps(&mut self, c: usize, indices: impl Iterator<Item = usize>) {
        for (n, i) in indices.enumerate() {
            self.log_mu[c][i] = self.scratch_lm[n];
            self.t_over_mu[c][i] = self.scratch_tom[n];
        }
    }

    fn update_customer<R: Rng>(&mut self, rng: &mut R, c: usize, phase: Phase) {
        let target = self.target_accept;
        let nsd = self.priors.normal_sd();
        let k = self.spec.n_genres;

        // d0
        {
            let g = &self.params.global;
            let cp = &self.params.per_customer[c];
            let d1 = cp.d1.unwrap_or(0.0);
            let z: f64 = rng.sample(StandardNormal);
            let proposed = cp.d0 + self.scales.d0[c].exp() * z;
            let delta = self.count_loglik(c, proposed, d1) - self.count_loglik(c, cp.d0, d1)
                + log_normal_pdf(proposed, g.delta, g.sigma_d)
                - log_normal_pdf(cp.d0, g.delta, g.sigma_d);
            let mut ls = self.scales.d0[c];
            let ok = Self::decide(rng, delta, &mut ls, phase, target);
            self.scales.d0[c] = ls;
            self.count(Block::D0, ok, phase);
            if ok {
                self.params.per_customer[c].d0 = proposed;
                self.lp += delta;
                self.check();
            }
        }
        // d1
        if self.spec.count_covariate {
            let g = &self.params.global;
            let cp = &self.params.per_customer[c];
            let (m1, s1) = (g.delta1.expect("spec"), g.sigma_d1.expect("spec"));
            let d1 = cp.d1.expect("spec");
            let z: f64 = rng.sample(StandardNormal);
            let proposed = d1 + self.scales.d1[c].exp() * z;
            let delta = self.count_loglik(c, cp.d0, proposed) - self.count_loglik(c, cp.d0, d1)
                + log_normal_pdf(proposed, m1, s1)
                - log_normal_pdf(d1, m1, s1);
            let mut ls = self.scales.d1[c];
            let ok = Self::decide(rng, delta, &mut ls, phase, target);
            self.scales.d1[c] = ls;
            self.count(Block::D1, ok, phase);
            if ok {
                self.params.per_customer[c].d1 = Some(proposed);
                self.lp += delta;
                self.check();
            }
        }
        // b_kc
        for kk in 0..k {
            let data = self.data;
            let (beta, sb) = (self.params.global.beta[kk], self.params.global.sigma_b[kk]);
            let current = self.params.per_customer[c].b[kk];
            let z: f64 = rng.sample(StandardNormal);
            let proposed = current + self.scales.b[c][kk].exp() * z;
            let ps: Vec<f64> = (0..data.customers[c].n_events.len())
                .map(|s| self.ar(c, s))
                .collect();
            let idx = &data.customers[c].by_genre[kk];
            let ll = self.propose_gaps(c, idx.iter().copied(), |g| proposed + ps[g.journey] * g.t_prev);
            let delta = ll + log_normal_pdf(proposed, beta, sb) - log_normal_pdf(current, beta, sb);
            let mut ls = self.scales.b[c][kk];
            let ok = Self::decide(rng, delta, &mut ls, phase, target);
            self.scales.b[c][kk] = ls;
            self.count(Block::B, ok, phase);
            if ok {
                self.commit_gaps(c, idx.iter().copied());
                self.params.per_customer[c].b[kk] = proposed;
                self.lp += delta;
                self.check();
            }
        }
        // φ_c
        match self.spec.ar_level {
            ArLevel::Session => {
                let sp = self.params.global.sigma_p;
                let ps = self.params.per_session[c].p.iter().copied();
                let (new, d) = Self::gibbs_normal_mean(rng, self.params.per_customer[c].phi, ps, sp, nsd);
                self.params.per_customer[c].phi = new;
                self.lp += d;
                self.count(Block::Phi, true, phase);
                self.check();
            }
            ArLevel::Customer => {
                let data = self.data;
                let current = self.params.per_customer[c].phi;
                let z: f64 = rng.sample(StandardNormal);
                let proposed = current + self.scales.phi[c].exp() * z;
                let b = self.params.per_customer[c].b.clone();
                let n = data.customers[c].gaps.len();
                let ll = self.propose_gaps(c, 0..n, |g| b[g.genre] + proposed * g.t_prev);
                let delta = ll + log_normal_pdf(proposed, 0.0, nsd) - log_normal_pdf(current, 0.0, nsd);
                let mut ls = self.scales.phi[c];
                let ok = Self::decide(rng, delta, &mut ls, phase, target);
                self.scales.phi[c] = ls;
                self.count(Block::Phi, ok, phase);
                if ok {
                    self.commit_gaps(c, 0..n);
                    self.params.per_customer[c].phi = proposed;
                    self.lp += delta;
                    self.check();
                }
            }
        }
        // ψ_c
        {
            let cd = &self.data.customers[c];
            let n = cd.gaps.len() as f64;
            let a: f64 = if self.prior_only {
                0.0
            } else {
                self.log_mu[c]
                    .iter()
                    .zip(&self.t_over_mu[c])
                    .map(|(lm, tom)| -lm - tom)
                    .sum()
            };
            let (n, b) = if self.prior_only {
                (0.0, 0.0)
            } else {
                (n, cd.sum_ln_t)
            };
            let (shape, rate) = (self.priors.psi_shape, self.priors.psi_rate);
            let lp = |psi: f64| {
                n * (psi * psi.ln() - ln_gamma(psi))
                    + psi * a
                    + (psi - 1.0) * b
                    + log_gamma_shape_rate_pdf(psi, shape, rate)
            };
            let current = self.params.per_customer[c].psi;
            let z: f64 = rng.sample(StandardNormal);
            let proposed = current * (self.scales.psi[c].exp() * z).exp();
            let delta = lp(proposed) - lp(current);
            let jac = proposed.ln() - current.ln();
            let mut ls = self.scales.psi[c];
            let ok = proposed > 0.0
                && proposed.is_finite()
                && Self::decide(rng, delta + jac, &mut ls, phase, target);
            self.scales.psi[c] = ls;
            self.count(Block::Psi, ok, phase);
            if ok {
                self.params.per_customer[c].psi = proposed;
                self.lp += delta;
                self.check();
            }
        }
    }

    // ---------------------------------------------------------------------
    // session block

    fn update_session<R: Rng>(&mut self, rng: &mut R, c: usize, s: usize, phase: Phase) {
        let data = self.data;
        let target = self.target_accept;
        let (phi, sp) = (self.params.per_customer[c].phi, self.params.global.sigma_p);
        let current = self.params.per_session[c].p[s];
        let z: f64 = rng.sample(StandardNormal);
        let proposed = current + self.scales.p[c][s].exp() * z;
        let bb = self.params.per_customer[c].b.clone();
        let (lo, hi) = data.customers[c].by_journey[s];
        let ll = self.propose_gaps(c, lo..hi, |g| bb[g.genre] + proposed * g.t_prev);
        let delta = ll + log_normal_pdf(proposed, phi, sp) - log_normal_pdf(current, phi, sp);
        let mut ls = self.scales.p[c][s];
        let ok = Self::decide(rng, delta, &mut ls, phase, target);
        self.scales.p[c][s] = ls;
        self.count(Block::P, ok, phase);
        if ok {
            self.commit_gaps(c, lo..hi);
            self.params.per_session[c].p[s] = proposed;
            self.lp += delta;
            self.check();
        }
    }
}
