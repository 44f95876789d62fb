//! Adaptive Metropolis-within-Gibbs sampler for the hierarchical model, with
//! convergence diagnostics and posterior summaries.
//!
//! Each sweep visits the global block (δ, σ_d, β_k, σ_bk, σ_p), then every
//! customer (d0, b_k, φ, ψ), then every journey coefficient p_sc. Normal means
//! with normal children (δ, β_k, and φ_c when p_sc is journey-level) get exact
//! conjugate draws; everything else is a single-site random walk, on the log
//! scale for positive parameters. Proposal scales adapt by Robbins–Monro
//! during the first `n_adapt` sweeps and are frozen afterwards.

mod chain;
mod diagnostics;
mod io;

pub use chain::{BlockAcceptance, UpdateKind};
pub use diagnostics::{
    ess, ess_from_chains, quantile_type7, rhat, rhat_from_chains, summarize, DiagnosticError, ParamSummary,
    PosteriorSummary,
};
pub use io::{read_draws, write_draws};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::Dataset;
use crate::model::{HierarchicalParams, ModelError, ModelSpec, ParamLayout, PriorConfig};
use chain::{ChainState, ModelData, Phase};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("dataset structure: {0}")]
    Structure(String),
    #[error("log-posterior is not finite at the initial values ({0})")]
    NonFiniteInit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("draws file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_adapt: usize,
    pub n_burnin: usize,
    pub n_iter: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub model: ModelSpec,
    /// Drop the count and gap-time likelihood terms (prior predictive checks).
    pub prior_only: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_adapt: 1000,
            n_burnin: 2000,
            n_iter: 20_000,
            thin: 10,
            n_chains: 3,
            seed: 1,
            target_accept: 0.44,
            model: ModelSpec::default(),
            prior_only: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.thin == 0 {
            return Err(SamplerError::Config("thin must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(SamplerError::Config("need at least one chain".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.model.n_genres == 0 {
            return Err(SamplerError::Config("n_genres must be at least 1".into()));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        self.n_iter / self.thin
    }
}

/// Retained draws of one chain, row-major (draw × parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub values: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
}

/// Retained draws of all chains plus the parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub names: Vec<String>,
    /// Number of leading global parameters in `names`.
    pub n_global: usize,
    pub chains: Vec<ChainOutput>,
    pub config: McmcConfig,
}

impl ChainDraws {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        match self.n_params() {
            0 => 0,
            p => self.chains.first().map_or(0, |c| c.values.len() / p),
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of parameter `idx` in chain `chain`.
    pub fn column(&self, chain: usize, idx: usize) -> Vec<f64> {
        self.chains[chain]
            .values
            .chunks_exact(self.n_params())
            .map(|row| row[idx])
            .collect()
    }

    /// Per-chain draws of a named parameter.
    pub fn chains_of(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let idx = self.param_index(name)?;
        Some((0..self.n_chains()).map(|c| self.column(c, idx)).collect())
    }

    /// All chains' draws of a named parameter, concatenated.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        self.chains_of(name).map(|cs| cs.concat())
    }

    pub fn global_names(&self) -> &[String] {
        &self.names[..self.n_global]
    }
}

/// Runs `config.n_chains` independent chains in parallel. Chain `i` draws from
/// its own ChaCha8 stream seeded with `config.seed + i`, so results do not
/// depend on scheduling or thread count.
pub fn run_mcmc(
    data: &Dataset,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<ChainDraws, SamplerError> {
    config.validate()?;
    priors.validate()?;
    if data.customers.is_empty() {
        return Err(SamplerError::Structure("dataset has no customers".into()));
    }
    let spec = config.model;
    let model_data = ModelData::new(data, &spec)?;
    let layout = ParamLayout::new(data, spec);
    // Fails early, with the offending term named, before spawning chains.
    ChainState::new(
        data,
        &model_data,
        *priors,
        spec,
        config.prior_only,
        config.target_accept,
    )?;

    let chains: Result<Vec<ChainOutput>, SamplerError> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| {
            run_chain(
                data,
                &model_data,
                &layout,
                priors,
                config,
                config.seed.wrapping_add(chain as u64),
            )
        })
        .collect();
    Ok(ChainDraws {
        names: layout.names(),
        n_global: layout.n_global(),
        chains: chains?,
        config: config.clone(),
    })
}

fn adaptation_gain(step: usize) -> f64 {
    1.0 / ((step + 1) as f64).powf(0.6)
}

fn run_chain(
    data: &Dataset,
    model_data: &ModelData,
    layout: &ParamLayout,
    priors: &PriorConfig,
    config: &McmcConfig,
    seed: u64,
) -> Result<ChainOutput, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ChainState::new(
        data,
        model_data,
        *priors,
        config.model,
        config.prior_only,
        config.target_accept,
    )?;
    for step in 0..config.n_adapt {
        state.sweep(
            &mut rng,
            Phase {
                gain: Some(adaptation_gain(step)),
                record: false,
            },
        );
    }
    let frozen = Phase {
        gain: None,
        record: true,
    };
    for _ in 0..config.n_burnin {
        state.sweep(&mut rng, frozen);
    }
    let mut values = Vec::with_capacity(config.retained_per_chain() * layout.len());
    for it in 1..=config.n_iter {
        state.sweep(&mut rng, frozen);
        if it % config.thin == 0 {
            layout.flatten_into(&state.params, &mut values);
        }
    }
    Ok(ChainOutput {
        values,
        acceptance: state.acceptance(),
    })
}

/// Parameters of one retained draw.
pub fn params_at(
    draws: &ChainDraws,
    data: &Dataset,
    chain: usize,
    draw: usize,
) -> Result<HierarchicalParams, SamplerError> {
    let layout = ParamLayout::new(data, draws.config.model);
    if layout.names() != draws.names {
        return Err(SamplerError::Structure(
            "draws do not match the dataset's parameter layout".into(),
        ));
    }
    let p = draws.n_params();
    let row = draws.chains[chain]
        .values
        .get(draw * p..(draw + 1) * p)
        .ok_or_else(|| SamplerError::Structure(format!("draw {draw} out of range")))?;
    Ok(layout.unflatten(row)?)
}
