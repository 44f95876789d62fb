//! On-disk draws: `chain_<i>.csv` (header = parameter names, one row per
//! retained draw) plus `meta.json` with the configuration and acceptance.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockAcceptance, ChainDraws, ChainOutput, McmcConfig, SamplerError};

#[derive(Serialize, Deserialize)]
struct DrawsMeta {
    config: McmcConfig,
    n_global: usize,
    n_chains: usize,
    draws_per_chain: usize,
    acceptance: Vec<Vec<BlockAcceptance>>,
}

fn chain_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("chain_{}.csv", i + 1))
}

/// Writes all chains into `dir`, creating it if needed. Values use the
/// shortest representation that round-trips exactly.
pub fn write_draws(draws: &ChainDraws, dir: &Path) -> Result<(), SamplerError> {
    fs::create_dir_all(dir)?;
    let p = draws.n_params();
    for (i, chain) in draws.chains.iter().enumerate() {
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(chain_path(dir, i))?));
        wtr.write_record(&draws.names)?;
        if p > 0 {
            for row in chain.values.chunks_exact(p) {
                wtr.write_record(row.iter().map(|v| v.to_string()))?;
            }
        }
        wtr.flush()?;
    }
    let meta = DrawsMeta {
        config: draws.config.clone(),
        n_global: draws.n_global,
        n_chains: draws.n_chains(),
        draws_per_chain: draws.draws_per_chain(),
        acceptance: draws.chains.iter().map(|c| c.acceptance.clone()).collect(),
    };
    let f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(f, &meta).map_err(|e| SamplerError::Format(e.to_string()))?;
    Ok(())
}

pub fn read_draws(dir: &Path) -> Result<ChainDraws, SamplerError> {
    let f = BufReader::new(File::open(dir.join("meta.json"))?);
    let meta: DrawsMeta =
        serde_json::from_reader(f).map_err(|e| SamplerError::Format(format!("meta.json: {e}")))?;
    if meta.acceptance.len() != meta.n_chains {
        return Err(SamplerError::Format(
            "meta.json: acceptance entries do not match chain count".into(),
        ));
    }
    let mut names: Option<Vec<String>> = None;
    let mut chains = Vec::with_capacity(meta.n_chains);
    for (i, acceptance) in meta.acceptance.into_iter().enumerate() {
        let path = chain_path(dir, i);
        let mut rdr = csv::Reader::from_path(&path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        match &names {
            Some(n) if *n != header => {
                return Err(SamplerError::Format(format!(
                    "{}: parameter names differ from chain 1",
                    path.display()
                )))
            }
            None => names = Some(header.clone()),
            _ => {}
        }
        let mut values = Vec::with_capacity(header.len() * meta.draws_per_chain);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for field in rec.iter() {
                let v: f64 = field.parse().map_err(|_| {
                    SamplerError::Format(format!(
                        "{}: row {}: bad value {field:?}",
                        path.display(),
                        row + 2
                    ))
                })?;
                values.push(v);
            }
        }
        if values.len() != header.len() * meta.draws_per_chain {
            return Err(SamplerError::Format(format!(
                "{}: expected {} draws",
                path.display(),
                meta.draws_per_chain
            )));
        }
        chains.push(ChainOutput { values, acceptance });
    }
    let names = names.unwrap_or_default();
    if meta.n_global > names.len() {
        return Err(SamplerError::Format(
            "meta.json: n_global exceeds parameter count".into(),
        ));
    }
    Ok(ChainDraws {
        names,
        n_global: meta.n_global,
        chains,
        config: meta.config,
    })
}
