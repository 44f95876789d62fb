//! Per-customer profiles built from posterior point estimates, plus
//! standardization and interpretation helpers.
//!
//! Profile order is `d0, b1..bK, phi, psi` (K + 3 values).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{ChurnLabel, Dataset};
use crate::sampler::PosteriorSummary;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("posterior summary has no entry for {0}")]
    MissingParameter(String),
    #[error("need at least {need} customers, got {got}")]
    TooFewCustomers { need: usize, got: usize },
    #[error("group {label} has {got} customers; at least 3 are needed")]
    TooFewInGroup { label: ChurnLabel, got: usize },
    #[error("profiles are unlabelled")]
    Unlabelled,
    #[error("profiles table: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which posterior point estimate fills the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimate {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomerProfile {
    pub customer_id: String,
    pub label: Option<ChurnLabel>,
    pub values: Vec<f64>,
    pub standardized: Option<Vec<f64>>,
}

/// Column names of a profile with `k` genres.
pub fn profile_names(k: usize) -> Vec<String> {
    let mut names = vec!["d0".to_string()];
    names.extend((1..=k).map(|i| format!("b{i}")));
    names.push("phi".into());
    names.push("psi".into());
    names
}

/// Looks up `d0[c]`, `b[c,k]`, `phi[c]`, `psi[c]` by name for every customer.
pub fn extract_profiles(
    summary: &PosteriorSummary,
    data: &Dataset,
    n_genres: usize,
    estimate: PointEstimate,
) -> Result<Vec<CustomerProfile>, FeatureError> {
    data.customers
        .iter()
        .enumerate()
        .map(|(i, cust)| {
            let c = i + 1;
            let mut keys = vec![format!("d0[{c}]")];
            keys.extend((1..=n_genres).map(|k| format!("b[{c},{k}]")));
            keys.push(format!("phi[{c}]"));
            keys.push(format!("psi[{c}]"));
            let values = keys
                .into_iter()
                .map(|key| {
                    let row = summary.get(&key).ok_or(FeatureError::MissingParameter(key))?;
                    Ok(match estimate {
                        PointEstimate::Mean => row.mean,
                        PointEstimate::Median => row.median,
                    })
                })
                .collect::<Result<Vec<f64>, FeatureError>>()?;
            Ok(CustomerProfile {
                customer_id: cust.customer_id.clone(),
                label: cust.label,
                values,
                standardized: None,
            })
        })
        .collect()
}

fn column_mean_sd(rows: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Centres every column and divides by its sample (n − 1) sd. Columns with
/// zero spread become all zeros; their indices are returned.
pub fn standardize_columns(rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<usize>), FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::TooFewCustomers {
            need: 2,
            got: rows.len(),
        });
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(FeatureError::Format("rows differ in length".into()));
    }
    let mut out = vec![vec![0.0; p]; rows.len()];
    let mut degenerate = Vec::new();
    for j in 0..p {
        let (mean, sd) = column_mean_sd(rows, j);
        // Relative threshold so round-off noise in a constant column counts as constant.
        if !(sd > 1e-12 * mean.abs().max(1e-300)) {
            degenerate.push(j);
            continue;
        }
        for (o, r) in out.iter_mut().zip(rows) {
            o[j] = (r[j] - mean) / sd;
        }
    }
    Ok((out, degenerate))
}

/// Fills `standardized` on every profile. Returns zero-variance column
/// indices, each of which is also logged as a warning.
pub fn standardize(profiles: &mut [CustomerProfile]) -> Result<Vec<usize>, FeatureError> {
    let rows: Vec<Vec<f64>> = profiles.iter().map(|p| p.values.clone()).collect();
    let (z, degenerate) = standardize_columns(&rows)?;
    let names = profile_names(rows[0].len().saturating_sub(3));
    for j in &degenerate {
        log::warn!(
            "profile column {} has zero variance; standardized to 0",
            names.get(*j).map_or("?", String::as_str)
        );
    }
    for (p, z) in profiles.iter_mut().zip(z) {
        p.standardized = Some(z);
    }
    Ok(degenerate)
}

/// Multiplicative change `e^b − 1` in mean gap time for a genre effect `b`.
pub fn percent_change(b: f64) -> f64 {
    b.exp_m1()
}

/// `"38% shorter"`, `"12% longer"` or `"no change"`.
pub fn describe_percent_change(b: f64) -> String {
    let pc = percent_change(b) * 100.0;
    let rounded = pc.abs().round();
    if rounded == 0.0 {
        "no change".into()
    } else if pc < 0.0 {
        format!("{rounded:.0}% shorter")
    } else {
        format!("{rounded:.0}% longer")
    }
}

/// Pearson correlation matrix of the columns of `rows`. Entries involving a
/// constant column are NaN off the diagonal; the diagonal is always 1.
pub fn correlation_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut m = vec![vec![0.0; p]; p];
    for a in 0..p {
        m[a][a] = 1.0;
        for b in 0..a {
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for r in rows {
                let (x, y) = (r[a] - means[a], r[b] - means[b]);
                sab += x * y;
                saa += x * x;
                sbb += y * y;
            }
            let rho = if saa > 0.0 && sbb > 0.0 {
                (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
            } else {
                f64::NAN
            };
            m[a][b] = rho;
            m[b][a] = rho;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCorrelations {
    pub names: Vec<String>,
    pub active: Vec<Vec<f64>>,
    pub cancelled: Vec<Vec<f64>>,
}

impl GroupCorrelations {
    /// Single matrix with the active group below the diagonal and the
    /// cancelled group above it.
    pub fn combined(&self) -> Vec<Vec<f64>> {
        let p = self.names.len();
        (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| match i.cmp(&j) {
                        std::cmp::Ordering::Greater => self.active[i][j],
                        std::cmp::Ordering::Less => self.cancelled[i][j],
                        std::cmp::Ordering::Equal => 1.0,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["lower=active;upper=cancelled".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        for (name, row) in self.names.iter().zip(self.combined()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.4}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Per-group Pearson correlations of the raw profile values.
pub fn group_correlations(profiles: &[CustomerProfile]) -> Result<GroupCorrelations, FeatureError> {
    let rows_for = |label: ChurnLabel| -> Result<Vec<Vec<f64>>, FeatureError> {
        let rows: Vec<Vec<f64>> = profiles
            .iter()
            .filter(|p| p.label == Some(label))
            .map(|p| p.values.clone())
            .collect();
        if rows.len() < 3 {
            return Err(FeatureError::TooFewInGroup {
                label,
                got: rows.len(),
            });
        }
        Ok(rows)
    };
    if profiles.iter().any(|p| p.label.is_none()) {
        return Err(FeatureError::Unlabelled);
    }
    let active = rows_for(ChurnLabel::Active)?;
    let cancelled = rows_for(ChurnLabel::Cancelled)?;
    Ok(GroupCorrelations {
        names: profile_names(active[0].len().saturating_sub(3)),
        active: correlation_matrix(&active),
        cancelled: correlation_matrix(&cancelled),
    })
}

/// Writes `customer_id, label, <profile columns>, z_<profile columns>`.
/// Standardized cells are empty when a profile has not been standardized.
pub fn write_profiles<W: Write>(profiles: &[CustomerProfile], w: W) -> Result<(), FeatureError> {
    let p = profiles.first().map_or(0, |x| x.values.len());
    let names = profile_names(p.saturating_sub(3));
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["customer_id".to_string(), "label".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("z_{n}")));
    wtr.write_record(&header)?;
    for prof in profiles {
        if prof.values.len() != p {
            return Err(FeatureError::Format(format!(
                "customer {}: {} values, expected {p}",
                prof.customer_id,
                prof.values.len()
            )));
        }
        let mut rec = vec![
            prof.customer_id.clone(),
            prof.label.map_or(String::new(), |l| l.as_str().to_string()),
        ];
        rec.extend(prof.values.iter().map(f64::to_string));
        match &prof.standardized {
            Some(z) => rec.extend(z.iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), p)),
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_profiles<R: Read>(r: R) -> Result<Vec<CustomerProfile>, FeatureError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || (header.len() - 2) % 2 != 0 {
        return Err(FeatureError::Format("unexpected column count".into()));
    }
    let p = (header.len() - 2) / 2;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| FeatureError::Format(format!("line {}: {msg}", line + 2));
        let label = match &rec[1] {
            "" => None,
            s => Some(s.parse::<ChurnLabel>().map_err(|e| bad(e.to_string()))?),
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let values = (2..2 + p)
            .map(|i| parse(&rec[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let standardized = if rec[2 + p].is_empty() {
            None
        } else {
            Some(
                (2 + p..2 + 2 * p)
                    .map(|i| parse(&rec[i]))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        out.push(CustomerProfile {
            customer_id: rec[0].to_string(),
            label,
            values,
            standardized,
        });
    }
    Ok(out)
}
