//! Ward agglomerative clustering on Euclidean distances.
//!
//! Merges are chosen by the Lance–Williams recurrence on squared distances
//! (the `ward.D2` convention). A merge of clusters `i` and `j` is reported at
//! height `sqrt(2 · n_i n_j / (n_i + n_j) · ‖c_i − c_j‖²)`, so two singletons
//! merge at their plain Euclidean distance.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEIGHT_CONVENTION: &str =
    "ward.D2: height = sqrt(2 * n_a * n_b / (n_a + n_b) * squared centroid distance)";

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("distance matrix: {0}")]
    Matrix(String),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("cut size {k} outside 1..={n}")]
    BadCut { k: usize, n: usize },
    #[error("{0} labels for {1} leaves")]
    Labels(usize, usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Symmetric matrix of non-negative distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates and wraps a row-major `n × n` matrix.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, ClusterError> {
        if entries.len() != n * n {
            return Err(ClusterError::Matrix(format!(
                "{} entries for a {n}x{n} matrix",
                entries.len()
            )));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(ClusterError::Matrix(format!("non-zero diagonal at {}", i + 1)));
            }
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if !(a >= 0.0 && a.is_finite() && b >= 0.0 && b.is_finite()) {
                    return Err(ClusterError::Matrix(format!(
                        "entry ({}, {}) is negative or not finite",
                        i + 1,
                        j + 1
                    )));
                }
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(ClusterError::Matrix(format!(
                        "asymmetric at ({}, {}): {a} vs {b}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Pairwise Euclidean distances between equal-length vectors.
pub fn distance_matrix(points: &[Vec<f64>]) -> Result<DistanceMatrix, ClusterError> {
    let n = points.len();
    let p = points.first().map_or(0, Vec::len);
    if points.iter().any(|x| x.len() != p) {
        return Err(ClusterError::Matrix("vectors differ in length".into()));
    }
    let entries: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| {
                points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    DistanceMatrix::new(n, entries)
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `m` (0-based) has id `n + m`. `a < b` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub height_convention: String,
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

/// Ward clustering. Each step scans all active pairs for the smallest
/// Lance–Williams value, breaking ties by the lowest `(a, b)` cluster ids.
pub fn ward_linkage(d: &DistanceMatrix) -> Result<Dendrogram, ClusterError> {
    let n = d.len();
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    // Squared distances between active clusters, indexed by slot.
    let mut d2: Vec<f64> = d.entries.iter().map(|x| x * x).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);
    for m in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let v = d2[i * n + j];
                let (lo, hi) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                let better = match best {
                    None => true,
                    Some((bv, _, _, blo, bhi)) => v < bv || (v == bv && (lo, hi) < (blo, bhi)),
                };
                if better {
                    best = Some((v, i, j, lo, hi));
                }
            }
        }
        let (v, i, j, lo, hi) = best.expect("at least two active clusters");
        let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = sizes[k] as f64;
            let updated = ((ni + nk) * d2[i * n + k] + (nj + nk) * d2[j * n + k] - nk * v) / (ni + nj + nk);
            let updated = updated.max(0.0);
            d2[i * n + k] = updated;
            d2[k * n + i] = updated;
        }
        active[j] = false;
        sizes[i] += sizes[j];
        ids[i] = n + m;
        merges.push(Merge {
            a: lo,
            b: hi,
            height: v.max(0.0).sqrt(),
            size: sizes[i],
        });
    }
    Ok(Dendrogram {
        height_convention: HEIGHT_CONVENTION.to_string(),
        labels: (1..=n).map(|i| i.to_string()).collect(),
        merges,
    })
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.merges.len() + 1
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, ClusterError> {
        if labels.len() != self.n_leaves() {
            return Err(ClusterError::Labels(labels.len(), self.n_leaves()));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Cluster number (1-based, numbered by first leaf) of every leaf after
    /// undoing the last `k − 1` merges.
    pub fn cut_tree(&self, k: usize) -> Result<Vec<usize>, ClusterError> {
        let n = self.n_leaves();
        if k == 0 || k > n {
            return Err(ClusterError::BadCut { k, n });
        }
        let total = 2 * n - 1;
        let mut parent: Vec<usize> = (0..total).collect();
        for (m, merge) in self.merges.iter().take(n - k).enumerate() {
            parent[merge.a] = n + m;
            parent[merge.b] = n + m;
        }
        let root = |mut x: usize| {
            while parent[x] != x {
                x = parent[x];
            }
            x
        };
        let mut number = std::collections::HashMap::new();
        Ok((0..n)
            .map(|leaf| {
                let r = root(leaf);
                let next = number.len() + 1;
                *number.entry(r).or_insert(next)
            })
            .collect())
    }

    /// Newick string; branch lengths are height differences.
    pub fn to_newick(&self) -> String {
        let n = self.n_leaves();
        let height = |id: usize| if id < n { 0.0 } else { self.merges[id - n].height };
        fn quote(label: &str) -> String {
            if label.chars().any(|c| "()[]':;, \t".contains(c)) {
                format!("'{}'", label.replace('\'', "''"))
            } else {
                label.to_string()
            }
        }
        fn node(d: &Dendrogram, id: usize, n: usize, out: &mut String, height: &dyn Fn(usize) -> f64) {
            if id < n {
                out.push_str(&quote(&d.labels[id]));
                return;
            }
            let m = d.merges[id - n];
            out.push('(');
            for (i, child) in [m.a, m.b].into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                node(d, child, n, out, height);
                let _ = write!(out, ":{}", m.height - height(child));
            }
            out.push(')');
        }
        let mut out = String::new();
        node(self, 2 * n - 2, n, &mut out, &height);
        out.push(';');
        out
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), ClusterError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self, ClusterError> {
        Ok(serde_json::from_reader(r)?)
    }
}

/// `customer_id,cluster` rows.
pub fn write_cluster_labels<W: Write>(ids: &[String], clusters: &[usize], w: W) -> Result<(), ClusterError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["customer_id", "cluster"])?;
    for (id, c) in ids.iter().zip(clusters) {
        wtr.write_record([id.as_str(), &c.to_string()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Fraction of leaf pairs on which two partitions agree.
pub fn rand_index<A: PartialEq, B: PartialEq>(x: &[A], y: &[B]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if (x[i] == x[j]) == (y[i] == y[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}
