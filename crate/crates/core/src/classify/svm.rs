//! Soft-margin C-SVC with a polynomial kernel, solved by SMO using
//! second-order working-set selection.

use serde::{Deserialize, Serialize};

use super::Standardizer;

const KKT_TOL: f64 = 1e-5;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub cost: f64,
    pub degree: u32,
    /// Kernel scale; `None` means `1/p`.
    pub gamma: Option<f64>,
    pub coef0: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            cost: 1.0,
            degree: 3,
            gamma: None,
            coef0: 0.0,
            max_iter: 1_000_000,
        }
    }
}

/// `(γ⟨x, z⟩ + r)^d`.
pub fn poly_kernel(x: &[f64], z: &[f64], gamma: f64, coef0: f64, degree: u32) -> f64 {
    let dot: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
    (gamma * dot + coef0).powi(degree as i32)
}

/// Dual solution of `min ½αᵀQα − Σα` subject to `0 ≤ α ≤ C`, `Σ y α = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Final maximal KKT violation `m(α) − M(α)`.
    pub gap: f64,
    pub converged: bool,
}

/// SMO on a precomputed kernel matrix with labels `y ∈ {−1, +1}`.
pub fn smo(kernel: &[Vec<f64>], y: &[f64], cost: f64, max_iter: usize) -> SmoSolution {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[i][j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < cost) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < cost);
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        // i maximizes −y G over I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if is_up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i_sel = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if i_sel == usize::MAX {
                continue;
            }
            let b = gmax - v;
            if b > 0.0 {
                let a = kernel[i_sel][i_sel] + kernel[t][t] - 2.0 * kernel[i_sel][t];
                let a = if a > 0.0 { a } else { TAU };
                let obj = -(b * b) / a;
                if obj < best_obj {
                    best_obj = obj;
                    j_sel = t;
                }
            }
        }
        gap = gmax - gmin;
        if i_sel == usize::MAX || j_sel == usize::MAX || gap < KKT_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = {
            let a = kernel[i][i] + kernel[j][j] - 2.0 * kernel[i][j];
            if a > 0.0 {
                a
            } else {
                TAU
            }
        };
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > cost {
                    alpha[i] = cost;
                    alpha[j] = cost - diff;
                }
            } else if alpha[j] > cost {
                alpha[j] = cost;
                alpha[i] = cost + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > cost {
                if alpha[i] > cost {
                    alpha[i] = cost;
                    alpha[j] = sum - cost;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cost {
                if alpha[j] > cost {
                    alpha[j] = cost;
                    alpha[i] = sum - cost;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    if !converged {
        log::warn!("SMO stopped after {max_iter} iterations with KKT violation {gap:.3e}");
    }
    // ρ: mean of y G over free vectors, else the midpoint of the feasible range.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= cost {
            if y[t] < 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    };
    SmoSolution {
        alpha,
        rho,
        iterations,
        gap,
        converged,
    }
}

/// Trained classifier on internally standardized inputs.
#[derive(Debug, Clone)]
pub struct SvmModel {
    scaler: Standardizer,
    support: Vec<Vec<f64>>,
    coef: Vec<f64>,
    rho: f64,
    gamma: f64,
    coef0: f64,
    degree: u32,
    constant: Option<bool>,
    pub solution: Option<SmoSolution>,
}

impl SvmModel {
    pub fn fit(x: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Self {
        let scaler = Standardizer::fit(x);
        let z = scaler.transform_all(x);
        let p = x.first().map_or(1, Vec::len).max(1);
        let gamma = cfg.gamma.unwrap_or(1.0 / p as f64);
        let pos = labels.iter().filter(|b| **b).count();
        let mut model = Self {
            scaler,
            support: Vec::new(),
            coef: Vec::new(),
            rho: 0.0,
            gamma,
            coef0: cfg.coef0,
            degree: cfg.degree,
            constant: None,
            solution: None,
        };
        if pos == 0 || pos == labels.len() {
            model.constant = Some(pos > 0);
            return model;
        }
        let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let kernel: Vec<Vec<f64>> = z
            .iter()
            .map(|a| {
                z.iter()
                    .map(|b| poly_kernel(a, b, gamma, cfg.coef0, cfg.degree))
                    .collect()
            })
            .collect();
        let sol = smo(&kernel, &y, cfg.cost, cfg.max_iter);
        for (t, a) in sol.alpha.iter().enumerate() {
            if *a > 0.0 {
                model.support.push(z[t].clone());
                model.coef.push(a * y[t]);
            }
        }
        model.rho = sol.rho;
        model.solution = Some(sol);
        model
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        let z = self.scaler.transform(row);
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * poly_kernel(s, &z, self.gamma, self.coef0, self.degree))
            .sum::<f64>()
            - self.rho
    }

    /// Positive (cancelled) when the decision value is above zero.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<bool> {
        match self.constant {
            Some(v) => vec![v; rows.len()],
            None => rows.iter().map(|r| self.decision(r) > 0.0).collect(),
        }
    }
}
