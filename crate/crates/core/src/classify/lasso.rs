//! L1-penalized logistic regression by cyclic coordinate descent.
//!
//! Minimizes `(1/n) Σ logloss(y_i, β0 + x_iᵀw) + λ‖w‖₁` with an unpenalized
//! intercept. Every coordinate is minimized exactly (safeguarded Newton on
//! the one-dimensional subgradient equation), so fixed points satisfy the
//! KKT conditions to solver precision.

use super::Standardizer;

pub const DEFAULT_PENALTY: f64 = 0.02;
const TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;
/// Largest coefficient magnitude searched on standardized inputs.
const COEF_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivative and curvature of the mean logistic loss along coordinate `col`
/// (`None` = intercept) after shifting it by `delta` from the current fit.
fn directional(eta: &[f64], x: &[Vec<f64>], y: &[f64], col: Option<usize>, delta: f64) -> (f64, f64) {
    let n = eta.len() as f64;
    let (mut g, mut h) = (0.0, 0.0);
    for (i, e) in eta.iter().enumerate() {
        let xij = col.map_or(1.0, |j| x[i][j]);
        let p = sigmoid(e + delta * xij);
        g += (p - y[i]) * xij;
        h += p * (1.0 - p) * xij * xij;
    }
    (g / n, h / n)
}

/// Root of the increasing function `F(w) = g(w) + c` on `[lo, hi]` where
/// `F(lo) ≤ 0 ≤ F(hi)`, by Newton steps kept inside the bracket.
fn solve_1d(f: impl Fn(f64) -> (f64, f64), mut lo: f64, mut hi: f64, start: f64) -> f64 {
    let mut w = start.clamp(lo, hi);
    for _ in 0..200 {
        let (fw, hw) = f(w);
        if fw.abs() < 1e-15 {
            return w;
        }
        if fw < 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let newton = if hw > 0.0 { w - fw / hw } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - w).abs() <= 1e-15 * w.abs().max(1.0) || hi - lo <= 1e-15 * hi.abs().max(1.0) {
            return next;
        }
        w = next;
    }
    w
}

/// Grows the bracket from `from` in direction `dir` until `F` changes sign.
fn bracket(f: &impl Fn(f64) -> (f64, f64), from: f64, dir: f64) -> f64 {
    let mut step = 1.0;
    loop {
        let w = from + dir * step;
        if step >= COEF_LIMIT || (f(w).0 * dir) >= 0.0 {
            return w;
        }
        step *= 4.0;
    }
}

/// Coordinate descent on the given design without any rescaling.
pub fn lasso_fit_raw(x: &[Vec<f64>], y: &[bool], lambda: f64) -> LassoFit {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    let yf: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();
    let mut coef = vec![0.0; p];
    let rate = yf.iter().sum::<f64>() / n.max(1) as f64;
    let clipped = rate.clamp(1e-12, 1.0 - 1e-12);
    let mut intercept = (clipped / (1.0 - clipped)).ln();
    let mut eta = vec![intercept; n];
    if n == 0 || rate == 0.0 || rate == 1.0 {
        return LassoFit {
            intercept,
            coef,
            sweeps: 0,
            converged: true,
        };
    }
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;

        let f = |d: f64| directional(&eta, x, &yf, None, d);
        let (g0, _) = f(0.0);
        let delta = if g0 == 0.0 {
            0.0
        } else {
            let dir = -g0.signum();
            let far = bracket(&f, 0.0, dir);
            let (lo, hi) = if dir > 0.0 { (0.0, far) } else { (far, 0.0) };
            solve_1d(f, lo, hi, 0.0)
        };
        if delta != 0.0 {
            intercept += delta;
            eta.iter_mut().for_each(|e| *e += delta);
            max_change = max_change.max(delta.abs());
        }

        for j in 0..p {
            let w0 = coef[j];
            let f = |w: f64| directional(&eta, x, &yf, Some(j), w - w0);
            let (g_at_zero, _) = f(0.0);
            let w = if g_at_zero.abs() <= lambda {
                0.0
            } else if g_at_zero < -lambda {
                let pen = |w: f64| {
                    let (g, h) = f(w);
                    (g + lambda, h)
                };
                let hi = bracket(&pen, 0.0, 1.0);
                solve_1d(pen, 0.0, hi, w0.max(0.0))
            } else {
                let pen = |w: f64| {
                    let (g, h) = f(w);
                    (g - lambda, h)
                };
                let lo = bracket(&pen, 0.0, -1.0);
                solve_1d(pen, lo, 0.0, w0.min(0.0))
            };
            let change = w - w0;
            if change != 0.0 {
                for (e, row) in eta.iter_mut().zip(x) {
                    *e += change * row[j];
                }
                coef[j] = w;
                max_change = max_change.max(change.abs());
            }
        }
        if max_change < TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not converge in {MAX_SWEEPS} sweeps; returning last iterate");
    }
    LassoFit {
        intercept,
        coef,
        sweeps,
        converged,
    }
}

/// Fitted model on internally standardized features.
#[derive(Debug, Clone)]
pub struct LassoModel {
    pub scaler: Standardizer,
    pub fit: LassoFit,
}

impl LassoModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], lambda: f64) -> Self {
        let scaler = Standardizer::fit(x);
        let z = scaler.transform_all(x);
        let fit = lasso_fit_raw(&z, y, lambda);
        Self { scaler, fit }
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        let z = self.scaler.transform(row);
        sigmoid(self.fit.intercept + z.iter().zip(&self.fit.coef).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Positive (cancelled) when the fitted probability is at least 0.5.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<bool> {
        rows.iter().map(|r| self.probability(r) >= 0.5).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gradient of the mean logistic loss from scratch.
    fn gradient(x: &[Vec<f64>], y: &[bool], b0: f64, w: &[f64]) -> (f64, Vec<f64>) {
        let n = x.len() as f64;
        let mut g0 = 0.0;
        let mut g = vec![0.0; w.len()];
        for (row, &yi) in x.iter().zip(y) {
            let z = b0 + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - if yi { 1.0 } else { 0.0 };
            g0 += r / n;
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += r * xj / n;
            }
        }
        (g0, g)
    }

    fn kkt_violation(x: &[Vec<f64>], y: &[bool], lambda: f64, fit: &LassoFit) -> f64 {
        let (g0, g) = gradient(x, y, fit.intercept, &fit.coef);
        let mut worst = g0.abs();
        for (gj, wj) in g.iter().zip(&fit.coef) {
            let v = if *wj == 0.0 {
                (gj.abs() - lambda).max(0.0)
            } else {
                (gj + lambda * wj.signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    fn problem(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
        let n = rng.random_range(20..80);
        let p = rng.random_range(1..12);
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let y = x
            .iter()
            .map(|r| {
                let z: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
                rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())
            })
            .collect();
        (x, y)
    }

    #[test]
    fn kkt_conditions_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (x, y) = problem(&mut rng);
            let lambda = rng.random_range(0.005..0.2);
            let fit = lasso_fit_raw(&x, &y, lambda);
            assert!(fit.converged);
            let v = kkt_violation(&x, &y, lambda, &fit);
            assert!(v < 1e-5, "violation {v}");
        }
    }

    #[test]
    fn huge_penalty_gives_base_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = problem(&mut rng);
        let fit = LassoModel::fit(&x, &y, 1e6).fit;
        assert!(fit.coef.iter().all(|w| *w == 0.0));
        let rate = y.iter().filter(|b| **b).count() as f64 / y.len() as f64;
        assert!((fit.intercept - (rate / (1.0 - rate)).ln()).abs() < 1e-9);
    }

    #[test]
    fn separable_data_is_classified() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let model = LassoModel::fit(&x, &y, DEFAULT_PENALTY);
        assert_eq!(model.predict(&x), y);
        assert!(model.fit.coef[0] > 0.0);
    }

    #[test]
    fn single_class_training() {
        let x = vec![vec![1.0], vec![2.0]];
        let model = LassoModel::fit(&x, &[true, true], 0.02);
        assert_eq!(model.predict(&[vec![-5.0]]), vec![true]);
    }
}
