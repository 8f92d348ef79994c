//! Quasi-Newton (BFGS) minimisation with backtracking line search, plus the
//! finite-difference helpers used for numeric gradients and Hessians.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm of the objective
    /// (a per-observation mean, so the threshold is sample-size free).
    pub gtol: f64,
    /// Number of starts: the initial point plus `starts - 1` perturbations.
    pub starts: usize,
    pub perturb_sd: f64,
    /// Relative step for central differences.
    pub fd_step: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iter: 500,
            gtol: 1e-6,
            starts: 5,
            perturb_sd: 0.5,
            fd_step: 1e-6,
        }
    }
}

pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        central_gradient(|p| self.value(p), x, 1e-6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the starting point.
    pub initial_value: f64,
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Symmetrised Hessian by central differences of a gradient.
pub fn numeric_hessian<G: Fn(&[f64]) -> Vec<f64>>(grad: G, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let k = x.len();
    let mut h = DMatrix::zeros(k, k);
    let mut p = x.to_vec();
    for j in 0..k {
        let step = rel_step * x[j].abs().max(1.0);
        p[j] = x[j] + step;
        let up = grad(&p);
        p[j] = x[j] - step;
        let down = grad(&p);
        p[j] = x[j];
        for i in 0..k {
            h[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Ratio of largest to smallest absolute eigenvalue.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(h.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|e| e.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// BFGS on the inverse Hessian with Armijo backtracking.
pub fn bfgs<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &OptimConfig) -> OptimResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut f = obj.value(&x);
    let initial_value = f;
    let mut g = obj.gradient(&x);
    let mut hinv = identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut stalled = 0;

    if !f.is_finite() {
        return OptimResult {
            x,
            value: f,
            grad: g,
            iterations,
            converged: false,
            initial_value,
        };
    }

    while iterations < cfg.max_iter {
        if max_abs(&g) < cfg.gtol {
            break;
        }
        iterations += 1;
        let mut d = mat_vec(&hinv, &g, -1.0);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 || !slope.is_finite() {
            hinv = identity(n);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut alpha = if fresh { (1.0 / max_abs(&g)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let fn_ = obj.value(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if fresh {
                break;
            }
            hinv = identity(n);
            fresh = true;
            continue;
        };
        let gn = obj.gradient(&xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy.is_finite() {
            if fresh {
                let scale = sy / dot(&y, &y);
                hinv = identity(n);
                hinv.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        if (f - fnew).abs() <= 1e-14 * (1.0 + f.abs()) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = xn;
        f = fnew;
        g = gn;
        log::debug!("bfgs iter {iterations}: f {f:.8} |g| {:.3e}", max_abs(&g));
        if stalled >= 5 {
            break;
        }
    }
    let converged = max_abs(&g) < cfg.gtol;
    OptimResult {
        x,
        value: f,
        grad: g,
        iterations,
        converged,
        initial_value,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], scale: f64) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| scale * dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, 1.0);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Runs BFGS from `x0` and from `cfg.starts - 1` seeded perturbations of it,
/// returning the best result (ties go to the lowest start index) together
/// with the best starting objective value.
pub fn multistart<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &OptimConfig, seed: u64, exec: Exec) -> OptimResult {
    let starts = cfg.starts.max(1);
    let noise = Normal::new(0.0, cfg.perturb_sd.max(0.0)).expect("finite sd");
    let points: Vec<Vec<f64>> = (0..starts)
        .map(|s| {
            if s == 0 {
                x0.to_vec()
            } else {
                let mut rng = seed::rng(seed::derive(seed, "multistart", s as u64));
                x0.iter().map(|v| v + noise.sample(&mut rng)).collect()
            }
        })
        .collect();
    let results = exec.map(starts, |s| bfgs(obj, &points[s], cfg));
    let best_initial = results
        .iter()
        .map(|r| r.initial_value)
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let mut best = results
        .into_iter()
        .reduce(|a, b| {
            if b.value < a.value || !a.value.is_finite() {
                b
            } else {
                a
            }
        })
        .expect("at least one start");
    best.initial_value = best_initial;
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }

        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]
        }
    }

    struct Quadratic;

    impl Objective for Quadratic {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * (v - 1.0).powi(2))
                .sum()
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let r = bfgs(&Rosenbrock, &[-1.2, 1.0], &OptimConfig::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
        assert!(r.value <= r.initial_value);
    }

    #[test]
    fn numeric_gradient_objective() {
        let r = bfgs(&Quadratic, &[0.0; 4], &OptimConfig::default());
        assert!(r.converged);
        for v in &r.x {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_and_condition() {
        let h = numeric_hessian(|x| Rosenbrock.gradient(x), &[1.0, 1.0], 1e-5);
        assert!((h[(0, 0)] - 802.0).abs() < 1e-3);
        assert!((h[(0, 1)] + 400.0).abs() < 1e-3);
        assert!(condition_number(&h) > 1000.0);
    }

    #[test]
    fn multistart_is_deterministic() {
        let cfg = OptimConfig::default();
        let a = multistart(&Rosenbrock, &[0.0, 0.0], &cfg, 11, Exec::Sequential);
        let b = multistart(&Rosenbrock, &[0.0, 0.0], &cfg, 11, Exec::Parallel);
        assert_eq!(a, b);
        assert!(a.value <= a.initial_value);
    }
}
