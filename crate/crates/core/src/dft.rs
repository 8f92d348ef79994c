//! Decision field theory: linear preference accumulation with valences that
//! share the logit utility specification.
//!
//! Over the available alternatives, preferences evolve as
//! `P_t = S P_{t-1} + V_t` from `P_0 = 0`, with `V_t ~ N(mu, Phi)`:
//!
//! * `mu` is the systematic utility of each alternative (the valence),
//! * `Phi = noise_sd^2 (I - 11'/m)` is contrast noise over the `m` available
//!   alternatives,
//! * `S = I - phi2 * exp(-phi1 * D^2)` is the feedback matrix, where `D_jk` is
//!   the Euclidean distance between the per-attribute utility contributions of
//!   alternatives `j` and `k`. The diagonal is `1 - phi2` (decay) and the
//!   off-diagonal terms are lateral inhibition that fades with dissimilarity.
//!
//! After `tau` steps the preference state is normal with moments given by the
//! recursion in [`accumulate_moments`]. Choice probabilities are the
//! probabilities that each alternative holds the maximum preference, computed
//! by a quasi-Monte Carlo frequency simulator for prediction and by the GHK
//! simulator (smooth in the parameters) for estimation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::choice::{self, SpecConfig, UtilityParams, UtilitySpec};
use crate::data::{ChoiceDataset, Observation};
use crate::error::{Error, Result};
use crate::optim::{self, Objective, OptimConfig};
use crate::par::Exec;
use crate::seed;
use crate::table::ProbTable;

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DftConfig {
    pub spec: SpecConfig,
    pub tau: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub noise_sd: f64,
    pub estimate_phi1: bool,
    pub estimate_phi2: bool,
    pub estimate_noise: bool,
    /// Quasi-Monte Carlo draws for predicted probabilities.
    pub draws: usize,
    pub antithetic: bool,
    /// GHK draws per observation during estimation.
    pub est_draws: usize,
    /// Start valences from a fitted logit, rescaled to the DFT noise scale.
    pub warm_start: bool,
    pub optim: OptimConfig,
}

impl Default for DftConfig {
    fn default() -> Self {
        DftConfig {
            spec: SpecConfig::default(),
            tau: 10,
            phi1: 0.5,
            phi2: 0.1,
            noise_sd: 1.0,
            estimate_phi1: true,
            estimate_phi2: true,
            estimate_noise: false,
            draws: 4096,
            antithetic: true,
            est_draws: 128,
            warm_start: true,
            optim: OptimConfig {
                starts: 1,
                max_iter: 200,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DftParams {
    pub valence: UtilityParams,
    pub tau: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub noise_sd: f64,
}

impl DftParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Param("deliberation length must be at least 1".into()));
        }
        if !(self.phi1 >= 0.0 && self.phi1.is_finite()) {
            return Err(Error::Param(format!("phi1 = {} must be >= 0", self.phi1)));
        }
        if !(0.0..1.0).contains(&self.phi2) {
            return Err(Error::Param(format!("phi2 = {} outside [0, 1)", self.phi2)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Param(format!("noise_sd = {} must be >= 0", self.noise_sd)));
        }
        if !self.valence.is_finite() {
            return Err(Error::Param("non-finite valence parameters".into()));
        }
        Ok(())
    }
}

/// Preference-state moments over the available alternatives `alts`.
#[derive(Debug, Clone, PartialEq)]
pub struct DftMoments {
    pub alts: Vec<usize>,
    pub mean: Vec<f64>,
    /// Row-major `m x m` covariance.
    pub cov: Vec<f64>,
    pub spectral_radius: f64,
}

impl DftMoments {
    /// `true` when the feedback matrix amplifies the state.
    pub fn unstable(&self) -> bool {
        self.spectral_radius > 1.0 + 1e-12
    }

    pub fn dim(&self) -> usize {
        self.alts.len()
    }
}

fn mat_mul(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik != 0.0 {
                for j in 0..m {
                    c[i * m + j] += aik * b[k * m + j];
                }
            }
        }
    }
    c
}

fn spectral_radius(s: &[f64], m: usize) -> f64 {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, s));
    eig.eigenvalues.iter().fold(0.0f64, |r, e| r.max(e.abs()))
}

/// Runs `mean_t = S mean_{t-1} + mu`, `cov_t = S cov_{t-1} S' + Phi` for
/// `tau` steps from zero.
pub fn accumulate_moments(s: &[f64], mu: &[f64], phi: &[f64], tau: usize) -> (Vec<f64>, Vec<f64>) {
    let m = mu.len();
    let mut mean = vec![0.0; m];
    let mut cov = vec![0.0; m * m];
    let mut st = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            st[i * m + j] = s[j * m + i];
        }
    }
    for _ in 0..tau {
        let next: Vec<f64> = (0..m)
            .map(|i| mu[i] + (0..m).map(|k| s[i * m + k] * mean[k]).sum::<f64>())
            .collect();
        mean = next;
        let mut c = mat_mul(&mat_mul(s, &cov, m), &st, m);
        c.iter_mut().zip(phi).for_each(|(a, b)| *a += b);
        cov = c;
    }
    // symmetrise away rounding
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (cov[i * m + j] + cov[j * m + i]);
            cov[i * m + j] = v;
            cov[j * m + i] = v;
        }
    }
    (mean, cov)
}

/// Feedback matrix over the available alternatives.
pub fn feedback_matrix(params: &DftParams, spec: &UtilitySpec, o: &Observation, alts: &[usize]) -> Vec<f64> {
    let m = alts.len();
    let a = spec.n_attrs();
    let contrib: Vec<Vec<f64>> = alts
        .iter()
        .map(|&j| {
            (0..a)
                .map(|at| {
                    let x = o.attr(j, at, a);
                    let mut u = params.valence.beta_lin[at] * x;
                    if spec.log[at] {
                        u += params.valence.beta_log[at] * (x + spec.log_delta).ln();
                    }
                    u
                })
                .collect()
        })
        .collect();
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let d2: f64 = contrib[i].iter().zip(&contrib[k]).map(|(x, y)| (x - y) * (x - y)).sum();
            let ind = if i == k { 1.0 } else { 0.0 };
            s[i * m + k] = ind - params.phi2 * (-params.phi1 * d2).exp();
        }
    }
    s
}

/// Contrast noise `noise_sd^2 (I - 11'/m)`.
pub fn noise_cov(noise_sd: f64, m: usize) -> Vec<f64> {
    let v = noise_sd * noise_sd;
    let mut phi = vec![-v / m as f64; m * m];
    for i in 0..m {
        phi[i * m + i] += v;
    }
    phi
}

pub fn dft_moments(params: &DftParams, spec: &UtilitySpec, o: &Observation) -> DftMoments {
    let (mut mom, s) = moments_and_feedback(params, spec, o);
    mom.spectral_radius = spectral_radius(&s, mom.alts.len());
    mom
}

/// Moments without the eigen-decomposition; `spectral_radius` is NaN.
fn moments_and_feedback(params: &DftParams, spec: &UtilitySpec, o: &Observation) -> (DftMoments, Vec<f64>) {
    let alts: Vec<usize> = (0..o.avail.len()).filter(|&j| o.avail[j]).collect();
    let v = choice::utility(&params.valence, spec, o);
    let mu: Vec<f64> = alts.iter().map(|&j| v[j]).collect();
    let s = feedback_matrix(params, spec, o, &alts);
    let phi = noise_cov(params.noise_sd, alts.len());
    let (mean, cov) = accumulate_moments(&s, &mu, &phi, params.tau);
    let mom = DftMoments {
        alts,
        mean,
        cov,
        spectral_radius: f64::NAN,
    };
    (mom, s)
}

/// Fixed standard-normal draws, one column per alternative.
///
/// Column `j` is a randomly shifted Halton sequence in the `j`-th prime base
/// mapped through the inverse normal CDF; with `antithetic`, the second half
/// of the rows negates the first.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub z: Vec<f64>,
}

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `rows x cols` randomly shifted Halton uniforms in (0, 1).
pub fn halton_uniforms(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    assert!(cols <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    let mut rng = seed::rng(seed);
    let shifts: Vec<f64> = (0..cols).map(|_| rng.random::<f64>()).collect();
    let mut u = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let x = (radical_inverse(r as u64 + 1, PRIMES[c]) + shifts[c]).fract();
            u[r * cols + c] = x.clamp(1e-12, 1.0 - 1e-12);
        }
    }
    u
}

impl DrawMatrix {
    pub fn qmc(rows: usize, cols: usize, seed: u64, antithetic: bool) -> Self {
        let std = Normal::standard();
        let base_rows = if antithetic { rows.div_ceil(2) } else { rows };
        let u = halton_uniforms(base_rows, cols, seed);
        let mut z: Vec<f64> = u.iter().map(|&p| std.inverse_cdf(p)).collect();
        if antithetic {
            let mirror: Vec<f64> = z.iter().map(|v| -v).collect();
            z.extend(mirror);
            z.truncate(rows * cols);
        }
        DrawMatrix { rows, cols, z }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.z[r * self.cols..(r + 1) * self.cols]
    }

    /// Draws with columns reordered: column `j` of the result is column
    /// `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut z = vec![0.0; self.z.len()];
        for r in 0..self.rows {
            for (j, &p) in perm.iter().enumerate() {
                z[r * self.cols + j] = self.z[r * self.cols + p];
            }
        }
        DrawMatrix {
            rows: self.rows,
            cols: self.cols,
            z,
        }
    }
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clamped).
fn sym_sqrt(cov: &[f64], m: usize) -> Vec<f64> {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, cov));
    let mut out = vec![0.0; m * m];
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] += s * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Frequency-simulated probability that each alternative holds the maximum
/// preference. Draw column `alts[i]` drives alternative `alts[i]`; ties split
/// the draw evenly. Returns a vector over all `n_alts` alternatives.
pub fn choice_prob_from_moments(mom: &DftMoments, draws: &DrawMatrix, n_alts: usize) -> Vec<f64> {
    let m = mom.dim();
    let mut p = vec![0.0; n_alts];
    if m == 1 {
        p[mom.alts[0]] = 1.0;
        return p;
    }
    let root = sym_sqrt(&mom.cov, m);
    let mut pref = vec![0.0; m];
    let mut counts = vec![0.0; m];
    for r in 0..draws.rows {
        let z = draws.row(r);
        for i in 0..m {
            pref[i] = mom.mean[i] + (0..m).map(|k| root[i * m + k] * z[mom.alts[k]]).sum::<f64>();
        }
        let best = pref.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n_best = pref.iter().filter(|&&x| x == best).count() as f64;
        for i in 0..m {
            if pref[i] == best {
                counts[i] += 1.0 / n_best;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    for (i, &j) in mom.alts.iter().enumerate() {
        p[j] = counts[i] / total;
    }
    p
}

/// Raises available-alternative probabilities to [`PROB_FLOOR`] and
/// renormalizes, so a finite simulation never reports an impossible choice.
pub fn floor_probs(p: &mut [f64], avail: &[bool]) {
    let mut s = 0.0;
    for (v, &a) in p.iter_mut().zip(avail) {
        if a {
            *v = v.max(PROB_FLOOR);
        }
        s += *v;
    }
    p.iter_mut().for_each(|v| *v /= s);
}

pub fn dft_choice_prob(params: &DftParams, spec: &UtilitySpec, o: &Observation, draws: &DrawMatrix) -> Vec<f64> {
    choice_prob_from_moments(&dft_moments(params, spec, o), draws, o.avail.len())
}

/// Mean and Cholesky factor of the differences `pref_k - pref_chosen`
/// (k != chosen), the inputs of the GHK simulator.
pub struct GhkInputs {
    pub d: usize,
    pub mu: Vec<f64>,
    /// Lower triangle, row-major `d x d`.
    pub chol: Vec<f64>,
}

impl GhkInputs {
    pub fn new(mom: &DftMoments, chosen: usize) -> Self {
        let m = mom.dim();
        let c = mom
            .alts
            .iter()
            .position(|&j| j == chosen)
            .expect("chosen alternative is available");
        let others: Vec<usize> = (0..m).filter(|&i| i != c).collect();
        let d = m - 1;
        let mu: Vec<f64> = others.iter().map(|&k| mom.mean[k] - mom.mean[c]).collect();
        let cv = |a: usize, b: usize| mom.cov[a * m + b];
        let mut sigma = vec![0.0; d * d];
        for (i, &a) in others.iter().enumerate() {
            for (j, &b) in others.iter().enumerate() {
                sigma[i * d + j] = cv(a, b) - cv(a, c) - cv(c, b) + cv(c, c);
            }
        }
        GhkInputs {
            d,
            mu,
            chol: cholesky(&sigma, d),
        }
    }

    /// `mu` followed by the lower triangle of `chol`, row by row.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.mu.clone();
        for i in 0..self.d {
            v.extend_from_slice(&self.chol[i * self.d..i * self.d + i + 1]);
        }
        v
    }
}

/// GHK estimate of `P(pref_chosen >= pref_k for all k)`; smooth in the
/// moments for fixed uniforms `u` (`rows x (J - 1)`, row-major).
pub fn ghk_prob(mom: &DftMoments, chosen: usize, u: &[f64], rows: usize) -> f64 {
    if mom.dim() == 1 {
        return 1.0;
    }
    ghk_core(&GhkInputs::new(mom, chosen), u, rows, false).0
}

/// GHK probability and, if `grad`, its derivative with respect to
/// [`GhkInputs::flat`] for the same uniforms.
pub fn ghk_core(inp: &GhkInputs, u: &[f64], rows: usize, grad: bool) -> (f64, Vec<f64>) {
    let d = inp.d;
    let (mu, chol) = (&inp.mu, &inp.chol);
    // flat index of chol[i][l]
    let li = |i: usize, l: usize| d + i * (i + 1) / 2 + l;
    let k = if grad { d + d * (d + 1) / 2 } else { 0 };
    let ucols = u.len() / rows;
    let std = Normal::standard();
    let mut eta = vec![0.0; d];
    let mut deta = vec![0.0; d * k];
    let mut dlog = vec![0.0; k];
    let mut dc = vec![0.0; k];
    let mut total = 0.0;
    let mut dtotal = vec![0.0; k];
    for r in 0..rows {
        let mut prob = 1.0;
        dlog.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            let partial: f64 = (0..i).map(|l| chol[i * d + l] * eta[l]).sum();
            let lii = chol[i * d + i];
            let bound = -mu[i] - partial;
            let degenerate = lii <= 1e-300;
            let c = bound / lii;
            let pi = if !degenerate {
                std.cdf(c)
            } else if bound > 0.0 {
                1.0
            } else {
                0.0
            };
            prob *= pi;
            if prob == 0.0 {
                break;
            }
            if grad && !degenerate {
                // dc = (db - c dl_ii) / l_ii, db = -dmu_i - sum_l (dL_il eta_l + L_il deta_l)
                dc.iter_mut().for_each(|v| *v = 0.0);
                dc[i] -= 1.0;
                for l in 0..i {
                    dc[li(i, l)] -= eta[l];
                    let w = chol[i * d + l];
                    for (v, de) in dc.iter_mut().zip(&deta[l * k..(l + 1) * k]) {
                        *v -= w * de;
                    }
                }
                dc[li(i, i)] -= c;
                dc.iter_mut().for_each(|v| *v /= lii);
                let dens = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
                // d log p_i = dens / p_i dc
                let ratio = dens / pi;
                dlog.iter_mut().zip(&dc).for_each(|(a, b)| *a += ratio * b);
                if i + 1 < d {
                    let q = (u[r * ucols + i] * pi).clamp(1e-300, 1.0 - 1e-16);
                    eta[i] = std.inverse_cdf(q);
                    let phi_eta = (-0.5 * eta[i] * eta[i]).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    let scale = u[r * ucols + i] * dens / phi_eta.max(1e-300);
                    for (de, b) in deta[i * k..(i + 1) * k].iter_mut().zip(&dc) {
                        *de = scale * b;
                    }
                }
                continue;
            }
            if i + 1 == d {
                break;
            }
            let q = (u[r * ucols + i] * pi).clamp(1e-300, 1.0 - 1e-16);
            eta[i] = std.inverse_cdf(q);
            if grad {
                deta[i * k..(i + 1) * k].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        total += prob;
        if grad && prob > 0.0 {
            dtotal.iter_mut().zip(&dlog).for_each(|(a, b)| *a += prob * b);
        }
    }
    let n = rows as f64;
    (total / n, dtotal.into_iter().map(|v| v / n).collect())
}

/// Lower Cholesky factor; near-singular pivots are clamped at zero.
fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = a[i * n + i] - s;
                l[i * n + i] = if v > 0.0 { v.sqrt() } else { 0.0 };
            } else {
                let ljj = l[j * n + j];
                l[i * n + j] = if ljj > 0.0 { (a[i * n + j] - s) / ljj } else { 0.0 };
            }
        }
    }
    l
}

/// Layout of the free DFT parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DftLayout {
    n_valence: usize,
    tau: usize,
    estimate_phi1: bool,
    estimate_phi2: bool,
    estimate_noise: bool,
    phi1: f64,
    phi2: f64,
    noise_sd: f64,
}

impl DftLayout {
    fn unpack(&self, spec: &UtilitySpec, theta: &[f64]) -> DftParams {
        let mut i = self.n_valence;
        let mut next = |on: bool, fixed: f64, f: fn(f64) -> f64| {
            if on {
                i += 1;
                f(theta[i - 1])
            } else {
                fixed
            }
        };
        let phi2 = next(self.estimate_phi2, self.phi2, |t| 0.999 / (1.0 + (-t).exp()));
        let phi1 = next(self.estimate_phi1, self.phi1, f64::exp);
        let noise_sd = next(self.estimate_noise, self.noise_sd, f64::exp);
        DftParams {
            valence: spec.unpack(&theta[..self.n_valence]),
            tau: self.tau,
            phi1,
            phi2,
            noise_sd,
        }
    }

    fn pack(&self, spec: &UtilitySpec, p: &DftParams) -> Vec<f64> {
        let mut theta = spec.pack(&p.valence);
        if self.estimate_phi2 {
            let x = (p.phi2 / 0.999).clamp(1e-6, 1.0 - 1e-6);
            theta.push((x / (1.0 - x)).ln());
        }
        if self.estimate_phi1 {
            theta.push(p.phi1.max(1e-8).ln());
        }
        if self.estimate_noise {
            theta.push(p.noise_sd.max(1e-8).ln());
        }
        theta
    }

    fn names(&self, spec: &UtilitySpec) -> Vec<String> {
        let mut names = spec.names.clone();
        if self.estimate_phi2 {
            names.push("phi2".into());
        }
        if self.estimate_phi1 {
            names.push("phi1".into());
        }
        if self.estimate_noise {
            names.push("noise_sd".into());
        }
        names
    }
}

struct DftObjective<'a> {
    ds: &'a ChoiceDataset,
    spec: &'a UtilitySpec,
    layout: &'a DftLayout,
    uniforms: Vec<f64>,
    rows: usize,
    exec: Exec,
    fd_step: f64,
}

impl DftObjective<'_> {
    fn ghk_inputs(&self, params: &DftParams, o: &Observation) -> Option<GhkInputs> {
        let (mom, _) = moments_and_feedback(params, self.spec, o);
        (mom.dim() > 1).then(|| GhkInputs::new(&mom, o.chosen))
    }
}

impl Objective for DftObjective<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let params = self.layout.unpack(self.spec, theta);
        let n = self.ds.n_obs();
        let ll = self
            .exec
            .sum(n, |i| match self.ghk_inputs(&params, &self.ds.observations[i]) {
                Some(inp) => ghk_core(&inp, &self.uniforms, self.rows, false).0.max(PROB_FLOOR).ln(),
                None => 0.0,
            });
        -ll / n as f64
    }

    /// Analytic derivative of the GHK simulator with respect to its inputs,
    /// chained with central differences of the (cheap) map from parameters
    /// to those inputs.
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let p = theta.len();
        let params = self.layout.unpack(self.spec, theta);
        let mut shifted = Vec::with_capacity(p);
        let mut steps = Vec::with_capacity(p);
        let mut t = theta.to_vec();
        for k in 0..p {
            let h = self.fd_step * theta[k].abs().max(1.0);
            t[k] = theta[k] + h;
            let up = self.layout.unpack(self.spec, &t);
            t[k] = theta[k] - h;
            let down = self.layout.unpack(self.spec, &t);
            t[k] = theta[k];
            shifted.push((up, down));
            steps.push(2.0 * h);
        }
        let n = self.ds.n_obs();
        let per_obs = self.exec.map_chunked(n, 64, |i| {
            let o = &self.ds.observations[i];
            let mut g = vec![0.0; p];
            let Some(inp) = self.ghk_inputs(&params, o) else {
                return g;
            };
            let (prob, dprob) = ghk_core(&inp, &self.uniforms, self.rows, true);
            if prob < PROB_FLOOR {
                return g;
            }
            for (k, (up, down)) in shifted.iter().enumerate() {
                let zu = self.ghk_inputs(up, o).expect("availability is fixed").flat();
                let zd = self.ghk_inputs(down, o).expect("availability is fixed").flat();
                let dz: f64 = dprob
                    .iter()
                    .zip(zu.iter().zip(&zd))
                    .map(|(a, (u, d))| a * (u - d))
                    .sum();
                g[k] = -dz / steps[k] / prob;
            }
            g
        });
        let mut grad = vec![0.0; p];
        for g in per_obs {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v /= n as f64);
        grad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DftFit {
    pub spec: UtilitySpec,
    pub params: DftParams,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// Simulated (GHK) log-likelihood at the estimate.
    pub loglik: f64,
    pub n_obs: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub draws: usize,
    pub antithetic: bool,
    pub draw_seed: u64,
}

impl DftFit {
    pub fn draw_matrix(&self) -> DrawMatrix {
        DrawMatrix::qmc(self.draws, self.spec.n_alts, self.draw_seed, self.antithetic)
    }

    pub fn predict(&self, ds: &ChoiceDataset, exec: Exec) -> ProbTable {
        let draws = self.draw_matrix();
        let rows = exec.map_chunked(ds.n_obs(), 64, |i| {
            let o = &ds.observations[i];
            let mut p = dft_choice_prob(&self.params, &self.spec, o, &draws);
            floor_probs(&mut p, &o.avail);
            p
        });
        ProbTable {
            n_alts: ds.n_alts(),
            data: rows.into_iter().flatten().collect(),
        }
    }
}

/// Simulated maximum likelihood with fixed GHK uniforms.
///
/// `warm` optionally supplies packed logit utility parameters; they are
/// rescaled to the DFT preference scale and used as the first start.
pub fn estimate_dft(
    ds: &ChoiceDataset,
    spec: &UtilitySpec,
    cfg: &DftConfig,
    warm: Option<&[f64]>,
    seed: u64,
    exec: Exec,
) -> Result<DftFit> {
    if ds.n_obs() == 0 {
        return Err(Error::Param("cannot estimate on an empty dataset".into()));
    }
    let layout = DftLayout {
        n_valence: spec.n_params(),
        tau: cfg.tau,
        estimate_phi1: cfg.estimate_phi1,
        estimate_phi2: cfg.estimate_phi2,
        estimate_noise: cfg.estimate_noise,
        phi1: cfg.phi1,
        phi2: cfg.phi2,
        noise_sd: cfg.noise_sd,
    };
    let mut start = DftParams {
        valence: spec.zero_params(),
        tau: cfg.tau,
        phi1: cfg.phi1,
        phi2: cfg.phi2,
        noise_sd: cfg.noise_sd,
    };
    start.validate()?;
    if let Some(beta) = warm {
        // logit differences have sd pi/sqrt(3); a tau-step walk with this
        // noise has difference sd noise_sd * sqrt(2 tau)
        let scale =
            cfg.noise_sd * (2.0 * cfg.tau as f64).sqrt() / (std::f64::consts::PI / 3f64.sqrt()) / cfg.tau as f64;
        let scaled: Vec<f64> = beta.iter().map(|b| b * scale).collect();
        start.valence = spec.unpack(&scaled);
    }
    let rows = cfg.est_draws.max(1);
    let obj = DftObjective {
        ds,
        spec,
        layout: &layout,
        uniforms: halton_uniforms(rows, ds.n_alts().saturating_sub(1).max(1), seed::derive(seed, "ghk", 0)),
        rows,
        exec,
        fd_step: cfg.optim.fd_step,
    };
    let x0 = layout.pack(spec, &start);
    let res = optim::multistart(&obj, &x0, &cfg.optim, seed, Exec::Sequential);
    let params = layout.unpack(spec, &res.x);
    Ok(DftFit {
        spec: spec.clone(),
        params,
        names: layout.names(spec),
        theta: res.x.clone(),
        loglik: -res.value * ds.n_obs() as f64,
        n_obs: ds.n_obs(),
        gradient_norm: optim::max_abs(&res.grad),
        converged: res.converged,
        iterations: res.iterations,
        draws: cfg.draws,
        antithetic: cfg.antithetic,
        draw_seed: seed::derive(seed, "dft-draws", 0),
    })
}
