//! Linear-plus-log utility specification, multinomial and two-level nested
//! logit probabilities, log-likelihood and maximum-likelihood estimation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, Observation};
use crate::error::{Error, Result};
use crate::optim::{self, Objective, OptimConfig};
use crate::par::Exec;
use crate::table::ProbTable;

/// Utility specification as written in a run config, by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecConfig {
    /// Attributes entering linearly; `None` means all.
    pub linear_attrs: Option<Vec<String>>,
    /// Attributes entering as `log(x + delta)`; `None` means all.
    pub log_attrs: Option<Vec<String>>,
    /// Alternatives that receive socio-demographic shifts.
    pub socio_alts: Vec<String>,
}

/// Resolved utility specification, by index.
///
/// `V_j = ASC_j + sum_a [b_a x_ja + b_log_a log(x_ja + delta)] + socio terms`,
/// with generic attribute coefficients and the last alternative's ASC fixed
/// to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub n_alts: usize,
    pub linear: Vec<bool>,
    pub log: Vec<bool>,
    pub socio_alts: Vec<usize>,
    pub n_socio: usize,
    pub log_delta: f64,
    pub names: Vec<String>,
}

impl UtilitySpec {
    pub fn resolve(cfg: &SpecConfig, ds: &ChoiceDataset) -> Result<Self> {
        let pick = |list: &Option<Vec<String>>| -> Result<Vec<bool>> {
            match list {
                None => Ok(vec![true; ds.n_attrs()]),
                Some(names) => {
                    for n in names {
                        if !ds.attr_names.contains(n) {
                            return Err(Error::Config(format!("unknown attribute `{n}`")));
                        }
                    }
                    Ok(ds.attr_names.iter().map(|a| names.contains(a)).collect())
                }
            }
        };
        let socio_alts = cfg
            .socio_alts
            .iter()
            .map(|name| {
                ds.alt_names
                    .iter()
                    .position(|a| a == name)
                    .ok_or_else(|| Error::Config(format!("unknown alternative `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let linear = pick(&cfg.linear_attrs)?;
        let log = pick(&cfg.log_attrs)?;

        let mut names = Vec::new();
        names.extend(ds.alt_names[..ds.n_alts() - 1].iter().map(|a| format!("asc_{a}")));
        names.extend(
            ds.attr_names
                .iter()
                .zip(&linear)
                .filter(|(_, &on)| on)
                .map(|(a, _)| format!("b_{a}")),
        );
        names.extend(
            ds.attr_names
                .iter()
                .zip(&log)
                .filter(|(_, &on)| on)
                .map(|(a, _)| format!("b_log_{a}")),
        );
        for &alt in &socio_alts {
            names.extend(ds.socio_names.iter().map(|s| format!("{s}_{}", ds.alt_names[alt])));
        }
        Ok(UtilitySpec {
            n_alts: ds.n_alts(),
            linear,
            log,
            socio_alts,
            n_socio: ds.n_socio(),
            log_delta: ds.log_delta,
            names,
        })
    }

    pub fn n_attrs(&self) -> usize {
        self.linear.len()
    }

    /// Length of the free parameter vector.
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn zero_params(&self) -> UtilityParams {
        UtilityParams {
            asc: vec![0.0; self.n_alts - 1],
            beta_lin: vec![0.0; self.n_attrs()],
            beta_log: vec![0.0; self.n_attrs()],
            socio: vec![0.0; self.socio_alts.len() * self.n_socio],
        }
    }

    pub fn unpack(&self, theta: &[f64]) -> UtilityParams {
        let mut it = theta.iter().copied();
        let mut p = self.zero_params();
        for v in p.asc.iter_mut() {
            *v = it.next().unwrap();
        }
        for (v, &on) in p.beta_lin.iter_mut().zip(&self.linear) {
            if on {
                *v = it.next().unwrap();
            }
        }
        for (v, &on) in p.beta_log.iter_mut().zip(&self.log) {
            if on {
                *v = it.next().unwrap();
            }
        }
        for v in p.socio.iter_mut() {
            *v = it.next().unwrap();
        }
        p
    }

    pub fn pack(&self, p: &UtilityParams) -> Vec<f64> {
        let mut theta = p.asc.clone();
        theta.extend(
            p.beta_lin
                .iter()
                .zip(&self.linear)
                .filter(|(_, &on)| on)
                .map(|(v, _)| v),
        );
        theta.extend(p.beta_log.iter().zip(&self.log).filter(|(_, &on)| on).map(|(v, _)| v));
        theta.extend(&p.socio);
        theta
    }

    /// `J x K` matrix of `dV_j / dtheta_k`; utilities are `X theta`.
    pub fn design(&self, o: &Observation, out: &mut [f64]) {
        let k = self.n_params();
        let a = self.n_attrs();
        out.fill(0.0);
        for j in 0..self.n_alts {
            let row = &mut out[j * k..(j + 1) * k];
            let mut c = self.n_alts - 1;
            if j < self.n_alts - 1 {
                row[j] = 1.0;
            }
            for at in 0..a {
                if self.linear[at] {
                    row[c] = o.attr(j, at, a);
                    c += 1;
                }
            }
            for at in 0..a {
                if self.log[at] {
                    row[c] = (o.attr(j, at, a) + self.log_delta).ln();
                    c += 1;
                }
            }
            for &alt in &self.socio_alts {
                if alt == j {
                    row[c..c + self.n_socio].copy_from_slice(&o.socio);
                }
                c += self.n_socio;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    /// `J - 1` constants; the last alternative's is fixed to zero.
    pub asc: Vec<f64>,
    pub beta_lin: Vec<f64>,
    pub beta_log: Vec<f64>,
    /// Row-major `socio_alts x n_socio` shifts.
    pub socio: Vec<f64>,
}

impl UtilityParams {
    pub fn is_finite(&self) -> bool {
        self.asc
            .iter()
            .chain(&self.beta_lin)
            .chain(&self.beta_log)
            .chain(&self.socio)
            .all(|v| v.is_finite())
    }
}

/// Systematic utilities of every alternative. Unavailable alternatives still
/// get a value; callers mask them with the availability vector.
pub fn utility(params: &UtilityParams, spec: &UtilitySpec, o: &Observation) -> Vec<f64> {
    let a = spec.n_attrs();
    (0..spec.n_alts)
        .map(|j| {
            let mut v = params.asc.get(j).copied().unwrap_or(0.0);
            for at in 0..a {
                let x = o.attr(j, at, a);
                v += params.beta_lin[at] * x;
                if spec.log[at] {
                    v += params.beta_log[at] * (x + spec.log_delta).ln();
                }
            }
            for (si, &alt) in spec.socio_alts.iter().enumerate() {
                if alt == j {
                    for (s, x) in o.socio.iter().enumerate() {
                        v += params.socio[si * spec.n_socio + s] * x;
                    }
                }
            }
            v
        })
        .collect()
}

/// Multinomial logit over the available set, max-shifted.
pub fn mnl_prob(v: &[f64], avail: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    mnl_prob_into(v, avail, &mut out);
    out
}

pub fn mnl_prob_into(v: &[f64], avail: &[bool], out: &mut [f64]) {
    let m = v
        .iter()
        .zip(avail)
        .filter(|(_, &a)| a)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &x), &a) in out.iter_mut().zip(v).zip(avail) {
        *o = if a { (x - m).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn mnl_log_prob(v: &[f64], avail: &[bool], j: usize) -> f64 {
    let m = v
        .iter()
        .zip(avail)
        .filter(|(_, &a)| a)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v
        .iter()
        .zip(avail)
        .filter(|(_, &a)| a)
        .map(|(x, _)| (x - m).exp())
        .sum();
    v[j] - m - s.ln()
}

/// Partition of alternatives into nests with their scale parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestSpec {
    pub groups: Vec<Vec<usize>>,
    pub lambda: Vec<f64>,
}

impl NestSpec {
    pub fn new(groups: Vec<Vec<usize>>, lambda: Vec<f64>, n_alts: usize) -> Result<Self> {
        let spec = NestSpec { groups, lambda };
        spec.check_partition(n_alts)?;
        spec.check_lambda()?;
        Ok(spec)
    }

    pub fn check_partition(&self, n_alts: usize) -> Result<()> {
        if self.groups.len() != self.lambda.len() {
            return Err(Error::Param(format!(
                "{} nests but {} nest parameters",
                self.groups.len(),
                self.lambda.len()
            )));
        }
        let mut seen = vec![0usize; n_alts];
        for g in &self.groups {
            for &j in g {
                if j >= n_alts {
                    return Err(Error::Param(format!("nest member {j} out of range")));
                }
                seen[j] += 1;
            }
        }
        if let Some(j) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Param(format!("alternative {j} must belong to exactly one nest")));
        }
        Ok(())
    }

    pub fn check_lambda(&self) -> Result<()> {
        match self.lambda.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
            Some(l) => Err(Error::Param(format!("nest parameter {l} outside (0, 1]"))),
            None => Ok(()),
        }
    }

    /// Group names resolved against a dataset's alternative labels.
    pub fn groups_from_names(names: &[Vec<String>], ds: &ChoiceDataset) -> Result<Vec<Vec<usize>>> {
        names
            .iter()
            .map(|g| {
                g.iter()
                    .map(|n| {
                        ds.alt_names
                            .iter()
                            .position(|a| a == n)
                            .ok_or_else(|| Error::Config(format!("unknown alternative `{n}` in nest")))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Two-level nested logit probabilities over the available set.
pub fn nl_prob(v: &[f64], nests: &NestSpec, avail: &[bool]) -> Result<Vec<f64>> {
    nests.check_partition(v.len())?;
    nests.check_lambda()?;
    Ok(nl_log_probs(v, &nests.groups, &nests.lambda, avail)
        .into_iter()
        .zip(avail)
        .map(|(lp, &a)| if a { lp.exp() } else { 0.0 })
        .collect())
}

/// Log-probabilities (`-inf` for unavailable alternatives).
fn nl_log_probs(v: &[f64], groups: &[Vec<usize>], lambda: &[f64], avail: &[bool]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    // inclusive values lambda_g * I_g of nests with an available member
    let mut scaled_iv = Vec::with_capacity(groups.len());
    for (g, &lam) in groups.iter().zip(lambda) {
        let m = g
            .iter()
            .filter(|&&j| avail[j])
            .map(|&j| v[j] / lam)
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            scaled_iv.push(f64::NEG_INFINITY);
            continue;
        }
        let s: f64 = g.iter().filter(|&&j| avail[j]).map(|&j| (v[j] / lam - m).exp()).sum();
        let iv = m + s.ln();
        for &j in g.iter().filter(|&&j| avail[j]) {
            out[j] = v[j] / lam - iv;
        }
        scaled_iv.push(lam * iv);
    }
    let m = scaled_iv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = m + scaled_iv.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for (g, &siv) in groups.iter().zip(&scaled_iv) {
        if siv == f64::NEG_INFINITY {
            continue;
        }
        for &j in g.iter().filter(|&&j| avail[j]) {
            out[j] += siv - denom;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitKind {
    Mnl,
    /// Nest groups by alternative index.
    Nl(Vec<Vec<usize>>),
}

impl LogitKind {
    fn n_extra(&self) -> usize {
        match self {
            LogitKind::Mnl => 0,
            LogitKind::Nl(g) => g.len(),
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Precomputed design matrices for likelihood evaluation.
pub struct LogitData {
    pub n_obs: usize,
    pub n_alts: usize,
    pub n_params: usize,
    design: Vec<f64>,
    avail: Vec<bool>,
    chosen: Vec<usize>,
}

impl LogitData {
    pub fn new(spec: &UtilitySpec, ds: &ChoiceDataset) -> Self {
        let (n, j, k) = (ds.n_obs(), ds.n_alts(), spec.n_params());
        let mut design = vec![0.0; n * j * k];
        for (i, o) in ds.observations.iter().enumerate() {
            spec.design(o, &mut design[i * j * k..(i + 1) * j * k]);
        }
        LogitData {
            n_obs: n,
            n_alts: j,
            n_params: k,
            design,
            avail: ds.observations.iter().flat_map(|o| o.avail.iter().copied()).collect(),
            chosen: ds.observations.iter().map(|o| o.chosen).collect(),
        }
    }

    fn utilities(&self, i: usize, beta: &[f64]) -> Vec<f64> {
        let (j, k) = (self.n_alts, self.n_params);
        let x = &self.design[i * j * k..(i + 1) * j * k];
        (0..j)
            .map(|a| x[a * k..(a + 1) * k].iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect()
    }

    fn avail(&self, i: usize) -> &[bool] {
        &self.avail[i * self.n_alts..(i + 1) * self.n_alts]
    }

    /// Log-probability of the chosen alternative for observation `i`.
    pub fn log_prob(&self, i: usize, theta: &[f64], kind: &LogitKind) -> f64 {
        let k = self.n_params;
        let v = self.utilities(i, &theta[..k]);
        let c = self.chosen[i];
        match kind {
            LogitKind::Mnl => mnl_log_prob(&v, self.avail(i), c),
            LogitKind::Nl(groups) => {
                let lambda: Vec<f64> = theta[k..].iter().map(|&t| logistic(t)).collect();
                nl_log_probs(&v, groups, &lambda, self.avail(i))[c]
            }
        }
    }

    pub fn probs(&self, i: usize, theta: &[f64], kind: &LogitKind) -> Vec<f64> {
        let k = self.n_params;
        let v = self.utilities(i, &theta[..k]);
        let avail = self.avail(i);
        match kind {
            LogitKind::Mnl => mnl_prob(&v, avail),
            LogitKind::Nl(groups) => {
                let lambda: Vec<f64> = theta[k..].iter().map(|&t| logistic(t)).collect();
                nl_log_probs(&v, groups, &lambda, avail)
                    .into_iter()
                    .zip(avail)
                    .map(|(lp, &a)| if a { lp.exp() } else { 0.0 })
                    .collect()
            }
        }
    }

    /// Analytic gradient of the mean log-likelihood for MNL.
    pub fn mnl_mean_gradient(&self, beta: &[f64], exec: Exec) -> Vec<f64> {
        let (j, k) = (self.n_alts, self.n_params);
        let parts = exec.map(self.n_obs.div_ceil(512), |c| {
            let mut g = vec![0.0; k];
            for i in c * 512..((c + 1) * 512).min(self.n_obs) {
                let x = &self.design[i * j * k..(i + 1) * j * k];
                let p = mnl_prob(&self.utilities(i, beta), self.avail(i));
                let ch = self.chosen[i];
                for (a, pa) in p.iter().enumerate() {
                    let w = if a == ch { 1.0 - pa } else { -pa };
                    if w != 0.0 {
                        for (gk, xk) in g.iter_mut().zip(&x[a * k..(a + 1) * k]) {
                            *gk += w * xk;
                        }
                    }
                }
            }
            g
        });
        let mut g = vec![0.0; k];
        for p in parts {
            g.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        g.iter_mut().for_each(|v| *v /= self.n_obs as f64);
        g
    }
}

/// Mean negative log-likelihood; the form minimised during estimation.
struct LogitObjective<'a> {
    data: &'a LogitData,
    kind: &'a LogitKind,
    exec: Exec,
    fd_step: f64,
}

impl Objective for LogitObjective<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        -self
            .exec
            .sum(self.data.n_obs, |i| self.data.log_prob(i, theta, self.kind))
            / self.data.n_obs as f64
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match self.kind {
            LogitKind::Mnl => self
                .data
                .mnl_mean_gradient(theta, self.exec)
                .into_iter()
                .map(|g| -g)
                .collect(),
            LogitKind::Nl(_) => optim::central_gradient(|t| self.value(t), theta, self.fd_step),
        }
    }
}

/// Total log-likelihood of `ds` under the packed parameter vector `theta`
/// (utility parameters followed by logit-transformed nest parameters for NL).
pub fn choice_loglik(theta: &[f64], spec: &UtilitySpec, kind: &LogitKind, ds: &ChoiceDataset) -> f64 {
    per_obs_log_prob(theta, spec, kind, ds).iter().sum()
}

pub fn per_obs_log_prob(theta: &[f64], spec: &UtilitySpec, kind: &LogitKind, ds: &ChoiceDataset) -> Vec<f64> {
    let data = LogitData::new(spec, ds);
    (0..data.n_obs).map(|i| data.log_prob(i, theta, kind)).collect()
}

/// A fitted MNL or NL model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub kind: LogitKind,
    pub spec: UtilitySpec,
    pub params: UtilityParams,
    /// Nest parameters (empty for MNL).
    pub lambda: Vec<f64>,
    /// Packed free parameters, nest parameters on the logit scale.
    pub theta: Vec<f64>,
    pub names: Vec<String>,
    pub loglik: f64,
    pub n_obs: usize,
    /// Max-norm of the mean log-likelihood gradient at the estimate.
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub hessian_condition: f64,
    /// Asymptotic standard errors from the inverse numeric Hessian
    /// (`NaN` when it is singular).
    pub std_errors: Vec<f64>,
}

impl LogitFit {
    pub fn nests(&self) -> Option<NestSpec> {
        match &self.kind {
            LogitKind::Mnl => None,
            LogitKind::Nl(groups) => Some(NestSpec {
                groups: groups.clone(),
                lambda: self.lambda.clone(),
            }),
        }
    }

    pub fn predict(&self, ds: &ChoiceDataset) -> ProbTable {
        let data = LogitData::new(&self.spec, ds);
        let mut t = ProbTable::zeros(ds.n_obs(), ds.n_alts());
        for i in 0..ds.n_obs() {
            t.row_mut(i).copy_from_slice(&data.probs(i, &self.theta, &self.kind));
        }
        t
    }
}

/// Maximum-likelihood estimation by multistart BFGS.
pub fn estimate(
    ds: &ChoiceDataset,
    spec: &UtilitySpec,
    kind: &LogitKind,
    cfg: &OptimConfig,
    seed: u64,
    exec: Exec,
) -> Result<LogitFit> {
    if ds.n_obs() == 0 {
        return Err(Error::Param("cannot estimate on an empty dataset".into()));
    }
    if let LogitKind::Nl(groups) = kind {
        NestSpec {
            groups: groups.clone(),
            lambda: vec![1.0; groups.len()],
        }
        .check_partition(ds.n_alts())?;
    }
    for (j, s) in ds.choice_shares().iter().enumerate() {
        if *s == 0.0 {
            log::warn!(
                "alternative `{}` is never chosen in the estimation data",
                ds.alt_names[j]
            );
        }
    }
    let data = LogitData::new(spec, ds);
    let obj = LogitObjective {
        data: &data,
        kind,
        exec,
        fd_step: cfg.fd_step,
    };
    let k = spec.n_params();
    let mut x0 = vec![0.0; k + kind.n_extra()];
    // nest parameters start at logistic(2) ~ 0.88
    x0[k..].fill(2.0);
    // starts run one after another; each evaluation is parallel over observations
    let res = optim::multistart(&obj, &x0, cfg, seed, Exec::Sequential);

    let n = ds.n_obs() as f64;
    let hess = optim::numeric_hessian(|t| obj.gradient(t), &res.x, 1e-4) * n;
    let std_errors = match hess.clone().try_inverse() {
        Some(inv) => (0..inv.nrows())
            .map(|i| {
                if inv[(i, i)] > 0.0 {
                    inv[(i, i)].sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect(),
        None => vec![f64::NAN; res.x.len()],
    };
    let mut names = spec.names.clone();
    if let LogitKind::Nl(groups) = kind {
        names.extend((0..groups.len()).map(|g| format!("lambda_{g}")));
    }
    Ok(LogitFit {
        kind: kind.clone(),
        spec: spec.clone(),
        params: spec.unpack(&res.x[..k]),
        lambda: res.x[k..].iter().map(|&t| logistic(t)).collect(),
        theta: res.x.clone(),
        names,
        loglik: -res.value * n,
        n_obs: ds.n_obs(),
        gradient_norm: optim::max_abs(&res.grad),
        converged: res.converged,
        iterations: res.iterations,
        hessian_condition: optim::condition_number(&DMatrix::from(hess)),
        std_errors,
    })
}
