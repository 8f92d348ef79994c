//! Distance-conditioned model averaging.
//!
//! Sub-model probabilities are frozen into a [`ProbabilityPanel`]; a gate
//! maps each trip (by default its distance alone) to convex weights over the
//! sub-models, and is trained by maximising
//! `sum_n log sum_m pi_nm L_nm` with the sub-model likelihoods held fixed.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{fmt_f64, ChoiceDataset, DataSplit, Role};
use crate::error::{Error, Result};
use crate::nn::{masked_softmax_rows, Adam, Grads, Network};
use crate::par::Exec;
use crate::seed;
use crate::table::ProbTable;

const SUM_TOL: f64 = 1e-9;

/// Frozen per-observation sub-model probabilities, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityPanel {
    pub model_names: Vec<String>,
    pub alt_names: Vec<String>,
    pub obs_id: Vec<u64>,
    pub person_id: Vec<u64>,
    pub distance: Vec<f64>,
    pub segment: Vec<usize>,
    pub role: Vec<Role>,
    pub chosen: Vec<usize>,
    /// `n x M` probability of the chosen alternative.
    pub lik: Vec<f64>,
    /// `n x M x J` full probability vectors.
    pub probs: Vec<f64>,
}

impl ProbabilityPanel {
    pub fn n_rows(&self) -> usize {
        self.obs_id.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn n_alts(&self) -> usize {
        self.alt_names.len()
    }

    pub fn lik_row(&self, i: usize) -> &[f64] {
        let m = self.n_models();
        &self.lik[i * m..(i + 1) * m]
    }

    /// Model `m`'s probability vector for row `i`.
    pub fn prob_vec(&self, i: usize, m: usize) -> &[f64] {
        let (nm, j) = (self.n_models(), self.n_alts());
        let start = (i * nm + m) * j;
        &self.probs[start..start + j]
    }

    pub fn model_index(&self, name: &str) -> Result<usize> {
        self.model_names
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::MissingModel(name.to_string()))
    }

    pub fn indices_where(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| pred(self.role[i])).collect()
    }

    /// Rows used to train the gate (segments 2-9 outside the holdout).
    pub fn ma_train(&self) -> Vec<usize> {
        self.indices_where(Role::is_ma_train)
    }

    pub fn validation_set(&self) -> Vec<usize> {
        self.indices_where(Role::is_validation)
    }

    /// Model `m`'s predictions as a table over rows `idx`.
    pub fn model_table(&self, m: usize, idx: &[usize]) -> ProbTable {
        ProbTable {
            n_alts: self.n_alts(),
            data: idx.iter().flat_map(|&i| self.prob_vec(i, m).iter().copied()).collect(),
        }
    }

    /// Panel restricted to the named models, in the given order.
    pub fn select_models(&self, names: &[String]) -> Result<ProbabilityPanel> {
        let idx = names.iter().map(|n| self.model_index(n)).collect::<Result<Vec<_>>>()?;
        let mut out = self.clone();
        out.model_names = names.to_vec();
        out.lik = (0..self.n_rows())
            .flat_map(|i| idx.iter().map(move |&m| self.lik_row(i)[m]))
            .collect();
        out.probs = (0..self.n_rows())
            .flat_map(|i| idx.iter().flat_map(move |&m| self.prob_vec(i, m).iter().copied()))
            .collect();
        Ok(out)
    }

    /// SHA-256 over every stored value, for immutability checks.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.model_names.iter().chain(&self.alt_names) {
            h.update(s.as_bytes());
        }
        for i in 0..self.n_rows() {
            h.update(self.obs_id[i].to_le_bytes());
            h.update(self.person_id[i].to_le_bytes());
            h.update(self.distance[i].to_bits().to_le_bytes());
            h.update((self.segment[i] as u64).to_le_bytes());
            h.update(self.role[i].as_str().as_bytes());
            h.update((self.chosen[i] as u64).to_le_bytes());
        }
        for v in self.lik.iter().chain(&self.probs) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, j) = (self.n_rows(), self.n_models(), self.n_alts());
        if m == 0 {
            return Err(Error::MissingModel("panel has no models".into()));
        }
        let lens = [
            self.person_id.len(),
            self.distance.len(),
            self.segment.len(),
            self.role.len(),
            self.chosen.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.lik.len() != n * m || self.probs.len() != n * m * j {
            return Err(Error::Shape("panel columns have inconsistent lengths".into()));
        }
        for i in 0..n {
            if self.chosen[i] >= j {
                return Err(Error::Row {
                    row: i + 1,
                    msg: format!("chosen index {} out of range", self.chosen[i]),
                });
            }
            for mi in 0..m {
                check_prob_vec(self.prob_vec(i, mi), &self.model_names[mi], self.obs_id[i])?;
                if self.lik_row(i)[mi] != self.prob_vec(i, mi)[self.chosen[i]] {
                    return Err(Error::Row {
                        row: i + 1,
                        msg: format!("L_{} differs from its probability vector", self.model_names[mi]),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_prob_vec(p: &[f64], model: &str, obs_id: u64) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
        return Err(Error::Numerical(format!(
            "model `{model}` gives probability {v} for obs {obs_id}"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Numerical(format!(
            "model `{model}` probabilities for obs {obs_id} sum to {s}"
        )));
    }
    Ok(())
}

/// Assembles the panel from each model's predictions on every observation.
pub fn build_panel(ds: &ChoiceDataset, split: &DataSplit, models: &[(String, ProbTable)]) -> Result<ProbabilityPanel> {
    if models.is_empty() {
        return Err(Error::MissingModel("no sub-model predictions supplied".into()));
    }
    split.check_matches(ds)?;
    let (n, j) = (ds.n_obs(), ds.n_alts());
    for (name, t) in models {
        if t.n_rows() != n || t.n_alts != j {
            return Err(Error::Shape(format!(
                "model `{name}` predicted {}x{}, dataset is {n}x{j}",
                t.n_rows(),
                t.n_alts
            )));
        }
    }
    let mut lik = Vec::with_capacity(n * models.len());
    let mut probs = Vec::with_capacity(n * models.len() * j);
    for (i, o) in ds.observations.iter().enumerate() {
        for (name, t) in models {
            let p = t.row(i);
            check_prob_vec(p, name, o.obs_id)?;
            lik.push(p[o.chosen]);
            probs.extend(p);
        }
    }
    Ok(ProbabilityPanel {
        model_names: models.iter().map(|(n, _)| n.clone()).collect(),
        alt_names: ds.alt_names.clone(),
        obs_id: ds.observations.iter().map(|o| o.obs_id).collect(),
        person_id: ds.observations.iter().map(|o| o.person_id).collect(),
        distance: ds.distances(),
        segment: split.segment_of.clone(),
        role: split.role_of.clone(),
        chosen: ds.observations.iter().map(|o| o.chosen).collect(),
        lik,
        probs,
    })
}

pub fn write_panel(panel: &ProbabilityPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = ["obs_id", "person_id", "distance", "segment", "role", "chosen"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(panel.model_names.iter().map(|m| format!("L_{m}")));
    for m in &panel.model_names {
        header.extend(panel.alt_names.iter().map(|a| format!("P_{m}_{a}")));
    }
    w.write_record(&header)?;
    for i in 0..panel.n_rows() {
        let mut rec = vec![
            panel.obs_id[i].to_string(),
            panel.person_id[i].to_string(),
            fmt_f64(panel.distance[i]),
            panel.segment[i].to_string(),
            panel.role[i].to_string(),
            panel.alt_names[panel.chosen[i]].clone(),
        ];
        rec.extend(panel.lik_row(i).iter().map(|&v| fmt_f64(v)));
        for m in 0..panel.n_models() {
            rec.extend(panel.prob_vec(i, m).iter().map(|&v| fmt_f64(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_panel(path: impl AsRef<Path>) -> Result<ProbabilityPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let fixed = ["obs_id", "person_id", "distance", "segment", "role", "chosen"];
    if header.len() < fixed.len() || header[..fixed.len()] != fixed {
        return Err(Error::Schema(format!(
            "panel header must start with {}",
            fixed.join(",")
        )));
    }
    let model_names: Vec<String> = header[fixed.len()..]
        .iter()
        .map_while(|h| h.strip_prefix("L_").map(str::to_string))
        .collect();
    if model_names.is_empty() {
        return Err(Error::Schema("panel has no L_<model> columns".into()));
    }
    let p_start = fixed.len() + model_names.len();
    let prefix = format!("P_{}_", model_names[0]);
    let alt_names: Vec<String> = header[p_start..]
        .iter()
        .map_while(|h| h.strip_prefix(&prefix).map(str::to_string))
        .collect();
    let (m, j) = (model_names.len(), alt_names.len());
    if j == 0 || header.len() != p_start + m * j {
        return Err(Error::Schema("panel P_<model>_<alt> columns are incomplete".into()));
    }
    for (mi, name) in model_names.iter().enumerate() {
        for (a, alt) in alt_names.iter().enumerate() {
            if header[p_start + mi * j + a] != format!("P_{name}_{alt}") {
                return Err(Error::Schema(format!("expected column P_{name}_{alt}")));
            }
        }
    }
    let mut panel = ProbabilityPanel {
        model_names,
        alt_names,
        obs_id: Vec::new(),
        person_id: Vec::new(),
        distance: Vec::new(),
        segment: Vec::new(),
        role: Vec::new(),
        chosen: Vec::new(),
        lik: Vec::new(),
        probs: Vec::new(),
    };
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let num = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|_| Error::Row {
                row,
                msg: format!("column `{}`: `{}` is not a number", header[k], &rec[k]),
            })
        };
        let int = |k: usize| -> Result<u64> {
            rec[k].trim().parse::<u64>().map_err(|_| Error::Row {
                row,
                msg: format!("column `{}`: `{}` is not an integer", header[k], &rec[k]),
            })
        };
        panel.obs_id.push(int(0)?);
        panel.person_id.push(int(1)?);
        panel.distance.push(num(2)?);
        panel.segment.push(int(3)? as usize);
        panel.role.push(rec[4].trim().parse().map_err(|e: Error| Error::Row {
            row,
            msg: e.to_string(),
        })?);
        let chosen = panel
            .alt_names
            .iter()
            .position(|a| a == rec[5].trim())
            .ok_or_else(|| Error::Row {
                row,
                msg: format!("unknown chosen alternative `{}`", &rec[5]),
            })?;
        panel.chosen.push(chosen);
        for k in fixed.len()..p_start {
            panel.lik.push(num(k)?);
        }
        for k in p_start..header.len() {
            panel.probs.push(num(k)?);
        }
    }
    panel.validate()?;
    Ok(panel)
}

/// Multinomial-logit gate: `pi_m = exp(gamma_m' z) / sum_k exp(gamma_k' z)`
/// with the last model's coefficients fixed at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticGate {
    /// `M - 1` coefficient vectors over `z`.
    pub gamma: Vec<Vec<f64>>,
}

impl LogisticGate {
    pub fn weights(&self, z: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = self
            .gamma
            .iter()
            .map(|g| g.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        logits.push(0.0);
        softmax(&mut logits);
        logits
    }
}

fn softmax(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    v.iter_mut().for_each(|x| {
        *x = (*x - max).exp();
        s += *x;
    });
    v.iter_mut().for_each(|x| *x /= s);
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInputs {
    /// Trip distance only.
    #[default]
    Distance,
    /// Trip distance followed by every model's full probability vector.
    DistanceAndProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodLevel {
    /// One mixture term per trip.
    #[default]
    Observation,
    /// One mixture term per person over the product of their trips; the gate
    /// sees the person's mean trip distance.
    Person,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 strength; the per-batch penalty is `l2 / (2 B) * |W|^2`.
    pub l2: f64,
    pub epochs: usize,
    pub tol: f64,
    pub n_iter_no_change: usize,
    pub restarts: usize,
    pub retain_frac: f64,
    pub inputs: GateInputs,
    pub level: LikelihoodLevel,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            hidden_layers: vec![60, 60],
            learning_rate: 0.005,
            batch_size: 128,
            l2: 1e-4,
            epochs: 200,
            tol: 1e-4,
            n_iter_no_change: 10,
            restarts: 100,
            retain_frac: 0.2,
            inputs: GateInputs::Distance,
            level: LikelihoodLevel::Observation,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0) || self.batch_size == 0 || self.restarts == 0 {
            return Err(Error::Config(
                "gate needs positive layer widths, batch_size and restarts".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) || !(self.retain_frac > 0.0 && self.retain_frac <= 1.0) {
            return Err(Error::Config(
                "gate needs learning_rate > 0, l2 >= 0, 0 < retain_frac <= 1".into(),
            ));
        }
        if self.level == LikelihoodLevel::Person && self.inputs != GateInputs::Distance {
            return Err(Error::Config(
                "person-level averaging supports distance-only gate inputs".into(),
            ));
        }
        Ok(())
    }

    /// Number of restarts kept in the ensemble.
    pub fn retained(&self) -> usize {
        ((self.retain_frac * self.restarts as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Gate training units: raw inputs plus per-model log-likelihoods.
#[derive(Debug, Clone)]
pub struct GateData {
    pub x: Array2<f64>,
    /// `n x M`, `log L`.
    pub logl: Array2<f64>,
}

impl GateData {
    pub fn n_units(&self) -> usize {
        self.x.nrows()
    }
}

fn row_inputs(panel: &ProbabilityPanel, i: usize, inputs: GateInputs) -> Vec<f64> {
    let mut v = vec![panel.distance[i]];
    if inputs == GateInputs::DistanceAndProbs {
        let (m, j) = (panel.n_models(), panel.n_alts());
        v.extend(&panel.probs[i * m * j..(i + 1) * m * j]);
    }
    v
}

fn input_width(panel: &ProbabilityPanel, inputs: GateInputs) -> usize {
    match inputs {
        GateInputs::Distance => 1,
        GateInputs::DistanceAndProbs => 1 + panel.n_models() * panel.n_alts(),
    }
}

/// Raw gate inputs for rows `idx`, one row each.
pub fn gate_inputs(panel: &ProbabilityPanel, idx: &[usize], inputs: GateInputs) -> Array2<f64> {
    let w = input_width(panel, inputs);
    let flat: Vec<f64> = idx.iter().flat_map(|&i| row_inputs(panel, i, inputs)).collect();
    Array2::from_shape_vec((idx.len(), w), flat).expect("consistent input width")
}

/// Training units for rows `idx` at the requested level. Person units are
/// ordered by first appearance.
pub fn gate_data(panel: &ProbabilityPanel, idx: &[usize], inputs: GateInputs, level: LikelihoodLevel) -> GateData {
    let m = panel.n_models();
    match level {
        LikelihoodLevel::Observation => GateData {
            x: gate_inputs(panel, idx, inputs),
            logl: Array2::from_shape_fn((idx.len(), m), |(r, k)| panel.lik_row(idx[r])[k].ln()),
        },
        LikelihoodLevel::Person => {
            let mut order: Vec<u64> = Vec::new();
            let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for &i in idx {
                let g = groups.entry(panel.person_id[i]).or_default();
                if g.is_empty() {
                    order.push(panel.person_id[i]);
                }
                g.push(i);
            }
            let n = order.len();
            let mut x = Array2::zeros((n, 1));
            let mut logl = Array2::zeros((n, m));
            for (u, p) in order.iter().enumerate() {
                let rows = &groups[p];
                x[(u, 0)] = rows.iter().map(|&i| panel.distance[i]).sum::<f64>() / rows.len() as f64;
                for k in 0..m {
                    logl[(u, k)] = rows.iter().map(|&i| panel.lik_row(i)[k].ln()).sum();
                }
            }
            GateData { x, logl }
        }
    }
}

/// Sum over units of `log sum_m w_um exp(logl_um)`.
pub fn mixture_loglik(weights: ArrayView2<f64>, logl: ArrayView2<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut terms = vec![0.0; weights.ncols()];
    for (u, (w, l)) in weights.rows().into_iter().zip(logl.rows()).enumerate() {
        for (k, t) in terms.iter_mut().enumerate() {
            *t = w[k].ln() + l[k];
        }
        let v = log_sum_exp(&terms);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "averaged likelihood of unit {u} is not positive"
            )));
        }
        total += v;
    }
    Ok(total)
}

/// Observation-level averaging log-likelihood for explicit weights
/// (`weights[r]` belongs to row `idx[r]`).
pub fn ma_loglik_with_weights(panel: &ProbabilityPanel, idx: &[usize], weights: &[Vec<f64>]) -> Result<f64> {
    let m = panel.n_models();
    if weights.len() != idx.len() || weights.iter().any(|w| w.len() != m) {
        return Err(Error::Shape("one weight vector per row, one weight per model".into()));
    }
    let w = Array2::from_shape_fn((idx.len(), m), |(r, k)| weights[r][k]);
    let l = Array2::from_shape_fn((idx.len(), m), |(r, k)| panel.lik_row(idx[r])[k].ln());
    mixture_loglik(w.view(), l.view())
}

/// Neural gate: standardized inputs, tanh hidden layers, softmax over models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralGate {
    pub inputs: GateInputs,
    pub level: LikelihoodLevel,
    pub input_mean: Vec<f64>,
    pub input_sd: Vec<f64>,
    pub net: Network,
}

impl NeuralGate {
    /// Gate with all weights zero: uniform weights everywhere.
    pub fn zeros(n_inputs: usize, hidden: &[usize], n_models: usize) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend(hidden);
        sizes.push(n_models);
        NeuralGate {
            inputs: GateInputs::Distance,
            level: LikelihoodLevel::Observation,
            input_mean: vec![0.0; n_inputs],
            input_sd: vec![1.0; n_inputs],
            net: Network::zeros(&sizes),
        }
    }

    pub fn n_models(&self) -> usize {
        self.net.n_out()
    }

    pub fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.to_owned();
        for mut row in z.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_mean[k]) / self.input_sd[k];
            }
        }
        z
    }

    /// Weights for raw (unstandardized) inputs, one row per unit.
    pub fn weights_raw(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.net.output(self.standardize(x).view());
        masked_softmax_rows(&mut out, None);
        out
    }

    /// Weights for a single trip distance (distance-only gates).
    pub fn weights_at(&self, distance: f64) -> Vec<f64> {
        let x = Array2::from_elem((1, 1), distance);
        self.weights_raw(x.view()).row(0).to_vec()
    }

    pub fn weights(&self, panel: &ProbabilityPanel, idx: &[usize]) -> Array2<f64> {
        self.weights_raw(gate_inputs(panel, idx, self.inputs).view())
    }

    /// Averaging log-likelihood of rows `idx` at the gate's level.
    pub fn loglik(&self, panel: &ProbabilityPanel, idx: &[usize]) -> Result<f64> {
        let data = gate_data(panel, idx, self.inputs, self.level);
        mixture_loglik(self.weights_raw(data.x.view()).view(), data.logl.view())
    }
}

/// Mean of `-log sum_m pi_m L_m` over a batch plus `l2 / (2 B) |W|^2`, and
/// the gradient with respect to the network parameters. `x` must already be
/// standardized.
pub fn gate_loss_and_grad(net: &Network, x: ArrayView2<f64>, logl: ArrayView2<f64>, l2: f64) -> (f64, Grads) {
    let b = x.nrows() as f64;
    let (inputs, logits) = net.forward(x);
    let mut pi = logits;
    masked_softmax_rows(&mut pi, None);
    let m = pi.ncols();
    let mut nll = 0.0;
    let mut d = Array2::zeros(pi.raw_dim());
    let mut terms = vec![0.0; m];
    for r in 0..pi.nrows() {
        for k in 0..m {
            terms[k] = pi[(r, k)].ln() + logl[(r, k)];
        }
        let lse = log_sum_exp(&terms);
        nll -= lse;
        for k in 0..m {
            // responsibility r_k = pi_k L_k / sum; d(-log mix)/d logit_k = pi_k - r_k
            d[(r, k)] = (pi[(r, k)] - (terms[k] - lse).exp()) / b;
        }
    }
    let loss = nll / b + 0.5 * l2 / b * net.weight_sq_norm();
    (loss, net.backward(&inputs, d, l2 / b))
}

fn column_moments(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
    let sd = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| {
            let v = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Trains one gate from a seeded initialisation; `None` if training diverged.
pub fn train_single_gate(data: &GateData, cfg: &GateConfig, inputs: GateInputs, seed: u64) -> Option<NeuralGate> {
    let mut rng = seed::rng(seed);
    let n = data.n_units();
    let (input_mean, input_sd) = column_moments(data.x.view());
    let mut sizes = vec![data.x.ncols()];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(data.logl.ncols());
    let mut gate = NeuralGate {
        inputs,
        level: cfg.level,
        input_mean,
        input_sd,
        net: Network::new(&sizes, &mut rng),
    };
    let z = gate.standardize(data.x.view());
    let mut adam = Adam::new(gate.net.n_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut no_change = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = z.select(ndarray::Axis(0), batch);
            let lb = data.logl.select(ndarray::Axis(0), batch);
            let (loss, grads) = gate_loss_and_grad(&gate.net, xb.view(), lb.view(), cfg.l2);
            if !loss.is_finite() {
                return None;
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut gate.net, &grads);
        }
        epoch_loss /= n as f64;
        if epoch_loss > best - cfg.tol {
            no_change += 1;
        } else {
            no_change = 0;
        }
        best = best.min(epoch_loss);
        if cfg.n_iter_no_change > 0 && no_change >= cfg.n_iter_no_change {
            break;
        }
    }
    gate.net.is_finite().then_some(gate)
}

/// The retained gates of a multi-restart training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MAEnsemble {
    pub model_names: Vec<String>,
    pub config: GateConfig,
    pub seed: u64,
    /// Retained gates, best training log-likelihood first.
    pub gates: Vec<NeuralGate>,
    pub restart_index: Vec<usize>,
    pub train_loglik: Vec<f64>,
    /// Training log-likelihood of every restart (`None` = diverged).
    pub all_loglik: Vec<Option<f64>>,
    pub n_train_units: usize,
}

impl MAEnsemble {
    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    /// Per-gate weights for rows `idx`.
    pub fn gate_weights(&self, panel: &ProbabilityPanel, idx: &[usize]) -> Vec<Array2<f64>> {
        self.gates.iter().map(|g| g.weights(panel, idx)).collect()
    }

    /// Mean weights over retained gates for rows `idx`.
    pub fn weights(&self, panel: &ProbabilityPanel, idx: &[usize]) -> Array2<f64> {
        mean_of(&self.gate_weights(panel, idx))
    }

    /// Mean weights at a trip distance (distance-only gates).
    pub fn weights_at(&self, distance: f64) -> Vec<f64> {
        let k = self.gates.len() as f64;
        let mut w = vec![0.0; self.n_models()];
        for g in &self.gates {
            w.iter_mut().zip(g.weights_at(distance)).for_each(|(a, b)| *a += b / k);
        }
        w
    }

    /// Observation-level log-likelihood of the averaged prediction.
    pub fn loglik(&self, panel: &ProbabilityPanel, idx: &[usize]) -> Result<f64> {
        let w = self.weights(panel, idx);
        let l = Array2::from_shape_fn((idx.len(), panel.n_models()), |(r, k)| panel.lik_row(idx[r])[k].ln());
        mixture_loglik(w.view(), l.view())
    }

    fn check_panel(&self, panel: &ProbabilityPanel) -> Result<()> {
        if panel.model_names != self.model_names {
            return Err(Error::Shape(format!(
                "gate trained on models [{}], panel has [{}]",
                self.model_names.join(", "),
                panel.model_names.join(", ")
            )));
        }
        Ok(())
    }
}

fn mean_of(ws: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = ws[0].clone();
    for w in &ws[1..] {
        acc += w;
    }
    acc / ws.len() as f64
}

/// Trains `cfg.restarts` gates on rows `idx` and keeps the best
/// `ceil(retain_frac * restarts)` by training log-likelihood (ties by restart
/// index).
pub fn train_gate(
    panel: &ProbabilityPanel,
    idx: &[usize],
    cfg: &GateConfig,
    seed: u64,
    exec: Exec,
) -> Result<MAEnsemble> {
    cfg.validate()?;
    if idx.is_empty() {
        return Err(Error::Training("no rows to train the gate on".into()));
    }
    let data = gate_data(panel, idx, cfg.inputs, cfg.level);
    let results: Vec<Option<(NeuralGate, f64)>> = exec.map(cfg.restarts, |r| {
        let g = train_single_gate(&data, cfg, cfg.inputs, seed::derive(seed, "gate", r as u64))?;
        let ll = mixture_loglik(g.weights_raw(data.x.view()).view(), data.logl.view()).ok()?;
        Some((g, ll))
    });
    let all_loglik: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().map(|(_, ll)| *ll)).collect();
    let mut ok: Vec<usize> = (0..results.len()).filter(|&r| results[r].is_some()).collect();
    if ok.is_empty() {
        return Err(Error::Training(format!("all {} gate restarts diverged", cfg.restarts)));
    }
    ok.sort_by(|&a, &b| {
        all_loglik[b]
            .unwrap()
            .total_cmp(&all_loglik[a].unwrap())
            .then(a.cmp(&b))
    });
    ok.truncate(cfg.retained());
    let mut results = results;
    let mut gates = Vec::new();
    let mut train_loglik = Vec::new();
    for &r in &ok {
        let (g, ll) = results[r].take().expect("kept restart exists");
        gates.push(g);
        train_loglik.push(ll);
    }
    Ok(MAEnsemble {
        model_names: panel.model_names.clone(),
        config: cfg.clone(),
        seed,
        gates,
        restart_index: ok,
        train_loglik,
        all_loglik,
        n_train_units: data.n_units(),
    })
}

/// Averaged probability vectors `sum_m w_m P_m` for rows `idx`, with `w` the
/// retained gates' mean weights.
pub fn ma_predict(ens: &MAEnsemble, panel: &ProbabilityPanel, idx: &[usize]) -> Result<ProbTable> {
    ens.check_panel(panel)?;
    let w = ens.weights(panel, idx);
    Ok(weighted_predict(panel, idx, w.view()))
}

/// `sum_m w[r, m] P_m` for each row.
pub fn weighted_predict(panel: &ProbabilityPanel, idx: &[usize], w: ArrayView2<f64>) -> ProbTable {
    let (m, j) = (panel.n_models(), panel.n_alts());
    let mut out = ProbTable::zeros(idx.len(), j);
    for (r, &i) in idx.iter().enumerate() {
        let row = out.row_mut(r);
        for k in 0..m {
            let wk = w[(r, k)];
            row.iter_mut().zip(panel.prob_vec(i, k)).for_each(|(o, p)| *o += wk * p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two models over two alternatives; `lik` gives each model's probability
    /// of the chosen alternative 0.
    pub(crate) fn panel(dist: &[f64], lik: &[[f64; 2]]) -> ProbabilityPanel {
        let n = dist.len();
        ProbabilityPanel {
            model_names: vec!["a".into(), "b".into()],
            alt_names: vec!["x".into(), "y".into()],
            obs_id: (0..n as u64).collect(),
            person_id: (0..n as u64).map(|i| i / 2).collect(),
            distance: dist.to_vec(),
            segment: vec![5; n],
            role: vec![Role::SubTrain; n],
            chosen: vec![0; n],
            lik: lik.iter().flatten().copied().collect(),
            probs: lik.iter().flat_map(|l| [l[0], 1.0 - l[0], l[1], 1.0 - l[1]]).collect(),
        }
    }

    #[test]
    fn hand_computed_loglik() {
        let p = panel(&[1.0, 2.0], &[[0.5, 0.9], [0.8, 0.1]]);
        let w = vec![vec![0.5, 0.5]; 2];
        let ll = ma_loglik_with_weights(&p, &[0, 1], &w).unwrap();
        assert!((ll - (0.7f64.ln() + 0.45f64.ln())).abs() < 1e-12);
        let one_hot = vec![vec![1.0, 0.0]; 2];
        let ll = ma_loglik_with_weights(&p, &[0, 1], &one_hot).unwrap();
        assert!((ll - (0.5f64.ln() + 0.8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logistic_gate_weights() {
        let g = LogisticGate {
            gamma: vec![vec![3f64.ln()]],
        };
        let w = g.weights(&[1.0]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let g0 = LogisticGate {
            gamma: vec![vec![0.0, 0.0]; 3],
        };
        assert_eq!(g0.weights(&[2.0, -1.0]), vec![0.25; 4]);
    }

    #[test]
    fn zero_gate_is_uniform() {
        let g = NeuralGate::zeros(1, &[4, 4], 3);
        for d in [0.1, 5.0, 1e6] {
            assert_eq!(g.weights_at(d), vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut rng = seed::rng(4);
        let mut net = Network::new(&[1, 5, 5, 3], &mut rng);
        let x = Array2::from_shape_fn((6, 1), |(i, _)| i as f64 * 0.4 - 1.0);
        let logl = Array2::from_shape_fn((6, 3), |(i, k)| -0.2 - 0.3 * ((i + 2 * k) % 4) as f64);
        let (_, g) = gate_loss_and_grad(&net, x.view(), logl.view(), 0.01);
        let g = g.flatten();
        let p0 = net.params_flat();
        for k in 0..p0.len() {
            let h = 1e-6;
            let mut p = p0.clone();
            p[k] += h;
            net.set_params_flat(&p);
            let up = gate_loss_and_grad(&net, x.view(), logl.view(), 0.01).0;
            p[k] -= 2.0 * h;
            net.set_params_flat(&p);
            let down = gate_loss_and_grad(&net, x.view(), logl.view(), 0.01).0;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-4),
                "param {k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn retention_count() {
        let cfg = GateConfig {
            restarts: 5,
            ..GateConfig::default()
        };
        assert_eq!(cfg.retained(), 1);
        assert_eq!(GateConfig::default().retained(), 20);
    }

    #[test]
    fn person_level_groups_trips() {
        let p = panel(&[1.0, 3.0, 5.0], &[[0.5, 0.9], [0.8, 0.1], [0.4, 0.4]]);
        let d = gate_data(&p, &[0, 1, 2], GateInputs::Distance, LikelihoodLevel::Person);
        assert_eq!(d.n_units(), 2);
        assert_eq!(d.x[(0, 0)], 2.0);
        assert!((d.logl[(0, 1)] - (0.9f64 * 0.1).ln()).abs() < 1e-15);
    }
}
