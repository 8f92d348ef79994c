//! Feed-forward softmax classifier with availability masking.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{FeatureLayout, FeatureTable};
use crate::error::{Error, Result};
use crate::nn::{masked_softmax_rows, Adam, Grads, Network};
use crate::seed;
use crate::table::ProbTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    /// L2 strength; the per-batch penalty is `l2 / (2 B) * |W|^2`.
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    /// Stop when the epoch loss has not improved by `tol` for
    /// `n_iter_no_change` consecutive epochs.
    pub tol: f64,
    pub n_iter_no_change: usize,
    pub feed_distance: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: vec![30, 30],
            learning_rate: 0.001,
            l2: 0.1,
            epochs: 300,
            batch_size: 64,
            repetitions: 100,
            tol: 1e-4,
            n_iter_no_change: 10,
            feed_distance: false,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "mlp needs learning_rate > 0, l2 >= 0, batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layout: FeatureLayout,
    pub net: Network,
    pub input_mean: Vec<f64>,
    pub input_sd: Vec<f64>,
    pub final_loss: f64,
    pub epochs_run: usize,
}

impl MlpModel {
    /// Untrained model with all weights zero (uniform predictions).
    pub fn zeros(layout: FeatureLayout, hidden: &[usize]) -> Self {
        let w = layout.width();
        let mut sizes = vec![w];
        sizes.extend(hidden);
        sizes.push(layout.n_alts);
        MlpModel {
            net: Network::zeros(&sizes),
            input_mean: vec![0.0; w],
            input_sd: vec![1.0; w],
            layout,
            final_loss: f64::NAN,
            epochs_run: 0,
        }
    }

    fn standardize(&self, table: &FeatureTable, rows: &[usize]) -> Array2<f64> {
        let w = table.width();
        Array2::from_shape_fn((rows.len(), w), |(r, c)| {
            (table.row(rows[r])[c] - self.input_mean[c]) / self.input_sd[c]
        })
    }

    pub fn predict_proba(&self, table: &FeatureTable) -> Result<ProbTable> {
        table.check_layout(&self.layout)?;
        let rows: Vec<usize> = (0..table.n_rows).collect();
        let mut out = ProbTable::zeros(table.n_rows, table.n_alts());
        for chunk in rows.chunks(1024) {
            let x = self.standardize(table, chunk);
            let mut logits = self.net.output(x.view());
            let mask: Vec<bool> = chunk.iter().flat_map(|&i| table.avail_row(i).iter().copied()).collect();
            masked_softmax_rows(&mut logits, Some(&mask));
            for (r, &i) in chunk.iter().enumerate() {
                out.row_mut(i)
                    .copy_from_slice(logits.row(r).as_slice().expect("contiguous row"));
            }
        }
        Ok(out)
    }
}

/// Mean masked-softmax negative log-likelihood over a batch plus
/// `l2 / (2 B) * |W|^2`, with its gradient in [`Network::params_flat`] order.
pub fn batch_loss_and_grad(
    net: &Network,
    x: ArrayView2<f64>,
    labels: &[usize],
    mask: &[bool],
    l2: f64,
) -> (f64, Grads) {
    let b = labels.len() as f64;
    let (inputs, mut out) = net.forward(x);
    masked_softmax_rows(&mut out, Some(mask));
    let mut nll = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        nll -= out[(r, y)].max(1e-300).ln();
        out[(r, y)] -= 1.0;
    }
    out.mapv_inplace(|v| v / b);
    let loss = nll / b + 0.5 * l2 / b * net.weight_sq_norm();
    let grads = net.backward(&inputs, out, l2 / b);
    (loss, grads)
}

/// Mini-batch Adam training of one network.
pub fn mlp_train(table: &FeatureTable, cfg: &MlpConfig, seed: u64) -> Result<MlpModel> {
    cfg.validate()?;
    if table.n_rows == 0 {
        return Err(Error::Training("no training rows".into()));
    }
    if let Some(i) = (0..table.n_rows).find(|&i| !table.avail_row(i)[table.labels[i]]) {
        return Err(Error::Training(format!("row {i}: label is unavailable")));
    }
    let w = table.width();
    let n = table.n_rows;
    let mut input_mean = vec![0.0; w];
    let mut input_sd = vec![0.0; w];
    for i in 0..n {
        for (m, v) in input_mean.iter_mut().zip(table.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in input_sd.iter_mut().zip(table.row(i)).zip(&input_mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    input_sd
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let mut rng = seed::rng(seed);
    let mut sizes = vec![w];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(table.n_alts());
    let mut model = MlpModel {
        layout: table.layout.clone(),
        net: Network::new(&sizes, &mut rng),
        input_mean,
        input_sd,
        final_loss: f64::NAN,
        epochs_run: 0,
    };
    let x_all = model.standardize(table, &(0..n).collect::<Vec<_>>());
    let mut adam = Adam::new(model.net.n_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut no_change = 0;
    let j = table.n_alts();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = x_all.select(ndarray::Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| table.labels[i]).collect();
            let mask: Vec<bool> = batch
                .iter()
                .flat_map(|&i| table.avail[i * j..(i + 1) * j].iter().copied())
                .collect();
            let (loss, grads) = batch_loss_and_grad(&model.net, x.view(), &labels, &mask, cfg.l2);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "mlp loss diverged at epoch {epoch} (seed {seed})"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut model.net, &grads);
        }
        epoch_loss /= n as f64;
        model.final_loss = epoch_loss;
        model.epochs_run = epoch + 1;
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
    if !model.net.is_finite() {
        return Err(Error::Training(format!("mlp weights became non-finite (seed {seed})")));
    }
    Ok(model)
}
