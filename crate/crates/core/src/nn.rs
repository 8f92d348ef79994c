//! Small fully connected networks: tanh hidden layers, linear output,
//! backpropagation and Adam. Shared by the MLP sub-model and the gate.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense layer with row-major `n_in x n_out` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn w_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &self.w).expect("consistent layer shape")
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w_view());
        for mut row in z.rows_mut() {
            row.iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Per-layer gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend(w);
            out.extend(b);
        }
        out
    }
}

impl Network {
    /// Layer sizes `[n_in, hidden..., n_out]`; weights and biases drawn
    /// uniformly from `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    n_in: w[0],
                    n_out: w[1],
                    w: (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                    b: (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                }
            })
            .collect();
        Network { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Network {
            layers: sizes
                .windows(2)
                .map(|w| Dense {
                    n_in: w[0],
                    n_out: w[1],
                    w: vec![0.0; w[0] * w[1]],
                    b: vec![0.0; w[1]],
                })
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("non-empty network").n_out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Output-layer pre-activations.
    pub fn output(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h.view());
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    /// Forward pass keeping every layer input (the network input followed by
    /// each hidden activation) and the output pre-activations.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h.view());
            inputs.push(h);
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        (inputs, h)
    }

    /// Gradients given `d_out = dLoss/d(output pre-activations)`; adds
    /// `l2 * W` to each weight gradient.
    pub fn backward(&self, inputs: &[Array2<f64>], d_out: Array2<f64>, l2: f64) -> Grads {
        let n = self.layers.len();
        let mut gw = vec![Vec::new(); n];
        let mut gb = vec![Vec::new(); n];
        let mut delta = d_out;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let a = &inputs[i];
            let mut w_grad = a.t().dot(&delta);
            if l2 != 0.0 {
                w_grad.zip_mut_with(&layer.w_view(), |g, w| *g += l2 * w);
            }
            gw[i] = w_grad.into_iter().collect();
            gb[i] = delta.sum_axis(Axis(0)).to_vec();
            if i > 0 {
                let mut back = delta.dot(&layer.w_view().t());
                back.zip_mut_with(a, |d, h| *d *= 1.0 - h * h);
                delta = back;
            }
        }
        Grads { w: gw, b: gb }
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.w).map(|w| w * w).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(&l.w);
            out.extend(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for (p, g) in layer
                .w
                .iter_mut()
                .zip(&grads.w[l])
                .chain(layer.b.iter_mut().zip(&grads.b[l]))
            {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Row-wise softmax with a boolean mask; masked entries get probability 0.
pub fn masked_softmax_rows(logits: &mut Array2<f64>, mask: Option<&[bool]>) {
    let j = logits.ncols();
    for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
        let m = mask.map(|m| &m[r * j..(r + 1) * j]);
        let on = |k: usize| m.is_none_or(|m| m[k]);
        let max = (0..j)
            .filter(|&k| on(k))
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..j {
            row[k] = if on(k) { (row[k] - max).exp() } else { 0.0 };
            sum += row[k];
        }
        row.mapv_inplace(|v| v / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::Array2;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(&[3, 5, 2]);
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        assert!(net.output(x.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = seed::rng(3);
        let mut net = Network::new(&[3, 4, 4, 2], &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        // loss = 0.5 * sum(output^2) + 0.5 * l2 * |W|^2
        let l2 = 0.05;
        let loss =
            |n: &Network| 0.5 * n.output(x.view()).iter().map(|v| v * v).sum::<f64>() + 0.5 * l2 * n.weight_sq_norm();
        let (inputs, out) = net.forward(x.view());
        let g = net.backward(&inputs, out, l2).flatten();
        let p0 = net.params_flat();
        for k in 0..p0.len() {
            let h = 1e-6;
            let mut p = p0.clone();
            p[k] += h;
            net.set_params_flat(&p);
            let up = loss(&net);
            p[k] -= 2.0 * h;
            net.set_params_flat(&p);
            let down = loss(&net);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "param {k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn masked_softmax() {
        let mut l = Array2::from_shape_vec((1, 3), vec![1.0, 50.0, 1.0]).unwrap();
        masked_softmax_rows(&mut l, Some(&[true, false, true]));
        assert_eq!(l.row(0).to_vec(), vec![0.5, 0.0, 0.5]);
    }
}
