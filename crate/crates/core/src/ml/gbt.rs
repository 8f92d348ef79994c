//! Second-order (Newton) boosted regression trees for multi-class choice.
//!
//! One tree per class per round on the masked-softmax gradients
//! `g = p - y`, `h = p (1 - p)`. Trees are grown level-wise by exact greedy
//! search over presorted columns, with a fresh feature subsample per split.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureLayout, FeatureTable};
use crate::error::{Error, Result};
use crate::seed;
use crate::table::ProbTable;

const HESS_FLOOR: f64 = 1e-16;
const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub max_depth: usize,
    /// Minimum loss reduction required to keep a split.
    pub gamma: f64,
    /// Fraction of features considered at each split.
    pub colsample: f64,
    pub min_child_weight: f64,
    pub subsample: f64,
    pub rounds: usize,
    pub eta: f64,
    pub l2_leaf: f64,
    pub repetitions: usize,
    /// Fraction of training rows held out to pick the number of rounds;
    /// 0 disables early stopping.
    pub early_stopping_frac: f64,
    pub patience: usize,
    pub feed_distance: bool,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            max_depth: 2,
            gamma: 2.0,
            colsample: 0.7,
            min_child_weight: 1.0,
            subsample: 1.0,
            rounds: 200,
            eta: 0.1,
            l2_leaf: 1.0,
            repetitions: 100,
            early_stopping_frac: 0.1,
            patience: 20,
            feed_distance: false,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return Err(Error::Config(format!(
                "gbt colsample must be in (0, 1], got {}",
                self.colsample
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!(
                "gbt subsample must be in (0, 1], got {}",
                self.subsample
            )));
        }
        if !(self.eta > 0.0) || !(self.l2_leaf >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::Config(
                "gbt needs eta > 0 and non-negative gamma, l2_leaf, min_child_weight".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.early_stopping_frac) {
            return Err(Error::Config("gbt early_stopping_frac must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimal leaf value `-G / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

/// Loss reduction of splitting a node into `(gl, hl)` and `(gr, hr)`,
/// net of `gamma`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub threshold: f64,
    pub gain: f64,
    pub g_left: f64,
    pub h_left: f64,
    pub g_right: f64,
    pub h_right: f64,
}

/// Scans rows `order` (sorted by `x`) for the best threshold. Rows with
/// `x < threshold` go left. Only strictly positive gains with both children
/// meeting `min_child_weight` qualify; the first maximum wins.
fn scan(order: &[u32], x: &[f64], g: &[f64], h: &[f64], cfg: &GbtConfig) -> Option<SplitCandidate> {
    let (gt, ht) = order
        .iter()
        .fold((0.0, 0.0), |(a, b), &i| (a + g[i as usize], b + h[i as usize]));
    let mut best: Option<SplitCandidate> = None;
    let (mut gl, mut hl) = (0.0, 0.0);
    for w in order.windows(2) {
        let (i, next) = (w[0] as usize, w[1] as usize);
        gl += g[i];
        hl += h[i];
        if x[i] == x[next] {
            continue;
        }
        let (gr, hr) = (gt - gl, ht - hl);
        if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
            continue;
        }
        let gain = split_gain(gl, hl, gr, hr, cfg.l2_leaf, cfg.gamma);
        if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
            best = Some(SplitCandidate {
                threshold: 0.5 * (x[i] + x[next]),
                gain,
                g_left: gl,
                h_left: hl,
                g_right: gr,
                h_right: hr,
            });
        }
    }
    best
}

/// Best split of a single feature column, for inspection and testing.
pub fn best_split_1d(x: &[f64], g: &[f64], h: &[f64], cfg: &GbtConfig) -> Option<SplitCandidate> {
    let mut order: Vec<u32> = (0..x.len() as u32).collect();
    order.sort_by(|&a, &b| x[a as usize].total_cmp(&x[b as usize]));
    scan(&order, x, g, h, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Leaf value, already multiplied by the learning rate.
    Leaf { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

/// Column-major copy of the features with per-column sort orders.
struct Columns {
    cols: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl Columns {
    fn new(table: &FeatureTable, rows: &[usize]) -> Self {
        let w = table.width();
        let cols: Vec<Vec<f64>> = (0..w)
            .map(|f| rows.iter().map(|&i| table.row(i)[f]).collect())
            .collect();
        let sorted = cols
            .iter()
            .map(|c| {
                let mut o: Vec<u32> = (0..c.len() as u32).collect();
                o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                o
            })
            .collect();
        Columns { cols, sorted }
    }
}

fn grow_tree<R: Rng>(cols: &Columns, in_sample: &[bool], g: &[f64], h: &[f64], cfg: &GbtConfig, rng: &mut R) -> Tree {
    let n_feat = cols.cols.len();
    let n_try = ((cfg.colsample * n_feat as f64).round() as usize).clamp(1, n_feat.max(1));
    let mut nodes: Vec<Node> = Vec::new();
    // (node index, per-feature sorted rows of this node)
    let root: Vec<Vec<u32>> = cols
        .sorted
        .iter()
        .map(|o| o.iter().copied().filter(|&i| in_sample[i as usize]).collect())
        .collect();
    nodes.push(Node::Leaf { weight: 0.0 });
    let mut frontier = vec![(0usize, root)];
    for depth in 0..=cfg.max_depth {
        let mut next = Vec::new();
        for (k, sorted) in frontier {
            let rows = &sorted[0];
            let (gs, hs) = rows
                .iter()
                .fold((0.0, 0.0), |(a, b), &i| (a + g[i as usize], b + h[i as usize]));
            let leaf = Node::Leaf {
                weight: cfg.eta * leaf_weight(gs, hs, cfg.l2_leaf),
            };
            if depth == cfg.max_depth || n_feat == 0 {
                nodes[k] = leaf;
                continue;
            }
            let mut feats = sample(rng, n_feat, n_try).into_vec();
            feats.sort_unstable();
            let mut best: Option<(usize, SplitCandidate)> = None;
            for &f in &feats {
                if let Some(c) = scan(&sorted[f], &cols.cols[f], g, h, cfg) {
                    if best.is_none_or(|(_, b)| c.gain > b.gain) {
                        best = Some((f, c));
                    }
                }
            }
            let Some((f, c)) = best else {
                nodes[k] = leaf;
                continue;
            };
            let x = &cols.cols[f];
            let (mut ls, mut rs) = (Vec::with_capacity(n_feat), Vec::with_capacity(n_feat));
            for o in &sorted {
                let (l, r): (Vec<u32>, Vec<u32>) = o.iter().partition(|&&i| x[i as usize] < c.threshold);
                ls.push(l);
                rs.push(r);
            }
            let (left, right) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { weight: 0.0 });
            nodes.push(Node::Leaf { weight: 0.0 });
            nodes[k] = Node::Split {
                feature: f,
                threshold: c.threshold,
                left,
                right,
            };
            next.push((left, ls));
            next.push((right, rs));
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    Tree { nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub layout: FeatureLayout,
    /// Per-class starting margin (log prior).
    pub base_score: Vec<f64>,
    /// `rounds x n_alts` trees.
    pub trees: Vec<Vec<Tree>>,
}

impl GbtModel {
    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }

    fn margins(&self, x: &[f64], rounds: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.base_score);
        for round in &self.trees[..rounds] {
            for (m, t) in out.iter_mut().zip(round) {
                *m += t.predict(x);
            }
        }
    }

    pub fn predict_proba(&self, table: &FeatureTable) -> Result<ProbTable> {
        self.predict_proba_rounds(table, self.n_rounds())
    }

    /// Predictions using only the first `rounds` boosting rounds.
    pub fn predict_proba_rounds(&self, table: &FeatureTable, rounds: usize) -> Result<ProbTable> {
        table.check_layout(&self.layout)?;
        let j = table.n_alts();
        let mut out = ProbTable::zeros(table.n_rows, j);
        for i in 0..table.n_rows {
            let row = out.row_mut(i);
            self.margins(table.row(i), rounds.min(self.n_rounds()), row);
            masked_softmax(row, table.avail_row(i));
        }
        Ok(out)
    }
}

fn masked_softmax(m: &mut [f64], avail: &[bool]) {
    let max = m
        .iter()
        .zip(avail)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &a) in m.iter_mut().zip(avail) {
        *v = if a { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    m.iter_mut().for_each(|v| *v /= sum);
}

/// Mean negative log-likelihood of the labels.
pub fn log_loss(p: &ProbTable, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.row(i)[y].max(1e-300).ln())
        .sum::<f64>()
        / labels.len().max(1) as f64
}

pub fn gbt_train(table: &FeatureTable, cfg: &GbtConfig, seed: u64) -> Result<GbtModel> {
    cfg.validate()?;
    let n = table.n_rows;
    if n == 0 {
        return Err(Error::Training("no training rows".into()));
    }
    let j = table.n_alts();
    let mut rng = seed::rng(seed);

    let mut valid = Vec::new();
    let n_valid = (cfg.early_stopping_frac * n as f64).round() as usize;
    if n_valid >= 1 && n_valid < n {
        valid = sample(&mut rng, n, n_valid).into_vec();
        valid.sort_unstable();
    }
    let mut is_valid = vec![false; n];
    valid.iter().for_each(|&i| is_valid[i] = true);
    let train: Vec<usize> = (0..n).filter(|&i| !is_valid[i]).collect();

    let mut counts = vec![0.0; j];
    train.iter().for_each(|&i| counts[table.labels[i]] += 1.0);
    let base_score: Vec<f64> = counts
        .iter()
        .map(|c| (c / train.len() as f64).max(PRIOR_FLOOR).ln())
        .collect();
    let mut model = GbtModel {
        layout: table.layout.clone(),
        base_score,
        trees: Vec::new(),
    };

    let cols = Columns::new(table, &train);
    let nt = train.len();
    let mut margin: Vec<f64> = (0..nt).flat_map(|_| model.base_score.iter().copied()).collect();
    let mut valid_margin: Vec<f64> = (0..valid.len())
        .flat_map(|_| model.base_score.iter().copied())
        .collect();
    let valid_loss = |vm: &[f64]| -> f64 {
        let mut p = vec![0.0; j];
        let mut s = 0.0;
        for (r, &i) in valid.iter().enumerate() {
            p.copy_from_slice(&vm[r * j..(r + 1) * j]);
            masked_softmax(&mut p, table.avail_row(i));
            s -= p[table.labels[i]].max(1e-300).ln();
        }
        s
    };
    let mut best_loss = if valid.is_empty() {
        0.0
    } else {
        valid_loss(&valid_margin)
    };
    let mut best_rounds = 0;

    let mut g = vec![0.0; nt];
    let mut h = vec![0.0; nt];
    let mut p = vec![0.0; nt * j];
    let mut in_sample = vec![true; nt];
    for round in 0..cfg.rounds {
        for r in 0..nt {
            let row = &mut p[r * j..(r + 1) * j];
            row.copy_from_slice(&margin[r * j..(r + 1) * j]);
            masked_softmax(row, table.avail_row(train[r]));
        }
        if cfg.subsample < 1.0 {
            let k = ((cfg.subsample * nt as f64).round() as usize).max(1);
            in_sample.fill(false);
            sample(&mut rng, nt, k).into_iter().for_each(|i| in_sample[i] = true);
        }
        let mut trees = Vec::with_capacity(j);
        for c in 0..j {
            for r in 0..nt {
                let pc = p[r * j + c];
                let y = if table.labels[train[r]] == c { 1.0 } else { 0.0 };
                g[r] = pc - y;
                h[r] = if table.avail_row(train[r])[c] {
                    (pc * (1.0 - pc)).max(HESS_FLOOR)
                } else {
                    0.0
                };
            }
            trees.push(grow_tree(&cols, &in_sample, &g, &h, cfg, &mut rng));
        }
        for r in 0..nt {
            let x = table.row(train[r]);
            for (c, t) in trees.iter().enumerate() {
                margin[r * j + c] += t.predict(x);
            }
        }
        for (r, &i) in valid.iter().enumerate() {
            for (c, t) in trees.iter().enumerate() {
                valid_margin[r * j + c] += t.predict(table.row(i));
            }
        }
        model.trees.push(trees);
        if !valid.is_empty() {
            let loss = valid_loss(&valid_margin);
            if loss < best_loss {
                best_loss = loss;
                best_rounds = round + 1;
            } else if round + 1 - best_rounds >= cfg.patience {
                break;
            }
        }
    }
    if !valid.is_empty() {
        model.trees.truncate(best_rounds);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ChoiceDataset, Observation, DEFAULT_LOG_DELTA};
    use crate::ml::features::encode_features;

    fn dataset(xs: &[f64], labels: &[usize]) -> ChoiceDataset {
        let obs = xs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&x, &y))| Observation {
                obs_id: i as u64,
                person_id: i as u64,
                chosen: y,
                distance: 1.0,
                avail: vec![true, true],
                attrs: vec![x, 1.0],
                socio: vec![],
            })
            .collect();
        ChoiceDataset::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![],
            DEFAULT_LOG_DELTA,
            obs,
        )
        .unwrap()
    }

    fn no_stop() -> GbtConfig {
        GbtConfig {
            early_stopping_frac: 0.0,
            ..GbtConfig::default()
        }
    }

    #[test]
    fn leaf_weight_formula() {
        assert_eq!(leaf_weight(2.0, 3.0, 1.0), -0.5);
    }

    #[test]
    fn zero_rounds_gives_priors() {
        let ds = dataset(&[1.0, 2.0, 3.0, 4.0], &[0, 1, 1, 1]);
        let mut t = encode_features(&ds, false);
        let m = gbt_train(&t, &GbtConfig { rounds: 0, ..no_stop() }, 1).unwrap();
        let p = m.predict_proba(&t).unwrap();
        assert!((p.row(0)[0] - 0.25).abs() < 1e-15);
        t.avail[1] = false;
        let p = m.predict_proba(&t).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn separable_stump_reduces_loss() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let ys: Vec<usize> = xs.iter().map(|&x| usize::from(x >= 10.0)).collect();
        let t = encode_features(&dataset(&xs, &ys), false);
        let cfg = GbtConfig {
            rounds: 1,
            max_depth: 1,
            colsample: 1.0,
            gamma: 0.0,
            ..no_stop()
        };
        let m = gbt_train(&t, &cfg, 3).unwrap();
        let before = log_loss(&m.predict_proba_rounds(&t, 0).unwrap(), &t.labels);
        let after = log_loss(&m.predict_proba(&t).unwrap(), &t.labels);
        assert!(after < before);
        match m.trees[0][0].nodes[0] {
            Node::Split { feature, threshold, .. } => assert_eq!((feature, threshold), (0, 9.5)),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn loss_non_increasing_and_deterministic() {
        let xs: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64).collect();
        let ys: Vec<usize> = xs.iter().map(|&x| usize::from((x as usize / 7) % 2 == 0)).collect();
        let t = encode_features(&dataset(&xs, &ys), false);
        let cfg = GbtConfig {
            rounds: 30,
            ..no_stop()
        };
        let m = gbt_train(&t, &cfg, 9).unwrap();
        assert_eq!(m, gbt_train(&t, &cfg, 9).unwrap());
        let mut prev = f64::INFINITY;
        for r in 0..=m.n_rounds() {
            let l = log_loss(&m.predict_proba_rounds(&t, r).unwrap(), &t.labels);
            assert!(l <= prev + 1e-9, "round {r}: {l} > {prev}");
            prev = l;
        }
        assert!(m.trees.iter().flatten().all(|t| t.depth() <= 2));
    }

    #[test]
    fn best_split_matches_hand_gain() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let g = [-1.0, -1.0, 1.0, 1.0];
        let h = [0.25; 4];
        let cfg = GbtConfig {
            gamma: 0.0,
            min_child_weight: 0.0,
            ..GbtConfig::default()
        };
        let c = best_split_1d(&x, &g, &h, &cfg).unwrap();
        assert_eq!(c.threshold, 2.5);
        // 0.5 * (4/1.5 + 4/1.5 - 0/2)
        assert!((c.gain - 8.0 / 3.0).abs() < 1e-12);
    }
}
