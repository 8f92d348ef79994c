use serde::{Deserialize, Serialize};

use crate::data::ChoiceDataset;
use crate::error::{Error, Result};

/// Row-major table of choice probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub n_alts: usize,
    pub data: Vec<f64>,
}

impl ProbTable {
    pub fn new(n_alts: usize, data: Vec<f64>) -> Result<Self> {
        if n_alts == 0 || data.len() % n_alts != 0 {
            return Err(Error::Shape(format!(
                "{} probabilities do not form rows of {n_alts}",
                data.len()
            )));
        }
        Ok(ProbTable { n_alts, data })
    }

    pub fn zeros(n_rows: usize, n_alts: usize) -> Self {
        ProbTable {
            n_alts,
            data: vec![0.0; n_rows * n_alts],
        }
    }

    pub fn from_rows(n_alts: usize, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != n_alts {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {n_alts}",
                    r.len()
                )));
            }
            data.extend(r);
        }
        Ok(ProbTable { n_alts, data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.n_alts
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_alts..(i + 1) * self.n_alts]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_alts..(i + 1) * self.n_alts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_alts)
    }

    /// Probability of each observation's chosen alternative.
    pub fn chosen_probs(&self, ds: &ChoiceDataset) -> Result<Vec<f64>> {
        if self.n_rows() != ds.n_obs() || self.n_alts != ds.n_alts() {
            return Err(Error::Shape(format!(
                "table is {}x{}, dataset is {}x{}",
                self.n_rows(),
                self.n_alts,
                ds.n_obs(),
                ds.n_alts()
            )));
        }
        Ok(ds
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| self.row(i)[o.chosen])
            .collect())
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
