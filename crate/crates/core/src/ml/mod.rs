//! Data-driven sub-models: a softmax MLP and Newton-boosted trees, each
//! trained several times from independent seeds with the predictions
//! averaged in probability space.

pub mod features;
pub mod gbt;
pub mod mlp;

use serde::{Deserialize, Serialize};

pub use features::{decode_attrs, encode_features, FeatureLayout, FeatureTable};
pub use gbt::{gbt_train, GbtConfig, GbtModel};
pub use mlp::{mlp_train, MlpConfig, MlpModel};

use crate::data::ChoiceDataset;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::seed;
use crate::table::ProbTable;

/// Cellwise arithmetic mean of equally shaped tables, renormalized per row.
pub fn ensemble_average(tables: &[ProbTable]) -> Result<ProbTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Shape("no tables to average".into()))?;
    if let Some(t) = tables
        .iter()
        .find(|t| t.n_alts != first.n_alts || t.data.len() != first.data.len())
    {
        return Err(Error::Shape(format!(
            "cannot average a {}x{} table with a {}x{} table",
            t.n_rows(),
            t.n_alts,
            first.n_rows(),
            first.n_alts
        )));
    }
    let k = tables.len() as f64;
    let mut out = ProbTable::zeros(first.n_rows(), first.n_alts);
    for t in tables {
        out.data.iter_mut().zip(&t.data).for_each(|(o, v)| *o += v);
    }
    for i in 0..out.n_rows() {
        let row = out.row_mut(i);
        row.iter_mut().for_each(|v| *v /= k);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEnsemble {
    pub config: MlpConfig,
    pub seed: u64,
    pub models: Vec<MlpModel>,
}

impl MlpEnsemble {
    pub fn fit(ds: &ChoiceDataset, cfg: &MlpConfig, seed: u64, exec: Exec) -> Result<Self> {
        let table = encode_features(ds, cfg.feed_distance);
        let reps = cfg.repetitions.max(1);
        let models = exec
            .map(reps, |r| mlp_train(&table, cfg, seed::derive(seed, "mlp", r as u64)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpEnsemble {
            config: cfg.clone(),
            seed,
            models,
        })
    }

    pub fn predict(&self, ds: &ChoiceDataset, exec: Exec) -> Result<ProbTable> {
        let table = encode_features(ds, self.config.feed_distance);
        let tables = exec
            .map(self.models.len(), |r| self.models[r].predict_proba(&table))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        ensemble_average(&tables)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtEnsemble {
    pub config: GbtConfig,
    pub seed: u64,
    pub models: Vec<GbtModel>,
}

impl GbtEnsemble {
    pub fn fit(ds: &ChoiceDataset, cfg: &GbtConfig, seed: u64, exec: Exec) -> Result<Self> {
        let table = encode_features(ds, cfg.feed_distance);
        let reps = cfg.repetitions.max(1);
        let models = exec
            .map(reps, |r| gbt_train(&table, cfg, seed::derive(seed, "gbt", r as u64)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(GbtEnsemble {
            config: cfg.clone(),
            seed,
            models,
        })
    }

    pub fn predict(&self, ds: &ChoiceDataset, exec: Exec) -> Result<ProbTable> {
        let table = encode_features(ds, self.config.feed_distance);
        let tables = exec
            .map(self.models.len(), |r| self.models[r].predict_proba(&table))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        ensemble_average(&tables)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_of_two_rows() {
        let a = ProbTable::new(2, vec![0.2, 0.8]).unwrap();
        let b = ProbTable::new(2, vec![0.4, 0.6]).unwrap();
        let m = ensemble_average(&[a.clone(), b]).unwrap();
        assert!((m.row(0)[0] - 0.3).abs() < 1e-15 && (m.row(0)[1] - 0.7).abs() < 1e-15);
        assert_eq!(ensemble_average(&[a.clone(), a.clone()]).unwrap(), a);
    }

    #[test]
    fn shape_mismatch() {
        let a = ProbTable::new(2, vec![0.2, 0.8]).unwrap();
        let b = ProbTable::new(2, vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        assert!(ensemble_average(&[a, b]).is_err());
    }
}
