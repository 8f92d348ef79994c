//! Flat per-observation feature encoding for the data-driven models.
//!
//! Layout, in order: for each alternative its raw attributes followed by
//! their logs (`log(x + delta)`), then the availability flags, then the
//! socio-demographic variables, then (optionally) trip distance.

use serde::{Deserialize, Serialize};

use crate::data::ChoiceDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_alts: usize,
    pub n_attrs: usize,
    pub n_socio: usize,
    pub feed_distance: bool,
    pub log_delta: f64,
    pub names: Vec<String>,
}

impl FeatureLayout {
    pub fn for_dataset(ds: &ChoiceDataset, feed_distance: bool) -> Self {
        let mut names = Vec::new();
        for alt in &ds.alt_names {
            names.extend(ds.attr_names.iter().map(|a| format!("{a}_{alt}")));
            names.extend(ds.attr_names.iter().map(|a| format!("log_{a}_{alt}")));
        }
        names.extend(ds.alt_names.iter().map(|a| format!("avail_{a}")));
        names.extend(ds.socio_names.iter().cloned());
        if feed_distance {
            names.push("distance_km".into());
        }
        FeatureLayout {
            n_alts: ds.n_alts(),
            n_attrs: ds.n_attrs(),
            n_socio: ds.n_socio(),
            feed_distance,
            log_delta: ds.log_delta,
            names,
        }
    }

    pub fn width(&self) -> usize {
        self.n_alts * 2 * self.n_attrs + self.n_alts + self.n_socio + usize::from(self.feed_distance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub layout: FeatureLayout,
    pub n_rows: usize,
    /// Row-major `n_rows x width`.
    pub x: Vec<f64>,
    /// Row-major `n_rows x n_alts`.
    pub avail: Vec<bool>,
    pub labels: Vec<usize>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn n_alts(&self) -> usize {
        self.layout.n_alts
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn avail_row(&self, i: usize) -> &[bool] {
        let j = self.n_alts();
        &self.avail[i * j..(i + 1) * j]
    }

    /// Rows `idx` as a new table.
    pub fn select(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            layout: self.layout.clone(),
            n_rows: idx.len(),
            x: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            avail: idx.iter().flat_map(|&i| self.avail_row(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Checks a model trained on `layout` can read this table.
    pub fn check_layout(&self, layout: &FeatureLayout) -> Result<()> {
        if self.width() != layout.width() || self.n_alts() != layout.n_alts {
            return Err(Error::Shape(format!(
                "feature width {} ({} alternatives) does not match model width {} ({} alternatives)",
                self.width(),
                self.n_alts(),
                layout.width(),
                layout.n_alts
            )));
        }
        Ok(())
    }
}

pub fn encode_features(ds: &ChoiceDataset, feed_distance: bool) -> FeatureTable {
    let layout = FeatureLayout::for_dataset(ds, feed_distance);
    let (j, a) = (ds.n_alts(), ds.n_attrs());
    let mut x = Vec::with_capacity(ds.n_obs() * layout.width());
    for o in &ds.observations {
        for alt in 0..j {
            let row = &o.attrs[alt * a..(alt + 1) * a];
            x.extend(row);
            x.extend(row.iter().map(|v| (v + ds.log_delta).ln()));
        }
        x.extend(o.avail.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        x.extend(&o.socio);
        if feed_distance {
            x.push(o.distance);
        }
    }
    FeatureTable {
        layout,
        n_rows: ds.n_obs(),
        x,
        avail: ds.observations.iter().flat_map(|o| o.avail.iter().copied()).collect(),
        labels: ds.observations.iter().map(|o| o.chosen).collect(),
    }
}

/// Recovers each row's `J x A` attribute matrix from the raw columns.
pub fn decode_attrs(table: &FeatureTable) -> Vec<Vec<f64>> {
    let l = &table.layout;
    (0..table.n_rows)
        .map(|i| {
            let r = table.row(i);
            (0..l.n_alts)
                .flat_map(|alt| r[alt * 2 * l.n_attrs..alt * 2 * l.n_attrs + l.n_attrs].iter().copied())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, DEFAULT_LOG_DELTA};

    fn ds() -> ChoiceDataset {
        let obs = (0..3)
            .map(|i| Observation {
                obs_id: i,
                person_id: i,
                chosen: 1,
                distance: 1.0 + i as f64,
                avail: vec![true, true, i != 0, true],
                attrs: (0..12).map(|k| (k as f64) * 0.5 + i as f64).collect(),
                socio: vec![1.0, 0.0],
            })
            .collect();
        ChoiceDataset::new(
            vec!["walk".into(), "cycle".into(), "pt".into(), "car".into()],
            vec!["ivt".into(), "ovt".into(), "cost".into()],
            vec!["car_own".into(), "licence".into()],
            DEFAULT_LOG_DELTA,
            obs,
        )
        .unwrap()
    }

    #[test]
    fn width_of_declared_layout() {
        let t = encode_features(&ds(), false);
        assert_eq!(t.width(), 30);
        assert_eq!(t.layout.names.len(), 30);
        assert_eq!(encode_features(&ds(), true).width(), 31);
        assert_eq!(t.row(0)[24 + 2], 0.0);
        assert_eq!(t.row(1)[24 + 2], 1.0);
    }

    #[test]
    fn decode_inverts_encode() {
        let d = ds();
        let t = encode_features(&d, true);
        let back = decode_attrs(&t);
        for (o, a) in d.observations.iter().zip(&back) {
            assert_eq!(&o.attrs, a);
        }
    }
}
