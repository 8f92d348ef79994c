//! Seeded synthetic mode-choice data whose behavioural rules switch with
//! trip distance.
//!
//! Four modes (walk, cycle, pt, car) with in-vehicle time, out-of-vehicle
//! time and cost that scale with distance, and two binary person
//! characteristics (car ownership, licence). Each distance band draws its
//! choices from its own process: a plain MNL, an MNL with a nonlinear
//! car-ownership x licence interaction, or a nested logit.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::choice::{mnl_prob, nl_prob, NestSpec};
use crate::data::{ChoiceDataset, Observation, DEFAULT_LOG_DELTA};
use crate::error::{Error, Result};
use crate::seed;
use crate::table::ProbTable;

pub const ALTS: [&str; 4] = ["walk", "cycle", "pt", "car"];
pub const ATTRS: [&str; 3] = ["ivt", "ovt", "cost"];
pub const SOCIO: [&str; 2] = ["car_own", "licence"];
const CAR: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimeKind {
    Mnl,
    /// Adds `+kappa` to car utility when car ownership and licence agree and
    /// `-kappa` when they differ.
    Interaction {
        kappa: f64,
    },
    /// Two-level nested logit over named groups.
    Nested {
        nests: Vec<Vec<String>>,
        lambda: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    /// Exclusive upper distance bound in km; `None` for the last band.
    pub upper_km: Option<f64>,
    #[serde(flatten)]
    pub kind: RegimeKind,
}

/// Generic utility coefficients shared by every regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coefficients {
    /// Per mode, the car constant is the reference and should be 0.
    pub asc: Vec<f64>,
    pub ivt: f64,
    pub ovt: f64,
    pub cost: f64,
    /// Car-utility shifts for car ownership and licence.
    pub car_own: f64,
    pub licence: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            asc: vec![1.0, -0.8, 0.2, 0.0],
            ivt: -0.05,
            ovt: -0.08,
            cost: -0.3,
            car_own: 0.8,
            licence: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_obs: usize,
    pub trips_per_person: usize,
    /// Log-normal trip distance: `ln d ~ N(distance_log_mean, distance_log_sd^2)`.
    pub distance_log_mean: f64,
    pub distance_log_sd: f64,
    pub min_distance_km: f64,
    pub car_own_rate: f64,
    pub licence_rate: f64,
    /// Walking is unavailable above this distance.
    pub walk_max_km: f64,
    /// Multiplies every utility; large values make choices deterministic.
    pub utility_scale: f64,
    /// Log-sd of the multiplicative noise on travel times.
    pub time_noise: f64,
    pub coefficients: Coefficients,
    /// Bands in increasing order of `upper_km`; the last is unbounded.
    pub regimes: Vec<Regime>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_obs: 20_000,
            trips_per_person: 4,
            distance_log_mean: 4.5f64.ln(),
            distance_log_sd: 1.0,
            min_distance_km: 0.05,
            car_own_rate: 0.6,
            licence_rate: 0.7,
            walk_max_km: 15.0,
            utility_scale: 1.0,
            time_noise: 0.15,
            coefficients: Coefficients::default(),
            regimes: vec![
                Regime {
                    upper_km: Some(1.5),
                    kind: RegimeKind::Nested {
                        nests: vec![vec!["walk".into(), "cycle".into()], vec!["pt".into(), "car".into()]],
                        lambda: vec![0.5, 1.0],
                    },
                },
                Regime {
                    upper_km: Some(12.0),
                    kind: RegimeKind::Interaction { kappa: 1.5 },
                },
                Regime {
                    upper_km: None,
                    kind: RegimeKind::Mnl,
                },
            ],
            seed: 20_240_601,
        }
    }
}

impl SyntheticConfig {
    /// A single MNL band covering all distances.
    pub fn single_mnl(n_obs: usize, seed: u64) -> Self {
        SyntheticConfig {
            n_obs,
            seed,
            regimes: vec![Regime {
                upper_km: None,
                kind: RegimeKind::Mnl,
            }],
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic data: {m}")));
        if self.n_obs == 0 || self.trips_per_person == 0 {
            return bad("n_obs and trips_per_person must be positive".into());
        }
        if !(self.distance_log_sd > 0.0) || !self.distance_log_mean.is_finite() || !(self.min_distance_km > 0.0) {
            return bad("distance distribution needs finite log-mean, positive log-sd and minimum".into());
        }
        for r in [self.car_own_rate, self.licence_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("rate {r} outside [0, 1]"));
            }
        }
        let c = &self.coefficients;
        if c.asc.len() != ALTS.len() {
            return bad(format!("need {} constants, got {}", ALTS.len(), c.asc.len()));
        }
        if c.asc
            .iter()
            .chain([&c.ivt, &c.ovt, &c.cost, &c.car_own, &c.licence])
            .any(|v| !v.is_finite())
            || !self.utility_scale.is_finite()
        {
            return bad("coefficients must be finite".into());
        }
        if self.regimes.is_empty() {
            return bad("at least one regime is required".into());
        }
        let mut prev = 0.0;
        for (k, r) in self.regimes.iter().enumerate() {
            let last = k + 1 == self.regimes.len();
            match (r.upper_km, last) {
                (None, true) => {}
                (Some(u), false) if u > prev => prev = u,
                _ => return bad("regime bands must increase and only the last may be unbounded".into()),
            }
            match &r.kind {
                RegimeKind::Interaction { kappa } if !kappa.is_finite() => return bad("kappa must be finite".into()),
                RegimeKind::Nested { nests, lambda } => {
                    if nests.len() != lambda.len() {
                        return bad("one lambda per nest".into());
                    }
                    self.nest_spec(nests, lambda)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn nest_spec(&self, nests: &[Vec<String>], lambda: &[f64]) -> Result<NestSpec> {
        let groups = nests
            .iter()
            .map(|g| {
                g.iter()
                    .map(|n| {
                        ALTS.iter()
                            .position(|a| a == n)
                            .ok_or_else(|| Error::Config(format!("unknown mode `{n}` in nest")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        NestSpec::new(groups, lambda.to_vec(), ALTS.len())
    }

    pub fn regime_of(&self, distance: f64) -> usize {
        self.regimes
            .iter()
            .position(|r| r.upper_km.is_none_or(|u| distance < u))
            .unwrap_or(self.regimes.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: ChoiceDataset,
    /// Data-generating choice probabilities.
    pub true_probs: ProbTable,
    /// Index into `SyntheticConfig::regimes` per observation.
    pub regime: Vec<usize>,
}

/// Systematic utilities of the base specification (no regime effects).
pub fn base_utility(c: &Coefficients, o: &Observation) -> Vec<f64> {
    (0..ALTS.len())
        .map(|j| {
            let x = &o.attrs[j * 3..j * 3 + 3];
            let mut v = c.asc[j] + c.ivt * x[0] + c.ovt * x[1] + c.cost * x[2];
            if j == CAR {
                v += c.car_own * o.socio[0] + c.licence * o.socio[1];
            }
            v
        })
        .collect()
}

fn true_prob(cfg: &SyntheticConfig, regime: &Regime, o: &Observation) -> Result<Vec<f64>> {
    let mut v = base_utility(&cfg.coefficients, o);
    let nests = match &regime.kind {
        RegimeKind::Mnl => None,
        RegimeKind::Interaction { kappa } => {
            let agree = (o.socio[0] > 0.5) == (o.socio[1] > 0.5);
            v[CAR] += if agree { *kappa } else { -kappa };
            None
        }
        RegimeKind::Nested { nests, lambda } => Some(cfg.nest_spec(nests, lambda)?),
    };
    v.iter_mut().for_each(|x| *x *= cfg.utility_scale);
    match nests {
        None => Ok(mnl_prob(&v, &o.avail)),
        Some(n) => nl_prob(&v, &n, &o.avail),
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, "synthetic", 0));
    let dist = LogNormal::new(cfg.distance_log_mean, cfg.distance_log_sd).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.time_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut observations = Vec::with_capacity(cfg.n_obs);
    let mut probs = Vec::with_capacity(cfg.n_obs * ALTS.len());
    let mut regime = Vec::with_capacity(cfg.n_obs);
    let mut socio = vec![0.0; 2];
    for i in 0..cfg.n_obs {
        if i % cfg.trips_per_person == 0 {
            socio = vec![
                f64::from(u8::from(rng.random_bool(cfg.car_own_rate))),
                f64::from(u8::from(rng.random_bool(cfg.licence_rate))),
            ];
        }
        let d: f64 = dist.sample(&mut rng).max(cfg.min_distance_km);
        let j: Vec<f64> = (0..4).map(|_| noise.sample(&mut rng).exp()).collect();
        // minutes and currency units
        let attrs = vec![
            60.0 * d / 5.0 * j[0],
            0.0,
            0.0,
            60.0 * d / 15.0 * j[1],
            2.0,
            0.0,
            60.0 * d / 25.0 * j[2] + 2.0,
            rng.random_range(5.0..15.0),
            1.5 + 0.1 * d,
            60.0 * d / 35.0 * j[3] + 2.0,
            rng.random_range(2.0..6.0),
            0.2 * d + rng.random_range(0.0..2.0),
        ];
        let avail = vec![d <= cfg.walk_max_km, true, true, true];
        let mut o = Observation {
            obs_id: i as u64,
            person_id: (i / cfg.trips_per_person) as u64,
            chosen: 0,
            distance: d,
            avail,
            attrs,
            socio: socio.clone(),
        };
        let r = cfg.regime_of(d);
        let p = true_prob(cfg, &cfg.regimes[r], &o)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = (0..p.len()).rev().find(|&j| o.avail[j] && p[j] > 0.0).unwrap_or(CAR);
        o.chosen = last;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc && o.avail[j] && *pj > 0.0 {
                o.chosen = j;
                break;
            }
        }
        probs.extend(&p);
        regime.push(r);
        observations.push(o);
    }
    let dataset = ChoiceDataset::new(
        ALTS.iter().map(|s| s.to_string()).collect(),
        ATTRS.iter().map(|s| s.to_string()).collect(),
        SOCIO.iter().map(|s| s.to_string()).collect(),
        DEFAULT_LOG_DELTA,
        observations,
    )?;
    Ok(SyntheticData {
        dataset,
        true_probs: ProbTable::new(ALTS.len(), probs)?,
        regime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SyntheticConfig {
            n_obs: 500,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        a.dataset.validate().unwrap();
        assert!(a.true_probs.max_row_error() < 1e-12);
        assert!(a.regime.contains(&0) && a.regime.contains(&1) && a.regime.contains(&2));
    }

    #[test]
    fn huge_scale_picks_argmax() {
        let cfg = SyntheticConfig {
            utility_scale: 1e6,
            ..SyntheticConfig::single_mnl(300, 3)
        };
        let s = generate_synthetic(&cfg).unwrap();
        for o in &s.dataset.observations {
            let v = base_utility(&cfg.coefficients, o);
            let best = (0..4)
                .filter(|&j| o.avail[j])
                .max_by(|&a, &b| v[a].total_cmp(&v[b]))
                .unwrap();
            assert_eq!(o.chosen, best);
        }
    }

    #[test]
    fn band_lookup() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.regime_of(1.0), 0);
        assert_eq!(cfg.regime_of(1.5), 1);
        assert_eq!(cfg.regime_of(12.0), 2);
    }
}
