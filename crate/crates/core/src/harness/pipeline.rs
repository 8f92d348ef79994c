//! Split -> fit -> panel -> gate -> evaluate, as library calls. Each stage
//! can also be run on its own from stored artifacts (see the CLI).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig};
use super::models::{fit_model, FittedModel};
use super::synthetic::generate_synthetic;
use crate::averaging::{build_panel, train_gate, GateInputs, MAEnsemble, ProbabilityPanel};
use crate::data::{load_dataset, make_split_with, ChoiceDataset, DataSplit, Role, SegmentScheme};
use crate::error::{Error, Result, StageExt};
use crate::par::Exec;
use crate::table::ProbTable;

/// Name used for the averaged model in reports.
pub const MA: &str = "ma";

pub struct LoadedData {
    pub dataset: ChoiceDataset,
    /// Generating probabilities, for synthetic data.
    pub true_probs: Option<ProbTable>,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let s = generate_synthetic(&cfg.data.synthetic)?;
            Ok(LoadedData {
                dataset: s.dataset,
                true_probs: Some(s.true_probs),
            })
        }
        DataSource::File => {
            let path = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is not set".into()))?;
            Ok(LoadedData {
                dataset: load_dataset(path, &cfg.data.schema)?,
                true_probs: None,
            })
        }
    }
}

pub fn compute_split(cfg: &RunConfig, ds: &ChoiceDataset) -> Result<(SegmentScheme, DataSplit)> {
    let scheme = SegmentScheme::compute(&ds.distances(), cfg.split.segments)?;
    let split = make_split_with(
        ds,
        &scheme,
        cfg.split.holdout_frac,
        cfg.split.person_level,
        cfg.split_seed(),
    )?;
    Ok((scheme, split))
}

/// Fits each named model on the sub-model training rows.
pub fn fit_models(
    cfg: &RunConfig,
    ds: &ChoiceDataset,
    split: &DataSplit,
    names: &[String],
    exec: Exec,
) -> Result<Vec<FittedModel>> {
    split.check_matches(ds)?;
    let train = ds.subset(&split.sub_train());
    if train.n_obs() == 0 {
        return Err(Error::Training("the sub-model training set is empty".into()));
    }
    names
        .iter()
        .map(|name| {
            log::info!("fitting {name} on {} observations", train.n_obs());
            let f = fit_model(name, &train, cfg, exec)?;
            log::info!("{}", f.summary());
            Ok(f)
        })
        .collect()
}

pub fn make_panel(ds: &ChoiceDataset, split: &DataSplit, fits: &[FittedModel], exec: Exec) -> Result<ProbabilityPanel> {
    let tables = fits
        .iter()
        .map(|f| Ok((f.name().to_string(), f.predict(ds, exec)?)))
        .collect::<Result<Vec<_>>>()?;
    build_panel(ds, split, &tables)
}

pub fn fit_gate(cfg: &RunConfig, panel: &ProbabilityPanel, exec: Exec) -> Result<MAEnsemble> {
    let idx = panel.ma_train();
    log::info!(
        "training {} gate restarts on {} observations",
        cfg.gate.restarts,
        idx.len()
    );
    train_gate(panel, &idx, &cfg.gate, cfg.stage_seed("gate"), exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCount {
    pub segment: usize,
    pub lower_km: f64,
    pub upper_km: Option<f64>,
    pub sub_train: usize,
    pub ma_only: usize,
    pub validation: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalsRow {
    pub model: String,
    pub n_obs: usize,
    pub loglik: f64,
    pub per_obs: f64,
    /// `100 (LL_ma - LL_model) / |LL_model|`; positive when averaging is better.
    pub ma_gain_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment: usize,
    pub model: String,
    pub n_obs: usize,
    pub mean_ll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCurve {
    pub models: Vec<String>,
    pub distance: Vec<f64>,
    /// Per grid point, per model: mean, min and max over retained gates.
    pub mean: Vec<Vec<f64>>,
    pub min: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralWeights {
    pub models: Vec<String>,
    /// Mean total gate weight on the structural models, validation rows of
    /// segments 1 and 10.
    pub outer_mean: f64,
    /// Same, validation rows of segments 3-8.
    pub inner_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub restarts: usize,
    pub retained_restarts: Vec<usize>,
    pub retained_loglik: Vec<f64>,
    pub diverged: usize,
    pub train_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub n_obs: usize,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub gradient_norm: Option<f64>,
    /// Log-likelihood reported by the estimator (simulated for DFT).
    pub estimator_loglik: Option<f64>,
    pub parameters: Vec<ParamRow>,
}

impl FitSummary {
    pub fn of(f: &FittedModel) -> Self {
        let base = |n_obs| FitSummary {
            model: f.name().into(),
            n_obs,
            converged: None,
            iterations: None,
            gradient_norm: None,
            estimator_loglik: None,
            parameters: Vec::new(),
        };
        match f {
            FittedModel::Mnl(l) | FittedModel::Nl(l) => {
                let k = l.spec.n_params();
                let mut values: Vec<f64> = l.theta[..k].to_vec();
                values.extend(&l.lambda);
                // nest parameters are estimated on the logit scale
                let mut se = l.std_errors.clone();
                for (g, lam) in l.lambda.iter().enumerate() {
                    se[k + g] *= lam * (1.0 - lam);
                }
                FitSummary {
                    converged: Some(l.converged),
                    iterations: Some(l.iterations),
                    gradient_norm: Some(l.gradient_norm),
                    estimator_loglik: Some(l.loglik),
                    parameters: l
                        .names
                        .iter()
                        .zip(values)
                        .zip(&se)
                        .map(|((n, v), se)| ParamRow {
                            name: n.clone(),
                            value: v,
                            std_error: se.is_finite().then_some(*se),
                        })
                        .collect(),
                    ..base(l.n_obs)
                }
            }
            FittedModel::Dft(d) => FitSummary {
                converged: Some(d.converged),
                iterations: Some(d.iterations),
                gradient_norm: Some(d.gradient_norm),
                estimator_loglik: Some(d.loglik),
                parameters: d
                    .names
                    .iter()
                    .zip(&d.theta)
                    .map(|(n, v)| ParamRow {
                        name: n.clone(),
                        value: *v,
                        std_error: None,
                    })
                    .collect(),
                ..base(d.n_obs)
            },
            FittedModel::Mlp(e) => FitSummary {
                parameters: vec![ParamRow {
                    name: "mean_final_loss".into(),
                    value: e.models.iter().map(|m| m.final_loss).sum::<f64>() / e.models.len() as f64,
                    std_error: None,
                }],
                ..base(0)
            },
            FittedModel::Gbt(e) => FitSummary {
                parameters: vec![ParamRow {
                    name: "mean_rounds".into(),
                    value: e.models.iter().map(|m| m.n_rounds() as f64).sum::<f64>() / e.models.len() as f64,
                    std_error: None,
                }],
                ..base(0)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub models: Vec<String>,
    pub split_counts: Vec<SegmentCount>,
    /// Sub-models on their own training rows.
    pub estimation: Vec<TotalsRow>,
    /// Sub-models and the average on the gate's training rows (segments 2-9).
    pub ma_train: Vec<TotalsRow>,
    /// Sub-models and the average on the validation rows (segments 1-10).
    pub validation: Vec<TotalsRow>,
    /// Validation rows of segments 1 and 10 only.
    pub outer: Vec<TotalsRow>,
    pub segments_ma_train: Vec<SegmentRow>,
    pub segments_validation: Vec<SegmentRow>,
    pub weight_curve: Option<WeightCurve>,
    pub structural_weights: Option<StructuralWeights>,
    pub gate: GateSummary,
    pub fits: Vec<FitSummary>,
}

impl ExperimentReport {
    pub fn totals<'a>(rows: &'a [TotalsRow], model: &str) -> Option<&'a TotalsRow> {
        rows.iter().find(|r| r.model == model)
    }
}

/// Per-row log-probabilities of the chosen alternative: one vector per
/// sub-model, then the average.
fn log_liks(panel: &ProbabilityPanel, ens: &MAEnsemble) -> Vec<Vec<f64>> {
    let n = panel.n_rows();
    let all: Vec<usize> = (0..n).collect();
    let mut out: Vec<Vec<f64>> = (0..panel.n_models())
        .map(|m| all.iter().map(|&i| panel.lik_row(i)[m].ln()).collect())
        .collect();
    let w = ens.weights(panel, &all);
    out.push(
        all.iter()
            .map(|&i| {
                panel
                    .lik_row(i)
                    .iter()
                    .enumerate()
                    .map(|(m, l)| w[(i, m)] * l)
                    .sum::<f64>()
                    .ln()
            })
            .collect(),
    );
    out
}

fn totals(names: &[String], ll: &[Vec<f64>], idx: &[usize], with_ma: bool) -> Vec<TotalsRow> {
    let n = idx.len();
    let sums: Vec<f64> = ll.iter().map(|v| idx.iter().map(|&i| v[i]).sum()).collect();
    let ma = *sums.last().expect("average column");
    let k = if with_ma { names.len() } else { names.len() - 1 };
    (0..k)
        .map(|m| TotalsRow {
            model: names[m].clone(),
            n_obs: n,
            loglik: sums[m],
            per_obs: if n > 0 { sums[m] / n as f64 } else { f64::NAN },
            ma_gain_pct: (with_ma && m + 1 < names.len() && n > 0).then(|| 100.0 * (ma - sums[m]) / sums[m].abs()),
        })
        .collect()
}

/// Mean log-probability per segment and model; empty segments are absent.
pub fn per_segment_ll(names: &[String], ll: &[Vec<f64>], segment: &[usize], idx: &[usize]) -> Vec<SegmentRow> {
    let mut by_seg: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_seg.entry(segment[i]).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (s, members) in by_seg {
        for (m, name) in names.iter().enumerate() {
            rows.push(SegmentRow {
                segment: s,
                model: name.clone(),
                n_obs: members.len(),
                mean_ll: members.iter().map(|&i| ll[m][i]).sum::<f64>() / members.len() as f64,
            });
        }
    }
    rows
}

fn split_counts(panel: &ProbabilityPanel) -> Result<Vec<SegmentCount>> {
    let scheme = SegmentScheme::compute(&panel.distance, 10)?;
    let mut out: Vec<SegmentCount> = (1..=scheme.n_segments())
        .map(|s| SegmentCount {
            segment: s,
            lower_km: if s == 1 { 0.0 } else { scheme.boundaries[s - 2] },
            upper_km: scheme.boundaries.get(s - 1).copied(),
            sub_train: 0,
            ma_only: 0,
            validation: 0,
            excluded: 0,
        })
        .collect();
    for i in 0..panel.n_rows() {
        let c = out
            .get_mut(panel.segment[i].wrapping_sub(1))
            .ok_or_else(|| Error::Shape(format!("segment {} out of range", panel.segment[i])))?;
        match panel.role[i] {
            Role::SubTrain => c.sub_train += 1,
            Role::MaOnly => c.ma_only += 1,
            Role::Validation => c.validation += 1,
            Role::Excluded => c.excluded += 1,
        }
    }
    Ok(out)
}

fn weight_curve(panel: &ProbabilityPanel, ens: &MAEnsemble, points: usize) -> Option<WeightCurve> {
    if ens.config.inputs != GateInputs::Distance || points < 2 || panel.n_rows() == 0 {
        return None;
    }
    let lo = panel.distance.iter().cloned().fold(f64::INFINITY, f64::min).ln();
    let hi = panel.distance.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ln();
    let distance: Vec<f64> = (0..points)
        .map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp())
        .collect();
    let per_gate: Vec<Vec<Vec<f64>>> = ens
        .gates
        .iter()
        .map(|g| distance.iter().map(|&d| g.weights_at(d)).collect())
        .collect();
    let m = ens.n_models();
    let reduce = |f: &dyn Fn(&[f64]) -> f64| -> Vec<Vec<f64>> {
        (0..points)
            .map(|p| {
                (0..m)
                    .map(|k| f(&per_gate.iter().map(|g| g[p][k]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect()
    };
    Some(WeightCurve {
        models: ens.model_names.clone(),
        mean: distance.iter().map(|&d| ens.weights_at(d)).collect(),
        min: reduce(&|v| v.iter().cloned().fold(f64::INFINITY, f64::min)),
        max: reduce(&|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        distance,
    })
}

fn structural_weights(panel: &ProbabilityPanel, ens: &MAEnsemble, structural: &[String]) -> Option<StructuralWeights> {
    let cols: Vec<usize> = (0..panel.n_models())
        .filter(|&m| structural.contains(&panel.model_names[m]))
        .collect();
    if cols.is_empty() {
        return None;
    }
    let mean_weight = |segs: &[usize]| -> f64 {
        let idx: Vec<usize> = panel
            .validation_set()
            .into_iter()
            .filter(|&i| segs.contains(&panel.segment[i]))
            .collect();
        if idx.is_empty() {
            return f64::NAN;
        }
        let w = ens.weights(panel, &idx);
        (0..idx.len())
            .map(|r| cols.iter().map(|&m| w[(r, m)]).sum::<f64>())
            .sum::<f64>()
            / idx.len() as f64
    };
    Some(StructuralWeights {
        models: cols.iter().map(|&m| panel.model_names[m].clone()).collect(),
        outer_mean: mean_weight(&[1, 10]),
        inner_mean: mean_weight(&[3, 4, 5, 6, 7, 8]),
    })
}

/// Builds the report from a panel and a trained gate.
pub fn evaluate(
    cfg: &RunConfig,
    panel: &ProbabilityPanel,
    ens: &MAEnsemble,
    fits: Vec<FitSummary>,
) -> Result<ExperimentReport> {
    if ens.model_names != panel.model_names {
        return Err(Error::Shape("gate and panel disagree on the sub-models".into()));
    }
    let ll = log_liks(panel, ens);
    let mut names = panel.model_names.clone();
    names.push(MA.into());
    let sub_train = panel.indices_where(|r| r == Role::SubTrain);
    let ma_train = panel.ma_train();
    let validation = panel.validation_set();
    let outer: Vec<usize> = validation
        .iter()
        .copied()
        .filter(|&i| panel.segment[i] == 1 || panel.segment[i] == 10)
        .collect();
    let mut seeds = BTreeMap::new();
    seeds.insert("root".to_string(), cfg.seed);
    seeds.insert("split".to_string(), cfg.split_seed());
    for name in ["mnl", "nl", "dft", "mlp", "gbt", "gate"] {
        seeds.insert(name.to_string(), cfg.stage_seed(name));
    }
    seeds.insert("synthetic".to_string(), cfg.data.synthetic.seed);
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds,
        models: panel.model_names.clone(),
        split_counts: split_counts(panel)?,
        estimation: totals(&names, &ll, &sub_train, false),
        ma_train: totals(&names, &ll, &ma_train, true),
        validation: totals(&names, &ll, &validation, true),
        outer: totals(&names, &ll, &outer, true),
        segments_ma_train: per_segment_ll(&names, &ll, &panel.segment, &ma_train),
        segments_validation: per_segment_ll(&names, &ll, &panel.segment, &validation),
        weight_curve: weight_curve(panel, ens, cfg.report.weight_curve_points),
        structural_weights: structural_weights(panel, ens, &cfg.report.structural_models),
        gate: GateSummary {
            restarts: ens.all_loglik.len(),
            retained_restarts: ens.restart_index.clone(),
            retained_loglik: ens.train_loglik.clone(),
            diverged: ens.all_loglik.iter().filter(|l| l.is_none()).count(),
            train_units: ens.n_train_units,
        },
        fits,
    })
}

pub struct Experiment {
    pub data: LoadedData,
    pub scheme: SegmentScheme,
    pub split: DataSplit,
    pub fits: Vec<FittedModel>,
    pub panel: ProbabilityPanel,
    pub ensemble: MAEnsemble,
    pub report: ExperimentReport,
}

/// The full pipeline. With `artifacts`, every stage's output is written as
/// soon as it exists, so a failure leaves the earlier stages on disk.
pub fn run_experiment(cfg: &RunConfig, artifacts: Option<&Path>, exec: Exec) -> Result<Experiment> {
    cfg.validate()?;
    let data = load_data(cfg).stage("data")?;
    let (scheme, split) = compute_split(cfg, &data.dataset).stage("split")?;
    if let Some(dir) = artifacts {
        super::artifacts::write_data(dir, &data).stage("data")?;
        super::artifacts::write_split(dir, &split).stage("split")?;
    }
    let fits = fit_models(cfg, &data.dataset, &split, &cfg.models, exec).stage("fit")?;
    if let Some(dir) = artifacts {
        for f in &fits {
            super::artifacts::write_model(dir, f).stage("fit")?;
        }
    }
    let panel = make_panel(&data.dataset, &split, &fits, exec).stage("panel")?;
    if let Some(dir) = artifacts {
        super::artifacts::write_panel_file(dir, &panel).stage("panel")?;
    }
    let ensemble = fit_gate(cfg, &panel, exec).stage("fit-ma")?;
    if let Some(dir) = artifacts {
        super::artifacts::write_gate(dir, &ensemble).stage("fit-ma")?;
    }
    let report = evaluate(cfg, &panel, &ensemble, fits.iter().map(FitSummary::of).collect()).stage("eval")?;
    if let Some(dir) = artifacts {
        super::artifacts::write_evaluation(dir, &report).stage("eval")?;
        super::report::emit_report(&report, &dir.join("report"), cfg.report.svg).stage("report")?;
    }
    Ok(Experiment {
        data,
        scheme,
        split,
        fits,
        panel,
        ensemble,
        report,
    })
}
