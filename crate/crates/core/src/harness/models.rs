//! Fitting and predicting the named sub-models of a run.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::choice::{estimate, LogitFit, LogitKind, NestSpec, UtilitySpec};
use crate::data::ChoiceDataset;
use crate::dft::{estimate_dft, DftFit};
use crate::error::{Error, Result};
use crate::ml::{GbtEnsemble, MlpEnsemble};
use crate::par::Exec;
use crate::table::ProbTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Mnl(LogitFit),
    Nl(LogitFit),
    Dft(DftFit),
    Mlp(MlpEnsemble),
    Gbt(GbtEnsemble),
}

impl FittedModel {
    pub fn name(&self) -> &'static str {
        match self {
            FittedModel::Mnl(_) => "mnl",
            FittedModel::Nl(_) => "nl",
            FittedModel::Dft(_) => "dft",
            FittedModel::Mlp(_) => "mlp",
            FittedModel::Gbt(_) => "gbt",
        }
    }

    pub fn predict(&self, ds: &ChoiceDataset, exec: Exec) -> Result<ProbTable> {
        match self {
            FittedModel::Mnl(f) | FittedModel::Nl(f) => Ok(f.predict(ds)),
            FittedModel::Dft(f) => Ok(f.predict(ds, exec)),
            FittedModel::Mlp(e) => e.predict(ds, exec),
            FittedModel::Gbt(e) => e.predict(ds, exec),
        }
    }

    /// One-line summary for logs.
    pub fn summary(&self) -> String {
        match self {
            FittedModel::Mnl(f) | FittedModel::Nl(f) => format!(
                "{}: LL {:.2}, converged {}, {} iterations, |g| {:.2e}",
                self.name(),
                f.loglik,
                f.converged,
                f.iterations,
                f.gradient_norm
            ),
            FittedModel::Dft(f) => format!(
                "dft: simulated LL {:.2}, converged {}, {} iterations, |g| {:.2e}",
                f.loglik, f.converged, f.iterations, f.gradient_norm
            ),
            FittedModel::Mlp(e) => format!("mlp: {} repetitions", e.models.len()),
            FittedModel::Gbt(e) => format!("gbt: {} repetitions", e.models.len()),
        }
    }
}

fn fit_mnl(ds: &ChoiceDataset, cfg: &RunConfig, exec: Exec) -> Result<LogitFit> {
    let spec = UtilitySpec::resolve(&cfg.mnl.spec, ds)?;
    estimate(ds, &spec, &LogitKind::Mnl, &cfg.mnl.optim, cfg.stage_seed("mnl"), exec)
}

/// Fits model `name` on `ds` (the sub-model training rows).
pub fn fit_model(name: &str, ds: &ChoiceDataset, cfg: &RunConfig, exec: Exec) -> Result<FittedModel> {
    let fitted = match name {
        "mnl" => FittedModel::Mnl(fit_mnl(ds, cfg, exec)?),
        "nl" => {
            let spec = UtilitySpec::resolve(&cfg.nl.spec, ds)?;
            let groups = NestSpec::groups_from_names(&cfg.nl.nests, ds)?;
            let kind = LogitKind::Nl(groups);
            FittedModel::Nl(estimate(ds, &spec, &kind, &cfg.nl.optim, cfg.stage_seed("nl"), exec)?)
        }
        "dft" => {
            let spec = UtilitySpec::resolve(&cfg.dft.spec, ds)?;
            let warm = if cfg.dft.warm_start {
                let mnl_spec = UtilitySpec::resolve(&cfg.mnl.spec, ds)?;
                if mnl_spec == spec {
                    Some(fit_mnl(ds, cfg, exec)?.theta)
                } else {
                    log::warn!("dft warm start skipped: its utility specification differs from the mnl block");
                    None
                }
            } else {
                None
            };
            FittedModel::Dft(estimate_dft(
                ds,
                &spec,
                &cfg.dft,
                warm.as_deref(),
                cfg.stage_seed("dft"),
                exec,
            )?)
        }
        "mlp" => FittedModel::Mlp(MlpEnsemble::fit(ds, &cfg.mlp, cfg.stage_seed("mlp"), exec)?),
        "gbt" => FittedModel::Gbt(GbtEnsemble::fit(ds, &cfg.gbt, cfg.stage_seed("gbt"), exec)?),
        other => return Err(Error::MissingModel(other.to_string())),
    };
    if let FittedModel::Mnl(f) | FittedModel::Nl(f) = &fitted {
        if !f.loglik.is_finite() {
            return Err(Error::Training(format!("{name} log-likelihood is not finite")));
        }
        if !f.converged {
            log::warn!(
                "{name} stopped before meeting the gradient tolerance (|g| = {:.3e})",
                f.gradient_norm
            );
        }
    }
    if let FittedModel::Dft(f) = &fitted {
        if !f.loglik.is_finite() {
            return Err(Error::Training("dft log-likelihood is not finite".into()));
        }
        if !f.converged {
            log::warn!(
                "dft stopped before meeting the gradient tolerance (|g| = {:.3e})",
                f.gradient_norm
            );
        }
    }
    Ok(fitted)
}
