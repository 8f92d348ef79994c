use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distmix::harness::artifacts as art;
use distmix::harness::pipeline::{
    compute_split, evaluate, fit_gate, fit_models, load_data, make_panel, FitSummary, LoadedData,
};
use distmix::harness::{emit_report, run_experiment, RunConfig};
use distmix::{Error, Exec};

/// Distance-conditioned model averaging for discrete choice.
///
/// Stages read and write artifacts in the `--out` directory, so
/// `synth, split, fit, panel, fit-ma, eval, report` run in sequence are
/// equivalent to `run`.
#[derive(Parser)]
#[command(name = "distmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated sub-models, e.g. `nl,dft,mlp,gbt`.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the dataset.
    Synth,
    /// Assign distance segments and roles.
    Split,
    /// Fit sub-models on the training rows.
    Fit,
    /// Predict every observation with the fitted sub-models.
    Panel,
    /// Train the averaging gate on the panel.
    FitMa,
    /// Evaluate sub-models and the average.
    Eval,
    /// Write tables, plot data and charts.
    Report,
    /// All of the above.
    Run,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Split => "split",
            Command::Fit => "fit",
            Command::Panel => "panel",
            Command::FitMa => "fit-ma",
            Command::Eval => "eval",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Schema(_) | Error::Row { .. } | Error::DegenerateScheme(_) | Error::Shape(_) | Error::Csv(_) => 3,
        Error::Training(_) | Error::Numerical(_) => 4,
        Error::Io { .. } | Error::Json(_) | Error::MissingModel(_) => 5,
        Error::Stage { .. } => unreachable!("root() strips stage tags"),
    }
}

fn load_config(c: &Common) -> distmix::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.models {
        cfg.models = m
            .iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_or_load(cfg: &RunConfig, out: &Path) -> distmix::Result<LoadedData> {
    if art::data_path(out).exists() {
        art::read_data(out)
    } else {
        let data = load_data(cfg)?;
        art::write_data(out, &data)?;
        Ok(data)
    }
}

fn execute(cmd: &Command, c: &Common) -> distmix::Result<()> {
    let cfg = load_config(c)?;
    let exec = if c.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let out = c.out.as_path();
    match cmd {
        Command::Synth => {
            let data = load_data(&cfg)?;
            art::write_data(out, &data)?;
            log::info!(
                "wrote {} observations to {}",
                data.dataset.n_obs(),
                art::data_path(out).display()
            );
        }
        Command::Split => {
            let data = dataset_or_load(&cfg, out)?;
            let (_, split) = compute_split(&cfg, &data.dataset)?;
            art::write_split(out, &split)?;
        }
        Command::Fit => {
            let data = art::read_data(out)?;
            let split = art::read_split(out)?;
            for f in fit_models(&cfg, &data.dataset, &split, &cfg.models, exec)? {
                art::write_model(out, &f)?;
            }
        }
        Command::Panel => {
            let data = art::read_data(out)?;
            let split = art::read_split(out)?;
            let fits = cfg
                .models
                .iter()
                .map(|m| art::read_model(out, m))
                .collect::<distmix::Result<Vec<_>>>()?;
            let panel = make_panel(&data.dataset, &split, &fits, exec)?;
            art::write_panel_file(out, &panel)?;
        }
        Command::FitMa => {
            let panel = art::read_panel_file(out)?;
            let ens = fit_gate(&cfg, &panel, exec)?;
            art::write_gate(out, &ens)?;
        }
        Command::Eval => {
            let panel = art::read_panel_file(out)?;
            let ens = art::read_gate(out)?;
            let fits = panel
                .model_names
                .iter()
                .map(|m| art::read_model(out, m).map(|f| FitSummary::of(&f)))
                .collect::<distmix::Result<Vec<_>>>()?;
            let report = evaluate(&cfg, &panel, &ens, fits)?;
            art::write_evaluation(out, &report)?;
            print_summary(&report);
        }
        Command::Report => {
            let report = art::read_evaluation(out)?;
            let files = emit_report(&report, &out.join("report"), cfg.report.svg)?;
            log::info!("wrote {} report files", files.len());
        }
        Command::Run => {
            let exp = run_experiment(&cfg, Some(out), exec)?;
            print_summary(&exp.report);
        }
    }
    Ok(())
}

fn print_summary(r: &distmix::harness::ExperimentReport) {
    println!(
        "{:<6} {:>14} {:>14} {:>10}",
        "model", "ma_train LL", "validation LL", "MA gain"
    );
    for (t, v) in r.ma_train.iter().zip(&r.validation) {
        let gain = v.ma_gain_pct.map(|g| format!("{g:+.2}%")).unwrap_or_default();
        println!("{:<6} {:>14.2} {:>14.2} {:>10}", t.model, t.loglik, v.loglik, gain);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli.command, &cli.common).map_err(|e| e.at_stage(cli.command.stage())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
