//! On-disk layout of a run directory:
//!
//! ```text
//! data.csv            the dataset used
//! schema.json         how to read data.csv back
//! true_probs.csv      generating probabilities (synthetic data only)
//! split.csv           obs_id, segment, role (seed in the header)
//! models/<name>.json  fitted sub-models
//! panel.csv           frozen sub-model probabilities
//! gate.json           retained gates
//! evaluation.json     the evaluated report, before emission
//! report/             tables, plot data, manifest
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::models::FittedModel;
use super::pipeline::{ExperimentReport, LoadedData};
use crate::averaging::{read_panel, write_panel, MAEnsemble, ProbabilityPanel};
use crate::data::{fmt_f64, load_dataset, write_dataset, DataSplit, Schema};
use crate::error::{Error, Result};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn data_path(dir: &Path) -> PathBuf {
    dir.join("data.csv")
}

pub fn schema_path(dir: &Path) -> PathBuf {
    dir.join("schema.json")
}

pub fn split_path(dir: &Path) -> PathBuf {
    dir.join("split.csv")
}

pub fn model_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("models").join(format!("{name}.json"))
}

pub fn panel_path(dir: &Path) -> PathBuf {
    dir.join("panel.csv")
}

pub fn gate_path(dir: &Path) -> PathBuf {
    dir.join("gate.json")
}

pub fn evaluation_path(dir: &Path) -> PathBuf {
    dir.join("evaluation.json")
}

pub fn write_data(dir: &Path, data: &LoadedData) -> Result<()> {
    ensure_dir(dir)?;
    write_dataset(&data.dataset, data_path(dir))?;
    write_json(&schema_path(dir), &Schema::for_dataset(&data.dataset))?;
    if let Some(p) = &data.true_probs {
        let path = dir.join("true_probs.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = vec!["obs_id".to_string()];
        header.extend(data.dataset.alt_names.iter().map(|a| format!("P_{a}")));
        w.write_record(&header)?;
        for (i, o) in data.dataset.observations.iter().enumerate() {
            let mut rec = vec![o.obs_id.to_string()];
            rec.extend(p.row(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The dataset written by [`write_data`] (without generating probabilities).
pub fn read_data(dir: &Path) -> Result<LoadedData> {
    let schema: Schema = read_json(&schema_path(dir))?;
    Ok(LoadedData {
        dataset: load_dataset(data_path(dir), &schema)?,
        true_probs: None,
    })
}

pub fn write_split(dir: &Path, split: &DataSplit) -> Result<()> {
    ensure_dir(dir)?;
    let path = split_path(dir);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    split.write_manifest(&mut w)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: &Path) -> Result<DataSplit> {
    let path = split_path(dir);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    DataSplit::read_manifest(BufReader::new(file))
}

pub fn write_model(dir: &Path, model: &FittedModel) -> Result<()> {
    write_json(&model_path(dir, model.name()), model)
}

pub fn read_model(dir: &Path, name: &str) -> Result<FittedModel> {
    let path = model_path(dir, name);
    if !path.exists() {
        return Err(Error::MissingModel(format!("{name} (no {})", path.display())));
    }
    read_json(&path)
}

pub fn write_panel_file(dir: &Path, panel: &ProbabilityPanel) -> Result<()> {
    ensure_dir(dir)?;
    write_panel(panel, panel_path(dir))
}

pub fn read_panel_file(dir: &Path) -> Result<ProbabilityPanel> {
    read_panel(panel_path(dir))
}

pub fn write_gate(dir: &Path, ens: &MAEnsemble) -> Result<()> {
    write_json(&gate_path(dir), ens)
}

pub fn read_gate(dir: &Path) -> Result<MAEnsemble> {
    read_json(&gate_path(dir))
}

pub fn write_evaluation(dir: &Path, report: &ExperimentReport) -> Result<()> {
    write_json(&evaluation_path(dir), report)
}

pub fn read_evaluation(dir: &Path) -> Result<ExperimentReport> {
    read_json(&evaluation_path(dir))
}
