//! Writing an [`ExperimentReport`] as delimited tables, JSON, plot data,
//! optional SVG charts and a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::artifacts::{ensure_dir, write_json};
use super::pipeline::{ExperimentReport, SegmentRow, TotalsRow, WeightCurve, MA};
use crate::data::fmt_f64;
use crate::error::{Error, Result};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// `(+1.23%)`, the bracketed gain of averaging over a model.
pub fn bracketed_gain(pct: Option<f64>) -> String {
    pct.map(|g| format!("({g:+.2}%)")).unwrap_or_default()
}

fn totals_csv(rows: &[TotalsRow], with_gain: bool) -> Result<String> {
    let mut header = strings(&["model", "n_obs", "loglik", "per_obs"]);
    if with_gain {
        header.push("ma_gain".into());
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.model.clone(),
                r.n_obs.to_string(),
                fmt_f64(r.loglik),
                fmt_f64(r.per_obs),
            ];
            if with_gain {
                v.push(bracketed_gain(r.ma_gain_pct));
            }
            v
        })
        .collect();
    csv_text(&header, &body)
}

fn segments_csv(rows: &[SegmentRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.segment.to_string(),
                r.model.clone(),
                r.n_obs.to_string(),
                fmt_f64(r.mean_ll),
            ]
        })
        .collect();
    csv_text(&strings(&["segment", "model", "n_obs", "mean_ll"]), &body)
}

fn weight_curve_csv(c: &WeightCurve) -> Result<String> {
    let mut header = vec!["distance_km".to_string()];
    header.extend(c.models.iter().cloned());
    header.extend(c.models.iter().map(|m| format!("{m}_min")));
    header.extend(c.models.iter().map(|m| format!("{m}_max")));
    let body: Vec<Vec<String>> = (0..c.distance.len())
        .map(|p| {
            let mut v = vec![fmt_f64(c.distance[p])];
            v.extend(c.mean[p].iter().chain(&c.min[p]).chain(&c.max[p]).map(|&x| fmt_f64(x)));
            v
        })
        .collect();
    csv_text(&header, &body)
}

const PALETTE: [&str; 7] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#222222",
];

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    log_x: bool,
    series: Vec<(String, Vec<(f64, f64)>)>,
}

impl Chart {
    fn svg(&self) -> String {
        let (w, h, l, r, t, b) = (720.0, 420.0, 70.0, 150.0, 40.0, 50.0);
        let tx = |x: f64| if self.log_x { x.ln() } else { x };
        let pts = self
            .series
            .iter()
            .flat_map(|(_, p)| p.iter())
            .filter(|(_, y)| y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(tx(x));
            x1 = x1.max(tx(x));
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(x1 > x0) {
            x1 = x0 + 1.0;
        }
        if !(y1 > y0) {
            y1 = y0 + 1.0;
        }
        let px = |x: f64| l + (tx(x) - x0) / (x1 - x0) * (w - l - r);
        let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" font-size="15">{}</text>"#, l, self.title);
        let _ = writeln!(
            s,
            r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#,
            h - b,
            w - r,
            h - b,
            h - b
        );
        for k in 0..=4 {
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let xv = if self.log_x { fx.exp() } else { fx };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
                l - 6.0,
                py(fy) + 4.0,
                fy
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.2}</text>"#,
                l + (fx - x0) / (x1 - x0) * (w - l - r),
                h - b + 16.0,
                xv
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (l + w - r) / 2.0,
            h - 10.0,
            self.x_label
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
            (t + h - b) / 2.0,
            (t + h - b) / 2.0,
            self.y_label
        );
        for (k, (name, p)) in self.series.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let path: Vec<String> = p
                .iter()
                .filter(|(_, y)| y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            let ly = t + 16.0 * k as f64 + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
                w - r + 10.0,
                w - r + 30.0,
                w - r + 36.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn segment_chart(title: &str, rows: &[SegmentRow], models: &[String]) -> Chart {
    Chart {
        title: title.into(),
        x_label: "distance segment".into(),
        y_label: "mean log-likelihood per observation".into(),
        log_x: false,
        series: models
            .iter()
            .map(|m| {
                let pts = rows
                    .iter()
                    .filter(|r| &r.model == m)
                    .map(|r| (r.segment as f64, r.mean_ll))
                    .collect();
                (m.clone(), pts)
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config_hash: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    /// SHA-256 of every other file written.
    files: BTreeMap<String, String>,
}

/// Writes every report file into `out_dir`, returning the file names.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path, svg: bool) -> Result<Vec<String>> {
    ensure_dir(out_dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    let mut put = |name: &str, text: String| files.push((name.to_string(), text));

    let counts: Vec<Vec<String>> = report
        .split_counts
        .iter()
        .map(|c| {
            vec![
                c.segment.to_string(),
                fmt_f64(c.lower_km),
                c.upper_km.map(fmt_f64).unwrap_or_default(),
                c.sub_train.to_string(),
                c.ma_only.to_string(),
                c.validation.to_string(),
                c.excluded.to_string(),
            ]
        })
        .collect();
    put(
        "split_counts.csv",
        csv_text(
            &strings(&[
                "segment",
                "lower_km",
                "upper_km",
                "sub_train",
                "ma_only",
                "validation",
                "excluded",
            ]),
            &counts,
        )?,
    );
    put("totals_estimation.csv", totals_csv(&report.estimation, false)?);
    put("totals_ma_train.csv", totals_csv(&report.ma_train, true)?);
    put("totals_validation.csv", totals_csv(&report.validation, true)?);
    put("outer_segments.csv", totals_csv(&report.outer, true)?);
    put("segments_ma_train.csv", segments_csv(&report.segments_ma_train)?);
    put("segments_validation.csv", segments_csv(&report.segments_validation)?);
    put("totals_estimation.json", to_json(&report.estimation)?);
    put("totals_ma_train.json", to_json(&report.ma_train)?);
    put("totals_validation.json", to_json(&report.validation)?);
    put("report.json", to_json(report)?);
    if let Some(c) = &report.weight_curve {
        put("weight_curve.csv", weight_curve_csv(c)?);
    }
    if svg {
        let mut models = report.models.clone();
        models.push(MA.into());
        put(
            "segments_validation.svg",
            segment_chart(
                "Validation log-likelihood by segment",
                &report.segments_validation,
                &models,
            )
            .svg(),
        );
        put(
            "segments_ma_train.svg",
            segment_chart(
                "Estimation log-likelihood by segment",
                &report.segments_ma_train,
                &models,
            )
            .svg(),
        );
        if let Some(c) = &report.weight_curve {
            let chart = Chart {
                title: "Mean gate weights by trip distance".into(),
                x_label: "distance (km, log scale)".into(),
                y_label: "weight".into(),
                log_x: true,
                series: c
                    .models
                    .iter()
                    .enumerate()
                    .map(|(m, name)| {
                        (
                            name.clone(),
                            c.distance.iter().zip(&c.mean).map(|(&d, w)| (d, w[m])).collect(),
                        )
                    })
                    .collect(),
            };
            put("weight_curve.svg", chart.svg());
        }
    }

    let mut hashes = BTreeMap::new();
    for (name, text) in &files {
        write_text(&out_dir.join(name), text)?;
        hashes.insert(name.clone(), hex::encode(Sha256::digest(text.as_bytes())));
    }
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest {
            name: &report.name,
            config_hash: &report.config_hash,
            seeds: &report.seeds,
            files: hashes,
        },
    )?;
    let mut names: Vec<String> = files.into_iter().map(|(n, _)| n).collect();
    names.push("manifest.json".into());
    Ok(names)
}
