//! Evaluation over a dataset: per-iteration RMSE curves for each method and
//! quartiles of the same-matrix RMSE ratio against the baseline.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::admm::{ao_admm, SolverConfig};
use crate::error::{Error, Result};
use crate::factormer::{ModelConfig, ModelKind, ModelParams};
use crate::training::{run_model, Sample};

pub const THREADS_ENV: &str = "NMF_THREADS";

/// Worker pool sized by `NMF_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(s) = std::env::var(THREADS_ENV) {
        let n: usize = s
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {s:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// A trained model to evaluate alongside the baseline.
#[derive(Clone, Debug)]
pub struct EvalModel {
    pub name: String,
    pub kind: ModelKind,
    pub params: ModelParams,
    pub config: ModelConfig,
    pub nbr_acc: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCurve {
    pub matrix: String,
    pub rmse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodCurves {
    pub method: String,
    /// Sorted by matrix id.
    pub curves: Vec<MatrixCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub method: String,
    pub iteration: usize,
    pub mean_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuartileRow {
    pub method: String,
    pub iteration: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iterations: usize,
    pub methods: Vec<MethodCurves>,
    pub mean_curves: Vec<CurveRow>,
    pub ratios: Vec<QuartileRow>,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75))
}

fn solve_all(
    samples: &[Sample],
    name: &str,
    f: impl Fn(&Sample) -> Result<Vec<f64>> + Sync,
) -> Result<MethodCurves> {
    let mut curves: Vec<MatrixCurve> = samples
        .par_iter()
        .map(|s| {
            f(s).map(|rmse| MatrixCurve {
                matrix: s.id.clone(),
                rmse,
            })
        })
        .collect::<Result<_>>()?;
    curves.sort_by(|a, b| a.matrix.cmp(&b.matrix));
    Ok(MethodCurves {
        method: name.to_owned(),
        curves,
    })
}

/// Runs the baseline and every model for `iterations` outer iterations on
/// each sample.
pub fn evaluate(
    samples: &[Sample],
    solver: &SolverConfig,
    iterations: usize,
    models: &[EvalModel],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = worker_pool()?;
    let solver = SolverConfig {
        outer_iters: iterations,
        ..*solver
    };
    let mut methods = Vec::new();
    pool.install(|| -> Result<()> {
        methods.push(solve_all(samples, "baseline", |s| {
            Ok(ao_admm(&s.v, &s.w0, &s.h0, &solver)?.rmse)
        })?);
        for m in models {
            let cfg = ModelConfig {
                outer_iters: iterations,
                ..m.config.clone()
            };
            let nbr_acc = m.nbr_acc.min(iterations);
            methods.push(solve_all(samples, &m.name, |s| {
                Ok(run_model(&m.params, &cfg, m.kind, s, nbr_acc)?.rmse)
            })?);
        }
        Ok(())
    })?;
    Ok(summarize(methods, iterations))
}

pub fn summarize(methods: Vec<MethodCurves>, iterations: usize) -> EvalReport {
    let mut mean_curves = Vec::new();
    for m in &methods {
        for t in 0..=iterations {
            let mean = m.curves.iter().map(|c| c.rmse[t]).sum::<f64>() / m.curves.len() as f64;
            mean_curves.push(CurveRow {
                method: m.method.clone(),
                iteration: t,
                mean_rmse: mean,
            });
        }
    }
    let mut ratios = Vec::new();
    let baseline = &methods[0];
    for m in &methods[1..] {
        for t in 0..=iterations {
            let r: Vec<f64> = m
                .curves
                .iter()
                .zip(&baseline.curves)
                .map(|(a, b)| {
                    assert_eq!(a.matrix, b.matrix, "ratio must pair the same matrix");
                    a.rmse[t] / b.rmse[t]
                })
                .collect();
            let (q1, median, q3) = quartiles(&r);
            ratios.push(QuartileRow {
                method: m.method.clone(),
                iteration: t,
                q1,
                median,
                q3,
            });
        }
    }
    EvalReport {
        iterations,
        methods,
        mean_curves,
        ratios,
    }
}

/// Writes `rmse_curves.csv`, `ratio_quartiles.csv` and their SVG plots.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::training::write_csv(&dir.join("rmse_curves.csv"), &report.mean_curves)?;
    write_quartiles(&dir.join("ratio_quartiles.csv"), &report.ratios)?;

    let series: Vec<Series> = report
        .methods
        .iter()
        .map(|m| Series {
            label: m.method.clone(),
            points: report
                .mean_curves
                .iter()
                .filter(|r| r.method == m.method)
                .map(|r| (r.iteration as f64, r.mean_rmse))
                .collect(),
            dashed: false,
        })
        .collect();
    std::fs::write(dir.join("rmse_curves.svg"), line_chart("Mean RMSE", "iteration", &series))?;

    let mut series = Vec::new();
    for m in &report.methods[1..] {
        let rows: Vec<&QuartileRow> = report.ratios.iter().filter(|r| r.method == m.method).collect();
        let pick = |f: fn(&QuartileRow) -> f64| rows.iter().map(|r| (r.iteration as f64, f(r))).collect();
        series.push(Series {
            label: format!("{} median", m.method),
            points: pick(|r| r.median),
            dashed: false,
        });
        series.push(Series {
            label: format!("{} Q1", m.method),
            points: pick(|r| r.q1),
            dashed: true,
        });
        series.push(Series {
            label: format!("{} Q3", m.method),
            points: pick(|r| r.q3),
            dashed: true,
        });
    }
    std::fs::write(
        dir.join("ratio_quartiles.svg"),
        line_chart("RMSE ratio to baseline", "iteration", &series),
    )?;
    Ok(())
}

/// The header is written even when there are no rows.
fn write_quartiles(path: &Path, rows: &[QuartileRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["method", "iteration", "q1", "median", "q3"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal polyline chart with axes, ticks at the data extremes and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, margin) = (640.0, 400.0, 60.0);
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = all().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), (x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = margin,
        t = margin,
        b = h - margin,
        r = w - margin
    );
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{x}</text>"#,
            sx(x),
            h - margin + 16.0
        );
    }
    for y in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.4}</text>"#,
            margin - 6.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        w / 2.0,
        h - 16.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        );
        let ly = margin + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{color}" text-anchor="end">{}</text>"#,
            w - margin,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}
