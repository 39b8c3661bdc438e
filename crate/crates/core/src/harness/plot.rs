//! Self-contained SVG line, overlay and stem plots of run outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::models::SPARSITY_THRESHOLD;
use super::run::commit_dir;
use crate::error::{Error, Result};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 55.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Line,
    Dashed,
    Markers,
    Stem,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub xlabel: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1e-300) {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64) {
    let ty = |v: f64| if panel.log_y { v.max(1e-300).log10() } else { v };
    let xs = panel.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let mut ys: Vec<f64> = panel.series.iter().flat_map(|s| s.points.iter().map(|p| ty(p.1))).collect();
    if panel.series.iter().any(|s| s.style == Style::Stem) {
        ys.push(0.0);
    }
    let (x0, x1) = range(xs);
    let (y0, y1) = range(ys.into_iter());
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| MARGIN + (1.0 - (ty(y) - y0) / (y1 - y0)) * h;
    let syr = |y: f64| MARGIN + (1.0 - (y - y0) / (y1 - y0)) * h;
    writeln!(
        out,
        r#"<g class="panel"><rect x="{:.1}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black"/>"#,
        ox + MARGIN
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        ox + PANEL_W / 2.0,
        MARGIN - 20.0,
        escape(&panel.title)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        ox + PANEL_W / 2.0,
        PANEL_H - 12.0,
        escape(&panel.xlabel)
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let label = if panel.log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{fx:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#,
            sx(fx),
            MARGIN + h + 14.0,
            ox + MARGIN - 4.0,
            syr(fy) + 3.0
        )
        .unwrap();
    }
    for (k, s) in panel.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let name = escape(&s.name);
        match s.style {
            Style::Line | Style::Dashed => {
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .filter(|p| p.1.is_finite())
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let dash = if s.style == Style::Dashed { r#" stroke-dasharray="6 4""# } else { "" };
                writeln!(
                    out,
                    r#"<polyline class="series" data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                    pts.join(" ")
                )
                .unwrap();
            }
            Style::Markers => {
                writeln!(out, r#"<g class="series" data-series="{name}">"#).unwrap();
                for &(x, y) in &s.points {
                    writeln!(
                        out,
                        r#"<path d="M{:.2},{:.2} l4,7 h-8 z" fill="{color}"/>"#,
                        sx(x),
                        sy(y) - 4.0
                    )
                    .unwrap();
                }
                out.push_str("</g>\n");
            }
            Style::Stem => {
                writeln!(out, r#"<g class="series" data-series="{name}">"#).unwrap();
                for &(x, y) in &s.points {
                    let zero = y.abs() < SPARSITY_THRESHOLD;
                    let (class, c) = if zero { ("stem zero", "#999999") } else { ("stem nonzero", color) };
                    writeln!(
                        out,
                        r#"<g class="{class}"><line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{c}"/><circle cx="{0:.2}" cy="{2:.2}" r="2.5" fill="{c}"/></g>"#,
                        sx(x),
                        syr(0.0),
                        sy(y)
                    )
                    .unwrap();
                }
                out.push_str("</g>\n");
            }
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            ox + PANEL_W - MARGIN - 90.0,
            MARGIN + 14.0 + 14.0 * k as f64
        )
        .unwrap();
    }
    out.push_str("</g>\n");
}

/// Panels side by side in one SVG document.
pub fn render_svg(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}">"#
    );
    out.push('\n');
    writeln!(out, r#"<rect width="{width}" height="{PANEL_H}" fill="white"/>"#).unwrap();
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

struct Csv {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: "empty file".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            reason: format!("no column {name}"),
        })
    }

    fn num(&self, row: &[String], col: usize) -> Result<f64> {
        row.get(col).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            reason: format!("bad number in row {row:?}"),
        })
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name)?;
        self.rows.iter().map(|r| self.num(r, c)).collect()
    }
}

/// Training and validation loss per epoch.
pub fn loss_plot(history_csv: &Path, title: &str) -> Result<String> {
    let csv = Csv::read(history_csv)?;
    let epoch = csv.column("epoch")?;
    let series = |name: &str, col: &str, style| -> Result<Series> {
        Ok(Series {
            name: name.into(),
            points: epoch.iter().copied().zip(csv.column(col)?).collect(),
            style,
        })
    };
    Ok(render_svg(&[Panel {
        title: title.into(),
        xlabel: "epoch".into(),
        log_y: true,
        series: vec![series("training", "train_loss", Style::Line)?, series("validation", "val_loss", Style::Dashed)?],
    }]))
}

/// Reference and predicted mean and variance, one panel each. Points are
/// placed at their first coordinate on one-dimensional grids and at their
/// index otherwise.
pub fn mean_var_plot(stats_csv: &Path, title: &str) -> Result<String> {
    let csv = Csv::read(stats_csv)?;
    let two_d = csv.col("y").is_ok();
    let x = if two_d { csv.column("index")? } else { csv.column("x")? };
    let panel = |what: &str, r: &str, p: &str| -> Result<Panel> {
        Ok(Panel {
            title: format!("{title}: {what}"),
            xlabel: if two_d { "sensor index".into() } else { "x".into() },
            log_y: false,
            series: vec![
                Series {
                    name: "reference".into(),
                    points: x.iter().copied().zip(csv.column(r)?).collect(),
                    style: Style::Line,
                },
                Series {
                    name: "prediction".into(),
                    points: x.iter().copied().zip(csv.column(p)?).collect(),
                    style: Style::Markers,
                },
            ],
        })
    };
    Ok(render_svg(&[
        panel("mean", "ref_mean", "pred_mean")?,
        panel("variance", "ref_var", "pred_var")?,
    ]))
}

/// Stem plots of `a(x)`, `b(x′)` and `φ(z)`; entries below the sparsity
/// threshold are drawn in the zero class.
pub fn sparsity_plot(coefficients_csv: &Path, title: &str) -> Result<String> {
    let csv = Csv::read(coefficients_csv)?;
    let (s, c, v) = (csv.col("series")?, csv.col("coordinate")?, csv.col("value")?);
    let mut panels = Vec::new();
    for (key, label, xlabel) in [("a", "a(x)", "input sensor"), ("b", "b(x')", "output sensor"), ("phi", "phi(z)", "basis index")] {
        let points = csv
            .rows
            .iter()
            .filter(|r| r.get(s).map(String::as_str) == Some(key))
            .map(|r| Ok((csv.num(r, c)?, csv.num(r, v)?)))
            .collect::<Result<Vec<_>>>()?;
        panels.push(Panel {
            title: format!("{title}: {label}"),
            xlabel: xlabel.into(),
            log_y: false,
            series: vec![Series {
                name: key.into(),
                points,
                style: Style::Stem,
            }],
        });
    }
    Ok(render_svg(&panels))
}

/// Error against input sensor count from a sweep table.
pub fn sweep_plot(sweep_csv: &Path, title: &str) -> Result<String> {
    let csv = Csv::read(sweep_csv)?;
    let (e, m, v) = (csv.col("experiment")?, csv.col("metric")?, csv.col("value")?);
    let mut mse = Vec::new();
    let mut rel = Vec::new();
    for r in &csv.rows {
        let exp = &r[e];
        let n: f64 = exp
            .split('/')
            .next()
            .and_then(|s| s.rsplit("-n").next())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                path: csv.path.clone(),
                reason: format!("experiment {exp} lacks a sensor count"),
            })?;
        match r[m].as_str() {
            "test_mse" => mse.push((n, csv.num(r, v)?)),
            "test_avg_rel_l2" => rel.push((n, csv.num(r, v)?)),
            _ => {}
        }
    }
    Ok(render_svg(&[Panel {
        title: title.into(),
        xlabel: "input sensors".into(),
        log_y: true,
        series: vec![
            Series {
                name: "test MSE".into(),
                points: mse,
                style: Style::Line,
            },
            Series {
                name: "avg relative l2".into(),
                points: rel,
                style: Style::Dashed,
            },
        ],
    }]))
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !p.file_name().unwrap().to_string_lossy().starts_with('.'))
        .collect();
    out.sort();
    Ok(out)
}

/// Renders every plot the files of `run_dir` support into
/// `run_dir/plots/` and returns the written paths.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let models = run_dir.join("models");
    let evals = run_dir.join("eval");
    let sweep = run_dir.join("sweep.csv");
    if !models.is_dir() && !evals.is_dir() && !sweep.exists() {
        return Err(Error::MissingFile(models));
    }
    let mut docs: Vec<(String, String)> = Vec::new();
    if models.is_dir() {
        for d in subdirs(&models)? {
            let m = d.file_name().unwrap().to_string_lossy().into_owned();
            docs.push((format!("loss_{m}.svg"), loss_plot(&d.join("history.csv"), &format!("{m} loss"))?));
        }
    }
    if evals.is_dir() {
        for d in subdirs(&evals)? {
            let m = d.file_name().unwrap().to_string_lossy().into_owned();
            docs.push((format!("mean_var_{m}.svg"), mean_var_plot(&d.join("mean_var.csv"), &m)?));
            if d.join("coefficients.csv").exists() {
                docs.push((format!("sparsity_{m}.svg"), sparsity_plot(&d.join("coefficients.csv"), &m)?));
            }
            if d.join("generated.csv").exists() {
                docs.push((
                    format!("generated_{m}.svg"),
                    mean_var_plot(&d.join("generated.csv"), &format!("{m} generated"))?,
                ));
            }
        }
    }
    if sweep.exists() {
        docs.push(("sweep.svg".into(), sweep_plot(&sweep, "error against input sensors")?));
    }
    let target = run_dir.join("plots");
    commit_dir(&target, |dir| {
        for (name, svg) in &docs {
            let p = dir.join(name);
            std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    })?;
    Ok(docs.into_iter().map(|(n, _)| target.join(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainHistory;

    #[test]
    fn loss_curve_has_two_series() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = TrainHistory {
            train: (1..=100).map(|e| 1.0 / e as f64).collect(),
            val: (1..=100).map(|e| 1.2 / e as f64).collect(),
        };
        h.write_csv(&p).unwrap();
        let svg = loss_plot(&p, "loss").unwrap();
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains(r#"data-series="training""#) && svg.contains(r#"data-series="validation""#));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn overlay_has_reference_and_prediction_per_panel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "index,x,ref_mean,pred_mean,ref_var,pred_var\n0,0e0,1e0,1.1e0,2e0,2e0\n1,5e-1,2e0,2e0,3e0,3.5e0\n").unwrap();
        let svg = mean_var_plot(&p, "u").unwrap();
        assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
        assert_eq!(svg.matches(r#"data-series="reference""#).count(), 2);
        assert_eq!(svg.matches(r#"data-series="prediction""#).count(), 2);
    }

    #[test]
    fn stems_classify_small_entries_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let values = [0.5, -2e-4, 0.0, 1e-3, -0.02, 9.99e-4, 3.0];
        let mut text = String::from("series,position,coordinate,component,value\n");
        for (i, v) in values.iter().enumerate() {
            let s = ["a", "b", "phi"][i % 3];
            text.push_str(&format!("{s},{i},{i}e-1,{i},{v:e}\n"));
        }
        std::fs::write(&p, &text).unwrap();
        let expected = text
            .lines()
            .skip(1)
            .filter(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap().abs() < 1e-3)
            .count();
        let svg = sparsity_plot(&p, "m").unwrap();
        assert_eq!(svg.matches(r#"class="stem zero""#).count(), expected);
        assert_eq!(svg.matches(r#"class="stem nonzero""#).count(), values.len() - expected);
        assert_eq!(expected, 3);
    }

    #[test]
    fn missing_inputs_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match emit_plots(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("models")),
            other => panic!("{other:?}"),
        }
        std::fs::create_dir_all(dir.path().join("models/pca")).unwrap();
        match emit_plots(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("models/pca/history.csv")),
            other => panic!("{other:?}"),
        }
    }
}
