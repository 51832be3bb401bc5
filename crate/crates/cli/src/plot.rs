//! Line plots of scores against simulations and wallclock time, as SVG, with
//! the plotted values alongside as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use asnpe::csvio;
use asnpe::seed;
use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodKind};
use crate::experiment::{
    cell_dir, read_metrics, read_trajectory, MetricsRow, TrajectoryRow, CONFIG_FILE, METRICS_FILE,
    SCORE_COLUMNS, TRAJECTORY_FILE,
};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0x5eed_b007;
pub const BAND_VERSION: u32 = 1;
const BAND_HEADER: &[&str] = &["method", "x", "mean", "lower", "upper", "n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub method: String,
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Mean of `values` with a percentile bootstrap 95% interval for the mean.
pub fn bootstrap_band(values: &[f64], resamples: usize, rng: &mut seed::Rng) -> Band {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Band {
        mean,
        lower: quantile(&means, 0.025),
        upper: quantile(&means, 0.975),
    }
}

#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

/// Render lines (and shaded bands where given) into a standalone SVG document.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, x_max: Option<f64>, lines: &[Line]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pts = lines.iter().flat_map(|l| {
        let lo = l.lower.iter().flatten();
        let hi = l.upper.iter().flatten();
        l.y.iter().chain(lo).chain(hi).copied()
    });
    let (mut y0, mut y1) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let pad = 0.05 * (y1 - y0);
    (y0, y1) = (y0 - pad, y1 + pad);
    let x0 = 0.0;
    let x1 = x_max.unwrap_or_else(|| {
        lines
            .iter()
            .flat_map(|l| l.x.iter().copied())
            .fold(1e-9, f64::max)
    });
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (left + w - right) / 2.0,
        escape(title)
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{top}" stroke="#eee"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            h - bottom,
            h - bottom + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            w - right,
            left - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, line) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let (Some(lo), Some(hi)) = (&line.lower, &line.upper) {
            let mut poly: Vec<String> = line.x.iter().zip(hi).map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
            poly.extend(line.x.iter().zip(lo).rev().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))));
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.join(" "));
        }
        let path: Vec<String> = line.x.iter().zip(&line.y).map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&line.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e5) {
        format!("{}", (v * 1e6).round() / 1e6)
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Cells {
    method: MethodKind,
    metrics: Vec<Vec<MetricsRow>>,
    trajectories: Vec<Vec<TrajectoryRow>>,
}

fn load_cells(dir: &Path, config: &ExperimentConfig) -> Vec<Cells> {
    config
        .methods
        .iter()
        .map(|&method| {
            let mut metrics = Vec::new();
            let mut trajectories = Vec::new();
            for &s in &config.seeds {
                let cell = cell_dir(dir, method, s);
                match read_metrics(&cell.join(METRICS_FILE)) {
                    Ok(rows) if !rows.is_empty() => metrics.push(rows),
                    Ok(_) => {}
                    Err(e) => warn!("{method} seed {s}: no metrics ({e:#})"),
                }
                if let Ok(rows) = read_trajectory(&cell.join(TRAJECTORY_FILE)) {
                    if !rows.is_empty() {
                        trajectories.push(rows);
                    }
                }
            }
            Cells {
                method,
                metrics,
                trajectories,
            }
        })
        .collect()
}

/// Mean and band at each x from one value per seed; seeds without a value at
/// an x are left out there.
fn banded(label: &str, xs: &[f64], per_seed: &[Vec<Option<f64>>], rng: &mut seed::Rng, rows: &mut Vec<BandRow>) -> Option<Line> {
    let mut line = Line {
        label: label.to_string(),
        x: Vec::new(),
        y: Vec::new(),
        lower: Some(Vec::new()),
        upper: Some(Vec::new()),
    };
    for (i, &x) in xs.iter().enumerate() {
        let vals: Vec<f64> = per_seed.iter().filter_map(|v| v.get(i).copied().flatten()).collect();
        if vals.is_empty() {
            continue;
        }
        let b = bootstrap_band(&vals, BOOTSTRAP_RESAMPLES, rng);
        line.x.push(x);
        line.y.push(b.mean);
        line.lower.as_mut().unwrap().push(b.lower);
        line.upper.as_mut().unwrap().push(b.upper);
        rows.push(BandRow {
            method: label.to_string(),
            x,
            mean: b.mean,
            lower: b.lower,
            upper: b.upper,
            n: vals.len(),
        });
    }
    (!line.x.is_empty()).then_some(line)
}

fn save(out: &Path, name: &str, svg: &str, rows: &[BandRow]) -> anyhow::Result<PathBuf> {
    let path = out.join(format!("{name}.svg"));
    std::fs::write(&path, svg)?;
    csvio::write_rows(&out.join(format!("{name}.csv")), "plot_band", BAND_VERSION, BAND_HEADER, rows)?;
    Ok(path)
}

/// Write every plot for the run in `dir` into `dir/plots`. Returns the SVG paths.
pub fn emit_plots(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let cells = load_cells(dir, &config);
    if cells.iter().all(|c| c.metrics.is_empty()) {
        anyhow::bail!("{} has no metrics.csv files", dir.display());
    }
    let out = dir.join("plots");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let budget = config.budget();
    let mut written = Vec::new();

    // Best RMSNE reached against simulations spent.
    if cells.iter().any(|c| !c.trajectories.is_empty()) {
        let mut rng = seed::rng_from(BOOTSTRAP_SEED);
        let mut rows = Vec::new();
        let xs: Vec<f64> = (1..=budget).map(|k| k as f64).collect();
        let lines: Vec<Line> = cells
            .iter()
            .filter_map(|c| {
                let per_seed: Vec<Vec<Option<f64>>> = c
                    .trajectories
                    .iter()
                    .map(|t| {
                        let mut filled = vec![None; budget];
                        let mut rows = t.iter().peekable();
                        let mut current = None;
                        for (k, slot) in filled.iter_mut().enumerate() {
                            while let Some(r) = rows.next_if(|r| r.simulation <= k + 1) {
                                current = r.best_rmsne;
                            }
                            *slot = current;
                        }
                        filled
                    })
                    .collect();
                banded(c.method.name(), &xs, &per_seed, &mut rng, &mut rows)
            })
            .collect();
        let svg = render_svg("Best RMSNE reached", "simulations", "RMSNE", Some(budget as f64), &lines);
        written.push(save(&out, "rmsne_vs_simulations", &svg, &rows)?);

        // Wallclock: each method's single best run.
        let mut rows = Vec::new();
        let lines: Vec<Line> = cells
            .iter()
            .filter_map(|c| {
                let best = c
                    .trajectories
                    .iter()
                    .filter(|t| t.last().and_then(|r| r.best_rmsne).is_some())
                    .min_by(|a, b| {
                        let fa = a.last().unwrap().best_rmsne.unwrap();
                        let fb = b.last().unwrap().best_rmsne.unwrap();
                        fa.total_cmp(&fb)
                    })?;
                let pts: Vec<&TrajectoryRow> = best.iter().filter(|r| r.best_rmsne.is_some()).collect();
                for r in &pts {
                    let v = r.best_rmsne.unwrap();
                    rows.push(BandRow {
                        method: c.method.name().into(),
                        x: r.elapsed_s,
                        mean: v,
                        lower: v,
                        upper: v,
                        n: 1,
                    });
                }
                Some(Line {
                    label: c.method.name().into(),
                    x: pts.iter().map(|r| r.elapsed_s).collect(),
                    y: pts.iter().map(|r| r.best_rmsne.unwrap()).collect(),
                    lower: None,
                    upper: None,
                })
            })
            .collect();
        let svg = render_svg("Best RMSNE against elapsed time (best run)", "wallclock (s)", "RMSNE", None, &lines);
        written.push(save(&out, "rmsne_vs_wallclock", &svg, &rows)?);
    }

    // Every other score column, per round.
    for (i, &col) in SCORE_COLUMNS.iter().enumerate() {
        let present = cells
            .iter()
            .any(|c| c.metrics.iter().any(|rows| rows.iter().any(|r| r.score(col).is_some())));
        if !present {
            warn!("no values for {col}; plot skipped");
            continue;
        }
        let mut rng = seed::rng_from(seed::derive(BOOTSTRAP_SEED, i as u64 + 1));
        let mut rows = Vec::new();
        let lines: Vec<Line> = cells
            .iter()
            .filter_map(|c| {
                let xs: Vec<f64> = c
                    .metrics
                    .iter()
                    .max_by_key(|rows| rows.len())?
                    .iter()
                    .map(|r| r.simulator_calls as f64)
                    .collect();
                let per_seed: Vec<Vec<Option<f64>>> = c
                    .metrics
                    .iter()
                    .map(|rows| rows.iter().map(|r| r.score(col)).collect())
                    .collect();
                banded(c.method.name(), &xs, &per_seed, &mut rng, &mut rows)
            })
            .collect();
        let svg = render_svg(col, "simulations", col, Some(budget as f64), &lines);
        written.push(save(&out, &format!("{col}_vs_simulations"), &svg, &rows)?);
    }
    Ok(written)
}

pub fn read_band(path: &Path) -> anyhow::Result<Vec<BandRow>> {
    Ok(csvio::read_rows(path, "plot_band", BAND_VERSION)?)
}
