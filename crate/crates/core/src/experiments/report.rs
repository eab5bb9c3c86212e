//! Result rows, CSV emission and a small deterministic SVG line plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment,method,param,rep,seed,metric,value,stderr";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    /// Downstream `m` or pretraining `n`.
    pub param: u64,
    pub rep: u64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl ResultRow {
    pub fn new(experiment: &str, method: &str, param: u64, rep: u64, seed: u64, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            method: method.into(),
            param,
            rep,
            seed,
            metric: metric.into(),
            value,
            stderr: None,
        }
    }

    pub fn with_stderr(mut self, se: f64) -> Self {
        self.stderr = Some(se);
        self
    }

    fn key(&self) -> (&str, &str, &str, u64, u64) {
        (&self.method, &self.metric, &self.experiment, self.param, self.rep)
    }
}

/// Sorts rows into the canonical order and rejects non-finite metrics.
pub fn finalize(mut rows: Vec<ResultRow>) -> Result<Vec<ResultRow>> {
    if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite metric {} for {} at {}",
            bad.metric, bad.method, bad.param
        )));
    }
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let se = r.stderr.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.experiment, r.method, r.param, r.rep, r.seed, r.metric, r.value, se
        );
    }
    out
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

/// Mean and sample standard deviation per (method, param) of one metric.
pub fn summarize(rows: &[ResultRow], metric: &str) -> BTreeMap<String, Vec<(u64, f64, f64)>> {
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        groups
            .entry(r.method.clone())
            .or_default()
            .entry(r.param)
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|(method, by_param)| {
            let series = by_param
                .into_iter()
                .map(|(p, v)| {
                    let (mean, sd) = mean_sd(&v);
                    (p, mean, sd)
                })
                .collect();
            (method, series)
        })
        .collect()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean curves with ±1 SD error bars against a log-scaled x axis.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &BTreeMap<String, Vec<(u64, f64, f64)>>) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 60.0);
    let pts: Vec<&(u64, f64, f64)> = series.values().flatten().collect();
    let xs: Vec<f64> = pts.iter().map(|p| (p.0.max(1) as f64).log10()).collect();
    let (mut x0, mut x1) = bounds(&xs);
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let ys: Vec<f64> = pts
        .iter()
        .flat_map(|p| [p.1 - p.2, p.1 + p.2])
        .chain(std::iter::once(0.0))
        .collect();
    let (y0, mut y1) = bounds(&ys);
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{l:.2} {t:.2} V{b:.2} H{r:.2}" stroke="black" fill="none"/>"#,
        l = left,
        t = top,
        b = top + ph,
        r = left + pw
    );
    let mut ticks: Vec<u64> = pts.iter().map(|p| p.0).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = sx((t.max(1) as f64).log10());
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, top + ph, top + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{t}</text>"#, top + ph + 18.0);
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#, left - 8.0, py + 4.0, fmt_tick(y));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 15.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="18" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, escape(y_label));
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, p)| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx((p.0.max(1) as f64).log10()), sy(p.1)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{c}" stroke-width="2" fill="none"/>"#, path.join(" "));
        for p in pts {
            let x = sx((p.0.max(1) as f64).log10());
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{c}"/>"#, sy(p.1 - p.2), sy(p.1 + p.2));
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sy(p.1));
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn fmt_tick(y: f64) -> String {
    if y == 0.0 {
        "0".into()
    } else if y.abs() >= 0.01 && y.abs() < 1000.0 {
        format!("{y:.3}")
    } else {
        format!("{y:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
