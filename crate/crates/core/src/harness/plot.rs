use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::train::{read_metrics, METRICS_FILE};
use crate::diagnostics::{EmbeddingRow, Source};
use crate::error::{DarlError, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

/// Mean and standard error across seeds at each shared evaluation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn aggregate(series: &[Vec<(u64, f64)>]) -> Result<Curve> {
    let first = series.first().ok_or(DarlError::InsufficientData("no runs to aggregate".into()))?;
    let steps: Vec<u64> = first
        .iter()
        .map(|p| p.0)
        .filter(|s| series.iter().all(|run| run.iter().any(|p| p.0 == *s)))
        .collect();
    let n = series.len() as f64;
    let (mut mean, mut stderr) = (Vec::new(), Vec::new());
    for s in &steps {
        let vals: Vec<f64> = series
            .iter()
            .map(|run| run.iter().find(|p| p.0 == *s).expect("shared step").1)
            .collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m);
        stderr.push((var / n).sqrt());
    }
    Ok(Curve { steps, mean, stderr })
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (mut x0, mut x1) = span(&mut xs.clone());
        let (mut y0, mut y1) = span(&mut ys.clone());
        if !(x1 > x0) {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        Self { x0, x1, y0, y1 }
    }
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }
    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn header(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, anchor, x, y) in [
        (f.x0, "start", PAD, H - PAD + 16.0),
        (f.x1, "end", W - PAD, H - PAD + 16.0),
        (f.y0, "end", PAD - 4.0, H - PAD),
        (f.y1, "end", PAD - 4.0, PAD + 4.0),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="10" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            tick(v)
        );
    }
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Learning-curve SVG: solid line for training domains, dashed for held-out
/// test domains, each with a standard-error band across runs.
pub fn curves_svg(title: &str, train: &Curve, test: &Curve) -> String {
    let xs = train.steps.iter().chain(&test.steps).map(|&s| s as f64);
    let band = |c: &Curve| c.mean.iter().zip(&c.stderr).flat_map(|(m, e)| [m - e, m + e]).collect::<Vec<f64>>();
    let ys: Vec<f64> = band(train).into_iter().chain(band(test)).collect();
    let f = Frame::new(xs, ys.iter().copied());
    let mut s = header(title, "environment steps", "episode return", &f);
    for (c, color, dash) in [(train, "#1f77b4", ""), (test, "#d62728", r#" stroke-dasharray="6 4""#)] {
        if c.steps.is_empty() {
            continue;
        }
        let upper: Vec<String> = c
            .steps
            .iter()
            .zip(&c.mean)
            .zip(&c.stderr)
            .map(|((x, m), e)| format!("{:.2},{:.2}", f.px(*x as f64), f.py(m + e)))
            .collect();
        let lower: Vec<String> = c
            .steps
            .iter()
            .zip(&c.mean)
            .zip(&c.stderr)
            .rev()
            .map(|((x, m), e)| format!("{:.2},{:.2}", f.px(*x as f64), f.py(m - e)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = c
            .steps
            .iter()
            .zip(&c.mean)
            .map(|(x, m)| format!("{:.2},{:.2}", f.px(*x as f64), f.py(*m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            line.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-size="11" fill="#1f77b4" font-family="sans-serif">train (solid)</text>"##,
        W - PAD - 150.0,
        PAD + 10.0
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-size="11" fill="#d62728" font-family="sans-serif">test (dashed)</text>"##,
        W - PAD - 150.0,
        PAD + 26.0
    );
    s.push_str("</svg>\n");
    s
}

/// Reads `metrics.jsonl` from each run directory and writes one learning-curve SVG.
pub fn emit_plots(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(DarlError::InsufficientData("plot needs at least one run directory".into()));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for dir in runs {
        let recs = read_metrics(&dir.join(METRICS_FILE))?;
        if recs.is_empty() {
            return Err(DarlError::InsufficientData(format!("{} holds no metrics records", dir.display())));
        }
        train.push(recs.iter().map(|r| (r.step, r.train_return)).collect());
        test.push(recs.iter().map(|r| (r.step, r.test_return)).collect());
    }
    let title = format!("point-mass goal reaching, {} run(s)", runs.len());
    std::fs::write(out, curves_svg(&title, &aggregate(&train)?, &aggregate(&test)?))?;
    Ok(())
}

/// Embedding scatter colored by source.
pub fn scatter_svg(title: &str, rows: &[EmbeddingRow]) -> String {
    let f = Frame::new(rows.iter().map(|r| r.x), rows.iter().map(|r| r.y));
    let mut s = header(title, "t-SNE 1", "t-SNE 2", &f);
    let color = |src: Source| match src {
        Source::Train => "#1f77b4",
        Source::Test => "#ff7f0e",
        Source::Video => "#2ca02c",
    };
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"><title>domain {}</title></circle>"#,
            f.px(r.x),
            f.py(r.y),
            color(r.source),
            r.domain_id
        );
    }
    for (i, src) in [Source::Train, Source::Test, Source::Video].into_iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{}" font-family="sans-serif">{}</text>"#,
            W - PAD - 60.0,
            PAD + 10.0 + 16.0 * i as f64,
            color(src),
            src.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}
