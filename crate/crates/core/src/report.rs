//! Evaluation reports and SVG solution plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::env::{cost, CostBreakdown, EnvError, Solution, Variant};
use crate::instance::Instance;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub instance: String,
    pub cost: f64,
    pub k: usize,
    pub distance: f64,
    pub duration: f64,
    pub wait: f64,
    pub early_pen: f64,
    pub late_pen: f64,
    pub seconds: f64,
}

impl EvalRow {
    pub fn new(instance: &str, solution: &Solution, cost: &CostBreakdown, seconds: f64) -> Self {
        Self {
            instance: instance.to_string(),
            cost: cost.total,
            k: solution.k(),
            distance: cost.distance,
            duration: cost.duration,
            wait: cost.wait,
            early_pen: cost.early_pen,
            late_pen: cost.late_pen,
            seconds,
        }
    }

    fn values(&self) -> [f64; 8] {
        [
            self.cost,
            self.k as f64,
            self.distance,
            self.duration,
            self.wait,
            self.early_pen,
            self.late_pen,
            self.seconds,
        ]
    }
}

const COLUMNS: [&str; 8] = [
    "cost",
    "k",
    "distance",
    "duration",
    "wait",
    "early_pen",
    "late_pen",
    "seconds",
];

/// Mean and sample standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(xs: impl Iterator<Item = f64> + Clone) -> Stat {
    let n = xs.clone().count();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

/// Per-instance rows plus run metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// `policy`, `variant`, `m_con`, `n_samples`, `seed` and free-form keys.
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(meta: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            meta: meta.into_iter().collect(),
            rows: Vec::new(),
        }
    }

    /// Column statistics keyed by column name.
    pub fn aggregates(&self) -> BTreeMap<&'static str, Stat> {
        COLUMNS
            .iter()
            .enumerate()
            .map(|(j, &c)| (c, stat(self.rows.iter().map(move |r| r.values()[j]))))
            .collect()
    }

    pub fn mean(&self, column: &str) -> f64 {
        self.aggregates().get(column).map_or(f64::NAN, |s| s.mean)
    }

    /// `# key=value` metadata lines, a header, one row per instance and
    /// closing `# mean` / `# std` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "instance,{}", COLUMNS.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{},{}", r.instance, vals.join(","));
        }
        let agg = self.aggregates();
        for (label, pick) in [("mean", true), ("std", false)] {
            let vals: Vec<String> = COLUMNS
                .iter()
                .map(|c| {
                    let s = agg[c];
                    format!("{:?}", if pick { s.mean } else { s.std })
                })
                .collect();
            let _ = writeln!(out, "# {label},{}", vals.join(","));
        }
        out
    }

    /// Reads [`EvalReport::to_csv`] output. Aggregate lines are ignored;
    /// they are recomputed from the rows.
    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut report = Self::default();
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let bad = |msg: String| ReportError::Parse { line: ln, msg };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once('=') {
                    report.meta.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            if !header {
                if line != format!("instance,{}", COLUMNS.join(",")) {
                    return Err(bad(format!("unexpected header `{line}`")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != COLUMNS.len() + 1 {
                return Err(bad(format!("expected {} fields", COLUMNS.len() + 1)));
            }
            let num = |j: usize| {
                f[j].parse::<f64>()
                    .map_err(|_| bad(format!("bad number `{}`", f[j])))
            };
            report.rows.push(EvalRow {
                instance: f[0].to_string(),
                cost: num(1)?,
                k: num(2)? as usize,
                distance: num(3)?,
                duration: num(4)?,
                wait: num(5)?,
                early_pen: num(6)?,
                late_pen: num(7)?,
                seconds: num(8)?,
            });
        }
        if !header {
            return Err(ReportError::Parse {
                line: 0,
                msg: "missing header".into(),
            });
        }
        Ok(report)
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let meta: Vec<String> = self.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "{} instances  {}", self.rows.len(), meta.join(" "));
        let _ = writeln!(out, "{:<10} {:>12} {:>12}", "column", "mean", "std");
        for (c, s) in self.aggregates() {
            let _ = writeln!(out, "{c:<10} {:>12.3} {:>12.3}", s.mean, s.std);
        }
        out
    }
}

/// Per-tour legend entry: customers, distance, load and duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TourLegend {
    pub vehicle: usize,
    pub n: usize,
    pub l: f64,
    pub q: f64,
    pub t: f64,
}

pub fn legend(
    inst: &Instance,
    solution: &Solution,
    variant: &Variant,
) -> Result<Vec<TourLegend>, ReportError> {
    let c = cost(inst, solution, variant)?;
    Ok(c.tours
        .iter()
        .filter(|m| m.customers > 0)
        .map(|m| TourLegend {
            vehicle: m.vehicle,
            n: m.customers,
            l: m.distance,
            q: m.load,
            t: m.duration,
        })
        .collect())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// SVG drawing: depot square, customer dots, one coloured polyline per
/// tour and a legend with `(n, l, q, t)` per tour.
pub fn plot_svg(
    inst: &Instance,
    solution: &Solution,
    variant: &Variant,
) -> Result<String, ReportError> {
    let entries = legend(inst, solution, variant)?;
    let nodes = inst.nodes();
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for n in nodes {
        x0 = x0.min(n.x);
        y0 = y0.min(n.y);
        x1 = x1.max(n.x);
        y1 = y1.max(n.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (size, pad, legend_w) = (600.0, 20.0, 260.0);
    let px = |x: f64| pad + (x - x0) / span * size;
    let py = |y: f64| pad + size - (y - y0) / span * size;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        size + 2.0 * pad + legend_w,
        size + 2.0 * pad
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (line, t) in solution.tours.iter().filter(|t| !t.nodes.is_empty()).enumerate() {
        let color = PALETTE[line % PALETTE.len()];
        let pts: Vec<String> = std::iter::once(0)
            .chain(t.nodes.iter().copied())
            .chain(std::iter::once(0))
            .map(|i| format!("{:.2},{:.2}", px(nodes[i].x), py(nodes[i].y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="tour" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }
    for n in &nodes[1..] {
        let _ = writeln!(
            out,
            r#"<circle class="customer" cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
            px(n.x),
            py(n.y)
        );
    }
    let d = &nodes[0];
    let _ = writeln!(
        out,
        r#"<rect class="depot" x="{:.2}" y="{:.2}" width="10" height="10" fill="red"/>"#,
        px(d.x) - 5.0,
        py(d.y) - 5.0
    );
    let lx = size + 2.0 * pad;
    for (j, e) in entries.iter().enumerate() {
        let y = pad + 16.0 * j as f64;
        let color = PALETTE[j % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<text class="legend" x="{lx:.1}" y="{:.1}" fill="{color}">tour {}: n={} l={:.2} q={:.2} t={:.2}</text>"#,
            y + 12.0,
            e.vehicle,
            e.n,
            e.l,
            e.q,
            e.t
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
