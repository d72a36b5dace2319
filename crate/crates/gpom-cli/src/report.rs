//! CSV and JSON emission with a fixed schema, plus the summary statistics.
//!
//! Every float is printed with 17 significant digits so files parse back to
//! bit-identical values and recomputed summaries match byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use gpom::checkpoint::fmt_f64;
use gpom::error::{GpomError, Result};
use gpom::Tensor;

/// One `trace.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub seed: u64,
    pub generation: u32,
    pub best: f64,
    pub mean: f64,
}

pub const TRACE_HEADER: &str = "seed,generation,best,mean";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.seed,
            r.generation,
            fmt_f64(r.best),
            fmt_f64(r.mean)
        );
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        other => {
            return Err(GpomError::Io(format!(
                "trace header mismatch: got {other:?}, expected '{TRACE_HEADER}'"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(GpomError::Io(format!("trace line {} malformed", lineno + 2)));
        }
        let parse_err = |what: &str| GpomError::Io(format!("trace line {}: bad {what}", lineno + 2));
        rows.push(TraceRow {
            seed: parts[0].parse().map_err(|_| parse_err("seed"))?,
            generation: parts[1].parse().map_err(|_| parse_err("generation"))?,
            best: parts[2].parse().map_err(|_| parse_err("best"))?,
            mean: parts[3].parse().map_err(|_| parse_err("mean"))?,
        });
    }
    Ok(rows)
}

/// Median with linear interpolation.
pub fn median(sorted: &[f64]) -> f64 {
    quantile(sorted, 0.5)
}

/// Linear-interpolation quantile over an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summary over per-seed finals: median, interquartile range, mean, sample
/// standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub seeds: Vec<u64>,
    pub final_best: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn stats_over_finals(per_seed: &[(u64, f64)]) -> Result<Stats> {
    if per_seed.is_empty() {
        return Err(GpomError::InvalidConfig("no seeds to summarize".into()));
    }
    let seeds: Vec<u64> = per_seed.iter().map(|(s, _)| *s).collect();
    let final_best: Vec<f64> = per_seed.iter().map(|(_, f)| *f).collect();
    let mut sorted = final_best.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mean = final_best.iter().sum::<f64>() / final_best.len() as f64;
    let std = if final_best.len() < 2 {
        0.0
    } else {
        (final_best.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (final_best.len() - 1) as f64)
            .sqrt()
    };
    Ok(Stats {
        seeds,
        final_best,
        median: med,
        iqr,
        mean,
        std,
    })
}

impl Stats {
    /// Fixed-order JSON object; byte-stable given identical inputs.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"seeds\":[");
        for (i, s) in self.seeds.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{s}");
        }
        out.push_str("],\"final_best\":[");
        for (i, f) in self.final_best.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(*f));
        }
        let _ = write!(
            out,
            "],\"median\":{},\"iqr\":{},\"mean\":{},\"std\":{}}}",
            fmt_f64(self.median),
            fmt_f64(self.iqr),
            fmt_f64(self.mean),
            fmt_f64(self.std)
        );
        out
    }
}

/// Per-seed best-so-far finals recomputed from trace rows, ascending by seed
/// first appearance order.
pub fn finals_from_trace(rows: &[TraceRow]) -> Vec<(u64, f64)> {
    let mut order: Vec<u64> = Vec::new();
    let mut best: Vec<f64> = Vec::new();
    for r in rows {
        match order.iter().position(|s| *s == r.seed) {
            Some(i) => best[i] = best[i].min(r.best),
            None => {
                order.push(r.seed);
                best.push(r.best);
            }
        }
    }
    order.into_iter().zip(best).collect()
}

/// Headerless CSV of a dense matrix.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(t.get(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Minimal SVG line chart of best fitness (log10 when all-positive) per seed.
pub fn trace_svg(rows: &[TraceRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let mut per_seed: Vec<(u64, Vec<f64>)> = Vec::new();
    for r in rows {
        match per_seed.iter_mut().find(|(s, _)| *s == r.seed) {
            Some((_, ys)) => ys.push(r.best),
            None => per_seed.push((r.seed, vec![r.best])),
        }
    }
    let log_scale = rows.iter().all(|r| r.best > 0.0);
    let map = |v: f64| if log_scale { v.log10() } else { v };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 1usize;
    for (_, ys) in &per_seed {
        max_len = max_len.max(ys.len());
        for &y in ys {
            lo = lo.min(map(y));
            hi = hi.max(map(y));
        }
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    for (k, (seed, ys)) in per_seed.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut points = String::new();
        for (i, &y) in ys.iter().enumerate() {
            let px = pad + (w - 2.0 * pad) * i as f64 / (max_len.max(2) - 1) as f64;
            let py = h - pad - (h - 2.0 * pad) * (map(y) - lo) / (hi - lo);
            let _ = write!(points, "{px:.1},{py:.1} ");
        }
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n<!-- seed {seed} -->\n",
            points.trim_end()
        );
    }
    let label = if log_scale { "log10 best" } else { "best" };
    let _ = write!(
        out,
        "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">{label} vs generation</text>\n</svg>\n"
    );
    out
}
