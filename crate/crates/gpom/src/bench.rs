//! Shifted analytic objectives TF1-TF8: value and subgradient evaluation,
//! box bounds, shift sampling, and evaluation budget accounting.
//!
//! Every function is minimized and reaches 0 at `x = shift` (TF5 reaches 0 at
//! `x = shift + 1`). Subgradients at kinks follow the same conventions as the
//! tensor engine: `sign(0) = 0`, max ties route to the first attaining index.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{GpomError, Result};
use crate::tensor::Tensor;

/// The eight benchmark function identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionId {
    #[serde(rename = "TF1")]
    Tf1,
    #[serde(rename = "TF2")]
    Tf2,
    #[serde(rename = "TF3")]
    Tf3,
    #[serde(rename = "TF4")]
    Tf4,
    #[serde(rename = "TF5")]
    Tf5,
    #[serde(rename = "TF6")]
    Tf6,
    #[serde(rename = "TF7")]
    Tf7,
    #[serde(rename = "TF8")]
    Tf8,
}

impl FunctionId {
    pub const ALL: [FunctionId; 8] = [
        FunctionId::Tf1,
        FunctionId::Tf2,
        FunctionId::Tf3,
        FunctionId::Tf4,
        FunctionId::Tf5,
        FunctionId::Tf6,
        FunctionId::Tf7,
        FunctionId::Tf8,
    ];

    /// Default training set: TF1-TF4. TF5-TF8 are held out for testing.
    pub fn training_default() -> Vec<FunctionId> {
        Self::ALL[..4].to_vec()
    }

    /// Cumulative training presets "1".."8": preset k trains on TF1..TFk.
    pub fn training_preset(k: usize) -> Result<Vec<FunctionId>> {
        if !(1..=8).contains(&k) {
            return Err(GpomError::InvalidConfig(format!(
                "training preset must be 1..=8, got {k}"
            )));
        }
        Ok(Self::ALL[..k].to_vec())
    }

    /// Solution box `[lower, upper]`, identical in every coordinate.
    pub fn x_range(&self) -> (f64, f64) {
        match self {
            FunctionId::Tf1 | FunctionId::Tf2 => (-10.0, 10.0),
            FunctionId::Tf3 | FunctionId::Tf4 | FunctionId::Tf5 => (-100.0, 100.0),
            FunctionId::Tf6 => (-5.0, 5.0),
            FunctionId::Tf7 => (-600.0, 600.0),
            FunctionId::Tf8 => (-32.0, 32.0),
        }
    }

    /// Range the shift vector is sampled from, identical in every coordinate.
    pub fn shift_range(&self) -> (f64, f64) {
        match self {
            FunctionId::Tf1 | FunctionId::Tf2 => (-10.0, 10.0),
            FunctionId::Tf3 | FunctionId::Tf4 | FunctionId::Tf5 => (-50.0, 50.0),
            FunctionId::Tf6 => (-2.5, 2.5),
            FunctionId::Tf7 => (-300.0, 300.0),
            FunctionId::Tf8 => (-16.0, 16.0),
        }
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = *self as usize + 1;
        write!(f, "TF{n}")
    }
}

impl FromStr for FunctionId {
    type Err = GpomError;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        FunctionId::ALL
            .iter()
            .copied()
            .find(|id| id.to_string() == up)
            .ok_or_else(|| GpomError::InvalidConfig(format!("unknown function id '{s}'")))
    }
}

/// Sample a shift vector uniformly inside the function's shift range,
/// reproducibly from the seed.
pub fn sample_shift(id: FunctionId, d: usize, seed: u64) -> Vec<f64> {
    let (lo, hi) = id.shift_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Serializable description of a problem instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemSpec {
    pub id: FunctionId,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub shift: Vec<f64>,
}

/// A shifted objective: identity, dimension, box bounds, shift and an
/// evaluation counter. Immutable after construction except the counter,
/// which is safe to bump from concurrent evaluators.
#[derive(Debug)]
pub struct Problem {
    id: FunctionId,
    d: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    shift: Vec<f64>,
    seed: Option<u64>,
    evals: AtomicU64,
}

impl Clone for Problem {
    fn clone(&self) -> Self {
        Problem {
            id: self.id,
            d: self.d,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            shift: self.shift.clone(),
            seed: self.seed,
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl Problem {
    /// Build an instance with a seed-derived shift.
    pub fn new(id: FunctionId, d: usize, seed: u64) -> Result<Self> {
        let shift = sample_shift(id, d, seed);
        let mut p = Self::with_shift(id, d, shift)?;
        p.seed = Some(seed);
        Ok(p)
    }

    /// Build an instance from an explicit shift vector.
    pub fn with_shift(id: FunctionId, d: usize, shift: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(GpomError::InvalidConfig("dimension must be positive".into()));
        }
        if shift.len() != d {
            return Err(GpomError::InvalidConfig(format!(
                "shift length {} does not match dimension {d}",
                shift.len()
            )));
        }
        let (slo, shi) = id.shift_range();
        if shift.iter().any(|&w| !(slo..=shi).contains(&w) || !w.is_finite()) {
            return Err(GpomError::InvalidConfig(format!(
                "shift outside [{slo}, {shi}] for {id}"
            )));
        }
        let (lo, hi) = id.x_range();
        Ok(Problem {
            id,
            d,
            lower: vec![lo; d],
            upper: vec![hi; d],
            shift,
            seed: None,
            evals: AtomicU64::new(0),
        })
    }

    pub fn from_spec(spec: &ProblemSpec) -> Result<Self> {
        let mut p = Self::with_shift(spec.id, spec.d, spec.shift.clone())?;
        p.seed = spec.seed;
        Ok(p)
    }

    pub fn spec(&self) -> ProblemSpec {
        ProblemSpec {
            id: self.id,
            d: self.d,
            seed: self.seed,
            shift: self.shift.clone(),
        }
    }

    pub fn id(&self) -> FunctionId {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// Objective evaluations consumed so far (one per row per `eval` call).
    pub fn evals_used(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn check_dim(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.cols() != self.d {
            return Err(GpomError::ShapeMismatch {
                op,
                left: x.shape(),
                right: (x.rows(), self.d),
            });
        }
        Ok(())
    }

    /// Evaluate every row of `x`; bumps the evaluation counter by the row
    /// count. Callers are expected to clip into bounds first.
    pub fn eval(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(x, "problem eval")?;
        self.evals.fetch_add(x.rows() as u64, Ordering::Relaxed);
        let mut out = Vec::with_capacity(x.rows());
        let mut z = vec![0.0; self.d];
        for i in 0..x.rows() {
            let row = x.row(i);
            for j in 0..self.d {
                z[j] = row[j] - self.shift[j];
            }
            out.push(value_of(self.id, &z));
        }
        Ok(out)
    }

    /// Analytic subgradient of every row. Does not count against the
    /// evaluation budget; it exists so training losses can differentiate
    /// through fitness.
    pub fn grad(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x, "problem grad")?;
        let mut out = Tensor::zeros(x.rows(), self.d);
        let mut z = vec![0.0; self.d];
        for i in 0..x.rows() {
            let row = x.row(i);
            for j in 0..self.d {
                z[j] = row[j] - self.shift[j];
            }
            grad_of(self.id, &z, out.row_mut(i));
        }
        Ok(out)
    }

    /// Componentwise clamp of `x` into the bounds (value level).
    pub fn clip(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.lower[j], self.upper[j]);
            }
        }
        out
    }
}

fn value_of(id: FunctionId, z: &[f64]) -> f64 {
    let d = z.len();
    match id {
        FunctionId::Tf1 => z.iter().map(|v| v.abs()).sum(),
        FunctionId::Tf2 => {
            let pairs: f64 = z.windows(2).map(|w| (w[0] + w[1]).abs()).sum();
            let singles: f64 = z.iter().map(|v| v.abs()).sum();
            pairs + singles
        }
        FunctionId::Tf3 => z.iter().map(|v| v * v).sum(),
        FunctionId::Tf4 => z.iter().fold(0.0, |m, v| m.max(v.abs())),
        FunctionId::Tf5 => z
            .windows(2)
            .map(|w| 100.0 * (w[0] * w[0] - w[1]).powi(2) + (w[0] - 1.0).powi(2))
            .sum(),
        FunctionId::Tf6 => z
            .iter()
            .map(|v| v * v - 10.0 * (2.0 * PI * v).cos() + 10.0)
            .sum(),
        FunctionId::Tf7 => {
            let quad: f64 = z.iter().map(|v| v * v / 4000.0).sum();
            let prod: f64 = z
                .iter()
                .enumerate()
                .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
                .product();
            quad - prod + 1.0
        }
        FunctionId::Tf8 => {
            let n = d as f64;
            let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / n;
            let mean_cos = z.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
            -20.0 * (-0.2 * mean_sq.sqrt()).exp() - mean_cos.exp() + 20.0 + E
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grad_of(id: FunctionId, z: &[f64], out: &mut [f64]) {
    let d = z.len();
    match id {
        FunctionId::Tf1 => {
            for j in 0..d {
                out[j] = sign(z[j]);
            }
        }
        FunctionId::Tf2 => {
            for j in 0..d {
                let mut g = sign(z[j]);
                if j > 0 {
                    g += sign(z[j - 1] + z[j]);
                }
                if j + 1 < d {
                    g += sign(z[j] + z[j + 1]);
                }
                out[j] = g;
            }
        }
        FunctionId::Tf3 => {
            for j in 0..d {
                out[j] = 2.0 * z[j];
            }
        }
        FunctionId::Tf4 => {
            let mut best = 0usize;
            for (j, v) in z.iter().enumerate() {
                if v.abs() > z[best].abs() {
                    best = j;
                }
            }
            out.fill(0.0);
            out[best] = sign(z[best]);
        }
        FunctionId::Tf5 => {
            out.fill(0.0);
            for j in 0..d.saturating_sub(1) {
                let gap = z[j] * z[j] - z[j + 1];
                out[j] += 400.0 * z[j] * gap + 2.0 * (z[j] - 1.0);
                out[j + 1] += -200.0 * gap;
            }
        }
        FunctionId::Tf6 => {
            for j in 0..d {
                out[j] = 2.0 * z[j] + 20.0 * PI * (2.0 * PI * z[j]).sin();
            }
        }
        FunctionId::Tf7 => {
            // Leave-one-out cosine products via prefix/suffix sweeps.
            let cosines: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
                .collect();
            let mut prefix = vec![1.0; d + 1];
            for j in 0..d {
                prefix[j + 1] = prefix[j] * cosines[j];
            }
            let mut suffix = vec![1.0; d + 1];
            for j in (0..d).rev() {
                suffix[j] = suffix[j + 1] * cosines[j];
            }
            for j in 0..d {
                let root = ((j + 1) as f64).sqrt();
                let rest = prefix[j] * suffix[j + 1];
                out[j] = z[j] / 2000.0 + (z[j] / root).sin() / root * rest;
            }
        }
        FunctionId::Tf8 => {
            let n = d as f64;
            let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / n;
            let s = mean_sq.sqrt();
            let mean_cos = z.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
            let ea = (-0.2 * s).exp();
            let ec = mean_cos.exp();
            for j in 0..d {
                let radial = if s > 0.0 { 4.0 * ea * z[j] / (n * s) } else { 0.0 };
                out[j] = radial + 2.0 * PI / n * ec * (2.0 * PI * z[j]).sin();
            }
        }
    }
}
