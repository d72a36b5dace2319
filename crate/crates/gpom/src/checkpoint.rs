//! Versioned JSON parameter files.
//!
//! The writer is hand-rolled so the byte layout is fully deterministic:
//! fixed key order, row-major arrays, every float printed as a decimal with
//! 17 significant digits. That makes save -> load -> save byte-identical and
//! the parsed values bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{GpomError, Result};
use crate::model::{AblationMode, GpomConfig, Theta, ThetaLcm, ThetaLmm};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Provenance block embedded in a checkpoint.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrainMeta {
    pub task_ids: Vec<String>,
    pub epochs: u32,
    pub seed: u64,
    pub lr: f64,
    pub final_mean_loss: Option<f64>,
}

/// A trained (or freshly initialized) model on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub d_m: usize,
    pub d_c: usize,
    pub r_mask: f64,
    pub temperature: f64,
    pub theta: Theta,
    pub train_meta: Option<TrainMeta>,
}

impl Checkpoint {
    pub fn new(cfg: &GpomConfig, theta: Theta, train_meta: Option<TrainMeta>) -> Result<Self> {
        theta.validate_shapes(cfg.d_m, cfg.d_c)?;
        Ok(Checkpoint {
            d_m: cfg.d_m,
            d_c: cfg.d_c,
            r_mask: cfg.r_mask,
            temperature: cfg.temperature,
            theta,
            train_meta,
        })
    }

    /// Model config for running this checkpoint.
    pub fn config(&self) -> GpomConfig {
        GpomConfig {
            d_m: self.d_m,
            d_c: self.d_c,
            r_mask: self.r_mask,
            temperature: self.temperature,
            gumbel_noise: false,
            ablation: AblationMode::Full,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\"format\":");
        let _ = write!(out, "{FORMAT_VERSION}");
        let _ = write!(out, ",\"d_m\":{},\"d_c\":{}", self.d_m, self.d_c);
        let _ = write!(out, ",\"r_mask\":{}", fmt_f64(self.r_mask));
        let _ = write!(out, ",\"temperature\":{}", fmt_f64(self.temperature));
        out.push_str(",\"theta1\":{");
        let lmm = &self.theta.lmm;
        write_tensor_field(&mut out, "W_m1", &lmm.w_m1, false);
        write_tensor_field(&mut out, "W_m2", &lmm.w_m2, true);
        write_tensor_field(&mut out, "W_m3", &lmm.w_m3, true);
        write_tensor_field(&mut out, "b_m1", &lmm.b_m1, true);
        write_tensor_field(&mut out, "b_m2", &lmm.b_m2, true);
        write_tensor_field(&mut out, "b_m3", &lmm.b_m3, true);
        out.push_str("},\"theta2\":{");
        let lcm = &self.theta.lcm;
        write_tensor_field(&mut out, "W_c1", &lcm.w_c1, false);
        write_tensor_field(&mut out, "b_c1", &lcm.b_c1, true);
        write_tensor_field(&mut out, "W_c2", &lcm.w_c2, true);
        write_tensor_field(&mut out, "b_c2", &lcm.b_c2, true);
        write_tensor_field(&mut out, "ln_gain", &lcm.ln_gain, true);
        write_tensor_field(&mut out, "ln_bias", &lcm.ln_bias, true);
        out.push_str("},\"train_meta\":");
        match &self.train_meta {
            None => out.push_str("null"),
            Some(meta) => {
                out.push_str("{\"task_ids\":[");
                for (i, id) in meta.task_ids.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "\"{id}\"");
                }
                let _ = write!(out, "],\"epochs\":{},\"seed\":{}", meta.epochs, meta.seed);
                let _ = write!(out, ",\"lr\":{}", fmt_f64(meta.lr));
                out.push_str(",\"final_mean_loss\":");
                match meta.final_mean_loss {
                    None => out.push_str("null"),
                    Some(v) => out.push_str(&fmt_f64(v)),
                }
                out.push('}');
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let root: Value = serde_json::from_str(text)
            .map_err(|e| GpomError::Checkpoint(format!("parse failure: {e}")))?;
        let format = root
            .get("format")
            .and_then(Value::as_u64)
            .ok_or_else(|| GpomError::Checkpoint("missing format field".into()))?;
        if format != FORMAT_VERSION as u64 {
            return Err(GpomError::Checkpoint(format!(
                "unsupported format version {format} (expected {FORMAT_VERSION})"
            )));
        }
        let d_m = get_usize(&root, "d_m")?;
        let d_c = get_usize(&root, "d_c")?;
        let r_mask = get_f64(&root, "r_mask")?;
        let temperature = get_f64(&root, "temperature")?;
        let theta1 = root
            .get("theta1")
            .ok_or_else(|| GpomError::Checkpoint("missing theta1".into()))?;
        let theta2 = root
            .get("theta2")
            .ok_or_else(|| GpomError::Checkpoint("missing theta2".into()))?;
        let theta = Theta {
            lmm: ThetaLmm {
                w_m1: read_tensor(theta1, "W_m1")?,
                w_m2: read_tensor(theta1, "W_m2")?,
                w_m3: read_tensor(theta1, "W_m3")?,
                b_m1: read_tensor(theta1, "b_m1")?,
                b_m2: read_tensor(theta1, "b_m2")?,
                b_m3: read_tensor(theta1, "b_m3")?,
            },
            lcm: ThetaLcm {
                w_c1: read_tensor(theta2, "W_c1")?,
                b_c1: read_tensor(theta2, "b_c1")?,
                w_c2: read_tensor(theta2, "W_c2")?,
                b_c2: read_tensor(theta2, "b_c2")?,
                ln_gain: read_tensor(theta2, "ln_gain")?,
                ln_bias: read_tensor(theta2, "ln_bias")?,
            },
        };
        theta
            .validate_shapes(d_m, d_c)
            .map_err(|e| GpomError::Checkpoint(e.to_string()))?;
        let train_meta = match root.get("train_meta") {
            None | Some(Value::Null) => None,
            Some(meta) => Some(TrainMeta {
                task_ids: meta
                    .get("task_ids")
                    .and_then(Value::as_array)
                    .map(|a| {
                        a.iter()
                            .filter_map(|v| v.as_str().map(str::to_owned))
                            .collect()
                    })
                    .unwrap_or_default(),
                epochs: meta.get("epochs").and_then(Value::as_u64).unwrap_or(0) as u32,
                seed: meta.get("seed").and_then(Value::as_u64).unwrap_or(0),
                lr: meta.get("lr").and_then(Value::as_f64).unwrap_or(0.0),
                final_mean_loss: meta.get("final_mean_loss").and_then(Value::as_f64),
            }),
        };
        Ok(Checkpoint {
            d_m,
            d_c,
            r_mask,
            temperature,
            theta,
            train_meta,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Decimal with 17 significant digits: lossless for every finite `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_tensor_field(out: &mut String, name: &str, t: &Tensor, comma: bool) {
    if comma {
        out.push(',');
    }
    let _ = write!(out, "\"{name}\":{{\"shape\":[{},{}],\"data\":[", t.rows(), t.cols());
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push_str("]}");
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|u| u as usize)
        .ok_or_else(|| GpomError::Checkpoint(format!("missing integer field '{key}'")))
}

fn get_f64(v: &Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| GpomError::Checkpoint(format!("missing float field '{key}'")))
}

fn read_tensor(group: &Value, name: &str) -> Result<Tensor> {
    let t = group
        .get(name)
        .ok_or_else(|| GpomError::Checkpoint(format!("missing tensor '{name}'")))?;
    let shape = t
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| GpomError::Checkpoint(format!("tensor '{name}' has no shape")))?;
    if shape.len() != 2 {
        return Err(GpomError::Checkpoint(format!("tensor '{name}' shape must have 2 entries")));
    }
    let rows = shape[0]
        .as_u64()
        .ok_or_else(|| GpomError::Checkpoint(format!("bad shape in '{name}'")))? as usize;
    let cols = shape[1]
        .as_u64()
        .ok_or_else(|| GpomError::Checkpoint(format!("bad shape in '{name}'")))? as usize;
    let data = t
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| GpomError::Checkpoint(format!("tensor '{name}' has no data")))?;
    let values: Option<Vec<f64>> = data.iter().map(Value::as_f64).collect();
    let values =
        values.ok_or_else(|| GpomError::Checkpoint(format!("non-numeric data in '{name}'")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GpomError::Checkpoint(format!("non-finite value in '{name}'")));
    }
    Tensor::new(rows, cols, values)
        .map_err(|e| GpomError::Checkpoint(format!("tensor '{name}': {e}")))
}
