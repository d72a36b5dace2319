//! Population descriptors: standardized fitness and centered ranks.

use crate::error::{GpomError, Result};
use crate::tensor::Tensor;

/// `(f - mean) / std` with the population (biased) standard deviation.
/// Returns all zeros when the std falls below 1e-12.
///
/// Must stay formula-identical to the tape's column standardization; a test
/// holds the two together.
pub fn normalize_fitness(f: &[f64]) -> Result<Vec<f64>> {
    let n = f.len();
    if n < 2 {
        return Err(GpomError::Contract {
            op: "normalize_fitness",
            msg: format!("need at least 2 values, got {n}"),
        });
    }
    let mu = f.iter().sum::<f64>() / n as f64;
    let var = f.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    if sigma < 1e-12 {
        return Ok(vec![0.0; n]);
    }
    Ok(f.iter().map(|v| (v - mu) / sigma).collect())
}

/// Centered rank feature: rank 1 is the best (lowest) fitness, ties broken by
/// lower index, mapped to `(rank / n - 0.5) * 2`.
pub fn centered_rank(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for (pos, &idx) in order.iter().enumerate() {
        let rank = (pos + 1) as f64;
        out[idx] = (rank / n as f64 - 0.5) * 2.0;
    }
    out
}

/// N x 2 descriptor of a population: standardized fitness and centered rank.
pub fn build_h(fitness: &[f64]) -> Result<Tensor> {
    let norm = normalize_fitness(fitness)?;
    let rank = centered_rank(fitness);
    let n = fitness.len();
    let mut h = Tensor::zeros(n, 2);
    for i in 0..n {
        h.set(i, 0, norm[i]);
        h.set(i, 1, rank[i]);
    }
    Ok(h)
}

/// N x 4 descriptor for the crossover module: the population's standardized
/// fitness/rank followed by the mutants', each standardized within its own
/// fitness vector.
pub fn build_z(x_fit: &[f64], v_fit: &[f64]) -> Result<Tensor> {
    if x_fit.len() != v_fit.len() {
        return Err(GpomError::Contract {
            op: "build_z",
            msg: format!("{} vs {} fitness entries", x_fit.len(), v_fit.len()),
        });
    }
    let fx = normalize_fitness(x_fit)?;
    let rx = centered_rank(x_fit);
    let fv = normalize_fitness(v_fit)?;
    let rv = centered_rank(v_fit);
    let n = x_fit.len();
    let mut z = Tensor::zeros(n, 4);
    for i in 0..n {
        z.set(i, 0, fx[i]);
        z.set(i, 1, rx[i]);
        z.set(i, 2, fv[i]);
        z.set(i, 3, rv[i]);
    }
    Ok(z)
}
