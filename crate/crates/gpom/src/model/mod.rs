//! The learnable population optimizer: trainable mutation and crossover
//! modules, feature construction, masking, straight-through crossover and
//! 1-to-1 selection, composed into one evolution step and a T-step rollout.

mod features;
mod pipeline;

pub use features::{build_h, build_z, centered_rank, normalize_fitness};
pub use pipeline::{
    apply_mask, build_step, crossover_st, gpom_rollout, gpom_step, gpom_step_detailed,
    gpom_step_with, lcm_forward, lmm_forward, mutate, push_theta, sample_keep_mask,
    sample_step_randomness, select_sm, selection_mask, GenStat, LcmVars, LmmVars,
    RolloutOptions, RolloutResult, StepDetail, StepRandomness, StepVars, StrategyDump, ThetaVars,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::Problem;
use crate::error::{GpomError, Result};
use crate::tensor::Tensor;

/// Architecture presets: hidden widths of the mutation and crossover modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Preset {
    Vs,
    S,
    M,
    L,
    Vl,
    Xl,
}

impl Preset {
    pub fn widths(&self) -> (usize, usize) {
        match self {
            Preset::Vs => (200, 4),
            Preset::S => (500, 4),
            Preset::M => (1000, 4),
            Preset::L => (2000, 20),
            Preset::Vl => (5000, 50),
            Preset::Xl => (10000, 100),
        }
    }
}

/// Which pipeline stage, if any, is replaced by its non-learnable fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Full model.
    #[default]
    Full,
    /// Strategy matrix replaced by randomized rand/1 coefficient rows (F=0.5).
    NoLmm,
    /// Crossover rates replaced by a constant 0.5 (binomial crossover).
    NoLcm,
    /// Masking disabled (r_mask treated as 0).
    NoMask,
    /// Freshly sampled parameters; the step itself behaves like `Full`.
    Untrained,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoLmm,
        AblationMode::NoLcm,
        AblationMode::NoMask,
        AblationMode::Untrained,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoLmm => "no-lmm",
            AblationMode::NoLcm => "no-lcm",
            AblationMode::NoMask => "no-mask",
            AblationMode::Untrained => "untrained",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = GpomError;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .iter()
            .copied()
            .find(|m| m.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| GpomError::InvalidConfig(format!("unknown ablation mode '{s}'")))
    }
}

fn default_r_mask() -> f64 {
    0.5
}

fn default_temperature() -> f64 {
    1.0
}

/// Model architecture and step behaviour.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpomConfig {
    /// Hidden width of the mutation module.
    pub d_m: usize,
    /// Hidden width of the crossover module.
    pub d_c: usize,
    /// Probability of zeroing each strategy entry, resampled every generation.
    #[serde(default = "default_r_mask")]
    pub r_mask: f64,
    /// Straight-through softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Add Gumbel noise to the crossover comparison (off by default; the
    /// uniform draw already randomizes the hard choice).
    #[serde(default)]
    pub gumbel_noise: bool,
    #[serde(default)]
    pub ablation: AblationMode,
}

impl GpomConfig {
    pub fn preset(p: Preset) -> Self {
        let (d_m, d_c) = p.widths();
        GpomConfig {
            d_m,
            d_c,
            r_mask: default_r_mask(),
            temperature: default_temperature(),
            gumbel_noise: false,
            ablation: AblationMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.d_c == 0 {
            return Err(GpomError::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.r_mask) {
            return Err(GpomError::InvalidConfig(format!(
                "r_mask {} outside [0, 1]",
                self.r_mask
            )));
        }
        if self.temperature <= 0.0 {
            return Err(GpomError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Mask probability with the no-mask ablation applied.
    pub fn effective_r_mask(&self) -> f64 {
        if self.ablation == AblationMode::NoMask {
            0.0
        } else {
            self.r_mask
        }
    }

    /// Non-default presets carry two d_m x d_m weight matrices; surface how
    /// large that is before someone trains one by accident.
    pub fn scale_warning(&self) -> Option<String> {
        if self.d_m > 200 {
            let params = 2 * self.d_m + 2 * self.d_m * self.d_m + 3 * self.d_m;
            Some(format!(
                "d_m = {} allocates ~{params} mutation-module parameters; training cost grows quadratically",
                self.d_m
            ))
        } else {
            None
        }
    }
}

impl Default for GpomConfig {
    fn default() -> Self {
        GpomConfig::preset(Preset::Vs)
    }
}

/// Trainable parameters of the mutation module.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLmm {
    pub w_m1: Tensor,
    pub w_m2: Tensor,
    pub w_m3: Tensor,
    pub b_m1: Tensor,
    pub b_m2: Tensor,
    pub b_m3: Tensor,
}

/// Trainable parameters of the crossover module.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLcm {
    pub w_c1: Tensor,
    pub b_c1: Tensor,
    pub w_c2: Tensor,
    pub b_c2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub lmm: ThetaLmm,
    pub lcm: ThetaLcm,
}

/// Canonical parameter names, aligned with [`Theta::tensors`].
pub const THETA_NAMES: [&str; 12] = [
    "W_m1", "W_m2", "W_m3", "b_m1", "b_m2", "b_m3", "W_c1", "b_c1", "W_c2", "b_c2", "ln_gain",
    "ln_bias",
];

fn scaled_normal(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

impl Theta {
    /// Fresh parameters: fan-in-scaled normal weights, zero biases, identity
    /// layer norm. The untrained ablation uses exactly this.
    pub fn init(cfg: &GpomConfig, rng: &mut ChaCha8Rng) -> Theta {
        let (d_m, d_c) = (cfg.d_m, cfg.d_c);
        Theta {
            lmm: ThetaLmm {
                w_m1: scaled_normal(2, d_m, 2, rng),
                w_m2: scaled_normal(d_m, d_m, d_m, rng),
                w_m3: scaled_normal(d_m, d_m, d_m, rng),
                b_m1: Tensor::zeros(1, d_m),
                b_m2: Tensor::zeros(1, d_m),
                b_m3: Tensor::zeros(1, d_m),
            },
            lcm: ThetaLcm {
                w_c1: scaled_normal(4, d_c, 4, rng),
                b_c1: Tensor::zeros(1, d_c),
                w_c2: scaled_normal(d_c, 1, d_c, rng),
                b_c2: Tensor::zeros(1, 1),
                ln_gain: Tensor::filled(1, d_c, 1.0),
                ln_bias: Tensor::zeros(1, d_c),
            },
        }
    }

    /// Seeded init convenience.
    pub fn init_from_seed(cfg: &GpomConfig, seed: u64) -> Theta {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Theta::init(cfg, &mut rng)
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.lmm.w_m1,
            &self.lmm.w_m2,
            &self.lmm.w_m3,
            &self.lmm.b_m1,
            &self.lmm.b_m2,
            &self.lmm.b_m3,
            &self.lcm.w_c1,
            &self.lcm.b_c1,
            &self.lcm.w_c2,
            &self.lcm.b_c2,
            &self.lcm.ln_gain,
            &self.lcm.ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.lmm.w_m1,
            &mut self.lmm.w_m2,
            &mut self.lmm.w_m3,
            &mut self.lmm.b_m1,
            &mut self.lmm.b_m2,
            &mut self.lmm.b_m3,
            &mut self.lcm.w_c1,
            &mut self.lcm.b_c1,
            &mut self.lcm.w_c2,
            &mut self.lcm.b_c2,
            &mut self.lcm.ln_gain,
            &mut self.lcm.ln_bias,
        ]
    }

    pub fn expected_shapes(d_m: usize, d_c: usize) -> [(usize, usize); 12] {
        [
            (2, d_m),
            (d_m, d_m),
            (d_m, d_m),
            (1, d_m),
            (1, d_m),
            (1, d_m),
            (4, d_c),
            (1, d_c),
            (d_c, 1),
            (1, 1),
            (1, d_c),
            (1, d_c),
        ]
    }

    pub fn validate_shapes(&self, d_m: usize, d_c: usize) -> Result<()> {
        for ((t, expect), name) in self
            .tensors()
            .iter()
            .zip(Self::expected_shapes(d_m, d_c))
            .zip(THETA_NAMES)
        {
            if t.shape() != expect {
                return Err(GpomError::InvalidConfig(format!(
                    "{name} has shape {:?}, expected {expect:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(GpomError::NonFinite { op: "theta" });
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Candidate solutions with their cached fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x: Tensor,
    pub fitness: Vec<f64>,
    pub generation: u32,
}

impl Population {
    /// Sample uniformly inside the problem bounds and evaluate. The N setup
    /// evaluations count against the problem's counter but precede any
    /// per-generation budget accounting.
    pub fn init(problem: &Problem, n: usize, rng: &mut ChaCha8Rng) -> Result<Population> {
        let d = problem.dim();
        let mut x = Tensor::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = rng.gen_range(problem.lower()[j]..problem.upper()[j]);
            }
        }
        let fitness = problem.eval(&x)?;
        Ok(Population {
            x,
            fitness,
            generation: 0,
        })
    }

    pub fn from_parts(x: Tensor, fitness: Vec<f64>, generation: u32) -> Result<Population> {
        if fitness.len() != x.rows() {
            return Err(GpomError::Contract {
                op: "population",
                msg: format!("{} fitness entries for {} rows", fitness.len(), x.rows()),
            });
        }
        Ok(Population {
            x,
            fitness,
            generation,
        })
    }

    pub fn size(&self) -> usize {
        self.x.rows()
    }

    /// Best (lowest) cached fitness.
    pub fn best(&self) -> f64 {
        self.fitness.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_fitness(&self) -> f64 {
        self.fitness.iter().sum::<f64>() / self.fitness.len() as f64
    }
}
