//! Permutation-gate ablations: sweep `gamma`, `prob`, and the layer position
//! for one strategy and one attack method, scoring each grid cell with the
//! same protocol as a full transfer run.
//!
//! Cells share the transfer harness's method-level seeding, so the
//! `gamma = 0` and `prob = 0` cells replay the bare method's random stream
//! exactly and land on the baseline numbers bit-for-bit.

use crate::attacks::{AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fp::{FpConfig, FpStrategy};
use crate::harness::transfer::{run_transfer_matrix, ExperimentConfig, ModelSet, VariantSpec};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Grid specification for one ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub strategy: FpStrategy,
    pub gammas: Vec<f32>,
    pub probs: Vec<f32>,
    pub positions: Vec<usize>,
    pub method: AttackMethod,
    pub master_seed: u64,
    pub eval_count: usize,
    pub reps: usize,
    pub chunk: usize,
    pub attack: AttackConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            strategy: FpStrategy::Neighborhood,
            gammas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            probs: vec![0.5],
            positions: vec![2],
            method: AttackMethod::Ifgsm,
            master_seed: 1,
            eval_count: 200,
            reps: 3,
            chunk: 50,
            attack: AttackConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.strategy.is_active() {
            return Err(Error::config("ablation needs an active permutation strategy"));
        }
        if self.gammas.is_empty() || self.probs.is_empty() || self.positions.is_empty() {
            return Err(Error::config("ablation grid axes must be non-empty"));
        }
        Ok(())
    }
}

/// Results for one `(gamma, prob, position, target)` combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub gamma: f32,
    pub prob: f32,
    pub position: usize,
    pub target: String,
    pub mean_asr: f64,
    pub std_asr: f64,
}

/// Run the sweep. Grid cells run sequentially; each cell reuses the transfer
/// matrix machinery with a single variant.
pub fn run_ablation(models: &ModelSet, subset: &Dataset, cfg: &AblationConfig) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &position in &cfg.positions {
        for &gamma in &cfg.gammas {
            for &prob in &cfg.probs {
                let fp = FpConfig {
                    strategy: cfg.strategy,
                    gamma,
                    prob,
                    position,
                    ..FpConfig::default()
                };
                let run_cfg = ExperimentConfig {
                    master_seed: cfg.master_seed,
                    eval_count: subset.len(),
                    reps: cfg.reps,
                    chunk: cfg.chunk,
                    surrogate: models.surrogate.name().to_string(),
                    targets: models.targets.iter().map(|(n, _)| n.clone()).collect(),
                    variants: vec![VariantSpec::new(cfg.method, fp)],
                    attack: AttackConfig {
                        method: cfg.method,
                        ..cfg.attack.clone()
                    },
                };
                let outcome = run_transfer_matrix(models, subset, &run_cfg)?;
                for cell in outcome.cells {
                    cells.push(AblationCell {
                        gamma,
                        prob,
                        position,
                        target: cell.target,
                        mean_asr: cell.mean,
                        std_asr: cell.std,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Deterministic CSV rendering of a sweep.
pub fn render_ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("gamma,prob,position,target,mean_asr,std_asr\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            c.gamma, c.prob, c.position, c.target, c.mean_asr, c.std_asr
        );
    }
    out
}
