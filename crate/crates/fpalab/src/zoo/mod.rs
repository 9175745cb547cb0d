//! The model zoo: heterogeneous classifier families, training, checkpoints,
//! and the surrogate wrapper that hosts the feature-permutation layer.

pub mod arch;
pub mod checkpoint;
pub mod model;
pub mod train;

pub use arch::{ArchSpec, ImageDims};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
pub use model::{argmax_row, build_model, classify, ForwardOptions, ForwardPass, FpApplication, Model};
pub use train::{accuracy, train, train_with_progress, EpochStats, Hyper};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::fp::{FpConfig, PermutationPlan};

/// A model paired with a feature-permutation configuration. With the strategy
/// off, forward passes are bit-identical to the bare model's.
#[derive(Debug, Clone)]
pub struct Surrogate {
    model: Model,
    fp: FpConfig,
}

/// Attach a feature-permutation configuration to a model. An active strategy
/// requires a conv-net host and a position naming one of its blocks; the
/// layer itself is virtual, so the parameter set is untouched.
pub fn insert_fp_layer(model: Model, fp: FpConfig) -> Result<Surrogate> {
    fp.validate()?;
    if fp.strategy.is_active() {
        let ArchSpec::ConvNet(spec) = model.spec() else {
            return Err(Error::config(format!(
                "fp layer requires a conv-net host; {} is not one",
                model.name()
            )));
        };
        if fp.position == 0 || fp.position > spec.blocks.len() {
            return Err(Error::config(format!(
                "fp position {} out of range: {} has blocks 1..={}",
                fp.position,
                model.name(),
                spec.blocks.len()
            )));
        }
    }
    Ok(Surrogate { model, fp })
}

impl Surrogate {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn fp(&self) -> &FpConfig {
        &self.fp
    }

    /// `(channels, height, width)` of the activation the FP layer sees, or
    /// `None` when the strategy is off.
    pub fn fp_site_dims(&self) -> Option<(usize, usize, usize)> {
        if !self.fp.strategy.is_active() {
            return None;
        }
        let ArchSpec::ConvNet(spec) = self.model.spec() else {
            return None;
        };
        Some(spec.block_output_dims(self.fp.position))
    }

    /// Forward for attack generation: the input carries gradients, parameters
    /// are constants, and `plans` (when given) are applied at the FP site.
    pub fn forward_attack(&self, tape: &mut Tape, x: NodeId, plans: Option<&[PermutationPlan]>) -> Result<ForwardPass> {
        let fp = match plans {
            Some(p) if !p.is_empty() => Some(FpApplication {
                position: self.fp.position,
                plans: p,
            }),
            _ => None,
        };
        self.model.forward(
            tape,
            x,
            &ForwardOptions {
                train_params: false,
                fp,
            },
        )
    }
}
