//! Plain SGD-with-momentum training for zoo models.
//!
//! Training is deterministic in `(model init, dataset, hyper, seed)`: batch
//! order comes from a per-epoch seeded shuffle and all arithmetic is the
//! engine's fixed-order f32. If a batch loss turns non-finite the model is
//! rolled back to the last epoch boundary and a training error is returned.

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeds::rng_from;
use crate::tensor::Tensor;
use crate::zoo::model::{classify, ForwardOptions, Model};
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            epochs: 8,
            batch: 64,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0,1)", self.momentum)));
        }
        Ok(())
    }
}

/// Per-epoch progress record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_accuracy: f32,
}

/// One momentum-SGD update: `v <- mu*v + g; w <- w - lr*v`.
pub fn sgd_step(weights: &mut [f32], velocity: &mut [f32], grad: &[f32], lr: f32, momentum: f32) {
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Fraction of `data` the model labels correctly, evaluated in chunks.
pub fn accuracy(model: &Model, data: &Dataset, chunk: usize) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate accuracy on an empty dataset"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk_indices in indices.chunks(chunk.max(1)) {
        let batch = data.select(chunk_indices)?;
        let (pred, _) = classify(model, batch.images())?;
        correct += pred.iter().zip(batch.labels()).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Train in place, returning per-epoch loss and test accuracy.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    hyper: &Hyper,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    train_with_progress(model, train_set, test_set, hyper, seed, |_| {})
}

/// Like [`train`], but invokes `progress` after every completed epoch so
/// callers can stream status to a terminal or log.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    hyper: &Hyper,
    seed: u64,
    mut progress: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let index_of: HashMap<String, usize> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), i))
        .collect();
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut snapshot: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let mut stats = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(seed, "train/epoch", epoch as u64));
        let mut loss_sum = 0.0f64;

        for batch_indices in order.chunks(hyper.batch) {
            let batch = train_set.select(batch_indices)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.images().clone());
            let pass = model.forward(
                &mut tape,
                x,
                &ForwardOptions {
                    train_params: true,
                    fp: None,
                },
            )?;
            let loss = tape.cross_entropy(pass.logits, batch.labels())?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                for ((_, param), saved) in model.params_mut().iter_mut().zip(&snapshot) {
                    *param = saved.clone();
                }
                return Err(Error::Training {
                    epoch,
                    detail: format!(
                        "loss became {loss_value} mid-epoch; model rolled back to the last epoch boundary"
                    ),
                });
            }
            loss_sum += loss_value as f64 * batch_indices.len() as f64;
            tape.backward(loss)?;
            for (name, node) in &pass.params {
                let Some(grad) = tape.grad(*node) else { continue };
                let idx = index_of[name];
                sgd_step(
                    model.params_mut()[idx].1.data_mut(),
                    &mut velocity[idx],
                    grad,
                    hyper.lr,
                    hyper.momentum,
                );
            }
        }

        let test_accuracy = accuracy(model, test_set, 256)?;
        let entry = EpochStats {
            epoch,
            train_loss: (loss_sum / train_set.len() as f64) as f32,
            test_accuracy,
        };
        progress(&entry);
        stats.push(entry);
        for (saved, (_, param)) in snapshot.iter_mut().zip(model.params()) {
            *saved = param.clone();
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;
    use crate::testutil::{halves_dataset, tiny_cnn_spec};
    use crate::zoo::model::build_model;

    #[test]
    fn sgd_step_matches_hand_computed_quadratic() {
        // f(w) = w^2/2, grad = w, lr=0.1, mu=0.9 from w=1:
        // v1 = 1.0, w1 = 0.9; v2 = 0.9*1.0 + 0.9 = 1.8, w2 = 0.9 - 0.18 = 0.72.
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        let g1 = [w[0]];
        sgd_step(&mut w, &mut v, &g1, 0.1, 0.9);
        assert!((w[0] - 0.9).abs() < 1e-6);
        let g2 = [w[0]];
        sgd_step(&mut w, &mut v, &g2, 0.1, 0.9);
        assert!((w[0] - 0.72).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = halves_dataset(32, 31);
        let mut model = build_model(&tiny_cnn_spec(), &mut rng_from_seed(32)).unwrap();
        let before: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let acc_before = accuracy(&model, &data, 16).unwrap();
        let hyper = Hyper {
            epochs: 2,
            batch: 8,
            lr: 0.0,
            momentum: 0.9,
        };
        train(&mut model, &data, &data, &hyper, 5).unwrap();
        for ((_, after), b) in model.params().iter().zip(&before) {
            assert!(after.bit_eq(b));
        }
        assert_eq!(accuracy(&model, &data, 16).unwrap(), acc_before);
    }

    #[test]
    fn tiny_cnn_learns_the_halves_task() {
        let train_set = halves_dataset(256, 33);
        let test_set = halves_dataset(64, 34);
        let mut model = build_model(&tiny_cnn_spec(), &mut rng_from_seed(35)).unwrap();
        let hyper = Hyper {
            epochs: 3,
            batch: 16,
            lr: 0.05,
            momentum: 0.9,
        };
        let stats = train(&mut model, &train_set, &test_set, &hyper, 36).unwrap();
        assert_eq!(stats.len(), 3);
        let first = stats.first().unwrap().train_loss;
        let last = stats.last().unwrap().train_loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
        // Epoch losses non-increasing within 5% noise tolerance.
        for pair in stats.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss * 1.05,
                "loss regressed beyond tolerance: {stats:?}"
            );
        }
        assert!(
            stats.last().unwrap().test_accuracy > 0.9,
            "separable task should be learned: {stats:?}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = halves_dataset(64, 37);
        let run = || {
            let mut model = build_model(&tiny_cnn_spec(), &mut rng_from_seed(38)).unwrap();
            let hyper = Hyper {
                epochs: 1,
                batch: 16,
                lr: 0.05,
                momentum: 0.9,
            };
            train(&mut model, &train_set, &train_set, &hyper, 39).unwrap();
            model
        };
        let (a, b) = (run(), run());
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params()) {
            assert!(ta.bit_eq(tb));
        }
    }

    #[test]
    fn divergence_rolls_back_and_reports_the_epoch() {
        let data = halves_dataset(64, 40);
        let mut model = build_model(&tiny_cnn_spec(), &mut rng_from_seed(41)).unwrap();
        let before: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let hyper = Hyper {
            epochs: 2,
            batch: 8,
            lr: 1e12,
            momentum: 0.9,
        };
        let err = train(&mut model, &data, &data, &hyper, 42).unwrap_err();
        match err {
            Error::Training { epoch, .. } => assert_eq!(epoch, 0),
            other => panic!("expected a training error, got {other}"),
        }
        for ((_, after), b) in model.params().iter().zip(&before) {
            assert!(after.bit_eq(b), "rollback must restore the last good parameters");
        }
    }

    #[test]
    fn invalid_hyper_is_a_config_error() {
        assert!(Hyper { batch: 0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { lr: f32::NAN, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { momentum: 1.0, ..Hyper::default() }.validate().is_err());
        Hyper::default().validate().unwrap();
    }
}
