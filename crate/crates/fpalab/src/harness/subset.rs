//! Evaluation subset selection and the attack success metric.
//!
//! Transfer rates are only meaningful on images every involved model gets
//! right to begin with, so the evaluation subset is the first `n` test images
//! that the surrogate and all targets classify correctly. Success is then
//! simply the fraction of adversarial examples a target misclassifies.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::model::{argmax_row, classify, Model};

/// Chunked inference batch size used throughout the harness.
pub const EVAL_CHUNK: usize = 256;

/// Per-image flags: `true` where `model` predicts the dataset label.
pub fn correctly_classified_mask(model: &Model, data: &Dataset) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.select(chunk)?;
        let (pred, _) = classify(model, batch.images())?;
        mask.extend(pred.iter().zip(batch.labels()).map(|(p, l)| p == l));
    }
    Ok(mask)
}

/// The first `n` images of `data` that every model classifies correctly, in
/// dataset order. Errs if fewer than `n` qualify.
pub fn build_eval_subset(models: &[&Model], data: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("evaluation subset size must be >= 1"));
    }
    if models.is_empty() {
        return Err(Error::config("evaluation subset needs at least one model"));
    }
    let mut all_correct = vec![true; data.len()];
    for model in models {
        for (flag, ok) in all_correct.iter_mut().zip(correctly_classified_mask(model, data)?) {
            *flag &= ok;
        }
    }
    let picked: Vec<usize> = all_correct
        .iter()
        .enumerate()
        .filter_map(|(i, &ok)| ok.then_some(i))
        .take(n)
        .collect();
    if picked.len() < n {
        return Err(Error::config(format!(
            "only {} of {} test images are classified correctly by all {} models; need {n}",
            picked.len(),
            data.len(),
            models.len()
        )));
    }
    data.select(&picked)
}

/// Fraction of `adversarials` that `target` labels as anything other than the
/// true class. On a subset built by [`build_eval_subset`] this is exactly the
/// attack success rate.
pub fn attack_success_rate(target: &Model, adversarials: &Tensor, labels: &[u8]) -> Result<f32> {
    let n = adversarials.shape()[0];
    if labels.len() != n {
        return Err(Error::dim(
            "attack_success_rate",
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::config("cannot score an empty batch"));
    }
    Ok(misclassified_count(target, adversarials, labels)? as f32 / n as f32)
}

/// Number of images in the batch that `target` misclassifies.
pub fn misclassified_count(target: &Model, adversarials: &Tensor, labels: &[u8]) -> Result<usize> {
    let s = adversarials.shape();
    let n = s[0];
    let per = adversarials.len() / n.max(1);
    let mut wrong = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(
            vec![end - start, s[1], s[2], s[3]],
            adversarials.data()[start * per..end * per].to_vec(),
        )?;
        let (_, logits) = classify(target, &chunk)?;
        let k = logits.shape()[1];
        wrong += logits
            .data()
            .chunks_exact(k)
            .zip(&labels[start..end])
            .filter(|(row, &label)| argmax_row(row) != label)
            .count();
    }
    Ok(wrong)
}
