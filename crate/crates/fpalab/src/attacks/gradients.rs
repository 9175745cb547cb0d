//! Gradient pipelines for the attack loop. Each returns the gradient of the
//! optimized objective with respect to the current iterate, together with the
//! objective value itself (batch mean).

use crate::autodiff::{NodeId, ResamplePlacement, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fp::PermutationPlan;
use crate::tensor::Tensor;
use crate::zoo::Surrogate;
use rand::Rng;
use std::collections::HashMap;

/// Input transform applied on-tape before the surrogate forward.
pub(crate) enum Preprocess<'a> {
    Identity,
    ResizePad(&'a [Option<ResamplePlacement>]),
}

/// Cross-entropy loss and its gradient with respect to `x`, optionally with a
/// differentiable resize-pad in front and permutation plans at the FP site.
pub(crate) fn input_gradient(
    surrogate: &Surrogate,
    x: &Tensor,
    labels: &[u8],
    plans: Option<&[PermutationPlan]>,
    pre: Preprocess<'_>,
) -> Result<(Tensor, f32)> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let fed = match pre {
        Preprocess::Identity => input,
        Preprocess::ResizePad(placements) => tape.resize_pad(input, placements.to_vec())?,
    };
    let pass = surrogate.forward_attack(&mut tape, fed, plans)?;
    let loss = tape.cross_entropy(pass.logits, labels)?;
    finish(tape, input, loss, x.shape())
}

/// Scale-invariant gradient: the mean cross-entropy over `copies` branches
/// that feed `x / 2^i` (i = 0..copies) through the surrogate, differentiated
/// in one backward sweep. The factor `1/2^i` participates in the chain rule.
pub fn sim_gradient(
    surrogate: &Surrogate,
    x: &Tensor,
    labels: &[u8],
    copies: usize,
    plans: Option<&[PermutationPlan]>,
) -> Result<(Tensor, f32)> {
    if copies == 0 {
        return Err(Error::config("scale-invariant gradient needs at least one copy"));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let mut total: Option<NodeId> = None;
    for i in 0..copies {
        let scaled = tape.scale(input, 0.5f32.powi(i as i32))?;
        let pass = surrogate.forward_attack(&mut tape, scaled, plans)?;
        let loss = tape.cross_entropy(pass.logits, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let objective = tape.scale(total.expect("at least one copy"), 1.0 / copies as f32)?;
    finish(tape, input, objective, x.shape())
}

/// Admixed gradient: the mean cross-entropy over `count` branches that feed
/// `x + eta * x''` through the surrogate, where each `x''` is drawn uniformly
/// from pool images whose class differs from the sample's own label. The
/// original labels are kept for every branch.
#[allow(clippy::too_many_arguments)]
pub fn admix_gradient(
    surrogate: &Surrogate,
    x: &Tensor,
    labels: &[u8],
    pool: &Dataset,
    count: usize,
    eta: f32,
    plans: Option<&[PermutationPlan]>,
    rng: &mut impl Rng,
) -> Result<(Tensor, f32)> {
    if count == 0 {
        return Err(Error::config("admix gradient needs at least one mixing branch"));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::config(format!("admix eta must be finite and non-negative, got {eta}")));
    }
    let s = x.shape();
    let (c, h, w) = pool.image_dims();
    if s.len() != 4 || [s[1], s[2], s[3]] != [c, h, w] {
        return Err(Error::dim(
            "admix_gradient",
            format!("batch {s:?} does not match pool images [{c}, {h}, {w}]"),
        ));
    }
    let n = s[0];
    let chw = c * h * w;
    let indices = draw_mix_indices(labels, pool.labels(), count, rng)?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let mut total: Option<NodeId> = None;
    for branch in 0..count {
        let mut mix = vec![0.0f32; x.len()];
        for i in 0..n {
            let src = indices[branch * n + i];
            let img = &pool.images().data()[src * chw..(src + 1) * chw];
            for (m, &v) in mix[i * chw..(i + 1) * chw].iter_mut().zip(img) {
                *m = eta * v;
            }
        }
        let addend = tape.constant(Tensor::new(s.to_vec(), mix)?);
        let mixed = tape.add(input, addend)?;
        let pass = surrogate.forward_attack(&mut tape, mixed, plans)?;
        let loss = tape.cross_entropy(pass.logits, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let objective = tape.scale(total.expect("at least one branch"), 1.0 / count as f32)?;
    finish(tape, input, objective, x.shape())
}

/// Draw `count` pool indices per sample, branch-major (`flat[branch*n + i]`),
/// uniform over the pool images whose label differs from the sample's.
pub(crate) fn draw_mix_indices(
    labels: &[u8],
    pool_labels: &[u8],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut candidates: HashMap<u8, Vec<usize>> = HashMap::new();
    for &label in labels {
        candidates.entry(label).or_insert_with(|| {
            pool_labels
                .iter()
                .enumerate()
                .filter(|&(_, &pl)| pl != label)
                .map(|(idx, _)| idx)
                .collect()
        });
    }
    for (&label, list) in &candidates {
        if list.is_empty() {
            return Err(Error::config(format!(
                "admix pool contains no image outside class {label}; mixing requires other classes"
            )));
        }
    }
    let n = labels.len();
    let mut flat = Vec::with_capacity(count * n);
    for _ in 0..count {
        for &label in labels {
            let list = &candidates[&label];
            flat.push(list[rng.gen_range(0..list.len())]);
        }
    }
    Ok(flat)
}

/// Per-sample random resize-pad placements: with probability `prob` a sample
/// is shrunk to `size in [ceil(min_ratio*w), w]` and placed at a uniformly
/// random offset inside the original canvas; otherwise it passes through.
pub fn sample_resize_placements(
    n: usize,
    h: usize,
    w: usize,
    prob: f32,
    min_ratio: f32,
    rng: &mut impl Rng,
) -> Result<Vec<Option<ResamplePlacement>>> {
    if h != w {
        return Err(Error::config(format!("random resize-pad expects square inputs, got {h}x{w}")));
    }
    if !(0.0..=1.0).contains(&prob) || !prob.is_finite() {
        return Err(Error::config(format!("resize probability must lie in [0, 1], got {prob}")));
    }
    if !(min_ratio > 0.0 && min_ratio <= 1.0) {
        return Err(Error::config(format!("resize ratio must lie in (0, 1], got {min_ratio}")));
    }
    let min_size = ((min_ratio as f64 * w as f64).ceil() as usize).clamp(1, w);
    Ok((0..n)
        .map(|_| {
            if rng.gen::<f32>() < prob {
                let size = rng.gen_range(min_size..=w);
                let top = rng.gen_range(0..=h - size);
                let left = rng.gen_range(0..=w - size);
                Some(ResamplePlacement { size, top, left })
            } else {
                None
            }
        })
        .collect())
}

/// Evaluate the objective, run one backward sweep, and pull the input grad.
fn finish(mut tape: Tape, input: NodeId, objective: NodeId, shape: &[usize]) -> Result<(Tensor, f32)> {
    let value = tape.value(objective).item()?;
    tape.backward(objective)?;
    let grad = tape
        .grad(input)
        .ok_or_else(|| Error::Tape("input gradient missing after backward".into()))?;
    Ok((Tensor::new(shape.to_vec(), grad.to_vec())?, value))
}
