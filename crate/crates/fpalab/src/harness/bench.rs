//! Paired wall-clock comparison of attack variants.
//!
//! Variants run interleaved (round-robin) so slow drifts in machine load hit
//! every variant evenly, the first round is discarded as warm-up, and the
//! reported figure is the median over the remaining rounds — all standard
//! guards against the noise of a shared host.

use crate::attacks::{run_attack, AttackConfig, AttackInputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::Surrogate;

/// Median seconds per attack iteration for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub label: String,
    pub seconds_per_iteration: f64,
    /// Per-round figures after warm-up removal, in round order.
    pub rounds: Vec<f64>,
}

/// Median of a non-empty, finite sample (mean of the middle pair for even
/// sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timing values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Time each labeled surrogate on the same batch for `rounds` interleaved
/// rounds (plus one discarded warm-up round each).
pub fn paired_attack_bench(
    variants: &[(String, Surrogate)],
    images: &Tensor,
    labels: &[u8],
    attack: &AttackConfig,
    rounds: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if variants.is_empty() {
        return Err(Error::config("bench needs at least one variant"));
    }
    if rounds == 0 {
        return Err(Error::config("bench needs at least one measured round"));
    }
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(rounds); variants.len()];
    for round in 0..rounds + 1 {
        for (i, (_, surrogate)) in variants.iter().enumerate() {
            let started = std::time::Instant::now();
            run_attack(
                surrogate,
                &AttackInputs {
                    images,
                    labels,
                    mix_pool: None,
                },
                attack,
                seed,
            )?;
            let elapsed = started.elapsed().as_secs_f64();
            if round > 0 {
                times[i].push(elapsed / attack.iterations as f64);
            }
        }
    }
    Ok(variants
        .iter()
        .zip(times)
        .map(|((label, _), rounds)| BenchResult {
            label: label.clone(),
            seconds_per_iteration: median(&rounds),
            rounds,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::FpConfig;
    use crate::seeds::rng_from_seed;
    use crate::testutil::tiny_cnn_spec;
    use crate::zoo::{build_model, insert_fp_layer};

    #[test]
    fn median_handles_odd_and_even_samples() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn bench_produces_one_result_per_variant() {
        let model = build_model(&tiny_cnn_spec(), &mut rng_from_seed(90)).unwrap();
        let variants = vec![
            (
                "off".to_string(),
                insert_fp_layer(model.clone(), FpConfig::off()).unwrap(),
            ),
            (
                "fpa-n".to_string(),
                insert_fp_layer(model, FpConfig::neighborhood(0.6, 0.5, 2)).unwrap(),
            ),
        ];
        let images = Tensor::uniform(&[4, 1, 8, 8], 0.0, 1.0, &mut rng_from_seed(91));
        let labels = vec![0, 1, 0, 1];
        let attack = AttackConfig {
            iterations: 3,
            ..AttackConfig::default()
        };
        let results = paired_attack_bench(&variants, &images, &labels, &attack, 3, 7).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.rounds.len(), 3);
            assert!(r.seconds_per_iteration > 0.0);
            assert!(r.rounds.iter().all(|&t| t.is_finite() && t > 0.0));
        }
        assert_eq!(results[0].label, "off");

        assert!(paired_attack_bench(&variants, &images, &labels, &attack, 0, 7).is_err());
    }
}
