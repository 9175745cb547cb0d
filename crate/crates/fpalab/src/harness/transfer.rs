//! The transfer matrix experiment: attack a surrogate, score every target.
//!
//! A run is a grid of jobs `(variant, repetition, image chunk)`. Each job
//! attacks one chunk of the shared evaluation subset with one attack variant
//! and counts, per target, how many adversarial images flip the prediction.
//! Jobs are independent (and run on the rayon pool when it has threads), but
//! their seeds and the final reduction depend only on the job's own
//! coordinates, so a run is a pure function of `(config, models, data)` and
//! its report is byte-stable across repeats and thread counts.
//!
//! Seeding detail that the degenerate-equivalence guarantee relies on: a job
//! seed mixes in the attack method, repetition, and chunk index — but not the
//! feature-permutation settings. A variant with the permutation layer off
//! therefore replays the exact random stream of its bare-method twin, and
//! per-rep results pair up across variants for low-variance comparisons.

use crate::attacks::{run_attack, AttackConfig, AttackInputs, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fp::{FpConfig, FpStrategy};
use crate::seeds::derive_seed;
use crate::zoo::{insert_fp_layer, Model};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default gates for the long-range random strategy: a third of the channels
/// eligible, a fifth of those moved, sited deep in the network.
pub const RANDOM_DEFAULTS: (f32, f32, usize) = (0.3, 0.2, 5);
/// Default gates for the neighbor-swap strategy: stronger gating, sited early.
pub const NEIGHBORHOOD_DEFAULTS: (f32, f32, usize) = (0.6, 0.5, 2);

/// The reference permutation settings for a strategy.
pub fn default_fp(strategy: FpStrategy) -> FpConfig {
    match strategy {
        FpStrategy::Off => FpConfig::off(),
        FpStrategy::Random => {
            let (g, p, pos) = RANDOM_DEFAULTS;
            FpConfig::random(g, p, pos)
        }
        FpStrategy::Neighborhood => {
            let (g, p, pos) = NEIGHBORHOOD_DEFAULTS;
            FpConfig::neighborhood(g, p, pos)
        }
    }
}

/// One attack variant: a gradient method plus a feature-permutation setting.
///
/// The text form is `method` or `method+strategy` (`"ifgsm"`,
/// `"mifgsm+fpa-n"`); strategies carry their reference gates.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub method: AttackMethod,
    pub fp: FpConfig,
}

impl VariantSpec {
    pub fn new(method: AttackMethod, fp: FpConfig) -> Self {
        VariantSpec { method, fp }
    }

    /// Report label, e.g. `"mifgsm+fpa-n"`.
    pub fn label(&self) -> String {
        if self.fp.strategy.is_active() {
            format!("{}+{}", self.method.tag(), self.fp.strategy.tag())
        } else {
            self.method.tag().to_string()
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method_tag, fp) = match s.split_once('+') {
            None => (s, FpConfig::off()),
            Some((m, "fpa-r")) => (m, default_fp(FpStrategy::Random)),
            Some((m, "fpa-n")) => (m, default_fp(FpStrategy::Neighborhood)),
            Some((_, other)) => {
                return Err(Error::config(format!(
                    "unknown permutation strategy '{other}' in variant '{s}' (expected fpa-r or fpa-n)"
                )))
            }
        };
        Ok(VariantSpec::new(method_tag.parse()?, fp))
    }
}

impl Serialize for VariantSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for VariantSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a transfer run needs besides models and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub master_seed: u64,
    /// Evaluation subset size (images all models classify correctly).
    pub eval_count: usize,
    /// Independent repetitions per variant.
    pub reps: usize,
    /// Images per attack job.
    pub chunk: usize,
    /// Surrogate model name (checkpoint stem).
    pub surrogate: String,
    /// Target model names (checkpoint stems).
    pub targets: Vec<String>,
    /// Attack variants to compare. The attack protocol below supplies every
    /// knob except the method, which each variant sets for itself.
    pub variants: Vec<VariantSpec>,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 1,
            eval_count: 500,
            reps: 5,
            chunk: 50,
            surrogate: "convnet-a".to_string(),
            targets: vec![
                "convnet-b".to_string(),
                "transformer".to_string(),
                "mixer".to_string(),
            ],
            variants: vec![
                VariantSpec::new(AttackMethod::Ifgsm, FpConfig::off()),
                VariantSpec::new(AttackMethod::Ifgsm, default_fp(FpStrategy::Neighborhood)),
                VariantSpec::new(AttackMethod::Mifgsm, FpConfig::off()),
                VariantSpec::new(AttackMethod::Mifgsm, default_fp(FpStrategy::Neighborhood)),
            ],
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_count == 0 {
            return Err(Error::config("eval_count must be >= 1"));
        }
        if self.reps == 0 {
            return Err(Error::config("reps must be >= 1"));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk must be >= 1"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("at least one target model is required"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("at least one attack variant is required"));
        }
        let mut labels: Vec<String> = self.variants.iter().map(VariantSpec::label).collect();
        labels.sort();
        if let Some(dup) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate variant '{}'", dup[0])));
        }
        for v in &self.variants {
            v.fp.validate()?;
        }
        self.attack.validate()
    }
}

/// The models a run touches: one surrogate, named targets.
pub struct ModelSet {
    pub surrogate: Model,
    pub targets: Vec<(String, Model)>,
}

impl ModelSet {
    /// Load `{name}.ckpt` for the surrogate and every target from `dir`.
    pub fn load(dir: &std::path::Path, surrogate: &str, targets: &[String]) -> Result<ModelSet> {
        let load_named = |name: &str| -> Result<Model> {
            let path = dir.join(format!("{name}.ckpt"));
            let (model, _) = crate::zoo::load_checkpoint(&path)?;
            if model.name() != name {
                return Err(Error::config(format!(
                    "{} holds a '{}' model, expected '{name}'",
                    path.display(),
                    model.name()
                )));
            }
            Ok(model)
        };
        let set = ModelSet {
            surrogate: load_named(surrogate)?,
            targets: targets
                .iter()
                .map(|name| Ok((name.clone(), load_named(name)?)))
                .collect::<Result<_>>()?,
        };
        set.validate()?;
        Ok(set)
    }

    /// Validate that every model agrees on input dimensions and class count.
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("model set has no targets"));
        }
        let dims = self.surrogate.spec().input();
        let classes = self.surrogate.spec().num_classes();
        for (name, model) in &self.targets {
            if model.spec().input() != dims {
                return Err(Error::config(format!(
                    "target '{name}' expects {:?} inputs but the surrogate expects {dims:?}",
                    model.spec().input()
                )));
            }
            if model.spec().num_classes() != classes {
                return Err(Error::config(format!(
                    "target '{name}' has {} classes but the surrogate has {classes}",
                    model.spec().num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn all_models(&self) -> Vec<&Model> {
        std::iter::once(&self.surrogate)
            .chain(self.targets.iter().map(|(_, m)| m))
            .collect()
    }
}

/// Seed for one attack job. Deliberately independent of the variant's
/// feature-permutation settings (see the module docs).
pub fn job_seed(master: u64, method: AttackMethod, rep: usize, chunk_index: usize) -> u64 {
    derive_seed(master, &format!("job/{}/rep{rep}", method.tag()), chunk_index as u64)
}

/// Success statistics for one `(variant, target)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub variant: String,
    pub target: String,
    /// Success rate of each repetition, in repetition order.
    pub per_rep: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-variant success averaged over all targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandStats {
    pub variant: String,
    pub per_rep: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Wall-clock record for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub variant: String,
    pub rep: usize,
    pub chunk_index: usize,
    pub images: usize,
    pub iterations: usize,
    pub seconds: f64,
}

/// Everything a transfer run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub eval_count: usize,
    pub cells: Vec<CellStats>,
    pub grand: Vec<GrandStats>,
    pub timings: Vec<JobTiming>,
}

impl RunOutcome {
    pub fn cell(&self, variant: &str, target: &str) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.variant == variant && c.target == target)
    }

    pub fn grand_for(&self, variant: &str) -> Option<&GrandStats> {
        self.grand.iter().find(|g| g.variant == variant)
    }
}

/// Sample mean and standard deviation (n-1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

struct JobSpec {
    variant_index: usize,
    rep: usize,
    chunk_index: usize,
    start: usize,
    end: usize,
}

struct JobResult {
    /// Misclassified count per target, in target order.
    misses: Vec<usize>,
    seconds: f64,
}

/// Run the full matrix. `subset` must already be the evaluation subset (all
/// models correct on every image); use [`prepare_run`] to build it from a raw
/// test split.
pub fn run_transfer_matrix(models: &ModelSet, subset: &Dataset, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    models.validate()?;
    let n = subset.len();
    if n == 0 {
        return Err(Error::config("evaluation subset is empty"));
    }

    let mut jobs = Vec::new();
    for (variant_index, _) in cfg.variants.iter().enumerate() {
        for rep in 0..cfg.reps {
            for (chunk_index, start) in (0..n).step_by(cfg.chunk).enumerate() {
                jobs.push(JobSpec {
                    variant_index,
                    rep,
                    chunk_index,
                    start,
                    end: (start + cfg.chunk).min(n),
                });
            }
        }
    }

    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| run_job(models, subset, cfg, job))
        .collect::<Result<_>>()?;

    // Deterministic sequential reduction in job order.
    let mut misses = vec![vec![vec![0usize; cfg.targets.len()]; cfg.reps]; cfg.variants.len()];
    let mut timings = Vec::with_capacity(jobs.len());
    for (job, result) in jobs.iter().zip(&results) {
        for (t, m) in result.misses.iter().enumerate() {
            misses[job.variant_index][job.rep][t] += m;
        }
        timings.push(JobTiming {
            variant: cfg.variants[job.variant_index].label(),
            rep: job.rep,
            chunk_index: job.chunk_index,
            images: job.end - job.start,
            iterations: cfg.attack.iterations,
            seconds: result.seconds,
        });
    }

    let mut cells = Vec::new();
    let mut grand = Vec::new();
    for (v, variant) in cfg.variants.iter().enumerate() {
        let mut grand_per_rep = vec![0.0f64; cfg.reps];
        for (t, target) in cfg.targets.iter().enumerate() {
            let per_rep: Vec<f64> = (0..cfg.reps).map(|r| misses[v][r][t] as f64 / n as f64).collect();
            for (g, asr) in grand_per_rep.iter_mut().zip(&per_rep) {
                *g += asr / cfg.targets.len() as f64;
            }
            let (mean, std) = mean_std(&per_rep);
            cells.push(CellStats {
                variant: variant.label(),
                target: target.clone(),
                per_rep,
                mean,
                std,
            });
        }
        let (mean, std) = mean_std(&grand_per_rep);
        grand.push(GrandStats {
            variant: variant.label(),
            per_rep: grand_per_rep,
            mean,
            std,
        });
    }

    Ok(RunOutcome {
        eval_count: n,
        cells,
        grand,
        timings,
    })
}

fn run_job(models: &ModelSet, subset: &Dataset, cfg: &ExperimentConfig, job: &JobSpec) -> Result<JobResult> {
    let variant = &cfg.variants[job.variant_index];
    let surrogate = insert_fp_layer(models.surrogate.clone(), variant.fp.clone())?;
    let batch = subset.select(&(job.start..job.end).collect::<Vec<_>>())?;
    let attack = AttackConfig {
        method: variant.method,
        ..cfg.attack.clone()
    };
    let seed = job_seed(cfg.master_seed, variant.method, job.rep, job.chunk_index);

    let started = std::time::Instant::now();
    let adv = run_attack(
        &surrogate,
        &AttackInputs {
            images: batch.images(),
            labels: batch.labels(),
            mix_pool: Some(subset),
        },
        &attack,
        seed,
    )?;
    let seconds = started.elapsed().as_secs_f64();

    let misses = models
        .targets
        .iter()
        .map(|(_, target)| super::subset::misclassified_count(target, &adv.adversarials, &adv.labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(JobResult { misses, seconds })
}

/// Build the evaluation subset for a config from a standardized test split.
pub fn prepare_run(models: &ModelSet, test: &Dataset, cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    models.validate()?;
    super::subset::build_eval_subset(&models.all_models(), test, cfg.eval_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;
    use crate::testutil::{halves_dataset, tiny_cnn_spec};
    use crate::zoo::model::build_model;
    use crate::zoo::train::{train, Hyper};

    #[test]
    fn variant_labels_round_trip() {
        for label in ["ifgsm", "mifgsm+fpa-n", "dim+fpa-r", "admix"] {
            let v: VariantSpec = label.parse().unwrap();
            assert_eq!(v.label(), label);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{label}\""));
            let back: VariantSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, v);
        }
        let v: VariantSpec = "tim+fpa-n".parse().unwrap();
        assert_eq!(v.fp.strategy, FpStrategy::Neighborhood);
        assert_eq!((v.fp.gamma, v.fp.prob, v.fp.position), (0.6, 0.5, 2));
        let v: VariantSpec = "sim+fpa-r".parse().unwrap();
        assert_eq!((v.fp.gamma, v.fp.prob, v.fp.position), (0.3, 0.2, 5));

        assert!("ifgsm+banana".parse::<VariantSpec>().is_err());
        assert!("warp".parse::<VariantSpec>().is_err());
    }

    #[test]
    fn config_validation_catches_misuse() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        assert!(ExperimentConfig { reps: 0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { chunk: 0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { eval_count: 0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { targets: vec![], ..ok.clone() }.validate().is_err());
        let dup = ExperimentConfig {
            variants: vec!["ifgsm".parse().unwrap(), "ifgsm".parse().unwrap()],
            ..ok.clone()
        };
        let err = dup.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn job_seeds_ignore_fp_but_separate_everything_else() {
        let a = job_seed(9, AttackMethod::Ifgsm, 0, 0);
        assert_eq!(a, derive_seed(9, "job/ifgsm/rep0", 0));
        assert_ne!(a, job_seed(9, AttackMethod::Ifgsm, 1, 0));
        assert_ne!(a, job_seed(9, AttackMethod::Ifgsm, 0, 1));
        assert_ne!(a, job_seed(9, AttackMethod::Mifgsm, 0, 0));
        assert_ne!(a, job_seed(10, AttackMethod::Ifgsm, 0, 0));
    }

    fn tiny_model_set() -> (ModelSet, crate::data::Dataset) {
        let data = halves_dataset(160, 60);
        let hyper = Hyper {
            epochs: 2,
            batch: 16,
            lr: 0.05,
            momentum: 0.9,
        };
        let mut surrogate = build_model(&tiny_cnn_spec(), &mut rng_from_seed(61)).unwrap();
        train(&mut surrogate, &data, &data, &hyper, 62).unwrap();
        let mut target = build_model(&tiny_cnn_spec(), &mut rng_from_seed(63)).unwrap();
        train(&mut target, &data, &data, &hyper, 64).unwrap();
        (
            ModelSet {
                surrogate,
                targets: vec![("twin".to_string(), target)],
            },
            data,
        )
    }

    fn tiny_config(variants: &[&str]) -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 5,
            eval_count: 24,
            reps: 2,
            chunk: 10,
            surrogate: "tiny".to_string(),
            targets: vec!["twin".to_string()],
            variants: variants.iter().map(|v| v.parse().unwrap()).collect(),
            attack: AttackConfig {
                iterations: 6,
                ..AttackConfig::default()
            },
        }
    }

    #[test]
    fn matrix_runs_are_deterministic_and_well_shaped() {
        let (models, data) = tiny_model_set();
        // Neighbor swaps at block 2 of the tiny cnn (8 channels, 4x4 site).
        let cfg = tiny_config(&["ifgsm", "ifgsm+fpa-n"]);
        let subset = prepare_run(&models, &data, &cfg).unwrap();
        assert_eq!(subset.len(), 24);

        let a = run_transfer_matrix(&models, &subset, &cfg).unwrap();
        assert_eq!(a.cells.len(), 2);
        assert_eq!(a.grand.len(), 2);
        // 2 variants x 2 reps x ceil(24 / 10) chunks.
        assert_eq!(a.timings.len(), 2 * 2 * 3);
        for cell in &a.cells {
            assert_eq!(cell.per_rep.len(), 2);
            for &asr in &cell.per_rep {
                assert!((0.0..=1.0).contains(&asr), "{asr}");
            }
        }

        let b = run_transfer_matrix(&models, &subset, &cfg).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.per_rep, cb.per_rep, "{}/{}", ca.variant, ca.target);
        }

        // The baseline method draws no randomness, so its reps coincide.
        let base = a.cell("ifgsm", "twin").unwrap();
        assert_eq!(base.per_rep[0], base.per_rep[1]);
        assert_eq!(base.std, 0.0);

        // Grand stats are the across-target average (single target here).
        let g = a.grand_for("ifgsm").unwrap();
        assert_eq!(g.per_rep, base.per_rep);
    }

    #[test]
    fn baseline_cells_do_not_depend_on_which_variants_run_alongside() {
        let (models, data) = tiny_model_set();
        let solo = tiny_config(&["ifgsm"]);
        let paired = tiny_config(&["ifgsm", "ifgsm+fpa-n"]);
        let subset = prepare_run(&models, &data, &solo).unwrap();
        let a = run_transfer_matrix(&models, &subset, &solo).unwrap();
        let b = run_transfer_matrix(&models, &subset, &paired).unwrap();
        assert_eq!(
            a.cell("ifgsm", "twin").unwrap().per_rep,
            b.cell("ifgsm", "twin").unwrap().per_rep,
        );
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[0.5]);
        assert_eq!((m, s), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
