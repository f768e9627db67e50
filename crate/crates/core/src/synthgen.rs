//! Synthetic embedding sets with planted outlier dimensions.
//!
//! Every dimension is Gaussian. Background dimensions are `N(0, background_std²)`
//! independent of the label; a planted dimension is `N(class_mean, noise_std²)`
//! with a class-dependent mean. With balance `p` and mean gap `Δ`, a planted
//! dimension has variance `p(1-p)Δ² + noise_std²`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::{EmbdError, EmbeddingSet, RunMetadata, Split, Stage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Set(#[from] EmbdError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SynthError {
    SynthError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDim {
    pub dim: usize,
    pub class0_mean: f64,
    pub class1_mean: f64,
    pub noise_std: f64,
}

impl PlantedDim {
    /// Variance of the class mixture in this dimension.
    pub fn mixture_variance(&self, class_balance: f64) -> f64 {
        let gap = self.class1_mean - self.class0_mean;
        class_balance * (1.0 - class_balance) * gap * gap + self.noise_std * self.noise_std
    }
}

fn default_model() -> String {
    "synthetic".into()
}

fn default_task() -> String {
    "synthetic".into()
}

fn default_stage() -> Stage {
    Stage::Finetuned
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub planted: Vec<PlantedDim>,
    pub background_std: f64,
    /// Fraction of rows labelled 1.
    pub class_balance: f64,
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_task")]
    pub task_name: String,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default)]
    pub full_model_accuracy: Option<f64>,
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, background_std: f64, class_balance: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            planted: Vec::new(),
            background_std,
            class_balance,
            seed,
            model_name: default_model(),
            task_name: default_task(),
            stage: default_stage(),
            full_model_accuracy: None,
        }
    }

    pub fn plant(mut self, dim: usize, class0_mean: f64, class1_mean: f64, noise_std: f64) -> Self {
        self.planted.push(PlantedDim {
            dim,
            class0_mean,
            class1_mean,
            noise_std,
        });
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n < 2 {
            return Err(invalid("n", format!("must be at least 2, got {}", self.n)));
        }
        if self.d == 0 {
            return Err(invalid("d", "must be at least 1"));
        }
        if !(self.background_std > 0.0 && self.background_std.is_finite()) {
            return Err(invalid("background_std", format!("must be positive and finite, got {}", self.background_std)));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(invalid("class_balance", format!("must lie in (0, 1), got {}", self.class_balance)));
        }
        if let Some(acc) = self.full_model_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return Err(invalid("full_model_accuracy", format!("must lie in [0, 1], got {acc}")));
            }
        }
        let mut seen = vec![false; self.d];
        for (i, p) in self.planted.iter().enumerate() {
            if p.dim >= self.d {
                return Err(invalid(format!("planted[{i}].dim"), format!("{} is not below d={}", p.dim, self.d)));
            }
            if std::mem::replace(&mut seen[p.dim], true) {
                return Err(invalid(format!("planted[{i}].dim"), format!("dimension {} planted twice", p.dim)));
            }
            if !(p.noise_std > 0.0 && p.noise_std.is_finite()) {
                return Err(invalid(format!("planted[{i}].noise_std"), format!("must be positive and finite, got {}", p.noise_std)));
            }
            if !(p.class0_mean.is_finite() && p.class1_mean.is_finite()) {
                return Err(invalid(format!("planted[{i}]"), "class means must be finite"));
            }
        }
        Ok(())
    }

    fn meta(&self, split: Split) -> RunMetadata {
        RunMetadata {
            model_name: self.model_name.clone(),
            task_name: self.task_name.clone(),
            seed: self.seed,
            split,
            stage: self.stage,
            full_model_accuracy: self.full_model_accuracy,
        }
    }
}

/// Draws independent train and validation sets from the same distribution.
pub fn generate(spec: &SynthSpec) -> Result<(EmbeddingSet, EmbeddingSet), SynthError> {
    spec.validate()?;
    let train = draw(spec, Split::Train, 0)?;
    let val = draw(spec, Split::Validation, 1)?;
    Ok((train, val))
}

fn draw(spec: &SynthSpec, split: Split, stream: u64) -> Result<EmbeddingSet, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    // Exact class counts keep both classes present for any n >= 2.
    let ones = ((spec.n as f64 * spec.class_balance).round() as usize).clamp(1, spec.n - 1);
    let mut labels: Vec<u8> = (0..spec.n).map(|i| u8::from(i < ones)).collect();
    labels.shuffle(&mut rng);

    let background = Normal::new(0.0, spec.background_std).expect("validated std");
    let mut per_dim: Vec<Option<(Normal<f64>, Normal<f64>)>> = vec![None; spec.d];
    for p in &spec.planted {
        per_dim[p.dim] = Some((
            Normal::new(p.class0_mean, p.noise_std).expect("validated std"),
            Normal::new(p.class1_mean, p.noise_std).expect("validated std"),
        ));
    }

    let mut data = Vec::with_capacity(spec.n * spec.d);
    for &label in &labels {
        for dist in &per_dim {
            let v = match dist {
                Some((c0, _)) if label == 0 => c0.sample(&mut rng),
                Some((_, c1)) => c1.sample(&mut rng),
                None => background.sample(&mut rng),
            };
            data.push(v as f32);
        }
    }
    Ok(EmbeddingSet::new(spec.meta(split), spec.n, spec.d, data, labels)?)
}
