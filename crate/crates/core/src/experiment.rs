//! Frontal-train / rotated-test comparison of the AU8 classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::mlp::{self, Architecture, TrainConfig};
use crate::classify::svm::{svm_train, SvmParams};
use crate::error::{Error, Result};
use crate::features::{apply_norm, au8_vector, fit_norm, Emotion, FeatureVector};
use crate::fitting::{extract_action_units, LmConfig};
use crate::metrics::{accuracy, ConfusionMatrix};
use crate::model::{CandideModel, Correspondence};
use crate::synth::{generate_dataset, RecipeBook, Sample, SynthSpec};

/// Per-frame shape-unit spread used by the comparison, about the median
/// magnitude of trusted shape coefficients observed on a real subject.
pub const EXPERIMENT_IDENTITY_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub svm: SvmParams,
    pub mlp: TrainConfig,
    /// Fraction of the training split held out for MLP model selection.
    pub val_frac: f64,
    pub threads: usize,
}

impl ExperimentConfig {
    /// Defaults with every seed derived from `seed`.
    pub fn seeded(seed: u64) -> Self {
        ExperimentConfig {
            synth: SynthSpec {
                seed,
                identity_sigma: EXPERIMENT_IDENTITY_SIGMA,
                ..SynthSpec::default()
            },
            svm: SvmParams::default(),
            mlp: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            val_frac: 0.2,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Frames whose action-unit fit failed and were left out.
    pub n_dropped: usize,
    pub svm_train_accuracy: f64,
    pub svm_test_accuracy: f64,
    pub mlp_train_accuracy: f64,
    pub mlp_test_accuracy: f64,
}

/// Fits action units on every frame with the neutral shape, keeping labels.
pub fn au8_features(
    samples: &[Sample],
    model: &CandideModel,
    corr: &Correspondence,
    config: &LmConfig,
    threads: usize,
) -> Result<(Vec<FeatureVector>, usize)> {
    let frames: Vec<_> = samples.iter().map(|s| s.frame.clone()).collect();
    let zero = vec![0.0; model.dim_shape()];
    let fits = extract_action_units(&frames, model, corr, &zero, config, threads)?;
    let mut out = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for (s, fit) in samples.iter().zip(fits) {
        match fit {
            Ok(f) => out.push(au8_vector(&f.pose.a_action, Some(s.label))?),
            Err(e) if e.is_numerical() => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, dropped))
}

fn split_xy(v: &[FeatureVector]) -> (Vec<Vec<f64>>, Vec<usize>) {
    v.iter()
        .map(|f| (f.values.clone(), f.label.map_or(0, Emotion::index)))
        .unzip()
}

fn acc(truth: &[usize], pred: &[usize]) -> Result<f64> {
    accuracy(&ConfusionMatrix::from_pairs(Emotion::ALL.len(), truth, pred)?)
}

pub fn run_pose_generalization(
    config: &ExperimentConfig,
    model: &CandideModel,
    corr: &Correspondence,
    book: &RecipeBook,
) -> Result<ExperimentResult> {
    if !(config.val_frac > 0.0 && config.val_frac < 1.0) {
        return Err(Error::InvalidInput(format!("val_frac must be in (0, 1), got {}", config.val_frac)));
    }
    let data = generate_dataset(&config.synth, model, corr, book)?;
    let lm = LmConfig::default();
    let (train_raw, d1) = au8_features(&data.train, model, corr, &lm, config.threads)?;
    let (test_raw, d2) = au8_features(&data.test, model, corr, &lm, config.threads)?;
    let norm = fit_norm(&train_raw)?;
    let normed = |v: &[FeatureVector]| v.iter().map(|f| apply_norm(f, &norm)).collect::<Result<Vec<_>>>();
    let (xt, yt) = split_xy(&normed(&train_raw)?);
    let (xs, ys) = split_xy(&normed(&test_raw)?);

    let svm = svm_train(&xt, &yt, Emotion::ALL.len(), &config.svm)?;
    let svm_pred = |x: &[Vec<f64>]| x.iter().map(|r| svm.predict(r)).collect::<Result<Vec<_>>>();
    let svm_train_accuracy = acc(&yt, &svm_pred(&xt)?)?;
    let svm_test_accuracy = acc(&ys, &svm_pred(&xs)?)?;

    let mut order: Vec<usize> = (0..xt.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.mlp.seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let n_val = ((xt.len() as f64 * config.val_frac).round() as usize).clamp(1, xt.len() - 1);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { idx.iter().map(|&i| (xt[i].clone(), yt[i])).unzip() };
    let (xf, yf) = pick(fit_idx);
    let (xv, yv) = pick(val_idx);
    let (net, _) = mlp::mlp_train(Architecture::Au8Net, &xf, &yf, &xv, &yv, &config.mlp)?;
    let mlp_train_accuracy = acc(&yt, &net.predict(&mlp::to_batch(&xt))?)?;
    let mlp_test_accuracy = acc(&ys, &net.predict(&mlp::to_batch(&xs))?)?;

    Ok(ExperimentResult {
        seed: config.synth.seed,
        n_train: xt.len(),
        n_test: xs.len(),
        n_dropped: d1 + d2,
        svm_train_accuracy,
        svm_test_accuracy,
        mlp_train_accuracy,
        mlp_test_accuracy,
    })
}
