//! Emotion classifiers and their on-disk format.

pub mod mlp;
pub mod svm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_norm, Emotion, FeatureKind, FeatureVector, NormStats};
pub use mlp::{mlp_train, Architecture, MlpModel, TrainConfig, TrainingLog};
pub use svm::{svm_train, SvmModel, SvmParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    SvmPoly(SvmModel),
    Mlp(MlpModel),
}

impl Classifier {
    pub fn name(&self) -> &'static str {
        match self {
            Classifier::SvmPoly(_) => "svm-poly",
            Classifier::Mlp(_) => "mlp",
        }
    }
}

/// A classifier bundled with the normalization fitted on its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub feature_kind: FeatureKind,
    pub norm: NormStats,
    pub classifier: Classifier,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    SvmPoly(SvmModel),
    Mlp(mlp::MlpRecord),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    feature_kind: FeatureKind,
    classes: Vec<Emotion>,
    norm: NormStats,
    model: Body,
}

impl TrainedClassifier {
    /// Normalizes raw features, then classifies each row.
    pub fn predict(&self, raw: &[FeatureVector]) -> Result<Vec<Emotion>> {
        let mut rows = Vec::with_capacity(raw.len());
        for v in raw {
            if v.kind != self.feature_kind {
                return Err(Error::InvalidInput(format!(
                    "model expects {} features, got {}",
                    self.feature_kind, v.kind
                )));
            }
            rows.push(apply_norm(v, &self.norm)?.values);
        }
        let idx = match &self.classifier {
            Classifier::SvmPoly(m) => rows.iter().map(|r| m.predict(r)).collect::<Result<Vec<_>>>()?,
            Classifier::Mlp(m) if rows.is_empty() => Vec::new(),
            Classifier::Mlp(m) => m.predict(&mlp::to_batch(&rows))?,
        };
        idx.into_iter()
            .map(|i| Emotion::from_index(i).ok_or_else(|| Error::InvalidInput(format!("class index {i}"))))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let model = match &self.classifier {
            Classifier::SvmPoly(m) => Body::SvmPoly(m.clone()),
            Classifier::Mlp(m) => Body::Mlp(mlp::MlpRecord::from(m)),
        };
        let env = Envelope {
            version: MODEL_FORMAT_VERSION,
            feature_kind: self.feature_kind,
            classes: Emotion::ALL.to_vec(),
            norm: self.norm.clone(),
            model,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        if env.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                env.version
            )));
        }
        if env.classes != Emotion::ALL {
            return Err(Error::InvalidInput("unexpected class list in model file".into()));
        }
        if env.norm.dim() != env.feature_kind.dim() {
            return Err(Error::LengthMismatch {
                what: "normalization statistics",
                expected: env.feature_kind.dim(),
                got: env.norm.dim(),
            });
        }
        let classifier = match env.model {
            Body::SvmPoly(m) => {
                if m.dim != env.feature_kind.dim() {
                    return Err(Error::InvalidInput("SVM dimension does not match feature kind".into()));
                }
                Classifier::SvmPoly(m)
            }
            Body::Mlp(r) => {
                let m = MlpModel::try_from(r)?;
                if m.input_dim() != env.feature_kind.dim() {
                    return Err(Error::InvalidInput("MLP input does not match feature kind".into()));
                }
                Classifier::Mlp(m)
            }
        };
        Ok(TrainedClassifier {
            feature_kind: env.feature_kind,
            norm: env.norm,
            classifier,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// The architecture that matches a feature kind.
pub fn architecture_for(kind: FeatureKind) -> Architecture {
    match kind {
        FeatureKind::Au8 => Architecture::Au8Net,
        FeatureKind::Fp68 => Architecture::Fp68Net,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::fit_norm;

    fn toy() -> Vec<FeatureVector> {
        (0..12)
            .map(|i| {
                let e = Emotion::ALL[i % 4];
                let mut v = vec![0.1 * i as f64; 8];
                v[e.index()] += 3.0;
                FeatureVector::new(FeatureKind::Au8, v, Some(e)).unwrap()
            })
            .collect()
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let data = toy();
        let norm = fit_norm(&data).unwrap();
        let x: Vec<Vec<f64>> = data.iter().map(|v| apply_norm(v, &norm).unwrap().values).collect();
        let y: Vec<usize> = data.iter().map(|v| v.label.unwrap().index()).collect();
        let svm = svm_train(&x, &y, 4, &SvmParams::default()).unwrap();
        let mlp = mlp::train_model(
            Architecture::Au8Net.build(1).unwrap(),
            &x,
            &y,
            &x,
            &y,
            &TrainConfig {
                max_epochs: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap()
        .0;
        for classifier in [Classifier::SvmPoly(svm), Classifier::Mlp(mlp)] {
            let t = TrainedClassifier {
                feature_kind: FeatureKind::Au8,
                norm: norm.clone(),
                classifier,
            };
            let back = TrainedClassifier::from_json(&t.to_json().unwrap()).unwrap();
            assert_eq!(back, t);
            assert_eq!(back.predict(&data).unwrap(), t.predict(&data).unwrap());
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let data = toy();
        let norm = fit_norm(&data).unwrap();
        let t = TrainedClassifier {
            feature_kind: FeatureKind::Au8,
            norm,
            classifier: Classifier::Mlp(Architecture::Au8Net.build(0).unwrap()),
        };
        let json = t.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(TrainedClassifier::from_json(&json).is_err());
    }
}
