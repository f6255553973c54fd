//! Classifier inputs: AU8 coefficient vectors, flattened FP68 landmarks, and
//! z-score normalization fitted on the training split.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::LandmarkFrame;
use crate::model::FP68_LEN;

/// The four expression classes, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Smile,
    Angry,
    Surprised,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [
        Emotion::Neutral,
        Emotion::Smile,
        Emotion::Angry,
        Emotion::Surprised,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Smile => "smile",
            Emotion::Angry => "angry",
            Emotion::Surprised => "surprised",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown emotion {s:?}; expected one of neutral, smile, angry, surprised"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Au8,
    Fp68,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Au8 => 8,
            FeatureKind::Fp68 => 2 * FP68_LEN,
        }
    }

    pub fn from_dim(dim: usize) -> Option<FeatureKind> {
        [FeatureKind::Au8, FeatureKind::Fp68]
            .into_iter()
            .find(|k| k.dim() == dim)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Au8 => "au8",
            FeatureKind::Fp68 => "fp68",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "au8" => Ok(FeatureKind::Au8),
            "fp68" => Ok(FeatureKind::Fp68),
            _ => Err(Error::InvalidInput(format!(
                "unknown feature kind {s:?}; expected au8 or fp68"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    pub label: Option<Emotion>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>, label: Option<Emotion>) -> Result<Self> {
        if values.len() != kind.dim() {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: kind.dim(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(FeatureVector {
            kind,
            values,
            label,
        })
    }
}

/// Interleaved `(x0, y0, x1, y1, ...)` landmark coordinates.
pub fn fp68_vector(frame: &LandmarkFrame, label: Option<Emotion>) -> Result<FeatureVector> {
    frame.validate()?;
    let values = frame.points.iter().flat_map(|p| [p.x, p.y]).collect();
    FeatureVector::new(FeatureKind::Fp68, values, label)
}

/// Inverse of [`fp68_vector`].
pub fn fp68_points(v: &FeatureVector) -> Result<Vec<Point2<f64>>> {
    if v.kind != FeatureKind::Fp68 {
        return Err(Error::InvalidInput("not an FP68 feature vector".into()));
    }
    Ok(v.values
        .chunks_exact(2)
        .map(|c| Point2::new(c[0], c[1]))
        .collect())
}

pub fn au8_vector(a_action: &[f64], label: Option<Emotion>) -> Result<FeatureVector> {
    FeatureVector::new(FeatureKind::Au8, a_action.to_vec(), label)
}

/// Floor applied to per-dimension standard deviations.
pub const NORM_EPSILON: f64 = 1e-8;

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

pub fn fit_norm(train: &[FeatureVector]) -> Result<NormStats> {
    if train.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "normalization needs at least 2 samples, got {}",
            train.len()
        )));
    }
    let dim = train[0].values.len();
    if let Some(bad) = train.iter().find(|x| x.values.len() != dim) {
        return Err(Error::LengthMismatch {
            what: "feature vector",
            expected: dim,
            got: bad.values.len(),
        });
    }
    let n = train.len() as f64;
    let mut mu = vec![0.0; dim];
    for x in train {
        for (m, v) in mu.iter_mut().zip(&x.values) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in train {
        for ((s, v), m) in var.iter_mut().zip(&x.values).zip(&mu) {
            *s += (v - m).powi(2);
        }
    }
    let sigma = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(NormStats {
        mu,
        sigma,
        epsilon: NORM_EPSILON,
    })
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn scale(&self, k: usize) -> f64 {
        self.sigma[k].max(self.epsilon)
    }

    pub fn apply_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: self.dim(),
                got: values.len(),
            });
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mu[k]) / self.scale(k))
            .collect())
    }

    pub fn denormalize(&self, x: &FeatureVector) -> Result<FeatureVector> {
        if x.values.len() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: self.dim(),
                got: x.values.len(),
            });
        }
        let values = x
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.scale(k) + self.mu[k])
            .collect();
        Ok(FeatureVector {
            kind: x.kind,
            values,
            label: x.label,
        })
    }
}

/// `(x - mu) / max(sigma, eps)` elementwise.
pub fn apply_norm(x: &FeatureVector, stats: &NormStats) -> Result<FeatureVector> {
    Ok(FeatureVector {
        kind: x.kind,
        values: stats.apply_values(&x.values)?,
        label: x.label,
    })
}

/// Writes `label,v0,v1,...` rows; unlabeled rows get an empty label.
pub fn write_feature_csv(rows: &[FeatureVector]) -> String {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("label");
    for k in 0..dim {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for r in rows {
        out.push_str(r.label.map_or("", |l| l.as_str()));
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_feature_csv(text: &str) -> Result<Vec<FeatureVector>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty feature file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::parse(1, "header must start with `label`"));
    }
    let dim = cols.len() - 1;
    let kind = FeatureKind::from_dim(dim).ok_or_else(|| {
        Error::parse(1, format!("{dim} feature columns match neither au8 (8) nor fp68 (136)"))
    })?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != dim + 1 {
            return Err(Error::parse(
                ln,
                format!("expected {} columns, got {}", dim + 1, toks.len()),
            ));
        }
        let label = match toks[0].trim() {
            "" => None,
            s => Some(s.parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?),
        };
        let values = toks[1..]
            .iter()
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(ln, format!("bad number {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureVector::new(kind, values, label).map_err(|e| Error::parse(ln, e.to_string()))?);
    }
    Ok(rows)
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            kind: FeatureKind::Au8,
            values,
            label: None,
        }
    }

    #[test]
    fn fp68_layout() {
        let frame = LandmarkFrame::new(0, vec![Point2::origin(); 68]).unwrap();
        let v = fp68_vector(&frame, None).unwrap();
        assert_eq!(v.values, vec![0.0; 136]);

        let mut pts = vec![Point2::origin(); 68];
        pts[0] = Point2::new(5.0, 7.0);
        let v = fp68_vector(&LandmarkFrame::new(0, pts).unwrap(), None).unwrap();
        assert_eq!(&v.values[..3], &[5.0, 7.0, 0.0]);
    }

    #[test]
    fn fp68_round_trips_through_unflattening() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..68)
            .map(|_| Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let frame = LandmarkFrame::new(9, pts.clone()).unwrap();
        assert_eq!(fp68_points(&fp68_vector(&frame, None).unwrap()).unwrap(), pts);
    }

    #[test]
    fn fit_norm_hand_cases() {
        let mut a = fv(vec![0.0; 8]);
        let mut b = fv(vec![0.0; 8]);
        a.values[0] = 0.0;
        b.values[0] = 2.0;
        a.values[1] = 3.0;
        b.values[1] = 3.0;
        let stats = fit_norm(&[a.clone(), b]).unwrap();
        assert_eq!(stats.mu[0], 1.0);
        assert_eq!(stats.sigma[0], 1.0);
        // constant dimension: sigma 0, divided by epsilon instead
        assert_eq!(stats.sigma[1], 0.0);
        let mut x = fv(vec![0.0; 8]);
        x.values[1] = 3.0 + 1e-8;
        let n = apply_norm(&x, &stats).unwrap();
        assert!((n.values[1] - 1.0).abs() < 1e-6);
        assert!(fit_norm(&[a]).is_err());
        assert!(fit_norm(&[]).is_err());
    }

    #[test]
    fn apply_norm_identities() {
        let stats = NormStats {
            mu: vec![1.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 3.0],
            sigma: vec![2.0, 0.5, 1.0, 1.0, 4.0, 1.0, 1.0, 0.1],
            epsilon: NORM_EPSILON,
        };
        let at_mu = apply_norm(&fv(stats.mu.clone()), &stats).unwrap();
        assert!(at_mu.values.iter().all(|v| *v == 0.0));
        let plus: Vec<f64> = stats.mu.iter().zip(&stats.sigma).map(|(m, s)| m + s).collect();
        let ones = apply_norm(&fv(plus), &stats).unwrap();
        assert!(ones.values.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        let wrong = FeatureVector {
            kind: FeatureKind::Au8,
            values: vec![0.0; 3],
            label: None,
        };
        assert!(apply_norm(&wrong, &stats).is_err());
    }

    #[test]
    fn test_split_uses_training_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let train: Vec<_> = (0..200)
            .map(|_| fv((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let test: Vec<_> = (0..200)
            .map(|_| fv((0..8).map(|_| rng.random_range(0.5..2.5)).collect()))
            .collect();
        let stats = fit_norm(&train).unwrap();
        let mean0: f64 = test
            .iter()
            .map(|x| apply_norm(x, &stats).unwrap().values[0])
            .sum::<f64>()
            / 200.0;
        assert!(mean0 > 1.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let rows = vec![
            FeatureVector::new(FeatureKind::Au8, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1e-17], Some(Emotion::Smile)).unwrap(),
            FeatureVector::new(FeatureKind::Au8, vec![0.0; 8], None).unwrap(),
        ];
        let text = write_feature_csv(&rows);
        assert!(text.starts_with("label,v0,v1,"));
        assert_eq!(parse_feature_csv(&text).unwrap(), rows);
        assert!(parse_feature_csv("label,v0\nsmile,1\n").is_err());
        let bad_label = text.replace("smile", "happy");
        assert!(parse_feature_csv(&bad_label).is_err());
    }

    proptest! {
        #[test]
        fn normalized_training_set_is_standardized(seed in 0u64..1000, n in 3usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train: Vec<_> = (0..n)
                .map(|_| fv((0..8).map(|k| rng.random_range(-5.0..5.0) * (k as f64 + 1.0) + k as f64).collect()))
                .collect();
            let stats = fit_norm(&train).unwrap();
            let normed: Vec<_> = train.iter().map(|x| apply_norm(x, &stats).unwrap()).collect();
            for k in 0..8 {
                let mean = normed.iter().map(|x| x.values[k]).sum::<f64>() / n as f64;
                let var = normed.iter().map(|x| (x.values[k] - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!(mean.abs() <= 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() <= 1e-10);
            }
            for x in &train {
                let back = stats.denormalize(&apply_norm(x, &stats).unwrap()).unwrap();
                for (a, b) in back.values.iter().zip(&x.values) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }
}
