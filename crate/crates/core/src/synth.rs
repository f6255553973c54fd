//! Synthetic landmark datasets rendered from the head model.
//!
//! Every frame draws from its own ChaCha stream keyed by `(seed, tau)`, so a
//! frame's content does not depend on generation order.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Emotion;
use crate::fitting::LandmarkFrame;
use crate::geometry::{forward, PoseParams, RotationVector};
use crate::model::{check_len, CandideModel, Correspondence, FP68_LEN};

const BUNDLED_RECIPES: &str = include_str!("../data/recipes.txt");

/// Action units a recipe may name.
pub const RECIPE_FACS_IDS: [u32; 14] = [1, 2, 4, 5, 7, 9, 10, 12, 15, 16, 20, 25, 26, 27];

pub const DEFAULT_INTENSITY: (f64, f64) = (0.4, 1.0);
pub const MAX_INTENSITY: f64 = 1.5;

/// Left/right partner of each FP68 landmark; midline points map to themselves.
pub const FP68_MIRROR: [usize; FP68_LEN] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, // jaw
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, // brows
    27, 28, 29, 30, 35, 34, 33, 32, 31, // nose
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, // eyes
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, // outer lips
    64, 63, 62, 61, 60, 67, 66, 65, // inner lips
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecipeComponent {
    pub facs: u32,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionRecipe {
    pub class: Emotion,
    pub components: Vec<RecipeComponent>,
}

/// Recipes for the non-neutral classes; neutral is always the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeBook {
    pub recipes: Vec<EmotionRecipe>,
}

impl RecipeBook {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RECIPES).expect("bundled recipes are valid")
    }

    /// One line per class: `<class> <facs>[:<lo>-<hi>] ...`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut recipes: Vec<EmotionRecipe> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let class: Emotion = toks
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e: Error| Error::parse(ln, e.to_string()))?;
            if class == Emotion::Neutral {
                return Err(Error::parse(ln, "neutral has no recipe"));
            }
            if recipes.iter().any(|r| r.class == class) {
                return Err(Error::parse(ln, format!("duplicate recipe for {class}")));
            }
            let mut components = Vec::new();
            for tok in toks {
                let (id, range) = match tok.split_once(':') {
                    Some((id, range)) => (id, Some(range)),
                    None => (tok, None),
                };
                let facs: u32 = id.parse().map_err(|_| Error::parse(ln, format!("bad action unit id {id:?}")))?;
                if !RECIPE_FACS_IDS.contains(&facs) {
                    return Err(Error::parse(ln, format!("action unit {facs} is not a recipe unit")));
                }
                let (lo, hi) = match range {
                    None => DEFAULT_INTENSITY,
                    Some(r) => {
                        let (a, b) = r
                            .split_once('-')
                            .ok_or_else(|| Error::parse(ln, format!("range {r:?} is not <lo>-<hi>")))?;
                        let p = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad number {s:?}")));
                        (p(a)?, p(b)?)
                    }
                };
                if !(0.0 <= lo && lo <= hi && hi <= MAX_INTENSITY) {
                    return Err(Error::parse(ln, format!("intensity range [{lo}, {hi}] outside [0, {MAX_INTENSITY}]")));
                }
                components.push(RecipeComponent { facs, lo, hi });
            }
            if components.is_empty() {
                return Err(Error::parse(ln, "recipe has no components"));
            }
            recipes.push(EmotionRecipe { class, components });
        }
        Ok(RecipeBook { recipes })
    }

    pub fn get(&self, class: Emotion) -> Option<&EmotionRecipe> {
        self.recipes.iter().find(|r| r.class == class)
    }

    /// Action-unit slots a class touches, with the component that drives each.
    ///
    /// A slot hit by several components (jaw drop from both 26 and 27) is
    /// driven by the first of them in recipe order.
    pub fn slot_components(&self, class: Emotion, model: &CandideModel) -> Result<Vec<(usize, RecipeComponent)>> {
        if class == Emotion::Neutral {
            return Ok(Vec::new());
        }
        let recipe = self
            .get(class)
            .ok_or_else(|| Error::InvalidInput(format!("no recipe for class {class}")))?;
        let mut out: Vec<(usize, RecipeComponent)> = Vec::new();
        for comp in &recipe.components {
            for (slot, unit) in model.action_units.iter().enumerate() {
                if unit.facs_ids().contains(&comp.facs) && !out.iter().any(|(s, _)| *s == slot) {
                    out.push((slot, *comp));
                }
            }
        }
        out.sort_by_key(|(s, _)| *s);
        Ok(out)
    }
}

/// Draws an action-unit coefficient vector for `class`.
pub fn sample_recipe(
    book: &RecipeBook,
    class: Emotion,
    model: &CandideModel,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut a = vec![0.0; model.dim_action()];
    for (slot, c) in book.slot_components(class, model)? {
        a[slot] = if c.hi > c.lo { rng.random_range(c.lo..=c.hi) } else { c.lo };
    }
    Ok(a)
}

/// FP68 landmark positions from observer-space vertices: corresponded
/// landmarks copy their vertex, the rest use the interpolation rules.
pub fn fp68_from_vertices(corr: &Correspondence, vertices: &[nalgebra::Point3<f64>]) -> Result<Vec<Point2<f64>>> {
    if !corr.is_complete() {
        return Err(Error::InvalidCorrespondence(
            "rendering needs a rule for every FP68 landmark".into(),
        ));
    }
    let mut pts = vec![Point2::origin(); FP68_LEN];
    for &(lm, v) in &corr.pairs {
        pts[lm] = Point2::new(vertices[v].x, vertices[v].y);
    }
    for rule in &corr.interpolations {
        let p = rule
            .weights
            .iter()
            .fold(Vector2::zeros(), |acc, (v, w)| acc + Vector2::new(vertices[*v].x, vertices[*v].y) * *w);
        pts[rule.landmark] = Point2::from(p);
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderPose {
    pub s: f64,
    pub yaw: f64,
    pub t: Vector2<f64>,
}

/// Renders one noisy 68-point frame and returns it with the exact
/// parameters used.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    model: &CandideModel,
    corr: &Correspondence,
    tau: u64,
    pose: &RenderPose,
    a_shape: &[f64],
    a_action: &[f64],
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<(LandmarkFrame, PoseParams)> {
    check_len("shape coefficients", model.dim_shape(), a_shape.len())?;
    check_len("action coefficients", model.dim_action(), a_action.len())?;
    let truth = PoseParams {
        s: pose.s,
        w: RotationVector::yaw(pose.yaw),
        t: pose.t,
        a_shape: a_shape.to_vec(),
        a_action: a_action.to_vec(),
    };
    truth.validate()?;
    let vertices = forward(model, &truth)?;
    let mut points = fp68_from_vertices(corr, &vertices)?;
    add_noise(&mut points, noise_sigma, rng)?;
    Ok((LandmarkFrame::new(tau, points)?, truth))
}

fn add_noise(points: &mut [Point2<f64>], sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for p in points.iter_mut() {
            p.x += normal.sample(rng);
            p.y += normal.sample(rng);
        }
    } else if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::InvalidInput(format!("noise sigma must be non-negative, got {sigma}")));
    }
    Ok(())
}

/// One 2D landmark-domain transform; all but translation act about the
/// current landmark centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AffineOp {
    /// Mirror about the vertical line through the centroid, swapping
    /// left/right landmark indices.
    Flip,
    Scale { factor: f64 },
    Translate { dx: f64, dy: f64 },
    Rotate { radians: f64 },
    /// `x += tan(angle) * y`
    Shear { radians: f64 },
}

pub fn apply_op(frame: &LandmarkFrame, op: &AffineOp) -> LandmarkFrame {
    let n = frame.points.len() as f64;
    let c = frame.points.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
    let map = |f: &dyn Fn(Vector2<f64>) -> Vector2<f64>| -> Vec<Point2<f64>> {
        frame.points.iter().map(|p| Point2::from(f(p.coords - c) + c)).collect()
    };
    let points = match *op {
        AffineOp::Flip => FP68_MIRROR
            .iter()
            .map(|&m| {
                let p = frame.points[m];
                Point2::new(2.0 * c.x - p.x, p.y)
            })
            .collect(),
        AffineOp::Scale { factor } => map(&|d| d * factor),
        AffineOp::Translate { dx, dy } => frame.points.iter().map(|p| Point2::new(p.x + dx, p.y + dy)).collect(),
        AffineOp::Rotate { radians } => {
            let (s, co) = radians.sin_cos();
            map(&|d| Vector2::new(co * d.x - s * d.y, s * d.x + co * d.y))
        }
        AffineOp::Shear { radians } => {
            let k = radians.tan();
            map(&|d| Vector2::new(d.x + k * d.y, d.y))
        }
    };
    LandmarkFrame {
        tau: frame.tau,
        points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// Translation bound per axis as a fraction of the image size.
    pub translate_frac: f64,
    pub rotate_max_deg: f64,
    pub shear_max_deg: f64,
    /// Additive coordinate noise, standing in for the image-domain
    /// blur/contrast/pixel-noise augmentations.
    pub noise_sigma: f64,
    pub image_size: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            translate_frac: 0.1,
            rotate_max_deg: 25.0,
            shear_max_deg: 8.0,
            noise_sigma: 0.5,
            image_size: (640.0, 480.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    /// Samples the transforms for one frame, in application order.
    pub fn sample_ops(&self, rng: &mut impl Rng) -> Vec<AffineOp> {
        if !self.enabled {
            return Vec::new();
        }
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let flip = rng.random::<f64>() < self.flip_prob;
        let (lo, hi) = self.scale_range;
        let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let dx = sym(rng, self.image_size.0 * self.translate_frac);
        let dy = sym(rng, self.image_size.1 * self.translate_frac);
        let rot = sym(rng, self.rotate_max_deg).to_radians();
        let shear = sym(rng, self.shear_max_deg).to_radians();
        let mut ops = vec![
            AffineOp::Scale { factor },
            AffineOp::Translate { dx, dy },
            AffineOp::Rotate { radians: rot },
            AffineOp::Shear { radians: shear },
        ];
        if flip {
            ops.push(AffineOp::Flip);
        }
        ops.shuffle(rng);
        ops
    }
}

/// Random-order composition of the sampled transforms plus coordinate noise.
/// Returns the augmented frame and the transforms applied.
pub fn augment_landmarks(
    frame: &LandmarkFrame,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(LandmarkFrame, Vec<AffineOp>)> {
    frame.validate()?;
    if !config.enabled {
        return Ok((frame.clone(), Vec::new()));
    }
    let ops = config.sample_ops(rng);
    let mut out = ops.iter().fold(frame.clone(), |f, op| apply_op(&f, op));
    add_noise(&mut out.points, config.noise_sigma, rng)?;
    Ok((out, ops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub train_yaw: f64,
    pub test_yaws: Vec<f64>,
    /// Landmark noise in pixels.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Applied to training frames only.
    pub augmentation: AugmentConfig,
    /// Pixels per model unit.
    pub scale_range: (f64, f64),
    /// Head position jitter in pixels around the image center.
    pub translation_jitter: f64,
    /// Standard deviation of per-frame shape-unit coefficients.
    pub identity_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 200,
            train_yaw: 0.0,
            test_yaws: vec![-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4],
            noise_sigma: 0.5,
            seed: 0,
            augmentation: AugmentConfig::default(),
            scale_range: (90.0, 110.0),
            translation_jitter: 16.0,
            identity_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        for &y in std::iter::once(&self.train_yaw).chain(&self.test_yaws) {
            if !(y.abs() < FRAC_PI_2) {
                return bad(format!("yaw {y} outside (-pi/2, pi/2)"));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid scale range ({lo}, {hi})"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("translation_jitter", self.translation_jitter),
            ("identity_sigma", self.identity_sigma),
            ("augmentation noise_sigma", self.augmentation.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.flip_prob) || !(a.scale_range.0 > 0.0 && a.scale_range.0 <= a.scale_range.1) {
            return bad("invalid augmentation ranges".into());
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_per_class * Emotion::ALL.len()
    }

    pub fn n_test(&self) -> usize {
        self.n_train() * self.test_yaws.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Exact parameters behind one generated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub tau: u64,
    pub split: Split,
    pub label: Emotion,
    pub s: f64,
    pub w: [f64; 3],
    pub t: [f64; 2],
    pub a_shape: Vec<f64>,
    pub a_action: Vec<f64>,
    pub noise_sigma: f64,
    /// Landmark-domain transforms applied after rendering, in order.
    pub augmentation: Vec<AffineOp>,
}

impl TruthRecord {
    pub fn pose(&self) -> PoseParams {
        PoseParams {
            s: self.s,
            w: RotationVector::new(self.w[0], self.w[1], self.w[2]),
            t: Vector2::new(self.t[0], self.t[1]),
            a_shape: self.a_shape.clone(),
            a_action: self.a_action.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: Emotion,
    pub frame: LandmarkFrame,
    pub truth: TruthRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn frame_rng(seed: u64, tau: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tau);
    rng
}

#[allow(clippy::too_many_arguments)]
fn generate_sample(
    spec: &SynthSpec,
    model: &CandideModel,
    corr: &Correspondence,
    book: &RecipeBook,
    tau: u64,
    label: Emotion,
    yaw: f64,
    split: Split,
) -> Result<Sample> {
    let mut rng = frame_rng(spec.seed, tau);
    let (lo, hi) = spec.scale_range;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (w, h) = spec.augmentation.image_size;
    let j = spec.translation_jitter;
    let jit = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let t = Vector2::new(w / 2.0 + jit(&mut rng), h / 2.0 + jit(&mut rng));
    let a_shape: Vec<f64> = if spec.identity_sigma > 0.0 {
        let n = Normal::new(0.0, spec.identity_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        (0..model.dim_shape()).map(|_| n.sample(&mut rng)).collect()
    } else {
        vec![0.0; model.dim_shape()]
    };
    let a_action = sample_recipe(book, label, model, &mut rng)?;
    let pose = RenderPose { s, yaw, t };
    let (frame, truth) = render_frame(model, corr, tau, &pose, &a_shape, &a_action, spec.noise_sigma, &mut rng)?;
    let (frame, ops) = match split {
        Split::Train => augment_landmarks(&frame, &spec.augmentation, &mut rng)?,
        Split::Test => (frame, Vec::new()),
    };
    let w = truth.w.0;
    Ok(Sample {
        label,
        frame,
        truth: TruthRecord {
            tau,
            split,
            label,
            s,
            w: [w.x, w.y, w.z],
            t: [t.x, t.y],
            a_shape,
            a_action,
            noise_sigma: spec.noise_sigma,
            augmentation: ops,
        },
    })
}

/// Class-balanced train split at `train_yaw` followed by one test block per
/// test yaw. Within each block labels cycle through the classes; taus number
/// all frames consecutively.
pub fn generate_dataset(
    spec: &SynthSpec,
    model: &CandideModel,
    corr: &Correspondence,
    book: &RecipeBook,
) -> Result<Dataset> {
    spec.validate()?;
    let k = Emotion::ALL.len();
    let n = spec.n_train();
    let train = (0..n)
        .map(|i| generate_sample(spec, model, corr, book, i as u64, Emotion::ALL[i % k], spec.train_yaw, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let mut test = Vec::with_capacity(spec.n_test());
    for (b, &yaw) in spec.test_yaws.iter().enumerate() {
        for i in 0..n {
            let tau = (n * (b + 1) + i) as u64;
            test.push(generate_sample(spec, model, corr, book, tau, Emotion::ALL[i % k], yaw, Split::Test)?);
        }
    }
    Ok(Dataset { train, test })
}

/// A landmark frame with its optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub label: Option<Emotion>,
    pub frame: LandmarkFrame,
}

pub fn landmark_csv_header() -> String {
    let mut h = String::from("label,tau");
    for i in 0..FP68_LEN {
        h.push_str(&format!(",x{i},y{i}"));
    }
    h
}

/// `label,tau,x0,y0,...,x67,y67` rows; unlabeled rows leave the label empty.
pub fn write_landmark_csv(rows: &[LabeledFrame]) -> String {
    let mut out = landmark_csv_header();
    out.push('\n');
    for r in rows {
        out.push_str(r.label.map_or("", |l| l.as_str()));
        out.push_str(&format!(",{}", r.frame.tau));
        for p in &r.frame.points {
            out.push_str(&format!(",{},{}", p.x, p.y));
        }
        out.push('\n');
    }
    out
}

pub fn parse_landmark_csv(text: &str) -> Result<Vec<LabeledFrame>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == landmark_csv_header() => {}
        Some((i, _)) => return Err(Error::parse(i + 1, "expected header label,tau,x0,y0,...,x67,y67")),
        None => return Err(Error::parse(1, "empty landmark file")),
    }
    let mut out = Vec::new();
    let mut taus = BTreeSet::new();
    for (i, line) in lines {
        let ln = i + 1;
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 2 + 2 * FP68_LEN {
            return Err(Error::parse(ln, format!("expected {} fields, got {}", 2 + 2 * FP68_LEN, fields.len())));
        }
        let label = match fields[0].trim() {
            "" => None,
            s => Some(s.parse::<Emotion>().map_err(|e| Error::parse(ln, e.to_string()))?),
        };
        let tau: u64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(ln, format!("bad tau {:?}", fields[1])))?;
        if !taus.insert(tau) {
            return Err(Error::parse(ln, format!("duplicate tau {tau}")));
        }
        let mut vals = Vec::with_capacity(2 * FP68_LEN);
        for f in &fields[2..] {
            vals.push(f.trim().parse::<f64>().map_err(|_| Error::parse(ln, format!("bad number {f:?}")))?);
        }
        let points = vals.chunks(2).map(|c| Point2::new(c[0], c[1])).collect();
        let frame = LandmarkFrame::new(tau, points).map_err(|e| Error::parse(ln, e.to_string()))?;
        out.push(LabeledFrame { label, frame });
    }
    Ok(out)
}

pub fn read_landmark_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledFrame>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_csv(&text)
}

impl Dataset {
    fn labeled(samples: &[Sample]) -> Vec<LabeledFrame> {
        samples
            .iter()
            .map(|s| LabeledFrame {
                label: Some(s.label),
                frame: s.frame.clone(),
            })
            .collect()
    }

    /// Writes `train.csv`, `test.csv` and `truth.jsonl` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut truth = String::new();
        for s in self.train.iter().chain(&self.test) {
            truth.push_str(&serde_json::to_string(&s.truth)?);
            truth.push('\n');
        }
        let files = [
            ("train.csv", write_landmark_csv(&Self::labeled(&self.train))),
            ("test.csv", write_landmark_csv(&Self::labeled(&self.test))),
            ("truth.jsonl", truth),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

pub fn read_truth_jsonl(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
