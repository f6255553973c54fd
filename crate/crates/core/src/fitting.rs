//! Levenberg-Marquardt fitting of the deformable model to 2D landmarks.
//!
//! Two phases share one residual system:
//! * personalization fits `(s, w, t, a_shape)` on neutral frames and keeps the
//!   shape coefficients whose distrust falls below a threshold;
//! * action-unit extraction fits `(s, w, t, a_action)` per frame with the
//!   shape frozen at the personalized values.
//!
//! Residuals are `model - observed`, stacked as `(x, y)` per active point, so
//! moving every landmark by `+1` in x moves every x-residual by `-1`.

use nalgebra::{DMatrix, DVector, Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{
    init_pose_with_shape, rodrigues, rodrigues_derivatives, PoseParams, RotationVector,
};
use crate::model::{check_len, CandideModel, Correspondence, FP68_LEN};

/// One 68-point observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    pub tau: u64,
    pub points: Vec<Point2<f64>>,
}

impl LandmarkFrame {
    pub fn new(tau: u64, points: Vec<Point2<f64>>) -> Result<Self> {
        let f = LandmarkFrame { tau, points };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != FP68_LEN {
            return Err(Error::InvalidFrame(format!(
                "frame {}: expected {FP68_LEN} points, got {}",
                self.tau,
                self.points.len()
            )));
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidFrame(format!(
                "frame {}: non-finite landmark",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Which parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub scale: bool,
    pub rotation: bool,
    pub translation: bool,
    pub shape: bool,
    pub action: bool,
}

impl ParamMask {
    /// Pose only.
    pub const GLOBAL: ParamMask = ParamMask {
        scale: true,
        rotation: true,
        translation: true,
        shape: false,
        action: false,
    };
    /// Pose and shape units (personalization).
    pub const PERSONALIZE: ParamMask = ParamMask {
        shape: true,
        ..ParamMask::GLOBAL
    };
    /// Pose and action units, shape frozen.
    pub const ACTION: ParamMask = ParamMask {
        action: true,
        ..ParamMask::GLOBAL
    };
    pub const ALL: ParamMask = ParamMask {
        shape: true,
        action: true,
        ..ParamMask::GLOBAL
    };
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub tol_gradient: f64,
    pub tol_step: f64,
    pub max_iter: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            tol_gradient: 1e-10,
            tol_step: 1e-12,
            max_iter: 200,
        }
    }
}

const LAMBDA_MAX: f64 = 1e16;

/// Reprojection residuals of one frame against the model, with the set of
/// free parameters for the current phase.
///
/// Free parameters are packed as `[ln s, w, t, a_shape, a_action]`, skipping
/// masked-out groups. Scale is optimized in log space so it stays positive.
pub struct ResidualSystem<'a> {
    model: &'a CandideModel,
    corr: &'a Correspondence,
    frame: &'a LandmarkFrame,
    mask: ParamMask,
    /// Displacements of each unit (shape then action) at each active point.
    unit_disp: Vec<Vec<Vector3<f64>>>,
    observed: Vec<Vector2<f64>>,
}

impl<'a> ResidualSystem<'a> {
    pub fn new(
        model: &'a CandideModel,
        corr: &'a Correspondence,
        frame: &'a LandmarkFrame,
        mask: ParamMask,
    ) -> Result<Self> {
        frame.validate()?;
        let n_free = Self::count_free(model, mask);
        if n_free == 0 {
            return Err(Error::InvalidInput("no free parameters".into()));
        }
        let unit_disp = model
            .shape_units
            .iter()
            .chain(&model.action_units)
            .map(|u| {
                corr.active_3d
                    .iter()
                    .map(|&v| u.displacement(v).copied().unwrap_or_else(Vector3::zeros))
                    .collect()
            })
            .collect();
        let observed = corr
            .active_2d
            .iter()
            .map(|&j| frame.points[j].coords)
            .collect();
        Ok(ResidualSystem {
            model,
            corr,
            frame,
            mask,
            unit_disp,
            observed,
        })
    }

    fn count_free(model: &CandideModel, mask: ParamMask) -> usize {
        usize::from(mask.scale)
            + 3 * usize::from(mask.rotation)
            + 2 * usize::from(mask.translation)
            + if mask.shape { model.dim_shape() } else { 0 }
            + if mask.action { model.dim_action() } else { 0 }
    }

    pub fn n_free(&self) -> usize {
        Self::count_free(self.model, self.mask)
    }

    pub fn n_residuals(&self) -> usize {
        2 * self.corr.n_active()
    }

    pub fn mask(&self) -> ParamMask {
        self.mask
    }

    pub fn frame(&self) -> &LandmarkFrame {
        self.frame
    }

    pub fn pack(&self, pose: &PoseParams) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.n_free());
        if self.mask.scale {
            x.push(pose.s.ln());
        }
        if self.mask.rotation {
            x.extend(pose.w.0.iter());
        }
        if self.mask.translation {
            x.extend(pose.t.iter());
        }
        if self.mask.shape {
            x.extend(&pose.a_shape);
        }
        if self.mask.action {
            x.extend(&pose.a_action);
        }
        DVector::from_vec(x)
    }

    /// Writes the free parameters `x` over a copy of `base`.
    pub fn unpack(&self, x: &DVector<f64>, base: &PoseParams) -> PoseParams {
        let mut p = base.clone();
        let mut i = 0;
        if self.mask.scale {
            p.s = x[i].exp();
            i += 1;
        }
        if self.mask.rotation {
            p.w = RotationVector::new(x[i], x[i + 1], x[i + 2]);
            i += 3;
        }
        if self.mask.translation {
            p.t = Vector2::new(x[i], x[i + 1]);
            i += 2;
        }
        if self.mask.shape {
            let d = p.a_shape.len();
            p.a_shape.copy_from_slice(&x.as_slice()[i..i + d]);
            i += d;
        }
        if self.mask.action {
            let f = p.a_action.len();
            p.a_action.copy_from_slice(&x.as_slice()[i..i + f]);
        }
        p
    }

    /// Model-space positions (static shape plus deformations) of active points.
    fn local_points(&self, pose: &PoseParams) -> Vec<Vector3<f64>> {
        let d = self.model.dim_shape();
        self.corr
            .active_3d
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let mut q = self.model.vertices[v].coords;
                for (u, &c) in pose.a_shape.iter().enumerate() {
                    q += self.unit_disp[u][k] * c;
                }
                for (u, &c) in pose.a_action.iter().enumerate() {
                    q += self.unit_disp[d + u][k] * c;
                }
                q
            })
            .collect()
    }

    fn check_pose(&self, pose: &PoseParams) -> Result<()> {
        check_len("shape coefficients", self.model.dim_shape(), pose.a_shape.len())?;
        check_len("action coefficients", self.model.dim_action(), pose.a_action.len())
    }

    /// Stacked `(x, y)` differences between projected model and landmarks.
    pub fn residuals(&self, pose: &PoseParams) -> Result<DVector<f64>> {
        self.check_pose(pose)?;
        let r = rodrigues(&pose.w);
        let local = self.local_points(pose);
        let mut out = DVector::zeros(self.n_residuals());
        for (k, q) in local.iter().enumerate() {
            let p = r * q * pose.s;
            out[2 * k] = p.x + pose.t.x - self.observed[k].x;
            out[2 * k + 1] = p.y + pose.t.y - self.observed[k].y;
        }
        Ok(out)
    }

    /// Analytic Jacobian of [`residuals`](Self::residuals) with respect to
    /// the packed free parameters.
    pub fn jacobian(&self, pose: &PoseParams) -> Result<DMatrix<f64>> {
        self.check_pose(pose)?;
        let r = rodrigues(&pose.w);
        let dr = if self.mask.rotation {
            Some(rodrigues_derivatives(&pose.w))
        } else {
            None
        };
        let local = self.local_points(pose);
        let d = self.model.dim_shape();
        let f = self.model.dim_action();
        let mut jac = DMatrix::zeros(self.n_residuals(), self.n_free());
        for (k, q) in local.iter().enumerate() {
            let (rx, ry) = (2 * k, 2 * k + 1);
            let mut c = 0;
            if self.mask.scale {
                let p = r * q * pose.s;
                jac[(rx, c)] = p.x;
                jac[(ry, c)] = p.y;
                c += 1;
            }
            if let Some(dr) = &dr {
                for dk in dr {
                    let p = dk * q * pose.s;
                    jac[(rx, c)] = p.x;
                    jac[(ry, c)] = p.y;
                    c += 1;
                }
            }
            if self.mask.translation {
                jac[(rx, c)] = 1.0;
                jac[(ry, c + 1)] = 1.0;
                c += 2;
            }
            let groups = [(self.mask.shape, 0, d), (self.mask.action, d, f)];
            for (on, offset, len) in groups {
                if !on {
                    continue;
                }
                for u in 0..len {
                    let a = self.unit_disp[offset + u][k];
                    if a != Vector3::zeros() {
                        let p = r * a * pose.s;
                        jac[(rx, c)] = p.x;
                        jac[(ry, c)] = p.y;
                    }
                    c += 1;
                }
            }
        }
        Ok(jac)
    }

    /// `E = 0.5 * |r|^2`.
    pub fn error(&self, pose: &PoseParams) -> Result<f64> {
        Ok(0.5 * self.residuals(pose)?.norm_squared())
    }

    /// Root mean squared point distance (pixels) over active points.
    pub fn rmse(&self, pose: &PoseParams) -> Result<f64> {
        Ok((self.residuals(pose)?.norm_squared() / self.corr.n_active() as f64).sqrt())
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    NoProgress,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub pose: PoseParams,
    /// Final `0.5 * |r|^2`.
    pub error: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Error after each accepted step, starting with the initial error.
    pub history: Vec<f64>,
}

fn damped_solve(jtj: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda * jtj[(i, i)].max(1e-6);
    }
    a.cholesky().map(|c| c.solve(&(-g)))
}

/// Minimizes `0.5 |r|^2` from `init` using a Marquardt-damped Gauss-Newton
/// iteration with multiplicative lambda updates.
pub fn lm_minimize(system: &ResidualSystem, init: &PoseParams, config: &LmConfig) -> Result<LmOutcome> {
    init.validate()?;
    let mut pose = init.clone();
    let mut x = system.pack(&pose);
    let mut r = system.residuals(&pose)?;
    let mut cost = 0.5 * r.norm_squared();
    if !cost.is_finite() {
        return Err(Error::Diverged(format!(
            "frame {}: non-finite initial residual",
            system.frame.tau
        )));
    }
    let mut history = vec![cost];
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let termination = loop {
        if iterations >= config.max_iter {
            break Termination::MaxIterations;
        }
        let jac = system.jacobian(&pose)?;
        let g = jac.tr_mul(&r);
        if g.amax() <= config.tol_gradient {
            break Termination::Gradient;
        }
        iterations += 1;
        let jtj = jac.tr_mul(&jac);

        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            let Some(step) = damped_solve(&jtj, &g, lambda) else {
                lambda *= config.lambda_up;
                continue;
            };
            let x_new = &x + &step;
            let pose_new = system.unpack(&x_new, &pose);
            let r_new = system.residuals(&pose_new)?;
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new.is_finite() && cost_new <= cost {
                lambda = (lambda / config.lambda_down).max(1e-12);
                accepted = Some((step, x_new, pose_new, r_new, cost_new));
                break;
            }
            lambda *= config.lambda_up;
        }
        let Some((step, x_new, pose_new, r_new, cost_new)) = accepted else {
            break Termination::NoProgress;
        };
        let small_step = step.norm() <= config.tol_step * (x.norm() + config.tol_step);
        x = x_new;
        pose = pose_new;
        r = r_new;
        cost = cost_new;
        history.push(cost);
        if small_step {
            break Termination::Step;
        }
    };

    pose.validate().map_err(|_| {
        Error::Diverged(format!("frame {}: parameters left the finite domain", system.frame.tau))
    })?;
    let rmse = (r.norm_squared() / system.corr.n_active() as f64).sqrt();
    Ok(LmOutcome {
        pose,
        error: cost,
        rmse,
        iterations,
        termination,
        history,
    })
}

/// `init_pose` followed by LM under `mask`, with the shape fixed to `a_shape`
/// wherever the mask freezes it.
pub fn fit_frame(
    frame: &LandmarkFrame,
    model: &CandideModel,
    corr: &Correspondence,
    mask: ParamMask,
    a_shape: &[f64],
    config: &LmConfig,
) -> Result<LmOutcome> {
    let init = init_pose_with_shape(frame, model, corr, a_shape)?;
    let system = ResidualSystem::new(model, corr, frame, mask)?;
    lm_minimize(&system, &init, config)
}

/// Probability mass of `N(mu, sigma^2)` lying closer to zero than to `mu`,
/// i.e. `Phi(-|mu| / (2 sigma))`.
pub fn distrust(mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if mu == 0.0 { 0.5 } else { 0.0 };
    }
    let z = -mu.abs() / (2.0 * sigma);
    if z == 0.0 {
        return 0.5;
    }
    Normal::standard().cdf(z)
}

/// Trust statistics of one shape-unit coefficient across neutral frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrustRecord {
    pub unit_name: String,
    pub mean: f64,
    pub variance: f64,
    pub sigma: f64,
    pub distrust: f64,
}

impl DistrustRecord {
    pub fn from_mean_sigma(unit_name: impl Into<String>, mean: f64, sigma: f64) -> Self {
        DistrustRecord {
            unit_name: unit_name.into(),
            mean,
            variance: sigma * sigma,
            sigma,
            distrust: distrust(mean, sigma),
        }
    }

    /// Sample mean and unbiased variance of `values`.
    pub fn from_samples(unit_name: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sigma = variance.sqrt();
        DistrustRecord {
            unit_name: unit_name.into(),
            mean,
            variance,
            sigma,
            distrust: distrust(mean, sigma),
        }
    }
}

/// Sorts ascending by distrust; ties keep their input order.
pub fn sort_by_distrust(records: &mut [DistrustRecord]) {
    records.sort_by(|a, b| a.distrust.total_cmp(&b.distrust));
}

/// Renders records in a fixed-width table with a rule under the last trusted row.
pub fn format_distrust_table(records: &[DistrustRecord], threshold: f64) -> String {
    let mut out = format!(
        "{:>9} {:>9} {:>9} {:>9}  {}\n",
        "Distrust", "Mean", "Variance", "Sigma", "Coefficient name"
    );
    out.push_str(&"=".repeat(60));
    out.push('\n');
    let mut ruled = false;
    for r in records {
        if !ruled && r.distrust >= threshold {
            out.push_str(&"-".repeat(60));
            out.push('\n');
            ruled = true;
        }
        out.push_str(&format!(
            "{:>9.3} {:>9.3} {:>9.3} {:>9.3}  {}\n",
            r.distrust, r.mean, r.variance, r.sigma, r.unit_name
        ));
    }
    out
}

/// A frame that could not be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFrame {
    pub tau: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Personalization {
    /// Mean coefficient for trusted units, zero for the rest.
    pub a_shape: Vec<f64>,
    /// One record per shape unit, ascending by distrust.
    pub records: Vec<DistrustRecord>,
    pub threshold: f64,
    pub fits: Vec<(u64, LmOutcome)>,
    pub dropped: Vec<DroppedFrame>,
}

/// Fits pose and shape on each neutral frame and keeps the shape units whose
/// distrust is below `threshold`.
pub fn personalize(
    neutral_frames: &[LandmarkFrame],
    model: &CandideModel,
    corr: &Correspondence,
    threshold: f64,
    config: &LmConfig,
) -> Result<Personalization> {
    if neutral_frames.len() < 2 {
        return Err(Error::InsufficientFrames(neutral_frames.len()));
    }
    let zero = vec![0.0; model.dim_shape()];
    let mut fits = Vec::new();
    let mut dropped = Vec::new();
    for frame in neutral_frames {
        match fit_frame(frame, model, corr, ParamMask::PERSONALIZE, &zero, config) {
            Ok(fit) => fits.push((frame.tau, fit)),
            Err(e) if e.is_numerical() => dropped.push(DroppedFrame {
                tau: frame.tau,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if fits.len() < 2 {
        return Err(Error::InsufficientFrames(fits.len()));
    }

    let mut records: Vec<DistrustRecord> = model
        .shape_units
        .iter()
        .enumerate()
        .map(|(d, unit)| {
            let values: Vec<f64> = fits.iter().map(|(_, f)| f.pose.a_shape[d]).collect();
            DistrustRecord::from_samples(unit.name.clone(), &values)
        })
        .collect();
    let a_shape = records
        .iter()
        .map(|r| if r.distrust < threshold { r.mean } else { 0.0 })
        .collect();
    sort_by_distrust(&mut records);
    Ok(Personalization {
        a_shape,
        records,
        threshold,
        fits,
        dropped,
    })
}

/// Per-frame pose and action-unit fit with the shape frozen at `a_shape`.
///
/// Each entry is the fit or the error for the frame at the same position.
pub fn extract_action_units(
    frames: &[LandmarkFrame],
    model: &CandideModel,
    corr: &Correspondence,
    a_shape: &[f64],
    config: &LmConfig,
    threads: usize,
) -> Result<Vec<Result<LmOutcome>>> {
    check_len("shape coefficients", model.dim_shape(), a_shape.len())?;
    Ok(parallel_map(frames, threads, |frame| {
        fit_frame(frame, model, corr, ParamMask::ACTION, a_shape, config)
    }))
}

/// Maps `f` over `items` on up to `threads` scoped workers; output order
/// follows input order.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fit worker panicked"))
            .collect()
    })
}

/// Per-frame fit output, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub tau: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub s: f64,
    pub w: [f64; 3],
    pub t: [f64; 2],
    pub a_shape: Vec<f64>,
    pub a_action: Vec<f64>,
    pub rmse: f64,
    pub iterations: usize,
}

impl FitRecord {
    pub fn new(tau: u64, label: Option<String>, fit: &LmOutcome) -> Self {
        let p = &fit.pose;
        FitRecord {
            tau,
            label,
            s: p.s,
            w: [p.w.0.x, p.w.0.y, p.w.0.z],
            t: [p.t.x, p.t.y],
            a_shape: p.a_shape.clone(),
            a_action: p.a_action.clone(),
            rmse: fit.rmse,
            iterations: fit.iterations,
        }
    }

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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{forward, project_xy};
    use approx::assert_relative_eq;

    fn setup() -> (CandideModel, Correspondence) {
        let m = CandideModel::bundled();
        let c = Correspondence::bundled(&m);
        (m, c)
    }

    /// Landmarks for the corresponded points; the rest are parked at the
    /// centroid, which the residuals never read.
    fn synth_frame(m: &CandideModel, c: &Correspondence, pose: &PoseParams) -> LandmarkFrame {
        let pts = project_xy(&forward(m, pose).unwrap());
        let mut lm = vec![Point2::new(0.0, 0.0); FP68_LEN];
        for &(j, v) in &c.pairs {
            lm[j] = pts[v];
        }
        LandmarkFrame::new(0, lm).unwrap()
    }

    fn pose(m: &CandideModel, s: f64, w: RotationVector, t: (f64, f64)) -> PoseParams {
        PoseParams {
            s,
            w,
            t: Vector2::new(t.0, t.1),
            ..PoseParams::identity(m)
        }
    }

    #[test]
    fn frame_validation() {
        assert!(LandmarkFrame::new(0, vec![Point2::origin(); 67]).is_err());
        let mut pts = vec![Point2::origin(); 68];
        pts[3].x = f64::NAN;
        assert!(LandmarkFrame::new(0, pts).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_residuals() {
        let (m, c) = setup();
        let mut p = pose(&m, 120.0, RotationVector::new(0.1, 0.3, -0.05), (320.0, 240.0));
        p.a_action[0] = 0.6;
        let frame = synth_frame(&m, &c, &p);
        let sys = ResidualSystem::new(&m, &c, &frame, ParamMask::ACTION).unwrap();
        let r = sys.residuals(&p).unwrap();
        assert_eq!(r.len(), 2 * 37);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn translated_landmarks_shift_residuals() {
        let (m, c) = setup();
        let p = pose(&m, 100.0, RotationVector::zero(), (50.0, 60.0));
        let mut frame = synth_frame(&m, &c, &p);
        for pt in &mut frame.points {
            pt.x += 1.0;
        }
        let sys = ResidualSystem::new(&m, &c, &frame, ParamMask::GLOBAL).unwrap();
        let r = sys.residuals(&p).unwrap();
        for k in 0..37 {
            assert_relative_eq!(r[2 * k], -1.0, epsilon = 1e-12);
            assert_relative_eq!(r[2 * k + 1], 0.0, epsilon = 1e-12);
        }
        // E = 0.5 * N_s * 1^2
        assert_relative_eq!(sys.error(&p).unwrap(), 0.5 * 37.0, epsilon = 1e-10);
    }

    #[test]
    fn single_perturbed_landmark_error() {
        let (m, c) = setup();
        let p = pose(&m, 100.0, RotationVector::zero(), (50.0, 60.0));
        let mut frame = synth_frame(&m, &c, &p);
        let j = c.active_2d[5];
        frame.points[j].x += 3.0;
        frame.points[j].y += 4.0;
        let sys = ResidualSystem::new(&m, &c, &frame, ParamMask::GLOBAL).unwrap();
        assert_relative_eq!(sys.error(&p).unwrap(), 12.5, epsilon = 1e-10);
    }

    #[test]
    fn empty_mask_rejected() {
        let (m, c) = setup();
        let frame = synth_frame(&m, &c, &PoseParams::identity(&m));
        let none = ParamMask {
            scale: false,
            rotation: false,
            translation: false,
            shape: false,
            action: false,
        };
        assert!(ResidualSystem::new(&m, &c, &frame, none).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let (m, c) = setup();
        let mut truth = pose(&m, 1.3, RotationVector::new(0.2, -0.4, 0.1), (0.5, -0.2));
        truth.a_shape[2] = 0.3;
        truth.a_action[1] = 0.7;
        let frame = synth_frame(&m, &c, &truth);
        let mut at = truth.clone();
        at.s = 1.1;
        at.w = RotationVector::new(0.25, -0.3, 0.05);
        at.a_action[3] = 0.2;
        at.a_shape[5] = -0.1;
        let sys = ResidualSystem::new(&m, &c, &frame, ParamMask::ALL).unwrap();
        let jac = sys.jacobian(&at).unwrap();
        let x = sys.pack(&at);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let rp = sys.residuals(&sys.unpack(&xp, &at)).unwrap();
            let rm = sys.residuals(&sys.unpack(&xm, &at)).unwrap();
            let fd = (rp - rm) / (2.0 * h);
            let col = jac.column(k);
            let scale = fd.amax().max(col.amax()).max(1e-8);
            assert!(
                (fd - col).amax() / scale < 1e-6,
                "column {k} disagrees"
            );
        }
    }

    #[test]
    fn converges_immediately_at_ground_truth() {
        let (m, c) = setup();
        let p = pose(&m, 90.0, RotationVector::yaw(0.2), (300.0, 200.0));
        let frame = synth_frame(&m, &c, &p);
        let sys = ResidualSystem::new(&m, &c, &frame, ParamMask::ACTION).unwrap();
        let out = lm_minimize(&sys, &p, &LmConfig::default()).unwrap();
        assert!(out.iterations <= 2, "{} iterations", out.iterations);
        assert!(out.error <= 1e-12);
    }

    #[test]
    fn recovers_scale_and_yaw_from_init_pose() {
        let (m, c) = setup();
        let p = pose(&m, 1.5, RotationVector::yaw(0.4), (2.0, -1.0));
        let frame = synth_frame(&m, &c, &p);
        let zero = vec![0.0; m.dim_shape()];
        let out = fit_frame(&frame, &m, &c, ParamMask::ACTION, &zero, &LmConfig::default()).unwrap();
        assert_relative_eq!(out.pose.s, 1.5, epsilon = 1e-6);
        assert!((out.pose.w.0 - p.w.0).amax() < 1e-5);
        assert!(out.rmse <= 1e-6);
    }

    #[test]
    fn accepted_errors_never_increase() {
        let (m, c) = setup();
        let mut p = pose(&m, 110.0, RotationVector::new(0.05, -0.45, 0.1), (320.0, 240.0));
        p.a_action = vec![0.8, 0.2, 0.0, 0.5, 0.9, 0.1, 0.3, 0.6];
        let frame = synth_frame(&m, &c, &p);
        let out = fit_frame(&frame, &m, &c, ParamMask::ACTION, &vec![0.0; 15], &LmConfig::default())
            .unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.history.len() >= 2);
    }

    #[test]
    fn distrust_closed_form() {
        assert_eq!(distrust(0.0, 0.3), 0.5);
        assert_eq!(distrust(-0.0, 0.3), 0.5);
        assert_eq!(distrust(0.0, 0.0), 0.5);
        assert_eq!(distrust(0.4, 0.0), 0.0);
        assert!(distrust(-0.707, 0.038) < 0.0005);
        assert!((distrust(0.234, 0.169) - 0.244).abs() < 0.001);
        // sigma column of the published table, last trusted and first distrusted rows
        assert!((distrust(-0.443, 0.387) - 0.284).abs() < 0.001);
    }

    #[test]
    fn distrust_symmetric_and_monotone() {
        for &mu in &[0.01, 0.1, 0.5, 2.0] {
            for &sigma in &[0.05, 0.3, 1.0] {
                assert_eq!(distrust(mu, sigma), distrust(-mu, sigma));
                assert!(distrust(mu * 1.5, sigma) < distrust(mu, sigma));
                assert!(distrust(mu, sigma * 1.5) > distrust(mu, sigma));
            }
        }
    }

    #[test]
    fn personalize_needs_two_frames() {
        let (m, c) = setup();
        let frame = synth_frame(&m, &c, &pose(&m, 100.0, RotationVector::zero(), (0.0, 0.0)));
        let err = personalize(&[frame], &m, &c, 0.25, &LmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("insufficient frames"));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            assert_eq!(parallel_map(&items, threads, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }
}
