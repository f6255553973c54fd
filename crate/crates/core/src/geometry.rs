//! Rotation parametrization, the forward deformation chain and the closed-form
//! scale/translation initialization.
//!
//! Axes follow the image: x to the right, y down, z away from the viewer.
//! Translation only acts in the xy plane.

use nalgebra::{Matrix3, Point2, Point3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::fitting::LandmarkFrame;
use crate::model::{check_len, CandideModel, Correspondence};

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-7;

/// Axis-angle rotation `w = alpha * u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn zero() -> Self {
        RotationVector(Vector3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        RotationVector(Vector3::new(x, y, z))
    }

    /// Rotation about the vertical (y) image axis.
    pub fn yaw(angle: f64) -> Self {
        RotationVector::new(0.0, angle, 0.0)
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn axis(&self) -> Option<Vector3<f64>> {
        let a = self.angle();
        (a > 0.0).then(|| self.0 / a)
    }

    /// Equivalent vector with angle in `[0, pi]`.
    ///
    /// At exactly `pi` the axis sign is fixed so that its first non-zero
    /// component is positive.
    pub fn canonical(&self) -> Self {
        let a = self.angle();
        if a == 0.0 {
            return *self;
        }
        let u = self.0 / a;
        let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
        let mut u = u;
        if a > std::f64::consts::PI {
            a = 2.0 * std::f64::consts::PI - a;
            u = -u;
        }
        if a == std::f64::consts::PI {
            u = positive_first(u);
        }
        RotationVector(u * a)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        rodrigues(self)
    }
}

fn positive_first(u: Vector3<f64>) -> Vector3<f64> {
    match u.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -u,
        _ => u,
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `sin(a)/a` and `(1 - cos a)/a^2`, series-expanded near zero.
fn rodrigues_coefficients(a: f64) -> (f64, f64) {
    if a < SMALL_ANGLE {
        let a2 = a * a;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (a.sin() / a, (1.0 - a.cos()) / (a * a))
    }
}

/// `R = cos(a) I + (1 - cos a) u u^T + sin(a) [u]x`, written in `w` directly so
/// that the zero angle needs no axis.
pub fn rodrigues(w: &RotationVector) -> Matrix3<f64> {
    let v = w.0;
    let a = v.norm();
    let (sa, cb) = rodrigues_coefficients(a);
    Matrix3::identity() * a.cos() + skew(&v) * sa + (v * v.transpose()) * cb
}

/// Partial derivatives `dR/dw_k`, k = 0..3.
pub fn rodrigues_derivatives(w: &RotationVector) -> [Matrix3<f64>; 3] {
    let v = w.0;
    let a2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if a2 < SMALL_ANGLE * SMALL_ANGLE {
        // First-order expansion around the identity.
        return basis.map(|e| {
            skew(&e) + (v * e.transpose() + e * v.transpose()) * 0.5
                - Matrix3::identity() * v.dot(&e)
        });
    }
    let r = rodrigues(w);
    let vx = skew(&v);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let k = v.dot(&e);
        ((vx * k + skew(&v.cross(&(i_minus_r * e)))) / a2) * r
    })
}

/// Recovers the canonical rotation vector (angle in `[0, pi]`) from `R`.
pub fn inverse_rodrigues(r: &Matrix3<f64>) -> Result<RotationVector> {
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotRotation("non-finite entries".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(Error::NotRotation(format!(
            "orthogonality error {ortho:.3e}, determinant {det}"
        )));
    }

    // tr R = 2 cos a + 1 and R - R^T = 2 sin a [u]x
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let v = vee(&(r - r.transpose())) * 0.5;
    let s = v.norm();
    let a = s.atan2(c);

    if a < SMALL_ANGLE {
        let (sa, _) = rodrigues_coefficients(a);
        return Ok(RotationVector(v / sa));
    }
    if a < std::f64::consts::FRAC_PI_2 {
        return Ok(RotationVector(v * (a / s)));
    }

    // Near pi the antisymmetric part vanishes; take the axis from the
    // symmetric part (R + R^T)/2 = cos a I + (1 - cos a) u u^T.
    let uut = ((r + r.transpose()) * 0.5 - Matrix3::identity() * c) / (1.0 - c);
    let k = (0..3)
        .max_by(|&i, &j| uut[(i, i)].total_cmp(&uut[(j, j)]))
        .unwrap();
    let mut u = uut.column(k).into_owned() / uut[(k, k)].max(0.0).sqrt();
    u /= u.norm();
    if s > 1e-12 {
        if u.dot(&v) < 0.0 {
            u = -u;
        }
    } else {
        u = positive_first(u);
    }
    Ok(RotationVector(u * a))
}

/// Global scale, rotation, xy translation and deformation coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub s: f64,
    pub w: RotationVector,
    pub t: Vector2<f64>,
    pub a_shape: Vec<f64>,
    pub a_action: Vec<f64>,
}

impl PoseParams {
    /// Identity pose with zero deformations sized for `model`.
    pub fn identity(model: &CandideModel) -> Self {
        PoseParams {
            s: 1.0,
            w: RotationVector::zero(),
            t: Vector2::zeros(),
            a_shape: vec![0.0; model.dim_shape()],
            a_action: vec![0.0; model.dim_action()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "scale must be positive, got {}",
                self.s
            )));
        }
        let finite = self.w.0.iter().all(|x| x.is_finite())
            && self.t.iter().all(|x| x.is_finite())
            && self.a_shape.iter().all(|x| x.is_finite())
            && self.a_action.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite pose parameter".into()));
        }
        Ok(())
    }
}

fn transform(s: f64, r: &Matrix3<f64>, t: &Vector2<f64>, p: &Point3<f64>) -> Point3<f64> {
    let q = r * p.coords * s;
    Point3::new(q.x + t.x, q.y + t.y, q.z)
}

/// Globally moved, personalized vertices `s R (P^c + sum a_d A_d) + t`.
pub fn forward_global(
    model: &CandideModel,
    s: f64,
    w: &RotationVector,
    t: &Vector2<f64>,
    a_shape: &[f64],
) -> Result<Vec<Point3<f64>>> {
    let zero_action = vec![0.0; model.dim_action()];
    let base = model.deformed_vertices(a_shape, &zero_action)?;
    let r = rodrigues(w);
    Ok(base.iter().map(|p| transform(s, &r, t, p)).collect())
}

/// Adds `s R sum a_f A_f` to globally moved vertices.
///
/// Applied to every vertex; the fit only reads the corresponded ones.
pub fn forward_action(
    model: &CandideModel,
    global_points: &[Point3<f64>],
    s: f64,
    w: &RotationVector,
    a_action: &[f64],
) -> Result<Vec<Point3<f64>>> {
    check_len("action coefficients", model.dim_action(), a_action.len())?;
    check_len("global points", model.vertices.len(), global_points.len())?;
    let r = rodrigues(w);
    let mut out = global_points.to_vec();
    for (unit, &c) in model.action_units.iter().zip(a_action) {
        if c == 0.0 {
            continue;
        }
        for (v, d) in &unit.targets {
            out[*v] += r * d * (s * c);
        }
    }
    Ok(out)
}

/// Orthographic projection onto the xy plane.
pub fn project_xy(points: &[Point3<f64>]) -> Vec<Point2<f64>> {
    points.iter().map(|p| Point2::new(p.x, p.y)).collect()
}

/// Full forward chain for a pose, returning every vertex in observer space.
pub fn forward(model: &CandideModel, pose: &PoseParams) -> Result<Vec<Point3<f64>>> {
    let global = forward_global(model, pose.s, &pose.w, &pose.t, &pose.a_shape)?;
    forward_action(model, &global, pose.s, &pose.w, &pose.a_action)
}

fn centroid(points: &[Point2<f64>]) -> Vector2<f64> {
    points.iter().map(|p| p.coords).sum::<Vector2<f64>>() / points.len() as f64
}

/// Least-squares isotropic scale and translation taking `model_xy` onto
/// `target_xy`: `alpha * a + gamma ~ b`.
pub fn affine_init(model_xy: &[Point2<f64>], target_xy: &[Point2<f64>]) -> Result<(f64, Vector2<f64>)> {
    check_len("target points", model_xy.len(), target_xy.len())?;
    if model_xy.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "affine initialization needs at least 2 points, got {}",
            model_xy.len()
        )));
    }
    let ca = centroid(model_xy);
    let cb = centroid(target_xy);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in model_xy.iter().zip(target_xy) {
        let da = a.coords - ca;
        let db = b.coords - cb;
        num += da.dot(&db);
        den += da.norm_squared();
    }
    if den <= f64::MIN_POSITIVE {
        return Err(Error::ZeroCenteredNorm);
    }
    let alpha = num / den;
    Ok((alpha, cb - ca * alpha))
}

/// Initial pose: no deformation, identity rotation, closed-form scale and
/// translation over the active points.
pub fn init_pose(
    frame: &LandmarkFrame,
    model: &CandideModel,
    corr: &Correspondence,
) -> Result<PoseParams> {
    init_pose_with_shape(frame, model, corr, &vec![0.0; model.dim_shape()])
}

/// As [`init_pose`], with the model personalized by `a_shape` first.
pub fn init_pose_with_shape(
    frame: &LandmarkFrame,
    model: &CandideModel,
    corr: &Correspondence,
    a_shape: &[f64],
) -> Result<PoseParams> {
    frame.validate()?;
    let base = model.deformed_vertices(a_shape, &vec![0.0; model.dim_action()])?;
    let model_xy: Vec<Point2<f64>> = corr
        .active_3d
        .iter()
        .map(|&v| Point2::new(base[v].x, base[v].y))
        .collect();
    let target_xy: Vec<Point2<f64>> = corr.active_2d.iter().map(|&j| frame.points[j]).collect();
    let (s, t) = affine_init(&model_xy, &target_xy)?;
    if !(s > 0.0) {
        return Err(Error::InvalidInput(format!(
            "initial scale is not positive ({s}); landmarks may be mirrored"
        )));
    }
    Ok(PoseParams {
        s,
        w: RotationVector::zero(),
        t,
        a_shape: a_shape.to_vec(),
        a_action: vec![0.0; model.dim_action()],
    })
}
