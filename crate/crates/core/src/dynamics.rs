//! Quasi-static pusher-slider dynamics.
//!
//! The slider state is `[x, y, theta, psi_c]` where `psi_c` is the azimuth of
//! the pusher contact on the slider perimeter. With the ellipsoidal limit
//! surface `V = A F`, a contact force `[f_n, f_t]` on face `i` moves the slider
//! with global twist `R(theta) A J_i^T [f_n, f_t]` while the pusher slides along
//! the perimeter at `psi_dot`.

use nalgebra::{Matrix2x3, Matrix3, Matrix4x3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geom2d::{point_on_perimeter, rotation_matrix, ConvexPolygon, Pose2, VERTEX_AZIMUTH_EPS};
use crate::scalar::{wrap_angle, Real};

/// Offset used to realize the strict `psi_dot` inequalities of the sliding modes.
pub const STRICT_EPS: f64 = 1e-6;

/// Tolerance when checking inputs against their bounds.
pub const INPUT_TOL: f64 = 1e-9;

/// Default clearance (rad) kept between an allowed contact band and a vertex.
pub const VERTEX_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliderState<T: Real> {
    pub pose: Pose2<T>,
    pub psi_c: T,
}

impl<T: Real> SliderState<T> {
    pub fn new(x: T, y: T, theta: T, psi_c: T) -> Self {
        Self {
            pose: Pose2::new(x, y, theta),
            psi_c: wrap_angle(psi_c),
        }
    }

    pub fn from_vector(v: &Vector4<T>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(&self) -> Vector4<T> {
        Vector4::new(self.pose.x, self.pose.y, self.pose.theta, self.psi_c)
    }

    /// Componentwise `self - other` with both angle components wrapped.
    pub fn difference(&self, other: &Self) -> Vector4<T> {
        Vector4::new(
            self.pose.x - other.pose.x,
            self.pose.y - other.pose.y,
            wrap_angle(self.pose.theta - other.pose.theta),
            wrap_angle(self.psi_c - other.psi_c),
        )
    }

    pub fn with_psi(&self, psi_c: T) -> Self {
        Self {
            pose: self.pose,
            psi_c: wrap_angle(psi_c),
        }
    }

    /// Adds a state increment, wrapping both angles.
    pub fn advanced(&self, d: &Vector4<T>) -> Self {
        Self::new(
            self.pose.x + d[0],
            self.pose.y + d[1],
            self.pose.theta + d[2],
            self.psi_c + d[3],
        )
    }
}

/// Pusher input `[f_n, f_t, psi_dot]` in the contact face's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PusherInput<T: Real> {
    f_n: T,
    f_t: T,
    psi_dot: T,
}

impl<T: Real> PusherInput<T> {
    /// Checks force, friction-cone and contact-velocity bounds of `model`.
    pub fn new(model: &SliderModel<T>, f_n: T, f_t: T, psi_dot: T) -> Result<Self> {
        let tol = T::lit(INPUT_TOL);
        let finite = f_n.is_finite() && f_t.is_finite() && psi_dot.is_finite();
        if !finite {
            return Err(Error::InvalidInput("non-finite component".into()));
        }
        if f_n < -tol || f_n > model.f_bar + tol {
            return Err(Error::InvalidInput(format!(
                "f_n = {} outside [0, {}]",
                f_n.to_f64_lossy(),
                model.f_bar.to_f64_lossy()
            )));
        }
        if f_t.abs() > model.mu_p * f_n + tol {
            return Err(Error::InvalidInput(format!(
                "|f_t| = {} exceeds the friction cone",
                f_t.abs().to_f64_lossy()
            )));
        }
        if psi_dot.abs() > model.psi_dot_bar + tol {
            return Err(Error::InvalidInput(format!(
                "|psi_dot| = {} exceeds {}",
                psi_dot.abs().to_f64_lossy(),
                model.psi_dot_bar.to_f64_lossy()
            )));
        }
        Ok(Self { f_n, f_t, psi_dot })
    }

    pub fn from_vector(model: &SliderModel<T>, v: &Vector3<T>) -> Result<Self> {
        Self::new(model, v[0], v[1], v[2])
    }

    pub fn zero() -> Self {
        Self {
            f_n: T::zero(),
            f_t: T::zero(),
            psi_dot: T::zero(),
        }
    }

    pub fn f_n(&self) -> T {
        self.f_n
    }

    pub fn f_t(&self) -> T {
        self.f_t
    }

    pub fn psi_dot(&self) -> T {
        self.psi_dot
    }

    pub fn to_vector(&self) -> Vector3<T> {
        Vector3::new(self.f_n, self.f_t, self.psi_dot)
    }

    pub fn force(&self) -> Vector2<T> {
        Vector2::new(self.f_n, self.f_t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContactMode {
    Sticking,
    SlidingLeft,
    SlidingRight,
}

impl ContactMode {
    pub const ALL: [ContactMode; 3] = [
        ContactMode::Sticking,
        ContactMode::SlidingLeft,
        ContactMode::SlidingRight,
    ];

    pub fn index(self) -> usize {
        match self {
            ContactMode::Sticking => 0,
            ContactMode::SlidingLeft => 1,
            ContactMode::SlidingRight => 2,
        }
    }
}

/// `{u | D u <= h}` with one row per inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPolytope<T: Real> {
    pub rows: Vec<Vector3<T>>,
    pub h: Vec<T>,
}

impl<T: Real> InputPolytope<T> {
    pub fn contains(&self, u: &Vector3<T>, tol: T) -> bool {
        self.max_violation(u) <= tol
    }

    pub fn max_violation(&self, u: &Vector3<T>) -> T {
        self.rows
            .iter()
            .zip(&self.h)
            .map(|(d, h)| d.dot(u) - *h)
            .fold(T::min_value().unwrap(), |a, b| a.max(b))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Slider footprint, limit surface and pusher bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SliderModel<T: Real> {
    pub footprint: ConvexPolygon<T>,
    /// Limit-surface map from body wrench to body twist.
    pub limit: Matrix3<T>,
    pub mu_p: T,
    pub f_bar: T,
    pub psi_dot_bar: T,
    /// Largest allowed offset of the contact azimuth from each face center.
    pub psi_bar: Vec<T>,
}

/// Ellipsoidal limit surface `diag(1/f^2, 1/f^2, 1/(c f)^2)` for a footprint
/// with maximum frictional force `friction_force` and characteristic moment
/// arm `c` equal to the area-averaged distance from the centroid.
pub fn ellipsoid_limit<T: Real>(footprint: &ConvexPolygon<T>, friction_force: T) -> Matrix3<T> {
    let c = footprint.mean_radius();
    let f2 = friction_force * friction_force;
    let m2 = c * c * f2;
    Matrix3::from_diagonal(&Vector3::new(T::one() / f2, T::one() / f2, T::one() / m2))
}

impl<T: Real> SliderModel<T> {
    pub fn new(
        footprint: ConvexPolygon<T>,
        limit: Matrix3<T>,
        mu_p: T,
        f_bar: T,
        psi_dot_bar: T,
    ) -> Result<Self> {
        let n = footprint.n_faces();
        let psi_bar = (0..n)
            .map(|i| {
                let (lo, hi) = footprint.face_azimuth_span(i);
                (hi - lo) / T::lit(2.0)
            })
            .collect();
        Self::with_psi_bar(footprint, limit, mu_p, f_bar, psi_dot_bar, psi_bar)
    }

    pub fn with_psi_bar(
        footprint: ConvexPolygon<T>,
        limit: Matrix3<T>,
        mu_p: T,
        f_bar: T,
        psi_dot_bar: T,
        psi_bar: Vec<T>,
    ) -> Result<Self> {
        let sym = (limit - limit.transpose()).abs().max();
        if sym > T::lit(1e-12) * limit.abs().max() {
            return Err(Error::InvalidModel("limit matrix is not symmetric".into()));
        }
        if limit.cholesky().is_none() {
            return Err(Error::InvalidModel(
                "limit matrix is not positive definite".into(),
            ));
        }
        if !(mu_p > T::zero()) || !(f_bar > T::zero()) || !(psi_dot_bar > T::zero()) {
            return Err(Error::InvalidModel(
                "mu_p, f_bar and psi_dot_bar must be positive".into(),
            ));
        }
        if psi_bar.len() != footprint.n_faces() {
            return Err(Error::InvalidModel(format!(
                "{} psi_bar entries for {} faces",
                psi_bar.len(),
                footprint.n_faces()
            )));
        }
        if psi_bar.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::InvalidModel("psi_bar entries must be positive".into()));
        }
        Ok(Self {
            footprint,
            limit,
            mu_p,
            f_bar,
            psi_dot_bar,
            psi_bar,
        })
    }

    pub fn n_faces(&self) -> usize {
        self.footprint.n_faces()
    }

    pub fn face_of(&self, psi_c: T) -> usize {
        self.footprint.face_of_azimuth(psi_c)
    }

    /// Allowed contact azimuths `[lo, hi]` on `face`: the face center plus or
    /// minus `psi_bar`, kept `VERTEX_MARGIN` away from the vertices. `lo` is
    /// wrapped and `hi` may exceed pi.
    pub fn allowed_band(&self, face: usize) -> (T, T) {
        let (lo, hi) = self.footprint.face_azimuth_span(face);
        let mut center = wrap_angle(self.footprint.face_center_azimuth(face) - lo) + lo;
        if center < lo {
            center += T::two_pi();
        }
        let margin = T::lit(VERTEX_MARGIN).min((hi - lo) / T::lit(4.0));
        let w = self.psi_bar[face];
        let a = (center - w).max(lo + margin);
        let b = (center + w).min(hi - margin);
        (a, b)
    }

    /// Whether `psi` lies strictly inside `face`'s azimuth span.
    pub fn on_face(&self, face: usize, psi: T) -> bool {
        let (lo, hi) = self.footprint.face_azimuth_span(face);
        let mut d = wrap_angle(psi - lo);
        if d < T::zero() {
            d += T::two_pi();
        }
        let eps = T::lit(VERTEX_AZIMUTH_EPS);
        d > eps && d < hi - lo - eps
    }

    pub fn input(&self, f_n: T, f_t: T, psi_dot: T) -> Result<PusherInput<T>> {
        PusherInput::new(self, f_n, f_t, psi_dot)
    }
}

/// Jacobian of face `face` at azimuth `psi`, without vertex checks.
///
/// Rows are the inward normal and tangent in body frame extended with the
/// moment arms, so `J^T [f_n, f_t]` is the body wrench of the contact force.
pub fn face_jacobian<T: Real>(model: &SliderModel<T>, face: usize, psi: T) -> Matrix2x3<T> {
    let p = model.footprint.face_point(face, psi);
    let n = -model.footprint.outward_normal(face);
    jacobian_from(&p, &n)
}

fn jacobian_from<T: Real>(p: &Vector2<T>, n: &Vector2<T>) -> Matrix2x3<T> {
    let t = Vector2::new(-n.y, n.x);
    let pn = p.x * n.y - p.y * n.x;
    let pt = p.x * t.y - p.y * t.x;
    Matrix2x3::new(n.x, n.y, pn, t.x, t.y, pt)
}

pub fn contact_jacobian<T: Real>(model: &SliderModel<T>, psi_c: T) -> Result<(Matrix2x3<T>, usize)> {
    let pp = point_on_perimeter(&model.footprint, psi_c)?;
    Ok((jacobian_from(&pp.point, &pp.normal), pp.face))
}

/// State rate on a fixed face.
pub fn eval_on_face<T: Real>(
    model: &SliderModel<T>,
    face: usize,
    x: &SliderState<T>,
    u: &PusherInput<T>,
) -> Vector4<T> {
    let j = face_jacobian(model, face, x.psi_c);
    let v = rotation_matrix(x.pose.theta) * (model.limit * (j.transpose() * u.force()));
    Vector4::new(v[0], v[1], v[2], u.psi_dot)
}

pub fn eval_dynamics<T: Real>(
    model: &SliderModel<T>,
    x: &SliderState<T>,
    u: &PusherInput<T>,
) -> Result<Vector4<T>> {
    let (j, _) = contact_jacobian(model, x.psi_c)?;
    let v = rotation_matrix(x.pose.theta) * (model.limit * (j.transpose() * u.force()));
    Ok(Vector4::new(v[0], v[1], v[2], u.psi_dot))
}

pub fn mode_polytope<T: Real>(model: &SliderModel<T>, mode: ContactMode) -> InputPolytope<T> {
    let z = T::zero();
    let o = T::one();
    let mu = model.mu_p;
    let eps = T::lit(STRICT_EPS);
    let mut rows = vec![Vector3::new(-o, z, z), Vector3::new(o, z, z)];
    let mut h = vec![z, model.f_bar];
    match mode {
        ContactMode::Sticking => {
            rows.extend([
                Vector3::new(-mu, o, z),
                Vector3::new(-mu, -o, z),
                Vector3::new(z, z, o),
                Vector3::new(z, z, -o),
            ]);
            h.extend([z, z, z, z]);
        }
        ContactMode::SlidingLeft => {
            // f_t = mu f_n, -psi_dot_bar <= psi_dot <= -eps
            rows.extend([
                Vector3::new(-mu, o, z),
                Vector3::new(mu, -o, z),
                Vector3::new(z, z, o),
                Vector3::new(z, z, -o),
            ]);
            h.extend([z, z, -eps, model.psi_dot_bar]);
        }
        ContactMode::SlidingRight => {
            // f_t = -mu f_n, eps <= psi_dot <= psi_dot_bar
            rows.extend([
                Vector3::new(mu, o, z),
                Vector3::new(-mu, -o, z),
                Vector3::new(z, z, -o),
                Vector3::new(z, z, o),
            ]);
            h.extend([z, z, -eps, model.psi_dot_bar]);
        }
    }
    InputPolytope { rows, h }
}

/// Input matrix on a fixed face at `x_bar`.
pub fn linearize_on_face<T: Real>(model: &SliderModel<T>, face: usize, x_bar: &SliderState<T>) -> Matrix4x3<T> {
    let j = face_jacobian(model, face, x_bar.psi_c);
    let top = rotation_matrix(x_bar.pose.theta) * model.limit * j.transpose();
    let mut b = Matrix4x3::zeros();
    b.fixed_view_mut::<3, 2>(0, 0).copy_from(&top);
    b[(3, 2)] = T::one();
    b
}

/// Input matrix `B_i = df_i/du` at `(x_bar, u = 0)`; the state Jacobian
/// vanishes there and is not formed.
pub fn linearize<T: Real>(model: &SliderModel<T>, x_bar: &SliderState<T>) -> Result<Matrix4x3<T>> {
    let pp = point_on_perimeter(&model.footprint, x_bar.psi_c)?;
    Ok(linearize_on_face(model, pp.face, x_bar))
}

/// One classical Runge-Kutta step on a fixed face.
pub fn rk4_step<T: Real>(
    model: &SliderModel<T>,
    face: usize,
    x: &SliderState<T>,
    u: &PusherInput<T>,
    dt: T,
) -> SliderState<T> {
    let half = dt / T::lit(2.0);
    let k1 = eval_on_face(model, face, x, u);
    let k2 = eval_on_face(model, face, &x.advanced(&(k1 * half)), u);
    let k3 = eval_on_face(model, face, &x.advanced(&(k2 * half)), u);
    let k4 = eval_on_face(model, face, &x.advanced(&(k3 * dt)), u);
    let incr = (k1 + k2 * T::lit(2.0) + k3 * T::lit(2.0) + k4) * (dt / T::lit(6.0));
    x.advanced(&incr)
}

/// Integrates the controls from `x0` on the face under `x0.psi_c`.
///
/// Returns `controls.len() + 1` states. The contact may not leave its face:
/// reaching a vertex azimuth aborts with `FaceExit`.
pub fn rollout<T: Real>(
    model: &SliderModel<T>,
    x0: &SliderState<T>,
    controls: &[PusherInput<T>],
    dt: T,
) -> Result<Vec<SliderState<T>>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidConfig("rollout step must be positive".into()));
    }
    let face = point_on_perimeter(&model.footprint, x0.psi_c)?.face;
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(*x0);
    let mut x = *x0;
    for u in controls {
        x = rk4_step(model, face, &x, u, dt);
        if !model.on_face(face, x.psi_c) {
            return Err(Error::FaceExit { face });
        }
        out.push(x);
    }
    Ok(out)
}
