//! Quasi-static prediction of movable-obstacle motion under pushing contact.
//!
//! A single contact between a pushing body and an obstacle is resolved as the
//! 4x4 LCP in `[f_alpha, f_beta+, f_beta-, lambda]` with `alpha` pointing into
//! the obstacle. The obstacle moves with the twist its limit surface assigns to
//! the contact wrench.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::dynamics::{SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::{polygon_collide, polygon_collide_with_tolerance, rotation_matrix, ConvexPolygon, Pose2, CONTACT_TOLERANCE};
use crate::scalar::{wrap_angle, Real};

pub const LCP_TOL: f64 = 1e-8;
pub const PENETRATION_LIMIT: f64 = 5e-3;
/// Long trajectory segments are resolved in sub-steps no longer than this.
pub const MAX_SUBSTEP: f64 = 0.01;
const NEWTON_ITERS: usize = 100;
const LINE_SEARCH_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOrientation {
    NormalIntoObstacle,
    NormalIntoSlider,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame<T: Real> {
    pub alpha: Vector2<T>,
    pub beta: Vector2<T>,
    pub point: Vector2<T>,
    pub orientation: FrameOrientation,
}

impl<T: Real> ContactFrame<T> {
    /// Right-handed frame with `alpha` along `normal`.
    pub fn new(normal: Vector2<T>, point: Vector2<T>, orientation: FrameOrientation) -> Self {
        let alpha = normal.normalize();
        Self {
            alpha,
            beta: Vector2::new(-alpha.y, alpha.x),
            point,
            orientation,
        }
    }

    /// `[alpha, beta, -beta]` as columns.
    pub fn basis(&self) -> Matrix2x3<T> {
        Matrix2x3::from_columns(&[self.alpha, self.beta, -self.beta])
    }

    /// The same frame seen from the other body: `alpha` into the slider when
    /// it was into the obstacle and vice versa.
    pub fn flipped(&self) -> Self {
        let orientation = match self.orientation {
            FrameOrientation::NormalIntoObstacle => FrameOrientation::NormalIntoSlider,
            FrameOrientation::NormalIntoSlider => FrameOrientation::NormalIntoObstacle,
        };
        Self::new(-self.alpha, self.point, orientation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleModel<T: Real> {
    pub footprint: ConvexPolygon<T>,
    /// Body-frame limit surface of the obstacle on the ground.
    pub limit: Matrix3<T>,
    /// Obstacle-slider friction coefficient.
    pub mu: T,
    pub movable: bool,
}

impl<T: Real> ObstacleModel<T> {
    pub fn new(footprint: ConvexPolygon<T>, limit: Matrix3<T>, mu: T, movable: bool) -> Result<Self> {
        if limit.cholesky().is_none() || (limit - limit.transpose()).abs().max() > T::lit(1e-12) * limit.abs().max() {
            return Err(Error::InvalidModel("obstacle limit matrix must be SPD".into()));
        }
        if !(mu >= T::zero()) {
            return Err(Error::InvalidModel("obstacle friction must be nonnegative".into()));
        }
        Ok(Self {
            footprint,
            limit,
            mu,
            movable,
        })
    }

    /// Limit matrix expressed in the global frame at orientation `theta`.
    pub fn global_limit(&self, theta: T) -> Matrix3<T> {
        let r = rotation_matrix(theta);
        r * self.limit * r.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle<T: Real> {
    pub model: ObstacleModel<T>,
    pub pose: Pose2<T>,
}

/// Global contact Jacobian `[1, 0, -r_y; 0, 1, r_x]` of a body at `origin`.
pub fn point_jacobian<T: Real>(origin: &Vector2<T>, point: &Vector2<T>) -> Matrix2x3<T> {
    let r = point - origin;
    Matrix2x3::new(T::one(), T::zero(), -r.y, T::zero(), T::one(), r.x)
}

/// Contact Jacobians of the slider and the obstacle at the frame's point.
pub fn contact_jacobians<T: Real>(
    slider_pose: &Pose2<T>,
    slider_poly: &ConvexPolygon<T>,
    obs_pose: &Pose2<T>,
    obs_poly: &ConvexPolygon<T>,
    frame: &ContactFrame<T>,
) -> Result<(Matrix2x3<T>, Matrix2x3<T>)> {
    if !polygon_collide(slider_poly, slider_pose, obs_poly, obs_pose).in_contact {
        return Err(Error::NotInContact);
    }
    Ok((
        point_jacobian(&slider_pose.translation(), &frame.point),
        point_jacobian(&obs_pose.translation(), &frame.point),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactLcp<T: Real> {
    pub m: Matrix4<T>,
    pub q: Vector4<T>,
    /// `[f_alpha, f_beta+, f_beta-]`.
    pub f: Vector3<T>,
    pub lambda: T,
    pub z: Vector4<T>,
}

impl<T: Real> ContactLcp<T> {
    pub fn w(&self) -> Vector4<T> {
        Vector4::new(self.f[0], self.f[1], self.f[2], self.lambda)
    }

    /// Largest violation among `z >= 0`, `w >= 0` and `z . w = 0`.
    pub fn residual(&self) -> T {
        let w = self.w();
        let z = self.m * w + self.q;
        let neg = z.iter().chain(w.iter()).fold(T::zero(), |a, v| a.max(-*v));
        neg.max(z.dot(&w).abs())
    }

    /// Adds `rate` to the normal row so the solution closes at most the
    /// current gap within one step (a negative gap is pushed out).
    pub fn with_gap_rate(mut self, rate: T) -> Self {
        self.q[0] += rate;
        self
    }
}

/// Assembles the contact LCP for slider twist `v_s`, with `a_o` the obstacle
/// limit matrix in the global frame.
pub fn assemble_lcp<T: Real>(
    j_s: &Matrix2x3<T>,
    j_o: &Matrix2x3<T>,
    a_o: &Matrix3<T>,
    mu: T,
    v_s: &Vector3<T>,
    frame: &ContactFrame<T>,
) -> ContactLcp<T> {
    let basis = frame.basis();
    let k_o = j_o * a_o * j_o.transpose();
    let upper = basis.transpose() * k_o * basis;
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&upper);
    m[(1, 3)] = T::one();
    m[(2, 3)] = T::one();
    m[(3, 0)] = mu;
    m[(3, 1)] = -T::one();
    m[(3, 2)] = -T::one();
    let drive = -(basis.transpose() * (j_s * v_s));
    let q = Vector4::new(drive[0], drive[1], drive[2], T::zero());
    ContactLcp {
        m,
        q,
        f: Vector3::zeros(),
        lambda: T::zero(),
        z: q,
    }
}

fn fischer_burmeister<T: Real>(a: T, b: T) -> T {
    (a * a + b * b).sqrt() - a - b
}

fn fb_residual<T: Real>(m: &Matrix4<T>, q: &Vector4<T>, w: &Vector4<T>) -> Vector4<T> {
    let z = m * w + q;
    Vector4::from_fn(|i, _| fischer_burmeister(w[i], z[i]))
}

fn newton<T: Real>(m: &Matrix4<T>, q: &Vector4<T>) -> Option<Vector4<T>> {
    let tol = T::lit(LCP_TOL);
    let mut w = Vector4::zeros();
    let mut phi = fb_residual(m, q, &w);
    for _ in 0..NEWTON_ITERS {
        if phi.amax() <= tol * T::lit(0.1) {
            return Some(w);
        }
        let z = m * w + q;
        let mut jac = Matrix4::zeros();
        for i in 0..4 {
            let rho = (w[i] * w[i] + z[i] * z[i]).sqrt();
            let (da, db) = if rho > T::lit(1e-14) {
                (w[i] / rho - T::one(), z[i] / rho - T::one())
            } else {
                let s = T::one() / T::lit(2.0).sqrt();
                (s - T::one(), s - T::one())
            };
            for j in 0..4 {
                jac[(i, j)] = db * m[(i, j)];
            }
            jac[(i, i)] += da;
        }
        let step = jac.lu().solve(&(-phi))?;
        let merit = phi.norm_squared();
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..=LINE_SEARCH_HALVINGS {
            let cand = w + step * t;
            let p = fb_residual(m, q, &cand);
            if p.norm_squared() < merit * (T::one() - T::lit(1e-4) * t) {
                w = cand;
                phi = p;
                accepted = true;
                break;
            }
            t /= T::lit(2.0);
        }
        if !accepted {
            break;
        }
    }
    (phi.amax() <= tol * T::lit(0.1)).then_some(w)
}

/// Brute-force solve over the 16 complementarity pieces.
pub fn solve_by_enumeration<T: Real>(m: &Matrix4<T>, q: &Vector4<T>) -> Option<Vector4<T>> {
    let tol = T::lit(LCP_TOL);
    let mut best: Option<(T, Vector4<T>)> = None;
    for piece in 0u8..16 {
        let idx: Vec<usize> = (0..4).filter(|i| piece & (1 << i) != 0).collect();
        let k = idx.len();
        let mut w = Vector4::zeros();
        if k > 0 {
            let sub = nalgebra::DMatrix::from_fn(k, k, |r, c| m[(idx[r], idx[c])]);
            let rhs = nalgebra::DVector::from_fn(k, |r, _| -q[idx[r]]);
            let Some(sol) = sub.lu().solve(&rhs) else { continue };
            if sol.iter().any(|v| !v.is_finite()) {
                continue;
            }
            for (r, &i) in idx.iter().enumerate() {
                w[i] = sol[r];
            }
        }
        let z = m * w + q;
        let viol = z.iter().chain(w.iter()).fold(T::zero(), |a, v| a.max(-*v)).max(z.dot(&w).abs());
        if best.map_or(true, |(b, _)| viol < b) {
            best = Some((viol, w));
        }
    }
    best.and_then(|(v, w)| (v <= tol).then_some(w))
}

/// Unique representative of a solution: at most one tangential force is
/// positive and `lambda` is the smallest slack the tangential rows allow.
pub fn canonicalize<T: Real>(lcp: &ContactLcp<T>, w: &Vector4<T>) -> Vector4<T> {
    let mut w = w.map(|v| v.max(T::zero()));
    let common = w[1].min(w[2]);
    w[1] -= common;
    w[2] -= common;
    let mut probe = w;
    probe[3] = T::zero();
    let z0 = lcp.m * probe + lcp.q;
    // z[1] = z0[1] + lambda, z[2] = z0[2] + lambda
    w[3] = if w[1] > T::zero() {
        -z0[1]
    } else if w[2] > T::zero() {
        -z0[2]
    } else {
        T::zero().max(-z0[1]).max(-z0[2])
    };
    w[3] = w[3].max(T::zero());
    w
}

/// Re-solves the piece selected by an approximate solution exactly.
fn polish<T: Real>(m: &Matrix4<T>, q: &Vector4<T>, w: &Vector4<T>) -> Option<Vector4<T>> {
    let z = m * w + q;
    let idx: Vec<usize> = (0..4).filter(|&i| w[i] > z[i]).collect();
    let k = idx.len();
    let mut out = Vector4::zeros();
    if k > 0 {
        let sub = nalgebra::DMatrix::from_fn(k, k, |r, c| m[(idx[r], idx[c])]);
        let rhs = nalgebra::DVector::from_fn(k, |r, _| -q[idx[r]]);
        let sol = sub.lu().solve(&rhs)?;
        for (r, &i) in idx.iter().enumerate() {
            out[i] = sol[r];
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn finish<T: Real>(lcp: &ContactLcp<T>, w: &Vector4<T>) -> ContactLcp<T> {
    let w = canonicalize(lcp, w);
    ContactLcp {
        f: Vector3::new(w[0], w[1], w[2]),
        lambda: w[3],
        z: lcp.m * w + lcp.q,
        ..*lcp
    }
}

pub fn solve_lcp<T: Real>(lcp: &ContactLcp<T>) -> Result<ContactLcp<T>> {
    let tol = T::lit(LCP_TOL);
    if let Some(w) = newton(&lcp.m, &lcp.q) {
        if let Some(p) = polish(&lcp.m, &lcp.q, &w) {
            let out = finish(lcp, &p);
            if out.residual() <= tol {
                return Ok(out);
            }
        }
        let out = finish(lcp, &w);
        if out.residual() <= tol {
            return Ok(out);
        }
    }
    let w = solve_by_enumeration(&lcp.m, &lcp.q).ok_or(Error::LcpUnsolvable)?;
    let out = finish(lcp, &w);
    if out.residual() > tol {
        return Err(Error::LcpUnsolvable);
    }
    Ok(out)
}

/// Global twist of the obstacle under contact force `f`.
pub fn obstacle_twist<T: Real>(a_o: &Matrix3<T>, j_o: &Matrix2x3<T>, frame: &ContactFrame<T>, f: &Vector3<T>) -> Vector3<T> {
    a_o * (j_o.transpose() * (frame.basis() * f))
}

/// Pose after `tau` seconds under contact force `f`. `a_o` is the body-frame
/// limit matrix; `j_o` is the global contact Jacobian, pulled back to the body
/// frame before applying it.
pub fn integrate_obstacle<T: Real>(
    obs_pose: &Pose2<T>,
    a_o: &Matrix3<T>,
    j_o: &Matrix2x3<T>,
    frame: &ContactFrame<T>,
    f: &Vector3<T>,
    tau: T,
) -> Pose2<T> {
    let r = rotation_matrix(obs_pose.theta);
    let body_wrench = r.transpose() * (j_o.transpose() * (frame.basis() * f));
    let d = r * (a_o * body_wrench) * tau;
    obs_pose.displaced(&d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleReason {
    FixedContact { step: usize },
    Penetration { step: usize },
    Lcp { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionOutcome<T: Real> {
    pub feasible: bool,
    pub movable_poses: Vec<Pose2<T>>,
    /// Global wrench `[F_x, F_y, tau_z]` on the slider per step, about its origin.
    pub reaction_log: Vec<Vector3<T>>,
    /// Contact forces applied to obstacles by the slider per step, with their
    /// application points.
    pub applied: Vec<Vec<(Vector2<T>, Vector2<T>)>>,
    pub failure: Option<InfeasibleReason>,
}

fn twist_between<T: Real>(a: &Pose2<T>, b: &Pose2<T>, dt: T) -> Vector3<T> {
    Vector3::new((b.x - a.x) / dt, (b.y - a.y) / dt, wrap_angle(b.theta - a.theta) / dt)
}

/// Contact forces and obstacle twists produced by one slider twist.
#[derive(Debug, Clone, PartialEq)]
pub struct PushResolution<T: Real> {
    /// Global twist of each movable that is pushed, directly or through a chain.
    pub twists: Vec<Option<Vector3<T>>>,
    /// Global contact point and force the slider applies.
    pub forces: Vec<(Vector2<T>, Vector2<T>)>,
}

/// Resolves the contacts of a slider at `pose` moving with global twist
/// `v_s` over a step `h`. Movables pushed by other movables are resolved in
/// contact-discovery order, one LCP per contact. `None` if an LCP fails.
pub fn resolve_push<T: Real>(
    slider_fp: &ConvexPolygon<T>,
    pose: &Pose2<T>,
    v_s: &Vector3<T>,
    movables: &[Obstacle<T>],
    poses: &[Pose2<T>],
    h: T,
) -> Option<PushResolution<T>> {
    let mut twists: Vec<Option<Vector3<T>>> = vec![None; movables.len()];
    let mut forces = Vec::new();
    let mut queue = vec![(Body::Slider, *pose, *v_s)];
    let mut head = 0;
    while head < queue.len() {
        let (body, pose, twist) = queue[head];
        head += 1;
        let (fp, reach) = match body {
            Body::Slider => (slider_fp, slider_fp.max_radius()),
            Body::Movable(i) => (&movables[i].model.footprint, movables[i].model.footprint.max_radius()),
        };
        let speed = Vector2::new(twist[0], twist[1]).norm() + twist[2].abs() * reach;
        let sweep = T::lit(CONTACT_TOLERANCE) + speed * h;
        for (j, obs) in movables.iter().enumerate() {
            if twists[j].is_some() || matches!(body, Body::Movable(i) if i == j) {
                continue;
            }
            let c = polygon_collide_with_tolerance(fp, &pose, &obs.model.footprint, &poses[j], sweep);
            if !c.in_contact {
                continue;
            }
            let frame = ContactFrame::new(c.normal, c.point, FrameOrientation::NormalIntoObstacle);
            let j_s = point_jacobian(&pose.translation(), &frame.point);
            let j_o = point_jacobian(&poses[j].translation(), &frame.point);
            let a_o = obs.model.global_limit(poses[j].theta);
            let lcp = assemble_lcp(&j_s, &j_o, &a_o, obs.model.mu, &twist, &frame).with_gap_rate(c.separation / h);
            let sol = solve_lcp(&lcp).ok()?;
            if sol.f == Vector3::zeros() {
                continue;
            }
            let v_o = obstacle_twist(&a_o, &j_o, &frame, &sol.f);
            twists[j] = Some(v_o);
            queue.push((Body::Movable(j), poses[j], v_o));
            if let Body::Slider = body {
                forces.push((frame.point, frame.basis() * sol.f));
            }
        }
    }
    Some(PushResolution { twists, forces })
}

/// Removes remaining overlap between the slider and each pushed movable by
/// translating the movable along the contact normal. A single contact point
/// cannot stop a second feature closing in under relative rotation.
pub fn separate_pushed<T: Real>(
    slider_fp: &ConvexPolygon<T>,
    slider: &Pose2<T>,
    movables: &[Obstacle<T>],
    poses: &mut [Pose2<T>],
    pushed: &[Option<Vector3<T>>],
) {
    for j in 0..movables.len() {
        if pushed[j].is_none() {
            continue;
        }
        let c = polygon_collide(slider_fp, slider, &movables[j].model.footprint, &poses[j]);
        if c.depth > T::zero() {
            poses[j].x += c.normal.x * c.depth;
            poses[j].y += c.normal.y * c.depth;
        }
    }
}

fn lerp_pose<T: Real>(a: &Pose2<T>, b: &Pose2<T>, t: T) -> Pose2<T> {
    Pose2::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, a.theta + wrap_angle(b.theta - a.theta) * t)
}

#[allow(clippy::too_many_arguments)]
fn check_step<T: Real>(
    slider_fp: &ConvexPolygon<T>,
    slider: &Pose2<T>,
    movables: &[Obstacle<T>],
    fixed: &[Obstacle<T>],
    poses: &[Pose2<T>],
    ever_moved: &[bool],
    limit: T,
    step: usize,
) -> Option<InfeasibleReason> {
    for f in fixed {
        if polygon_collide(slider_fp, slider, &f.model.footprint, &f.pose).in_contact {
            return Some(InfeasibleReason::FixedContact { step });
        }
        for (j, obs) in movables.iter().enumerate() {
            if ever_moved[j] && polygon_collide(&obs.model.footprint, &poses[j], &f.model.footprint, &f.pose).in_contact {
                return Some(InfeasibleReason::FixedContact { step });
            }
        }
    }
    for (j, obs) in movables.iter().enumerate() {
        if polygon_collide(slider_fp, slider, &obs.model.footprint, &poses[j]).depth > limit {
            return Some(InfeasibleReason::Penetration { step });
        }
        if !ever_moved[j] {
            continue;
        }
        for (k, other) in movables.iter().enumerate() {
            if k != j && polygon_collide(&obs.model.footprint, &poses[j], &other.model.footprint, &poses[k]).depth > limit {
                return Some(InfeasibleReason::Penetration { step });
            }
        }
    }
    None
}

#[derive(Clone, Copy)]
enum Body {
    Slider,
    Movable(usize),
}

/// Steps the slider through `slider_traj` (spacing `dt`), pushing movable
/// obstacles. Movables pushed by other movables are resolved in
/// contact-discovery order, one LCP per contact. Any moving body that comes
/// within contact tolerance of a fixed obstacle, or any penetration deeper
/// than `PENETRATION_LIMIT`, makes the trajectory infeasible.
pub fn simulate_interaction<T: Real>(
    model: &SliderModel<T>,
    slider_traj: &[SliderState<T>],
    movables: &[Obstacle<T>],
    fixed: &[Obstacle<T>],
    dt: T,
) -> Result<InteractionOutcome<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidConfig("interaction step must be positive".into()));
    }
    let mut poses: Vec<Pose2<T>> = movables.iter().map(|m| m.pose).collect();
    let mut reaction_log = Vec::with_capacity(slider_traj.len().saturating_sub(1));
    let mut applied = Vec::with_capacity(slider_traj.len().saturating_sub(1));
    let mut ever_moved = vec![false; movables.len()];
    let fail = |poses: Vec<Pose2<T>>, reaction_log, applied, reason| {
        Ok(InteractionOutcome {
            feasible: false,
            movable_poses: poses,
            reaction_log,
            applied,
            failure: Some(reason),
        })
    };
    let limit = T::lit(PENETRATION_LIMIT);
    let slider_fp = &model.footprint;

    let n_sub = (dt / T::lit(MAX_SUBSTEP)).ceil().to_usize().unwrap_or(1).max(1);
    let h = dt / T::from_usize(n_sub).unwrap();
    let share = T::one() / T::from_usize(n_sub).unwrap();

    for (step, pair) in slider_traj.windows(2).enumerate() {
        let (s0, s1) = (&pair[0].pose, &pair[1].pose);
        let v_s = twist_between(s0, s1, dt);
        let mut reaction = Vector3::zeros();
        let mut forces = Vec::new();
        for k in 0..n_sub {
            let a = lerp_pose(s0, s1, T::from_usize(k).unwrap() * share);
            let b = lerp_pose(s0, s1, T::from_usize(k + 1).unwrap() * share);
            let resolved = match resolve_push(slider_fp, &a, &v_s, movables, &poses, h) {
                Some(r) => r,
                None => return fail(poses, reaction_log, applied, InfeasibleReason::Lcp { step }),
            };
            let twists = resolved.twists;
            for (point, force) in resolved.forces {
                let force = force * share;
                let r = point - s0.translation();
                reaction -= Vector3::new(force.x, force.y, r.x * force.y - r.y * force.x);
                forces.push((point, force));
            }
            for (j, t) in twists.iter().enumerate() {
                if let Some(v) = t {
                    poses[j] = poses[j].displaced(&(v * h));
                    ever_moved[j] = true;
                }
            }
            separate_pushed(slider_fp, &b, movables, &mut poses, &twists);
            if let Some(reason) = check_step(slider_fp, &b, movables, fixed, &poses, &ever_moved, limit, step) {
                reaction_log.push(reaction);
                applied.push(forces);
                return fail(poses, reaction_log, applied, reason);
            }
        }
        reaction_log.push(reaction);
        applied.push(forces);
    }
    Ok(InteractionOutcome {
        feasible: true,
        movable_poses: poses,
        reaction_log,
        applied,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ellipsoid_limit, rollout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn frame_x(point: Vector2<f64>) -> ContactFrame<f64> {
        ContactFrame::new(Vector2::new(1.0, 0.0), point, FrameOrientation::NormalIntoObstacle)
    }

    #[test]
    fn jacobian_examples() {
        let o = Vector2::new(0.0, 0.0);
        let j = point_jacobian(&o, &o);
        assert_eq!(j, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        let j = point_jacobian(&o, &Vector2::new(0.0, 0.5));
        assert_eq!(j.column(2).into_owned(), Vector2::new(-0.5, 0.0));
        let j = point_jacobian(&o, &Vector2::new(1.0, 0.0));
        assert_eq!(j * Vector3::new(0.0, 0.0, 1.0), Vector2::new(0.0, 1.0));
    }

    #[test]
    fn contact_jacobians_require_contact() {
        let sq = ConvexPolygon::rectangle(1.0, 1.0).unwrap();
        let f = frame_x(Vector2::new(0.5, 0.0));
        let a = Pose2::new(0.0, 0.0, 0.0);
        assert!(contact_jacobians(&a, &sq, &Pose2::new(1.0, 0.0, 0.0), &sq, &f).is_ok());
        assert!(matches!(
            contact_jacobians(&a, &sq, &Pose2::new(3.0, 0.0, 0.0), &sq, &f),
            Err(Error::NotInContact)
        ));
    }

    fn random_lcp(rng: &mut ChaCha8Rng) -> ContactLcp<f64> {
        let l = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let a = l * l.transpose() + Matrix3::identity() * 0.05;
        let ang: f64 = rng.gen_range(-PI..PI);
        let pt = Vector2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let frame = ContactFrame::new(Vector2::new(ang.cos(), ang.sin()), pt, FrameOrientation::NormalIntoObstacle);
        let j_s = point_jacobian(&Vector2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)), &pt);
        let j_o = point_jacobian(&Vector2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)), &pt);
        let v = Vector3::from_fn(|_, _| rng.gen_range(-0.2..0.2));
        assemble_lcp(&j_s, &j_o, &a, rng.gen_range(0.0..1.0), &v, &frame)
    }

    #[test]
    fn zero_twist_gives_zero_force() {
        let f = frame_x(Vector2::new(0.5, 0.0));
        let j = point_jacobian(&Vector2::zeros(), &f.point);
        let lcp = assemble_lcp(&j, &j, &Matrix3::identity(), 0.3, &Vector3::zeros(), &f);
        assert_eq!(lcp.q, Vector4::zeros());
        let s = solve_lcp(&lcp).unwrap();
        assert_eq!(s.w(), Vector4::zeros());
    }

    #[test]
    fn separating_twist_gives_zero_force() {
        let f = frame_x(Vector2::new(0.5, 0.0));
        let j_s = point_jacobian(&Vector2::zeros(), &f.point);
        let j_o = point_jacobian(&Vector2::new(1.0, 0.0), &f.point);
        let lcp = assemble_lcp(&j_s, &j_o, &Matrix3::identity(), 0.3, &Vector3::new(-0.1, 0.02, 0.0), &f);
        let s = solve_lcp(&lcp).unwrap();
        assert_eq!(s.f, Vector3::zeros());
        assert!(s.z[0] > 0.0);
        let e = solve_by_enumeration(&lcp.m, &lcp.q).unwrap();
        assert_eq!(e[0], 0.0);
    }

    #[test]
    fn upper_block_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let lcp = random_lcp(&mut rng);
            let b = lcp.m.fixed_view::<3, 3>(0, 0).into_owned();
            assert!((b - b.transpose()).abs().max() < 1e-12);
            assert!(b.symmetric_eigenvalues().min() > -1e-12);
        }
    }

    #[test]
    fn nonnegative_q_has_trivial_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lcp = random_lcp(&mut rng);
        lcp.q = Vector4::new(0.1, 0.2, 0.0, 0.0);
        let s = solve_lcp(&lcp).unwrap();
        assert_eq!(s.f, Vector3::zeros());
        assert_eq!(s.lambda, 0.0);
    }

    #[test]
    fn frictionless_head_on_push() {
        let f = frame_x(Vector2::new(0.5, 0.0));
        let j_s = point_jacobian(&Vector2::zeros(), &f.point);
        let j_o = point_jacobian(&Vector2::new(1.0, 0.0), &f.point);
        let kappa = 0.8;
        let a = Matrix3::from_diagonal(&Vector3::new(kappa, kappa, 3.0));
        let v = 0.05;
        let lcp = assemble_lcp(&j_s, &j_o, &a, 0.0, &Vector3::new(v, 0.0, 0.0), &f);
        let s = solve_lcp(&lcp).unwrap();
        let k_o = j_o * a * j_o.transpose();
        let k_aa = f.alpha.dot(&(k_o * f.alpha));
        assert!((s.f[0] - v / k_aa).abs() < 1e-10);
        assert_eq!(s.f[1], 0.0);
        assert_eq!(s.f[2], 0.0);
    }

    #[test]
    fn newton_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let lcp = random_lcp(&mut rng);
            let s = solve_lcp(&lcp).unwrap();
            assert!(s.residual() <= LCP_TOL);
            let oracle = canonicalize(&lcp, &solve_by_enumeration(&lcp.m, &lcp.q).unwrap());
            for i in 0..4 {
                assert!((s.w()[i] - oracle[i]).abs() < 1e-7, "{:?} vs {:?}", s.w(), oracle);
            }
            // friction cone and passivity
            assert!(s.f[1] + s.f[2] <= lcp.m[(3, 0)] * s.f[0] + 1e-8);
            let upper = lcp.m.fixed_view::<3, 3>(0, 0).into_owned();
            assert!(s.f.dot(&(upper * s.f)) >= -1e-9);
        }
    }

    #[test]
    fn obstacle_integration() {
        let f = frame_x(Vector2::new(-0.5, 0.0));
        let pose = Pose2::new(0.0, 0.0, 0.0);
        let a = Matrix3::from_diagonal(&Vector3::new(0.7, 0.7, 4.0));
        let j_o = point_jacobian(&pose.translation(), &f.point);
        assert_eq!(integrate_obstacle(&pose, &a, &j_o, &f, &Vector3::zeros(), 0.05), pose);
        let p = integrate_obstacle(&pose, &a, &j_o, &f, &Vector3::new(0.2, 0.0, 0.0), 0.05);
        assert!((p.x - 0.05 * 0.7 * 0.2).abs() < 1e-15);
        assert_eq!(p.y, 0.0);
        assert_eq!(p.theta, 0.0);
        // push +x below the centroid: torque r x F = (-0.5, -0.2) x (1, 0) = 0.2 > 0
        let f = frame_x(Vector2::new(-0.5, -0.2));
        let j_o = point_jacobian(&pose.translation(), &f.point);
        let p = integrate_obstacle(&pose, &a, &j_o, &f, &Vector3::new(0.2, 0.0, 0.0), 0.05);
        assert!(p.theta > 0.0);
        // rotated obstacle: body-frame limit rotated consistently
        let rp = Pose2::new(0.0, 0.0, 0.7);
        let a2 = Matrix3::from_diagonal(&Vector3::new(0.3, 1.1, 4.0));
        let j_o = point_jacobian(&rp.translation(), &f.point);
        let p = integrate_obstacle(&rp, &a2, &j_o, &f, &Vector3::new(0.2, 0.05, 0.0), 0.05);
        let v = obstacle_twist(&(rotation_matrix(0.7) * a2 * rotation_matrix(0.7).transpose()), &j_o, &f, &Vector3::new(0.2, 0.05, 0.0));
        assert!((Vector3::new(p.x, p.y, p.theta - 0.7) - v * 0.05).norm() < 1e-15);
    }

    fn paper_slider() -> SliderModel<f64> {
        let fp = ConvexPolygon::rectangle(0.08, 0.15).unwrap();
        let a = ellipsoid_limit(&fp, 1.2);
        SliderModel::new(fp, a, 0.2, 0.15, 1.0).unwrap()
    }

    fn cube(x: f64, y: f64, movable: bool) -> Obstacle<f64> {
        let fp = ConvexPolygon::rectangle(0.07, 0.122).unwrap();
        let a = ellipsoid_limit(&fp, 0.8);
        Obstacle {
            model: ObstacleModel::new(fp, a, 0.3, movable).unwrap(),
            pose: Pose2::new(x, y, 0.0),
        }
    }

    fn wall(x: f64) -> Obstacle<f64> {
        let fp = ConvexPolygon::rectangle(0.02, 0.5).unwrap();
        let a = Matrix3::identity();
        Obstacle {
            model: ObstacleModel::new(fp, a, 0.3, false).unwrap(),
            pose: Pose2::new(x, 0.0, 0.0),
        }
    }

    fn straight_push(steps: usize) -> Vec<SliderState<f64>> {
        let m = paper_slider();
        let u = m.input(0.15, 0.0, 0.0).unwrap();
        rollout(&m, &SliderState::new(0.0, 0.0, 0.0, PI), &vec![u; steps], 0.01).unwrap()
    }

    #[test]
    fn free_path_is_unchanged() {
        let m = paper_slider();
        let traj = straight_push(20);
        let movables = vec![cube(0.0, 0.5, true)];
        let out = simulate_interaction(&m, &traj, &movables, &[wall(-0.5)], 0.01).unwrap();
        assert!(out.feasible);
        assert_eq!(out.movable_poses[0], movables[0].pose);
        assert!(out.reaction_log.iter().all(|r| *r == Vector3::zeros()));
    }

    #[test]
    fn head_on_push_moves_the_cube() {
        let m = paper_slider();
        let traj = straight_push(100);
        // slider right face at x = 0.04, cube left face touching
        let movables = vec![cube(0.04 + 0.035, 0.0, true)];
        let out = simulate_interaction(&m, &traj, &movables, &[], 0.01).unwrap();
        assert!(out.feasible);
        let dx = out.movable_poses[0].x - movables[0].pose.x;
        let slider_dx = traj.last().unwrap().pose.x - traj[0].pose.x;
        assert!(dx > 0.0 && dx <= slider_dx + 1e-9, "{dx} {slider_dx}");
        // contact persists and reactions oppose the motion
        assert!(out.reaction_log.iter().skip(1).all(|r| r[0] < 0.0));
        // Newton's third law between the logs
        for (r, app) in out.reaction_log.iter().zip(&out.applied) {
            let total = app.iter().fold(Vector2::zeros(), |a, (_, f)| a + f);
            assert_eq!(Vector2::new(-r[0], -r[1]), total);
        }
        // no penetration along the way
        let fp = &movables[0].model.footprint;
        let end = polygon_collide(&m.footprint, &traj.last().unwrap().pose, fp, &out.movable_poses[0]);
        assert!(end.depth <= 1e-3);
    }

    #[test]
    fn cube_backed_by_wall_is_infeasible() {
        let m = paper_slider();
        let traj = straight_push(100);
        let movables = vec![cube(0.075, 0.0, true)];
        let out = simulate_interaction(&m, &traj, &movables, &[wall(0.075 + 0.035 + 0.005 + 0.01)], 0.01).unwrap();
        assert!(!out.feasible);
        assert!(matches!(out.failure, Some(InfeasibleReason::FixedContact { .. })));
    }

    #[test]
    fn chains_push_through() {
        let m = paper_slider();
        let traj = straight_push(60);
        let movables = vec![cube(0.075, 0.0, true), cube(0.075 + 0.0705, 0.0, true)];
        let out = simulate_interaction(&m, &traj, &movables, &[], 0.01).unwrap();
        assert!(out.feasible);
        assert!(out.movable_poses[1].x > movables[1].pose.x);
    }

    /// Places `obs` against the slider's +x face at lateral offset `lat` in the
    /// slider frame, touching.
    fn seat(slider: &Pose2<f64>, obs: &mut Obstacle<f64>, lat: f64, rot: f64, fp: &ConvexPolygon<f64>) {
        let mut along = 0.2;
        for _ in 0..6 {
            let p = slider.transform_point(&Vector2::new(along, lat));
            obs.pose = Pose2::new(p.x, p.y, slider.theta + rot);
            let c = polygon_collide(fp, slider, &obs.model.footprint, &obs.pose);
            along -= c.separation;
        }
    }

    #[test]
    fn one_step_push_does_not_penetrate() {
        let m = paper_slider();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (lo, hi) = m.allowed_band(m.face_of(PI));
        for _ in 0..100 {
            let f_n = rng.gen_range(0.02..0.15);
            let u = m.input(f_n, rng.gen_range(-0.2..0.2) * f_n, 0.0).unwrap();
            let start = Pose2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-PI..PI));
            let x0 = SliderState::new(start.x, start.y, start.theta, rng.gen_range(lo..hi));
            let traj = rollout(&m, &x0, &[u; 5], 0.01).unwrap();
            let mut c = cube(0.0, 0.0, true);
            seat(&start, &mut c, rng.gen_range(-0.08..0.08), rng.gen_range(-0.4..0.4), &m.footprint);
            let ends = [traj[0], traj[5]];
            let out = simulate_interaction(&m, &ends, &[c.clone()], &[], 0.05).unwrap();
            assert!(out.feasible);
            let end = polygon_collide(&m.footprint, &traj[5].pose, &c.model.footprint, &out.movable_poses[0]);
            assert!(end.depth <= 1e-3, "{}", end.depth);
        }
    }
}
