//! Finite-horizon LQR connection of a generating state to a target state.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{linearize_on_face, mode_polytope, rk4_step, ContactMode, InputPolytope, PusherInput, SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::Pose2;
use crate::qp;
use crate::reachset::default_weights;
use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LqrConfig<T: Real> {
    pub tau_lqr: T,
    pub horizon: usize,
    pub c_q: Matrix4<T>,
    pub c_r: Matrix3<T>,
    /// Metric weights for the reached test.
    pub weights: Vector4<T>,
    /// Weighted distance below which a target counts as reached.
    pub tolerance: T,
}

pub const CONNECT_TOLERANCE: f64 = 5e-3;

impl<T: Real> LqrConfig<T> {
    /// Defaults for a model: `horizon = round(tau / tau_lqr)`, state cost
    /// `diag(1, 1, 0.1, 0.01)`, and an input cost of one tenth of the state
    /// cost a full-scale input produces in one step.
    pub fn for_model(model: &SliderModel<T>, tau: T, tau_lqr: T) -> Result<Self> {
        if !(tau > T::zero()) || !(tau_lqr > T::zero()) {
            return Err(Error::InvalidConfig("tau and tau_lqr must be positive".into()));
        }
        let horizon = (tau / tau_lqr).round().to_f64_lossy() as usize;
        if horizon == 0 {
            return Err(Error::InvalidConfig("tau_lqr exceeds tau".into()));
        }
        let c_q = Matrix4::from_diagonal(&Vector4::new(T::one(), T::one(), T::lit(0.1), T::lit(0.01)));
        let a = model.limit[(0, 0)].max(model.limit[(1, 1)]);
        let step = tau_lqr * a;
        let r_f = T::lit(0.1) * step * step;
        let r_psi = T::lit(0.1) * T::lit(0.01) * tau_lqr * tau_lqr;
        Ok(Self {
            tau_lqr,
            horizon,
            c_q,
            c_r: Matrix3::from_diagonal(&Vector3::new(r_f, r_f, r_psi)),
            weights: default_weights(),
            tolerance: T::lit(CONNECT_TOLERANCE),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_lqr > T::zero()) || self.horizon == 0 {
            return Err(Error::InvalidConfig("LQR step and horizon must be positive".into()));
        }
        if self.c_r.cholesky().is_none() {
            return Err(Error::InvalidConfig("input cost must be positive definite".into()));
        }
        let sym = (self.c_q - self.c_q.transpose()).abs().max();
        let eig = self.c_q.symmetric_eigenvalues().min();
        if sym > T::lit(1e-12) || eig < -T::lit(1e-12) {
            return Err(Error::InvalidConfig("state cost must be positive semidefinite".into()));
        }
        Ok(())
    }
}

/// Time-varying gains for `x[k+1] = x[k] + tau_lqr B u[k]` with terminal cost
/// `C_Q`; `u[k] = -K[k] (x[k] - target)`.
pub fn lqr_gains<T: Real>(b: &Matrix4x3<T>, cfg: &LqrConfig<T>) -> Result<Vec<Matrix3x4<T>>> {
    Ok(riccati(b, cfg)?.into_iter().map(|(k, _)| k).collect())
}

/// Gains paired with the input Hessian `C_R + B_d^T P B_d` of each stage.
fn riccati<T: Real>(b: &Matrix4x3<T>, cfg: &LqrConfig<T>) -> Result<Vec<(Matrix3x4<T>, Matrix3<T>)>> {
    let bd = b * cfg.tau_lqr;
    let mut p = cfg.c_q;
    let mut out = vec![(Matrix3x4::zeros(), Matrix3::identity()); cfg.horizon];
    for k in (0..cfg.horizon).rev() {
        let s = cfg.c_r + bd.transpose() * p * bd;
        let s_inv = s.cholesky().ok_or(Error::SingularRiccati)?.inverse();
        let kk = s_inv * bd.transpose() * p;
        if kk.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularRiccati);
        }
        p = cfg.c_q + p - p * bd * kk;
        p = (p + p.transpose()) / T::lit(2.0);
        out[k] = (kk, s);
    }
    Ok(out)
}

/// Projects `u` onto a mode polytope in the metric normalized by the input
/// bounds.
pub fn clamp_to_polytope<T: Real>(model: &SliderModel<T>, poly: &InputPolytope<T>, u: &Vector3<T>) -> Result<Vector3<T>> {
    let f2 = model.f_bar * model.f_bar;
    let p2 = model.psi_dot_bar * model.psi_dot_bar;
    let h = Matrix3::from_diagonal(&Vector3::new(T::one() / f2, T::one() / f2, T::one() / p2));
    project_in_metric(poly, &h, u)
}

/// Projects `u` onto a polytope minimizing `(v - u)^T H (v - u)`.
pub fn project_in_metric<T: Real>(poly: &InputPolytope<T>, h: &Matrix3<T>, u: &Vector3<T>) -> Result<Vector3<T>> {
    if poly.max_violation(u) <= T::zero() {
        return Ok(*u);
    }
    let g = -(h * u);
    qp::solve(h, &g, &poly.rows, &poly.h).map(|s| s.v).ok_or(Error::InfeasibleCell)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionResult<T: Real> {
    pub controls: Vec<PusherInput<T>>,
    /// Rollout states, `controls.len() + 1` entries starting at the
    /// (possibly re-seated) contact.
    pub states: Vec<SliderState<T>>,
    pub x_term: SliderState<T>,
    pub reached: bool,
}

/// Cell chosen by a nearest-neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellChoice<T: Real> {
    pub face: usize,
    pub mode: ContactMode,
    pub psi_star: T,
}

pub fn weighted_distance<T: Real>(a: &SliderState<T>, b: &SliderState<T>, w: &Vector4<T>) -> T {
    a.difference(b).component_mul(w).norm()
}

/// Steers from `x_gen` toward `target` with the contact seated at the cell's
/// azimuth. Inputs are clamped into the cell's mode polytope and integrated
/// on the nonlinear dynamics.
pub fn connect<T: Real>(
    model: &SliderModel<T>,
    x_gen: &SliderState<T>,
    target: &SliderState<T>,
    cell: &CellChoice<T>,
    cfg: &LqrConfig<T>,
) -> Result<ConnectionResult<T>> {
    let x0 = x_gen.with_psi(cell.psi_star);
    let b = linearize_on_face(model, cell.face, &x0);
    let stages = riccati(&b, cfg)?;
    let poly = mode_polytope(model, cell.mode);
    let mut x = x0;
    let mut controls = Vec::with_capacity(cfg.horizon);
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    states.push(x);
    for (k, hess) in stages {
        // constrained minimizer of the stage cost-to-go, which is quadratic
        // in u with Hessian `hess` around the unconstrained LQR input
        let e = x.difference(target);
        let u = project_in_metric(&poly, &hess, &(-(k * e)))?;
        let u = PusherInput::from_vector(model, &u)?;
        x = rk4_step(model, cell.face, &x, &u, cfg.tau_lqr);
        if !model.on_face(cell.face, x.psi_c) {
            return Err(Error::FaceExit { face: cell.face });
        }
        controls.push(u);
        states.push(x);
    }
    Ok(ConnectionResult {
        reached: weighted_distance(&x, target, &cfg.weights) <= cfg.tolerance,
        controls,
        states,
        x_term: x,
    })
}

/// Axis-aligned box around a goal pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct GoalRegion<T: Real> {
    pub center: Pose2<T>,
    /// Half-widths in x, y and theta.
    pub tolerance: [T; 3],
}

impl<T: Real> GoalRegion<T> {
    pub fn contains(&self, pose: &Pose2<T>) -> bool {
        (pose.x - self.center.x).abs() <= self.tolerance[0]
            && (pose.y - self.center.y).abs() <= self.tolerance[1]
            && wrap_angle(pose.theta - self.center.theta).abs() <= self.tolerance[2]
    }
}

/// Tries to push `x` into the goal region in one connection, using the best
/// mode on the current face. `reached` reports goal-region membership.
pub fn connect_goal<T: Real>(
    model: &SliderModel<T>,
    x: &SliderState<T>,
    goal: &GoalRegion<T>,
    cfg: &LqrConfig<T>,
) -> Result<ConnectionResult<T>> {
    if goal.contains(&x.pose) {
        return Ok(ConnectionResult {
            controls: vec![PusherInput::zero(); cfg.horizon],
            states: vec![*x; cfg.horizon + 1],
            x_term: *x,
            reached: true,
        });
    }
    let target = SliderState {
        pose: goal.center,
        psi_c: x.psi_c,
    };
    let face = model.face_of(x.psi_c);
    let mut best: Option<ConnectionResult<T>> = None;
    for mode in ContactMode::ALL {
        let cell = CellChoice {
            face,
            mode,
            psi_star: x.psi_c,
        };
        let r = match connect(model, x, &target, &cell, cfg) {
            Ok(r) => r,
            Err(Error::FaceExit { .. }) => continue,
            Err(e) => return Err(e),
        };
        let inside = goal.contains(&r.x_term.pose);
        let r = ConnectionResult { reached: inside, ..r };
        let d = weighted_distance(&r.x_term, &target, &cfg.weights);
        let better = match &best {
            None => true,
            Some(b) => (inside && !b.reached) || (inside == b.reached && d < weighted_distance(&b.x_term, &target, &cfg.weights)),
        };
        if better {
            best = Some(r);
        }
    }
    best.ok_or(Error::FaceExit { face })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ellipsoid_limit, rollout};
    use crate::geom2d::ConvexPolygon;
    use crate::reachset::{build_reachable_set, nearest_neighbor};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn paper_slider() -> SliderModel<f64> {
        let fp = ConvexPolygon::rectangle(0.08, 0.15).unwrap();
        let a = ellipsoid_limit(&fp, 1.2);
        SliderModel::new(fp, a, 0.2, 0.15, 1.0).unwrap()
    }

    fn cfg(m: &SliderModel<f64>) -> LqrConfig<f64> {
        LqrConfig::for_model(m, 0.05, 0.01).unwrap()
    }

    #[test]
    fn default_horizon_is_five() {
        let m = paper_slider();
        let c = cfg(&m);
        assert_eq!(c.horizon, 5);
        c.validate().unwrap();
    }

    #[test]
    fn zero_state_cost_gives_zero_gains() {
        let m = paper_slider();
        let mut c = cfg(&m);
        c.c_q = Matrix4::zeros();
        let b = linearize_on_face(&m, 3, &SliderState::new(0.0, 0.0, 0.0, PI));
        for k in lqr_gains(&b, &c).unwrap() {
            assert_eq!(k, Matrix3x4::zeros());
        }
    }

    #[test]
    fn scalar_one_step_riccati() {
        // only x couples to the first input; costs decouple per axis
        let (bq, q, r, tau) = (0.7f64, 2.0f64, 0.3f64, 0.01f64);
        let mut b = Matrix4x3::zeros();
        b[(0, 0)] = bq;
        b[(1, 1)] = 1.0;
        b[(3, 2)] = 1.0;
        let c = LqrConfig {
            tau_lqr: tau,
            horizon: 1,
            c_q: Matrix4::from_diagonal(&Vector4::new(q, 1.0, 1.0, 1.0)),
            c_r: Matrix3::from_diagonal(&Vector3::new(r, 1.0, 1.0)),
            weights: default_weights(),
            tolerance: 5e-3,
        };
        let k = lqr_gains(&b, &c).unwrap()[0];
        let expect = q * bq * tau / (r + q * (bq * tau).powi(2));
        assert!((k[(0, 0)] - expect).abs() < 1e-14);
    }

    /// Open-loop optimal inputs from the stacked least-squares problem.
    fn batch_inputs(b: &Matrix4x3<f64>, c: &LqrConfig<f64>, x0: &Vector4<f64>) -> DVector<f64> {
        let n = c.horizon;
        let bd = b * c.tau_lqr;
        // x_k = x0 + sum_{j<k} Bd u_j
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        let mut g = DVector::zeros(3 * n);
        for k in 1..=n {
            let qk = c.c_q;
            for i in 0..k {
                for j in 0..k {
                    let blk = bd.transpose() * qk * bd;
                    add_block(&mut h, 3 * i, 3 * j, &blk);
                }
                let gv = bd.transpose() * qk * x0;
                let mut seg = g.rows_mut(3 * i, 3);
                seg += gv;
            }
        }
        for i in 0..n {
            add_block(&mut h, 3 * i, 3 * i, &c.c_r);
        }
        -(h.lu().solve(&g).unwrap())
    }

    fn add_block(h: &mut DMatrix<f64>, r0: usize, c0: usize, m: &Matrix3<f64>) {
        for r in 0..3 {
            for c in 0..3 {
                h[(r0 + r, c0 + c)] += m[(r, c)];
            }
        }
    }

    #[test]
    fn gains_match_batch_dynamic_programming() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = paper_slider();
        for _ in 0..10 {
            let b = Matrix4x3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let c = LqrConfig {
                c_r: Matrix3::from_diagonal(&Vector3::new(0.3, 0.2, 0.1)),
                ..cfg(&m)
            };
            let gains = lqr_gains(&b, &c).unwrap();
            let x0 = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let u_batch = batch_inputs(&b, &c, &x0);
            let mut x = x0;
            for (k, kk) in gains.iter().enumerate() {
                let u = -(kk * x);
                for i in 0..3 {
                    assert!((u[i] - u_batch[3 * k + i]).abs() < 1e-9);
                }
                x += b * c.tau_lqr * u;
            }
        }
    }

    #[test]
    fn cheap_control_reaches_targets_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = paper_slider();
        for _ in 0..20 {
            let b = Matrix4x3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let c = LqrConfig {
                c_r: Matrix3::identity() * 1e-14,
                ..cfg(&m)
            };
            let gains = lqr_gains(&b, &c).unwrap();
            let w = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let target = b * w;
            let mut x = Vector4::zeros();
            for kk in &gains {
                x += b * c.tau_lqr * (-(kk * (x - target)));
            }
            assert!((x - target).norm() < 1e-6);
        }
    }

    #[test]
    fn clamped_inputs_lie_in_polytopes() {
        let m = paper_slider();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in ContactMode::ALL {
            let poly = mode_polytope(&m, mode);
            for _ in 0..200 {
                let u = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-3.0..3.0));
                let c = clamp_to_polytope(&m, &poly, &u).unwrap();
                assert!(poly.max_violation(&c) <= 1e-12);
            }
        }
        let poly = mode_polytope(&m, ContactMode::Sticking);
        let inside = Vector3::new(0.1, 0.01, 0.0);
        assert_eq!(clamp_to_polytope(&m, &poly, &inside).unwrap(), inside);
    }

    fn sticking_cell(x: &SliderState<f64>, m: &SliderModel<f64>) -> CellChoice<f64> {
        CellChoice {
            face: m.face_of(x.psi_c),
            mode: ContactMode::Sticking,
            psi_star: x.psi_c,
        }
    }

    #[test]
    fn connecting_to_self_is_trivial() {
        let m = paper_slider();
        let x = SliderState::new(0.1, 0.2, 0.3, PI);
        let r = connect(&m, &x, &x, &sticking_cell(&x, &m), &cfg(&m)).unwrap();
        assert!(r.reached);
        assert_eq!(r.x_term, x);
        assert!(r.controls.iter().all(|u| u.to_vector() == Vector3::zeros()));
    }

    #[test]
    fn reaches_a_rollout_endpoint() {
        let m = paper_slider();
        let x = SliderState::new(0.1, 0.2, 0.3, PI + 0.1);
        let u = m.input(0.12, -0.015, 0.0).unwrap();
        let target = *rollout(&m, &x, &[u; 5], 0.01).unwrap().last().unwrap();
        let c = cfg(&m);
        let r = connect(&m, &x, &target, &sticking_cell(&x, &m), &c).unwrap();
        assert!(r.reached);
        let d0 = weighted_distance(&x, &target, &c.weights);
        let d1 = weighted_distance(&r.x_term, &target, &c.weights);
        assert!(d1 < 0.2 * d0, "{d1} vs {d0}");
    }

    #[test]
    fn unreachable_targets_still_improve() {
        let m = paper_slider();
        let c = cfg(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut closer = 0;
        for _ in 0..100 {
            let x = SliderState::new(0.0, 0.0, rng.gen_range(-PI..PI), PI + rng.gen_range(-0.2..0.2));
            // behind the push face, with some lateral offset
            let side = rng.gen_range(0.02..0.04) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let back = Pose2::new(0.0, 0.0, x.pose.theta).transform_vector(&nalgebra::Vector2::new(-0.002, side));
            let target = SliderState::new(back.x, back.y, x.pose.theta, x.psi_c);
            let r = connect(&m, &x, &target, &sticking_cell(&x, &m), &c).unwrap();
            assert!(!r.reached);
            let d0 = weighted_distance(&x, &target, &c.weights);
            let d1 = weighted_distance(&r.x_term, &target, &c.weights);
            if d1 < d0 {
                closer += 1;
            } else {
                assert!(d1 - d0 < 1e-3);
            }
        }
        assert!(closer >= 95, "{closer}");
    }

    #[test]
    fn connections_into_reachable_cells_improve() {
        let m = paper_slider();
        let c = cfg(&m);
        let w = default_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut better = 0;
        let mut tried = 0;
        let n = 500;
        for _ in 0..n {
            let x = SliderState::new(0.0, 0.0, rng.gen_range(-PI..PI), rng.gen_range(-PI..PI));
            let rs = build_reachable_set(&m, &x, 0.05);
            let cell = &rs.cells[rng.gen_range(0..rs.cells.len())];
            let q = cell.sample_member(&mut rng);
            let nn = nearest_neighbor(std::slice::from_ref(&rs), &q, &w).unwrap();
            let choice = CellChoice {
                face: nn.face,
                mode: nn.mode,
                psi_star: nn.psi_star,
            };
            match connect(&m, &x, &nn.x_near, &choice, &c) {
                Ok(r) => {
                    tried += 1;
                    let poly = mode_polytope(&m, nn.mode);
                    let v = r.controls.iter().map(|u| poly.max_violation(&u.to_vector())).fold(0.0, f64::max);
                    assert!(v <= 1e-12, "{v:e} {:?}", nn.mode);
                    let d0 = weighted_distance(&x, &nn.x_near, &w);
                    let d1 = weighted_distance(&r.x_term, &nn.x_near, &w);
                    if d1 < d0 {
                        better += 1;
                    }
                }
                Err(Error::FaceExit { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(tried >= n * 9 / 10, "{tried}");
        assert!(better as f64 >= 0.99 * tried as f64, "{better}/{tried}");
    }

    #[test]
    fn goal_connection() {
        let m = paper_slider();
        let c = cfg(&m);
        let x = SliderState::new(0.0, 0.0, 0.0, PI);
        let inside = GoalRegion {
            center: Pose2::new(0.001, 0.0, 0.0),
            tolerance: [0.01, 0.01, 0.1],
        };
        let r = connect_goal(&m, &x, &inside, &c).unwrap();
        assert!(r.reached);
        assert!(r.controls.iter().all(|u| u.to_vector() == Vector3::zeros()));

        let u = m.input(0.1, 0.0, 0.0).unwrap();
        let end = *rollout(&m, &x, &[u; 5], 0.01).unwrap().last().unwrap();
        let ahead = GoalRegion {
            center: end.pose,
            tolerance: [0.001, 0.001, 0.02],
        };
        assert!(!ahead.contains(&x.pose));
        assert!(connect_goal(&m, &x, &ahead, &c).unwrap().reached);

        let behind = GoalRegion {
            center: Pose2::new(-0.02, 0.0, 0.0),
            tolerance: [0.001, 0.001, 0.02],
        };
        assert!(!connect_goal(&m, &x, &behind, &c).unwrap().reached);
    }
}
