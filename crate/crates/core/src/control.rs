//! Contact-implicit MPC tracking with a disturbance observer.
//!
//! The input is `[f_n, f_t, psi_dot_plus, psi_dot_minus]` with
//! `psi_dot = psi_dot_plus - psi_dot_minus`. Sliding in `+psi` needs the
//! friction force at `f_t = -mu f_n`, sliding in `-psi` at `f_t = mu f_n`; the
//! products of each velocity half with its friction-cone slack, and of the two
//! halves, are driven to zero by a penalty.
//!
//! Each solve linearizes the Euler-discretized dynamics about the current
//! iterate, condenses the states out and hands the QP to clarabel. The
//! bilinear penalty is majorized by its convex-concave split, so every QP is
//! convex.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector2, Vector4};

use crate::dynamics::{face_jacobian, PusherInput, SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::rotation_matrix;
use crate::planner::{state_at, PlanResult};
use crate::scalar::wrap_angle;
use crate::simulator::{step, DisturbanceSchedule, Fault, World, WorldState};

/// Stop the SQP once the largest input step falls below this.
pub const SQP_STEP_TOL: f64 = 1e-6;

/// Contact velocities below this fraction of the bound count as sticking when
/// the modes are fixed.
const MODE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub tau_mpc: f64,
    pub q: Matrix4<f64>,
    pub q_f: Matrix4<f64>,
    pub r_u: Matrix4<f64>,
    /// Observer rate (1/s).
    pub kappa_d: f64,
    /// Relaxation of the complementarity products.
    pub epsilon: f64,
    pub max_sqp_iters: usize,
    /// Weight of the complementarity penalty.
    pub penalty: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = Matrix4::from_diagonal(&Vector4::new(5000.0, 5000.0, 1.0, 0.1));
        Self {
            horizon: 30,
            tau_mpc: 0.04,
            q,
            q_f: q * 10.0,
            r_u: Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.01, 0.01)),
            kappa_d: 5.0,
            epsilon: 1e-4,
            max_sqp_iters: 8,
            penalty: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.tau_mpc > 0.0) {
            return Err(Error::InvalidConfig("tau_mpc must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.kappa_d > 0.0) || !(self.penalty > 0.0) {
            return Err(Error::InvalidConfig("epsilon, kappa_d and penalty must be positive".into()));
        }
        for (name, m, pd) in [("Q", &self.q, false), ("Q_f", &self.q_f, false), ("R_u", &self.r_u, true)] {
            if (m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::InvalidConfig(format!("{name} is not symmetric")));
            }
            let min_eig = m.symmetric_eigenvalues().min();
            if min_eig < -1e-12 || (pd && min_eig <= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} is not {}", if pd { "positive definite" } else { "PSD" })));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcInput {
    pub f_n: f64,
    pub f_t: f64,
    pub psi_dot_plus: f64,
    pub psi_dot_minus: f64,
}

impl MpcInput {
    pub fn new(f_n: f64, f_t: f64, psi_dot_plus: f64, psi_dot_minus: f64) -> Self {
        Self {
            f_n,
            f_t,
            psi_dot_plus,
            psi_dot_minus,
        }
    }

    /// Splits a pusher input into its velocity halves.
    pub fn from_pusher(u: &PusherInput<f64>) -> Self {
        Self::new(u.f_n(), u.f_t(), u.psi_dot().max(0.0), (-u.psi_dot()).max(0.0))
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.f_n, self.f_t, self.psi_dot_plus, self.psi_dot_minus)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn psi_dot(&self) -> f64 {
        self.psi_dot_plus - self.psi_dot_minus
    }

    /// `[psi_dot_plus (mu f_n + f_t), psi_dot_minus (mu f_n - f_t), psi_dot_plus psi_dot_minus]`
    pub fn complementarity(&self, mu: f64) -> [f64; 3] {
        [
            self.psi_dot_plus * (mu * self.f_n + self.f_t),
            self.psi_dot_minus * (mu * self.f_n - self.f_t),
            self.psi_dot_plus * self.psi_dot_minus,
        ]
    }

    /// The nearest admissible pusher input: bounds are clamped, not checked.
    pub fn to_pusher(&self, model: &SliderModel<f64>) -> PusherInput<f64> {
        let f_n = self.f_n.clamp(0.0, model.f_bar);
        let lim = model.mu_p * f_n;
        let f_t = self.f_t.clamp(-lim, lim);
        let psi_dot = self.psi_dot().clamp(-model.psi_dot_bar, model.psi_dot_bar);
        model.input(f_n, f_t, psi_dot).expect("clamped input is admissible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisturbanceState {
    pub d_hat: Vector4<f64>,
}

/// One observer step. The residual `x_obs - x_pred` is a one-step position
/// error, so it is divided by `tau_mpc` to get a rate before the `kappa_d`
/// gain: each step removes the fraction `kappa_d tau_mpc` of the estimation
/// error.
pub fn observer_update(
    d: &DisturbanceState,
    x_obs: &SliderState<f64>,
    x_pred: &SliderState<f64>,
    kappa_d: f64,
    tau_mpc: f64,
) -> DisturbanceState {
    let rate_residual = x_obs.difference(x_pred) / tau_mpc;
    let mut d_hat = d.d_hat + rate_residual * (kappa_d * tau_mpc);
    d_hat[3] = 0.0;
    DisturbanceState { d_hat }
}

/// Continuous-time rate on `face` for a split input.
fn rate(model: &SliderModel<f64>, face: usize, x: &Vector4<f64>, u: &Vector4<f64>) -> Vector4<f64> {
    let j = face_jacobian(model, face, x[3]);
    let v = rotation_matrix(x[2]) * (model.limit * (j.transpose() * Vector2::new(u[0], u[1])));
    Vector4::new(v[0], v[1], v[2], u[2] - u[3])
}

/// One step of the controller's prediction model.
pub fn predict(
    model: &SliderModel<f64>,
    face: usize,
    x: &SliderState<f64>,
    u: &MpcInput,
    d: &DisturbanceState,
    tau: f64,
) -> SliderState<f64> {
    let xv = x.to_vector();
    x.advanced(&((rate(model, face, &xv, &u.to_vector()) + d.d_hat) * tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u0: MpcInput,
    pub inputs: Vec<MpcInput>,
    pub predicted: Vec<SliderState<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// The first QP failed; `u0` is the warm start's first input.
    pub diverged: bool,
    /// Largest complementarity product over the horizon.
    pub complementarity: f64,
    /// Tracking objective of the returned inputs.
    pub cost: f64,
}

/// Reference window: `horizon + 1` states and, optionally, `horizon`
/// feed-forward inputs (empty means zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<SliderState<f64>>,
    pub inputs: Vec<MpcInput>,
    /// Last stage with a state cost; it takes the terminal weight. Later
    /// stages belong to another face and are left free. `None` tracks the
    /// whole horizon.
    pub cutoff: Option<usize>,
}

fn unwrap_near(a: f64, center: f64) -> f64 {
    center + wrap_angle(a - center)
}

struct Problem<'a> {
    model: &'a SliderModel<f64>,
    cfg: &'a MpcConfig,
    face: usize,
    x0: Vector4<f64>,
    d: Vector4<f64>,
    refs: Vec<Vector4<f64>>,
    psi_tracked: Vec<bool>,
    cutoff: usize,
    u_ff: Vec<Vector4<f64>>,
    band: (f64, f64),
}

impl Problem<'_> {
    fn rollout(&self, us: &[Vector4<f64>]) -> Vec<Vector4<f64>> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(self.x0);
        for u in us {
            let x = xs.last().unwrap();
            xs.push(x + (rate(self.model, self.face, x, u) + self.d) * self.cfg.tau_mpc);
        }
        xs
    }

    fn error(&self, k: usize, x: &Vector4<f64>) -> Vector4<f64> {
        let r = &self.refs[k];
        let mut e = Vector4::new(x[0] - r[0], x[1] - r[1], wrap_angle(x[2] - r[2]), wrap_angle(x[3] - r[3]));
        if !self.psi_tracked[k] {
            e[3] = 0.0;
        }
        e
    }

    fn weight(&self, k: usize) -> Matrix4<f64> {
        let mut w = match k.cmp(&self.cutoff) {
            std::cmp::Ordering::Less => self.cfg.q,
            std::cmp::Ordering::Equal => self.cfg.q_f,
            std::cmp::Ordering::Greater => return Matrix4::zeros(),
        };
        if !self.psi_tracked[k] {
            w.row_mut(3).fill(0.0);
            w.column_mut(3).fill(0.0);
        }
        w
    }

    fn cost(&self, us: &[Vector4<f64>], xs: &[Vector4<f64>]) -> f64 {
        let n = us.len();
        let mut c = 0.0;
        for k in 0..n {
            let e = self.error(k, &xs[k]);
            let du = us[k] - self.u_ff[k];
            c += (self.weight(k) * e).dot(&e) + (self.cfg.r_u * du).dot(&du);
        }
        let e = self.error(n, &xs[n]);
        c + (self.weight(n) * e).dot(&e)
    }

    /// State and input Jacobians of one Euler step.
    fn jacobians(&self, x: &Vector4<f64>, u: &Vector4<f64>) -> (Matrix4<f64>, Matrix4<f64>) {
        let tau = self.cfg.tau_mpc;
        let j = face_jacobian(self.model, self.face, x[3]);
        let (s, c) = x[2].sin_cos();
        let mut dr = Matrix3::zeros();
        dr[(0, 0)] = -s;
        dr[(0, 1)] = -c;
        dr[(1, 0)] = c;
        dr[(1, 1)] = -s;
        let f = Vector2::new(u[0], u[1]);
        let d_theta = dr * (self.model.limit * (j.transpose() * f));
        let h = 1e-6;
        let jp = face_jacobian(self.model, self.face, x[3] + h);
        let jm = face_jacobian(self.model, self.face, x[3] - h);
        let d_psi = rotation_matrix(x[2]) * (self.model.limit * ((jp - jm).transpose() * f)) / (2.0 * h);
        let mut a = Matrix4::identity();
        for r in 0..3 {
            a[(r, 2)] += tau * d_theta[r];
            a[(r, 3)] += tau * d_psi[r];
        }
        let top = rotation_matrix(x[2]) * self.model.limit * j.transpose();
        let mut b = Matrix4::zeros();
        for r in 0..3 {
            b[(r, 0)] = tau * top[(r, 0)];
            b[(r, 1)] = tau * top[(r, 1)];
        }
        b[(3, 2)] = tau;
        b[(3, 3)] = -tau;
        (a, b)
    }

    /// One convex subproblem around `us`; returns the input step. With
    /// `modes` the penalty is replaced by fixing each step's contact mode.
    fn step(&self, us: &[Vector4<f64>], xs: &[Vector4<f64>], modes: Option<&[Mode]>) -> Option<Vec<Vector4<f64>>> {
        let n = us.len();
        let nv = 4 * n;
        let m = self.model;
        // phi maps the stacked input step to the stacked state steps x_1..x_n
        let mut phi = DMatrix::<f64>::zeros(nv, nv);
        for k in 0..n {
            let (a, b) = self.jacobians(&xs[k], &us[k]);
            if k > 0 {
                let prev = phi.rows(4 * (k - 1), 4).columns(0, 4 * k).into_owned();
                let next = a * prev;
                phi.view_mut((4 * k, 0), (4, 4 * k)).copy_from(&next);
            }
            phi.view_mut((4 * k, 4 * k), (4, 4)).copy_from(&b);
        }
        let mut qbar = DMatrix::<f64>::zeros(nv, nv);
        let mut e = DVector::<f64>::zeros(nv);
        for k in 1..=n {
            let w = self.weight(k);
            qbar.view_mut((4 * (k - 1), 4 * (k - 1)), (4, 4)).copy_from(&w);
            e.rows_mut(4 * (k - 1), 4).copy_from(&self.error(k, &xs[k]));
        }
        let mut p = phi.transpose() * &qbar * &phi * 2.0;
        let mut q = phi.transpose() * (&qbar * &e) * 2.0;
        for k in 0..n {
            let du = us[k] - self.u_ff[k];
            let r = self.cfg.r_u;
            let mut blk = p.view_mut((4 * k, 4 * k), (4, 4));
            blk += r * 2.0;
            let g = r * du * 2.0;
            for i in 0..4 {
                q[4 * k + i] += g[i];
            }
        }
        // complementarity penalty, convex-concave majorant of rho a b
        let rho = if modes.is_some() { 0.0 } else { self.cfg.penalty };
        let mu = m.mu_p;
        let gamma = m.f_bar / m.psi_dot_bar;
        for k in (0..n).filter(|_| rho > 0.0) {
            let u = &us[k];
            let pairs: [(Vector4<f64>, Vector4<f64>); 3] = [
                (Vector4::new(0.0, 0.0, 1.0, 0.0), Vector4::new(mu, 1.0, 0.0, 0.0)),
                (Vector4::new(0.0, 0.0, 0.0, 1.0), Vector4::new(mu, -1.0, 0.0, 0.0)),
                (Vector4::new(0.0, 0.0, 1.0, 0.0), Vector4::new(0.0, 0.0, 0.0, 1.0)),
            ];
            for (ca, cb) in pairs {
                let (a, b) = (ca.dot(u), cb.dot(u));
                // the third pair mixes two velocities: no unit balancing
                let g = if ca[2] + ca[3] > 0.0 && cb[2] + cb[3] > 0.0 { 1.0 } else { gamma };
                let c = ca * g + cb;
                let curv = c * c.transpose() * (rho / (2.0 * g));
                let mut blk = p.view_mut((4 * k, 4 * k), (4, 4));
                blk += curv;
                let lin = (ca * b + cb * a) * rho;
                for i in 0..4 {
                    q[4 * k + i] += lin[i];
                }
            }
        }

        // inequality rows G dv <= h
        let mut g_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::with_capacity(10 * n);
        for k in 0..n {
            let u = &us[k];
            let o = 4 * k;
            g_rows.push((vec![(o, -1.0)], u[0]));
            g_rows.push((vec![(o, 1.0)], m.f_bar - u[0]));
            g_rows.push((vec![(o, -mu), (o + 1, 1.0)], mu * u[0] - u[1]));
            g_rows.push((vec![(o, -mu), (o + 1, -1.0)], mu * u[0] + u[1]));
            for i in [2, 3] {
                g_rows.push((vec![(o + i, -1.0)], u[i]));
                g_rows.push((vec![(o + i, 1.0)], m.psi_dot_bar - u[i]));
            }
            // with the rows above these pin the mode's equalities
            match modes.map(|md| md[k]) {
                None => {}
                Some(Mode::Stick) => {
                    g_rows.push((vec![(o + 2, 1.0)], -u[2]));
                    g_rows.push((vec![(o + 3, 1.0)], -u[3]));
                }
                Some(Mode::SlidePlus) => {
                    g_rows.push((vec![(o + 3, 1.0)], -u[3]));
                    g_rows.push((vec![(o, mu), (o + 1, 1.0)], -mu * u[0] - u[1]));
                }
                Some(Mode::SlideMinus) => {
                    g_rows.push((vec![(o + 2, 1.0)], -u[2]));
                    g_rows.push((vec![(o, mu), (o + 1, -1.0)], -mu * u[0] + u[1]));
                }
            }
        }
        let mut dense_rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(2 * n);
        for k in 1..=n {
            let row = phi.row(4 * (k - 1) + 3).transpose();
            let psi = xs[k][3];
            dense_rows.push((row.clone(), self.band.1 - psi));
            dense_rows.push((-row, psi - self.band.0));
        }

        let p_csc = upper_triangle(&p);
        let mut ti = Vec::new();
        let mut tj = Vec::new();
        let mut tv = Vec::new();
        let mut h = Vec::with_capacity(g_rows.len() + dense_rows.len());
        for (r, (entries, hb)) in g_rows.iter().enumerate() {
            for &(c, v) in entries {
                ti.push(r);
                tj.push(c);
                tv.push(v);
            }
            h.push(*hb);
        }
        let base = g_rows.len();
        for (r, (row, hb)) in dense_rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    ti.push(base + r);
                    tj.push(c);
                    tv.push(*v);
                }
            }
            h.push(*hb);
        }
        let rows = h.len();
        let a_csc = CscMatrix::new_from_triplets(rows, nv, ti, tj, tv);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-10)
            .tol_gap_rel(1e-10)
            .tol_feas(1e-10)
            .build()
            .ok()?;
        let cones = [NonnegativeConeT(rows)];
        let mut solver = DefaultSolver::new(&p_csc, q.as_slice(), &a_csc, &h, &cones, settings);
        solver.solve();
        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            _ => return None,
        }
        let x = &solver.solution.x;
        Some((0..n).map(|k| Vector4::new(x[4 * k], x[4 * k + 1], x[4 * k + 2], x[4 * k + 3])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Stick,
    SlidePlus,
    SlideMinus,
}

fn classify(model: &SliderModel<f64>, u: &Vector4<f64>) -> Mode {
    let psi_dot = u[2] - u[3];
    let thresh = MODE_THRESHOLD * model.psi_dot_bar;
    if psi_dot > thresh {
        Mode::SlidePlus
    } else if psi_dot < -thresh {
        Mode::SlideMinus
    } else {
        Mode::Stick
    }
}

fn upper_triangle(p: &DMatrix<f64>) -> CscMatrix<f64> {
    let n = p.nrows();
    let mut ti = Vec::new();
    let mut tj = Vec::new();
    let mut tv = Vec::new();
    for j in 0..n {
        for i in 0..=j {
            let v = (p[(i, j)] + p[(j, i)]) / 2.0;
            if v != 0.0 {
                ti.push(i);
                tj.push(j);
                tv.push(v);
            }
        }
    }
    CscMatrix::new_from_triplets(n, n, ti, tj, tv)
}

fn clamp_input(model: &SliderModel<f64>, u: &Vector4<f64>) -> Vector4<f64> {
    let f_n = u[0].clamp(0.0, model.f_bar);
    let lim = model.mu_p * f_n;
    Vector4::new(
        f_n,
        u[1].clamp(-lim, lim),
        u[2].clamp(0.0, model.psi_dot_bar),
        u[3].clamp(0.0, model.psi_dot_bar),
    )
}

/// Solves the tracking problem from `x_now` on its current face.
///
/// `warm` (typically the previous solution shifted by one step) seeds the
/// SQP; otherwise the feed-forward inputs do. Reference states on another face
/// keep their pose cost but drop the contact-azimuth cost.
pub fn solve_mpc(
    model: &SliderModel<f64>,
    x_now: &SliderState<f64>,
    d: &DisturbanceState,
    reference: &ReferenceWindow,
    cfg: &MpcConfig,
    warm: Option<&[MpcInput]>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon;
    if reference.states.len() != n + 1 {
        return Err(Error::InvalidConfig(format!(
            "reference window has {} states, expected {}",
            reference.states.len(),
            n + 1
        )));
    }
    if !reference.inputs.is_empty() && reference.inputs.len() != n {
        return Err(Error::InvalidConfig("feed-forward length must match the horizon".into()));
    }
    let face = model.face_of(x_now.psi_c);
    let (lo, hi) = model.allowed_band(face);
    let center = (lo + hi) / 2.0;
    let psi0 = unwrap_near(x_now.psi_c, center);
    let band = (lo.min(psi0), hi.max(psi0));
    let mut x0 = x_now.to_vector();
    x0[3] = psi0;
    let theta0 = x0[2];
    let refs: Vec<Vector4<f64>> = reference
        .states
        .iter()
        .map(|s| {
            Vector4::new(
                s.pose.x,
                s.pose.y,
                unwrap_near(s.pose.theta, theta0),
                unwrap_near(s.psi_c, center),
            )
        })
        .collect();
    let psi_tracked = reference.states.iter().map(|s| model.on_face(face, s.psi_c)).collect();
    let u_ff: Vec<Vector4<f64>> = if reference.inputs.is_empty() {
        vec![Vector4::zeros(); n]
    } else {
        reference.inputs.iter().map(|u| u.to_vector()).collect()
    };
    let prob = Problem {
        model,
        cfg,
        face,
        x0,
        d: d.d_hat,
        refs,
        psi_tracked,
        cutoff: reference.cutoff.map_or(n, |c| c.clamp(1, n)),
        u_ff: u_ff.clone(),
        band,
    };

    let seed: Vec<Vector4<f64>> = match warm {
        Some(w) if w.len() == n => w.iter().map(|u| clamp_input(model, &u.to_vector())).collect(),
        _ => u_ff.iter().map(|u| clamp_input(model, u)).collect(),
    };
    let mut us = seed.clone();
    let mut xs = prob.rollout(&us);
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    // penalty phase discovers the modes
    for it in 0..cfg.max_sqp_iters {
        iterations += 1;
        let Some(du) = prob.step(&us, &xs, None) else {
            diverged = it == 0;
            break;
        };
        let norm = apply_step(model, &mut us, &du);
        xs = prob.rollout(&us);
        if norm < SQP_STEP_TOL {
            break;
        }
    }
    if diverged {
        us = seed;
        xs = prob.rollout(&us);
    } else {
        // mode-fixed phase makes every product vanish
        let modes: Vec<Mode> = us.iter().map(|u| classify(model, u)).collect();
        let sticking = vec![Mode::Stick; n];
        let mut fixed = us.clone();
        let mut fixed_xs = xs.clone();
        let mut ok = false;
        for md in [&modes, &sticking] {
            fixed = us.clone();
            fixed_xs = xs.clone();
            ok = false;
            for _ in 0..cfg.max_sqp_iters {
                iterations += 1;
                let Some(du) = prob.step(&fixed, &fixed_xs, Some(md)) else {
                    ok = false;
                    break;
                };
                ok = true;
                let norm = apply_step(model, &mut fixed, &du);
                fixed_xs = prob.rollout(&fixed);
                if norm < SQP_STEP_TOL {
                    converged = true;
                    break;
                }
            }
            if ok {
                break;
            }
        }
        if ok {
            us = fixed;
            xs = fixed_xs;
        }
    }
    let inputs: Vec<MpcInput> = us.iter().map(MpcInput::from_vector).collect();
    let complementarity = inputs
        .iter()
        .flat_map(|u| u.complementarity(model.mu_p))
        .fold(0.0, f64::max);
    let predicted = xs.iter().map(SliderState::from_vector).collect();
    Ok(MpcSolution {
        u0: inputs[0],
        cost: prob.cost(&us, &xs),
        inputs,
        predicted,
        iterations,
        converged,
        diverged,
        complementarity,
    })
}

fn apply_step(model: &SliderModel<f64>, us: &mut [Vector4<f64>], du: &[Vector4<f64>]) -> f64 {
    let mut norm = 0.0f64;
    for (u, d) in us.iter_mut().zip(du) {
        norm = norm.max(d.abs().max());
        *u = clamp_input(model, &(*u + d));
    }
    norm
}

/// Drops the first input and repeats the last one.
pub fn shift_warm_start(inputs: &[MpcInput]) -> Vec<MpcInput> {
    let mut out: Vec<MpcInput> = inputs.iter().skip(1).copied().collect();
    if let Some(last) = inputs.last() {
        out.push(*last);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackConfig {
    pub mpc: MpcConfig,
    /// With `false` the estimate stays at zero.
    pub observer: bool,
    /// Time step of the plan's dense states and controls.
    pub plan_dt: f64,
    /// Extra time after the plan ends, tracking its final state.
    pub settle: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            observer: true,
            plan_dt: 0.01,
            settle: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    /// Time at which the input was chosen.
    pub t: f64,
    /// Plant state before the step (after any re-seat).
    pub x_obs: SliderState<f64>,
    pub x_ref: SliderState<f64>,
    pub u: PusherInput<f64>,
    pub d_hat: Vector4<f64>,
    /// Position error `x_obs - x_ref`.
    pub err: Vector2<f64>,
    pub face_switch: bool,
    /// The slider pushed a movable or a scheduled disturbance acted.
    pub in_contact: bool,
    pub diverged: bool,
}

impl TrackRecord {
    pub fn error(&self) -> f64 {
        self.err.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackLog {
    pub records: Vec<TrackRecord>,
    pub final_state: WorldState,
    pub fault: Option<Fault>,
    pub dt: f64,
}

impl TrackLog {
    pub fn max_error(&self) -> f64 {
        self.records.iter().map(TrackRecord::error).fold(0.0, f64::max)
    }

    /// Time integral of the position error.
    pub fn integrated_error(&self) -> f64 {
        self.records.iter().map(|r| r.error() * self.dt).sum()
    }

    pub fn diverged_steps(&self) -> usize {
        self.records.iter().filter(|r| r.diverged).count()
    }
}

/// Mean plan control over `[t, t + span)`.
fn feedforward(plan: &PlanResult, plan_dt: f64, t: f64, span: f64) -> MpcInput {
    let n = plan.controls.len();
    let a = (t / plan_dt).round() as usize;
    let b = ((t + span) / plan_dt).round() as usize;
    if a >= n || b <= a {
        return MpcInput::default();
    }
    let b = b.min(n);
    let sum = plan.controls[a..b].iter().fold(Vector4::zeros(), |acc, u| acc + MpcInput::from_pusher(u).to_vector());
    MpcInput::from_vector(&(sum / (b - a) as f64))
}

/// Reference window at `t`. Past the next face switch the window holds the
/// last state before it with zero feed-forward, since the pusher has to
/// re-seat there, and the stage reaching the switch is the last one costed.
fn reference_window(plan: &PlanResult, cfg: &TrackConfig, t: f64) -> ReferenceWindow {
    let tau = cfg.mpc.tau_mpc;
    let eps = 1e-9;
    let next_switch = plan
        .reseats
        .iter()
        .map(|(k, _)| *k as f64 * cfg.plan_dt)
        .find(|&ts| ts > t + eps);
    let mut states = Vec::with_capacity(cfg.mpc.horizon + 1);
    let mut inputs = Vec::with_capacity(cfg.mpc.horizon);
    let mut cutoff = None;
    for j in 0..=cfg.mpc.horizon {
        let tj = t + j as f64 * tau;
        match next_switch {
            Some(ts) if tj >= ts - eps => {
                let k = (ts / cfg.plan_dt).round() as usize;
                cutoff.get_or_insert(j);
                states.push(plan.states[k]);
                if j < cfg.mpc.horizon {
                    inputs.push(MpcInput::default());
                }
            }
            _ => {
                states.push(state_at(plan, cfg.plan_dt, tj));
                if j < cfg.mpc.horizon {
                    let span = next_switch.map_or(tau, |ts| (ts - tj).min(tau));
                    inputs.push(feedforward(plan, cfg.plan_dt, tj, span));
                }
            }
        }
    }
    ReferenceWindow { states, inputs, cutoff }
}

/// Closed-loop tracking of `plan` on the simulated plant.
///
/// Each step observes the plant, updates the disturbance estimate from the
/// previous prediction, re-seats the pusher at any face switch now due,
/// solves the MPC warm-started from the last solution and applies the first
/// input. Solver failures are logged and never abort the run.
pub fn track(
    world: &World,
    initial: WorldState,
    plan: &PlanResult,
    cfg: &TrackConfig,
    schedule: &DisturbanceSchedule,
) -> Result<TrackLog> {
    if !plan.success || plan.states.is_empty() {
        return Err(Error::InvalidConfig("cannot track an unsuccessful plan".into()));
    }
    cfg.mpc.validate()?;
    let model = &world.model;
    let tau = cfg.mpc.tau_mpc;
    let duration = plan.controls.len() as f64 * cfg.plan_dt + cfg.settle;
    let steps = (duration / tau).ceil() as usize;

    let mut state = initial;
    let mut d = DisturbanceState::default();
    let mut warm: Option<Vec<MpcInput>> = None;
    let mut pending_pred: Option<SliderState<f64>> = None;
    let mut next_reseat = 0;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        if state.fault.is_some() {
            break;
        }
        let t = state.time;
        if let (true, Some(x_pred)) = (cfg.observer, pending_pred) {
            d = observer_update(&d, &state.slider, &x_pred, cfg.mpc.kappa_d, tau);
        }
        let mut face_switch = false;
        while next_reseat < plan.reseats.len() && (plan.reseats[next_reseat].0 as f64) * cfg.plan_dt <= t + 1e-9 {
            let psi = plan.reseats[next_reseat].1;
            face_switch |= model.face_of(psi) != model.face_of(state.slider.psi_c);
            state.slider = state.slider.with_psi(psi);
            next_reseat += 1;
        }
        if face_switch {
            warm = None;
        }
        let window = reference_window(plan, cfg, t);
        let x_ref = window.states[0];
        let (u0, shifted, diverged) = match solve_mpc(model, &state.slider, &d, &window, &cfg.mpc, warm.as_deref()) {
            Ok(sol) => (sol.u0, shift_warm_start(&sol.inputs), sol.diverged),
            Err(_) => {
                let fallback = warm.as_ref().and_then(|w| w.first().copied()).unwrap_or_default();
                (fallback, warm.as_deref().map(shift_warm_start).unwrap_or_default(), true)
            }
        };
        let u = u0.to_pusher(model);
        let face = model.face_of(state.slider.psi_c);
        pending_pred = Some(predict(model, face, &state.slider, &MpcInput::from_pusher(&u), &d, tau));
        let (next, info) = step(world, &state, &u, tau, schedule)?;
        let err = Vector2::new(state.slider.pose.x - x_ref.pose.x, state.slider.pose.y - x_ref.pose.y);
        records.push(TrackRecord {
            t,
            x_obs: state.slider,
            x_ref,
            u,
            d_hat: d.d_hat,
            err,
            face_switch,
            in_contact: !info.contacts.is_empty() || schedule.active(t),
            diverged,
        });
        warm = (!shifted.is_empty()).then_some(shifted);
        state = next;
    }
    Ok(TrackLog {
        records,
        fault: state.fault,
        final_state: state,
        dt: tau,
    })
}
