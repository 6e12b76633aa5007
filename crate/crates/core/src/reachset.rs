//! Convex terminal-set approximations of the one-step reachable set and
//! nearest-neighbor queries over them.
//!
//! A cell collects the states `x_bar' + tau B(psi) u` for inputs `u` in one
//! mode polytope and contact azimuths `psi` in a band on one face. On a
//! straight face the contact offset `s` along the face enters the body wrench
//! linearly, so with `m = s f_n` the pose part of a cell is the linear image
//! of a polytope in `(f_n, f_t, m)`. The contact coordinate of the cell is the
//! interval swept by `psi + tau psi_dot`. A cell is the product of the two,
//! which makes projection an exact 3-variable QP plus a 1-D clamp.

use nalgebra::{Matrix3, Matrix4x3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{linearize_on_face, mode_polytope, ContactMode, InputPolytope, SliderModel, SliderState, STRICT_EPS};
use crate::error::{Error, Result};
use crate::geom2d::{rotation_matrix, Pose2};
use crate::qp;
use crate::scalar::{wrap_angle, Real};

/// Default metric weights `[x, y, theta, psi_c]` (m, m, m/rad, m/rad).
pub const DEFAULT_WEIGHTS: [f64; 4] = [1.0, 1.0, 0.1, 0.01];

pub fn default_weights<T: Real>() -> Vector4<T> {
    Vector4::from_fn(|i, _| T::lit(DEFAULT_WEIGHTS[i]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet<T: Real> {
    pub x_bar: SliderState<T>,
    pub face: usize,
    pub mode: ContactMode,
    pub tau: T,
    /// Contact azimuth band `[lo, hi]`; `hi` may exceed pi.
    pub psi_band: (T, T),
    /// Input matrix at the band center.
    pub b: Matrix4x3<T>,
    pub polytope: InputPolytope<T>,
    limit: Matrix3<T>,
    /// Inward normal and tangent of the face in body frame.
    normal: Vector2<T>,
    tangent: Vector2<T>,
    /// Distance from the centroid to the face's supporting line.
    offset: T,
    s_range: (T, T),
    psi_dot_range: (T, T),
    /// Body wrench as a linear function of `(f_n, f_t, m)`.
    wrench: Matrix3<T>,
    /// Global pose displacement per unit `(f_n, f_t, m)`, scaled by `tau`.
    displacement: Matrix3<T>,
    /// Pose displacements at the vertices of the `(f_n, f_t, m)` polytope.
    extreme_displacements: Vec<Vector3<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProjection<T: Real> {
    pub distance: T,
    pub x_proj: SliderState<T>,
    /// `[f_n, f_t, psi_dot]` achieving the projection.
    pub u_star: Vector3<T>,
    pub psi_star: T,
}

fn cross<T: Real>(a: &Vector2<T>, b: &Vector2<T>) -> T {
    a.x * b.y - a.y * b.x
}

/// Unwraps `psi` into `[lo, lo + 2 pi)`.
fn unwrap_from<T: Real>(psi: T, lo: T) -> T {
    let mut d = wrap_angle(psi - lo);
    if d < T::zero() {
        d += T::two_pi();
    }
    lo + d
}

/// Unwraps `psi` to the representative nearest `center`.
fn unwrap_near<T: Real>(psi: T, center: T) -> T {
    center + wrap_angle(psi - center)
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

impl<T: Real> TerminalSet<T> {
    /// Cell of `face` and `mode` over an explicit azimuth band.
    pub fn new(
        model: &SliderModel<T>,
        x_bar: &SliderState<T>,
        face: usize,
        mode: ContactMode,
        tau: T,
        psi_band: (T, T),
    ) -> Self {
        assert!(tau >= T::zero(), "terminal-set horizon must be nonnegative");
        assert!(psi_band.0 <= psi_band.1, "empty azimuth band");
        let fp = &model.footprint;
        let n_out = fp.outward_normal(face);
        let normal = -n_out;
        let tangent = Vector2::new(-normal.y, normal.x);
        let (a, _) = fp.face(face);
        let offset = n_out.dot(&a);
        let foot = n_out * offset;
        let s_of = |psi: T| tangent.dot(&fp.face_point(face, psi));
        let (s0, s1) = (s_of(psi_band.0), s_of(psi_band.1));
        let s_range = (s0.min(s1), s0.max(s1));
        let wrench = Matrix3::new(
            normal.x,
            tangent.x,
            T::zero(),
            normal.y,
            tangent.y,
            T::zero(),
            cross(&foot, &normal),
            cross(&foot, &tangent),
            -T::one(),
        );
        let displacement = rotation_matrix(x_bar.pose.theta) * model.limit * wrench * tau;
        let eps = T::lit(STRICT_EPS);
        let psi_dot_range = match mode {
            ContactMode::Sticking => (T::zero(), T::zero()),
            ContactMode::SlidingLeft => (-model.psi_dot_bar, -eps),
            ContactMode::SlidingRight => (eps, model.psi_dot_bar),
        };
        let f = model.f_bar;
        let mu = model.mu_p;
        let f_t: Vec<T> = match mode {
            ContactMode::Sticking => vec![-mu * f, mu * f],
            ContactMode::SlidingLeft => vec![mu * f],
            ContactMode::SlidingRight => vec![-mu * f],
        };
        let mut extreme_displacements = vec![Vector3::zeros()];
        for ft in &f_t {
            for s in [s_range.0, s_range.1] {
                extreme_displacements.push(displacement * Vector3::new(f, *ft, s * f));
            }
        }
        let center = (psi_band.0 + psi_band.1) / T::lit(2.0);
        let b = linearize_on_face(model, face, &x_bar.with_psi(center));
        Self {
            x_bar: *x_bar,
            face,
            mode,
            tau,
            psi_band,
            b,
            polytope: mode_polytope(model, mode),
            limit: model.limit,
            normal,
            tangent,
            offset,
            s_range,
            psi_dot_range,
            wrench,
            displacement,
            extreme_displacements,
        }
    }

    fn band_center(&self) -> T {
        (self.psi_band.0 + self.psi_band.1) / T::lit(2.0)
    }

    /// Contact coordinates `[lo, hi]` reachable within the horizon.
    pub fn psi_interval(&self) -> (T, T) {
        (
            self.psi_band.0 + self.tau * self.psi_dot_range.0,
            self.psi_band.1 + self.tau * self.psi_dot_range.1,
        )
    }

    /// Contact point on the face's supporting line at azimuth `psi`.
    fn contact_point(&self, psi: T) -> Vector2<T> {
        let d = Vector2::new(psi.cos(), psi.sin());
        d * (self.offset / (-self.normal).dot(&d))
    }

    fn azimuth_of_offset(&self, s: T) -> T {
        let p = -self.normal * self.offset + self.tangent * s;
        p.y.atan2(p.x)
    }

    /// State reached from `x_bar` with input `u` and contact azimuth `psi`
    /// under the linearized one-step map.
    pub fn member(&self, u: &Vector3<T>, psi: T) -> SliderState<T> {
        let p = self.contact_point(psi);
        let force = self.normal * u[0] + self.tangent * u[1];
        let wrench = Vector3::new(force.x, force.y, cross(&p, &force));
        let d = rotation_matrix(self.x_bar.pose.theta) * self.limit * wrench * self.tau;
        SliderState::new(
            self.x_bar.pose.x + d[0],
            self.x_bar.pose.y + d[1],
            self.x_bar.pose.theta + d[2],
            psi + self.tau * u[2],
        )
    }

    /// Largest weighted pose displacement from `x_bar` over the cell.
    pub fn pose_radius(&self, weights: &Vector4<T>) -> T {
        self.extreme_displacements
            .iter()
            .map(|d| Vector3::new(d[0] * weights[0], d[1] * weights[1], d[2] * weights[2]).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Exact weighted projection of `query` onto the cell.
    pub fn project(&self, query: &SliderState<T>, weights: &Vector4<T>) -> Result<CellProjection<T>> {
        let wp = Matrix3::from_diagonal(&weights.fixed_rows::<3>(0).into_owned());
        let diff = self.x_bar.difference(query);
        let r0 = wp * Vector3::new(diff[0], diff[1], diff[2]);

        let v = if self.tau > T::zero() {
            let map = wp * self.displacement;
            let h = map.transpose() * map;
            let g = map.transpose() * r0;
            let (rows, b) = self.pose_constraints();
            qp::solve(&h, &g, &rows, &b).ok_or(Error::InfeasibleCell)?.v
        } else {
            Vector3::zeros()
        };
        let r = r0 + wp * self.displacement * v;

        let (plo, phi) = self.psi_interval();
        let center = self.band_center();
        let q_psi = unwrap_near(query.psi_c, center);
        let psi_proj = clamp(q_psi, plo, phi);
        let rpsi = (psi_proj - q_psi) * weights[3];
        let distance = (r.norm_squared() + rpsi * rpsi).sqrt();

        let tiny = T::lit(1e-12) * self.polytope.h.iter().fold(T::one(), |a, b| a.max(b.abs()));
        let psi_star = if v[0] > tiny {
            let s = clamp(v[2] / v[0], self.s_range.0, self.s_range.1);
            unwrap_near(self.azimuth_of_offset(s), center)
        } else {
            clamp(q_psi, self.psi_band.0, self.psi_band.1)
        };
        let psi_dot = if self.tau > T::zero() {
            clamp((psi_proj - psi_star) / self.tau, self.psi_dot_range.0, self.psi_dot_range.1)
        } else {
            T::zero()
        };
        let d = self.displacement * v;
        let x_proj = SliderState::new(
            self.x_bar.pose.x + d[0],
            self.x_bar.pose.y + d[1],
            self.x_bar.pose.theta + d[2],
            psi_proj,
        );
        Ok(CellProjection {
            distance,
            x_proj,
            u_star: Vector3::new(v[0], v[1], psi_dot),
            psi_star: wrap_angle(psi_star),
        })
    }

    /// Rows of the `(f_n, f_t, m)` polytope: force bounds, the mode's
    /// friction rows and the contact-offset range.
    fn pose_constraints(&self) -> (Vec<Vector3<T>>, Vec<T>) {
        let z = T::zero();
        let o = T::one();
        let p = &self.polytope;
        let mut rows = Vec::with_capacity(6);
        let mut b = Vec::with_capacity(6);
        for (row, h) in p.rows.iter().zip(&p.h) {
            if row[2] == z {
                rows.push(Vector3::new(row[0], row[1], z));
                b.push(*h);
            }
        }
        rows.push(Vector3::new(self.s_range.0, z, -o));
        b.push(z);
        rows.push(Vector3::new(-self.s_range.1, z, o));
        b.push(z);
        (rows, b)
    }

    /// Random member generated by a feasible input and band azimuth.
    pub fn sample_member<R: Rng>(&self, rng: &mut R) -> SliderState<T> {
        let unit = |rng: &mut R| T::lit(rng.gen::<f64>());
        let f_bar = self.polytope.h[1];
        let mu = self.friction_coefficient();
        let f_n = unit(rng) * f_bar;
        let f_t = match self.mode {
            ContactMode::Sticking => (unit(rng) * T::lit(2.0) - T::one()) * mu * f_n,
            ContactMode::SlidingLeft => mu * f_n,
            ContactMode::SlidingRight => -mu * f_n,
        };
        let (dlo, dhi) = self.psi_dot_range;
        let psi_dot = dlo + unit(rng) * (dhi - dlo);
        let (lo, hi) = self.psi_band;
        let psi = lo + unit(rng) * (hi - lo);
        self.member(&Vector3::new(f_n, f_t, psi_dot), psi)
    }

    fn friction_coefficient(&self) -> T {
        // first friction row is [-mu, 1, 0] or [mu, 1, 0]
        self.polytope.rows[2][0].abs()
    }

    /// Wrench map check used by tests: `J(psi)^T [f_n, f_t]` equals
    /// `wrench * [f_n, f_t, s f_n]`.
    #[cfg(test)]
    fn wrench_matches(&self, model: &SliderModel<T>, psi: T, f: Vector2<T>) -> T {
        let j = crate::dynamics::face_jacobian(model, self.face, psi);
        let s = self.tangent.dot(&self.contact_point(psi));
        (j.transpose() * f - self.wrench * Vector3::new(f[0], f[1], s * f[0])).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachableSet<T: Real> {
    pub x_bar: SliderState<T>,
    /// Cells ordered by face, then mode.
    pub cells: Vec<TerminalSet<T>>,
}

/// Azimuth band of `face` for a generating state: centered on the current
/// contact when `face` is the one in use, on the face center otherwise, and
/// limited to the face's allowed band.
pub fn psi_band<T: Real>(model: &SliderModel<T>, x_bar: &SliderState<T>, face: usize, tau: T) -> (T, T) {
    let (a, b) = model.allowed_band(face);
    let center = if model.face_of(x_bar.psi_c) == face {
        let (lo, _) = model.footprint.face_azimuth_span(face);
        unwrap_from(x_bar.psi_c, lo)
    } else {
        unwrap_from(model.footprint.face_center_azimuth(face), a)
    };
    let center = clamp(center, a, b);
    let half = tau * model.psi_dot_bar;
    ((center - half).max(a), (center + half).min(b))
}

pub fn build_reachable_set<T: Real>(model: &SliderModel<T>, x_bar: &SliderState<T>, tau: T) -> ReachableSet<T> {
    let mut cells = Vec::with_capacity(3 * model.n_faces());
    for face in 0..model.n_faces() {
        let band = psi_band(model, x_bar, face, tau);
        for mode in ContactMode::ALL {
            cells.push(TerminalSet::new(model, x_bar, face, mode, tau, band));
        }
    }
    ReachableSet { x_bar: *x_bar, cells }
}

impl<T: Real> ReachableSet<T> {
    pub fn pose_radius(&self, weights: &Vector4<T>) -> T {
        self.cells
            .iter()
            .map(|c| c.pose_radius(weights))
            .fold(T::zero(), |a, b| a.max(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestResult<T: Real> {
    /// Insertion index of the winning set.
    pub node: usize,
    pub face: usize,
    pub mode: ContactMode,
    pub psi_star: T,
    pub x_near: SliderState<T>,
    pub x_gen: SliderState<T>,
    pub distance: T,
    pub u_star: Vector3<T>,
}

fn weighted_pose_distance<T: Real>(a: &Pose2<T>, b: &Pose2<T>, w: &Vector4<T>) -> T {
    let dx = (a.x - b.x) * w[0];
    let dy = (a.y - b.y) * w[1];
    let dt = wrap_angle(a.theta - b.theta) * w[2];
    (dx * dx + dy * dy + dt * dt).sqrt()
}

/// Exact nearest cell over all sets. Sets are visited in order of a lower
/// bound on their distance (pose gap minus the largest pose displacement of
/// any cell), and the scan stops once the bound exceeds the best distance.
pub fn nearest_neighbor<T: Real>(
    tree_sets: &[ReachableSet<T>],
    query: &SliderState<T>,
    weights: &Vector4<T>,
) -> Result<NearestResult<T>> {
    if tree_sets.is_empty() {
        return Err(Error::EmptyTree);
    }
    let mut order: Vec<(T, usize)> = tree_sets
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let gap = weighted_pose_distance(&s.x_bar.pose, &query.pose, weights);
            (gap - s.pose_radius(weights), k)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut best: Option<NearestResult<T>> = None;
    for (lb, k) in order {
        if let Some(b) = &best {
            if lb > b.distance {
                break;
            }
        }
        let set = &tree_sets[k];
        let gap = weighted_pose_distance(&set.x_bar.pose, &query.pose, weights);
        for cell in &set.cells {
            if let Some(b) = &best {
                if gap - cell.pose_radius(weights) > b.distance {
                    continue;
                }
            }
            let p = cell.project(query, weights)?;
            let cand = NearestResult {
                node: k,
                face: cell.face,
                mode: cell.mode,
                psi_star: p.psi_star,
                x_near: p.x_proj,
                x_gen: set.x_bar,
                distance: p.distance,
                u_star: p.u_star,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    cand.distance < b.distance
                        || (cand.distance == b.distance
                            && (cand.node, cand.face, cand.mode.index()) < (b.node, b.face, b.mode.index()))
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    Ok(best.expect("nonempty tree yields a candidate"))
}

/// A set that can generate members and measure distances to itself.
pub trait MemberSet<T: Real> {
    /// Reference state; convex combinations are formed in coordinates
    /// relative to it so angle wrapping does not interfere.
    fn anchor(&self) -> SliderState<T>;
    fn sample(&self, rng: &mut ChaCha8Rng) -> SliderState<T>;
    fn distance_to(&self, q: &SliderState<T>, weights: &Vector4<T>) -> T;
}

impl<T: Real> MemberSet<T> for TerminalSet<T> {
    fn anchor(&self) -> SliderState<T> {
        self.x_bar.with_psi(self.band_center())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> SliderState<T> {
        self.sample_member(rng)
    }

    fn distance_to(&self, q: &SliderState<T>, weights: &Vector4<T>) -> T {
        self.project(q, weights).map(|p| p.distance).unwrap_or(T::max_value().unwrap())
    }
}

/// Sampled convexity check: every random convex combination of two sampled
/// members must project onto the set with distance at most `1e-6`.
pub fn convexity_certificate<T: Real, S: MemberSet<T>>(cell: &S, n_samples: usize, seed: u64) -> bool {
    assert!(n_samples >= 2);
    let weights = default_weights::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = cell.anchor();
    let pts: Vec<Vector4<T>> = (0..n_samples).map(|_| cell.sample(&mut rng).difference(&anchor)).collect();
    let tol = T::lit(1e-6);
    (0..n_samples).all(|_| {
        let i = rng.gen_range(0..n_samples);
        let j = rng.gen_range(0..n_samples);
        let l = T::lit(rng.gen::<f64>());
        let c = pts[i] * l + pts[j] * (T::one() - l);
        cell.distance_to(&anchor.advanced(&c), &weights) <= tol
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ellipsoid_limit, eval_on_face};
    use crate::geom2d::ConvexPolygon;
    use std::f64::consts::PI;

    fn paper_slider() -> SliderModel<f64> {
        let fp = ConvexPolygon::rectangle(0.08, 0.15).unwrap();
        let a = ellipsoid_limit(&fp, 1.2);
        SliderModel::new(fp, a, 0.2, 0.15, 1.0).unwrap()
    }

    fn square_model() -> SliderModel<f64> {
        SliderModel::new(
            ConvexPolygon::rectangle(1.0, 1.0).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(0.7, 0.7, 40.0)),
            0.2,
            0.15,
            1.0,
        )
        .unwrap()
    }

    fn w() -> Vector4<f64> {
        default_weights()
    }

    #[test]
    fn cell_count_and_band_width() {
        let m = square_model();
        let x = SliderState::new(0.0, 0.0, 0.0, PI);
        let rs = build_reachable_set(&m, &x, 0.05);
        assert_eq!(rs.cells.len(), 12);
        for c in &rs.cells {
            assert!((c.psi_band.1 - c.psi_band.0 - 0.1).abs() < 1e-12);
        }
        let own = &rs.cells[3 * 3];
        assert_eq!(own.face, 3);
        assert!((own.psi_band.0 - (PI - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn wrench_reparametrization_is_exact() {
        let m = paper_slider();
        let x = SliderState::new(0.1, -0.2, 0.4, 0.3);
        let rs = build_reachable_set(&m, &x, 0.05);
        for c in &rs.cells {
            for k in 0..5 {
                let psi = c.psi_band.0 + (c.psi_band.1 - c.psi_band.0) * k as f64 / 4.0;
                assert!(c.wrench_matches(&m, psi, Vector2::new(0.1, -0.02)) < 1e-14);
            }
        }
    }

    #[test]
    fn member_matches_linearized_dynamics() {
        let m = paper_slider();
        let x = SliderState::new(0.1, -0.2, 0.4, PI + 0.1);
        let rs = build_reachable_set(&m, &x, 0.05);
        let c = &rs.cells[9];
        let psi = c.psi_band.0 + 0.01;
        let u = m.input(0.1, 0.01, 0.0).unwrap();
        let xd = eval_on_face(&m, c.face, &x.with_psi(psi), &u);
        let expect = x.with_psi(psi).advanced(&(xd * 0.05));
        let got = c.member(&u.to_vector(), psi);
        assert!(got.difference(&expect).norm() < 1e-14);
    }

    #[test]
    fn generating_state_has_zero_distance() {
        let m = paper_slider();
        let x = SliderState::new(0.3, 0.2, -1.0, PI + 0.05);
        let rs = build_reachable_set(&m, &x, 0.05);
        let nn = nearest_neighbor(std::slice::from_ref(&rs), &x, &w()).unwrap();
        assert_eq!(nn.node, 0);
        assert!(nn.distance < 1e-12);
        assert_eq!(nn.mode, ContactMode::Sticking);
        assert!(nn.u_star.norm() < 1e-12);
    }

    #[test]
    fn axis_aligned_push_inverts_analytically() {
        let m = paper_slider();
        let a1 = m.limit[(0, 0)];
        let x = SliderState::new(0.0, 0.0, 0.0, PI);
        let tau = 0.05;
        let rs = build_reachable_set(&m, &x, tau);
        let q = SliderState::new(tau * a1 * m.f_bar / 2.0, 0.0, 0.0, PI);
        let nn = nearest_neighbor(std::slice::from_ref(&rs), &q, &w()).unwrap();
        assert!(nn.distance < 1e-9, "{}", nn.distance);
        assert_eq!(nn.mode, ContactMode::Sticking);
        assert!((nn.u_star - Vector3::new(m.f_bar / 2.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((wrap_angle(nn.psi_star - PI)).abs() < 1e-9);
    }

    fn brute_force(c: &TerminalSet<f64>, q: &SliderState<f64>, n: usize) -> f64 {
        let f_bar = c.polytope.h[1];
        let mu = c.friction_coefficient();
        let (dlo, dhi) = c.psi_dot_range;
        let mut best = f64::INFINITY;
        let wv = w();
        for i in 0..n {
            let f_n = f_bar * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let a = j as f64 / (n - 1) as f64;
                let (f_t, pd) = match c.mode {
                    ContactMode::Sticking => ((2.0 * a - 1.0) * mu * f_n, 0.0),
                    ContactMode::SlidingLeft => (mu * f_n, dlo + a * (dhi - dlo)),
                    ContactMode::SlidingRight => (-mu * f_n, dlo + a * (dhi - dlo)),
                };
                for k in 0..n {
                    let psi = c.psi_band.0 + (c.psi_band.1 - c.psi_band.0) * k as f64 / (n - 1) as f64;
                    let p = c.member(&Vector3::new(f_n, f_t, pd), psi);
                    let d = p.difference(q).component_mul(&wv).norm();
                    best = best.min(d);
                }
            }
        }
        best
    }

    #[test]
    fn projection_agrees_with_grid_oracle() {
        let m = paper_slider();
        let x = SliderState::new(0.0, 0.0, 0.2, PI);
        let rs = build_reachable_set(&m, &x, 0.05);
        let c = &rs.cells[9];
        // opposite the push direction
        let push = rotation_matrix(0.2) * Vector3::new(1.0, 0.0, 0.0);
        let q = SliderState::new(-0.004 * push[0], -0.004 * push[1] + 0.001, 0.25, PI + 0.02);
        let p = c.project(&q, &w()).unwrap();
        let oracle = brute_force(c, &q, 50);
        assert!(p.distance > 0.0);
        assert!(p.distance <= oracle + 1e-12);
        assert!((oracle - p.distance) / oracle < 0.02, "{} vs {}", p.distance, oracle);
        assert!(c.polytope.max_violation(&p.u_star) <= 1e-9);
        assert!(p.u_star[0].abs() < 1e-12, "pushing cannot pull the slider back");
    }

    #[test]
    fn sliding_cells_agree_with_grid_oracle() {
        let m = paper_slider();
        let x = SliderState::new(0.0, 0.0, 0.0, PI);
        let rs = build_reachable_set(&m, &x, 0.05);
        let q = SliderState::new(0.002, 0.0015, 0.05, PI - 0.02);
        for c in &rs.cells[9..12] {
            let p = c.project(&q, &w()).unwrap();
            let oracle = brute_force(c, &q, 50);
            assert!(p.distance <= oracle + 1e-12);
            assert!((oracle - p.distance) / oracle.max(1e-12) < 0.02, "{:?} {} vs {}", c.mode, p.distance, oracle);
        }
    }

    #[test]
    fn generated_members_have_zero_distance() {
        let m = paper_slider();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = SliderState::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
            );
            let rs = build_reachable_set(&m, &x, 0.05);
            for c in &rs.cells {
                for _ in 0..10 {
                    let q = c.sample_member(&mut rng);
                    let p = c.project(&q, &w()).unwrap();
                    assert!(p.distance <= 1e-6, "{}", p.distance);
                    assert!(p.x_proj.difference(&q).norm() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn convexity_certificates() {
        let m = paper_slider();
        let x = SliderState::new(0.2, 0.1, 0.7, 1.3);
        let rs = build_reachable_set(&m, &x, 0.05);
        for (k, c) in rs.cells.iter().enumerate() {
            assert!(convexity_certificate(c, 200, k as u64));
        }
        let rs0 = build_reachable_set(&m, &x, 0.0);
        assert!(convexity_certificate(&rs0.cells[0], 50, 1));
    }

    /// A cell whose input map loses its tangential column in the upper half
    /// of the band: the union of two pieces.
    struct Broken {
        lower: TerminalSet<f64>,
        upper: TerminalSet<f64>,
    }

    impl MemberSet<f64> for Broken {
        fn anchor(&self) -> SliderState<f64> {
            self.lower.anchor()
        }
        fn sample(&self, rng: &mut ChaCha8Rng) -> SliderState<f64> {
            if rng.gen_bool(0.5) {
                self.lower.sample_member(rng)
            } else {
                self.upper.sample_member(rng)
            }
        }
        fn distance_to(&self, q: &SliderState<f64>, w: &Vector4<f64>) -> f64 {
            self.lower.distance_to(q, w).min(self.upper.distance_to(q, w))
        }
    }

    #[test]
    fn corrupted_cell_fails_certificate() {
        let m = paper_slider();
        let frictionless = SliderModel::new(m.footprint.clone(), m.limit, 1e-9, m.f_bar, m.psi_dot_bar).unwrap();
        let x = SliderState::new(0.0, 0.0, 0.0, PI);
        let (lo, hi) = psi_band(&m, &x, 3, 0.05);
        let mid = (lo + hi) / 2.0;
        let broken = Broken {
            lower: TerminalSet::new(&m, &x, 3, ContactMode::Sticking, 0.05, (lo, mid)),
            upper: TerminalSet::new(&frictionless, &x, 3, ContactMode::Sticking, 0.05, (mid, hi)),
        };
        assert!(!convexity_certificate(&broken, 200, 5));
    }

    #[test]
    fn nearest_prefers_the_node_that_reaches_the_query() {
        let m = paper_slider();
        let x1 = SliderState::new(0.0, 0.0, 0.0, PI);
        let x2 = SliderState::new(0.3, 0.1, 0.5, PI);
        let sets = vec![build_reachable_set(&m, &x1, 0.05), build_reachable_set(&m, &x2, 0.05)];
        let u = m.input(0.1, 0.01, 0.0).unwrap();
        let traj = crate::dynamics::rollout(&m, &x2, &[u; 5], 0.01).unwrap();
        let q = traj[5];
        let nn = nearest_neighbor(&sets, &q, &w()).unwrap();
        assert_eq!(nn.node, 1);
        assert_eq!(nn.mode, ContactMode::Sticking);
        assert!(nn.distance < 1e-4);
        assert_eq!(nn.x_gen, x2);
    }

    #[test]
    fn empty_tree_is_an_error() {
        let sets: Vec<ReachableSet<f64>> = vec![];
        let q = SliderState::new(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(nearest_neighbor(&sets, &q, &w()), Err(Error::EmptyTree)));
    }

    #[test]
    fn pruned_search_matches_exhaustive_scan() {
        let m = paper_slider();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sets: Vec<_> = (0..20)
            .map(|_| {
                let x = SliderState::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-PI..PI),
                    rng.gen_range(-PI..PI),
                );
                build_reachable_set(&m, &x, 0.05)
            })
            .collect();
        for _ in 0..100 {
            let q = SliderState::new(
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
            );
            let nn = nearest_neighbor(&sets, &q, &w()).unwrap();
            let mut best = (f64::INFINITY, 0);
            for (k, s) in sets.iter().enumerate() {
                for c in &s.cells {
                    let d = c.project(&q, &w()).unwrap().distance;
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            assert_eq!(nn.node, best.1);
            assert_eq!(nn.distance, best.0);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let fp = ConvexPolygon::<f32>::rectangle(0.08, 0.15).unwrap();
        let a = ellipsoid_limit(&fp, 1.2);
        let m = SliderModel::new(fp, a, 0.2, 0.15, 1.0).unwrap();
        let x = SliderState::new(0.0f32, 0.0, 0.0, std::f32::consts::PI);
        let rs = build_reachable_set(&m, &x, 0.05);
        let nn = nearest_neighbor(std::slice::from_ref(&rs), &x, &default_weights()).unwrap();
        assert!(nn.distance < 1e-5);
    }
}
