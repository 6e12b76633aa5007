//! Planar geometry kernel: poses, convex polygons, separating-axis contact
//! queries and pusher contact locations on a polygon perimeter.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// Two bodies closer than this (meters) are treated as touching.
pub const CONTACT_TOLERANCE: f64 = 1e-3;

/// Azimuths closer than this to a vertex azimuth are ambiguous.
pub const VERTEX_AZIMUTH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct Pose2<T: Real> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> Pose2<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn translation(&self) -> Vector2<T> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation2(&self) -> nalgebra::Matrix2<T> {
        let (s, c) = self.theta.sin_cos();
        nalgebra::Matrix2::new(c, -s, s, c)
    }

    /// Maps a body-frame point to the global frame.
    pub fn transform_point(&self, p: &Vector2<T>) -> Vector2<T> {
        self.rotation2() * p + self.translation()
    }

    /// Maps a body-frame direction to the global frame.
    pub fn transform_vector(&self, v: &Vector2<T>) -> Vector2<T> {
        self.rotation2() * v
    }

    pub fn inverse_transform_point(&self, p: &Vector2<T>) -> Vector2<T> {
        self.rotation2().transpose() * (p - self.translation())
    }

    /// Adds a global-frame displacement `[dx, dy, dtheta]`, re-wrapping the heading.
    pub fn displaced(&self, d: &nalgebra::Vector3<T>) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.theta + d[2])
    }
}

/// Rotation of a planar twist `[vx, vy, omega]` from body to global frame.
pub fn rotation_matrix<T: Real>(theta: T) -> Matrix3<T> {
    let (s, c) = theta.sin_cos();
    let z = T::zero();
    Matrix3::new(c, -s, z, s, c, z, z, z, T::one())
}

/// Counter-clockwise, strictly convex polygon whose area centroid is the
/// body-frame origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon<T: Real> {
    vertices: Vec<Vector2<T>>,
}

fn cross<T: Real>(a: &Vector2<T>, b: &Vector2<T>) -> T {
    a.x * b.y - a.y * b.x
}

fn area_and_centroid<T: Real>(v: &[Vector2<T>]) -> (T, Vector2<T>) {
    let mut area2 = T::zero();
    let mut c = Vector2::zeros();
    for i in 0..v.len() {
        let p = v[i];
        let q = v[(i + 1) % v.len()];
        let w = cross(&p, &q);
        area2 += w;
        c += (p + q) * w;
    }
    let area = area2 / T::lit(2.0);
    (area, c / (T::lit(3.0) * area2))
}

impl<T: Real> ConvexPolygon<T> {
    /// Validates winding, strict convexity and centroid placement.
    pub fn new(vertices: Vec<Vector2<T>>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon("fewer than three vertices".into()));
        }
        let scale = vertices
            .iter()
            .map(|v| v.norm())
            .fold(T::zero(), |a, b| a.max(b));
        if !(scale > T::zero()) {
            return Err(Error::InvalidPolygon("degenerate extent".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let turn = cross(&(b - a), &(c - b));
            if turn <= T::lit(1e-12) * scale * scale {
                return Err(Error::InvalidPolygon(format!(
                    "vertices {}..{} are not strictly convex counter-clockwise",
                    i,
                    (i + 2) % n
                )));
            }
        }
        let (area, centroid) = area_and_centroid(&vertices);
        if area <= T::zero() {
            return Err(Error::InvalidPolygon("clockwise winding".into()));
        }
        let tol = T::lit(1e-9).max(T::default_epsilon() * T::lit(100.0) * scale);
        if centroid.norm() > tol {
            return Err(Error::InvalidPolygon(format!(
                "centroid ({}, {}) is not at the origin",
                centroid.x.to_f64_lossy(),
                centroid.y.to_f64_lossy()
            )));
        }
        // Winding may be counter-clockwise with a reflex turn if the polygon
        // wraps more than once; the total turning angle rules that out.
        let mut total = T::zero();
        for i in 0..n {
            let e0 = vertices[(i + 1) % n] - vertices[i];
            let e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
            total += cross(&e0, &e1).atan2(e0.dot(&e1));
        }
        if (total - T::two_pi()).abs() > T::lit(1e-6) {
            return Err(Error::InvalidPolygon("self-overlapping boundary".into()));
        }
        Ok(Self { vertices })
    }

    /// Builds a polygon from arbitrary-origin vertices, shifting them so the
    /// area centroid lands on the origin.
    pub fn centered(vertices: Vec<Vector2<T>>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon("fewer than three vertices".into()));
        }
        let (_, c) = area_and_centroid(&vertices);
        Self::new(vertices.into_iter().map(|v| v - c).collect())
    }

    /// Axis-aligned rectangle of width `w` (body x) and height `h` (body y).
    pub fn rectangle(w: T, h: T) -> Result<Self> {
        let hw = w / T::lit(2.0);
        let hh = h / T::lit(2.0);
        Self::new(vec![
            Vector2::new(-hw, -hh),
            Vector2::new(hw, -hh),
            Vector2::new(hw, hh),
            Vector2::new(-hw, hh),
        ])
    }

    pub fn vertices(&self) -> &[Vector2<T>] {
        &self.vertices
    }

    pub fn n_faces(&self) -> usize {
        self.vertices.len()
    }

    pub fn area(&self) -> T {
        area_and_centroid(&self.vertices).0
    }

    pub fn max_radius(&self) -> T {
        self.vertices
            .iter()
            .map(|v| v.norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Face `i` runs from vertex `i` to vertex `i + 1`.
    pub fn face(&self, i: usize) -> (Vector2<T>, Vector2<T>) {
        let n = self.vertices.len();
        (self.vertices[i % n], self.vertices[(i + 1) % n])
    }

    pub fn outward_normal(&self, i: usize) -> Vector2<T> {
        let (a, b) = self.face(i);
        let e = b - a;
        Vector2::new(e.y, -e.x).normalize()
    }

    pub fn vertex_azimuth(&self, i: usize) -> T {
        let v = self.vertices[i % self.vertices.len()];
        v.y.atan2(v.x)
    }

    pub fn face_center_azimuth(&self, i: usize) -> T {
        let (a, b) = self.face(i);
        let m = (a + b) / T::lit(2.0);
        m.y.atan2(m.x)
    }

    /// Azimuth interval `(lo, hi)` swept by face `i`, with `hi > lo` and `lo`
    /// wrapped; `hi` may exceed pi.
    pub fn face_azimuth_span(&self, i: usize) -> (T, T) {
        let lo = self.vertex_azimuth(i);
        let next = self.vertex_azimuth(i + 1);
        let mut d = wrap_angle(next - lo);
        if d <= T::zero() {
            d += T::two_pi();
        }
        (lo, lo + d)
    }

    /// Face whose azimuth span contains `psi`; vertices belong to the face
    /// they start.
    pub fn face_of_azimuth(&self, psi: T) -> usize {
        for i in 0..self.n_faces() {
            let (lo, hi) = self.face_azimuth_span(i);
            let mut d = wrap_angle(psi - lo);
            if d < T::zero() {
                d += T::two_pi();
            }
            if d < hi - lo {
                return i;
            }
        }
        // Only reachable through rounding at the wrap seam.
        self.n_faces() - 1
    }

    /// Intersection of the ray at azimuth `psi` with the supporting line of
    /// face `face`. Valid slightly beyond the face's vertices, which keeps
    /// contact kinematics smooth inside integrator stages.
    pub fn face_point(&self, face: usize, psi: T) -> Vector2<T> {
        let (a, _) = self.face(face);
        let n = self.outward_normal(face);
        let d = Vector2::new(psi.cos(), psi.sin());
        let h = n.dot(&a);
        d * (h / n.dot(&d))
    }

    /// Mean distance from the centroid over the footprint area.
    pub fn mean_radius(&self) -> T {
        // Polar integration per centroid fan triangle: the integral of |r|
        // over the triangle is the integral of rho(phi)^3 / 3 over its angle.
        let n = self.n_faces();
        let mut integral = T::zero();
        let samples = 256;
        for i in 0..n {
            let (lo, hi) = self.face_azimuth_span(i);
            let (a, _) = self.face(i);
            let nrm = self.outward_normal(i);
            let h = nrm.dot(&a);
            let phi_n = nrm.y.atan2(nrm.x);
            let step = (hi - lo) / T::lit(samples as f64);
            // composite Simpson
            let f = |phi: T| {
                let rho = h / (phi - phi_n).cos();
                rho * rho * rho / T::lit(3.0)
            };
            let mut s = f(lo) + f(hi);
            for k in 1..samples {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                s += T::lit(w) * f(lo + step * T::lit(k as f64));
            }
            integral += s * step / T::lit(3.0);
        }
        integral / self.area()
    }

    pub fn world_vertices(&self, pose: &Pose2<T>) -> Vec<Vector2<T>> {
        self.vertices
            .iter()
            .map(|v| pose.transform_point(v))
            .collect()
    }

    pub fn contains_point(&self, pose: &Pose2<T>, p: &Vector2<T>) -> bool {
        let local = pose.inverse_transform_point(p);
        (0..self.n_faces()).all(|i| {
            let (a, _) = self.face(i);
            self.outward_normal(i).dot(&(local - a)) <= T::zero()
        })
    }
}

/// Location of the pusher on the slider perimeter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerimeterPoint<T: Real> {
    pub point: Vector2<T>,
    pub face: usize,
    /// Inward unit normal of the face.
    pub normal: Vector2<T>,
}

/// Intersection of the ray from the centroid at azimuth `psi` with the
/// polygon boundary.
pub fn point_on_perimeter<T: Real>(poly: &ConvexPolygon<T>, psi: T) -> Result<PerimeterPoint<T>> {
    let pi = T::pi();
    if !(psi >= -pi - T::lit(1e-12) && psi <= pi + T::lit(1e-12)) {
        return Err(Error::AzimuthOutOfRange {
            psi: psi.to_f64_lossy(),
        });
    }
    let eps = T::lit(VERTEX_AZIMUTH_EPS);
    for i in 0..poly.n_faces() {
        if wrap_angle(psi - poly.vertex_azimuth(i)).abs() < eps {
            return Err(Error::VertexAzimuth {
                psi: psi.to_f64_lossy(),
            });
        }
    }
    let face = poly.face_of_azimuth(psi);
    Ok(PerimeterPoint {
        point: poly.face_point(face, psi),
        face,
        normal: -poly.outward_normal(face),
    })
}

/// Result of a pairwise proximity query.
///
/// `normal` points from the first body into the second; `tangent` is the
/// normal rotated by +90 degrees so `(normal, tangent)` is right-handed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactQuery<T: Real> {
    pub in_contact: bool,
    pub point: Vector2<T>,
    pub normal: Vector2<T>,
    pub tangent: Vector2<T>,
    /// Penetration depth, zero when separated.
    pub depth: T,
    /// Signed separation along `normal` (negative when penetrating).
    pub separation: T,
}

impl<T: Real> ContactQuery<T> {
    /// Same contact with the normal pointing into the first body.
    pub fn reversed(&self) -> Self {
        Self {
            normal: -self.normal,
            tangent: -self.tangent,
            ..*self
        }
    }
}

pub fn polygon_collide<T: Real>(
    a: &ConvexPolygon<T>,
    pose_a: &Pose2<T>,
    b: &ConvexPolygon<T>,
    pose_b: &Pose2<T>,
) -> ContactQuery<T> {
    polygon_collide_with_tolerance(a, pose_a, b, pose_b, T::lit(CONTACT_TOLERANCE))
}

fn project_extent<T: Real>(pts: &[Vector2<T>], axis: &Vector2<T>) -> (T, T) {
    pts.iter()
        .map(|p| axis.dot(p))
        .fold((T::max_value().unwrap(), T::min_value().unwrap()), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        })
}

/// Separating-axis query reporting contact when the separation is at most `tolerance`.
pub fn polygon_collide_with_tolerance<T: Real>(
    a: &ConvexPolygon<T>,
    pose_a: &Pose2<T>,
    b: &ConvexPolygon<T>,
    pose_b: &Pose2<T>,
    tolerance: T,
) -> ContactQuery<T> {
    let va = a.world_vertices(pose_a);
    let vb = b.world_vertices(pose_b);

    let mut best_sep = T::min_value().unwrap();
    let mut best_normal = Vector2::new(T::one(), T::zero());
    for i in 0..a.n_faces() {
        let n = pose_a.transform_vector(&a.outward_normal(i));
        let (_, max_a) = project_extent(&va, &n);
        let (min_b, _) = project_extent(&vb, &n);
        let sep = min_b - max_a;
        if sep > best_sep {
            best_sep = sep;
            best_normal = n;
        }
    }
    for i in 0..b.n_faces() {
        let nb = pose_b.transform_vector(&b.outward_normal(i));
        let (_, max_b) = project_extent(&vb, &nb);
        let (min_a, _) = project_extent(&va, &nb);
        let sep = min_a - max_b;
        if sep > best_sep {
            best_sep = sep;
            best_normal = -nb;
        }
    }

    let n = best_normal;
    let t = Vector2::new(-n.y, n.x);
    let (_, max_a) = project_extent(&va, &n);
    let (min_b, _) = project_extent(&vb, &n);
    let scale = a.max_radius() + b.max_radius();
    let feat = T::lit(1e-6) * scale;
    let tangent_range = |pts: &[Vector2<T>], keep: &dyn Fn(T) -> bool| {
        pts.iter()
            .filter(|p| keep(n.dot(p)))
            .map(|p| t.dot(p))
            .fold((T::max_value().unwrap(), T::min_value().unwrap()), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            })
    };
    let (lo_a, hi_a) = tangent_range(&va, &|d| d >= max_a - feat);
    let (lo_b, hi_b) = tangent_range(&vb, &|d| d <= min_b + feat);
    let lo = lo_a.max(lo_b);
    let hi = hi_a.min(hi_b);
    let mid_t = if lo <= hi {
        (lo + hi) / T::lit(2.0)
    } else {
        // disjoint supporting features: midway across the gap
        (lo + hi) / T::lit(2.0)
    };
    let mid_n = (max_a + min_b) / T::lit(2.0);
    let point = t * mid_t + n * mid_n;

    ContactQuery {
        in_contact: best_sep <= tolerance,
        point,
        normal: n,
        tangent: t,
        depth: (-best_sep).max(T::zero()),
        separation: best_sep,
    }
}
