//! Exact active-set enumeration for tiny strictly convex QPs
//!
//! `min 1/2 v^T H v + g^T v  s.t.  a_i . v <= b_i` with three unknowns and at
//! most six rows. Every active subset of size <= 3 is a candidate KKT system;
//! the first candidate that is primal and dual feasible is the optimum.

use nalgebra::{Matrix3, Vector3};

use crate::scalar::Real;

pub const MAX_ROWS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSolution<T: Real> {
    pub v: Vector3<T>,
    pub objective: T,
    /// Bitmask of rows treated as active.
    pub active: u8,
}

fn objective<T: Real>(h: &Matrix3<T>, g: &Vector3<T>, v: &Vector3<T>) -> T {
    (h * v).dot(v) / T::lit(2.0) + g.dot(v)
}

/// Removes the residual of the active rows by a Euclidean correction. The
/// Schur-complement solve loses accuracy when `H` is badly conditioned; the
/// rows themselves are well scaled.
fn refine<T: Real>(v: Vector3<T>, rows: &[Vector3<T>], b: &[T], idx: &[usize]) -> Vector3<T> {
    let k = idx.len();
    if k == 0 {
        return v;
    }
    let mut gram = Matrix3::<T>::identity();
    let mut res = Vector3::<T>::zeros();
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            gram[(r, c)] = rows[i].dot(&rows[j]);
        }
        res[r] = rows[i].dot(&v) - b[i];
    }
    let inv = match k {
        1 => {
            let mut m = Matrix3::zeros();
            m[(0, 0)] = T::one() / gram[(0, 0)];
            Some(m)
        }
        2 => gram.fixed_view::<2, 2>(0, 0).into_owned().try_inverse().map(|m2| {
            let mut m = Matrix3::zeros();
            m.fixed_view_mut::<2, 2>(0, 0).copy_from(&m2);
            m
        }),
        _ => gram.try_inverse(),
    };
    let Some(inv) = inv else { return v };
    let mu = inv * res;
    let mut out = v;
    for (r, &i) in idx.iter().enumerate() {
        out -= rows[i] * mu[r];
    }
    out
}

/// Solves the QP; `None` if `H` is not positive definite or no candidate is
/// feasible (empty polytope).
pub fn solve<T: Real>(h: &Matrix3<T>, g: &Vector3<T>, rows: &[Vector3<T>], b: &[T]) -> Option<QpSolution<T>> {
    assert!(rows.len() == b.len() && rows.len() <= MAX_ROWS);
    let chol = h.cholesky()?;
    let hinv = chol.inverse();
    let hg = hinv * g;
    let ha: Vec<Vector3<T>> = rows.iter().map(|a| hinv * a).collect();

    let scale = rows
        .iter()
        .zip(b)
        .map(|(a, bi)| a.abs().max().max(bi.abs()))
        .fold(T::one(), |x, y| x.max(y));
    let tol = T::lit(1e-11) * scale;
    let primal_tol = T::lit(1e-14) * scale;
    let m = rows.len();

    let mut best: Option<QpSolution<T>> = None;
    let mut subsets: Vec<u8> = (0u8..(1u8 << m)).filter(|s| s.count_ones() <= 3).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    for s in subsets {
        let idx: Vec<usize> = (0..m).filter(|i| s & (1 << i) != 0).collect();
        let k = idx.len();
        // Schur complement S lambda = -b_S - A_S H^-1 g
        let v;
        let mut lambda = [T::zero(); 3];
        if k == 0 {
            v = -hg;
        } else {
            let mut schur = Matrix3::<T>::identity();
            let mut rhs = Vector3::<T>::zeros();
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    schur[(r, c)] = rows[i].dot(&ha[j]);
                }
                rhs[r] = -b[i] - rows[i].dot(&hg);
            }
            let sol = match k {
                1 => {
                    if schur[(0, 0)].abs() <= T::default_epsilon() * T::lit(1e3) * scale {
                        continue;
                    }
                    Vector3::new(rhs[0] / schur[(0, 0)], T::zero(), T::zero())
                }
                2 => {
                    let sub = schur.fixed_view::<2, 2>(0, 0).into_owned();
                    let det = sub.determinant();
                    let norm = sub.abs().max();
                    if det.abs() <= T::lit(1e-12) * norm * norm {
                        continue;
                    }
                    let inv = sub.try_inverse()?;
                    let x = inv * rhs.fixed_rows::<2>(0);
                    Vector3::new(x[0], x[1], T::zero())
                }
                _ => {
                    let det = schur.determinant();
                    let norm = schur.abs().max();
                    if det.abs() <= T::lit(1e-12) * norm * norm * norm {
                        continue;
                    }
                    match schur.try_inverse() {
                        Some(inv) => inv * rhs,
                        None => continue,
                    }
                }
            };
            let mut vv = -hg;
            for (r, &i) in idx.iter().enumerate() {
                lambda[r] = sol[r];
                vv -= ha[i] * sol[r];
            }
            v = vv;
        }
        let v = refine(v, rows, b, &idx);
        let primal_ok = rows.iter().zip(b).all(|(a, bi)| a.dot(&v) <= *bi + primal_tol);
        if !primal_ok {
            continue;
        }
        let obj = objective(h, g, &v);
        let dual_ok = lambda[..k].iter().all(|l| *l >= -tol);
        let cand = QpSolution {
            v,
            objective: obj,
            active: s,
        };
        if dual_ok {
            return Some(cand);
        }
        if best.map_or(true, |b| obj < b.objective) {
            best = Some(cand);
        }
    }
    best
}
