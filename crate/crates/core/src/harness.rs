//! Scene files, scene families, benchmarks and CSV reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{Matrix3, Vector2};
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connect::GoalRegion;
use crate::control::TrackLog;
use crate::dynamics::{ellipsoid_limit, SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::{polygon_collide, ConvexPolygon, Pose2, CONTACT_TOLERANCE};
use crate::interaction::{Obstacle, ObstacleModel};
use crate::planner::{plan, PlanParams, PlanResult, PlanTask, Workspace};
use crate::simulator::World;

/// Planning time recorded for failed trials (s).
pub const CENSOR_TIME: f64 = 130.0;
/// Path length recorded for failed trials (m).
pub const CENSOR_LENGTH: f64 = 2.0;
/// Pusher bounds used when tracking.
pub const TRACK_F_BAR: f64 = 0.5;
pub const TRACK_PSI_DOT_BAR: f64 = 3.0;
/// Number of scene families.
pub const FAMILIES: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub psi_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliderSpec {
    /// Counter-clockwise body-frame vertices, centroid at the origin.
    pub footprint: Vec<[f64; 2]>,
    /// Limit-surface matrix, row-major.
    pub limit: [[f64; 3]; 3],
    pub mu_p: f64,
    pub f_bar: f64,
    pub psi_dot_bar: f64,
    pub psi_bar: Vec<f64>,
    pub x0: StateSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<PoseSpec> for Pose2<f64> {
    fn from(p: PoseSpec) -> Self {
        Pose2::new(p.x, p.y, p.theta)
    }
}

impl From<Pose2<f64>> for PoseSpec {
    fn from(p: Pose2<f64>) -> Self {
        Self {
            x: p.x,
            y: p.y,
            theta: p.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub center: PoseSpec,
    /// Half-widths `[dx, dy, dtheta]`.
    pub tolerance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovableSpec {
    pub footprint: Vec<[f64; 2]>,
    pub limit: [[f64; 3]; 3],
    pub mu: f64,
    pub pose: PoseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSpec {
    pub footprint: Vec<[f64; 2]>,
    pub pose: PoseSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub workspace: Workspace,
    pub slider: SliderSpec,
    pub goal: GoalSpec,
    pub movables: Vec<MovableSpec>,
    pub fixed: Vec<FixedSpec>,
    #[serde(default)]
    pub meta: SceneMeta,
}

/// A validated scene in model form.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub workspace: Workspace,
    pub slider: SliderModel<f64>,
    pub x0: SliderState<f64>,
    pub goal: GoalRegion<f64>,
    pub movables: Vec<Obstacle<f64>>,
    pub fixed: Vec<Obstacle<f64>>,
}

fn polygon(field: &str, vertices: &[[f64; 2]]) -> Result<ConvexPolygon<f64>> {
    ConvexPolygon::new(vertices.iter().map(|v| Vector2::new(v[0], v[1])).collect())
        .map_err(|e| Error::validation(field, e.to_string()))
}

fn matrix(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

fn vertices(fp: &ConvexPolygon<f64>) -> Vec<[f64; 2]> {
    fp.vertices().iter().map(|v| [v.x, v.y]).collect()
}

fn finite(field: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::validation(field, "non-finite value"))
    }
}

impl Scene {
    /// Checks the schema-level invariants and builds the models.
    pub fn validate(&self) -> Result<SceneModel> {
        let w = self.workspace;
        finite("workspace", &[w.x_min, w.x_max, w.y_min, w.y_max])?;
        if !(w.x_max > w.x_min && w.y_max > w.y_min) {
            return Err(Error::validation("workspace", "empty rectangle"));
        }

        let s = &self.slider;
        let fp = polygon("slider.footprint", &s.footprint)?;
        finite("slider.limit", &s.limit.concat())?;
        let slider = SliderModel::with_psi_bar(fp, matrix(&s.limit), s.mu_p, s.f_bar, s.psi_dot_bar, s.psi_bar.clone())
            .map_err(|e| {
                let field = match &e {
                    Error::InvalidModel(m) if m.contains("limit") => "slider.limit",
                    Error::InvalidModel(m) if m.contains("psi") => "slider.psi_bar",
                    _ => "slider",
                };
                Error::validation(field, e.to_string())
            })?;
        finite("slider.x0", &[s.x0.x, s.x0.y, s.x0.theta, s.x0.psi_c])?;
        let x0 = SliderState::new(s.x0.x, s.x0.y, s.x0.theta, s.x0.psi_c);
        if !w.contains_footprint(&slider.footprint, &x0.pose) {
            return Err(Error::validation("slider.x0", "footprint leaves the workspace"));
        }
        if !slider.on_face(slider.face_of(x0.psi_c), x0.psi_c) {
            return Err(Error::validation("slider.x0.psi_c", "contact azimuth outside its face band"));
        }

        let g = &self.goal;
        finite("goal.center", &[g.center.x, g.center.y, g.center.theta])?;
        if !w.contains_point(g.center.x, g.center.y) {
            return Err(Error::validation("goal.center", "outside the workspace"));
        }
        if !g.tolerance.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(Error::validation("goal.tolerance", "tolerances must be positive"));
        }
        let goal = GoalRegion {
            center: g.center.clone().into(),
            tolerance: g.tolerance,
        };

        let mut movables = Vec::new();
        for (i, m) in self.movables.iter().enumerate() {
            let fp = polygon(&format!("movables[{i}].footprint"), &m.footprint)?;
            finite(&format!("movables[{i}].pose"), &[m.pose.x, m.pose.y, m.pose.theta])?;
            let model = ObstacleModel::new(fp, matrix(&m.limit), m.mu, true)
                .map_err(|e| Error::validation(format!("movables[{i}]"), e.to_string()))?;
            movables.push(Obstacle {
                model,
                pose: m.pose.clone().into(),
            });
        }
        let mut fixed = Vec::new();
        for (i, f) in self.fixed.iter().enumerate() {
            let fp = polygon(&format!("fixed[{i}].footprint"), &f.footprint)?;
            finite(&format!("fixed[{i}].pose"), &[f.pose.x, f.pose.y, f.pose.theta])?;
            fixed.push(Obstacle {
                model: ObstacleModel::new(fp, Matrix3::identity(), 0.0, false)?,
                pose: f.pose.clone().into(),
            });
        }

        let overlaps = |a: &ConvexPolygon<f64>, pa: &Pose2<f64>, b: &ConvexPolygon<f64>, pb: &Pose2<f64>| {
            polygon_collide(a, pa, b, pb).depth > CONTACT_TOLERANCE
        };
        for (i, m) in movables.iter().enumerate() {
            if overlaps(&slider.footprint, &x0.pose, &m.model.footprint, &m.pose) {
                return Err(Error::validation(format!("movables[{i}].pose"), "overlaps the slider"));
            }
            for (j, o) in movables.iter().enumerate().skip(i + 1) {
                if overlaps(&m.model.footprint, &m.pose, &o.model.footprint, &o.pose) {
                    return Err(Error::validation(format!("movables[{j}].pose"), format!("overlaps movables[{i}]")));
                }
            }
            for (j, f) in fixed.iter().enumerate() {
                if overlaps(&m.model.footprint, &m.pose, &f.model.footprint, &f.pose) {
                    return Err(Error::validation(format!("movables[{i}].pose"), format!("overlaps fixed[{j}]")));
                }
            }
        }
        for (j, f) in fixed.iter().enumerate() {
            if overlaps(&slider.footprint, &x0.pose, &f.model.footprint, &f.pose) {
                return Err(Error::validation(format!("fixed[{j}].pose"), "overlaps the slider"));
            }
        }
        Ok(SceneModel {
            workspace: w,
            slider,
            x0,
            goal,
            movables,
            fixed,
        })
    }

    pub fn plan_task(&self, params: PlanParams) -> Result<PlanTask> {
        let m = self.validate()?;
        Ok(PlanTask {
            model: m.slider,
            workspace: m.workspace,
            movables: m.movables,
            fixed: m.fixed,
            x0: m.x0,
            goal: m.goal,
            params,
        })
    }

    /// Plant for tracking: the scene's slider with the tracking bounds.
    pub fn world(&self) -> Result<World> {
        let m = self.validate()?;
        let s = &m.slider;
        let model = SliderModel::with_psi_bar(s.footprint.clone(), s.limit, s.mu_p, TRACK_F_BAR, TRACK_PSI_DOT_BAR, s.psi_bar.clone())?;
        Ok(World {
            model,
            movables: m.movables,
            fixed: m.fixed,
        })
    }
}

fn parse_error(e: &serde_json::Error) -> Error {
    Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column()))
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    let scene: Scene = serde_json::from_str(text).map_err(|e| parse_error(&e))?;
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    parse_scene(&std::fs::read_to_string(path)?)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(scene).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Slider with the planning parameters of the benchmark scenes.
pub fn paper_slider(x0: StateSpec) -> SliderSpec {
    let fp = ConvexPolygon::rectangle(0.08, 0.15).expect("rectangle");
    SliderSpec {
        footprint: vertices(&fp),
        limit: rows(&ellipsoid_limit(&fp, 1.2)),
        mu_p: 0.2,
        f_bar: 0.15,
        psi_dot_bar: 1.0,
        psi_bar: vec![0.52, 0.9, 0.52, 0.9],
        x0,
    }
}

/// The 0.07 x 0.122 m movable cube, long side along body y.
pub fn paper_cube(pose: Pose2<f64>) -> MovableSpec {
    let fp = ConvexPolygon::rectangle(0.07, 0.122).expect("rectangle");
    MovableSpec {
        footprint: vertices(&fp),
        limit: rows(&ellipsoid_limit(&fp, 0.8)),
        mu: 0.3,
        pose: pose.into(),
    }
}

/// Axis-aligned fixed block from its corner coordinates.
pub fn fixed_box(x0: f64, y0: f64, x1: f64, y1: f64) -> FixedSpec {
    let fp = ConvexPolygon::rectangle(x1 - x0, y1 - y0).expect("rectangle");
    FixedSpec {
        footprint: vertices(&fp),
        pose: PoseSpec {
            x: (x0 + x1) / 2.0,
            y: (y0 + y1) / 2.0,
            theta: 0.0,
        },
    }
}

const SCENE_WIDTH: f64 = 0.7;
const SCENE_HEIGHT: f64 = 0.5;
/// Goal half-widths of the generated scenes.
pub const SCENE_GOAL_TOLERANCE: [f64; 3] = [0.03, 0.03, 0.5];

/// Deterministic scene of `family` jittered by `seed`.
///
/// The slider starts on the left pushing lengthwise toward +x and the goal is
/// on the right. Family 0 puts a cube in a door of a full-height wall, and
/// family 1 puts one at the mouth of a walled corridor: either way the cube
/// leaves less than the slider's width free. Family 2 narrows a door with a
/// cube so squeezing past or nudging it is faster than the far opening, and
/// family 3 blocks the corridor of family 1 but opens a long way round below
/// it. Family 4 has only fixed walls around a wide gap.
pub fn generate_scene(family: u8, seed: u64) -> Result<Scene> {
    if family >= FAMILIES {
        return Err(Error::InvalidConfig(format!("scene family {family} outside 0..{FAMILIES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(family) << 32));
    let mut jitter = |a: f64| rng.gen_range(-a..=a);
    let fp = ConvexPolygon::rectangle(0.08, 0.15).expect("rectangle");
    let mid = SCENE_HEIGHT / 2.0;
    let y_start = mid + jitter(0.03);
    let y_goal = mid + jitter(0.03);
    let x0 = StateSpec {
        x: 0.12 + jitter(0.02),
        y: y_start,
        theta: -std::f64::consts::FRAC_PI_2,
        psi_c: fp.face_center_azimuth(0),
    };
    let goal = GoalSpec {
        center: PoseSpec {
            x: 0.55 + jitter(0.02),
            y: y_goal,
            theta: -std::f64::consts::FRAC_PI_2,
        },
        tolerance: SCENE_GOAL_TOLERANCE,
    };
    let (wall_lo, wall_hi) = (0.315, 0.345);
    let mut movables = Vec::new();
    let mut fixed = Vec::new();
    let description;
    match family {
        0 => {
            let door = mid + jitter(0.02);
            let half = 0.1;
            fixed.push(fixed_box(wall_lo, 0.0, wall_hi, door - half));
            fixed.push(fixed_box(wall_lo, door + half, wall_hi, SCENE_HEIGHT));
            movables.push(paper_cube(Pose2::new(0.33, door + jitter(0.015), 0.0)));
            description = "cube blocking the door of a full-height wall";
        }
        1 => {
            let lane = mid + jitter(0.02);
            let half = 0.1;
            fixed.push(fixed_box(0.3, 0.0, 0.44, lane - half));
            fixed.push(fixed_box(0.3, lane + half, 0.44, SCENE_HEIGHT));
            movables.push(paper_cube(Pose2::new(0.31, lane + jitter(0.015), 0.0)));
            description = "cube blocking the mouth of a walled corridor";
        }
        2 => {
            let door = mid - 0.03 + jitter(0.01);
            let half = 0.11;
            fixed.push(fixed_box(wall_lo, 0.0, wall_hi, door - half));
            fixed.push(fixed_box(wall_lo, door + half, wall_hi, SCENE_HEIGHT - 0.12));
            // the cube hugs one jamb, leaving roughly the slider's width
            let side = if jitter(1.0) > 0.0 { 1.0 } else { -1.0 };
            let free = 0.085 + jitter(0.005);
            let cube_y = door + side * (half - free - 0.061);
            movables.push(paper_cube(Pose2::new(0.33, cube_y, 0.0)));
            description = "cube narrowing a door, far opening at the top";
        }
        3 => {
            let lane = mid + jitter(0.02);
            let half = 0.1;
            let opening = 0.12 + jitter(0.01);
            fixed.push(fixed_box(0.3, opening, 0.44, lane - half));
            fixed.push(fixed_box(0.3, lane + half, 0.44, SCENE_HEIGHT));
            movables.push(paper_cube(Pose2::new(0.31, lane + jitter(0.015), 0.0)));
            description = "cube blocking a corridor, long way round at the bottom";
        }
        _ => {
            let gap = mid + jitter(0.04);
            let half = 0.08 + jitter(0.01);
            fixed.push(fixed_box(wall_lo, 0.0, wall_hi, gap - half));
            fixed.push(fixed_box(wall_lo, gap + half, wall_hi, SCENE_HEIGHT));
            let side = if jitter(1.0) > 0.0 { 1.0 } else { -1.0 };
            let cy = mid + side * (0.16 + jitter(0.01));
            fixed.push(fixed_box(0.19, cy - 0.03, 0.25, cy + 0.03));
            description = "fixed wall with a wide gap";
        }
    }
    let scene = Scene {
        workspace: Workspace {
            x_min: 0.0,
            x_max: SCENE_WIDTH,
            y_min: 0.0,
            y_max: SCENE_HEIGHT,
        },
        slider: paper_slider(x0),
        goal,
        movables,
        fixed,
        meta: SceneMeta {
            family: Some(family),
            seed: Some(seed),
            description: Some(description.into()),
        },
    };
    scene.validate()?;
    Ok(scene)
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 && cross2(&(hull[hull.len() - 1] - hull[hull.len() - 2]), &(p - hull[hull.len() - 2])) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Whether the open segment `a`-`b` meets the interior of a convex polygon.
fn segment_blocked(a: &Vector2<f64>, b: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let eps = 1e-9;
    let mut axes: Vec<Vector2<f64>> = (0..poly.len())
        .map(|i| {
            let e = poly[(i + 1) % poly.len()] - poly[i];
            Vector2::new(e.y, -e.x)
        })
        .collect();
    let d = b - a;
    if d.norm() > 0.0 {
        axes.push(Vector2::new(-d.y, d.x));
    }
    for n in axes {
        let n = n.normalize();
        let (smin, smax) = (a.dot(&n).min(b.dot(&n)), a.dot(&n).max(b.dot(&n)));
        let (pmin, pmax) = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.dot(&n)), hi.max(v.dot(&n))));
        if smax <= pmin + eps || pmax <= smin + eps {
            return false;
        }
    }
    true
}

/// Length of the shortest path from `a` to `b` avoiding the interiors of
/// convex `obstacles`, over the visibility graph of their vertices.
pub fn shortest_path_length(a: Vector2<f64>, b: Vector2<f64>, obstacles: &[Vec<Vector2<f64>>]) -> Option<f64> {
    let mut points = vec![a, b];
    for o in obstacles {
        points.extend(o.iter().copied());
    }
    let mut graph = UnGraph::<(), f64>::with_capacity(points.len(), 0);
    let nodes: Vec<NodeIndex> = points.iter().map(|_| graph.add_node(())).collect();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if obstacles.iter().all(|o| !segment_blocked(&points[i], &points[j], o)) {
                graph.add_edge(nodes[i], nodes[j], (points[j] - points[i]).norm());
            }
        }
    }
    dijkstra(&graph, nodes[0], Some(nodes[1]), |e| *e.weight()).get(&nodes[1]).copied()
}

/// Extra length over the straight start-goal distance that any slider path
/// must travel around the fixed obstacles.
///
/// The slider contains the disc of its inscribed radius about its origin, so
/// its origin must avoid each fixed obstacle grown by that disc. Growing by
/// an inscribed octagon instead gives smaller obstacles and therefore a
/// lower bound. Movables are ignored since they can be pushed.
pub fn detour_lower_bound(scene: &Scene) -> Result<f64> {
    let m = scene.validate()?;
    let fp = &m.slider.footprint;
    let r = (0..fp.n_faces())
        .map(|i| {
            let (p, _) = fp.face(i);
            fp.outward_normal(i).dot(&p)
        })
        .fold(f64::INFINITY, f64::min);
    let octagon: Vec<Vector2<f64>> = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            Vector2::new(a.cos(), a.sin()) * r
        })
        .collect();
    let grown: Vec<Vec<Vector2<f64>>> = m
        .fixed
        .iter()
        .map(|f| {
            let pts = f
                .model
                .footprint
                .world_vertices(&f.pose)
                .iter()
                .flat_map(|v| octagon.iter().map(move |o| v + o))
                .collect();
            convex_hull(pts)
        })
        .collect();
    let a = m.x0.pose.translation();
    let b = m.goal.center.translation();
    let straight = (b - a).norm();
    let path = shortest_path_length(a, b, &grown).ok_or_else(|| Error::InvalidConfig("goal unreachable around fixed obstacles".into()))?;
    Ok((path - straight).max(0.0))
}

/// Straight-line start-goal distance.
pub fn straight_distance(scene: &Scene) -> f64 {
    let dx = scene.goal.center.x - scene.slider.x0.x;
    let dy = scene.goal.center.y - scene.slider.x0.y;
    dx.hypot(dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Ca3p,
    NoContact,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Ca3p => "ca3p",
            Arm::NoContact => "no-contact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: u8,
    pub arm: Arm,
    pub seed: u64,
    pub success: bool,
    /// Wall-clock planning time, censored on failure.
    pub planning_time: f64,
    /// Censored on failure.
    pub path_length: f64,
    pub nodes_in_tree: usize,
    pub iterations: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub families: Vec<u8>,
    pub seeds: Vec<u64>,
    pub params: PlanParams,
    /// Also run every trial with movables treated as fixed.
    pub ablation: bool,
    /// Worker threads; `None` reads `PUSHPLAN_THREADS`, then the machine.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// Linear-interpolation quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub family: u8,
    pub arm: Arm,
    pub trials: usize,
    pub successes: usize,
    /// Over all trials, failures at their censored values.
    pub time: Option<Quartiles>,
    pub length: Option<Quartiles>,
    pub nodes_mean: f64,
    pub nodes_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn summaries(&self) -> Vec<BenchSummary> {
        let mut groups: BTreeMap<(u8, Arm), Vec<&BenchRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.family, r.arm)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((family, arm), rows)| {
                let n = rows.len() as f64;
                let nodes: Vec<f64> = rows.iter().map(|r| r.nodes_in_tree as f64).collect();
                let mean = nodes.iter().sum::<f64>() / n;
                let var = nodes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                BenchSummary {
                    family,
                    arm,
                    trials: rows.len(),
                    successes: rows.iter().filter(|r| r.success).count(),
                    time: Quartiles::of(&rows.iter().map(|r| r.planning_time).collect::<Vec<_>>()),
                    length: Quartiles::of(&rows.iter().map(|r| r.path_length).collect::<Vec<_>>()),
                    nodes_mean: mean,
                    nodes_std: var.sqrt(),
                }
            })
            .collect()
    }

    /// Plain-text table, one line per (family, arm).
    pub fn summary_table(&self) -> String {
        let mut out = String::from("family  arm         success  nodes              time_med_s  length_med_m\n");
        for s in self.summaries() {
            out += &format!(
                "{:<7} {:<11} {:>3}/{:<4} {:>7.0} +/- {:<7.0} {:>10.2} {:>13.3}\n",
                s.family,
                s.arm.name(),
                s.successes,
                s.trials,
                s.nodes_mean,
                s.nodes_std,
                s.time.as_ref().map_or(f64::NAN, |q| q.median),
                s.length.as_ref().map_or(f64::NAN, |q| q.median),
            );
        }
        out
    }
}

/// Worker count from `PUSHPLAN_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("PUSHPLAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_trial(family: u8, seed: u64, arm: Arm, params: &PlanParams) -> BenchRow {
    let mut row = BenchRow {
        family,
        arm,
        seed,
        success: false,
        planning_time: CENSOR_TIME,
        path_length: CENSOR_LENGTH,
        nodes_in_tree: 0,
        iterations: 0,
        error: String::new(),
    };
    let params = PlanParams {
        seed,
        contact: arm == Arm::Ca3p,
        ..params.clone()
    };
    match generate_scene(family, seed).and_then(|s| s.plan_task(params)).and_then(|t| plan(&t)) {
        Ok(r) => {
            row.success = r.success;
            row.nodes_in_tree = r.stats.nodes_in_tree;
            row.iterations = r.stats.iterations;
            if r.success {
                row.planning_time = r.stats.wall_time;
                row.path_length = r.stats.path_length_m;
            }
        }
        Err(e) => row.error = e.to_string(),
    }
    row
}

/// Runs every (family, seed, arm) trial on a worker pool. Rows come back
/// sorted by family, arm and seed whatever the scheduling.
pub fn bench(cfg: &BenchConfig) -> BenchReport {
    let mut jobs = Vec::new();
    for &family in &cfg.families {
        for &seed in &cfg.seeds {
            jobs.push((family, seed, Arm::Ca3p));
            if cfg.ablation {
                jobs.push((family, seed, Arm::NoContact));
            }
        }
    }
    let threads = cfg.threads.unwrap_or_else(thread_count).clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(family, seed, arm)) = jobs.get(i) else {
                    break;
                };
                let row = run_trial(family, seed, arm, &cfg.params);
                rows.lock().expect("bench rows").push(row);
            });
        }
    });
    let mut rows = rows.into_inner().expect("bench rows");
    rows.sort_by_key(|r| (r.family, r.arm, r.seed));
    BenchReport { rows }
}

pub const BENCH_HEADER: [&str; 10] = [
    "family",
    "arm",
    "seed",
    "success",
    "planning_time",
    "path_length",
    "nodes_in_tree",
    "iterations",
    "error",
    "censored",
];

/// One row per trial. `planning_time` is the only wall-clock column.
pub fn write_bench_csv<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.family.to_string(),
            r.arm.name().to_string(),
            r.seed.to_string(),
            r.success.to_string(),
            format!("{}", r.planning_time),
            format!("{}", r.path_length),
            r.nodes_in_tree.to_string(),
            r.iterations.to_string(),
            r.error.clone(),
            (!r.success).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const TRACK_HEADER: [&str; 14] = [
    "t", "x", "y", "theta", "psi_c", "fn", "ft", "psidot", "dhat_x", "dhat_y", "dhat_w", "err_x", "err_y", "event",
];

/// Per-step tracking log. `event` joins `face_switch`, `contact` and
/// `diverged` with `;`.
pub fn write_track_csv<W: Write>(log: &TrackLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACK_HEADER)?;
    for r in &log.records {
        let mut events = Vec::new();
        if r.face_switch {
            events.push("face_switch");
        }
        if r.in_contact {
            events.push("contact");
        }
        if r.diverged {
            events.push("diverged");
        }
        let x = &r.x_obs;
        w.write_record([
            r.t,
            x.pose.x,
            x.pose.y,
            x.pose.theta,
            x.psi_c,
            r.u.f_n(),
            r.u.f_t(),
            r.u.psi_dot(),
            r.d_hat[0],
            r.d_hat[1],
            r.d_hat[2],
            r.err.x,
            r.err.y,
        ]
        .iter()
        .map(|v| format!("{v}"))
        .chain(std::iter::once(events.join(";"))))?;
    }
    w.flush()?;
    Ok(())
}

/// Dense plan path: one row per state with the control applied from it.
pub fn write_plan_csv<W: Write>(plan: &PlanResult, dt: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "y", "theta", "psi_c", "fn", "ft", "psidot", "event"])?;
    for (k, s) in plan.states.iter().enumerate() {
        let (f_n, f_t, pd) = plan.controls.get(k).map_or((0.0, 0.0, 0.0), |u| (u.f_n(), u.f_t(), u.psi_dot()));
        let event = if plan.face_switch_steps.contains(&k) { "face_switch" } else { "" };
        w.write_record(
            [k as f64 * dt, s.pose.x, s.pose.y, s.pose.theta, s.psi_c, f_n, f_t, pd]
                .iter()
                .map(|v| format!("{v}"))
                .chain(std::iter::once(event.to_string())),
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// `contact` or `face_switch`.
    pub kind: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Contact intervals (maximal runs of contact steps) and face-switch
/// instants of a tracking log.
pub fn annotations(log: &TrackLog) -> Vec<Annotation> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    for r in &log.records {
        if r.face_switch {
            out.push(Annotation {
                kind: "face_switch".into(),
                t_start: r.t,
                t_end: r.t,
            });
        }
        match (open, r.in_contact) {
            (None, true) => open = Some(r.t),
            (Some(t0), false) => {
                out.push(Annotation {
                    kind: "contact".into(),
                    t_start: t0,
                    t_end: r.t,
                });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(t0) = open {
        let end = log.records.last().map_or(t0, |r| r.t + log.dt);
        out.push(Annotation {
            kind: "contact".into(),
            t_start: t0,
            t_end: end,
        });
    }
    out
}

/// Plot data: `trials.csv` and `summary.csv` for a report, or
/// `tracking_error.csv` and `annotations.csv` for a tracking log.
pub enum PlotSource<'a> {
    Bench(&'a BenchReport),
    Track(&'a TrackLog),
}

pub fn emit_plots(source: PlotSource<'_>, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    match source {
        PlotSource::Bench(report) => {
            write_bench_csv(report, std::fs::File::create(dir.join("trials.csv"))?)?;
            let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
            w.write_record([
                "family", "arm", "trials", "successes", "time_q1", "time_median", "time_q3", "length_q1", "length_median", "length_q3",
                "nodes_mean", "nodes_std",
            ])?;
            for s in report.summaries() {
                let q = |q: &Option<Quartiles>| q.as_ref().map_or([f64::NAN; 3], |q| [q.q1, q.median, q.q3]);
                let (t, l) = (q(&s.time), q(&s.length));
                let mut rec = vec![s.family.to_string(), s.arm.name().to_string(), s.trials.to_string(), s.successes.to_string()];
                rec.extend(t.iter().chain(&l).map(|v| format!("{v}")));
                rec.push(format!("{}", s.nodes_mean));
                rec.push(format!("{}", s.nodes_std));
                w.write_record(rec)?;
            }
            w.flush()?;
        }
        PlotSource::Track(log) => {
            let mut w = csv::Writer::from_path(dir.join("tracking_error.csv"))?;
            w.write_record(["t", "err_x", "err_y", "err"])?;
            for r in &log.records {
                w.write_record([r.t, r.err.x, r.err.y, r.error()].iter().map(|v| format!("{v}")))?;
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("annotations.csv"))?;
            w.write_record(["kind", "t_start", "t_end"])?;
            for a in annotations(log) {
                w.write_record([a.kind, format!("{}", a.t_start), format!("{}", a.t_end)])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn generated_scenes_are_valid_and_deterministic() {
        for family in 0..FAMILIES {
            for seed in 0..20 {
                let a = generate_scene(family, seed).unwrap();
                let b = generate_scene(family, seed).unwrap();
                assert_eq!(a, b);
                a.validate().unwrap();
            }
        }
        assert!(generate_scene(5, 0).is_err());
    }

    #[test]
    fn scene_round_trips_through_json() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let scene = generate_scene(0, 3).unwrap();
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);
    }

    #[test]
    fn goal_outside_workspace_names_the_field() {
        let mut scene = generate_scene(4, 0).unwrap();
        scene.goal.center.x = 5.0;
        let text = serde_json::to_string(&scene).unwrap();
        match parse_scene(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "goal.center"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_json_are_rejected() {
        let scene = generate_scene(4, 0).unwrap();
        let mut v = serde_json::to_value(&scene).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(parse_scene(&v.to_string()), Err(Error::Parse(_))));
        let mut v = serde_json::to_value(&scene).unwrap();
        v["slider"]["colour"] = serde_json::json!("red");
        assert!(matches!(parse_scene(&v.to_string()), Err(Error::Parse(_))));
        match parse_scene("{\n  \"workspace\": ") {
            Err(Error::Parse(m)) => assert!(m.starts_with("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overlapping_bodies_are_rejected() {
        let mut scene = generate_scene(4, 0).unwrap();
        let x0 = &scene.slider.x0;
        scene.movables.push(paper_cube(Pose2::new(x0.x, x0.y, 0.0)));
        match scene.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "movables[0].pose"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paper_parameter_scene_validates() {
        let mut scene = generate_scene(0, 0).unwrap();
        scene.slider.mu_p = 0.1;
        let m = scene.validate().unwrap();
        assert_eq!(m.movables[0].model.mu, 0.3);
        let v = m.movables[0].model.footprint.vertices();
        assert!((v[2].x - v[0].x - 0.07).abs() < 1e-12 && (v[2].y - v[0].y - 0.122).abs() < 1e-12);
        let v = m.slider.footprint.vertices();
        assert!((v[2].x - v[0].x - 0.08).abs() < 1e-12 && (v[2].y - v[0].y - 0.15).abs() < 1e-12);
    }

    /// Widest free interval along a vertical line through the wall, between
    /// fixed boxes and (optionally) movables, by sweeping their y extents.
    fn widest_gap(scene: &Scene, x: f64, include_movables: bool) -> f64 {
        let m = scene.validate().unwrap();
        let mut spans: Vec<(f64, f64)> = Vec::new();
        let mut add = |fp: &ConvexPolygon<f64>, pose: &Pose2<f64>| {
            let v = fp.world_vertices(pose);
            let (xl, xh) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
            if x >= xl && x <= xh {
                let (yl, yh) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
                spans.push((yl, yh));
            }
        };
        for f in &m.fixed {
            add(&f.model.footprint, &f.pose);
        }
        if include_movables {
            for o in &m.movables {
                add(&o.model.footprint, &o.pose);
            }
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best: f64 = 0.0;
        let mut cursor = scene.workspace.y_min;
        for (lo, hi) in spans {
            best = best.max(lo - cursor);
            cursor = cursor.max(hi);
        }
        best.max(scene.workspace.y_max - cursor)
    }

    #[test]
    fn family_geometry_matches_its_description() {
        for seed in 0..20 {
            let s = generate_scene(4, seed).unwrap();
            assert!(s.movables.is_empty());
            assert!(widest_gap(&s, 0.33, false) >= 0.08 + 0.01);
            for family in [0, 1] {
                let s = generate_scene(family, seed).unwrap();
                // without the cube the slider fits, with it no gap is wide enough
                assert!(widest_gap(&s, 0.33, false) > 0.08 + 0.01);
                assert!(widest_gap(&s, 0.33, true) < 0.08);
            }
            for family in [2, 3] {
                // a way round exists even with the cube in place
                let s = generate_scene(family, seed).unwrap();
                assert!(widest_gap(&s, 0.33, true) > 0.08 + 0.01);
            }
        }
    }

    #[test]
    fn detour_bound_is_zero_in_open_scenes_and_positive_around_a_block() {
        let mut open = generate_scene(4, 0).unwrap();
        open.fixed.clear();
        assert_eq!(detour_lower_bound(&open).unwrap(), 0.0);
        let mut blocked = open.clone();
        let (y0, y1) = (blocked.slider.x0.y, blocked.goal.center.y);
        let yc = (y0 + y1) / 2.0;
        blocked.fixed.push(fixed_box(0.3, yc - 0.1, 0.4, yc + 0.1));
        let lb = detour_lower_bound(&blocked).unwrap();
        // oracle: around a square-cornered box grown by the inscribed radius
        // the path is at least the polyline hugging the grown corners
        // shrunk to the octagon; it must be positive and below the
        // rectangular-growth detour
        let r = 0.04;
        let a = Vector2::new(blocked.slider.x0.x, y0);
        let b = Vector2::new(blocked.goal.center.x, y1);
        let up = |c1: Vector2<f64>, c2: Vector2<f64>| (c1 - a).norm() + (c2 - c1).norm() + (b - c2).norm();
        let rect = up(Vector2::new(0.3 - r, yc + 0.1 + r), Vector2::new(0.4 + r, yc + 0.1 + r))
            .min(up(Vector2::new(0.3 - r, yc - 0.1 - r), Vector2::new(0.4 + r, yc - 0.1 - r)));
        let bare = up(Vector2::new(0.3, yc + 0.1), Vector2::new(0.4, yc + 0.1))
            .min(up(Vector2::new(0.3, yc - 0.1), Vector2::new(0.4, yc - 0.1)));
        let d = (b - a).norm();
        assert!(lb > bare - d - 1e-12, "{lb} vs {}", bare - d);
        assert!(lb < rect - d, "{lb} vs {}", rect - d);
    }

    #[test]
    fn shortest_path_around_a_square() {
        let sq = vec![
            Vector2::new(-1.0, -1.0),
            Vector2::new(1.0, -1.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(-1.0, 1.0),
        ];
        let l = shortest_path_length(Vector2::new(-2.0, 0.0), Vector2::new(2.0, 0.0), &[sq.clone()]).unwrap();
        let expected = 2.0 * 2f64.sqrt() + 2.0;
        assert!((l - expected).abs() < 1e-12);
        // grazing along an edge is allowed
        let l = shortest_path_length(Vector2::new(-2.0, 1.0), Vector2::new(2.0, 1.0), &[sq]).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
        let q = Quartiles::of(&[4.0, 1.0]).unwrap();
        assert_eq!(q.median, 2.5);
        assert!(Quartiles::of(&[]).is_none());
    }

    #[test]
    fn bench_rows_summary_and_censoring() {
        let cfg = BenchConfig {
            families: vec![4],
            seeds: vec![0, 1, 2],
            params: PlanParams {
                n_max: 30,
                ..PlanParams::default()
            },
            ablation: false,
            threads: Some(2),
        };
        let report = bench(&cfg);
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        for r in &report.rows {
            // 30 nodes cannot cover the scene
            assert!(!r.success);
            assert_eq!((r.planning_time, r.path_length), (CENSOR_TIME, CENSOR_LENGTH));
        }
        let s = report.summaries();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].trials, s[0].successes), (3, 0));
        let mut buf = Vec::new();
        write_bench_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(&BENCH_HEADER.join(",")));
        assert!(report.summary_table().lines().count() == 2);
    }

    #[test]
    fn empty_report_gives_header_only_csv() {
        let dir = tempdir().unwrap();
        emit_plots(PlotSource::Bench(&BenchReport::default()), dir.path()).unwrap();
        let trials = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        assert_eq!(trials.lines().count(), 1);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1);
    }
}
