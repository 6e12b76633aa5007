//! Contact-aware RRT over slider states and planning scenes.
//!
//! Each node holds a slider state and the movable-obstacle poses that go with
//! it. Extensions pick the nearest reachable-set cell over the whole tree,
//! steer from the cell's generating state with LQR, and replay the rollout
//! through the interaction model against the generating node's scene.

use std::time::Instant;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connect::{connect, connect_goal, weighted_distance, CellChoice, ConnectionResult, GoalRegion, LqrConfig};
use crate::dynamics::{PusherInput, SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::{ConvexPolygon, Pose2};
use crate::interaction::{simulate_interaction, Obstacle};
use crate::reachset::{build_reachable_set, default_weights, nearest_neighbor, ReachableSet};
use crate::scalar::wrap_angle;

/// Extensions ending this close (weighted) to a node with the same scene are
/// dropped.
pub const DUPLICATE_DISTANCE: f64 = 1e-4;

/// Axis-aligned workspace rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_footprint(&self, fp: &ConvexPolygon<f64>, pose: &Pose2<f64>) -> bool {
        fp.vertices().iter().all(|v| {
            let p = pose.transform_point(v);
            self.contains_point(p.x, p.y)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub tau: f64,
    pub tau_lqr: f64,
    pub n_max: usize,
    pub goal_bias: f64,
    pub seed: u64,
    /// Wall-clock budget in seconds.
    pub time_budget: f64,
    /// Samples drawn before giving up, whether or not they add nodes.
    pub max_iterations: usize,
    /// With `false` every movable obstacle is treated as fixed.
    pub contact: bool,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tau_lqr: 0.01,
            n_max: 1000,
            goal_bias: 0.1,
            seed: 0,
            time_budget: 1e3,
            max_iterations: 10_000,
            contact: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTask {
    pub model: SliderModel<f64>,
    pub workspace: Workspace,
    pub movables: Vec<Obstacle<f64>>,
    pub fixed: Vec<Obstacle<f64>>,
    pub x0: SliderState<f64>,
    pub goal: GoalRegion<f64>,
    pub params: PlanParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub id: usize,
    pub state: SliderState<f64>,
    /// Controls from the parent; empty at the root.
    pub incoming_controls: Vec<PusherInput<f64>>,
    /// Connection rollout from the (re-seated) parent state to `state`.
    pub rollout: Vec<SliderState<f64>>,
    pub parent: Option<usize>,
    /// Movable-obstacle poses paired with this node.
    pub scene: Vec<Pose2<f64>>,
    /// The incoming connection starts on a different face than the parent's.
    pub face_switch: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tree {
    pub nodes: Vec<PlanNode>,
    reachable: Vec<ReachableSet<f64>>,
}

impl Tree {
    pub fn new(root: SliderState<f64>, scene: Vec<Pose2<f64>>) -> Self {
        Self {
            nodes: vec![PlanNode {
                id: 0,
                state: root,
                incoming_controls: vec![],
                rollout: vec![root],
                parent: None,
                scene,
                face_switch: false,
            }],
            reachable: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut node: PlanNode) -> usize {
        node.id = self.nodes.len();
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn ensure_reachable(&mut self, model: &SliderModel<f64>, tau: f64) {
        for node in &self.nodes[self.reachable.len()..] {
            self.reachable.push(build_reachable_set(model, &node.state, tau));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// Fixed-obstacle contact, penetration, LCP failure or leaving the workspace.
    Infeasible,
    Duplicate,
    /// The connection pushed the contact off its face.
    FaceExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendOutcome {
    Added(usize),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub nodes_in_tree: usize,
    pub iterations: usize,
    pub wall_time: f64,
    pub path_length_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub success: bool,
    pub controls: Vec<PusherInput<f64>>,
    /// Dense slider path, `controls.len() + 1` states. Before control `k`
    /// the pusher may be re-seated (see `reseats`), so `states[k].psi_c` is
    /// the azimuth before any re-seat.
    pub states: Vec<SliderState<f64>>,
    /// `(k, psi)`: re-seat the pusher at `psi` before applying control `k`.
    pub reseats: Vec<(usize, f64)>,
    /// Control indices where the contact face changes.
    pub face_switch_steps: Vec<usize>,
    /// Node ids from the root to the goal node.
    pub node_path: Vec<usize>,
    pub scenes_along_path: Vec<Vec<Pose2<f64>>>,
    pub stats: PlanStats,
}

/// Tree-independent planning context.
pub struct Planner<'a> {
    pub task: &'a PlanTask,
    lqr: LqrConfig<f64>,
    weights: Vector4<f64>,
    movables: Vec<Obstacle<f64>>,
    fixed: Vec<Obstacle<f64>>,
}

impl<'a> Planner<'a> {
    pub fn new(task: &'a PlanTask) -> Result<Self> {
        let p = &task.params;
        if !(p.tau > 0.0 && p.tau_lqr > 0.0) || !(0.0..=1.0).contains(&p.goal_bias) || p.n_max == 0 {
            return Err(Error::InvalidConfig("invalid planner parameters".into()));
        }
        let lqr = LqrConfig::for_model(&task.model, p.tau, p.tau_lqr)?;
        let (movables, fixed) = if p.contact {
            (task.movables.clone(), task.fixed.clone())
        } else {
            let mut fixed = task.fixed.clone();
            fixed.extend(task.movables.iter().cloned());
            (vec![], fixed)
        };
        Ok(Self {
            task,
            lqr,
            weights: default_weights(),
            movables,
            fixed,
        })
    }

    /// Movable poses at the start of the task.
    pub fn initial_scene(&self) -> Vec<Pose2<f64>> {
        self.movables.iter().map(|m| m.pose).collect()
    }

    /// Goal center with probability `goal_bias` (uniform contact azimuth),
    /// otherwise uniform over workspace, orientation and azimuth.
    pub fn sample_state(&self, rng: &mut ChaCha8Rng) -> SliderState<f64> {
        let pi = std::f64::consts::PI;
        if rng.gen::<f64>() < self.task.params.goal_bias {
            let g = self.task.goal.center;
            return SliderState::new(g.x, g.y, g.theta, rng.gen_range(-pi..pi));
        }
        let w = &self.task.workspace;
        SliderState::new(
            rng.gen_range(w.x_min..w.x_max),
            rng.gen_range(w.y_min..w.y_max),
            rng.gen_range(-pi..pi),
            rng.gen_range(-pi..pi),
        )
    }

    /// Replays a rollout from `scene`; `None` if infeasible.
    fn replay(&self, rollout: &[SliderState<f64>], scene: &[Pose2<f64>]) -> Option<Vec<Pose2<f64>>> {
        let t = self.task;
        if !rollout.iter().all(|s| t.workspace.contains_footprint(&t.model.footprint, &s.pose)) {
            return None;
        }
        let movables: Vec<Obstacle<f64>> = self
            .movables
            .iter()
            .zip(scene)
            .map(|(m, p)| Obstacle {
                model: m.model.clone(),
                pose: *p,
            })
            .collect();
        let out = simulate_interaction(&t.model, rollout, &movables, &self.fixed, self.task.params.tau_lqr).ok()?;
        out.feasible.then_some(out.movable_poses)
    }

    fn is_duplicate(&self, tree: &Tree, x: &SliderState<f64>, scene: &[Pose2<f64>]) -> bool {
        tree.nodes
            .iter()
            .any(|n| n.scene == scene && weighted_distance(&n.state, x, &self.weights) <= DUPLICATE_DISTANCE)
    }

    /// One extension toward `x_new`.
    pub fn extend(&self, tree: &mut Tree, x_new: &SliderState<f64>) -> Result<ExtendOutcome> {
        let model = &self.task.model;
        tree.ensure_reachable(model, self.task.params.tau);
        let nn = nearest_neighbor(&tree.reachable, x_new, &self.weights)?;
        let parent = &tree.nodes[nn.node];
        let parent_face = model.face_of(parent.state.psi_c);
        let face_switch = nn.face != parent_face;
        let psi_start = if face_switch {
            model.footprint.face_center_azimuth(nn.face)
        } else {
            parent.state.psi_c
        };
        let cell = CellChoice {
            face: nn.face,
            mode: nn.mode,
            psi_star: psi_start,
        };
        let conn = match connect(model, &parent.state, &nn.x_near, &cell, &self.lqr) {
            Ok(c) => c,
            Err(Error::FaceExit { .. }) => return Ok(ExtendOutcome::Rejected(RejectReason::FaceExit)),
            Err(e) => return Err(e),
        };
        let Some(scene) = self.replay(&conn.states, &parent.scene) else {
            return Ok(ExtendOutcome::Rejected(RejectReason::Infeasible));
        };
        if self.is_duplicate(tree, &conn.x_term, &scene) {
            return Ok(ExtendOutcome::Rejected(RejectReason::Duplicate));
        }
        Ok(ExtendOutcome::Added(self.add(tree, nn.node, conn, scene, face_switch)))
    }

    fn add(&self, tree: &mut Tree, parent: usize, conn: ConnectionResult<f64>, scene: Vec<Pose2<f64>>, face_switch: bool) -> usize {
        tree.push(PlanNode {
            id: 0,
            state: conn.x_term,
            incoming_controls: conn.controls,
            rollout: conn.states,
            parent: Some(parent),
            scene,
            face_switch,
        })
    }

    /// Tries to finish from `node`; adds the goal node on success.
    fn try_goal(&self, tree: &mut Tree, node: usize) -> Result<Option<usize>> {
        let n = &tree.nodes[node];
        let conn = match connect_goal(&self.task.model, &n.state, &self.task.goal, &self.lqr) {
            Ok(c) => c,
            Err(Error::FaceExit { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !conn.reached {
            return Ok(None);
        }
        let Some(scene) = self.replay(&conn.states, &n.scene) else {
            return Ok(None);
        };
        Ok(Some(self.add(tree, node, conn, scene, false)))
    }

    pub fn plan(&self) -> Result<(PlanResult, Tree)> {
        let start = Instant::now();
        let p = &self.task.params;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut tree = Tree::new(self.task.x0, self.initial_scene());
        let mut iterations = 0;
        let mut goal_node = self.task.goal.contains(&self.task.x0.pose).then_some(0);
        while goal_node.is_none()
            && tree.len() < p.n_max
            && iterations < p.max_iterations
            && start.elapsed().as_secs_f64() < p.time_budget
        {
            iterations += 1;
            let x_new = self.sample_state(&mut rng);
            if let ExtendOutcome::Added(id) = self.extend(&mut tree, &x_new)? {
                if tree.len() < p.n_max {
                    goal_node = self.try_goal(&mut tree, id)?;
                }
            }
        }
        let wall_time = start.elapsed().as_secs_f64();
        let mut result = match goal_node {
            Some(g) => extract_path(&tree, g, &self.task.model)?,
            None => PlanResult {
                success: false,
                controls: vec![],
                states: vec![],
                reseats: vec![],
                face_switch_steps: vec![],
                node_path: vec![],
                scenes_along_path: vec![],
                stats: PlanStats {
                    nodes_in_tree: 0,
                    iterations: 0,
                    wall_time: 0.0,
                    path_length_m: 0.0,
                },
            },
        };
        result.success = goal_node.is_some();
        result.stats.nodes_in_tree = tree.len();
        result.stats.iterations = iterations;
        result.stats.wall_time = wall_time;
        Ok((result, tree))
    }
}

/// Runs the planner on `task`.
pub fn plan(task: &PlanTask) -> Result<PlanResult> {
    Ok(Planner::new(task)?.plan()?.0)
}

/// Root-to-`goal` path with dense states and controls.
pub fn extract_path(tree: &Tree, goal: usize, model: &SliderModel<f64>) -> Result<PlanResult> {
    if goal >= tree.len() {
        return Err(Error::NodeNotInTree(goal));
    }
    let mut ids = vec![goal];
    while let Some(p) = tree.nodes[*ids.last().unwrap()].parent {
        ids.push(p);
    }
    ids.reverse();
    let root = &tree.nodes[ids[0]];
    let mut states = vec![root.state];
    let mut controls = Vec::new();
    let mut reseats = Vec::new();
    let mut face_switch_steps = Vec::new();
    for &id in &ids[1..] {
        let n = &tree.nodes[id];
        let k = controls.len();
        let prev = *states.last().unwrap();
        let seat = n.rollout[0].psi_c;
        if seat != prev.psi_c {
            reseats.push((k, seat));
        }
        if model.face_of(seat) != model.face_of(prev.psi_c) {
            face_switch_steps.push(k);
        }
        controls.extend_from_slice(&n.incoming_controls);
        states.extend_from_slice(&n.rollout[1..]);
    }
    let path_length_m = states
        .windows(2)
        .map(|w| ((w[1].pose.x - w[0].pose.x).powi(2) + (w[1].pose.y - w[0].pose.y).powi(2)).sqrt())
        .sum();
    Ok(PlanResult {
        success: true,
        controls,
        states,
        reseats,
        face_switch_steps,
        scenes_along_path: ids.iter().map(|&i| tree.nodes[i].scene.clone()).collect(),
        node_path: ids,
        stats: PlanStats {
            nodes_in_tree: tree.len(),
            iterations: 0,
            wall_time: 0.0,
            path_length_m,
        },
    })
}

/// Dense slider state at time `t` along a plan sampled every `dt`, linearly
/// interpolated; angles interpolate along the short arc.
pub fn state_at(plan: &PlanResult, dt: f64, t: f64) -> SliderState<f64> {
    let n = plan.states.len();
    if n == 0 {
        panic!("empty plan");
    }
    let s = (t / dt).max(0.0);
    let k = (s.floor() as usize).min(n - 1);
    if k + 1 >= n {
        return plan.states[n - 1];
    }
    let a = plan.states[k];
    let mut b = plan.states[k + 1];
    // interpolate the contact azimuth from the re-seated value
    let mut a_psi = a.psi_c;
    if let Some((_, psi)) = plan.reseats.iter().find(|(j, _)| *j == k) {
        a_psi = *psi;
    }
    let f = s - k as f64;
    let d = b.difference(&a);
    b = SliderState::new(
        a.pose.x + d[0] * f,
        a.pose.y + d[1] * f,
        a.pose.theta + d[2] * f,
        a_psi + wrap_angle(b.psi_c - a_psi) * f,
    );
    b
}
