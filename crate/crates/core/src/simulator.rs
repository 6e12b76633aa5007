//! Quasi-static closed-loop plant.
//!
//! Unlike the planner's one-way interaction model, obstacles push back: the
//! contact force on each pushed movable is applied to the slider negated and
//! mapped through the limit surface. Integration is the explicit midpoint
//! rule, a deliberate mismatch with the planner's RK4.

use nalgebra::{Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{eval_on_face, PusherInput, SliderModel, SliderState};
use crate::error::{Error, Result};
use crate::geom2d::{polygon_collide, Pose2};
use crate::interaction::{resolve_push, separate_pushed, Obstacle, PENETRATION_LIMIT};

/// Largest plant step.
pub const MAX_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub t_start: f64,
    pub t_end: f64,
    /// State-rate disturbance; the contact-azimuth component must be 0.
    pub d: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    pub entries: Vec<Disturbance>,
}

impl DisturbanceSchedule {
    pub fn new(entries: Vec<Disturbance>) -> Result<Self> {
        for e in &entries {
            if !(e.t_end >= e.t_start) {
                return Err(Error::InvalidConfig("disturbance ends before it starts".into()));
            }
            if e.d[3] != 0.0 {
                return Err(Error::InvalidConfig("disturbance cannot act on the contact azimuth".into()));
            }
        }
        Ok(Self { entries })
    }

    /// Sum of the disturbances active at `t` (half-open intervals).
    pub fn at(&self, t: f64) -> Vector4<f64> {
        self.entries
            .iter()
            .filter(|e| t >= e.t_start && t < e.t_end)
            .fold(Vector4::zeros(), |acc, e| acc + Vector4::from(e.d))
    }

    /// Whether any disturbance is active at `t`.
    pub fn active(&self, t: f64) -> bool {
        self.entries.iter().any(|e| t >= e.t_start && t < e.t_end)
    }
}

impl Disturbance {
    /// Disturbance from a constant global force on the slider's origin,
    /// mapped through the limit surface at orientation `theta`.
    pub fn from_force(model: &SliderModel<f64>, theta: f64, force: Vector2<f64>, t_start: f64, t_end: f64) -> Self {
        let v = reaction_twist(model, theta, &Vector3::new(force.x, force.y, 0.0));
        Self {
            t_start,
            t_end,
            d: [v[0], v[1], v[2], 0.0],
        }
    }
}

/// Static part of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub model: SliderModel<f64>,
    /// Movable obstacles at their initial poses.
    pub movables: Vec<Obstacle<f64>>,
    pub fixed: Vec<Obstacle<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    FixedContact,
    Penetration,
    Lcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub slider: SliderState<f64>,
    pub movables: Vec<Pose2<f64>>,
    pub time: f64,
    pub fault: Option<Fault>,
}

impl WorldState {
    pub fn initial(world: &World, slider: SliderState<f64>) -> Self {
        Self {
            slider,
            movables: world.movables.iter().map(|m| m.pose).collect(),
            time: 0.0,
            fault: None,
        }
    }
}

/// What a step did besides moving the world.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    /// Global wrench `[f_x, f_y, m]` on the slider about its origin.
    pub reaction: Vector3<f64>,
    /// Global contact point and force applied by the slider, per contact.
    pub contacts: Vec<(Vector2<f64>, Vector2<f64>)>,
}

/// Global twist perturbation of the slider under a global wrench about its
/// origin.
fn reaction_twist(model: &SliderModel<f64>, theta: f64, wrench: &Vector3<f64>) -> Vector3<f64> {
    let r = crate::geom2d::rotation_matrix(theta);
    r * (model.limit * (r.transpose() * wrench))
}

/// Advances the world by `dt` under `u`.
///
/// Contacts are resolved once at the start of the step against the
/// disturbed nominal slider twist; the reaction is held over the step.
pub fn step(
    world: &World,
    state: &WorldState,
    u: &PusherInput<f64>,
    dt: f64,
    schedule: &DisturbanceSchedule,
) -> Result<(WorldState, StepInfo)> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(Error::InvalidConfig(format!("plant step {dt} outside (0, {MAX_STEP}]")));
    }
    if state.fault.is_some() {
        return Ok((state.clone(), StepInfo::default()));
    }
    let model = &world.model;
    let face = model.face_of(state.slider.psi_c);
    let d = schedule.at(state.time);
    let x = state.slider;
    let nominal = eval_on_face(model, face, &x, u) + d;
    let v_s = Vector3::new(nominal[0], nominal[1], nominal[2]);

    let mut next = state.clone();
    next.time = state.time + dt;
    let Some(res) = resolve_push(&model.footprint, &x.pose, &v_s, &world.movables, &state.movables, dt) else {
        next.fault = Some(Fault::Lcp);
        return Ok((next, StepInfo::default()));
    };
    let mut reaction = Vector3::zeros();
    for (p, f) in &res.forces {
        let r = p - x.pose.translation();
        reaction -= Vector3::new(f.x, f.y, r.x * f.y - r.y * f.x);
    }
    let dv = reaction_twist(model, x.pose.theta, &reaction);
    let extra = Vector4::new(dv[0], dv[1], dv[2], 0.0) + d;

    let k1 = eval_on_face(model, face, &x, u) + extra;
    let mid = x.advanced(&(k1 * (dt / 2.0)));
    let k2 = eval_on_face(model, face, &mid, u) + extra;
    next.slider = x.advanced(&(k2 * dt));

    for (j, t) in res.twists.iter().enumerate() {
        if let Some(v) = t {
            next.movables[j] = state.movables[j].displaced(&(v * dt));
        }
    }
    separate_pushed(&model.footprint, &next.slider.pose, &world.movables, &mut next.movables, &res.twists);

    let limit = PENETRATION_LIMIT;
    for f in &world.fixed {
        if polygon_collide(&model.footprint, &next.slider.pose, &f.model.footprint, &f.pose).depth > limit {
            next.fault = Some(Fault::FixedContact);
        }
        for (j, m) in world.movables.iter().enumerate() {
            if polygon_collide(&m.model.footprint, &next.movables[j], &f.model.footprint, &f.pose).depth > limit {
                next.fault = Some(Fault::FixedContact);
            }
        }
    }
    if next.fault.is_none() {
        for (j, m) in world.movables.iter().enumerate() {
            if polygon_collide(&model.footprint, &next.slider.pose, &m.model.footprint, &next.movables[j]).depth > limit {
                next.fault = Some(Fault::Penetration);
            }
        }
    }
    Ok((
        next,
        StepInfo {
            reaction,
            contacts: res.forces,
        },
    ))
}

/// A policy's decision for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub input: PusherInput<f64>,
    /// Re-seat the pusher at this azimuth before the step (face switch).
    pub psi_reset: Option<f64>,
}

impl Action {
    pub fn push(input: PusherInput<f64>) -> Self {
        Self { input, psi_reset: None }
    }
}

pub trait Policy {
    fn act(&mut self, state: &WorldState) -> Action;
}

/// Replays a fixed input sequence, then applies zero input.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub actions: Vec<Action>,
    next: usize,
}

impl Script {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Policy for Script {
    fn act(&mut self, _state: &WorldState) -> Action {
        let a = self.actions.get(self.next).copied().unwrap_or(Action::push(PusherInput::zero()));
        self.next += 1;
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub state: WorldState,
    pub action: Action,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub initial: WorldState,
    /// One record per step; each holds the state after the step.
    pub records: Vec<EpisodeRecord>,
    pub fault: Option<Fault>,
}

impl EpisodeLog {
    pub fn final_state(&self) -> &WorldState {
        self.records.last().map_or(&self.initial, |r| &r.state)
    }
}

/// Runs `policy` at a fixed rate for `duration`. A fault ends the episode
/// after the faulted step is logged.
pub fn run_episode(
    world: &World,
    initial: WorldState,
    policy: &mut dyn Policy,
    duration: f64,
    dt: f64,
    schedule: &DisturbanceSchedule,
) -> Result<EpisodeLog> {
    let steps = (duration / dt).round() as usize;
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = policy.act(&state);
        if let Some(psi) = action.psi_reset {
            state.slider = state.slider.with_psi(psi);
        }
        let (next, info) = step(world, &state, &action.input, dt, schedule)?;
        state = next;
        let fault = state.fault;
        records.push(EpisodeRecord {
            state: state.clone(),
            action,
            info,
        });
        if fault.is_some() {
            break;
        }
    }
    Ok(EpisodeLog {
        initial,
        fault: state.fault,
        records,
    })
}
