//! Deterministic 2D rigid-body simulation.
//!
//! Bodies are discs or axis-aligned squares inside a square frame centred
//! at the origin. Integration is semi-implicit Euler with linear drag;
//! contacts are resolved impulsively on bounding circles, walls first and
//! then pairs in ascending index order.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds per rendered frame.
pub const FRAME_DT: f64 = 1.0 / 30.0;
/// Integration substeps per frame.
pub const SUBSTEPS: usize = 4;
/// Allowed residual overlap between bounding circles, meters.
pub const PENETRATION_TOLERANCE: f64 = 1e-6;
/// Placement attempts per body before `sample_initial_state` gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

const MIN_BODIES: usize = 2;
const MAX_BODIES: usize = 4;
const PROJECTION_ITERATIONS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("invalid time step {0}")]
    InvalidDt(f64),
    #[error("invalid world state: {0}")]
    InvalidState(String),
    #[error("invalid scene config `{name}`: {reason}")]
    InvalidConfig { name: String, reason: String },
    #[error("could not place body {body} without overlap after {attempts} attempts (scene config `{name}`)")]
    PlacementFailed {
        name: String,
        body: usize,
        attempts: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Square,
}

impl Shape {
    pub fn id(self) -> u8 {
        match self {
            Shape::Disc => 0,
            Shape::Square => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Shape> {
        match id {
            0 => Some(Shape::Disc),
            1 => Some(Shape::Square),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Body {
    pub shape: Shape,
    /// Disc radius or square half-extent, meters.
    pub size: f64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub mass: f64,
}

impl Body {
    /// Radius of the circle used for collisions and containment.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Disc => self.size,
            Shape::Square => self.size * SQRT_2,
        }
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.velocity.norm_sq()
    }

    /// True when the point lies inside the rendered shape (not the bounding circle).
    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.position;
        match self.shape {
            Shape::Disc => d.norm_sq() <= self.size * self.size,
            Shape::Square => d.x.abs() <= self.size && d.y.abs() <= self.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    /// Index 0 is the agent in the controlled paradigm.
    pub bodies: Vec<Body>,
    pub frame_half_extent: f64,
    /// Linear drag, 1/s.
    pub drag_coeff: f64,
    pub restitution: f64,
}

impl WorldState {
    pub fn kinetic_energy(&self) -> f64 {
        self.bodies.iter().map(Body::kinetic_energy).sum()
    }

    pub fn momentum(&self) -> Vec2 {
        self.bodies
            .iter()
            .fold(Vec2::ZERO, |acc, b| acc + b.velocity * b.mass)
    }

    /// Checks finiteness, parameter ranges, body count, containment and overlap.
    pub fn validate(&self) -> Result<(), SimError> {
        self.check_finite()?;
        if !(MIN_BODIES..=MAX_BODIES).contains(&self.bodies.len()) {
            return Err(SimError::InvalidState(format!(
                "body count {} outside [{MIN_BODIES}, {MAX_BODIES}]",
                self.bodies.len()
            )));
        }
        self.check_parameters()?;
        self.check_containment(PENETRATION_TOLERANCE)?;
        self.check_overlap(PENETRATION_TOLERANCE)
    }

    fn check_finite(&self) -> Result<(), SimError> {
        for (what, v) in [
            ("frame_half_extent", self.frame_half_extent),
            ("drag_coeff", self.drag_coeff),
            ("restitution", self.restitution),
        ] {
            if !v.is_finite() {
                return Err(SimError::NonFinite { what: what.into() });
            }
        }
        for (i, b) in self.bodies.iter().enumerate() {
            let finite = b.size.is_finite()
                && b.mass.is_finite()
                && b.position.is_finite()
                && b.velocity.is_finite();
            if !finite {
                return Err(SimError::NonFinite {
                    what: format!("body {i}"),
                });
            }
        }
        Ok(())
    }

    fn check_parameters(&self) -> Result<(), SimError> {
        if self.frame_half_extent <= 0.0 {
            return Err(SimError::InvalidState("frame_half_extent must be > 0".into()));
        }
        if self.drag_coeff < 0.0 {
            return Err(SimError::InvalidState("drag_coeff must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(SimError::InvalidState("restitution must lie in [0, 1]".into()));
        }
        for (i, b) in self.bodies.iter().enumerate() {
            if b.size <= 0.0 || b.mass <= 0.0 {
                return Err(SimError::InvalidState(format!(
                    "body {i} needs size > 0 and mass > 0"
                )));
            }
            if b.bounding_radius() >= self.frame_half_extent {
                return Err(SimError::InvalidState(format!(
                    "body {i} does not fit in the frame"
                )));
            }
        }
        Ok(())
    }

    pub fn check_containment(&self, tol: f64) -> Result<(), SimError> {
        for (i, b) in self.bodies.iter().enumerate() {
            let limit = self.frame_half_extent - b.bounding_radius() + tol;
            if b.position.x.abs() > limit || b.position.y.abs() > limit {
                return Err(SimError::InvalidState(format!(
                    "body {i} at {} leaves the frame",
                    b.position
                )));
            }
        }
        Ok(())
    }

    pub fn check_overlap(&self, tol: f64) -> Result<(), SimError> {
        for i in 0..self.bodies.len() {
            for j in i + 1..self.bodies.len() {
                let (a, b) = (&self.bodies[i], &self.bodies[j]);
                let dist = (b.position - a.position).norm();
                if dist < a.bounding_radius() + b.bounding_radius() - tol {
                    return Err(SimError::InvalidState(format!(
                        "bodies {i} and {j} overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionPush {
    /// Newtons, applied to body 0 for one frame.
    pub force: Vec2,
}

impl ActionPush {
    pub const NONE: ActionPush = ActionPush { force: Vec2::ZERO };

    pub fn new(fx: f64, fy: f64) -> Self {
        Self {
            force: Vec2::new(fx, fy),
        }
    }
}

/// Contacts that occurred during a call to [`step_with_contacts`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepContacts {
    pub wall: usize,
    pub pair: usize,
}

/// Scene sampling and physics constants for one paradigm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub name: String,
    pub body_count: usize,
    pub frame_half_extent: f64,
    /// Disc radius / square half-extent range for ordinary bodies.
    pub size_range: [f64; 2],
    pub mass_range: [f64; 2],
    /// When set, body 0 is an agent drawn from this size range.
    pub agent_size_range: Option<[f64; 2]>,
    pub drag_coeff: f64,
    pub restitution: f64,
    /// Magnitude range of the initial impulse (uncontrolled) or per-step push (controlled), N.
    pub force_range: [f64; 2],
}

impl SceneConfig {
    pub fn uncontrolled_default() -> Self {
        Self {
            name: "uncontrolled".into(),
            body_count: 2,
            frame_half_extent: 1.0,
            size_range: [0.12, 0.25],
            mass_range: [0.5, 2.0],
            agent_size_range: None,
            drag_coeff: 0.2,
            restitution: 0.9,
            force_range: [20.0, 60.0],
        }
    }

    pub fn controlled_default() -> Self {
        Self {
            name: "controlled".into(),
            body_count: 3,
            frame_half_extent: 1.0,
            size_range: [0.15, 0.25],
            mass_range: [0.5, 1.5],
            agent_size_range: Some([0.12, 0.16]),
            drag_coeff: 60.0,
            restitution: 0.2,
            force_range: [0.0, 600.0],
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> SimError {
        SimError::InvalidConfig {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(MIN_BODIES..=MAX_BODIES).contains(&self.body_count) {
            return Err(self.invalid(format!(
                "body_count {} outside [{MIN_BODIES}, {MAX_BODIES}]",
                self.body_count
            )));
        }
        let range_ok = |r: [f64; 2], allow_zero: bool| {
            r[0].is_finite()
                && r[1].is_finite()
                && r[0] <= r[1]
                && if allow_zero { r[0] >= 0.0 } else { r[0] > 0.0 }
        };
        if !range_ok(self.size_range, false) {
            return Err(self.invalid("size_range must be positive and ordered"));
        }
        if !range_ok(self.mass_range, false) {
            return Err(self.invalid("mass_range must be positive and ordered"));
        }
        if let Some(r) = self.agent_size_range {
            if !range_ok(r, false) {
                return Err(self.invalid("agent_size_range must be positive and ordered"));
            }
        }
        if !range_ok(self.force_range, true) {
            return Err(self.invalid("force_range must be non-negative and ordered"));
        }
        if !(self.frame_half_extent.is_finite() && self.frame_half_extent > 0.0) {
            return Err(self.invalid("frame_half_extent must be > 0"));
        }
        let max_radius = self.size_range[1].max(self.agent_size_range.map_or(0.0, |r| r[1])) * SQRT_2;
        if max_radius >= self.frame_half_extent {
            return Err(self.invalid("largest body does not fit in the frame"));
        }
        if !(self.drag_coeff >= 0.0 && self.drag_coeff * FRAME_DT / SUBSTEPS as f64 <= 1.0) {
            return Err(self.invalid("drag_coeff must satisfy 0 <= drag * substep_dt <= 1"));
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(self.invalid("restitution must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Advances the world by `dt` seconds split into [`SUBSTEPS`] substeps.
pub fn step(state: &WorldState, action: Option<&ActionPush>, dt: f64) -> Result<WorldState, SimError> {
    step_with_contacts(state, action, dt).map(|(s, _)| s)
}

/// Like [`step`], also reporting which contacts were resolved.
pub fn step_with_contacts(
    state: &WorldState,
    action: Option<&ActionPush>,
    dt: f64,
) -> Result<(WorldState, StepContacts), SimError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::InvalidDt(dt));
    }
    state.check_finite()?;
    if let Some(a) = action {
        if !a.force.is_finite() {
            return Err(SimError::NonFinite {
                what: "action force".into(),
            });
        }
    }
    if state.bodies.is_empty() {
        return Err(SimError::InvalidState("no bodies".into()));
    }
    state.check_parameters()?;

    let h = dt / SUBSTEPS as f64;
    let damping = 1.0 - state.drag_coeff * h;
    if damping < 0.0 {
        return Err(SimError::InvalidState(format!(
            "drag {} too large for substep {h}",
            state.drag_coeff
        )));
    }
    let mut next = state.clone();
    let mut contacts = StepContacts::default();
    for _ in 0..SUBSTEPS {
        for (i, body) in next.bodies.iter_mut().enumerate() {
            let accel = match action {
                Some(a) if i == 0 => a.force * (1.0 / body.mass),
                _ => Vec2::ZERO,
            };
            body.velocity = (body.velocity + accel * h) * damping;
            body.position += body.velocity * h;
        }
        resolve_contacts(&mut next, &mut contacts);
    }
    next.check_finite()?;
    Ok((next, contacts))
}

fn resolve_contacts(state: &mut WorldState, contacts: &mut StepContacts) {
    let e = state.restitution;
    let extent = state.frame_half_extent;
    for _ in 0..PROJECTION_ITERATIONS {
        let mut touched = false;
        for body in state.bodies.iter_mut() {
            if resolve_wall(body, extent, e) {
                contacts.wall += 1;
                touched = true;
            }
        }
        let n = state.bodies.len();
        for i in 0..n {
            for j in i + 1..n {
                let (head, tail) = state.bodies.split_at_mut(j);
                if resolve_pair(&mut head[i], &mut tail[0], e) {
                    contacts.pair += 1;
                    touched = true;
                }
            }
        }
        if !touched {
            return;
        }
    }
    // Jammed configuration: containment takes precedence.
    for body in state.bodies.iter_mut() {
        if resolve_wall(body, extent, e) {
            contacts.wall += 1;
        }
    }
}

fn resolve_wall(body: &mut Body, extent: f64, restitution: f64) -> bool {
    let limit = extent - body.bounding_radius();
    let mut hit = false;
    for (pos, vel) in [
        (&mut body.position.x, &mut body.velocity.x),
        (&mut body.position.y, &mut body.velocity.y),
    ] {
        if *pos > limit {
            *pos = limit;
            if *vel > 0.0 {
                *vel = -restitution * *vel;
            }
            hit = true;
        } else if *pos < -limit {
            *pos = -limit;
            if *vel < 0.0 {
                *vel = -restitution * *vel;
            }
            hit = true;
        }
    }
    hit
}

fn resolve_pair(a: &mut Body, b: &mut Body, restitution: f64) -> bool {
    let delta = b.position - a.position;
    let dist = delta.norm();
    let overlap = a.bounding_radius() + b.bounding_radius() - dist;
    if overlap <= 0.0 {
        return false;
    }
    let normal = if dist > 0.0 {
        delta * (1.0 / dist)
    } else {
        Vec2::new(1.0, 0.0)
    };
    let total = a.mass + b.mass;
    a.position -= normal * (overlap * b.mass / total);
    b.position += normal * (overlap * a.mass / total);

    let approach = (b.velocity - a.velocity).dot(normal);
    if approach < 0.0 {
        let j = -(1.0 + restitution) * approach / (1.0 / a.mass + 1.0 / b.mass);
        a.velocity -= normal * (j / a.mass);
        b.velocity += normal * (j / b.mass);
    }
    true
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Samples bodies at rest, placed one at a time by rejection against earlier bodies.
///
/// Body 0's position is uniform over its allowed square; later bodies are
/// uniform conditioned on not overlapping earlier ones. Sizes and masses are
/// independent uniforms over the configured ranges.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<WorldState, SimError> {
    config.validate()?;
    let mut bodies: Vec<Body> = Vec::with_capacity(config.body_count);
    for i in 0..config.body_count {
        let size_range = match (i, config.agent_size_range) {
            (0, Some(r)) => r,
            _ => config.size_range,
        };
        let shape = if rng.random_bool(0.5) {
            Shape::Disc
        } else {
            Shape::Square
        };
        let size = uniform(rng, size_range);
        let mass = uniform(rng, config.mass_range);
        let mut body = Body {
            shape,
            size,
            position: Vec2::ZERO,
            velocity: Vec2::ZERO,
            mass,
        };
        let limit = config.frame_half_extent - body.bounding_radius();
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            body.position = Vec2::new(
                rng.random_range(-limit..limit),
                rng.random_range(-limit..limit),
            );
            let clear = bodies.iter().all(|other| {
                (other.position - body.position).norm()
                    >= other.bounding_radius() + body.bounding_radius()
            });
            if clear {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SimError::PlacementFailed {
                name: config.name.clone(),
                body: i,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
        bodies.push(body);
    }
    Ok(WorldState {
        bodies,
        frame_half_extent: config.frame_half_extent,
        drag_coeff: config.drag_coeff,
        restitution: config.restitution,
    })
}

/// A push with direction uniform on the circle and magnitude uniform in `force_range`.
pub fn sample_initial_impulse<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<ActionPush, SimError> {
    config.validate()?;
    Ok(sample_push(rng, config.force_range))
}

pub fn sample_push<R: Rng + ?Sized>(rng: &mut R, magnitude_range: [f64; 2]) -> ActionPush {
    let angle = rng.random_range(0.0..2.0 * PI);
    let magnitude = uniform(rng, magnitude_range);
    ActionPush::new(magnitude * angle.cos(), magnitude * angle.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(x: f64, y: f64, vx: f64, vy: f64) -> Body {
        Body {
            shape: Shape::Disc,
            size: 0.1,
            position: Vec2::new(x, y),
            velocity: Vec2::new(vx, vy),
            mass: 1.0,
        }
    }

    fn world(bodies: Vec<Body>, drag: f64, restitution: f64) -> WorldState {
        WorldState {
            bodies,
            frame_half_extent: 1.0,
            drag_coeff: drag,
            restitution,
        }
    }

    #[test]
    fn resting_disc_is_a_fixed_point() {
        let s = world(vec![disc(0.3, -0.2, 0.0, 0.0), disc(-0.5, 0.5, 0.0, 0.0)], 0.5, 0.9);
        let next = step(&s, None, FRAME_DT).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn free_flight_is_semi_implicit_euler() {
        let s = world(vec![disc(0.0, 0.0, 1.0, 0.0), disc(0.0, 0.7, 0.0, 0.0)], 0.0, 1.0);
        let next = step(&s, None, 0.1).unwrap();
        assert!((next.bodies[0].position.x - 0.1).abs() < 1e-12);
        assert_eq!(next.bodies[0].position.y, 0.0);
        assert_eq!(next.bodies[0].velocity, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn head_on_elastic_collision_exchanges_velocities() {
        let s = world(vec![disc(-0.105, 0.0, 2.0, 0.0), disc(0.105, 0.0, -1.0, 0.0)], 0.0, 1.0);
        let (next, contacts) = step_with_contacts(&s, None, FRAME_DT).unwrap();
        assert!(contacts.pair > 0);
        assert_eq!(contacts.wall, 0);
        assert!((next.bodies[0].velocity.x - -1.0).abs() < 1e-12);
        assert!((next.bodies[1].velocity.x - 2.0).abs() < 1e-12);
        let (p0, p1) = (s.momentum(), next.momentum());
        assert!((p0 - p1).norm() < 1e-9);
        assert!((s.kinetic_energy() - next.kinetic_energy()).abs() < 1e-9);
    }

    #[test]
    fn wall_bounce_scales_normal_speed_by_restitution() {
        // Disc starts touching distance from the right wall, moving into it.
        let v = 3.0;
        let s = world(vec![disc(0.89, 0.0, v, 0.5), disc(-0.5, 0.0, 0.0, 0.0)], 0.0, 0.8);
        let (next, contacts) = step_with_contacts(&s, None, FRAME_DT).unwrap();
        assert!(contacts.wall > 0);
        assert!((next.bodies[0].velocity.x - -0.8 * v).abs() < 1e-12);
        assert_eq!(next.bodies[0].velocity.y, 0.5);
        next.check_containment(0.0).unwrap();
    }

    #[test]
    fn action_accelerates_only_the_agent() {
        let s = world(vec![disc(0.0, 0.0, 0.0, 0.0), disc(0.6, 0.6, 0.0, 0.0)], 0.0, 1.0);
        let next = step(&s, Some(&ActionPush::new(3.0, 0.0)), FRAME_DT).unwrap();
        assert!((next.bodies[0].velocity.x - 3.0 * FRAME_DT).abs() < 1e-12);
        assert_eq!(next.bodies[1], s.bodies[1]);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut s = world(vec![disc(0.0, 0.0, 0.0, 0.0), disc(0.5, 0.5, 0.0, 0.0)], 0.0, 1.0);
        assert!(matches!(
            step(&s, Some(&ActionPush::new(f64::NAN, 0.0)), FRAME_DT),
            Err(SimError::NonFinite { .. })
        ));
        s.bodies[1].velocity.x = f64::INFINITY;
        assert!(matches!(step(&s, None, FRAME_DT), Err(SimError::NonFinite { .. })));
        assert!(matches!(step(&s, None, 0.0), Err(SimError::InvalidDt(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        for cfg in [SceneConfig::uncontrolled_default(), SceneConfig::controlled_default()] {
            let a = sample_initial_state(&mut ChaCha8Rng::seed_from_u64(11), &cfg).unwrap();
            let b = sample_initial_state(&mut ChaCha8Rng::seed_from_u64(11), &cfg).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.bodies.len(), cfg.body_count);
        }
    }

    #[test]
    fn zero_width_size_range_gives_exact_size() {
        let mut cfg = SceneConfig::uncontrolled_default();
        cfg.size_range = [0.2, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = sample_initial_state(&mut rng, &cfg).unwrap();
            assert!(s.bodies.iter().all(|b| b.size == 0.2));
        }
    }

    #[test]
    fn impossible_placement_names_the_config() {
        let mut cfg = SceneConfig::uncontrolled_default();
        cfg.body_count = 4;
        cfg.size_range = [0.6, 0.6];
        cfg.frame_half_extent = 0.9;
        let err = sample_initial_state(&mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap_err();
        assert!(err.to_string().contains("uncontrolled"), "{err}");
        assert!(matches!(err, SimError::PlacementFailed { .. }));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = SceneConfig::uncontrolled_default();
        cfg.mass_range = [2.0, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::uncontrolled_default();
        cfg.force_range = [-1.0, 1.0];
        assert!(sample_initial_impulse(&mut ChaCha8Rng::seed_from_u64(0), &cfg).is_err());
    }

    #[test]
    fn fixed_magnitude_impulses() {
        let mut cfg = SceneConfig::uncontrolled_default();
        cfg.force_range = [7.5, 7.5];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = sample_initial_impulse(&mut rng, &cfg).unwrap();
            assert!((a.force.norm() - 7.5).abs() < 1e-12);
        }
        let a = sample_initial_impulse(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let b = sample_initial_impulse(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn square_bounding_radius() {
        let b = Body {
            shape: Shape::Square,
            size: 0.1,
            position: Vec2::ZERO,
            velocity: Vec2::ZERO,
            mass: 1.0,
        };
        assert!((b.bounding_radius() - 0.1 * SQRT_2).abs() < 1e-15);
        assert!(b.contains(Vec2::new(0.099, -0.099)));
        assert!(!b.contains(Vec2::new(0.101, 0.0)));
    }
}
