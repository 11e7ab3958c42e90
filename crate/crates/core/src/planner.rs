//! Greedy one-step model-predictive control in latent space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, Summary};
use crate::renderer::{self, DomainParams, Observation, RenderError, TextureFamily};
use crate::training::{Model, TrainError};
use crate::worldsim::{self, ActionPush, SceneConfig, SimError, WorldState};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("planner config: {0}")]
    Config(String),
    #[error("latent dimension {got}, goal has {expected}")]
    Dimension { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// Latent distance between a predicted latent and the goal. Both forms are
/// strictly monotone in each other, so they select the same candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanDistance {
    L2,
    SquaredL2,
}

impl PlanDistance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            PlanDistance::L2 => sq.sqrt(),
            PlanDistance::SquaredL2 => sq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub candidates: usize,
    pub max_steps: usize,
    /// An episode counts as solved once object_distance to the goal is at most this (m).
    pub goal_tolerance: f64,
    /// Push magnitude range of sampled candidates (N).
    pub force_range: [f64; 2],
    pub distance: PlanDistance,
    /// Random pushes applied to the initial state to produce the goal state.
    pub goal_steps: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            candidates: 1000,
            max_steps: 10,
            goal_tolerance: 0.05,
            force_range: SceneConfig::controlled_default().force_range,
            distance: PlanDistance::L2,
            goal_steps: 5,
            episodes: 20,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlanError::Config(m.into()));
        if self.candidates == 0 || self.max_steps == 0 || self.episodes == 0 {
            return bad("candidates, max_steps and episodes must be positive");
        }
        if !(self.goal_tolerance > 0.0) || !self.goal_tolerance.is_finite() {
            return bad("goal_tolerance must be positive");
        }
        let [lo, hi] = self.force_range;
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return bad("force_range must satisfy 0 <= lo < hi");
        }
        Ok(())
    }
}

/// Encoder plus forward model, as seen by the planner.
pub trait LatentDynamics {
    fn resolution(&self) -> usize;
    fn encode(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>>;
    fn predict(&self, z: &[Vec<f64>], actions: &[ActionPush]) -> Result<Vec<Vec<f64>>>;
}

impl LatentDynamics for Model {
    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn encode(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        Ok(Model::encode(self, obs)?)
    }

    fn predict(&self, z: &[Vec<f64>], actions: &[ActionPush]) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict_next(z, actions)?)
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Picks the candidate whose predicted latent lands closest to `z_goal`.
pub fn select_action<M: LatentDynamics + ?Sized>(
    z_t: &[f64],
    z_goal: &[f64],
    model: &M,
    candidates: &[ActionPush],
    distance: PlanDistance,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(PlanError::Config("no candidate actions".into()));
    }
    if z_t.len() != z_goal.len() {
        return Err(PlanError::Dimension { expected: z_goal.len(), got: z_t.len() });
    }
    let z = vec![z_t.to_vec(); candidates.len()];
    let preds = model.predict(&z, candidates)?;
    let costs: Vec<f64> = preds.iter().map(|p| distance.eval(p, z_goal)).collect();
    let best = argmin(&costs).expect("non-empty");
    Ok((best, costs[best]))
}

/// Samples `cfg.candidates` pushes and returns the greedy choice.
pub fn plan_step<M: LatentDynamics + ?Sized, R: Rng + ?Sized>(
    z_t: &[f64],
    z_goal: &[f64],
    model: &M,
    rng: &mut R,
    cfg: &PlanConfig,
) -> Result<ActionPush> {
    let candidates: Vec<ActionPush> = (0..cfg.candidates)
        .map(|_| worldsim::sample_push(rng, cfg.force_range))
        .collect();
    let (i, _) = select_action(z_t, z_goal, model, &candidates, cfg.distance)?;
    Ok(candidates[i])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalDomain {
    Same,
    Different,
}

impl std::str::FromStr for GoalDomain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "same" => Ok(GoalDomain::Same),
            "different" => Ok(GoalDomain::Different),
            other => Err(format!("unknown goal domain `{other}` (expected same|different)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Planner,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEpisode {
    pub states: Vec<WorldState>,
    pub actions: Vec<ActionPush>,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub solved: bool,
}

/// Runs one episode. The current state is rendered under `domain`, the goal
/// under `goal_domain`; the goal is encoded once.
#[allow(clippy::too_many_arguments)]
pub fn run_planning_episode<M: LatentDynamics + ?Sized, R: Rng + ?Sized>(
    initial: &WorldState,
    goal: &WorldState,
    model: &M,
    domain: &DomainParams,
    goal_domain: &DomainParams,
    policy: Policy,
    rng: &mut R,
    cfg: &PlanConfig,
) -> Result<PlanEpisode> {
    cfg.validate()?;
    let res = model.resolution();
    let z_goal = model.encode(&[renderer::render(goal, goal_domain, res)?])?.remove(0);
    let initial_distance = eval::object_distance(initial, goal)?;
    let mut states = vec![initial.clone()];
    let mut actions = Vec::new();
    let mut dist = initial_distance;
    while dist > cfg.goal_tolerance && actions.len() < cfg.max_steps {
        let current = states.last().expect("non-empty");
        let action = match policy {
            Policy::Planner => {
                let z = model.encode(&[renderer::render(current, domain, res)?])?.remove(0);
                plan_step(&z, &z_goal, model, rng, cfg)?
            }
            Policy::Random => worldsim::sample_push(rng, cfg.force_range),
        };
        let next = worldsim::step(current, Some(&action), worldsim::FRAME_DT)?;
        dist = eval::object_distance(&next, goal)?;
        states.push(next);
        actions.push(action);
    }
    Ok(PlanEpisode {
        states,
        actions,
        initial_distance,
        final_distance: dist,
        solved: dist <= cfg.goal_tolerance,
    })
}

/// Start and goal configuration shared by every policy evaluated on it.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanScenario {
    pub initial: WorldState,
    pub goal: WorldState,
    pub domain: DomainParams,
    pub goal_domain: DomainParams,
}

pub fn sample_scenario<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &SceneConfig,
    pool: &[TextureFamily],
    goal_mode: GoalDomain,
    cfg: &PlanConfig,
) -> Result<PlanScenario> {
    let initial = worldsim::sample_initial_state(rng, scene)?;
    let mut goal = initial.clone();
    for _ in 0..cfg.goal_steps {
        let push = worldsim::sample_push(rng, scene.force_range);
        goal = worldsim::step(&goal, Some(&push), worldsim::FRAME_DT)?;
    }
    let domain = renderer::sample_domain(rng, pool, scene.body_count)?;
    let goal_domain = match goal_mode {
        GoalDomain::Same => domain.clone(),
        GoalDomain::Different => renderer::sample_domain(rng, pool, scene.body_count)?,
    };
    Ok(PlanScenario {
        initial,
        goal,
        domain,
        goal_domain,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanningReport {
    pub goal_domain: GoalDomain,
    pub episodes: usize,
    pub initial: Summary,
    pub planner: Summary,
    pub random: Summary,
    pub planner_solved: usize,
    pub random_solved: usize,
}

impl PlanningReport {
    pub fn metric_line(&self) -> String {
        format!(
            "plan goal_domain={} episodes={} initial={:.6} planner={:.6} random={:.6} planner_solved={} random_solved={}",
            match self.goal_domain {
                GoalDomain::Same => "same",
                GoalDomain::Different => "different",
            },
            self.episodes,
            self.initial.mean,
            self.planner.mean,
            self.random.mean,
            self.planner_solved,
            self.random_solved
        )
    }
}

impl std::fmt::Display for PlanningReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "planning episodes={} goal_domain={:?}", self.episodes, self.goal_domain)?;
        writeln!(f, "  initial distance {}", self.initial)?;
        writeln!(f, "  planner final    {} solved {}", self.planner, self.planner_solved)?;
        write!(f, "  random final     {} solved {}", self.random, self.random_solved)
    }
}

/// Evaluates the planner and a random-action baseline on the same scenarios.
/// Scenario `i` depends only on `(cfg.seed, i)`, not on the goal-domain mode's
/// extra draws, so same- and different-domain runs share start and goal states.
pub fn run_planning<M: LatentDynamics + ?Sized>(
    model: &M,
    scene: &SceneConfig,
    pool: &[TextureFamily],
    goal_mode: GoalDomain,
    cfg: &PlanConfig,
) -> Result<(PlanningReport, Vec<PlanEpisode>)> {
    cfg.validate()?;
    let mut initial = Vec::new();
    let mut planned = Vec::new();
    let mut random = Vec::new();
    let mut episodes = Vec::new();
    for i in 0..cfg.episodes as u64 {
        let mut scenario_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        scenario_rng.set_stream(3 * i);
        let sc = sample_scenario(&mut scenario_rng, scene, pool, goal_mode, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3 * i + 1);
        let ep = run_planning_episode(&sc.initial, &sc.goal, model, &sc.domain, &sc.goal_domain, Policy::Planner, &mut rng, cfg)?;
        rng.set_stream(3 * i + 2);
        let base = run_planning_episode(&sc.initial, &sc.goal, model, &sc.domain, &sc.goal_domain, Policy::Random, &mut rng, cfg)?;
        initial.push(ep.initial_distance);
        planned.push(ep.final_distance);
        random.push(base.final_distance);
        episodes.push(ep);
    }
    let report = PlanningReport {
        goal_domain: goal_mode,
        episodes: cfg.episodes,
        initial: Summary::of(&initial),
        planner: Summary::of(&planned),
        random: Summary::of(&random),
        planner_solved: planned.iter().filter(|&&d| d <= cfg.goal_tolerance).count(),
        random_solved: random.iter().filter(|&&d| d <= cfg.goal_tolerance).count(),
    };
    Ok((report, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Latent = positions of all bodies; forward model moves body 0 by a fixed gain.
    struct Toy {
        gain: f64,
    }

    impl LatentDynamics for Toy {
        fn resolution(&self) -> usize {
            16
        }

        fn encode(&self, _obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.0, 0.0]])
        }

        fn predict(&self, z: &[Vec<f64>], actions: &[ActionPush]) -> Result<Vec<Vec<f64>>> {
            Ok(z.iter()
                .zip(actions)
                .map(|(z, a)| vec![z[0] + self.gain * a.force.x, z[1] + self.gain * a.force.y])
                .collect())
        }
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }

    #[test]
    fn single_candidate_is_returned() {
        let cfg = PlanConfig { candidates: 1, ..PlanConfig::default() };
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let chosen = plan_step(&[0.0, 0.0], &[9.0, 9.0], &Toy { gain: 1e-3 }, &mut a, &cfg).unwrap();
        assert_eq!(chosen, worldsim::sample_push(&mut b, cfg.force_range));
    }

    #[test]
    fn exact_hit_is_selected() {
        let candidates = [ActionPush::new(1.0, 0.0), ActionPush::new(0.0, 2.0), ActionPush::new(3.0, 3.0)];
        let (i, cost) = select_action(&[1.0, 1.0], &[1.0, 3.0], &Toy { gain: 1.0 }, &candidates, PlanDistance::L2).unwrap();
        assert_eq!((i, cost), (1, 0.0));
    }

    #[test]
    fn squared_and_plain_distance_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let candidates: Vec<_> = (0..200).map(|_| worldsim::sample_push(&mut rng, [0.0, 600.0])).collect();
        let toy = Toy { gain: 1e-3 };
        let a = select_action(&[0.1, -0.2], &[0.3, 0.1], &toy, &candidates, PlanDistance::L2).unwrap();
        let b = select_action(&[0.1, -0.2], &[0.3, 0.1], &toy, &candidates, PlanDistance::SquaredL2).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn goal_equal_to_start_needs_no_steps() {
        let scene = SceneConfig::controlled_default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = worldsim::sample_initial_state(&mut rng, &scene).unwrap();
        let domain = renderer::sample_domain(&mut rng, &TextureFamily::ALL, 3).unwrap();
        let ep = run_planning_episode(&state, &state, &Toy { gain: 1e-3 }, &domain, &domain, Policy::Planner, &mut rng, &PlanConfig::default()).unwrap();
        assert_eq!(ep.initial_distance, 0.0);
        assert!(ep.actions.is_empty() && ep.solved);
    }

    #[test]
    fn rejects_zero_candidates() {
        let cfg = PlanConfig { candidates: 0, ..PlanConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
