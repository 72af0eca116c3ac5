//! Goal-conditioned 2-D tasks with sparse rewards.
//!
//! All tasks live in the unit square. The reward is `0` when the achieved goal
//! is within `goal_tolerance` of the desired goal (closed ball) and `-1`
//! otherwise. Episodes end on success or when `time_limit` steps have run.

mod dynamics;
mod guide;

pub use dynamics::{slide_step_travel, PUCK_FRICTION};
pub use guide::{guide_action, Guide, GuideController, Phase};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    PointReach,
    PlanarPush,
    PlanarSlide,
}

impl Dynamics {
    pub const ALL: [Dynamics; 3] = [Dynamics::PointReach, Dynamics::PlanarPush, Dynamics::PlanarSlide];

    pub fn id(self) -> &'static str {
        match self {
            Dynamics::PointReach => "point_reach",
            Dynamics::PlanarPush => "planar_push",
            Dynamics::PlanarSlide => "planar_slide",
        }
    }
}

impl std::str::FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dynamics::ALL
            .into_iter()
            .find(|d| d.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }
}

impl std::fmt::Display for Dynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Static description of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalEnvSpec {
    pub dynamics: Dynamics,
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    /// Index in the state vector where the achieved goal starts.
    pub achieved_offset: usize,
    pub action_bound: f64,
    pub goal_tolerance: f64,
    pub time_limit: usize,
    /// Displacement per step at full action.
    pub agent_speed: f64,
    pub contact_radius: f64,
}

impl GoalEnvSpec {
    pub fn new(dynamics: Dynamics) -> Self {
        let (state_dim, contact_radius) = match dynamics {
            // [px, py]
            Dynamics::PointReach => (2, 0.0),
            // [px, py, bx, by, bx - px, by - py]
            Dynamics::PlanarPush => (6, 0.07),
            // [px, py, kx, ky, vx, vy, kx - px, ky - py]
            Dynamics::PlanarSlide => (8, 0.05),
        };
        Self {
            dynamics,
            state_dim,
            action_dim: 2,
            goal_dim: 2,
            achieved_offset: if dynamics == Dynamics::PointReach { 0 } else { 2 },
            action_bound: 1.0,
            goal_tolerance: 0.05,
            time_limit: 50,
            agent_speed: 0.05,
            contact_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.goal_dim == 0 {
            return Err(Error::Config("environment dimensions must be positive".into()));
        }
        if self.time_limit == 0 {
            return Err(Error::Config("time_limit must be positive".into()));
        }
        if !(self.action_bound > 0.0 && self.goal_tolerance > 0.0) {
            return Err(Error::Config(
                "action_bound and goal_tolerance must be positive".into(),
            ));
        }
        if self.achieved_offset + self.goal_dim > self.state_dim {
            return Err(Error::Config("achieved goal lies outside the state".into()));
        }
        Ok(())
    }

    pub fn achieved_goal<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        &state[self.achieved_offset..self.achieved_offset + self.goal_dim]
    }

    /// Width of the network input built by [`GoalEnvSpec::policy_input_into`].
    pub fn policy_input_dim(&self) -> usize {
        self.state_dim + 2 * self.goal_dim
    }

    /// Network input: `state ++ goal ++ (goal − achieved)`.
    pub fn policy_input_into(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(state);
        out.extend_from_slice(goal);
        let achieved = self.achieved_goal(state);
        out.extend(goal.iter().zip(achieved).map(|(g, a)| g - a));
    }

    pub fn policy_input(&self, state: &[f64], goal: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.policy_input_dim());
        self.policy_input_into(state, goal, &mut v);
        v
    }

    pub fn observation(&self, state: &[f64], goal: &[f64]) -> Observation {
        Observation {
            state: state.to_vec(),
            achieved_goal: self.achieved_goal(state).to_vec(),
            desired_goal: goal.to_vec(),
        }
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .map(|a| a.clamp(-self.action_bound, self.action_bound))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Observation,
    pub reward: f64,
    pub success: bool,
    pub timeout: bool,
}

/// Sparse reward: `0` inside the closed tolerance ball, `-1` outside.
pub fn compute_reward(achieved: &[f64], desired: &[f64], tolerance: f64) -> f64 {
    debug_assert_eq!(achieved.len(), desired.len());
    let d2: f64 = achieved
        .iter()
        .zip(desired)
        .map(|(a, d)| (a - d) * (a - d))
        .sum();
    if d2.sqrt() <= tolerance {
        0.0
    } else {
        -1.0
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A running episode.
#[derive(Debug, Clone)]
pub struct Env {
    spec: GoalEnvSpec,
    state: Vec<f64>,
    goal: Vec<f64>,
    steps: usize,
}

impl Env {
    /// Deterministic reset from an episode seed.
    pub fn reset(spec: &GoalEnvSpec, episode_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let (state, goal) = dynamics::initial_state(spec, &mut rng);
        Self {
            spec: spec.clone(),
            state,
            goal,
            steps: 0,
        }
    }

    /// Starts an episode from an explicit state and goal.
    pub fn from_state(spec: &GoalEnvSpec, state: Vec<f64>, goal: Vec<f64>) -> Result<Self> {
        crate::error::ensure_dim("state", spec.state_dim, state.len())?;
        crate::error::ensure_dim("goal", spec.goal_dim, goal.len())?;
        Ok(Self {
            spec: spec.clone(),
            state,
            goal,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &GoalEnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observe(&self) -> Observation {
        self.spec.observation(&self.state, &self.goal)
    }

    /// Advances one step. The action is clipped to the action bound first.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        crate::error::ensure_dim("action", self.spec.action_dim, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("action {action:?}")));
        }
        let action = self.spec.clip_action(action);
        dynamics::advance(&self.spec, &mut self.state, &action);
        self.steps += 1;
        let reward = compute_reward(
            self.spec.achieved_goal(&self.state),
            &self.goal,
            self.spec.goal_tolerance,
        );
        let success = reward == 0.0;
        Ok(StepResult {
            next_observation: self.observe(),
            reward,
            success,
            timeout: !success && self.steps >= self.spec.time_limit,
        })
    }
}

/// Convenience wrapper matching [`Env::reset`], returning only the observation.
pub fn reset(spec: &GoalEnvSpec, episode_seed: u64) -> Observation {
    Env::reset(spec, episode_seed).observe()
}

/// `n` distinct episode seeds, reproducible from `seed`.
pub fn make_test_set(n: usize, seed: u64) -> Vec<u64> {
    assert!(n > 0, "test set must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374_5f73_6574);
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s: u64 = rng.random();
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}
