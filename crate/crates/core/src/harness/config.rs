use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{Dynamics, GoalEnvSpec, GuideController};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuideRelabel, Variant};
use crate::replay::HerParams;
use crate::td3::{ExplorationNoise, Td3Config};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "GUIDED_RL_OUT";

/// Everything needed to reproduce one training run, stored as flat
/// `key = value` text. Keys not given in a file take the defaults for its
/// `env`; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: Dynamics,
    pub variant: Variant,
    pub total_steps: u64,
    pub eval_every: u64,
    pub train_every: u64,
    pub grad_steps: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub polyak: f64,
    pub policy_delay: u64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub target_smoothing: bool,
    pub actor_preact_l2: f64,
    pub exploration_sigma: f64,
    pub her_k: usize,
    pub bc_weight: f64,
    pub linear_t: u64,
    pub init_from_qg: bool,
    pub guide_relabel: GuideRelabel,
    pub guide_q_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub test_set_size: usize,
    pub test_set_seed: u64,
    pub goal_tolerance: f64,
    pub time_limit: usize,
    pub guide_gain: f64,
    pub strike_calibration: f64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for `env` and `variant`.
    pub fn new(env: Dynamics, variant: Variant) -> Self {
        let spec = GoalEnvSpec::new(env);
        let guide = GuideController::for_spec(&spec);
        let td3 = Td3Config::default();
        let (total_steps, eval_every, linear_t) = match env {
            Dynamics::PointReach => (100_000, 5_000, 125_000),
            Dynamics::PlanarPush | Dynamics::PlanarSlide => (300_000, 10_000, 250_000),
        };
        let (target_noise, target_noise_clip) = td3.target_smoothing.unwrap_or((0.2, 0.5));
        Self {
            env,
            variant,
            total_steps,
            eval_every,
            train_every: 1000,
            grad_steps: 1000,
            batch_size: 100,
            buffer_capacity: 200_000,
            gamma: td3.gamma,
            hidden: td3.hidden,
            actor_lr: td3.actor_lr,
            critic_lr: td3.critic_lr,
            polyak: td3.polyak,
            policy_delay: td3.policy_delay,
            target_noise,
            target_noise_clip,
            target_smoothing: td3.target_smoothing.is_some(),
            actor_preact_l2: td3.actor_preact_l2,
            exploration_sigma: 0.1,
            her_k: HerParams::default().k,
            bc_weight: 2.0,
            linear_t,
            init_from_qg: variant.default_init_from_qg(),
            guide_relabel: GuideRelabel::Recompute,
            guide_q_path: None,
            seeds: vec![0, 1, 2, 3, 4],
            test_set_size: 100,
            test_set_seed: 2024,
            goal_tolerance: spec.goal_tolerance,
            time_limit: spec.time_limit,
            guide_gain: guide.gain,
            strike_calibration: guide.strike_calibration,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Parses flat `key = value` text. `env` and `variant` are required.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let required = |key: &str| -> Result<String> {
            user.get(key)
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .ok_or_else(|| Error::Config(format!("missing string key {key:?}")))
        };
        let env: Dynamics = required("env")?.parse()?;
        let variant: Variant = required("variant")?.parse()?;
        let mut merged = toml::Table::try_from(Self::new(env, variant))
            .map_err(|e| Error::Config(format!("{e}")))?;
        merged.extend(user);
        let cfg: Self = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_owned()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 || self.eval_every == 0 || self.train_every == 0 {
            return fail("total_steps, eval_every and train_every must be positive".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.time_limit {
            return fail("batch_size must be positive and buffer_capacity >= time_limit".into());
        }
        if !(self.exploration_sigma >= 0.0) || !(self.target_noise >= 0.0) || !(self.target_noise_clip >= 0.0) {
            return fail("noise parameters must be >= 0".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        let toml_max = i64::MAX as u64;
        if self.seeds.iter().chain([&self.test_set_seed]).any(|&s| s > toml_max) {
            return fail(format!("seeds must not exceed {toml_max}"));
        }
        if [self.total_steps, self.eval_every, self.train_every, self.grad_steps, self.linear_t, self.policy_delay]
            .iter()
            .any(|&v| v > toml_max)
        {
            return fail(format!("step counts must not exceed {toml_max}"));
        }
        if self.test_set_size == 0 {
            return fail("test_set_size must be positive".into());
        }
        if !(self.goal_tolerance > 0.0) || self.time_limit == 0 {
            return fail("goal_tolerance and time_limit must be positive".into());
        }
        if !(self.guide_gain > 0.0) || !(self.strike_calibration > 0.0) {
            return fail("guide_gain and strike_calibration must be positive".into());
        }
        if self.needs_guide_q() && self.guide_q_path.is_none() {
            return fail(format!("variant {} needs guide_q_path", self.variant));
        }
        self.td3().validate()?;
        self.guidance().validate()?;
        self.spec().validate()
    }

    pub fn spec(&self) -> GoalEnvSpec {
        let mut spec = GoalEnvSpec::new(self.env);
        spec.goal_tolerance = self.goal_tolerance;
        spec.time_limit = self.time_limit;
        spec
    }

    pub fn guide(&self) -> GuideController {
        let mut g = GuideController::for_spec(&self.spec());
        g.gain = self.guide_gain;
        g.strike_calibration = self.strike_calibration;
        g
    }

    pub fn td3(&self) -> Td3Config {
        Td3Config {
            hidden: self.hidden.clone(),
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            gamma: self.gamma,
            polyak: self.polyak,
            policy_delay: self.policy_delay,
            target_smoothing: self
                .target_smoothing
                .then_some((self.target_noise, self.target_noise_clip)),
            actor_preact_l2: self.actor_preact_l2,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            variant: self.variant,
            bc_weight: self.bc_weight,
            linear_t: self.linear_t,
            init_from_qg: self.init_from_qg,
            relabel: self.guide_relabel,
        }
    }

    pub fn her(&self) -> HerParams {
        HerParams {
            k: self.her_k,
            ..HerParams::default()
        }
    }

    pub fn exploration(&self) -> ExplorationNoise {
        ExplorationNoise {
            mean: 0.0,
            sigma: self.exploration_sigma * self.spec().action_bound,
        }
    }

    pub fn needs_guide_q(&self) -> bool {
        self.guidance().needs_guide_q()
    }

    /// Output root, with [`OUT_DIR_ENV`] taking precedence.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone())
    }

    /// `<root>/<env>/<variant>/seed_<k>`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_root()
            .join(self.env.id())
            .join(self.variant.id())
            .join(format!("seed_{seed}"))
    }
}
