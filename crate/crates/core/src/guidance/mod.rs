//! Guide-driven behaviour cloning gated by a Q-filter.
//!
//! The actor's loss gains a term
//! `w(t) · (1/N) Σᵢ maskᵢ · ‖aᵢᴳ − π(sᵢ)‖₂`, where `aᵢᴳ` is the guide's action.
//! The mask is where the variants differ:
//!
//! | variant            | mask_i                                   | weight `w(t)`       | critics start at Qᴳ |
//! |--------------------|------------------------------------------|---------------------|---------------------|
//! | `static_qg`        | `Qᴳ(s, aᴳ) > Q₁(s, π(s))`                | `bc_weight`         | yes                 |
//! | `static_qg_no_bc`  | as `static_qg` (logged only)             | 0                   | yes                 |
//! | `naive`            | `Q₁(s, aᴳ) > Q₁(s, π(s))`                | `bc_weight`         | no                  |
//! | `naive_with_init`  | as `naive`                               | `bc_weight`         | yes                 |
//! | `linear`           | all true                                 | linear decay to 0   | no                  |
//! | `none`             | all false                                | 0                   | no                  |
//!
//! `Qᴳ` is the guide's own Q-function, fitted once by [`pretrain_guide_q`]
//! and frozen. Ties in the filter resolve to "do not imitate".

mod pretrain;

pub use pretrain::{pretrain_guide_q, sarsa_targets, PretrainConfig, PretrainReport, QTargetKind};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::env::{Guide, GoalEnvSpec};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::Mlp;
use crate::replay::Transition;
use crate::td3::{critic_input, ActorProbe, GuidanceTerm, Td3Agent, TrainBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StaticQg,
    Naive,
    Linear,
    None,
    StaticQgNoBc,
    NaiveWithInit,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::StaticQg,
        Variant::Naive,
        Variant::Linear,
        Variant::None,
        Variant::StaticQgNoBc,
        Variant::NaiveWithInit,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::StaticQg => "static_qg",
            Variant::Naive => "naive",
            Variant::Linear => "linear",
            Variant::None => "none",
            Variant::StaticQgNoBc => "static_qg_no_bc",
            Variant::NaiveWithInit => "naive_with_init",
        }
    }

    /// Whether the actor critics start as copies of Qᴳ by default.
    pub fn default_init_from_qg(self) -> bool {
        matches!(
            self,
            Variant::StaticQg | Variant::StaticQgNoBc | Variant::NaiveWithInit
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown guidance variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// What guide action a hindsight-relabelled sample is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideRelabel {
    /// Query the guide again with the relabelled goal.
    Recompute,
    /// Keep the action stored at collection time.
    Reuse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub variant: Variant,
    pub bc_weight: f64,
    /// Env steps after which the linear schedule reaches zero.
    pub linear_t: u64,
    pub init_from_qg: bool,
    pub relabel: GuideRelabel,
}

impl GuidanceConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            bc_weight: 2.0,
            linear_t: 500_000,
            init_from_qg: variant.default_init_from_qg(),
            relabel: GuideRelabel::Recompute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bc_weight >= 0.0 && self.bc_weight.is_finite()) {
            return Err(Error::Config(format!("bc_weight {} must be >= 0", self.bc_weight)));
        }
        if self.variant == Variant::Linear && self.linear_t == 0 {
            return Err(Error::Config("linear_t must be > 0 for the linear variant".into()));
        }
        Ok(())
    }

    /// True when this configuration needs a pretrained Qᴳ.
    pub fn needs_guide_q(&self) -> bool {
        self.init_from_qg || matches!(self.variant, Variant::StaticQg | Variant::StaticQgNoBc)
    }
}

/// Weight of the BC term after `env_steps` environment steps.
pub fn bc_coefficient(cfg: &GuidanceConfig, env_steps: u64) -> f64 {
    match cfg.variant {
        Variant::StaticQg | Variant::Naive | Variant::NaiveWithInit => cfg.bc_weight,
        Variant::Linear => {
            cfg.bc_weight * (1.0 - env_steps as f64 / cfg.linear_t as f64).max(0.0)
        }
        Variant::None | Variant::StaticQgNoBc => 0.0,
    }
}

/// The guide's frozen Q-function. There is no mutable access to the network.
#[derive(Debug, Clone)]
pub struct GuideQ {
    network: Mlp,
}

impl GuideQ {
    pub fn new(network: Mlp) -> Self {
        Self { network }
    }

    pub fn network(&self) -> &Mlp {
        &self.network
    }

    pub fn frozen(&self) -> bool {
        true
    }

    /// `Qᴳ(s, a)` for each row of network inputs and actions.
    pub fn evaluate(&self, obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let q = self.network.predict_batch(critic_input(obs, actions).view())?;
        Ok(q.column(0).to_owned())
    }
}

/// Per-batch filter statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterStats {
    pub pass_fraction: f64,
    pub bc_loss_value: f64,
}

/// Elementwise strict comparison `lhs > rhs`.
pub fn strict_mask(lhs: &Array1<f64>, rhs: &Array1<f64>) -> Vec<bool> {
    lhs.iter().zip(rhs).map(|(l, r)| l > r).collect()
}

/// Filter mask from values already computed during the actor update.
pub fn filter_mask_from_probe(
    cfg: &GuidanceConfig,
    probe: &ActorProbe<'_>,
    guide_q: Option<&GuideQ>,
) -> Result<Vec<bool>> {
    let batch = probe.batch;
    let n = batch.len();
    match cfg.variant {
        Variant::StaticQg | Variant::StaticQgNoBc => {
            let gq = guide_q.ok_or_else(|| Error::Config("static filter needs a guide Q".into()))?;
            let lhs = gq.evaluate(batch.obs.view(), batch.guide_actions.view())?;
            Ok(strict_mask(&lhs, probe.q_policy))
        }
        Variant::Naive | Variant::NaiveWithInit => {
            let x = critic_input(batch.obs.view(), batch.guide_actions.view());
            let lhs = probe.critic.predict_batch(x.view())?.column(0).to_owned();
            Ok(strict_mask(&lhs, probe.q_policy))
        }
        Variant::Linear => Ok(vec![true; n]),
        Variant::None => Ok(vec![false; n]),
    }
}

/// Q-filter mask for a batch, evaluating every quantity from scratch.
pub fn q_filter_mask(
    cfg: &GuidanceConfig,
    batch: &TrainBatch,
    guide_q: Option<&GuideQ>,
    agent: &Td3Agent,
) -> Result<Vec<bool>> {
    let pi = agent.actor.predict_batch(batch.obs.view())?;
    let q = agent.critics[0].predict_batch(critic_input(batch.obs.view(), pi.view()).view())?;
    let q_policy = q.column(0).to_owned();
    filter_mask_from_probe(
        cfg,
        &ActorProbe {
            batch,
            policy_actions: &pi,
            q_policy: &q_policy,
            critic: &agent.critics[0],
        },
        guide_q,
    )
}

/// Gated BC loss and its gradient with respect to the policy actions.
///
/// `loss = coefficient · (1/N) Σᵢ maskᵢ ‖aᵢᴳ − πᵢ‖₂`. Rows where the two
/// actions coincide contribute a zero gradient.
pub fn bc_loss(
    guide_actions: ArrayView2<f64>,
    policy_actions: ArrayView2<f64>,
    mask: &[bool],
    coefficient: f64,
) -> Result<(f64, Array2<f64>, FilterStats)> {
    let n = mask.len();
    ensure_dim("bc mask", policy_actions.nrows(), n)?;
    ensure_dim("bc guide actions", policy_actions.nrows(), guide_actions.nrows())?;
    let mut grad = Array2::zeros(policy_actions.raw_dim());
    let mut sum = 0.0;
    let scale = coefficient / n as f64;
    for (i, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let diff = &policy_actions.row(i) - &guide_actions.row(i);
        let norm = diff.dot(&diff).sqrt();
        sum += norm;
        if norm > 0.0 && coefficient != 0.0 {
            grad.row_mut(i).assign(&(diff * (scale / norm)));
        }
    }
    let loss = scale * sum;
    let passed = mask.iter().filter(|&&m| m).count();
    let stats = FilterStats {
        pass_fraction: passed as f64 / n as f64,
        bc_loss_value: loss,
    };
    Ok((loss, grad, stats))
}

/// Guidance term for [`Td3Agent::actor_update`]. `None` for the unguided
/// variant, so that run is exactly plain TD3.
pub fn guidance_term(
    cfg: &GuidanceConfig,
    coefficient: f64,
    probe: &ActorProbe<'_>,
    guide_q: Option<&GuideQ>,
) -> Result<Option<GuidanceTerm>> {
    if cfg.variant == Variant::None {
        return Ok(None);
    }
    let mask = filter_mask_from_probe(cfg, probe, guide_q)?;
    let (loss, action_grad, stats) = bc_loss(
        probe.batch.guide_actions.view(),
        probe.policy_actions.view(),
        &mask,
        coefficient,
    )?;
    Ok(Some(GuidanceTerm {
        loss,
        action_grad,
        pass_fraction: stats.pass_fraction,
    }))
}

/// Copies Qᴳ into both online and both target critics.
pub fn init_agent_from_guide_q(agent: &mut Td3Agent, guide_q: &GuideQ) -> Result<()> {
    agent.load_critics_from(guide_q.network())
}

/// Replaces stored guide actions on relabelled samples with the guide's
/// action for the new goal, when `mode` asks for it.
pub fn refresh_guide_actions<G: Guide + ?Sized>(
    spec: &GoalEnvSpec,
    batch: &mut [Transition],
    guide: &G,
    mode: GuideRelabel,
) {
    if mode == GuideRelabel::Reuse {
        return;
    }
    for t in batch.iter_mut().filter(|t| t.relabeled) {
        t.guide_action = guide.guide_action(&spec.observation(&t.state, &t.desired_goal));
    }
}
