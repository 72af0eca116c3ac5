//! Fitting the guide's own Q-function from guide rollouts.
//!
//! The guide is rolled out with small Gaussian action noise so the critic sees
//! actions around the guide's, then a critic is fitted by on-policy TD:
//! `y = r + γ·Qᴳ'(s', guide(s', g))`, clipped to the return range, with
//! `y = r` on success terminations and bootstrapping through timeouts.
//! A Monte-Carlo alternative regresses on discounted returns computed over
//! the rest of each stored episode instead.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::GuideQ;
use crate::env::{compute_reward, GoalEnvSpec, Guide};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Adam, Mlp, OutputHead};
use crate::replay::{collect_episode, HerParams, ReplayBuffer, Transition};
use crate::td3::{critic_input, critic_sizes, TrainBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QTargetKind {
    /// One-step on-policy TD with a soft-updated target copy.
    #[default]
    Sarsa,
    /// Truncated discounted return to the end of the stored episode.
    MonteCarlo,
}

impl std::str::FromStr for QTargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sarsa" => Ok(Self::Sarsa),
            "monte_carlo" => Ok(Self::MonteCarlo),
            _ => Err(Error::Config(format!("unknown Q target {s:?} (sarsa or monte_carlo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub target: QTargetKind,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub grad_steps: usize,
    pub her: HerParams,
    /// Collection noise as a fraction of the action bound.
    pub collection_sigma: f64,
    /// Number of evenly spaced held-out residual measurements.
    pub checkpoints: usize,
    pub holdout_episodes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            target: QTargetKind::Sarsa,
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            gamma: 0.98,
            polyak: 0.005,
            batch_size: 100,
            grad_steps: 20_000,
            her: HerParams::default(),
            collection_sigma: 0.1,
            checkpoints: 10,
            holdout_episodes: 20,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("pretrain gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(format!("pretrain polyak {} outside (0, 1]", self.polyak)));
        }
        if !(self.collection_sigma >= 0.0) {
            return Err(Error::Config("collection_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// `(gradient step, held-out error)`: mean |TD residual| under SARSA,
    /// mean |Q − return| under Monte-Carlo.
    pub residual_curve: Vec<(usize, f64)>,
    pub env_steps: usize,
    pub episodes: usize,
    pub guide_success_rate: f64,
    /// Set when no collected episode reached its goal.
    pub warning: Option<String>,
}

/// On-policy targets for the guide: `r + γ·Q'(s', a'ᴳ)` clipped to
/// `[-1/(1-γ), 0]`, or `r` on success terminations.
pub fn sarsa_targets(
    q_target: &Mlp,
    batch: &TrainBatch,
    next_guide_actions: &Array2<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    ensure_dim("next guide action rows", batch.len(), next_guide_actions.nrows())?;
    let x = critic_input(batch.next_obs.view(), next_guide_actions.view());
    let q = q_target.predict_batch(x.view())?;
    let lo = -1.0 / (1.0 - gamma);
    Ok(Array1::from_shape_fn(batch.len(), |i| {
        let r = batch.rewards[i];
        let y = if batch.terminal[i] { r } else { r + gamma * q[[i, 0]] };
        y.clamp(lo, 0.0)
    }))
}

fn next_guide_actions<G: Guide + ?Sized>(
    spec: &GoalEnvSpec,
    guide: &G,
    batch: &[Transition],
) -> Array2<f64> {
    let a = spec.action_dim;
    let mut out = Vec::with_capacity(batch.len() * a);
    for t in batch {
        out.extend(guide.guide_action(&spec.observation(&t.next_state, &t.desired_goal)));
    }
    Array2::from_shape_vec((batch.len(), a), out).expect("guide action width fixed")
}

fn mean_abs_residual<G: Guide + ?Sized>(
    spec: &GoalEnvSpec,
    guide: &G,
    net: &Mlp,
    holdout: &[Transition],
    gamma: f64,
) -> Result<f64> {
    let batch = TrainBatch::from_transitions(spec, holdout);
    let y = sarsa_targets(net, &batch, &next_guide_actions(spec, guide, holdout), gamma)?;
    let q = net.predict_batch(critic_input(batch.obs.view(), batch.actions.view()).view())?;
    Ok(q.column(0).iter().zip(&y).map(|(q, y)| (q - y).abs()).sum::<f64>() / y.len() as f64)
}

fn mean_abs_error(net: &Mlp, x: &Array2<f64>, y: &Array1<f64>) -> Result<f64> {
    let q = net.predict_batch(x.view())?;
    Ok(q.column(0).iter().zip(y).map(|(q, y)| (q - y).abs()).sum::<f64>() / y.len() as f64)
}

/// Critic inputs and truncated discounted returns for every stored step,
/// under its own goal and under `k` goals drawn from its episode's future.
fn monte_carlo_set(
    spec: &GoalEnvSpec,
    episodes: &[Vec<Transition>],
    her: &HerParams,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array1<f64>) {
    let width = spec.policy_input_dim() + spec.action_dim;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for ep in episodes {
        for t in 0..ep.len() {
            let mut goals = vec![ep[t].desired_goal.clone()];
            for _ in 0..her.k {
                goals.push(ep[rng.random_range(t..ep.len())].achieved_goal_next.clone());
            }
            for goal in goals {
                let mut ret = 0.0;
                let mut discount = 1.0;
                for step in &ep[t..] {
                    let r = compute_reward(&step.achieved_goal_next, &goal, spec.goal_tolerance);
                    ret += discount * r;
                    discount *= gamma;
                }
                spec.policy_input_into(&ep[t].state, &goal, &mut inputs);
                inputs.extend_from_slice(&ep[t].action);
                targets.push(ret);
            }
        }
    }
    let n = targets.len();
    (
        Array2::from_shape_vec((n, width), inputs).expect("row widths fixed"),
        Array1::from(targets),
    )
}

fn noisy_guide<'a, G: Guide + ?Sized>(
    guide: &'a G,
    noise: Normal<f64>,
    rng: &'a mut ChaCha8Rng,
) -> impl FnMut(&crate::env::Observation) -> Result<Vec<f64>> + 'a {
    move |obs| {
        Ok(guide
            .guide_action(obs)
            .into_iter()
            .map(|a| a + noise.sample(&mut *rng))
            .collect())
    }
}

/// Collects about `env_steps` steps of noisy guide experience and fits Qᴳ.
pub fn pretrain_guide_q<G: Guide + ?Sized>(
    spec: &GoalEnvSpec,
    guide: &G,
    env_steps: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(GuideQ, PretrainReport)> {
    spec.validate()?;
    cfg.validate()?;
    if env_steps == 0 {
        return Err(Error::Config("pretraining needs at least one env step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.collection_sigma * spec.action_bound).expect("sigma >= 0");

    let mut buffer = ReplayBuffer::new(env_steps + spec.time_limit, spec.goal_tolerance);
    let (mut steps, mut episodes, mut successes) = (0, 0usize, 0usize);
    let mut stored = Vec::new();
    while steps < env_steps {
        let env_seed = rng.random::<u64>();
        let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let policy = noisy_guide(guide, noise, &mut act_rng);
        let (ep, success) = collect_episode(spec, env_seed, episodes as u64, policy, guide)?;
        steps += ep.len();
        episodes += 1;
        successes += usize::from(success);
        if cfg.target == QTargetKind::MonteCarlo {
            stored.push(ep.clone());
        }
        buffer.store_episode(ep)?;
    }

    let mut holdout_episodes = Vec::new();
    for i in 0..cfg.holdout_episodes {
        let env_seed = rng.random::<u64>();
        let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let policy = noisy_guide(guide, noise, &mut act_rng);
        let id = (episodes + i) as u64;
        holdout_episodes.push(collect_episode(spec, env_seed, id, policy, guide)?.0);
    }
    let holdout_returns = (cfg.target == QTargetKind::MonteCarlo).then(|| {
        let own_goal = HerParams { k: 0, ..cfg.her };
        monte_carlo_set(spec, &holdout_episodes, &own_goal, cfg.gamma, &mut rng)
    });
    let holdout: Vec<Transition> = holdout_episodes.into_iter().flatten().collect();

    let guide_success_rate = successes as f64 / episodes as f64;
    let warning = (successes == 0).then(|| {
        let msg = format!(
            "guide never reached the goal in {episodes} {} episodes; its Q-function carries no success signal",
            spec.dynamics
        );
        log::warn!("{msg}");
        msg
    });

    let mut net = Mlp::new(&critic_sizes(spec, &cfg.hidden), OutputHead::Identity, &mut rng)?;
    let mut target = net.clone();
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let every = if cfg.checkpoints == 0 {
        usize::MAX
    } else {
        (cfg.grad_steps / cfg.checkpoints).max(1)
    };
    let mut residual_curve = Vec::new();
    let mut record = |step: usize, net: &Mlp| -> Result<()> {
        if cfg.checkpoints > 0 && !holdout.is_empty() {
            let err = match &holdout_returns {
                Some((x, y)) => mean_abs_error(net, x, y)?,
                None => mean_abs_residual(spec, guide, net, &holdout, cfg.gamma)?,
            };
            residual_curve.push((step, err));
        }
        Ok(())
    };
    record(0, &net)?;
    let returns = match cfg.target {
        QTargetKind::MonteCarlo => Some(monte_carlo_set(spec, &stored, &cfg.her, cfg.gamma, &mut rng)),
        QTargetKind::Sarsa => None,
    };
    for step in 1..=cfg.grad_steps {
        let (x, y) = match &returns {
            Some((inputs, targets)) => {
                let rows: Vec<usize> = (0..cfg.batch_size)
                    .map(|_| rng.random_range(0..targets.len()))
                    .collect();
                (inputs.select(ndarray::Axis(0), &rows), targets.select(ndarray::Axis(0), &rows))
            }
            None => {
                let sample = buffer.sample_batch(cfg.batch_size, &cfg.her, &mut rng)?;
                let batch = TrainBatch::from_transitions(spec, &sample);
                let y = sarsa_targets(&target, &batch, &next_guide_actions(spec, guide, &sample), cfg.gamma)?;
                (critic_input(batch.obs.view(), batch.actions.view()), y)
            }
        };
        let n = y.len() as f64;
        let (q, cache) = net.forward_batch(x.view())?;
        let grad = Array2::from_shape_fn((y.len(), 1), |(i, _)| 2.0 * (q[[i, 0]] - y[i]) / n);
        let grads = net.backward(&cache, grad.view())?;
        opt.step(&mut net, &grads)?;
        target.soft_update_from(&net, cfg.polyak)?;
        if step % every == 0 {
            record(step, &net)?;
        }
    }

    Ok((
        GuideQ::new(net),
        PretrainReport {
            residual_curve,
            env_steps: steps,
            episodes,
            guide_success_rate,
            warning,
        },
    ))
}
