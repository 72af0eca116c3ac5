//! Twin-critic, delayed-update deterministic actor-critic.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::GoalEnvSpec;
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Adam, GradBundle, Mlp, OutputHead};
use crate::replay::Transition;

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Target mixing weight per soft update.
    pub polyak: f64,
    pub policy_delay: u64,
    /// Gaussian smoothing on target actions, as fractions of the action
    /// bound: `(sigma, clip)`. `None` disables it.
    pub target_smoothing: Option<(f64, f64)>,
    /// Strength of the L2 penalty on the actor's output pre-activations.
    pub actor_preact_l2: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.98,
            polyak: 0.005,
            policy_delay: 2,
            target_smoothing: Some((0.2, 0.5)),
            actor_preact_l2: 0.01,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(format!("polyak {} outside (0, 1]", self.polyak)));
        }
        if self.policy_delay == 0 {
            return Err(Error::Config("policy_delay must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Return range of a `{-1, 0}` reward stream: `[-1/(1-γ), 0]`.
    pub fn q_bounds(&self) -> (f64, f64) {
        if self.gamma < 1.0 {
            (-1.0 / (1.0 - self.gamma), 0.0)
        } else {
            (f64::NEG_INFINITY, 0.0)
        }
    }
}

/// Gaussian exploration noise added to the deterministic policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationNoise {
    pub mean: f64,
    pub sigma: f64,
}

/// Matrix form of a minibatch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Network inputs at `s` under the (possibly relabelled) goal.
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub guide_actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// True only for goal-success terminations.
    pub terminal: Vec<bool>,
    pub timeout: Vec<bool>,
}

impl TrainBatch {
    pub fn from_transitions(spec: &GoalEnvSpec, batch: &[Transition]) -> Self {
        let n = batch.len();
        let width = spec.policy_input_dim();
        let a = spec.action_dim;
        let mut obs = Vec::with_capacity(n * width);
        let mut next_obs = Vec::with_capacity(n * width);
        let mut actions = Vec::with_capacity(n * a);
        let mut guide_actions = Vec::with_capacity(n * a);
        for t in batch {
            spec.policy_input_into(&t.state, &t.desired_goal, &mut obs);
            spec.policy_input_into(&t.next_state, &t.desired_goal, &mut next_obs);
            actions.extend_from_slice(&t.action);
            guide_actions.extend_from_slice(&t.guide_action);
        }
        Self {
            obs: Array2::from_shape_vec((n, width), obs).expect("row widths fixed"),
            actions: Array2::from_shape_vec((n, a), actions).expect("action width fixed"),
            guide_actions: Array2::from_shape_vec((n, a), guide_actions)
                .expect("action width fixed"),
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_obs: Array2::from_shape_vec((n, width), next_obs).expect("row widths fixed"),
            terminal: batch.iter().map(|t| t.terminal).collect(),
            timeout: batch.iter().map(|t| t.timeout).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Critic input rows `[obs | action]`.
pub fn critic_input(obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), obs, actions]
}

/// Values and gradients seen by a guidance term during an actor update.
pub struct ActorProbe<'a> {
    pub batch: &'a TrainBatch,
    /// `π(s)` for every row.
    pub policy_actions: &'a Array2<f64>,
    /// `Q₁(s, π(s))` for every row.
    pub q_policy: &'a Array1<f64>,
    /// The objective critic, for filters that evaluate other actions.
    pub critic: &'a Mlp,
}

/// Extra actor loss contributed by guidance.
#[derive(Debug, Clone)]
pub struct GuidanceTerm {
    pub loss: f64,
    /// d loss / d π(s), one row per sample.
    pub action_grad: Array2<f64>,
    pub pass_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorStats {
    /// Total actor loss before the update.
    pub loss: f64,
    pub q_term: f64,
    pub guidance_loss: f64,
    pub preact_penalty: f64,
    pub pass_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor: Option<ActorStats>,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub target_actor: Mlp,
    pub target_critics: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    pub config: Td3Config,
    pub action_bound: f64,
    pub action_dim: usize,
    pub update_counter: u64,
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(spec: &GoalEnvSpec, config: Td3Config, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let obs = spec.policy_input_dim();
        let mut actor_sizes = vec![obs];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(spec.action_dim);
        let actor = Mlp::new(&actor_sizes, OutputHead::TanhScaled(spec.action_bound), rng)?;
        let sizes = critic_sizes(spec, &config.hidden);
        let critics = [
            Mlp::new(&sizes, OutputHead::Identity, rng)?,
            Mlp::new(&sizes, OutputHead::Identity, rng)?,
        ];
        Ok(Self {
            target_actor: actor.clone(),
            target_critics: critics.clone(),
            actor_opt: Adam::new(&actor, config.actor_lr),
            critic_opts: [
                Adam::new(&critics[0], config.critic_lr),
                Adam::new(&critics[1], config.critic_lr),
            ],
            actor,
            critics,
            action_bound: spec.action_bound,
            action_dim: spec.action_dim,
            update_counter: 0,
            config,
        })
    }

    /// Deterministic policy action.
    pub fn act(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.actor.predict(input)
    }

    /// `π(s) + N(μ, σ)` per component, clipped to the action bound.
    pub fn behaviour_action<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        noise: &ExplorationNoise,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut a = self.act(input)?;
        if noise.sigma > 0.0 || noise.mean != 0.0 {
            let dist = Normal::new(noise.mean, noise.sigma)
                .map_err(|e| Error::Config(format!("exploration noise: {e}")))?;
            for v in &mut a {
                *v = (*v + dist.sample(rng)).clamp(-self.action_bound, self.action_bound);
            }
        }
        Ok(a)
    }

    /// Clipped Gaussian noise for target-policy smoothing (zeros when off).
    pub fn sample_target_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match self.config.target_smoothing {
            None => Array2::zeros((n, self.action_dim)),
            Some((sigma, clip)) => {
                let dist = Normal::new(0.0, sigma * self.action_bound).expect("sigma >= 0");
                let c = clip * self.action_bound;
                Array2::from_shape_simple_fn((n, self.action_dim), || dist.sample(rng).clamp(-c, c))
            }
        }
    }

    /// `y = r + γ·min(Q'₁, Q'₂)(s', clip(π'(s') + noise))`, clipped to the
    /// return range. Success terminations use `y = r`; timeouts bootstrap.
    pub fn critic_targets(&self, batch: &TrainBatch, noise: &Array2<f64>) -> Result<Array1<f64>> {
        ensure_dim("target noise rows", batch.len(), noise.nrows())?;
        let mut next_actions = self.target_actor.predict_batch(batch.next_obs.view())?;
        next_actions += noise;
        let bound = self.action_bound;
        next_actions.mapv_inplace(|a| a.clamp(-bound, bound));
        let x = critic_input(batch.next_obs.view(), next_actions.view());
        let q1 = self.target_critics[0].predict_batch(x.view())?;
        let q2 = self.target_critics[1].predict_batch(x.view())?;
        let (lo, hi) = self.config.q_bounds();
        let gamma = self.config.gamma;
        Ok(Array1::from_shape_fn(batch.len(), |i| {
            let r = batch.rewards[i];
            let y = if batch.terminal[i] {
                r
            } else {
                r + gamma * q1[[i, 0]].min(q2[[i, 0]])
            };
            y.clamp(lo, hi)
        }))
    }

    /// One Adam step on each critic's MSE against `y`. Returns the mean of the
    /// two pre-update losses.
    pub fn critic_update(&mut self, batch: &TrainBatch, y: &Array1<f64>) -> Result<f64> {
        ensure_dim("critic targets", batch.len(), y.len())?;
        let x = critic_input(batch.obs.view(), batch.actions.view());
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (critic, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            let (q, cache) = critic.forward_batch(x.view())?;
            let mut loss = 0.0;
            let grad = Array2::from_shape_fn((batch.len(), 1), |(i, _)| {
                let d = q[[i, 0]] - y[i];
                loss += d * d;
                2.0 * d / n
            });
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "critic loss at update {}",
                    self.update_counter
                )));
            }
            total += loss;
            let grads = critic.backward(&cache, grad.view())?;
            opt.step(critic, &grads)?;
        }
        Ok(total / 2.0)
    }

    /// One Adam step on the actor along [`Td3Agent::actor_gradient`].
    pub fn actor_update<F>(&mut self, batch: &TrainBatch, guidance: F) -> Result<ActorStats>
    where
        F: FnOnce(&ActorProbe<'_>) -> Result<Option<GuidanceTerm>>,
    {
        let (stats, grads) = self.actor_gradient(batch, guidance)?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(stats)
    }

    /// Loss and parameter gradient of the actor objective
    /// `mean[-Q₁(s, π(s)) + λ‖z‖²] + guidance`, where `z` is the output
    /// pre-activation and `guidance` is supplied by the caller from the probe.
    pub fn actor_gradient<F>(&self, batch: &TrainBatch, guidance: F) -> Result<(ActorStats, GradBundle)>
    where
        F: FnOnce(&ActorProbe<'_>) -> Result<Option<GuidanceTerm>>,
    {
        let n = batch.len();
        let nf = n as f64;
        let (pi, actor_cache) = self.actor.forward_batch(batch.obs.view())?;
        let x = critic_input(batch.obs.view(), pi.view());
        let (q, critic_cache) = self.critics[0].forward_batch(x.view())?;
        let q_policy = q.column(0).to_owned();

        let term = guidance(&ActorProbe {
            batch,
            policy_actions: &pi,
            q_policy: &q_policy,
            critic: &self.critics[0],
        })?;

        let dq = Array2::from_elem((n, 1), -1.0 / nf);
        let dx = self.critics[0].backward_input(&critic_cache, dq.view())?;
        let obs_width = batch.obs.ncols();
        let mut d_pi = dx.slice(s![.., obs_width..]).to_owned();
        if let Some(t) = &term {
            ensure_dim("guidance gradient rows", n, t.action_grad.nrows())?;
            d_pi += &t.action_grad;
        }
        let l2 = self.config.actor_preact_l2;
        let z = actor_cache.output_preactivation();
        let preact_grad = z.mapv(|v| 2.0 * l2 * v / nf);

        let q_term = -q_policy.mean().unwrap_or(0.0);
        let preact_penalty = l2 * z.iter().map(|v| v * v).sum::<f64>() / nf;
        let guidance_loss = term.as_ref().map_or(0.0, |t| t.loss);
        let loss = q_term + guidance_loss + preact_penalty;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "actor loss at update {}",
                self.update_counter
            )));
        }
        let grads = self
            .actor
            .backward_with_preact(&actor_cache, d_pi.view(), Some(preact_grad.view()))?;
        let stats = ActorStats {
            loss,
            q_term,
            guidance_loss,
            preact_penalty,
            pass_fraction: term.map(|t| t.pass_fraction),
        };
        Ok((stats, grads))
    }

    /// `target ← polyak·online + (1 − polyak)·target` for all three pairs.
    pub fn soft_update(&mut self) -> Result<()> {
        let p = self.config.polyak;
        self.target_actor.soft_update_from(&self.actor, p)?;
        for (t, o) in self.target_critics.iter_mut().zip(&self.critics) {
            t.soft_update_from(o, p)?;
        }
        Ok(())
    }

    /// Full update cycle: critics every call; actor and targets every
    /// `policy_delay` calls.
    pub fn train_step<R, F>(&mut self, batch: &TrainBatch, rng: &mut R, guidance: F) -> Result<UpdateStats>
    where
        R: Rng + ?Sized,
        F: FnOnce(&ActorProbe<'_>) -> Result<Option<GuidanceTerm>>,
    {
        let noise = self.sample_target_noise(batch.len(), rng);
        let y = self.critic_targets(batch, &noise)?;
        let critic_loss = self.critic_update(batch, &y)?;
        self.update_counter += 1;
        let actor = if self.update_counter % self.config.policy_delay == 0 {
            let stats = self.actor_update(batch, guidance)?;
            self.soft_update()?;
            Some(stats)
        } else {
            None
        };
        Ok(UpdateStats { critic_loss, actor })
    }

    /// Overwrites both online and both target critics with `q`.
    pub fn load_critics_from(&mut self, q: &Mlp) -> Result<()> {
        for net in self.critics.iter_mut().chain(self.target_critics.iter_mut()) {
            net.copy_params_from(q)?;
        }
        Ok(())
    }
}

pub fn critic_sizes(spec: &GoalEnvSpec, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![spec.policy_input_dim() + spec.action_dim];
    sizes.extend(hidden);
    sizes.push(1);
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Dynamics;
    use crate::nn::Dense;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> GoalEnvSpec {
        GoalEnvSpec::new(Dynamics::PointReach)
    }

    fn small_agent(seed: u64) -> Td3Agent {
        let cfg = Td3Config {
            hidden: vec![8, 8],
            ..Td3Config::default()
        };
        Td3Agent::new(&spec(), cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Critic whose output is the constant `c` regardless of input.
    fn constant_critic(agent: &Td3Agent, c: f64) -> Mlp {
        let mut net = agent.critics[0].clone();
        let last = net.layers().len() - 1;
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
            if i == last {
                layer.bias[0] = c;
            }
        }
        net
    }

    fn one_row_batch(reward: f64, terminal: bool, timeout: bool) -> TrainBatch {
        let w = spec().policy_input_dim();
        TrainBatch {
            obs: Array2::zeros((1, w)),
            actions: Array2::zeros((1, 2)),
            guide_actions: Array2::zeros((1, 2)),
            rewards: array![reward],
            next_obs: Array2::zeros((1, w)),
            terminal: vec![terminal],
            timeout: vec![timeout],
        }
    }

    #[test]
    fn q_bounds_from_gamma() {
        let (lo, hi) = Td3Config::default().q_bounds();
        assert!((lo + 50.0).abs() < 1e-9);
        assert_eq!(hi, 0.0);
    }

    #[test]
    fn target_examples() {
        let mut agent = small_agent(0);
        let noise = Array2::zeros((1, 2));
        agent.target_critics = [constant_critic(&agent, -10.0), constant_critic(&agent, -3.0)];
        let y = agent.critic_targets(&one_row_batch(-1.0, false, false), &noise).unwrap();
        assert!((y[0] + 10.8).abs() < 1e-12);
        // timeouts keep bootstrapping
        let y = agent.critic_targets(&one_row_batch(-1.0, false, true), &noise).unwrap();
        assert!((y[0] + 10.8).abs() < 1e-12);
        // success terminations do not
        let y = agent.critic_targets(&one_row_batch(0.0, true, false), &noise).unwrap();
        assert_eq!(y[0], 0.0);
        // clipped at -1/(1-γ)
        agent.target_critics = [constant_critic(&agent, -60.0), constant_critic(&agent, -60.0)];
        let y = agent.critic_targets(&one_row_batch(-1.0, false, false), &noise).unwrap();
        assert!((y[0] + 50.0).abs() < 1e-9);
        // and at 0 from above
        agent.target_critics = [constant_critic(&agent, 5.0), constant_critic(&agent, 5.0)];
        let y = agent.critic_targets(&one_row_batch(0.0, false, false), &noise).unwrap();
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn single_sample_critic_loss() {
        let mut agent = small_agent(1);
        agent.critics = [constant_critic(&agent, 0.0), constant_critic(&agent, 0.0)];
        agent.critic_opts = [
            Adam::new(&agent.critics[0], 1e-3),
            Adam::new(&agent.critics[1], 1e-3),
        ];
        let loss = agent
            .critic_update(&one_row_batch(-1.0, false, false), &array![-1.0])
            .unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_critics_have_zero_loss() {
        let mut agent = small_agent(2);
        agent.critics = [constant_critic(&agent, -2.0), constant_critic(&agent, -2.0)];
        agent.critic_opts = [
            Adam::new(&agent.critics[0], 1e-3),
            Adam::new(&agent.critics[1], 1e-3),
        ];
        let before = agent.critics[0].flat_params();
        let loss = agent
            .critic_update(&one_row_batch(-1.0, false, false), &array![-2.0])
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(agent.critics[0].flat_params(), before);
    }

    #[test]
    fn zero_preactivation_has_no_penalty() {
        let mut agent = small_agent(3);
        let last = agent.actor.layers().len() - 1;
        let layer: &mut Dense = &mut agent.actor.layers_mut()[last];
        layer.weights.fill(0.0);
        layer.bias.fill(0.0);
        let stats = agent
            .actor_update(&one_row_batch(-1.0, false, false), |_| Ok(None))
            .unwrap();
        assert_eq!(stats.preact_penalty, 0.0);
    }

    #[test]
    fn behaviour_noise_contracts() {
        let agent = small_agent(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = spec().policy_input(&[0.2, 0.3], &[0.8, 0.1]);
        let pi = agent.act(&x).unwrap();
        let quiet = ExplorationNoise { mean: 0.0, sigma: 0.0 };
        assert_eq!(agent.behaviour_action(&x, &quiet, &mut rng).unwrap(), pi);
        let loud = ExplorationNoise { mean: 0.0, sigma: 3.0 };
        for _ in 0..10_000 {
            let a = agent.behaviour_action(&x, &loud, &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() <= agent.action_bound));
        }
    }

    #[test]
    fn behaviour_noise_mean() {
        // unclipped regime: policy near zero, noise small relative to bound
        let agent = small_agent(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = spec().policy_input(&[0.5, 0.5], &[0.5, 0.6]);
        let pi = agent.act(&x).unwrap();
        let noise = ExplorationNoise { mean: 0.05, sigma: 0.1 };
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += agent.behaviour_action(&x, &noise, &mut rng).unwrap()[0] - pi[0];
        }
        let mean = sum / n as f64;
        let se = 0.1 / (n as f64).sqrt();
        assert!((mean - 0.05).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn actor_only_moves_on_delayed_steps() {
        let mut agent = small_agent(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = one_row_batch(-1.0, false, false);
        for step in 1..=6u64 {
            let before = agent.actor.flat_params();
            let stats = agent.train_step(&batch, &mut rng, |_| Ok(None)).unwrap();
            let moved = agent.actor.flat_params() != before;
            assert_eq!(moved, step % 2 == 0, "step {step}");
            assert_eq!(stats.actor.is_some(), step % 2 == 0);
        }
    }

    #[test]
    fn load_critics_copies_everywhere() {
        let mut agent = small_agent(10);
        let q = constant_critic(&agent, -7.0);
        agent.load_critics_from(&q).unwrap();
        for net in agent.critics.iter().chain(agent.target_critics.iter()) {
            assert_eq!(net, &q);
        }
        let wrong = Mlp::zeros(&[3, 1], OutputHead::Identity).unwrap();
        assert!(agent.load_critics_from(&wrong).is_err());
    }
}
