//! Experiment orchestration: config files, seeded runs, evaluation, metrics,
//! seed aggregation and plots.
//!
//! A run alternates `train_every` environment steps under the noisy policy
//! with `grad_steps` updates, and evaluates the deterministic policy on a fixed
//! test set every `eval_every` steps. Its directory holds:
//!
//! ```text
//! <out>/<env>/<variant>/seed_<k>/
//!     config.toml    resolved configuration
//!     metrics.csv    one row per evaluation
//!     timing.csv     wall-clock seconds per evaluation
//!     snapshot/      actor.grl, critic_1.grl, critic_2.grl
//! ```

mod config;
mod metrics;
mod plot;

pub use config::{ExperimentConfig, OUT_DIR_ENV};
pub use metrics::{
    aggregate_seeds, find_runs, read_curve, read_run, write_curve, AggregateCurve, CurvePoint, MeanStd,
    MetricsRow, MetricsWriter, CONFIG_FILE, CURVE_FILE, METRICS_FILE, TIMING_FILE,
};
pub use plot::emit_plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{make_test_set, Env, GoalEnvSpec, Guide, Observation};
use crate::error::{Error, Result};
use crate::guidance::{
    bc_coefficient, guidance_term, init_agent_from_guide_q, refresh_guide_actions, GuideQ, Variant,
};
use crate::nn::{snapshot, Mlp};
use crate::replay::{ReplayBuffer, Transition};
use crate::td3::{Td3Agent, TrainBatch};

pub const SNAPSHOT_DIR: &str = "snapshot";
pub const GUIDE_Q_ROLE: &str = "guide_q";

/// Independent random streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fraction of test episodes in which `policy` reaches the goal at least once
/// within the time limit. Episodes are stepped in lockstep so the policy sees
/// one batch of observations per time step.
pub fn evaluate_with<P>(spec: &GoalEnvSpec, test_set: &[u64], mut policy: P) -> Result<f64>
where
    P: FnMut(&[Observation]) -> Result<Vec<Vec<f64>>>,
{
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let mut envs: Vec<Env> = test_set.iter().map(|&s| Env::reset(spec, s)).collect();
    let mut done = vec![false; envs.len()];
    let mut successes = 0usize;
    for _ in 0..spec.time_limit {
        let live: Vec<usize> = (0..envs.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<Observation> = live.iter().map(|&i| envs[i].observe()).collect();
        let actions = policy(&obs)?;
        for (&i, a) in live.iter().zip(&actions) {
            let step = envs[i].step(a)?;
            if step.success {
                successes += 1;
                done[i] = true;
            } else if step.timeout {
                done[i] = true;
            }
        }
    }
    Ok(successes as f64 / test_set.len() as f64)
}

/// Success rate of the deterministic actor on `test_set`.
pub fn evaluate(actor: &Mlp, spec: &GoalEnvSpec, test_set: &[u64]) -> Result<f64> {
    let width = spec.policy_input_dim();
    evaluate_with(spec, test_set, |obs| {
        let mut x = Vec::with_capacity(obs.len() * width);
        for o in obs {
            spec.policy_input_into(&o.state, &o.desired_goal, &mut x);
        }
        let x = Array2::from_shape_vec((obs.len(), width), x).expect("row widths fixed");
        let a = actor.predict_batch(x.view())?;
        Ok(a.outer_iter().map(|r| r.to_vec()).collect())
    })
}

/// Success rate of a guide on `test_set`.
pub fn evaluate_guide<G: Guide + ?Sized>(spec: &GoalEnvSpec, guide: &G, test_set: &[u64]) -> Result<f64> {
    evaluate_with(spec, test_set, |obs| Ok(obs.iter().map(|o| guide.guide_action(o)).collect()))
}

pub fn load_guide_q(path: &Path) -> Result<GuideQ> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    Ok(GuideQ::new(snapshot::load_role(path, GUIDE_Q_ROLE)?))
}

pub fn save_guide_q(path: &Path, guide_q: &GuideQ) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    snapshot::save(path, guide_q.network(), GUIDE_Q_ROLE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

#[derive(Default)]
struct Window {
    critic_loss: f64,
    critic_n: usize,
    actor_loss: f64,
    bc_loss: f64,
    filter: f64,
    actor_n: usize,
}

impl Window {
    fn row(&self, env_steps: u64, success_rate: f64, wall_seconds: f64) -> MetricsRow {
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        MetricsRow {
            env_steps,
            success_rate,
            mean_bc_loss: mean(self.bc_loss, self.actor_n),
            mean_filter_fraction: mean(self.filter, self.actor_n),
            mean_critic_loss: mean(self.critic_loss, self.critic_n),
            mean_actor_loss: mean(self.actor_loss, self.actor_n),
            wall_seconds,
        }
    }
}

/// Trains one seed of `cfg` and writes its run directory. Deterministic for a
/// given config and seed. On a non-finite loss the rows written so far stay on
/// disk and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let guide_q = match (&cfg.guide_q_path, cfg.needs_guide_q()) {
        (Some(path), true) => Some(load_guide_q(path)?),
        _ => None,
    };
    let dir = cfg.run_dir(seed);
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let mut writer = MetricsWriter::create(&dir)?;
    let start = Instant::now();

    let spec = cfg.spec();
    let guide = cfg.guide();
    let guidance = cfg.guidance();
    let her = cfg.her();
    let noise = cfg.exploration();
    let test_set = make_test_set(cfg.test_set_size, cfg.test_set_seed);
    let mut init_rng = stream(seed, 0);
    let mut env_rng = stream(seed, 1);
    let mut act_rng = stream(seed, 2);
    let mut train_rng = stream(seed, 3);

    let mut agent = Td3Agent::new(&spec, cfg.td3(), &mut init_rng)?;
    if guidance.init_from_qg {
        let gq = guide_q.as_ref().ok_or_else(|| Error::Config("init_from_qg needs guide_q_path".into()))?;
        init_agent_from_guide_q(&mut agent, gq)?;
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, spec.goal_tolerance);
    let mut rows = Vec::new();
    let mut window = Window::default();

    let row = window.row(0, evaluate(&agent.actor, &spec, &test_set)?, start.elapsed().as_secs_f64());
    writer.append(&row)?;
    rows.push(row);

    let mut env = Env::reset(&spec, env_rng.random());
    let mut episode: Vec<Transition> = Vec::with_capacity(spec.time_limit);
    let mut episode_id = 0u64;
    let mut input = Vec::with_capacity(spec.policy_input_dim());
    for env_steps in 1..=cfg.total_steps {
        let obs = env.observe();
        input.clear();
        spec.policy_input_into(&obs.state, &obs.desired_goal, &mut input);
        let action = agent.behaviour_action(&input, &noise, &mut act_rng)?;
        let guide_action = guide.guide_action(&obs);
        let step = env.step(&action)?;
        let ended = step.success || step.timeout;
        episode.push(Transition {
            state: obs.state,
            action,
            guide_action,
            reward: step.reward,
            next_state: step.next_observation.state,
            achieved_goal_next: step.next_observation.achieved_goal,
            desired_goal: obs.desired_goal,
            timeout: step.timeout,
            terminal: step.success,
            episode_id,
            step_index: episode.len(),
            relabeled: false,
        });
        if ended {
            buffer.store_episode(std::mem::take(&mut episode))?;
            episode_id += 1;
            env = Env::reset(&spec, env_rng.random());
        }

        if env_steps % cfg.train_every == 0 && !buffer.is_empty() {
            let coefficient = bc_coefficient(&guidance, env_steps);
            for _ in 0..cfg.grad_steps {
                let mut sample = buffer.sample_batch(cfg.batch_size, &her, &mut train_rng)?;
                if guidance.variant != Variant::None {
                    refresh_guide_actions(&spec, &mut sample, &guide, guidance.relabel);
                }
                let batch = TrainBatch::from_transitions(&spec, &sample);
                let stats = agent.train_step(&batch, &mut train_rng, |probe| {
                    guidance_term(&guidance, coefficient, probe, guide_q.as_ref())
                })?;
                window.critic_loss += stats.critic_loss;
                window.critic_n += 1;
                if let Some(a) = stats.actor {
                    window.actor_loss += a.loss;
                    window.bc_loss += a.guidance_loss;
                    window.filter += a.pass_fraction.unwrap_or(0.0);
                    window.actor_n += 1;
                }
            }
        }

        if env_steps % cfg.eval_every == 0 {
            let success = evaluate(&agent.actor, &spec, &test_set)?;
            let row = window.row(env_steps, success, start.elapsed().as_secs_f64());
            writer.append(&row)?;
            rows.push(row);
            window = Window::default();
        }
    }

    save_agent(&dir.join(SNAPSHOT_DIR), &agent)?;
    Ok(RunOutcome {
        metrics_path: dir.join(METRICS_FILE),
        dir,
        rows,
    })
}

pub fn save_agent(dir: &Path, agent: &Td3Agent) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    snapshot::save(&dir.join("actor.grl"), &agent.actor, "actor")?;
    snapshot::save(&dir.join("critic_1.grl"), &agent.critics[0], "critic")?;
    snapshot::save(&dir.join("critic_2.grl"), &agent.critics[1], "critic")
}

pub fn load_actor(dir: &Path) -> Result<Mlp> {
    let path = dir.join("actor.grl");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    snapshot::load_role(&path, "actor")
}

/// Groups every run under `root` by `(env, variant)` from its config sidecar
/// and aggregates each group. A group must contain exactly its configured
/// seed set.
pub fn aggregate_runs(root: &Path) -> Result<Vec<AggregateCurve>> {
    type Group = (Vec<u64>, Vec<(u64, Vec<MetricsRow>)>);
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for dir in find_runs(root)? {
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let seed = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| Error::Metrics(format!("{} is not a seed_<k> directory", dir.display())))?;
        let key = (cfg.env.id().to_owned(), cfg.variant.id().to_owned());
        let entry = groups.entry(key).or_insert_with(|| (cfg.seeds.clone(), Vec::new()));
        if entry.0 != cfg.seeds {
            return Err(Error::Metrics(format!("{}: seed list differs within group", dir.display())));
        }
        entry.1.push((seed, read_run(&dir)?));
    }
    if groups.is_empty() {
        return Err(Error::Metrics(format!("no runs under {}", root.display())));
    }
    groups
        .into_iter()
        .map(|((env, variant), (mut configured, runs))| {
            let mut found: Vec<u64> = runs.iter().map(|(s, _)| *s).collect();
            found.sort_unstable();
            configured.sort_unstable();
            if found != configured {
                return Err(Error::Metrics(format!(
                    "{env}/{variant}: found seeds {found:?}, configured {configured:?}"
                )));
            }
            aggregate_seeds(&env, &variant, &runs)
        })
        .collect()
}
