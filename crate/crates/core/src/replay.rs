//! Episode-structured replay with "future" hindsight relabelling.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::{compute_reward, Env, GoalEnvSpec, Guide, Observation};
use crate::error::{Error, Result};

/// One environment step plus the guide's action at collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub guide_action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub achieved_goal_next: Vec<f64>,
    pub desired_goal: Vec<f64>,
    pub timeout: bool,
    /// Episode ended by reaching the goal.
    pub terminal: bool,
    pub episode_id: u64,
    pub step_index: usize,
    /// Set on sampled copies whose goal was replaced.
    pub relabeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HerStrategy {
    Future,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HerParams {
    pub strategy: HerStrategy,
    /// Relabelled-to-original ratio; relabel probability is `k / (k + 1)`.
    pub k: usize,
}

impl Default for HerParams {
    fn default() -> Self {
        Self {
            strategy: HerStrategy::Future,
            k: 4,
        }
    }
}

impl HerParams {
    pub fn relabel_probability(&self) -> f64 {
        self.k as f64 / (self.k as f64 + 1.0)
    }
}

/// Bounded store of whole episodes, evicting the oldest first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    tolerance: f64,
    episodes: VecDeque<Vec<Transition>>,
    /// Transition offset at which each stored episode starts.
    starts: Vec<usize>,
    size: usize,
}

impl ReplayBuffer {
    /// `tolerance` is the goal tolerance used to recompute relabelled rewards.
    pub fn new(capacity: usize, tolerance: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            tolerance,
            episodes: VecDeque::new(),
            starts: Vec::new(),
            size: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|ep| ep[0].episode_id)
    }

    pub fn store_episode(&mut self, episode: Vec<Transition>) -> Result<()> {
        let first = episode.first().ok_or(Error::EmptyEpisode)?;
        let (id, start) = (first.episode_id, first.step_index);
        for (i, t) in episode.iter().enumerate() {
            if t.episode_id != id || t.step_index != start + i {
                return Err(Error::MalformedEpisode(format!(
                    "transition {i} has episode {} step {}, expected episode {id} step {}",
                    t.episode_id,
                    t.step_index,
                    start + i
                )));
            }
        }
        if episode.len() > self.capacity {
            return Err(Error::Config(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        self.size += episode.len();
        self.episodes.push_back(episode);
        while self.size > self.capacity {
            let old = self.episodes.pop_front().expect("size > 0 implies an episode");
            self.size -= old.len();
        }
        self.starts.clear();
        let mut offset = 0;
        for ep in &self.episodes {
            self.starts.push(offset);
            offset += ep.len();
        }
        Ok(())
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let e = self.starts.partition_point(|&s| s <= flat) - 1;
        (e, flat - self.starts[e])
    }

    /// Draws `n` transitions uniformly; each is relabelled with probability
    /// `k / (k + 1)` to the achieved goal of a uniformly chosen step at or
    /// after it in the same episode, with its reward recomputed.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        her: &HerParams,
        rng: &mut R,
    ) -> Result<Vec<Transition>> {
        if n == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let p = her.relabel_probability();
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, t) = self.locate(rng.random_range(0..self.size));
            let episode = &self.episodes[e];
            let mut tr = episode[t].clone();
            if her.k > 0 && rng.random::<f64>() < p {
                let future = rng.random_range(t..episode.len());
                tr.desired_goal.clone_from(&episode[future].achieved_goal_next);
                tr.reward = compute_reward(&tr.achieved_goal_next, &tr.desired_goal, self.tolerance);
                tr.relabeled = true;
            }
            batch.push(tr);
        }
        Ok(batch)
    }
}

/// Runs one episode from `env_seed` under `policy`, recording the guide's
/// action at every step. Ends on success or at the time limit.
pub fn collect_episode<P, G>(
    spec: &GoalEnvSpec,
    env_seed: u64,
    episode_id: u64,
    mut policy: P,
    guide: &G,
) -> Result<(Vec<Transition>, bool)>
where
    P: FnMut(&Observation) -> Result<Vec<f64>>,
    G: Guide + ?Sized,
{
    let mut env = Env::reset(spec, env_seed);
    let mut episode = Vec::with_capacity(spec.time_limit);
    loop {
        let obs = env.observe();
        let action = spec.clip_action(&policy(&obs)?);
        let guide_action = guide.guide_action(&obs);
        let step = env.step(&action)?;
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
        if step.success || step.timeout {
            return Ok((episode, step.success));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 0.05;

    fn episode(id: u64, len: usize) -> Vec<Transition> {
        let goal = vec![0.9, 0.9];
        (0..len)
            .map(|i| {
                let ag = vec![id as f64 * 0.01 + i as f64 * 0.02, 0.1];
                Transition {
                    state: vec![i as f64],
                    action: vec![0.0, 0.0],
                    guide_action: vec![0.1, 0.1],
                    reward: compute_reward(&ag, &goal, TOL),
                    next_state: vec![i as f64 + 1.0],
                    achieved_goal_next: ag,
                    desired_goal: goal.clone(),
                    timeout: i + 1 == len,
                    terminal: false,
                    episode_id: id,
                    step_index: i,
                    relabeled: false,
                }
            })
            .collect()
    }

    #[test]
    fn store_counts_steps() {
        let mut buf = ReplayBuffer::new(1000, TOL);
        buf.store_episode(episode(0, 50)).unwrap();
        assert_eq!(buf.len(), 50);
    }

    #[test]
    fn capacity_never_exceeded() {
        let mut buf = ReplayBuffer::new(120, TOL);
        for id in 0..10 {
            buf.store_episode(episode(id, 50)).unwrap();
            assert!(buf.len() <= 120);
        }
        assert_eq!(buf.episode_ids().collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn rejects_bad_episodes() {
        let mut buf = ReplayBuffer::new(100, TOL);
        assert!(matches!(buf.store_episode(vec![]), Err(Error::EmptyEpisode)));
        let mut ep = episode(1, 5);
        ep[3].step_index = 7;
        assert!(matches!(buf.store_episode(ep), Err(Error::MalformedEpisode(_))));
        let mut ep = episode(1, 5);
        ep[2].episode_id = 2;
        assert!(matches!(buf.store_episode(ep), Err(Error::MalformedEpisode(_))));
        assert!(buf.is_empty());
    }

    #[test]
    fn sampling_errors() {
        let buf = ReplayBuffer::new(100, TOL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample_batch(4, &HerParams::default(), &mut rng),
            Err(Error::EmptyBuffer)
        ));
        let mut buf = buf;
        buf.store_episode(episode(0, 3)).unwrap();
        assert!(buf.sample_batch(0, &HerParams::default(), &mut rng).is_err());
    }

    #[test]
    fn evicted_episodes_never_sampled() {
        let mut buf = ReplayBuffer::new(100, TOL);
        for id in 0..6 {
            buf.store_episode(episode(id, 30)).unwrap();
        }
        let live: Vec<u64> = buf.episode_ids().collect();
        assert_eq!(live, vec![3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buf.sample_batch(20_000, &HerParams::default(), &mut rng).unwrap();
        assert!(batch.iter().all(|t| live.contains(&t.episode_id)));
        for id in &live {
            assert!(batch.iter().any(|t| t.episode_id == *id));
        }
    }

    #[test]
    fn k_zero_leaves_goals_alone() {
        let mut buf = ReplayBuffer::new(1000, TOL);
        let ep = episode(0, 40);
        buf.store_episode(ep.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let her = HerParams { k: 0, ..HerParams::default() };
        for t in buf.sample_batch(500, &her, &mut rng).unwrap() {
            assert!(!t.relabeled);
            assert_eq!(t, ep[t.step_index]);
        }
    }

    #[test]
    fn relabel_fraction_concentrates() {
        let mut buf = ReplayBuffer::new(10_000, TOL);
        for id in 0..20 {
            buf.store_episode(episode(id, 50)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = buf.sample_batch(10_000, &HerParams::default(), &mut rng).unwrap();
        let frac = batch.iter().filter(|t| t.relabeled).count() as f64 / 1e4;
        // binomial sd = sqrt(0.8 * 0.2 / 1e4) = 0.004, so ±0.02 is five sd
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
    }

    #[test]
    fn relabelled_goals_come_from_the_future() {
        let mut buf = ReplayBuffer::new(10_000, TOL);
        let eps: Vec<_> = (0..5).map(|id| episode(id, 25)).collect();
        for ep in &eps {
            buf.store_episode(ep.clone()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in buf.sample_batch(5000, &HerParams::default(), &mut rng).unwrap() {
            let ep = &eps[t.episode_id as usize];
            if t.relabeled {
                let src = ep
                    .iter()
                    .position(|o| o.achieved_goal_next == t.desired_goal)
                    .unwrap();
                assert!(src >= t.step_index);
            }
            assert_eq!(
                t.reward,
                compute_reward(&t.achieved_goal_next, &t.desired_goal, TOL)
            );
        }
    }

    #[test]
    fn self_relabel_is_success() {
        let mut buf = ReplayBuffer::new(100, TOL);
        buf.store_episode(episode(0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let her = HerParams { k: 1_000_000, ..HerParams::default() };
        let t = buf
            .sample_batch(50, &her, &mut rng)
            .unwrap()
            .into_iter()
            .find(|t| t.relabeled)
            .unwrap();
        assert_eq!(t.desired_goal, t.achieved_goal_next);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn sampling_reproducible() {
        let mut buf = ReplayBuffer::new(1000, TOL);
        for id in 0..4 {
            buf.store_episode(episode(id, 30)).unwrap();
        }
        let her = HerParams::default();
        let a = buf.sample_batch(64, &her, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = buf.sample_batch(64, &her, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
