//! Experience replay, ε-greedy collection, the DQN epoch loop and greedy
//! evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxjump::{BoxJumpConfig, BoxJumpEnv};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::matrix::{MatrixEnv, MatrixGameSpec};
use crate::models::{compute_q, greedy_actions, loss_and_grad_for_targets, td_targets, JointObservation, ModelKind, Transition};
use crate::nn::{ema_update_in_place, MlpParams, TargetParams};

/// Fixed-capacity ring of transitions with uniform sampling (with
/// replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts, overwriting the oldest item once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Items from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidState("cannot sample an empty buffer".into()));
        }
        Ok((0..batch)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect())
    }
}

/// Linear ε from `start` to `end` across `total_steps` steps; held at `end`
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start < end {
            return Err(Error::invalid(format!(
                "epsilon schedule needs 1 >= start >= end >= 0, got {start} -> {end}"
            )));
        }
        Ok(Self {
            start,
            end,
            total_steps,
        })
    }

    /// ε at exploration step `step`; step 0 gives `start` and step
    /// `total_steps - 1` gives `end`, both exactly.
    pub fn value(&self, step: usize) -> f64 {
        if self.total_steps <= 1 || step + 1 >= self.total_steps {
            return self.end;
        }
        let frac = step as f64 / (self.total_steps - 1) as f64;
        self.start * (1.0 - frac) + self.end * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub ema_c: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub explore_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub buffer_size: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 32,
            gamma: 0.99,
            ema_c: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            explore_per_epoch: 400,
            hidden: vec![128, 128],
            buffer_size: 20_000,
            eval_episodes: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.explore_per_epoch == 0 || self.buffer_size == 0 {
            return bad("batch_size, explore_per_epoch and buffer_size must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ema_c) {
            return bad("ema_c must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        EpsilonSchedule::new(self.eps_start, self.eps_end, 1)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<EpsilonSchedule> {
        EpsilonSchedule::new(self.eps_start, self.eps_end, self.epochs * self.explore_per_epoch)
    }
}

/// Which environment to train or evaluate on.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    BoxJump(BoxJumpConfig),
    Matrix(MatrixGameSpec),
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::BoxJump(cfg) => Box::new(BoxJumpEnv::new(cfg.clone())?),
            EnvSpec::Matrix(spec) => Box::new(MatrixEnv::new(spec.clone())),
        })
    }
}

/// A kind plus its shared network.
#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    pub kind: ModelKind,
    pub params: MlpParams,
}

impl QModel {
    pub fn greedy(&self, obs: &JointObservation) -> Result<Vec<usize>> {
        greedy_actions(self.kind, &compute_q(self.kind, &self.params, obs)?)
    }
}

/// How actions are chosen during evaluation.
pub enum Policy<'a> {
    Greedy(&'a QModel),
    /// Uniform random actions from a seeded generator.
    Random(ChaCha8Rng),
}

impl Policy<'_> {
    pub fn random(seed: u64) -> Self {
        Policy::Random(ChaCha8Rng::seed_from_u64(seed))
    }

    fn act(&mut self, obs: &JointObservation, num_actions: usize) -> Result<Vec<usize>> {
        match self {
            Policy::Greedy(model) => model.greedy(obs),
            Policy::Random(rng) => Ok((0..obs.n()).map(|_| rng.gen_range(0..num_actions)).collect()),
        }
    }
}

/// Steps an environment with ε-greedy actions, resetting on episode end.
pub struct Collector {
    env: Box<dyn Environment>,
    obs: Option<JointObservation>,
    episode_seed: u64,
    pub episodes_started: usize,
}

impl Collector {
    /// Episodes are seeded `seed_base, seed_base + 1, ...`.
    pub fn new(env: Box<dyn Environment>, seed_base: u64) -> Self {
        Self {
            env,
            obs: None,
            episode_seed: seed_base,
            episodes_started: 0,
        }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    /// Collects `steps` transitions into `buffer`. With probability `eps`
    /// each agent's greedy action is replaced by a uniform random one.
    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        model: &QModel,
        eps: f64,
        steps: usize,
        buffer: &mut ReplayBuffer,
        rng: &mut R,
    ) -> Result<()> {
        if steps == 0 {
            return Err(Error::invalid("collect needs steps >= 1"));
        }
        let num_actions = self.env.num_actions();
        for _ in 0..steps {
            let obs = match self.obs.take() {
                Some(o) => o,
                None => {
                    let o = self.env.reset(self.episode_seed)?;
                    self.episode_seed = self.episode_seed.wrapping_add(1);
                    self.episodes_started += 1;
                    o
                }
            };
            let mut actions = if eps >= 1.0 { vec![0; obs.n()] } else { model.greedy(&obs)? };
            for a in actions.iter_mut() {
                if eps >= 1.0 || rng.gen::<f64>() < eps {
                    *a = rng.gen_range(0..num_actions);
                }
            }
            let step = self.env.step(&actions)?;
            if !step.done {
                self.obs = Some(step.obs.clone());
            }
            buffer.push(Transition {
                obs,
                actions,
                reward: step.reward,
                next_obs: step.obs,
                done: step.done,
            });
        }
        Ok(())
    }
}

/// Mean and population standard deviation of episode totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
}

/// Runs `episodes` episodes of `t_max` steps with seeds `seed_base + k`.
/// Each episode total is `env.episode_baseline() + Σ r`.
pub fn evaluate(
    env: &mut dyn Environment,
    policy: &mut Policy<'_>,
    episodes: usize,
    t_max: usize,
    seed_base: u64,
) -> Result<(EvalStats, Vec<f64>)> {
    if episodes == 0 {
        return Err(Error::invalid("evaluate needs episodes >= 1"));
    }
    env.set_horizon(t_max);
    let num_actions = env.num_actions();
    let mut totals = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(seed_base.wrapping_add(k as u64))?;
        let mut total = env.episode_baseline();
        loop {
            let actions = policy.act(&obs, num_actions)?;
            let step = env.step(&actions)?;
            total += step.reward;
            obs = step.obs;
            if step.done {
                break;
            }
        }
        totals.push(total);
    }
    Ok((mean_std(&totals), totals))
}

pub fn mean_std(xs: &[f64]) -> EvalStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    EvalStats {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
}

/// `epoch,mean_reward,std_reward` with a header line.
pub fn format_curve(curve: &[CurvePoint]) -> String {
    let mut s = String::from("epoch,mean_reward,std_reward\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.epoch, p.mean_reward, p.std_reward));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: QModel,
    pub target: TargetParams,
    pub curve: Vec<CurvePoint>,
    pub env_steps: usize,
    pub sgd_steps: usize,
    pub last_loss: f64,
}

/// Seeds for evaluation episodes are kept apart from training episodes.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

pub fn train(config: &TrainConfig, env_spec: &EnvSpec, kind: ModelKind) -> Result<TrainOutcome> {
    train_with(config, env_spec, kind, |_, _| Ok(()))
}

/// Runs the full loop and calls `on_epoch(epoch, &model)` after each epoch's
/// evaluation.
pub fn train_with(
    config: &TrainConfig,
    env_spec: &EnvSpec,
    kind: ModelKind,
    mut on_epoch: impl FnMut(&CurvePoint, &QModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let env = env_spec.build()?;
    let n = env.n_agents();
    if kind == ModelKind::PairVdn && n < 2 {
        return Err(Error::invalid("pairvdn needs at least 2 agents"));
    }
    let sizes = kind.layer_sizes(env.obs_dim(), n, env.num_actions(), &config.hidden);
    let params = MlpParams::init(&sizes, &mut rng)?;
    let mut target = params.clone();
    let mut model = QModel { kind, params };
    let schedule = config.schedule()?;
    let mut buffer = ReplayBuffer::new(config.buffer_size)?;
    let mut collector = Collector::new(env, config.seed.wrapping_mul(1_000_003));
    let mut eval_env = env_spec.build()?;
    let eval_t_max = match env_spec {
        EnvSpec::BoxJump(cfg) => cfg.t_max,
        EnvSpec::Matrix(_) => 1,
    };
    let mut curve = Vec::with_capacity(config.epochs);
    let mut env_steps = 0;
    let mut sgd_steps = 0;
    let mut last_loss = f64::NAN;

    for epoch in 1..=config.epochs {
        for _ in 0..config.explore_per_epoch {
            let eps = schedule.value(env_steps);
            collector.collect(&model, eps, 1, &mut buffer, &mut rng)?;
            env_steps += 1;

            let batch = buffer.sample(config.batch_size, &mut rng)?;
            let ys = td_targets(kind, &target, &batch, config.gamma)?;
            let (loss, grad) = loss_and_grad_for_targets(kind, &model.params, &batch, &ys)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: sgd_steps,
                    loss,
                });
            }
            model.params.sgd_step_in_place(&grad, config.lr)?;
            ema_update_in_place(&mut target, &model.params, config.ema_c)?;
            sgd_steps += 1;
            last_loss = loss;
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: sgd_steps,
                loss: last_loss,
            });
        }

        let seed_base = EVAL_SEED_OFFSET + (epoch * config.eval_episodes) as u64;
        let (stats, _) = evaluate(
            eval_env.as_mut(),
            &mut Policy::Greedy(&model),
            config.eval_episodes,
            eval_t_max,
            seed_base,
        )?;
        let point = CurvePoint {
            epoch,
            mean_reward: stats.mean,
            std_reward: stats.std,
        };
        on_epoch(&point, &model)?;
        curve.push(point);
    }

    Ok(TrainOutcome {
        model,
        target,
        curve,
        env_steps,
        sgd_steps,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(reward: f64) -> Transition {
        let o = JointObservation::new(2, 1, vec![0.0, 0.0]).unwrap();
        Transition {
            obs: o.clone(),
            actions: vec![0, 0],
            reward,
            next_obs: o,
            done: true,
        }
    }

    #[test]
    fn ring_buffer_drops_oldest() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for k in 0..8 {
            b.push(dummy(k as f64));
        }
        assert_eq!(b.len(), 5);
        let rewards: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn sampling_needs_items() {
        let b = ReplayBuffer::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(4, &mut rng).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = EpsilonSchedule::new(1.0, 0.05, 40_000).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(39_999), 0.05);
        assert_eq!(s.value(50_000), 0.05);
        assert!(EpsilonSchedule::new(0.1, 0.5, 10).is_err());
    }

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.gamma, 0.99);
        assert_eq!(c.ema_c, 0.99);
        assert_eq!((c.eps_start, c.eps_end), (1.0, 0.05));
        assert_eq!(c.explore_per_epoch, 400);
        assert_eq!(c.hidden, vec![128, 128]);
        assert_eq!(c.buffer_size, 20_000);
    }

    #[test]
    fn mean_std_population() {
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn curve_format() {
        let c = [CurvePoint { epoch: 1, mean_reward: 2.5, std_reward: 0.0 }];
        assert_eq!(format_curve(&c), "epoch,mean_reward,std_reward\n1,2.5,0\n");
    }
}
