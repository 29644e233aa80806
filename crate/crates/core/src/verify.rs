//! Randomized oracle suites run by `pairvdn verify`.
//!
//! Each suite compares an implementation against an independent reference
//! (exhaustive search, central finite differences, telescoping reward sums)
//! and records a printable counterexample for every violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxjump::{BoxJumpConfig, BoxWorldState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::maximizer::{argmax_bruteforce, argmax_cycle, argmax_graph, evaluate_joint, FactorTopology, PairwiseTableSet};
use crate::models::{td_loss_and_grad, JointObservation, ModelKind, Transition};
use crate::nn::MlpParams;

pub const VALUE_TOLERANCE: f64 = 1e-9;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient entries smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Dp,
    Graph,
    Grad,
    Env,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(Suite::Dp),
            "graph" => Ok(Suite::Graph),
            "grad" => Ok(Suite::Grad),
            "env" => Ok(Suite::Env),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}` (expected dp, graph, grad or env)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: usize,
    pub failures: Vec<String>,
    /// Largest observed discrepancy (value gap or relative gradient error).
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, err: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        self.worst = self.worst.max(err);
        if !ok {
            self.failures.push(describe());
        }
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Dp => dp_suite(200, seed),
        Suite::Graph => graph_suite(200, seed),
        Suite::Grad => grad_suite(20, seed),
        Suite::Env => env_suite(100, seed),
    }
}

fn describe_instance(q: &PairwiseTableSet, topo: &FactorTopology) -> String {
    format!(
        "n={} |A|={} edges={:?} weights={:?} tables={:?}",
        q.n(),
        q.num_actions(),
        topo.edges(),
        q.weights(),
        q.as_flat()
    )
}

/// Random canonical-cycle instances against exhaustive search.
pub fn dp_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let na = rng.gen_range(2..=5);
        let q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut rng)?;
        let topo = FactorTopology::cycle(n)?;
        let dp = argmax_cycle(&q)?;
        let brute = argmax_bruteforce(&q, &topo)?;
        let replay = evaluate_joint(&q, &topo, &dp.actions)?;
        let gap = (dp.value - brute.value).abs();
        report.record(gap, gap <= VALUE_TOLERANCE && replay == dp.value, || {
            format!(
                "dp value {} (replayed {replay}) vs brute force {}: {}",
                dp.value,
                brute.value,
                describe_instance(&q, &topo)
            )
        });
    }
    Ok(report)
}

/// Shapes of functional graph drawn by [`random_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphShape {
    /// A single cycle through every node in a random order.
    PureCycle,
    /// One 2-cycle with every other node in trees hanging off it.
    TreesOnTwoCycle,
    /// Unconstrained random functional graph (often several components).
    Mixed,
}

pub fn random_graph<R: Rng + ?Sized>(n: usize, shape: GraphShape, rng: &mut R) -> Result<FactorTopology> {
    match shape {
        GraphShape::PureCycle => {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut edge = vec![0; n];
            for k in 0..n {
                edge[order[k]] = order[(k + 1) % n];
            }
            FactorTopology::functional(edge)
        }
        GraphShape::TreesOnTwoCycle => {
            let mut edge = vec![0; n];
            edge[0] = 1;
            edge[1] = 0;
            for (v, e) in edge.iter_mut().enumerate().skip(2) {
                *e = rng.gen_range(0..v);
            }
            FactorTopology::functional(edge)
        }
        GraphShape::Mixed => FactorTopology::random(n, rng),
    }
}

/// Random functional graphs (with random, possibly negative, weights)
/// against exhaustive search.
pub fn graph_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    let shapes = [GraphShape::PureCycle, GraphShape::TreesOnTwoCycle, GraphShape::Mixed];
    for k in 0..instances {
        let n = rng.gen_range(3..=8);
        let na = rng.gen_range(2..=4);
        let topo = random_graph(n, shapes[k % shapes.len()], &mut rng)?;
        let mut q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut rng)?;
        if k % 2 == 1 {
            q.set_weights((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
        }
        let got = argmax_graph(&q, &topo)?;
        let brute = argmax_bruteforce(&q, &topo)?;
        let gap = (got.value - brute.value).abs();
        report.record(gap, gap <= VALUE_TOLERANCE, || {
            format!(
                "graph value {} vs brute force {}: {}",
                got.value,
                brute.value,
                describe_instance(&q, &topo)
            )
        });
    }
    Ok(report)
}

/// `|a − b| / max(|a|, |b|, FD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of `f` with respect to every parameter of `p`.
pub fn finite_difference(p: &MlpParams, mut f: impl FnMut(&MlpParams) -> f64) -> Vec<f64> {
    let count = p.num_params();
    let mut out = Vec::with_capacity(count);
    let mut work = p.clone();
    for k in 0..count {
        let mut idx = 0;
        let mut original = 0.0;
        work.for_each_param_mut(|v| {
            if idx == k {
                original = *v;
                *v = original + FD_STEP;
            }
            idx += 1;
        });
        let plus = f(&work);
        set_param(&mut work, k, original - FD_STEP);
        let minus = f(&work);
        set_param(&mut work, k, original);
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

fn set_param(p: &mut MlpParams, k: usize, value: f64) {
    let mut idx = 0;
    p.for_each_param_mut(|v| {
        if idx == k {
            *v = value;
        }
        idx += 1;
    });
}

/// Smallest absolute hidden pre-activation over the given inputs, computed
/// with a plain triple loop.
pub fn min_hidden_preactivation(p: &MlpParams, inputs: &[Vec<f64>]) -> f64 {
    let mut closest = f64::INFINITY;
    for x in inputs {
        let mut a = x.clone();
        let last = p.layers().len() - 1;
        for (k, layer) in p.layers().iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = layer.bias()[o];
                for (i, ai) in a.iter().enumerate() {
                    s += layer.weights()[o * layer.in_dim() + i] * ai;
                }
                *zo = s;
            }
            if k != last {
                for v in &mut z {
                    closest = closest.min(v.abs());
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
    }
    closest
}

/// Pre-activations within this distance of zero are treated as kinks.
const KINK_MARGIN: f64 = 1e-3;

/// MLP gradient checks on `trials` random (params, input, upstream) triples,
/// then the TD loss gradient of every model kind on a random batch of 8.
pub fn grad_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    let mut done = 0;
    while done < trials {
        let depth = rng.gen_range(1..=3);
        let mut sizes = vec![rng.gen_range(2..=6)];
        for _ in 0..depth {
            sizes.push(rng.gen_range(2..=7));
        }
        let p = MlpParams::init(&sizes, &mut rng)?;
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if min_hidden_preactivation(&p, std::slice::from_ref(&x)) < KINK_MARGIN {
            continue;
        }
        let up: Vec<f64> = (0..p.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = p.backward(&x, &up)?.flat();
        let numeric = finite_difference(&p, |q| {
            let out = q.forward(&x).expect("shape fixed");
            out.iter().zip(&up).map(|(o, u)| o * u).sum()
        });
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        report.record(worst, worst < FD_TOLERANCE, || {
            format!("mlp sizes {sizes:?}: max relative error {worst:e}")
        });
        done += 1;
    }

    for kind in [ModelKind::PairVdn, ModelKind::Vdn, ModelKind::Iql] {
        let (p, target, batch) = random_td_problem(kind, 8, &mut rng)?;
        let (_, grad) = td_loss_and_grad(kind, &p, &target, &batch, 0.9)?;
        let numeric = finite_difference(&p, |q| {
            td_loss_and_grad(kind, q, &target, &batch, 0.9).expect("shape fixed").0
        });
        let worst = grad
            .flat()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        report.record(worst, worst < FD_TOLERANCE, || {
            format!("{kind} TD loss gradient: max relative error {worst:e}")
        });
    }
    Ok(report)
}

/// Small random network, independent target network and a batch of random
/// transitions, redrawn until no hidden unit sits near its kink.
pub fn random_td_problem<R: Rng + ?Sized>(
    kind: ModelKind,
    batch_size: usize,
    rng: &mut R,
) -> Result<(MlpParams, MlpParams, Vec<Transition>)> {
    let (n, obs_dim, na) = (3, 2, 3);
    let sizes = kind.layer_sizes(obs_dim, n, na, &[6, 5]);
    loop {
        let p = MlpParams::init(&sizes, rng)?;
        let target = MlpParams::init(&sizes, rng)?;
        let mut obs = || -> Result<JointObservation> {
            JointObservation::new(n, obs_dim, (0..n * obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let mut batch = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            let o = obs()?;
            let next = obs()?;
            batch.push(Transition {
                obs: o,
                actions: Vec::new(),
                reward: 0.0,
                next_obs: next,
                done: k % 4 == 3,
            });
        }
        for t in &mut batch {
            t.actions = (0..n).map(|_| rng.gen_range(0..na)).collect();
            t.reward = rng.gen_range(-1.0..1.0);
        }
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .flat_map(|t| (0..n).map(|i| t.obs.input_for(kind, i)))
            .collect();
        if min_hidden_preactivation(&p, &inputs) >= KINK_MARGIN {
            return Ok((p, target, batch));
        }
    }
}

/// Random-policy Box Jump episodes: the reward sum must telescope to
/// `y_best_T − y_best_0` whenever no agent fell off. Episodes with a fall
/// are skipped and do not count towards `episodes`.
pub fn env_suite(episodes: usize, seed: u64) -> Result<SuiteReport> {
    let cfg = BoxJumpConfig::new(8, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    let mut attempt = 0u64;
    while report.cases < episodes {
        if attempt > 50 * episodes as u64 {
            return Err(Error::InvalidState(format!(
                "only {} fall-free episodes in {attempt} attempts",
                report.cases
            )));
        }
        let episode_seed = seed.wrapping_add(attempt);
        attempt += 1;
        let mut state = BoxWorldState::reset(&cfg, episode_seed)?;
        let mut sum = 0.0;
        let mut fell = false;
        let mut monotone = true;
        while !state.is_done() {
            let actions: Vec<usize> = (0..cfg.n_agents).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
            let before = state.y_best();
            let out = state.step(&actions)?;
            monotone &= state.y_best() >= before;
            fell |= out.fell > 0;
            sum += out.reward;
        }
        if fell {
            continue;
        }
        let gap = (sum - (state.y_best() - state.y_best_initial())).abs();
        report.record(gap, gap < 1e-6 && monotone, || {
            format!("episode seed {episode_seed}: reward sum {sum} vs y_best gain {}", state.y_best() - state.y_best_initial())
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names() {
        assert_eq!("dp".parse::<Suite>().unwrap(), Suite::Dp);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn graph_shapes_are_what_they_claim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_graph(6, GraphShape::PureCycle, &mut rng).unwrap();
        let d = c.decompose();
        assert_eq!(d.cycles.len(), 1);
        assert_eq!(d.cycles[0].len(), 6);
        let t = random_graph(6, GraphShape::TreesOnTwoCycle, &mut rng).unwrap();
        let d = t.decompose();
        assert_eq!(d.cycles, vec![vec![0, 1]]);
        assert_eq!(d.tree_order.len(), 4);
    }

    #[test]
    fn small_suites_pass() {
        assert!(dp_suite(20, 1).unwrap().passed());
        assert!(graph_suite(20, 1).unwrap().passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
