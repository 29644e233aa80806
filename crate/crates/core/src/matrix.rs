//! One-shot cooperative matrix games and least-squares fits of the
//! decompositions to their payoffs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Environment, StepResult};
use crate::error::{Error, Result};
use crate::models::{JointObservation, ModelKind};

/// Joint actions beyond this count are not enumerated.
pub const MAX_ENUMERATED: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub enum Payoff {
    /// One point per cycle-adjacent pair `(i, i+1 mod n)` with equal actions.
    Unison,
    /// Explicit payoff per joint action, lexicographic order (last agent
    /// fastest).
    FullTable(Vec<f64>),
    /// A few seeded "jackpot" joint actions; zero elsewhere.
    RandomSparse { seed: u64, entries: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGameSpec {
    n: usize,
    num_actions: usize,
    payoff: Payoff,
    jackpots: Vec<(Vec<usize>, f64)>,
}

impl MatrixGameSpec {
    pub fn unison(n: usize, num_actions: usize) -> Result<Self> {
        Self::new(n, num_actions, Payoff::Unison)
    }

    pub fn new(n: usize, num_actions: usize, payoff: Payoff) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("matrix game needs n >= 2, got {n}")));
        }
        if num_actions < 1 {
            return Err(Error::invalid("num_actions must be >= 1"));
        }
        let mut jackpots = Vec::new();
        match &payoff {
            Payoff::Unison => {}
            Payoff::FullTable(t) => {
                if n > 8 {
                    return Err(Error::invalid("full payoff tables are limited to n <= 8"));
                }
                let size = num_actions.pow(n as u32);
                if t.len() != size {
                    return Err(Error::invalid(format!(
                        "payoff table needs {size} entries, got {}",
                        t.len()
                    )));
                }
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("payoff table has non-finite entries"));
                }
            }
            Payoff::RandomSparse { seed, entries } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                jackpots = (0..*entries)
                    .map(|_| {
                        let a = (0..n).map(|_| rng.gen_range(0..num_actions)).collect();
                        (a, rng.gen_range(0.0..1.0))
                    })
                    .collect();
            }
        }
        Ok(Self {
            n,
            num_actions,
            payoff,
            jackpots,
        })
    }

    /// Reads a text table: `n num_actions` then `num_actions^n` payoffs,
    /// whitespace separated, lexicographic order.
    pub fn from_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = text.split_whitespace();
        let mut header = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::invalid(format!("payoff table missing {what}")))?
                .parse()
                .map_err(|e| Error::invalid(format!("bad {what}: {e}")))
        };
        let n = header("agent count")?;
        let num_actions = header("action count")?;
        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad payoff `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, num_actions, Payoff::FullTable(values))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn payoff_kind(&self) -> &Payoff {
        &self.payoff
    }

    pub fn payoff(&self, actions: &[usize]) -> Result<f64> {
        if actions.len() != self.n || actions.iter().any(|&a| a >= self.num_actions) {
            return Err(Error::invalid(format!(
                "joint action {actions:?} invalid for n={}, |A|={}",
                self.n, self.num_actions
            )));
        }
        Ok(match &self.payoff {
            Payoff::Unison => (0..self.n)
                .filter(|&i| actions[i] == actions[(i + 1) % self.n])
                .count() as f64,
            Payoff::FullTable(t) => t[self.index_of(actions)],
            Payoff::RandomSparse { .. } => self
                .jackpots
                .iter()
                .filter(|(a, _)| a == actions)
                .map(|(_, v)| v)
                .sum(),
        })
    }

    fn index_of(&self, actions: &[usize]) -> usize {
        actions.iter().fold(0, |acc, &a| acc * self.num_actions + a)
    }

    /// Every joint action in lexicographic order.
    pub fn joint_actions(&self) -> Result<Vec<Vec<usize>>> {
        let size = (self.num_actions as f64).powi(self.n as i32);
        if size > MAX_ENUMERATED as f64 {
            return Err(Error::TooLarge {
                size,
                cap: MAX_ENUMERATED as f64,
            });
        }
        let size = size as usize;
        Ok((0..size)
            .map(|mut k| {
                let mut a = vec![0; self.n];
                for slot in a.iter_mut().rev() {
                    *slot = k % self.num_actions;
                    k /= self.num_actions;
                }
                a
            })
            .collect())
    }
}

/// Plays one joint action. Every episode is a single step.
pub fn play(spec: &MatrixGameSpec, actions: &[usize]) -> Result<(f64, bool)> {
    Ok((spec.payoff(actions)?, true))
}

/// Least-squares fit of a decomposition's joint value to the payoff over all
/// joint actions, by full-batch gradient descent on the table entries.
/// Returns the final root-mean-square residual.
///
/// IQL has no joint value; each agent's table is fitted to the payoff on its
/// own and the residual is taken over all agent/joint-action pairs.
pub fn fit_decomposition(kind: ModelKind, spec: &MatrixGameSpec, iterations: usize) -> Result<f64> {
    let joint = spec.joint_actions()?;
    let targets = joint
        .iter()
        .map(|a| spec.payoff(a))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n;
    let na = spec.num_actions;
    let count = joint.len() as f64;

    // term i reads params[offset(i, a) ..]
    let (per_term, index): (usize, Box<dyn Fn(usize, &[usize]) -> usize>) = match kind {
        ModelKind::PairVdn => (
            na * na,
            Box::new(move |i, a: &[usize]| i * na * na + a[i] * na + a[(i + 1) % n]),
        ),
        ModelKind::Vdn | ModelKind::Iql => (na, Box::new(move |i, a: &[usize]| i * na + a[i])),
    };
    let mut params = vec![0.0; n * per_term];
    let mut grad = vec![0.0; params.len()];
    // each entry is hit by count / per_term joint actions; step 1/L on the
    // mean squared error, L = 2·n/per_term for the summed models
    let lr = match kind {
        ModelKind::Iql => per_term as f64 / 2.0,
        _ => per_term as f64 / (2.0 * n as f64),
    };

    let residual_sq = |params: &[f64], grad: Option<&mut [f64]>| -> f64 {
        let mut total = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        for (a, &y) in joint.iter().zip(&targets) {
            match kind {
                ModelKind::Iql => {
                    for i in 0..n {
                        let k = index(i, a);
                        let err = params[k] - y;
                        total += err * err;
                        if let Some(g) = grad.as_deref_mut() {
                            g[k] += 2.0 * err / count;
                        }
                    }
                }
                _ => {
                    let pred: f64 = (0..n).map(|i| params[index(i, a)]).sum();
                    let err = pred - y;
                    total += err * err;
                    if let Some(g) = grad.as_deref_mut() {
                        for i in 0..n {
                            g[index(i, a)] += 2.0 * err / count;
                        }
                    }
                }
            }
        }
        total
    };

    for _ in 0..iterations {
        residual_sq(&params, Some(&mut grad));
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    let terms = if kind == ModelKind::Iql { count * n as f64 } else { count };
    Ok((residual_sq(&params, None) / terms).sqrt())
}

/// Matrix game as a one-step [`Environment`] with a constant observation.
#[derive(Debug, Clone)]
pub struct MatrixEnv {
    spec: MatrixGameSpec,
}

impl MatrixEnv {
    pub fn new(spec: MatrixGameSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &MatrixGameSpec {
        &self.spec
    }

    fn observation(&self) -> JointObservation {
        JointObservation::new(self.spec.n, 1, vec![1.0; self.spec.n])
            .expect("constant observation has a fixed width")
    }
}

impl Environment for MatrixEnv {
    fn n_agents(&self) -> usize {
        self.spec.n
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        self.spec.num_actions
    }

    fn reset(&mut self, _seed: u64) -> Result<JointObservation> {
        Ok(self.observation())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        let (reward, done) = play(&self.spec, actions)?;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done,
        })
    }
}
