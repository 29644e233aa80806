//! PairVDN, VDN and IQL on top of one shared MLP.
//!
//! Every agent (or agent pair) is evaluated with the same parameters; agents
//! are told apart by a one-hot identifier appended to their observation.
//! PairVDN feeds `concat(oᵢ, o_{(i+1) mod n})` and reshapes the `|A|²` head
//! into a table with rows indexed by `aᵢ` and columns by `a_{i+1}`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maximizer::{argmax_cycle, evaluate_joint, FactorTopology, PairwiseTableSet};
use crate::nn::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    PairVdn,
    Vdn,
    Iql,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::PairVdn => "pairvdn",
            ModelKind::Vdn => "vdn",
            ModelKind::Iql => "iql",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ModelKind::PairVdn => 0,
            ModelKind::Vdn => 1,
            ModelKind::Iql => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::PairVdn),
            1 => Some(ModelKind::Vdn),
            2 => Some(ModelKind::Iql),
            _ => None,
        }
    }

    /// Width of one network input for `n` agents with `obs_dim` features.
    pub fn input_dim(self, obs_dim: usize, n: usize) -> usize {
        match self {
            ModelKind::PairVdn => 2 * (obs_dim + n),
            ModelKind::Vdn | ModelKind::Iql => obs_dim + n,
        }
    }

    pub fn output_dim(self, num_actions: usize) -> usize {
        match self {
            ModelKind::PairVdn => num_actions * num_actions,
            ModelKind::Vdn | ModelKind::Iql => num_actions,
        }
    }

    /// `[input, hidden..., output]` for this kind.
    pub fn layer_sizes(self, obs_dim: usize, n: usize, num_actions: usize, hidden: &[usize]) -> Vec<usize> {
        std::iter::once(self.input_dim(obs_dim, n))
            .chain(hidden.iter().copied())
            .chain(std::iter::once(self.output_dim(num_actions)))
            .collect()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pairvdn" | "pair_vdn" | "pvdn" => Ok(ModelKind::PairVdn),
            "vdn" => Ok(ModelKind::Vdn),
            "iql" => Ok(ModelKind::Iql),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Raw per-agent observations. The one-hot agent id is appended when a
/// network input is built, so [`JointObservation::agent_input`] has width
/// `obs_dim + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObservation {
    n: usize,
    obs_dim: usize,
    data: Vec<f64>,
}

impl JointObservation {
    pub fn new(n: usize, obs_dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("joint observation needs at least one agent"));
        }
        if data.len() != n * obs_dim {
            return Err(Error::invalid(format!(
                "expected {} observation values for {n} agents x {obs_dim}, got {}",
                n * obs_dim,
                data.len()
            )));
        }
        Ok(Self { n, obs_dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let obs_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != obs_dim) {
            return Err(Error::invalid("observation rows differ in width"));
        }
        Self::new(n, obs_dim, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Raw observation of one agent, without the id block.
    pub fn raw(&self, agent: usize) -> &[f64] {
        &self.data[agent * self.obs_dim..(agent + 1) * self.obs_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Observation of `agent` followed by its one-hot id.
    pub fn agent_input(&self, agent: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim + self.n);
        self.push_agent(agent, &mut v);
        v
    }

    /// `concat(agent_input(i), agent_input(j))`.
    pub fn pair_input(&self, i: usize, j: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (self.obs_dim + self.n));
        self.push_agent(i, &mut v);
        self.push_agent(j, &mut v);
        v
    }

    fn push_agent(&self, agent: usize, v: &mut Vec<f64>) {
        v.extend_from_slice(self.raw(agent));
        let base = v.len();
        v.resize(base + self.n, 0.0);
        v[base + agent] = 1.0;
    }

    /// Network input for term `i` under `kind`.
    pub fn input_for(&self, kind: ModelKind, i: usize) -> Vec<f64> {
        match kind {
            ModelKind::PairVdn => self.pair_input(i, (i + 1) % self.n),
            ModelKind::Vdn | ModelKind::Iql => self.agent_input(i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QOutput {
    Pair(PairwiseTableSet),
    PerAgent {
        num_actions: usize,
        /// `values[i][a]`.
        values: Vec<Vec<f64>>,
    },
}

impl QOutput {
    pub fn n(&self) -> usize {
        match self {
            QOutput::Pair(q) => q.n(),
            QOutput::PerAgent { values, .. } => values.len(),
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            QOutput::Pair(q) => q.num_actions(),
            QOutput::PerAgent { num_actions, .. } => *num_actions,
        }
    }
}

fn check_kind_output(kind: ModelKind, q: &QOutput) -> Result<()> {
    match (kind, q) {
        (ModelKind::PairVdn, QOutput::Pair(_)) => Ok(()),
        (ModelKind::Vdn | ModelKind::Iql, QOutput::PerAgent { .. }) => Ok(()),
        _ => Err(Error::invalid(format!("Q output does not match model kind {kind}"))),
    }
}

/// Number of actions implied by the network head for `kind`.
pub fn num_actions_for(kind: ModelKind, params: &MlpParams) -> Result<usize> {
    let out = params.output_dim();
    match kind {
        ModelKind::PairVdn => {
            let a = (out as f64).sqrt().round() as usize;
            if a * a != out {
                return Err(Error::invalid(format!(
                    "pair network output {out} is not a square |A|^2"
                )));
            }
            Ok(a)
        }
        ModelKind::Vdn | ModelKind::Iql => Ok(out),
    }
}

fn check_input_width(kind: ModelKind, params: &MlpParams, jo: &JointObservation) -> Result<()> {
    let want = kind.input_dim(jo.obs_dim, jo.n);
    if params.input_dim() != want {
        return Err(Error::invalid(format!(
            "{kind} network takes {} inputs but {} agents x {} obs need {want}",
            params.input_dim(),
            jo.n,
            jo.obs_dim
        )));
    }
    if kind == ModelKind::PairVdn && jo.n < 2 {
        return Err(Error::invalid("pairvdn needs at least 2 agents"));
    }
    Ok(())
}

pub fn compute_q(kind: ModelKind, params: &MlpParams, jo: &JointObservation) -> Result<QOutput> {
    check_input_width(kind, params, jo)?;
    let num_actions = num_actions_for(kind, params)?;
    match kind {
        ModelKind::PairVdn => {
            let mut flat = Vec::with_capacity(jo.n * num_actions * num_actions);
            for i in 0..jo.n {
                flat.extend(params.forward(&jo.input_for(kind, i))?);
            }
            Ok(QOutput::Pair(PairwiseTableSet::from_flat(jo.n, num_actions, flat)?))
        }
        ModelKind::Vdn | ModelKind::Iql => {
            let values = (0..jo.n)
                .map(|i| params.forward(&jo.input_for(kind, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(QOutput::PerAgent {
                num_actions,
                values,
            })
        }
    }
}

fn check_actions(q: &QOutput, actions: &[usize]) -> Result<()> {
    if actions.len() != q.n() {
        return Err(Error::invalid(format!(
            "expected {} actions, got {}",
            q.n(),
            actions.len()
        )));
    }
    if let Some(&a) = actions.iter().find(|&&a| a >= q.num_actions()) {
        return Err(Error::invalid(format!(
            "action {a} outside [0, {})",
            q.num_actions()
        )));
    }
    Ok(())
}

/// Scalar joint value. IQL has none; use [`per_agent_values`].
pub fn joint_value(kind: ModelKind, q: &QOutput, actions: &[usize]) -> Result<f64> {
    check_kind_output(kind, q)?;
    check_actions(q, actions)?;
    match (kind, q) {
        (ModelKind::Iql, _) => Err(Error::Unsupported(
            "IQL has no joint value; use per-agent values".into(),
        )),
        (_, QOutput::Pair(tables)) => evaluate_joint(tables, &FactorTopology::cycle(tables.n())?, actions),
        (_, QOutput::PerAgent { values, .. }) => {
            Ok(values.iter().zip(actions).map(|(v, &a)| v[a]).sum())
        }
    }
}

/// `qᵢ[aᵢ]` for each agent (VDN and IQL only).
pub fn per_agent_values(q: &QOutput, actions: &[usize]) -> Result<Vec<f64>> {
    check_actions(q, actions)?;
    match q {
        QOutput::PerAgent { values, .. } => {
            Ok(values.iter().zip(actions).map(|(v, &a)| v[a]).collect())
        }
        QOutput::Pair(_) => Err(Error::Unsupported(
            "pairwise output has no per-agent values".into(),
        )),
    }
}

/// Index of the first maximum.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

pub fn greedy_actions(kind: ModelKind, q: &QOutput) -> Result<Vec<usize>> {
    check_kind_output(kind, q)?;
    match q {
        QOutput::Pair(tables) => Ok(argmax_cycle(tables)?.actions),
        QOutput::PerAgent { values, .. } => Ok(values.iter().map(|v| argmax(v).0).collect()),
    }
}

/// One environment step as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: JointObservation,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_obs: JointObservation,
    pub done: bool,
}

/// Max target value for one next observation: scalar for PairVDN/VDN,
/// one value per agent for IQL.
fn max_next(kind: ModelKind, target: &MlpParams, next: &JointObservation) -> Result<Vec<f64>> {
    let q = compute_q(kind, target, next)?;
    match q {
        QOutput::Pair(tables) => Ok(vec![argmax_cycle(&tables)?.value]),
        QOutput::PerAgent { values, .. } => {
            let maxes = values.iter().map(|v| argmax(v).1);
            Ok(match kind {
                ModelKind::Vdn => vec![maxes.sum()],
                _ => maxes.collect(),
            })
        }
    }
}

/// TD targets `y = r + γ·max Q⁻(next)` (`y = r` on terminal steps).
///
/// PairVDN and VDN give one target per transition. IQL gives `n` per
/// transition, transition-major.
pub fn td_targets(
    kind: ModelKind,
    target: &MlpParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut ys = Vec::new();
    for t in batch {
        let width = if kind == ModelKind::Iql { t.obs.n() } else { 1 };
        if t.done || gamma == 0.0 {
            ys.extend(std::iter::repeat_n(t.reward, width));
        } else {
            ys.extend(max_next(kind, target, &t.next_obs)?.into_iter().map(|m| t.reward + gamma * m));
        }
    }
    Ok(ys)
}

/// Mean squared TD error and its gradient with respect to the online
/// parameters. For IQL the per-agent squared errors of a transition are
/// summed before averaging over the batch.
pub fn td_loss_and_grad(
    kind: ModelKind,
    params: &MlpParams,
    target: &MlpParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<(f64, MlpParams)> {
    let ys = td_targets(kind, target, batch, gamma)?;
    loss_and_grad_for_targets(kind, params, batch, &ys)
}

/// Loss and gradient against fixed targets `ys` (as laid out by
/// [`td_targets`]).
pub fn loss_and_grad_for_targets(
    kind: ModelKind,
    params: &MlpParams,
    batch: &[Transition],
    ys: &[f64],
) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let num_actions = num_actions_for(kind, params)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let mut y_idx = 0;
    let mut upstream = vec![0.0; params.output_dim()];
    for t in batch {
        check_input_width(kind, params, &t.obs)?;
        let n = t.obs.n();
        if t.actions.len() != n || t.actions.iter().any(|&a| a >= num_actions) {
            return Err(Error::invalid("transition actions do not match model"));
        }
        let traces = (0..n)
            .map(|i| params.forward_trace(&t.obs.input_for(kind, i)))
            .collect::<Result<Vec<_>>>()?;
        let selected = |i: usize| -> usize {
            match kind {
                ModelKind::PairVdn => t.actions[i] * num_actions + t.actions[(i + 1) % n],
                _ => t.actions[i],
            }
        };
        match kind {
            ModelKind::PairVdn | ModelKind::Vdn => {
                let mut q = 0.0;
                for (i, tr) in traces.iter().enumerate() {
                    q += tr.output()[selected(i)];
                }
                let err = q - ys[y_idx];
                y_idx += 1;
                loss += err * err;
                let d = 2.0 * err * scale;
                for (i, tr) in traces.iter().enumerate() {
                    upstream.fill(0.0);
                    upstream[selected(i)] = d;
                    params.backward_accumulate(tr, &upstream, &mut grad)?;
                }
            }
            ModelKind::Iql => {
                for (i, tr) in traces.iter().enumerate() {
                    let err = tr.output()[selected(i)] - ys[y_idx];
                    y_idx += 1;
                    loss += err * err;
                    upstream.fill(0.0);
                    upstream[selected(i)] = 2.0 * err * scale;
                    params.backward_accumulate(tr, &upstream, &mut grad)?;
                }
            }
        }
    }
    if y_idx != ys.len() {
        return Err(Error::invalid(format!(
            "{} targets supplied, {} used",
            ys.len(),
            y_idx
        )));
    }
    Ok((loss * scale, grad))
}
