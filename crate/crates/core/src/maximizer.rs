//! Exact maximization of pairwise-decomposed joint values.
//!
//! The objective is `F(a) = Σᵢ wᵢ · Tᵢ[aᵢ][a_{edge(i)}]`, one table per agent,
//! where `edge` maps each agent to a partner. On the canonical cycle
//! `edge(i) = (i + 1) mod n` this is solved by fixing the first agent's action
//! and running a chain DP (`O(n·|A|³)` time). Arbitrary functional graphs are
//! peeled into pendant trees, folded into per-node potentials, and then each
//! remaining cycle is closed with the same recurrence.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on `|A|ⁿ` for the brute-force oracle.
pub const BRUTEFORCE_CAP: f64 = 1e7;

/// One `|A|×|A|` table per agent plus a scalar weight per table.
///
/// `get(i, a, b)` is the value of agent `i`'s term when `aᵢ = a` and its
/// partner takes `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTableSet {
    n: usize,
    num_actions: usize,
    /// Flat, `tables[i * A * A + a * A + b]`.
    tables: Vec<f64>,
    weights: Vec<f64>,
}

impl PairwiseTableSet {
    /// Builds a table set with unit weights from a flat row-major buffer.
    pub fn from_flat(n: usize, num_actions: usize, tables: Vec<f64>) -> Result<Self> {
        Self::with_weights(n, num_actions, tables, vec![1.0; n])
    }

    pub fn with_weights(
        n: usize,
        num_actions: usize,
        tables: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 agents, got {n}")));
        }
        if num_actions < 1 {
            return Err(Error::invalid("num_actions must be >= 1"));
        }
        let expected = n * num_actions * num_actions;
        if tables.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} table entries for n={n}, |A|={num_actions}, got {}",
                tables.len()
            )));
        }
        if weights.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} weights, got {}",
                weights.len()
            )));
        }
        if let Some(pos) = tables.iter().position(|v| !v.is_finite()) {
            let per = num_actions * num_actions;
            return Err(Error::invalid(format!(
                "non-finite value {} in table {} at ({}, {})",
                tables[pos],
                pos / per,
                (pos % per) / num_actions,
                pos % num_actions
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("non-finite weight at index {i}")));
        }
        Ok(Self {
            n,
            num_actions,
            tables,
            weights,
        })
    }

    /// Builds from nested tables, `tables[i][a][b]`.
    pub fn from_nested(tables: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = tables.len();
        let num_actions = tables.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * num_actions * num_actions);
        for (i, t) in tables.iter().enumerate() {
            if t.len() != num_actions || t.iter().any(|row| row.len() != num_actions) {
                return Err(Error::invalid(format!(
                    "table {i} is not {num_actions}x{num_actions}"
                )));
            }
            for row in t {
                flat.extend_from_slice(row);
            }
        }
        Self::from_flat(n, num_actions, flat)
    }

    pub fn zeros(n: usize, num_actions: usize) -> Result<Self> {
        Self::from_flat(n, num_actions, vec![0.0; n * num_actions * num_actions])
    }

    /// Uniform random entries in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        num_actions: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let tables = (0..n * num_actions * num_actions)
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Self::from_flat(n, num_actions, tables)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.n || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights must be n finite values"));
        }
        self.weights = weights;
        Ok(())
    }

    #[inline]
    pub fn get(&self, agent: usize, a: usize, b: usize) -> f64 {
        let na = self.num_actions;
        self.tables[agent * na * na + a * na + b]
    }

    /// Row-major `|A|×|A|` slice for one agent.
    pub fn table(&self, agent: usize) -> &[f64] {
        let per = self.num_actions * self.num_actions;
        &self.tables[agent * per..(agent + 1) * per]
    }

    pub fn table_mut(&mut self, agent: usize) -> &mut [f64] {
        let per = self.num_actions * self.num_actions;
        &mut self.tables[agent * per..(agent + 1) * per]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.tables
    }

    /// Table `i` multiplied through by `wᵢ`, entry by entry.
    fn scaled_table(&self, agent: usize) -> Vec<f64> {
        let w = self.weights[agent];
        self.table(agent).iter().map(|v| w * v).collect()
    }
}

/// Which partner each agent's pairwise term refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorTopology {
    edge: Vec<usize>,
}

impl FactorTopology {
    /// Canonical cycle `i → (i + 1) mod n`.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("cycle needs n >= 2, got {n}")));
        }
        Ok(Self {
            edge: (0..n).map(|i| (i + 1) % n).collect(),
        })
    }

    /// Any functional graph: one outgoing edge per node, no self loops.
    pub fn functional(edge: Vec<usize>) -> Result<Self> {
        let n = edge.len();
        if n < 2 {
            return Err(Error::invalid(format!("topology needs n >= 2, got {n}")));
        }
        for (i, &j) in edge.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid(format!(
                    "edge {i} -> {j} points outside [0, {n})"
                )));
            }
            if j == i {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
        }
        Ok(Self { edge })
    }

    /// A uniformly random functional graph without self loops.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("topology needs n >= 2, got {n}")));
        }
        let edge = (0..n)
            .map(|i| {
                let j = rng.gen_range(0..n - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        Ok(Self { edge })
    }

    pub fn n(&self) -> usize {
        self.edge.len()
    }

    pub fn edge(&self, i: usize) -> usize {
        self.edge[i]
    }

    pub fn edges(&self) -> &[usize] {
        &self.edge
    }

    pub fn is_canonical_cycle(&self) -> bool {
        let n = self.edge.len();
        self.edge.iter().enumerate().all(|(i, &j)| j == (i + 1) % n)
    }

    /// Splits the graph into its cycles and the tree nodes hanging off them.
    ///
    /// Tree nodes are returned leaf-first: every node appears after all nodes
    /// whose edge points at it.
    pub fn decompose(&self) -> Decomposition {
        let n = self.edge.len();
        let mut indegree = vec![0usize; n];
        for &j in &self.edge {
            indegree[j] += 1;
        }
        let mut tree_order: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut head = 0;
        while head < tree_order.len() {
            let j = self.edge[tree_order[head]];
            indegree[j] -= 1;
            if indegree[j] == 0 {
                tree_order.push(j);
            }
            head += 1;
        }

        let mut on_cycle = vec![false; n];
        for i in 0..n {
            on_cycle[i] = indegree[i] > 0;
        }
        let mut seen = vec![false; n];
        let mut cycles = Vec::new();
        for start in 0..n {
            if !on_cycle[start] || seen[start] {
                continue;
            }
            let mut cyc = Vec::new();
            let mut v = start;
            while !seen[v] {
                seen[v] = true;
                cyc.push(v);
                v = self.edge[v];
            }
            cycles.push(cyc);
        }
        Decomposition { cycles, tree_order }
    }
}

/// Cycles (each in edge order, starting from its smallest node) and the
/// leaf-to-root order of all non-cycle nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    pub cycles: Vec<Vec<usize>>,
    pub tree_order: Vec<usize>,
}

/// A maximizing joint action together with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub actions: Vec<usize>,
    pub value: f64,
}

fn check_actions(q: &PairwiseTableSet, actions: &[usize]) -> Result<()> {
    if actions.len() != q.n {
        return Err(Error::invalid(format!(
            "expected {} actions, got {}",
            q.n,
            actions.len()
        )));
    }
    if let Some(i) = actions.iter().position(|&a| a >= q.num_actions) {
        return Err(Error::invalid(format!(
            "action {} of agent {i} outside [0, {})",
            actions[i], q.num_actions
        )));
    }
    Ok(())
}

fn check_topology(q: &PairwiseTableSet, topo: &FactorTopology) -> Result<()> {
    if topo.n() != q.n {
        return Err(Error::invalid(format!(
            "topology has {} nodes but table set has {} agents",
            topo.n(),
            q.n
        )));
    }
    Ok(())
}

/// `Σᵢ wᵢ · Tᵢ[aᵢ][a_{edge(i)}]`, summed in agent order.
pub fn evaluate_joint(q: &PairwiseTableSet, topo: &FactorTopology, actions: &[usize]) -> Result<f64> {
    check_topology(q, topo)?;
    check_actions(q, actions)?;
    let mut total = 0.0;
    for i in 0..q.n {
        total += q.weights[i] * q.get(i, actions[i], actions[topo.edge(i)]);
    }
    Ok(total)
}

/// Exhaustive search over `|A|ⁿ` joint actions. Ties go to the
/// lexicographically smallest action vector.
pub fn argmax_bruteforce(q: &PairwiseTableSet, topo: &FactorTopology) -> Result<Maximum> {
    argmax_bruteforce_capped(q, topo, BRUTEFORCE_CAP)
}

pub fn argmax_bruteforce_capped(
    q: &PairwiseTableSet,
    topo: &FactorTopology,
    cap: f64,
) -> Result<Maximum> {
    check_topology(q, topo)?;
    let size = (q.num_actions as f64).powi(q.n as i32);
    if size > cap {
        return Err(Error::TooLarge { size, cap });
    }
    let mut current = vec![0usize; q.n];
    let mut best = Maximum {
        actions: current.clone(),
        value: evaluate_joint(q, topo, &current)?,
    };
    loop {
        // odometer with the last agent varying fastest => lexicographic order
        let mut pos = q.n;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < q.num_actions {
                break;
            }
            current[pos] = 0;
        }
        let value = evaluate_joint(q, topo, &current)?;
        if value > best.value {
            best.value = value;
            best.actions.copy_from_slice(&current);
        }
    }
}

/// Layered tables of the cycle DP.
///
/// Layer `k` (for `k = 2..=n`) covers agents `0..k`: `g(k, a₀, a_{k-1})` is the
/// best sum of the first `k − 1` weighted terms with both endpoint actions
/// fixed, and `p(k, a₀, a_{k-1})` is the maximizing action of agent `k − 2`.
#[derive(Debug, Clone)]
pub struct DpState {
    n: usize,
    num_actions: usize,
    g: Vec<f64>,
    p: Vec<u32>,
}

impl DpState {
    /// Runs the forward recurrence on the canonical cycle. Weights are applied
    /// by pre-scaling each table.
    pub fn build(q: &PairwiseTableSet) -> Self {
        let n = q.n;
        let na = q.num_actions;
        let per = na * na;
        // layers 2..=n stored at index k - 2
        let mut g = vec![0.0; (n - 1) * per];
        let mut p = vec![0u32; (n - 1) * per];

        g[..per].copy_from_slice(&q.scaled_table(0));
        for k in 2..n {
            // extend layer k (ending at agent k-1) by term k-1 to agent k
            let term = q.scaled_table(k - 1);
            let (done, rest) = g.split_at_mut((k - 1) * per);
            let prev = &done[(k - 2) * per..];
            let next = &mut rest[..per];
            let back = &mut p[(k - 1) * per..k * per];
            for a0 in 0..na {
                let prev_row = &prev[a0 * na..(a0 + 1) * na];
                for b in 0..na {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u32;
                    for (c, &gc) in prev_row.iter().enumerate() {
                        let v = gc + term[c * na + b];
                        if v > best {
                            best = v;
                            arg = c as u32;
                        }
                    }
                    next[a0 * na + b] = best;
                    back[a0 * na + b] = arg;
                }
            }
        }
        Self {
            n,
            num_actions: na,
            g,
            p,
        }
    }

    /// `G_k(a₀, a_{k-1})` for `2 ≤ k ≤ n`.
    pub fn g(&self, k: usize, a0: usize, ak: usize) -> f64 {
        assert!((2..=self.n).contains(&k), "layer {k} outside 2..={}", self.n);
        let per = self.num_actions * self.num_actions;
        self.g[(k - 2) * per + a0 * self.num_actions + ak]
    }

    /// Backpointer into layer `k` for `3 ≤ k ≤ n`: the action of agent `k − 2`.
    pub fn p(&self, k: usize, a0: usize, ak: usize) -> usize {
        assert!((3..=self.n).contains(&k), "layer {k} outside 3..={}", self.n);
        let per = self.num_actions * self.num_actions;
        self.p[(k - 2) * per + a0 * self.num_actions + ak] as usize
    }

    /// Closes the loop with the last term and backtracks.
    fn close(&self, q: &PairwiseTableSet) -> Maximum {
        let n = self.n;
        let na = self.num_actions;
        let last = q.scaled_table(n - 1);
        let mut best = f64::NEG_INFINITY;
        let (mut best_a0, mut best_an) = (0, 0);
        for a0 in 0..na {
            for an in 0..na {
                let v = self.g(n, a0, an) + last[an * na + a0];
                if v > best {
                    best = v;
                    best_a0 = a0;
                    best_an = an;
                }
            }
        }
        let mut actions = vec![0usize; n];
        actions[0] = best_a0;
        actions[n - 1] = best_an;
        for k in (3..=n).rev() {
            actions[k - 2] = self.p(k, best_a0, actions[k - 1]);
        }
        Maximum {
            actions,
            value: best,
        }
    }
}

/// Exact maximum of the cyclic objective `Σᵢ wᵢ Tᵢ[aᵢ][a_{(i+1) mod n}]`.
///
/// The returned value is accumulated in agent order, so it equals
/// [`evaluate_joint`] on the returned actions bit for bit.
pub fn argmax_cycle(q: &PairwiseTableSet) -> Result<Maximum> {
    if q.tables.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in pairwise tables"));
    }
    Ok(DpState::build(q).close(q))
}

/// Exact maximum over an arbitrary functional-graph topology.
///
/// Pendant trees are folded leaf-to-root into per-node potentials
/// (`O(|A|²)` per tree node); each cycle is then solved by the chain
/// recurrence with those potentials added (`O(|A|³)` per cycle node).
/// The returned value is [`evaluate_joint`] of the reconstructed actions.
pub fn argmax_graph(q: &PairwiseTableSet, topo: &FactorTopology) -> Result<Maximum> {
    check_topology(q, topo)?;
    if q.tables.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in pairwise tables"));
    }
    let n = q.n;
    let na = q.num_actions;
    let Decomposition { cycles, tree_order } = topo.decompose();

    // potential[v][a]: best total of all subtrees hanging into v given a_v = a
    let mut potential = vec![0.0; n * na];
    // choice[u * na + b]: best a_u for a tree node u given its parent's action b
    let mut choice = vec![0u32; n * na];
    for &u in &tree_order {
        let parent = topo.edge(u);
        let w = q.weights[u];
        let t = q.table(u);
        for b in 0..na {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0u32;
            for a in 0..na {
                let v = potential[u * na + a] + w * t[a * na + b];
                if v > best {
                    best = v;
                    arg = a as u32;
                }
            }
            choice[u * na + b] = arg;
            potential[parent * na + b] += best;
        }
    }

    let mut actions = vec![0usize; n];
    for cyc in &cycles {
        solve_cycle_with_potentials(q, cyc, &potential, &mut actions);
    }
    for &u in tree_order.iter().rev() {
        actions[u] = choice[u * na + actions[topo.edge(u)]] as usize;
    }
    let value = evaluate_joint(q, topo, &actions)?;
    Ok(Maximum { actions, value })
}

/// Chain DP around one cycle `c₀ → c₁ → … → c_{m-1} → c₀` with unary
/// potentials on every cycle node. Writes the cycle nodes' actions.
fn solve_cycle_with_potentials(
    q: &PairwiseTableSet,
    cyc: &[usize],
    potential: &[f64],
    actions: &mut [usize],
) {
    let na = q.num_actions;
    let per = na * na;
    let m = cyc.len();
    let unary = |node: usize, a: usize| potential[node * na + a];
    let term = |node: usize, a: usize, b: usize| q.weights[node] * q.get(node, a, b);

    // layer k ends at cyc[k-1]; layer 1 is the diagonal (a0 fixed, end = a0)
    let mut g = vec![f64::NEG_INFINITY; per];
    for a0 in 0..na {
        g[a0 * na + a0] = unary(cyc[0], a0);
    }
    let mut back = Vec::with_capacity(m.saturating_sub(1));
    for k in 1..m {
        let from = cyc[k - 1];
        let to = cyc[k];
        let mut next = vec![f64::NEG_INFINITY; per];
        let mut ptr = vec![0u32; per];
        for a0 in 0..na {
            for b in 0..na {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u32;
                for c in 0..na {
                    let v = g[a0 * na + c] + term(from, c, b);
                    if v > best {
                        best = v;
                        arg = c as u32;
                    }
                }
                next[a0 * na + b] = best + unary(to, b);
                ptr[a0 * na + b] = arg;
            }
        }
        g = next;
        back.push(ptr);
    }

    let closing = cyc[m - 1];
    let mut best = f64::NEG_INFINITY;
    let (mut best_a0, mut best_end) = (0, 0);
    for a0 in 0..na {
        for end in 0..na {
            let v = g[a0 * na + end] + term(closing, end, a0);
            if v > best {
                best = v;
                best_a0 = a0;
                best_end = end;
            }
        }
    }
    actions[cyc[0]] = best_a0;
    actions[cyc[m - 1]] = best_end;
    for k in (1..m).rev() {
        let prev = back[k - 1][best_a0 * na + actions[cyc[k]]] as usize;
        actions[cyc[k - 1]] = prev;
    }
}

/// One row of [`bench_scaling`] output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub mean_seconds: f64,
}

/// Times [`argmax_cycle`] on random instances, `trials` per size. Instance
/// generation is excluded from the timings.
pub fn bench_scaling(n_list: &[usize], num_actions: usize, trials: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let instances = (0..trials)
            .map(|_| PairwiseTableSet::random(n, num_actions, -1.0, 1.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        // warm-up so first-touch page faults are not charged to trial 0
        std::hint::black_box(argmax_cycle(&instances[0])?);
        let mut total = 0.0;
        for q in &instances {
            let start = Instant::now();
            let m = argmax_cycle(q)?;
            total += start.elapsed().as_secs_f64();
            std::hint::black_box(m);
        }
        rows.push(BenchRow {
            n,
            mean_seconds: total / trials as f64,
        });
    }
    Ok(rows)
}

/// `n,mean_seconds` lines, one per row.
pub fn format_bench_rows(rows: &[BenchRow]) -> String {
    rows.iter()
        .map(|r| format!("{},{}\n", r.n, r.mean_seconds))
        .collect()
}
