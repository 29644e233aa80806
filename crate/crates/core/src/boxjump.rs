//! Box Jump: agents are axis-aligned boxes that push and jump to build a tower.
//!
//! The team is rewarded only when the tallest box top seen so far rises:
//! `r_t = y_best_t − y_best_{t−1}`, minus a fixed penalty for each agent that
//! walks off the map and falls. This is the no-rotation variant, so the angle
//! observation is always zero.
//!
//! Heights are box-top heights: a box resting on the floor has `y = side`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, StepResult};
use crate::error::{Error, Result};
use crate::models::JointObservation;

pub const NUM_ACTIONS: usize = 4;
pub const OBS_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionCode {
    Noop = 0,
    Left = 1,
    Right = 2,
    Jump = 3,
}

impl ActionCode {
    pub fn from_index(a: usize) -> Option<Self> {
        match a {
            0 => Some(ActionCode::Noop),
            1 => Some(ActionCode::Left),
            2 => Some(ActionCode::Right),
            3 => Some(ActionCode::Jump),
            _ => None,
        }
    }
}

/// Physics constants. All lengths in world units (map is `[0, 1]` wide),
/// times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Physics {
    pub box_side: f64,
    pub gravity: f64,
    /// Vertical speed set by a jump.
    pub jump_speed: f64,
    /// Horizontal acceleration from a left/right action.
    pub push_accel: f64,
    /// Per-step multiplier on `vx` while resting on something.
    pub ground_friction: f64,
    pub dt: f64,
    /// Speed clamp on each axis.
    pub max_speed: f64,
    /// A box may jump once `|vy|` has stayed at or below this for
    /// `jump_calm_frames` consecutive frames.
    pub jump_vy_threshold: f64,
    pub jump_calm_frames: usize,
    pub contact_passes: usize,
    pub contact_tolerance: f64,
    pub fall_penalty: f64,
    /// Spawn spacing in box sides, capped at `1/n` of the map.
    pub spawn_spacing: f64,
    /// Spawn jitter as a fraction of the spacing.
    pub spawn_jitter: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            box_side: 0.05,
            gravity: 1.2,
            jump_speed: 0.55,
            push_accel: 0.8,
            ground_friction: 0.9,
            dt: 1.0 / 30.0,
            max_speed: 0.7,
            jump_vy_threshold: 0.01,
            jump_calm_frames: 15,
            contact_passes: 4,
            contact_tolerance: 1e-6,
            fall_penalty: 1.0,
            spawn_spacing: 2.0,
            spawn_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxJumpConfig {
    pub n_agents: usize,
    pub t_max: usize,
    pub physics: Physics,
}

impl BoxJumpConfig {
    pub fn new(n_agents: usize, t_max: usize) -> Self {
        Self {
            n_agents,
            t_max,
            physics: Physics::default(),
        }
    }

    fn spacing(&self) -> f64 {
        let ph = &self.physics;
        (ph.spawn_spacing * ph.box_side).min(1.0 / self.n_agents as f64)
    }

    /// Largest agent count whose jittered spawn positions cannot overlap.
    pub fn max_agents(physics: &Physics) -> usize {
        // (1/n) * (1 - 2 * jitter) must exceed one box side
        let limit = (1.0 - 2.0 * physics.spawn_jitter) / physics.box_side;
        (limit - 1e-9).floor().max(0.0) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::invalid("box jump needs at least one agent"));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("t_max must be >= 1"));
        }
        let cap = Self::max_agents(&self.physics);
        if self.n_agents > cap {
            return Err(Error::invalid(format!(
                "{} agents exceed map capacity of {cap}",
                self.n_agents
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxWorldState {
    cfg: BoxJumpConfig,
    /// Box centre.
    x: Vec<f64>,
    /// Box top.
    y: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    /// Consecutive frames with `|vy|` at or below the jump threshold.
    calm_frames: Vec<usize>,
    fallen: Vec<bool>,
    y_best: f64,
    y_best_initial: f64,
    t_remaining: usize,
}

impl BoxWorldState {
    /// Boxes resting on the floor, evenly spaced around the map centre with
    /// seeded jitter.
    pub fn reset(cfg: &BoxJumpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_agents;
        let spacing = cfg.spacing();
        let jitter = cfg.physics.spawn_jitter * spacing;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = (n as f64 - 1.0) / 2.0;
        let x = (0..n)
            .map(|i| {
                let base = 0.5 + (i as f64 - centre) * spacing;
                let j = if jitter > 0.0 {
                    rng.gen_range(-jitter..=jitter)
                } else {
                    0.0
                };
                base + j
            })
            .collect();
        let side = cfg.physics.box_side;
        Ok(Self::assemble(cfg.clone(), x, vec![side; n]))
    }

    /// Boxes at explicit `(centre x, top y)` positions, at rest.
    pub fn from_positions(cfg: &BoxJumpConfig, positions: &[(f64, f64)]) -> Result<Self> {
        if positions.len() != cfg.n_agents {
            return Err(Error::invalid(format!(
                "expected {} positions, got {}",
                cfg.n_agents,
                positions.len()
            )));
        }
        cfg.validate()?;
        let x = positions.iter().map(|p| p.0).collect();
        let y = positions.iter().map(|p| p.1).collect();
        Ok(Self::assemble(cfg.clone(), x, y))
    }

    fn assemble(cfg: BoxJumpConfig, x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = cfg.n_agents;
        let y_best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            calm_frames: vec![cfg.physics.jump_calm_frames; n],
            t_remaining: cfg.t_max,
            cfg,
            x,
            y,
            vx: vec![0.0; n],
            vy: vec![0.0; n],
            fallen: vec![false; n],
            y_best,
            y_best_initial: y_best,
        }
    }

    pub fn config(&self) -> &BoxJumpConfig {
        &self.cfg
    }

    pub fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    pub fn position(&self, agent: usize) -> (f64, f64) {
        (self.x[agent], self.y[agent])
    }

    pub fn velocity(&self, agent: usize) -> (f64, f64) {
        (self.vx[agent], self.vy[agent])
    }

    pub fn fallen(&self, agent: usize) -> bool {
        self.fallen[agent]
    }

    pub fn y_best(&self) -> f64 {
        self.y_best
    }

    pub fn y_best_initial(&self) -> f64 {
        self.y_best_initial
    }

    pub fn t_remaining(&self) -> usize {
        self.t_remaining
    }

    pub fn is_done(&self) -> bool {
        self.t_remaining == 0
    }

    /// True iff `|vy|` stayed within the threshold for the last
    /// `jump_calm_frames` frames (inclusive bound).
    pub fn can_jump(&self, agent: usize) -> bool {
        !self.fallen[agent] && self.calm_frames[agent] >= self.cfg.physics.jump_calm_frames
    }

    fn over_floor(&self, agent: usize) -> bool {
        (0.0..=1.0).contains(&self.x[agent])
    }

    fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cfg.n_agents).filter(|&i| !self.fallen[i])
    }

    /// `(left, right, up, down)` free distances, each clamped to `[0, 1]`.
    ///
    /// Left/right look for the nearest box overlapping this one vertically;
    /// up/down look for boxes overlapping horizontally, and the floor counts
    /// as an obstacle below. Gaps within the contact tolerance read as zero.
    pub fn ray_distances(&self, agent: usize) -> (f64, f64, f64, f64) {
        let ph = &self.cfg.physics;
        let side = ph.box_side;
        let tol = ph.contact_tolerance;
        let (xi, yi) = (self.x[agent], self.y[agent]);
        let mut left = f64::INFINITY;
        let mut right = f64::INFINITY;
        let mut up = f64::INFINITY;
        let mut down = if self.over_floor(agent) {
            yi - side
        } else {
            f64::INFINITY
        };
        for j in self.active() {
            if j == agent {
                continue;
            }
            let (xj, yj) = (self.x[j], self.y[j]);
            if (yi - yj).abs() < side - tol {
                if xj < xi {
                    left = left.min(xi - xj - side);
                } else if xj > xi {
                    right = right.min(xj - xi - side);
                }
            }
            if (xi - xj).abs() < side - tol {
                if yj < yi {
                    down = down.min(yi - side - yj);
                } else if yj > yi {
                    up = up.min(yj - side - yi);
                }
            }
        }
        let clamp = |d: f64| {
            if d <= tol {
                0.0
            } else {
                d.min(1.0)
            }
        };
        (clamp(left), clamp(right), clamp(up), clamp(down))
    }

    /// Observation of one agent: `x, y, vx, vy, angle, left, right, up, down,
    /// can_jump, y_best, t_remaining / t_max`.
    pub fn agent_observation(&self, agent: usize) -> [f64; OBS_DIM] {
        let ph = &self.cfg.physics;
        let t_frac = self.t_remaining as f64 / self.cfg.t_max as f64;
        let best = self.y_best.clamp(0.0, 1.0);
        if self.fallen[agent] {
            let x = self.x[agent].clamp(0.0, 1.0);
            return [x, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, best, t_frac];
        }
        let (l, r, u, d) = self.ray_distances(agent);
        [
            self.x[agent].clamp(0.0, 1.0),
            self.y[agent].clamp(0.0, 1.0),
            self.vx[agent].clamp(-ph.max_speed, ph.max_speed),
            self.vy[agent].clamp(-ph.max_speed, ph.max_speed),
            0.0,
            l,
            r,
            u,
            d,
            if self.can_jump(agent) { 1.0 } else { 0.0 },
            best,
            t_frac,
        ]
    }

    pub fn observe(&self) -> JointObservation {
        let data = (0..self.cfg.n_agents)
            .flat_map(|i| self.agent_observation(i))
            .collect();
        JointObservation::new(self.cfg.n_agents, OBS_DIM, data)
            .expect("observation width is fixed")
    }

    /// Advances one frame and returns the shared reward.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::InvalidState("episode is finished; call reset".into()));
        }
        let n = self.cfg.n_agents;
        if actions.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        let codes = actions
            .iter()
            .map(|&a| {
                ActionCode::from_index(a)
                    .ok_or_else(|| Error::invalid(format!("action {a} outside [0, {NUM_ACTIONS})")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ph = self.cfg.physics.clone();

        for i in 0..n {
            if self.fallen[i] {
                continue;
            }
            match codes[i] {
                ActionCode::Noop => {}
                ActionCode::Left => self.vx[i] -= ph.push_accel * ph.dt,
                ActionCode::Right => self.vx[i] += ph.push_accel * ph.dt,
                ActionCode::Jump => {
                    if self.can_jump(i) {
                        self.vy[i] = ph.jump_speed;
                    }
                }
            }
            self.vy[i] -= ph.gravity * ph.dt;
            self.vx[i] = self.vx[i].clamp(-ph.max_speed, ph.max_speed);
            self.vy[i] = self.vy[i].clamp(-ph.max_speed, ph.max_speed);
            self.x[i] += self.vx[i] * ph.dt;
            self.y[i] += self.vy[i] * ph.dt;
        }

        self.resolve_contacts();

        for i in 0..n {
            if self.fallen[i] {
                continue;
            }
            if self.resting(i) {
                self.vx[i] *= ph.ground_friction;
            }
            if self.vy[i].abs() <= ph.jump_vy_threshold {
                self.calm_frames[i] = (self.calm_frames[i] + 1).min(ph.jump_calm_frames);
            } else {
                self.calm_frames[i] = 0;
            }
        }

        let mut fell = 0usize;
        for i in 0..n {
            if !self.fallen[i] && self.y[i] < 0.0 {
                self.fallen[i] = true;
                self.vx[i] = 0.0;
                self.vy[i] = 0.0;
                fell += 1;
            }
        }

        let previous = self.y_best;
        for i in self.active().collect::<Vec<_>>() {
            self.y_best = self.y_best.max(self.y[i]);
        }
        let reward = (self.y_best - previous) - ph.fall_penalty * fell as f64;
        self.t_remaining -= 1;
        Ok(StepOutcome {
            reward,
            fell,
            done: self.is_done(),
        })
    }

    /// Whether the box is supported from below (floor or another box).
    fn resting(&self, agent: usize) -> bool {
        let ph = &self.cfg.physics;
        let bottom = self.y[agent] - ph.box_side;
        if self.over_floor(agent) && bottom.abs() <= ph.contact_tolerance {
            return true;
        }
        self.active().any(|j| {
            j != agent
                && (self.x[agent] - self.x[j]).abs() < ph.box_side - ph.contact_tolerance
                && (bottom - self.y[j]).abs() <= ph.contact_tolerance
        })
    }

    /// Iterative positional correction, lowest boxes first.
    fn resolve_contacts(&mut self) {
        let ph = self.cfg.physics.clone();
        let side = ph.box_side;
        let mut order: Vec<usize> = self.active().collect();
        for _ in 0..ph.contact_passes {
            order.sort_by(|&a, &b| self.y[a].total_cmp(&self.y[b]).then(a.cmp(&b)));
            for &i in &order {
                if self.over_floor(i) && self.y[i] < side {
                    // only catch boxes that have not already sunk past the floor
                    if self.y[i] > side - ph.max_speed * ph.dt - ph.contact_tolerance {
                        self.y[i] = side;
                        if self.vy[i] < 0.0 {
                            self.vy[i] = 0.0;
                        }
                    }
                }
            }
            for p in 0..order.len() {
                for q in p + 1..order.len() {
                    let (i, j) = (order[p], order[q]);
                    let overlap_x = side - (self.x[i] - self.x[j]).abs();
                    let overlap_y = side - (self.y[i] - self.y[j]).abs();
                    if overlap_x <= 0.0 || overlap_y <= 0.0 {
                        continue;
                    }
                    if overlap_y <= overlap_x {
                        let (lo, hi) = if self.y[i] <= self.y[j] { (i, j) } else { (j, i) };
                        self.y[hi] = self.y[lo] + side;
                        if self.vy[hi] < self.vy[lo] {
                            self.vy[hi] = self.vy[lo];
                        }
                    } else {
                        let (l, r) = if self.x[i] <= self.x[j] { (i, j) } else { (j, i) };
                        let push = overlap_x / 2.0;
                        self.x[l] -= push;
                        self.x[r] += push;
                        if self.vx[l] > self.vx[r] {
                            let mean = 0.5 * (self.vx[l] + self.vx[r]);
                            self.vx[l] = mean;
                            self.vx[r] = mean;
                        }
                    }
                }
            }
        }
    }

    /// Binary PPM (P6) snapshot. The map spans the full image width; the
    /// floor is drawn in grey and the best height so far as a red line.
    pub fn render_ppm(&self, width: usize, height: usize) -> Vec<u8> {
        let mut pixels = vec![255u8; width * height * 3];
        let floor_rows = (height / 20).max(1);
        let world_h = 1.0;
        let to_row = |y: f64| -> isize {
            let usable = (height - floor_rows) as f64;
            (usable - y / world_h * usable).floor() as isize
        };
        let mut put = |px: isize, py: isize, rgb: [u8; 3]| {
            if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                let k = (py as usize * width + px as usize) * 3;
                pixels[k..k + 3].copy_from_slice(&rgb);
            }
        };
        for py in (height - floor_rows)..height {
            for px in 0..width {
                put(px as isize, py as isize, [128, 128, 128]);
            }
        }
        let best_row = to_row(self.y_best);
        for px in 0..width {
            put(px as isize, best_row, [220, 40, 40]);
        }
        let side = self.cfg.physics.box_side;
        for i in self.active().collect::<Vec<_>>() {
            let colour = agent_colour(i, self.cfg.n_agents);
            let x0 = ((self.x[i] - side / 2.0) * width as f64).floor() as isize;
            let x1 = ((self.x[i] + side / 2.0) * width as f64).ceil() as isize;
            let top = to_row(self.y[i]);
            let bottom = to_row(self.y[i] - side);
            for py in top..bottom {
                for px in x0..x1 {
                    let edge = py == top || py == bottom - 1 || px == x0 || px == x1 - 1;
                    put(px, py, if edge { [0, 0, 0] } else { colour });
                }
            }
        }
        let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
        out.extend_from_slice(&pixels);
        out
    }
}

fn agent_colour(i: usize, n: usize) -> [u8; 3] {
    // hue wheel
    let h = i as f64 / n.max(1) as f64 * 6.0;
    let f = h - h.floor();
    let (r, g, b) = match h.floor() as usize % 6 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let s = |v: f64| (60.0 + v * 160.0) as u8;
    [s(r), s(g), s(b)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Agents that fell off the map this step.
    pub fell: usize,
    pub done: bool,
}

/// [`Environment`] wrapper owning one episode at a time.
#[derive(Debug, Clone)]
pub struct BoxJumpEnv {
    cfg: BoxJumpConfig,
    state: Option<BoxWorldState>,
}

impl BoxJumpEnv {
    pub fn new(cfg: BoxJumpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: None })
    }

    pub fn state(&self) -> Option<&BoxWorldState> {
        self.state.as_ref()
    }

    pub fn config(&self) -> &BoxJumpConfig {
        &self.cfg
    }
}

impl Environment for BoxJumpEnv {
    fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn reset(&mut self, seed: u64) -> Result<JointObservation> {
        let state = BoxWorldState::reset(&self.cfg, seed)?;
        let obs = state.observe();
        self.state = Some(state);
        Ok(obs)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::InvalidState("step called before reset".into()))?;
        let out = state.step(actions)?;
        Ok(StepResult {
            obs: state.observe(),
            reward: out.reward,
            done: out.done,
        })
    }

    fn episode_baseline(&self) -> f64 {
        self.state.as_ref().map_or(0.0, BoxWorldState::y_best_initial)
    }

    fn set_horizon(&mut self, t_max: usize) {
        self.cfg.t_max = t_max;
    }
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub y_best: f64,
}

/// Writes records as JSON lines.
pub fn write_log<W: Write>(mut w: W, records: &[LogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
