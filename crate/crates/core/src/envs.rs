//! Compositional task suite: parameterized toy MDP families with explicit
//! DoV grids, task resolution, and the α train/test split.
//!
//! Two built-in families share a (goal × physics) DoV structure:
//!
//! - `PointGoal`: 2-D point mass. State (x, y, vx, vy), action in [-1,1]².
//!   v' = (1-damping)·v + gain·a·dt, pos' = pos + v'·dt with positions
//!   clipped to [-2,2]²; reward = -‖pos' - goal‖₂; horizon 50. Goals sit on
//!   the unit circle; physics labels are (gain, damping) pairs.
//! - `LineVel`: 1-D velocity tracking. State (v), action in [-1,1].
//!   v' = (1-drag)·v + gain·a·dt clipped to [-1,1]; reward = -|v' - v_goal|;
//!   horizon 40. Goals are target velocities in [-1,1]; physics labels are
//!   (gain, drag) pairs.
//!
//! The goal label is observable only through rewards; the physics label only
//! through transitions, so task inference genuinely needs context.

use ndarray::{array, Array1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal_vec, Prng};

pub const DT: f64 = 0.1;
pub const POINT_GOAL_HORIZON: usize = 50;
pub const LINE_VEL_HORIZON: usize = 40;
/// PointGoal positions are clipped to [-POS_LIMIT, POS_LIMIT]².
pub const POS_LIMIT: f64 = 2.0;
/// LineVel velocities are clipped to [-VEL_LIMIT, VEL_LIMIT].
pub const VEL_LIMIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PointGoal,
    LineVel,
}

impl Family {
    pub fn obs_dim(self) -> usize {
        match self {
            Family::PointGoal => 4,
            Family::LineVel => 1,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::PointGoal => 2,
            Family::LineVel => 1,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Family::PointGoal => POINT_GOAL_HORIZON,
            Family::LineVel => LINE_VEL_HORIZON,
        }
    }

    pub fn default_goal_count(self) -> usize {
        match self {
            Family::PointGoal => 6,
            Family::LineVel => 8,
        }
    }
}

/// Parameter bundle a DoV label resolves to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelParams {
    Goal(Vec<f64>),
    Physics { gain: f64, damping: f64 },
}

/// One named axis of task variation with its ordered label set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dov {
    pub name: String,
    pub labels: Vec<LabelParams>,
}

/// Full description of a compositional task grid: the family plus one Dov
/// per axis. The task set is the Cartesian product of the label lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DovSpec {
    pub family: Family,
    pub dovs: Vec<Dov>,
    /// Std-dev of optional reset position noise (PointGoal only).
    pub reset_noise: f64,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl DovSpec {
    /// PointGoal grid: `n_goals` points on the unit circle crossed with
    /// `n_physics` (gain, damping) pairs, gain in [0.5, 2.0], damping in
    /// [0.0, 0.5].
    pub fn point_goal(n_goals: usize, n_physics: usize) -> Self {
        let goals = (0..n_goals)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / n_goals.max(1) as f64;
                LabelParams::Goal(vec![angle.cos(), angle.sin()])
            })
            .collect();
        let physics = linspace(0.5, 2.0, n_physics)
            .into_iter()
            .zip(linspace(0.0, 0.5, n_physics))
            .map(|(gain, damping)| LabelParams::Physics { gain, damping })
            .collect();
        Self {
            family: Family::PointGoal,
            dovs: vec![
                Dov {
                    name: "goal".into(),
                    labels: goals,
                },
                Dov {
                    name: "physics".into(),
                    labels: physics,
                },
            ],
            reset_noise: 0.0,
        }
    }

    /// LineVel grid: `n_goals` target velocities evenly spaced over
    /// [0.2, 1.0] crossed with `n_physics` (gain, drag) pairs, gain in
    /// [0.5, 2.0], drag in [0.0, 0.2]. Goals are kept positive so a single
    /// transition's reward identifies the target without a sign ambiguity
    /// that diagonal-Gaussian factors cannot express.
    pub fn line_vel(n_goals: usize, n_physics: usize) -> Self {
        let goals = linspace(0.2, 1.0, n_goals)
            .into_iter()
            .map(|v| LabelParams::Goal(vec![v]))
            .collect();
        let physics = linspace(0.5, 2.0, n_physics)
            .into_iter()
            .zip(linspace(0.0, 0.2, n_physics))
            .map(|(gain, damping)| LabelParams::Physics { gain, damping })
            .collect();
        Self {
            family: Family::LineVel,
            dovs: vec![
                Dov {
                    name: "goal".into(),
                    labels: goals,
                },
                Dov {
                    name: "physics".into(),
                    labels: physics,
                },
            ],
            reset_noise: 0.0,
        }
    }

    pub fn num_dovs(&self) -> usize {
        self.dovs.len()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        self.dovs.iter().map(|d| d.labels.len()).collect()
    }

    pub fn dov_index(&self, name: &str) -> Option<usize> {
        self.dovs.iter().position(|d| d.name == name)
    }

    fn validate(&self) -> Result<()> {
        if self.dovs.is_empty() {
            return Err(Error::Config("task spec needs at least one DoV".into()));
        }
        for d in &self.dovs {
            if d.labels.is_empty() {
                return Err(Error::Config(format!("DoV '{}' has no labels", d.name)));
            }
        }
        let mut names: Vec<&str> = self.dovs.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.dovs.len() {
            return Err(Error::Config("DoV names must be unique".into()));
        }
        Ok(())
    }
}

/// Resolved dynamics parameters for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub family: Family,
    pub goal: Vec<f64>,
    pub gain: f64,
    pub damping: f64,
    pub reset_noise: f64,
}

/// A single MDP: a unique DoV label combination plus its resolved
/// parameters. Two instances with equal combos resolve identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: usize,
    pub combo: Vec<usize>,
    pub model: EnvModel,
}

impl TaskInstance {
    pub fn obs_dim(&self) -> usize {
        self.model.family.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.family.action_dim()
    }

    pub fn horizon(&self) -> usize {
        self.model.family.horizon()
    }
}

/// One environment step: (s, a, s', r). Episodes end only by horizon, so no
/// terminal flag is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Array1<f64>,
    pub action: Array1<f64>,
    pub next_state: Array1<f64>,
    pub reward: f64,
}

fn resolve_model(spec: &DovSpec, combo: &[usize]) -> Result<EnvModel> {
    let mut goal: Option<Vec<f64>> = None;
    let mut gain = 1.0;
    let mut damping = 0.0;
    for (dov, &label) in spec.dovs.iter().zip(combo) {
        match &dov.labels[label] {
            LabelParams::Goal(g) => goal = Some(g.clone()),
            LabelParams::Physics {
                gain: g,
                damping: d,
            } => {
                gain = *g;
                damping = *d;
            }
        }
    }
    let goal_dim = match spec.family {
        Family::PointGoal => 2,
        Family::LineVel => 1,
    };
    let goal = goal.unwrap_or_else(|| vec![0.0; goal_dim]);
    if goal.len() != goal_dim {
        return Err(Error::Config(format!(
            "goal dimension {} does not match family (expected {goal_dim})",
            goal.len()
        )));
    }
    Ok(EnvModel {
        family: spec.family,
        goal,
        gain,
        damping,
        reset_noise: spec.reset_noise,
    })
}

/// Cartesian product of the label lists, ids assigned in grid order with the
/// last DoV varying fastest.
pub fn build_task_grid(spec: &DovSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let counts = spec.label_counts();
    let total: usize = counts.iter().product();
    let mut tasks = Vec::with_capacity(total);
    for id in 0..total {
        let mut rem = id;
        let mut combo = vec![0usize; counts.len()];
        for j in (0..counts.len()).rev() {
            combo[j] = rem % counts[j];
            rem /= counts[j];
        }
        let model = resolve_model(spec, &combo)?;
        tasks.push(TaskInstance { id, combo, model });
    }
    Ok(tasks)
}

/// Bernoulli(α) selection of training tasks with a repair step: any DoV
/// label left uncovered gets one uniformly-random bearer moved from the test
/// side to the training side.
pub fn select_training_tasks(
    grid: &[TaskInstance],
    alpha: f64,
    rng: &mut Prng,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    split_tasks(grid, alpha, None, rng)
}

/// Like [`select_training_tasks`], but tasks carrying the held-out
/// (dov, label) pair are forced into the test set before the α-split and are
/// exempt from coverage repair. Used for the unseen-label (S2) protocol.
pub fn split_tasks(
    grid: &[TaskInstance],
    alpha: f64,
    holdout: Option<(usize, usize)>,
    rng: &mut Prng,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {alpha}")));
    }
    if grid.is_empty() {
        return Err(Error::Config("task grid is empty".into()));
    }
    let held = |t: &TaskInstance| holdout.is_some_and(|(j, y)| t.combo[j] == y);
    let eligible: Vec<&TaskInstance> = grid.iter().filter(|t| !held(t)).collect();
    if eligible.is_empty() {
        return Err(Error::Config(
            "holdout removes every task from the training pool".into(),
        ));
    }

    let mut in_train: Vec<bool> = eligible
        .iter()
        .map(|_| rng.random::<f64>() < alpha)
        .collect();

    // Coverage repair, in fixed (dov, label) order.
    let num_dovs = grid[0].combo.len();
    for j in 0..num_dovs {
        let mut labels: Vec<usize> = eligible.iter().map(|t| t.combo[j]).collect();
        labels.sort_unstable();
        labels.dedup();
        for y in labels {
            let covered = eligible
                .iter()
                .zip(&in_train)
                .any(|(t, &sel)| sel && t.combo[j] == y);
            if covered {
                continue;
            }
            let candidates: Vec<usize> = (0..eligible.len())
                .filter(|&i| !in_train[i] && eligible[i].combo[j] == y)
                .collect();
            let pick = candidates[rng.random_range(0..candidates.len())];
            in_train[pick] = true;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut it = in_train.iter();
    for t in grid {
        if held(t) {
            test.push(t.clone());
        } else if *it.next().unwrap() {
            train.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    Ok((train, test))
}

/// Initial state for a task. PointGoal starts at the origin at rest, with
/// optional position noise; LineVel starts at zero velocity.
pub fn reset_state(task: &TaskInstance, rng: &mut Prng) -> Array1<f64> {
    match task.model.family {
        Family::PointGoal => {
            let mut s = array![0.0, 0.0, 0.0, 0.0];
            if task.model.reset_noise > 0.0 {
                let noise = standard_normal_vec(rng, 2);
                s[0] += task.model.reset_noise * noise[0];
                s[1] += task.model.reset_noise * noise[1];
            }
            s
        }
        Family::LineVel => array![0.0],
    }
}

/// Pure dynamics kernel: next state and reward from (params, state, action).
/// Actions are clipped to the unit box first.
pub fn step_dynamics(
    model: &EnvModel,
    state: &Array1<f64>,
    action: &Array1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let adim = model.family.action_dim();
    if state.len() != model.family.obs_dim() || action.len() != adim {
        return Err(Error::Shape(format!(
            "expected state dim {} and action dim {adim}, got {} and {}",
            model.family.obs_dim(),
            state.len(),
            action.len()
        )));
    }
    let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    match model.family {
        Family::PointGoal => {
            let mut next = Array1::zeros(4);
            let mut dist_sq = 0.0;
            for i in 0..2 {
                let v = (1.0 - model.damping) * state[2 + i] + model.gain * a[i] * DT;
                let pos = (state[i] + v * DT).clamp(-POS_LIMIT, POS_LIMIT);
                next[i] = pos;
                next[2 + i] = v;
                let d = pos - model.goal[i];
                dist_sq += d * d;
            }
            Ok((next, -dist_sq.sqrt()))
        }
        Family::LineVel => {
            let v = ((1.0 - model.damping) * state[0] + model.gain * a[0] * DT)
                .clamp(-VEL_LIMIT, VEL_LIMIT);
            Ok((array![v], -(v - model.goal[0]).abs()))
        }
    }
}

/// Stateful wrapper around one task: tracks the step counter so `done`
/// fires exactly at the horizon.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: TaskInstance,
    state: Array1<f64>,
    t: usize,
}

impl Env {
    pub fn new(task: TaskInstance) -> Self {
        let state = Array1::zeros(task.obs_dim());
        Self { task, state, t: 0 }
    }

    pub fn reset(&mut self, rng: &mut Prng) -> Array1<f64> {
        self.state = reset_state(&self.task, rng);
        self.t = 0;
        self.state.clone()
    }

    pub fn state(&self) -> &Array1<f64> {
        &self.state
    }

    pub fn step(&mut self, action: &Array1<f64>) -> Result<(Array1<f64>, f64, bool)> {
        let (next, reward) = step_dynamics(&self.task.model, &self.state, action)?;
        self.t += 1;
        let done = self.t >= self.task.horizon();
        self.state = next.clone();
        Ok((next, reward, done))
    }
}

/// Reference PD-style controller with full knowledge of the task parameters.
/// Not optimal in general, but a solid yardstick for learned policies.
pub fn oracle_action(task: &TaskInstance, state: &Array1<f64>) -> Array1<f64> {
    let m = &task.model;
    match m.family {
        Family::PointGoal => {
            let mut a = Array1::zeros(2);
            for i in 0..2 {
                let v_des = (1.5 * (m.goal[i] - state[i])).clamp(-1.0, 1.0);
                a[i] =
                    ((v_des - (1.0 - m.damping) * state[2 + i]) / (m.gain * DT)).clamp(-1.0, 1.0);
            }
            a
        }
        Family::LineVel => {
            let a = ((m.goal[0] - (1.0 - m.damping) * state[0]) / (m.gain * DT)).clamp(-1.0, 1.0);
            array![a]
        }
    }
}

/// Episode return of the oracle controller from a noiseless reset.
pub fn oracle_return(task: &TaskInstance) -> f64 {
    let mut state = Array1::zeros(task.obs_dim());
    let mut total = 0.0;
    for _ in 0..task.horizon() {
        let a = oracle_action(task, &state);
        let (next, r) = step_dynamics(&task.model, &state, &a).expect("oracle dims");
        total += r;
        state = next;
    }
    total
}
