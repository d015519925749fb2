//! Point-mass navigation tasks with graded difficulty.
//!
//! Every task shares the same observation and action spaces. The agent starts
//! at the origin of the arena `[-1, 1]^2`, moves by `clip(action) * dt` per
//! step, and must capture an ordered list of waypoints. Some tasks place
//! circular obstacles that cost a penalty per step spent inside them.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MegaError, Result};

pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;
const ARENA: f64 = 1.0;
/// Random layouts stay inside this box so waypoints are never on a wall.
const SAMPLE_BOX: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalMode {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episode_length: usize,
    pub goal_mode: GoalMode,
    pub dt: f64,
    pub success_tol: f64,
    pub capture_bonus: f64,
    pub obstacle_penalty: f64,
}

impl EnvSpec {
    pub fn new(goal_mode: GoalMode) -> Self {
        Self {
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            episode_length: 200,
            goal_mode,
            dt: 0.1,
            success_tol: 0.1,
            capture_bonus: 5.0,
            obstacle_penalty: 1.0,
        }
    }

    /// Bound on `|reward|` for a single step: the arena diagonal plus the
    /// capture bonus plus the obstacle penalty.
    pub fn max_step_reward(&self) -> f64 {
        2.0 * ARENA * std::f64::consts::SQRT_2 + self.capture_bonus + self.obstacle_penalty
    }

    /// Spread between the best and worst possible episode return.
    pub fn episode_reward_range(&self) -> f64 {
        self.episode_length as f64 * self.max_step_reward()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Reach,
    ReachAroundObstacle,
    Tour2,
    Tour3,
    ReachFar,
    WideObstacle,
    Tour4,
    ObstacleTour,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::ReachAroundObstacle => "reach-around-obstacle",
            TaskKind::Tour2 => "tour-2",
            TaskKind::Tour3 => "tour-3",
            TaskKind::ReachFar => "reach-far",
            TaskKind::WideObstacle => "wide-obstacle",
            TaskKind::Tour4 => "tour-4",
            TaskKind::ObstacleTour => "obstacle-tour",
        }
    }

    fn fixed_layout(self) -> Layout {
        let wp = |pts: &[[f64; 2]]| pts.to_vec();
        let obstacle = |c: [f64; 2], r: f64| vec![Obstacle { center: c, radius: r }];
        match self {
            TaskKind::Reach => Layout { waypoints: wp(&[[0.5, 0.4]]), obstacles: vec![] },
            TaskKind::ReachAroundObstacle => {
                Layout { waypoints: wp(&[[0.0, 0.85]]), obstacles: obstacle([0.0, 0.42], 0.18) }
            }
            TaskKind::Tour2 => Layout { waypoints: wp(&[[-0.5, 0.5], [0.5, 0.5]]), obstacles: vec![] },
            TaskKind::Tour3 => {
                Layout { waypoints: wp(&[[0.5, -0.5], [-0.5, -0.5], [-0.5, 0.5]]), obstacles: vec![] }
            }
            TaskKind::ReachFar => Layout { waypoints: wp(&[[-0.9, -0.9]]), obstacles: vec![] },
            TaskKind::WideObstacle => {
                Layout { waypoints: wp(&[[0.85, 0.0]]), obstacles: obstacle([0.42, 0.0], 0.28) }
            }
            TaskKind::Tour4 => Layout {
                waypoints: wp(&[[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]),
                obstacles: vec![],
            },
            TaskKind::ObstacleTour => {
                Layout { waypoints: wp(&[[0.0, 0.8], [0.8, 0.8]]), obstacles: obstacle([0.0, 0.4], 0.2) }
            }
        }
    }

    fn random_layout<R: Rng + ?Sized>(self, rng: &mut R) -> Layout {
        let point = |rng: &mut R| [rng.random_range(-SAMPLE_BOX..=SAMPLE_BOX), rng.random_range(-SAMPLE_BOX..=SAMPLE_BOX)];
        // rejection-sample a point at least `min` away from `from`
        let away = |rng: &mut R, from: [f64; 2], min: f64| loop {
            let p = point(rng);
            if dist(p, from) >= min {
                break p;
            }
        };
        let tour = |rng: &mut R, n: usize| {
            let mut pts = Vec::with_capacity(n);
            let mut prev = [0.0, 0.0];
            for _ in 0..n {
                let p = away(rng, prev, 0.3);
                pts.push(p);
                prev = p;
            }
            pts
        };
        // obstacle halfway between the origin and the first waypoint
        let blocked = |rng: &mut R, min_dist: f64, r_lo: f64, r_hi: f64, extra: usize| {
            let first = away(rng, [0.0, 0.0], min_dist);
            let radius = rng.random_range(r_lo..=r_hi);
            let mut waypoints = vec![first];
            let mut prev = first;
            let center = [first[0] / 2.0, first[1] / 2.0];
            for _ in 0..extra {
                let p = loop {
                    let p = away(rng, prev, 0.3);
                    if dist(p, center) > radius + 0.15 {
                        break p;
                    }
                };
                waypoints.push(p);
                prev = p;
            }
            Layout { waypoints, obstacles: vec![Obstacle { center, radius }] }
        };
        match self {
            TaskKind::Reach => Layout { waypoints: tour(rng, 1), obstacles: vec![] },
            TaskKind::ReachAroundObstacle => blocked(rng, 0.6, 0.12, 0.2, 0),
            TaskKind::Tour2 => Layout { waypoints: tour(rng, 2), obstacles: vec![] },
            TaskKind::Tour3 => Layout { waypoints: tour(rng, 3), obstacles: vec![] },
            TaskKind::ReachFar => Layout { waypoints: vec![away(rng, [0.0, 0.0], 0.95)], obstacles: vec![] },
            TaskKind::WideObstacle => blocked(rng, 0.85, 0.2, 0.27, 0),
            TaskKind::Tour4 => Layout { waypoints: tour(rng, 4), obstacles: vec![] },
            TaskKind::ObstacleTour => blocked(rng, 0.6, 0.12, 0.2, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub waypoints: Vec<[f64; 2]>,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: usize,
    pub kind: TaskKind,
    pub spec: EnvSpec,
    /// The frozen layout in fixed mode; a representative draw in random mode.
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub spec: EnvSpec,
    pub tasks: Vec<TaskInstance>,
}

impl Suite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const SUITE_NAMES: [&str; 4] = ["mt4-fixed", "mt4-rand", "mt8-fixed", "mt8-rand"];

pub fn make_suite(name: &str, seed: u64) -> Result<Suite> {
    let (kinds, mode): (&[TaskKind], GoalMode) = match name {
        "mt4-fixed" => (&MT4, GoalMode::Fixed),
        "mt4-rand" => (&MT4, GoalMode::Random),
        "mt8-fixed" => (&MT8, GoalMode::Fixed),
        "mt8-rand" => (&MT8, GoalMode::Random),
        other => return Err(MegaError::InvalidArgument(format!("unknown suite `{other}`"))),
    };
    let spec = EnvSpec::new(mode);
    let mut rng = crate::harness::seeded_rng(seed);
    let tasks = kinds
        .iter()
        .enumerate()
        .map(|(task_id, &kind)| {
            let layout = match mode {
                GoalMode::Fixed => kind.fixed_layout(),
                GoalMode::Random => kind.random_layout(&mut rng),
            };
            TaskInstance { task_id, kind, spec, layout }
        })
        .collect();
    Ok(Suite { name: name.to_string(), spec, tasks })
}

const MT4: [TaskKind; 4] = [TaskKind::Reach, TaskKind::ReachAroundObstacle, TaskKind::Tour2, TaskKind::Tour3];
const MT8: [TaskKind; 8] = [
    TaskKind::Reach,
    TaskKind::ReachAroundObstacle,
    TaskKind::Tour2,
    TaskKind::Tour3,
    TaskKind::ReachFar,
    TaskKind::WideObstacle,
    TaskKind::Tour4,
    TaskKind::ObstacleTour,
];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Episode over, by success or by running out of steps.
    pub done: bool,
    pub success: bool,
    pub task_id: usize,
}

/// One running episode of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: usize,
    pub spec: EnvSpec,
    pub layout: Layout,
    pub pos: [f64; 2],
    pub waypoint: usize,
    pub steps: usize,
    pub done: bool,
    pub success: bool,
}

impl TaskInstance {
    /// Starts an episode at the origin. Random-goal tasks draw a new layout
    /// from `rng`; fixed-goal tasks leave `rng` untouched.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let layout = match self.spec.goal_mode {
            GoalMode::Fixed => self.layout.clone(),
            GoalMode::Random => self.kind.random_layout(rng),
        };
        Episode {
            task_id: self.task_id,
            spec: self.spec,
            layout,
            pos: [0.0, 0.0],
            waypoint: 0,
            steps: 0,
            done: false,
            success: false,
        }
    }
}

impl Episode {
    pub fn target(&self) -> [f64; 2] {
        let last = self.layout.waypoints.len() - 1;
        self.layout.waypoints[self.waypoint.min(last)]
    }

    fn nearest_obstacle(&self) -> Option<&Obstacle> {
        self.layout
            .obstacles
            .iter()
            .min_by(|a, b| (dist(self.pos, a.center) - a.radius).total_cmp(&(dist(self.pos, b.center) - b.radius)))
    }

    /// `[x, y, target_x, target_y, remaining / 4, obstacle_x, obstacle_y, obstacle_r]`.
    pub fn observation(&self) -> Vec<f64> {
        let t = self.target();
        let remaining = self.layout.waypoints.len().saturating_sub(self.waypoint) as f64 / 4.0;
        let (ox, oy, or) = self.nearest_obstacle().map_or((0.0, 0.0, 0.0), |o| (o.center[0], o.center[1], o.radius));
        vec![self.pos[0], self.pos[1], t[0], t[1], remaining, ox, oy, or]
    }

    pub fn inside_obstacle(&self) -> bool {
        self.layout.obstacles.iter().any(|o| dist(self.pos, o.center) < o.radius)
    }

    /// Advances one step. Actions are clipped to `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.done {
            return Err(MegaError::InvalidArgument("episode already finished".into()));
        }
        if action.len() != self.spec.action_dim {
            return Err(MegaError::InvalidArgument(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        let state = self.observation();
        let clipped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        for k in 0..2 {
            self.pos[k] = (self.pos[k] + clipped[k] * self.spec.dt).clamp(-ARENA, ARENA);
        }
        self.steps += 1;

        let mut reward = 0.0;
        if dist(self.pos, self.target()) <= self.spec.success_tol {
            reward += self.spec.capture_bonus;
            self.waypoint += 1;
            if self.waypoint == self.layout.waypoints.len() {
                self.success = true;
            }
        }
        reward -= dist(self.pos, self.target());
        if self.inside_obstacle() {
            reward -= self.spec.obstacle_penalty;
        }
        self.done = self.success || self.steps >= self.spec.episode_length;
        Ok(Transition {
            state,
            action: clipped,
            reward,
            next_state: self.observation(),
            done: self.done,
            success: self.success,
            task_id: self.task_id,
        })
    }
}

/// Hand-written controller: heads straight for the current waypoint at full
/// speed and steers around obstacles that block the straight line.
pub fn scripted_action(ep: &Episode) -> Vec<f64> {
    let target = ep.target();
    let mut aim = target;
    for o in &ep.layout.obstacles {
        let d = [target[0] - ep.pos[0], target[1] - ep.pos[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        if len2 < 1e-12 {
            continue;
        }
        let rel = [o.center[0] - ep.pos[0], o.center[1] - ep.pos[1]];
        let t = (rel[0] * d[0] + rel[1] * d[1]) / len2;
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        let closest = [ep.pos[0] + t * d[0], ep.pos[1] + t * d[1]];
        let gap = dist(closest, o.center);
        if gap < o.radius + 0.08 {
            // detour point on the side of the line away from the center
            let len = len2.sqrt();
            let mut n = [-d[1] / len, d[0] / len];
            if n[0] * rel[0] + n[1] * rel[1] > 0.0 {
                n = [-n[0], -n[1]];
            }
            let r = o.radius + 0.2;
            aim = [o.center[0] + n[0] * r, o.center[1] + n[1] * r];
            break;
        }
    }
    let v = [(aim[0] - ep.pos[0]) / ep.spec.dt, (aim[1] - ep.pos[1]) / ep.spec.dt];
    let scale = v[0].abs().max(v[1].abs()).max(1.0);
    vec![v[0] / scale, v[1] / scale]
}

/// Rolls out a policy until the episode ends.
pub fn rollout(ep: &mut Episode, mut policy: impl FnMut(&Episode) -> Vec<f64>) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    while !ep.done {
        let a = policy(ep);
        out.push(ep.step(&a)?);
    }
    Ok(out)
}

/// `step,state...,action...,reward,done,success`.
pub fn write_trajectory_csv(path: &Path, transitions: &[Transition]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let obs = transitions.first().map_or(OBS_DIM, |t| t.state.len());
    let act = transitions.first().map_or(ACTION_DIM, |t| t.action.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..obs).map(|i| format!("s{i}")));
    header.extend((0..act).map(|i| format!("a{i}")));
    header.extend(["reward".into(), "done".into(), "success".into()]);
    writeln!(f, "{}", header.join(","))?;
    for (i, t) in transitions.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(t.state.iter().map(f64::to_string));
        row.extend(t.action.iter().map(f64::to_string));
        row.push(t.reward.to_string());
        row.push(u8::from(t.done).to_string());
        row.push(u8::from(t.success).to_string());
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
