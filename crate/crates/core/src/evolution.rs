//! Per-task stage tracking and growth of the shared network.
//!
//! A task's stage is the number of modules its genotypes address. When a task
//! keeps failing and its population stops improving, its stage grows by one,
//! its stale genotypes are replaced, and the network gains a module if no
//! other task already needed one.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::ga::TaskPopulation;
use crate::modular_net::ModularActorNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub start_stage: u32,
    pub stage_cap: u32,
    /// Success window length, in episodes.
    pub window: usize,
    /// Windowed success rate below which a task counts as stuck.
    pub min_success_rate: f64,
    /// Smallest best-fitness gain over `fitness_generations` that counts as
    /// progress.
    pub min_fitness_gain: f64,
    pub fitness_generations: usize,
    /// Episodes to wait after a stage change (and at start) before the next.
    pub cooldown: u32,
}

impl StageConfig {
    /// Desk-scale trigger constants; `reward_range` is the spread of possible
    /// episode returns, of which 1% counts as progress.
    pub fn desk(reward_range: f64) -> Self {
        Self {
            start_stage: 3,
            stage_cap: 8,
            window: 50,
            min_success_rate: 0.05,
            min_fitness_gain: 0.01 * reward_range,
            fitness_generations: 3,
            cooldown: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_stage == 0 || self.start_stage > self.stage_cap {
            return Err(config(format!(
                "start stage {} must lie in [1, stage cap {}]",
                self.start_stage, self.stage_cap
            )));
        }
        if self.window == 0 || self.fitness_generations == 0 {
            return Err(config("stage window and fitness generations must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_success_rate) {
            return Err(config("min success rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStage {
    pub stage: u32,
    success_window: VecDeque<bool>,
    best_fitness_history: Vec<f64>,
    pub cooldown_remaining: u32,
}

impl TaskStage {
    pub fn success_rate(&self) -> f64 {
        if self.success_window.is_empty() {
            return 0.0;
        }
        self.success_window.iter().filter(|&&s| s).count() as f64 / self.success_window.len() as f64
    }

    pub fn best_fitness_history(&self) -> &[f64] {
        &self.best_fitness_history
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageChange {
    Unchanged,
    Incremented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTracker {
    pub config: StageConfig,
    tasks: Vec<TaskStage>,
}

/// One line of the stage trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub episode: usize,
    pub task_id: usize,
    pub old_stage: u32,
    pub new_stage: u32,
    pub reason: String,
}

impl StageTracker {
    pub fn new(config: StageConfig, n_tasks: usize) -> Result<Self> {
        config.validate()?;
        let tasks = (0..n_tasks)
            .map(|_| TaskStage {
                stage: config.start_stage,
                success_window: VecDeque::with_capacity(config.window),
                best_fitness_history: Vec::new(),
                cooldown_remaining: config.cooldown,
            })
            .collect();
        Ok(Self { config, tasks })
    }

    pub fn stage(&self, task: usize) -> u32 {
        self.tasks[task].stage
    }

    pub fn stages(&self) -> Vec<u32> {
        self.tasks.iter().map(|t| t.stage).collect()
    }

    pub fn task(&self, task: usize) -> &TaskStage {
        &self.tasks[task]
    }

    pub fn task_mut(&mut self, task: usize) -> &mut TaskStage {
        &mut self.tasks[task]
    }

    pub fn max_stage(&self) -> u32 {
        self.tasks.iter().map(|t| t.stage).max().unwrap_or(0)
    }

    /// Feeds one finished episode (and, when a generation just completed, its
    /// best fitness) into the trigger for `task`.
    pub fn update_stage(&mut self, task: usize, episode_success: bool, generation_best_fitness: Option<f64>) -> StageChange {
        let cfg = &self.config;
        let t = &mut self.tasks[task];
        if t.success_window.len() == cfg.window {
            t.success_window.pop_front();
        }
        t.success_window.push_back(episode_success);
        if let Some(f) = generation_best_fitness {
            t.best_fitness_history.push(f);
        }
        if t.cooldown_remaining > 0 {
            t.cooldown_remaining -= 1;
            return StageChange::Unchanged;
        }
        if t.stage >= cfg.stage_cap || t.success_window.len() < cfg.window {
            return StageChange::Unchanged;
        }
        let rate = t.success_window.iter().filter(|&&s| s).count() as f64 / t.success_window.len() as f64;
        let h = &t.best_fitness_history;
        let stalled = h.len() > cfg.fitness_generations && {
            let recent = h[h.len() - 1];
            let past = h[h.len() - 1 - cfg.fitness_generations];
            recent - past < cfg.min_fitness_gain
        };
        if rate < cfg.min_success_rate && stalled {
            t.stage += 1;
            t.cooldown_remaining = cfg.cooldown;
            t.success_window.clear();
            t.best_fitness_history.clear();
            StageChange::Incremented
        } else {
            StageChange::Unchanged
        }
    }

    /// Grows `net` until it has as many modules as the deepest task needs.
    /// Returns the number of modules added.
    pub fn sync_network<R: Rng + ?Sized>(&self, net: &mut ModularActorNet, rng: &mut R) -> usize {
        let needed = self.max_stage() as usize;
        let mut added = 0;
        while net.num_modules() < needed {
            net.add_module(rng);
            added += 1;
        }
        added
    }
}

/// Moves `pop` to `stage` and replaces every member of the wrong length.
/// Returns the number of replaced members.
pub fn purge_stale<R: Rng + ?Sized>(pop: &mut TaskPopulation, stage: u32, rng: &mut R) -> Result<usize> {
    pop.stage = stage;
    pop.purge_stale(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::record_fitness;
    use crate::harness::seeded_rng;
    use crate::modular_net::NetDims;
    use crate::nn::Parameterized;

    fn cfg() -> StageConfig {
        StageConfig {
            start_stage: 3,
            stage_cap: 5,
            window: 4,
            min_success_rate: 0.05,
            min_fitness_gain: 1.0,
            fitness_generations: 2,
            cooldown: 0,
        }
    }

    fn fill(tracker: &mut StageTracker, task: usize, successes: &[bool], fitness: &[f64]) -> Vec<StageChange> {
        let mut out = Vec::new();
        let n = successes.len().max(fitness.len());
        for i in 0..n {
            out.push(tracker.update_stage(task, successes.get(i).copied().unwrap_or(false), fitness.get(i).copied()));
        }
        out
    }

    #[test]
    fn stuck_task_grows() {
        let mut tr = StageTracker::new(cfg(), 2).unwrap();
        let changes = fill(&mut tr, 0, &[false; 4], &[-10.0, -10.0, -10.0, -10.0]);
        assert_eq!(changes.last(), Some(&StageChange::Incremented));
        assert_eq!(tr.stage(0), 4);
        assert_eq!(tr.stage(1), 3);
    }

    #[test]
    fn successful_task_stays() {
        let mut tr = StageTracker::new(cfg(), 1).unwrap();
        let changes = fill(&mut tr, 0, &[true, true, false, true, true], &[-10.0; 5]);
        assert!(changes.iter().all(|c| *c == StageChange::Unchanged));
    }

    #[test]
    fn improving_task_stays() {
        let mut tr = StageTracker::new(cfg(), 1).unwrap();
        let changes = fill(&mut tr, 0, &[false; 6], &[-10.0, -8.0, -6.0, -4.0, -2.0, 0.0]);
        assert!(changes.iter().all(|c| *c == StageChange::Unchanged));
    }

    #[test]
    fn cap_and_cooldown_hold() {
        let mut c = cfg();
        c.stage_cap = 3;
        let mut tr = StageTracker::new(c, 1).unwrap();
        assert!(fill(&mut tr, 0, &[false; 10], &[-10.0; 10]).iter().all(|c| *c == StageChange::Unchanged));

        let mut c = cfg();
        c.cooldown = 3;
        let mut tr = StageTracker::new(c, 1).unwrap();
        let changes = fill(&mut tr, 0, &[false; 8], &[-10.0; 8]);
        let first = changes.iter().position(|c| *c == StageChange::Incremented).unwrap();
        assert_eq!(first, 3, "{changes:?}");
        assert_eq!(tr.task(0).cooldown_remaining, 3);
    }

    #[test]
    fn sync_grows_to_max_stage_only() {
        let mut rng = seeded_rng(0);
        let mut tr = StageTracker::new(cfg(), 3).unwrap();
        tr.task_mut(2).stage = 4;
        let mut net = ModularActorNet::new(NetDims::desk(8, 2), 3, &mut rng);
        assert_eq!(tr.sync_network(&mut net, &mut rng), 1);
        assert_eq!(net.num_modules(), 4);
        let before = net.flat();
        assert_eq!(tr.sync_network(&mut net, &mut rng), 0);
        assert_eq!(net.flat(), before);
    }

    #[test]
    fn purge_replaces_exactly_the_stale_members() {
        let mut rng = seeded_rng(1);
        let mut pop = TaskPopulation::random(0, 4, 2, 3, &mut rng).unwrap();
        for i in 0..4 {
            record_fitness(&mut pop, i, i as f64).unwrap();
        }
        let untouched = pop.clone();
        assert_eq!(purge_stale(&mut pop, 3, &mut rng).unwrap(), 0);
        assert_eq!(pop, untouched);
        assert_eq!(purge_stale(&mut pop, 4, &mut rng).unwrap(), 4);
        assert!(pop.members().iter().all(|g| g.len() == 20 && g.fitness().is_none()));
    }
}
