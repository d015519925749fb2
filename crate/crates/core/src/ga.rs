//! Per-task genotype populations and the genetic operators that evolve them.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, structural, MegaError, Result};
use crate::genotype::{genotype_length, GenotypePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub pop_size: usize,
    pub abandon_rate: f64,
    pub crossover_rate: f64,
    pub mutate_rate: f64,
    /// Crossover draws above this pick a cross-population partner.
    pub crossover_cross_pop: f64,
    /// Mutation draws above this pick a parent from the whole community.
    pub mutate_cross_pop: f64,
    /// Mutation draws at or below this pick the population's best.
    pub mutate_best: f64,
    pub max_eval: u32,
    /// Chance the best member is rolled out once everyone is evaluated.
    pub p_best_select: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            pop_size: 4,
            abandon_rate: 0.5,
            crossover_rate: 0.5,
            mutate_rate: 0.15,
            crossover_cross_pop: 0.9,
            mutate_cross_pop: 0.95,
            mutate_best: 0.5,
            max_eval: 2,
            p_best_select: 0.5,
        }
    }
}

/// `floor(n * rate)` with a small guard against representation error, so
/// that e.g. `3 * (2/3)` counts as 2.
fn rate_count(n: usize, rate: f64) -> usize {
    (n as f64 * rate + 1e-9).floor() as usize
}

impl GaConfig {
    pub fn abandon_count(&self) -> usize {
        rate_count(self.pop_size, self.abandon_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pop_size == 0 {
            return Err(config("population size must be positive"));
        }
        if !(self.abandon_rate > 0.0 && self.abandon_rate < 1.0) {
            return Err(config(format!("abandon rate {} outside (0, 1)", self.abandon_rate)));
        }
        let k = self.abandon_count();
        if k < 2 || !k.is_multiple_of(2) {
            return Err(config(format!(
                "pop_size * abandon_rate must be an even count >= 2 (got {k})"
            )));
        }
        if k > self.pop_size - 1 {
            return Err(config(format!("abandoning {k} of {} would drop the best member", self.pop_size)));
        }
        for (name, r) in [("crossover rate", self.crossover_rate), ("mutate rate", self.mutate_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(self.crossover_cross_pop > 0.0 && self.crossover_cross_pop < 1.0) {
            return Err(config("crossover cross-population threshold must lie in (0, 1)"));
        }
        if !(0.0 < self.mutate_best && self.mutate_best < self.mutate_cross_pop && self.mutate_cross_pop < 1.0) {
            return Err(config("mutation thresholds must satisfy 0 < best < cross-pop < 1"));
        }
        if self.max_eval == 0 {
            return Err(config("max_eval must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_best_select) {
            return Err(config("p_best_select must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPopulation {
    pub task_id: usize,
    pub stage: u32,
    pub precision: u32,
    members: Vec<GenotypePolicy>,
    best_index: Option<usize>,
    next_id: u64,
}

impl TaskPopulation {
    pub fn random<R: Rng + ?Sized>(
        task_id: usize,
        pop_size: usize,
        precision: u32,
        stage: u32,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pop = Self { task_id, stage, precision, members: Vec::with_capacity(pop_size), best_index: None, next_id: 1 };
        for _ in 0..pop_size {
            let g = GenotypePolicy::random(precision, stage, rng)?;
            pop.push(g);
        }
        Ok(pop)
    }

    /// Builds a population from explicit members, assigning fresh ids.
    pub fn from_members(task_id: usize, precision: u32, stage: u32, members: Vec<GenotypePolicy>) -> Self {
        let mut pop = Self { task_id, stage, precision, members: Vec::new(), best_index: None, next_id: 1 };
        for g in members {
            pop.push(g);
        }
        pop.refresh_best();
        pop
    }

    fn push(&mut self, mut g: GenotypePolicy) {
        g.id = self.next_id;
        self.next_id += 1;
        self.members.push(g);
    }

    pub fn members(&self) -> &[GenotypePolicy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best_index(&self) -> Option<usize> {
        self.best_index
    }

    pub fn best(&self) -> Option<&GenotypePolicy> {
        self.best_index.map(|i| &self.members[i])
    }

    /// The member to deploy for greedy evaluation: the best evaluated one, or
    /// the first member when nothing has been evaluated yet.
    pub fn champion(&self) -> &GenotypePolicy {
        &self.members[self.best_index.unwrap_or(0)]
    }

    /// Argmax of fitness over evaluated members; ties go to the lowest index.
    pub fn refresh_best(&mut self) {
        self.best_index = self
            .members
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.fitness().map(|f| (i, f)))
            .fold(None, |acc: Option<(usize, f64)>, (i, f)| match acc {
                Some((_, bf)) if bf >= f => acc,
                _ => Some((i, f)),
            })
            .map(|(i, _)| i);
    }

    pub fn all_evaluated(&self, max_eval: u32) -> bool {
        self.members.iter().all(|g| g.eval_count() >= max_eval)
    }

    pub fn expected_length(&self) -> usize {
        genotype_length(self.precision, self.stage).expect("population holds a valid stage")
    }

    /// Replaces every member whose length does not match the current stage by
    /// a fresh random genotype. Returns how many were replaced.
    pub fn purge_stale<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        let expected = genotype_length(self.precision, self.stage)?;
        let mut replaced = 0;
        for i in 0..self.members.len() {
            if self.members[i].len() != expected {
                let mut g = GenotypePolicy::random(self.precision, self.stage, rng)?;
                g.id = self.next_id;
                self.next_id += 1;
                self.members[i] = g;
                replaced += 1;
            }
        }
        if replaced > 0 {
            self.refresh_best();
        }
        Ok(replaced)
    }

    /// Replaces the entire population with fresh random genotypes.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let n = self.members.len();
        self.members.clear();
        for _ in 0..n {
            let g = GenotypePolicy::random(self.precision, self.stage, rng)?;
            self.push(g);
        }
        self.best_index = None;
        Ok(())
    }
}

/// All task populations, indexed by task id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Community {
    pub populations: Vec<TaskPopulation>,
}

impl Community {
    pub fn new(populations: Vec<TaskPopulation>) -> Result<Self> {
        for (i, p) in populations.iter().enumerate() {
            if p.task_id != i {
                return Err(structural(format!("population {i} carries task id {}", p.task_id)));
            }
        }
        Ok(Self { populations })
    }

    pub fn total_genotypes(&self) -> usize {
        self.populations.iter().map(TaskPopulation::len).sum()
    }

    /// The `k`-th genotype of the community in task order.
    fn nth(&self, mut k: usize) -> &GenotypePolicy {
        for p in &self.populations {
            if k < p.len() {
                return &p.members[k];
            }
            k -= p.len();
        }
        panic!("community index out of range");
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> &GenotypePolicy {
        self.nth(rng.random_range(0..self.total_genotypes()))
    }
}

pub fn select_for_episode<R: Rng + ?Sized>(pop: &TaskPopulation, cfg: &GaConfig, rng: &mut R) -> usize {
    assert!(!pop.is_empty(), "selecting from an empty population");
    if let Some(i) = pop.members.iter().position(|g| g.eval_count() < cfg.max_eval) {
        return i;
    }
    match pop.best_index {
        Some(best) if rng.random_bool(cfg.p_best_select) => best,
        _ => rng.random_range(0..pop.len()),
    }
}

pub fn record_fitness(pop: &mut TaskPopulation, idx: usize, episode_reward: f64) -> Result<()> {
    let g = pop
        .members
        .get_mut(idx)
        .ok_or_else(|| MegaError::InvalidArgument(format!("member index {idx} out of range")))?;
    g.record(episode_reward)?;
    pop.refresh_best();
    Ok(())
}

/// Parent pair for a crossover given the uniform draw `n`.
pub fn crossover_parents_for_draw<R: Rng + ?Sized>(
    community: &Community,
    task: usize,
    n: f64,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<(GenotypePolicy, GenotypePolicy)> {
    let pop = &community.populations[task];
    let best = pop.best().ok_or_else(|| structural("crossover needs an evaluated best member"))?;
    if n > cfg.crossover_cross_pop {
        Ok((best.clone(), community.uniform(rng).clone()))
    } else {
        let a = &pop.members[rng.random_range(0..pop.len())];
        let b = &pop.members[rng.random_range(0..pop.len())];
        Ok((a.clone(), b.clone()))
    }
}

pub fn choose_crossover_parents<R: Rng + ?Sized>(
    community: &Community,
    task: usize,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<(GenotypePolicy, GenotypePolicy)> {
    let n: f64 = rng.random();
    crossover_parents_for_draw(community, task, n, cfg, rng)
}

/// Copies the longer parent and overwrites the given positions (all below the
/// shorter parent's length) with the shorter parent's bits.
pub fn crossover_at(g1: &GenotypePolicy, g2: &GenotypePolicy, positions: &[usize]) -> Result<GenotypePolicy> {
    let (long, short) = if g2.len() > g1.len() { (g2, g1) } else { (g1, g2) };
    let mut child = long.fresh_copy();
    for &p in positions {
        if p >= short.len() {
            return Err(structural(format!("crossover position {p} beyond short parent length {}", short.len())));
        }
        child.set_bit(p, short.bits()[p]);
    }
    Ok(child)
}

pub fn crossover<R: Rng + ?Sized>(g1: &GenotypePolicy, g2: &GenotypePolicy, rate: f64, rng: &mut R) -> GenotypePolicy {
    let l = g1.len().min(g2.len());
    let n_c = rate_count(l, rate);
    let positions = sample(rng, l, n_c).into_vec();
    crossover_at(g1, g2, &positions).expect("positions drawn below the short length")
}

pub fn mutate_parent_for_draw<R: Rng + ?Sized>(
    community: &Community,
    task: usize,
    n: f64,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<GenotypePolicy> {
    let pop = &community.populations[task];
    let best = pop.best().ok_or_else(|| structural("mutation needs an evaluated best member"))?;
    Ok(if n > cfg.mutate_cross_pop {
        community.uniform(rng).clone()
    } else if n > cfg.mutate_best {
        pop.members[rng.random_range(0..pop.len())].clone()
    } else {
        best.clone()
    })
}

pub fn choose_mutate_parent<R: Rng + ?Sized>(
    community: &Community,
    task: usize,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<GenotypePolicy> {
    let n: f64 = rng.random();
    mutate_parent_for_draw(community, task, n, cfg, rng)
}

/// Flips the bits at `positions`.
pub fn mutate_at(g: &GenotypePolicy, positions: &[usize]) -> Result<GenotypePolicy> {
    let mut child = g.fresh_copy();
    for &p in positions {
        if p >= g.len() {
            return Err(structural(format!("mutation position {p} beyond length {}", g.len())));
        }
        child.set_bit(p, 1 - g.bits()[p]);
    }
    Ok(child)
}

/// Flips exactly `floor(len * rate)` distinct bits.
pub fn mutate<R: Rng + ?Sized>(g: &GenotypePolicy, rate: f64, rng: &mut R) -> GenotypePolicy {
    let n = rate_count(g.len(), rate);
    let positions = sample(rng, g.len(), n).into_vec();
    mutate_at(g, &positions).expect("positions drawn below the length")
}

/// Outcome of one generation of a task population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub task_id: usize,
    /// Best fitness before abandonment.
    pub best_fitness: Option<f64>,
    pub best_id: Option<u64>,
    pub abandoned_ids: Vec<u64>,
    pub child_ids: Vec<u64>,
    /// Children replaced because their length did not fit the task's stage.
    pub stale_children: usize,
}

/// One generation: purge stale lengths, drop the worst members, then refill
/// with alternating crossover and mutation children.
pub fn evolve_population<R: Rng + ?Sized>(
    community: &mut Community,
    task: usize,
    cfg: &GaConfig,
    rng: &mut R,
) -> Result<GenerationReport> {
    cfg.validate()?;
    let k = cfg.abandon_count();
    {
        let pop = &mut community.populations[task];
        if pop.len() != cfg.pop_size {
            return Err(structural(format!("population holds {} members, expected {}", pop.len(), cfg.pop_size)));
        }
        pop.purge_stale(rng)?;
    }

    let pop = &mut community.populations[task];
    pop.refresh_best();
    let best_index = pop.best_index.ok_or_else(|| structural("generation needs at least one evaluated member"))?;
    let best_fitness = pop.members[best_index].fitness();
    let best_id = pop.members[best_index].id;

    // worst first; unevaluated members rank below everything
    let mut order: Vec<usize> = (0..pop.len()).filter(|&i| i != best_index).collect();
    order.sort_by(|&a, &b| {
        let fa = pop.members[a].fitness().unwrap_or(f64::NEG_INFINITY);
        let fb = pop.members[b].fitness().unwrap_or(f64::NEG_INFINITY);
        fa.total_cmp(&fb).then(a.cmp(&b))
    });
    let mut doomed: Vec<usize> = order.into_iter().take(k).collect();
    doomed.sort_unstable_by(|a, b| b.cmp(a));
    let mut abandoned_ids = Vec::with_capacity(k);
    for i in doomed {
        abandoned_ids.push(pop.members.remove(i).id);
    }
    pop.refresh_best();

    let mut child_ids = Vec::with_capacity(k);
    for _ in 0..k / 2 {
        let (p1, p2) = choose_crossover_parents(community, task, cfg, rng)?;
        let c = crossover(&p1, &p2, cfg.crossover_rate, rng);
        let pm = choose_mutate_parent(community, task, cfg, rng)?;
        let m = mutate(&pm, cfg.mutate_rate, rng);
        let pop = &mut community.populations[task];
        pop.push(c);
        pop.push(m);
        child_ids.extend(pop.members[pop.len() - 2..].iter().map(|g| g.id));
    }

    let pop = &mut community.populations[task];
    let stale_children = pop.purge_stale(rng)?;
    pop.refresh_best();
    debug_assert_eq!(pop.len(), cfg.pop_size);
    Ok(GenerationReport { task_id: task, best_fitness, best_id: Some(best_id), abandoned_ids, child_ids, stale_children })
}
