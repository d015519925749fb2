//! Run configuration, the interleaved rollout / GA / SAC loop, evaluation,
//! checkpoints and run comparison.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{make_suite, Episode, Suite, SUITE_NAMES};
use crate::error::{config, structural, MegaError, Result};
use crate::evolution::{purge_stale, StageChange, StageConfig, StageEvent, StageTracker};
use crate::ga::{evolve_population, record_fitness, select_for_episode, Community, GaConfig, TaskPopulation};
use crate::genotype::{decode_to_weights, genotype_length, WeightNorm, WeightPlan, MAX_PRECISION};
use crate::modular_net::{sample_action, ModularActorNet, NetDims};
use crate::nn::Activation;
use crate::sac::{ReplayBuffer, SacConfig, SacLearner};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_ACTION: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_EVAL: u64 = 7;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Genotype-routed modules with stage growth.
    Mega,
    /// Plain MLP actor on `state ⊕ task one-hot`.
    Mtsac,
    /// Genotype routing over a constant number of modules.
    Fixed(u32),
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Mega => f.write_str("mega"),
            Baseline::Mtsac => f.write_str("mtsac"),
            Baseline::Fixed(k) => write!(f, "fixed-{k}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = MegaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mega" => Ok(Baseline::Mega),
            "mtsac" => Ok(Baseline::Mtsac),
            _ => s
                .strip_prefix("fixed-")
                .and_then(|k| k.parse().ok())
                .map(Baseline::Fixed)
                .ok_or_else(|| MegaError::Parse(format!("unknown baseline `{s}`"))),
        }
    }
}

impl Serialize for Baseline {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Baseline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a run needs, as one flat JSON object. Missing keys take their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: String,
    pub seed: u64,
    pub episodes_per_task: usize,

    pub baseline: Baseline,
    pub evolution: bool,
    pub ga: bool,
    pub decode: WeightNorm,

    pub pop_size: usize,
    pub precision: u32,
    pub abandon_rate: f64,
    pub crossover_rate: f64,
    pub mutate_rate: f64,
    pub crossover_cross_pop: f64,
    pub mutate_cross_pop: f64,
    pub mutate_best: f64,
    pub max_eval: u32,
    pub p_best_select: f64,

    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub reward_scale: f64,
    pub init_alpha: f64,
    pub critic_hidden: usize,
    pub warmup: usize,
    pub updates_per_step: usize,

    pub embed_hidden: usize,
    pub module_dim: usize,
    pub module_hidden: usize,

    pub start_stage: u32,
    pub stage_cap: u32,
    pub stage_window: usize,
    pub min_success_rate: f64,
    /// Fraction of the episode reward range that counts as fitness progress.
    pub min_fitness_gain_frac: f64,
    pub fitness_generations: usize,
    pub stage_cooldown: u32,

    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Gradient steps between SAC metric lines.
    pub sac_log_every: u64,
    /// Greedy evaluation episodes per task at the end of training.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ga = GaConfig::default();
        let sac = SacConfig::default();
        let dims = NetDims::desk(1, 1);
        Self {
            suite: "mt4-fixed".into(),
            seed: 0,
            episodes_per_task: 2000,
            baseline: Baseline::Mega,
            evolution: true,
            ga: true,
            decode: WeightNorm::HalfSoftmax,
            pop_size: ga.pop_size,
            precision: 2,
            abandon_rate: ga.abandon_rate,
            crossover_rate: ga.crossover_rate,
            mutate_rate: ga.mutate_rate,
            crossover_cross_pop: ga.crossover_cross_pop,
            mutate_cross_pop: ga.mutate_cross_pop,
            mutate_best: ga.mutate_best,
            max_eval: ga.max_eval,
            p_best_select: ga.p_best_select,
            gamma: sac.gamma,
            actor_lr: sac.actor_lr,
            critic_lr: sac.critic_lr,
            alpha_lr: sac.alpha_lr,
            tau: sac.tau,
            batch_size: sac.batch_size,
            buffer_capacity: sac.buffer_capacity,
            reward_scale: sac.reward_scale,
            init_alpha: sac.init_alpha,
            critic_hidden: sac.critic_hidden,
            warmup: sac.warmup,
            updates_per_step: 1,
            embed_hidden: dims.embed_hidden,
            module_dim: dims.module_dim,
            module_hidden: dims.module_hidden,
            start_stage: 3,
            stage_cap: 8,
            stage_window: 50,
            min_success_rate: 0.05,
            min_fitness_gain_frac: 0.01,
            fitness_generations: 3,
            stage_cooldown: 100,
            checkpoint_every: 0,
            sac_log_every: 1000,
            eval_episodes: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from a `key=value` string. The value is read as JSON when
    /// it parses, otherwise as a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| MegaError::Parse(format!("expected key=value, got `{assignment}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serializes to an object");
        if !map.contains_key(key) {
            return Err(config(format!("unknown config key `{key}`")));
        }
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj)?;
        Ok(())
    }

    pub fn ga_config(&self) -> GaConfig {
        GaConfig {
            pop_size: self.pop_size,
            abandon_rate: self.abandon_rate,
            crossover_rate: self.crossover_rate,
            mutate_rate: self.mutate_rate,
            crossover_cross_pop: self.crossover_cross_pop,
            mutate_cross_pop: self.mutate_cross_pop,
            mutate_best: self.mutate_best,
            max_eval: self.max_eval,
            p_best_select: self.p_best_select,
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            tau: self.tau,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            reward_scale: self.reward_scale,
            init_alpha: self.init_alpha,
            critic_hidden: self.critic_hidden,
            warmup: self.warmup,
        }
    }

    /// Stage the run starts from, and whether it may grow.
    fn stage_bounds(&self) -> (u32, u32) {
        match self.baseline {
            Baseline::Fixed(k) => (k, k),
            _ if !self.evolution => (self.start_stage, self.start_stage),
            _ => (self.start_stage, self.stage_cap),
        }
    }

    pub fn stage_config(&self, reward_range: f64) -> StageConfig {
        let (start_stage, stage_cap) = self.stage_bounds();
        StageConfig {
            start_stage,
            stage_cap,
            window: self.stage_window,
            min_success_rate: self.min_success_rate,
            min_fitness_gain: self.min_fitness_gain_frac * reward_range,
            fitness_generations: self.fitness_generations,
            cooldown: self.stage_cooldown,
        }
    }

    pub fn net_dims(&self, obs_dim: usize, action_dim: usize) -> NetDims {
        NetDims {
            obs_dim,
            action_dim,
            embed_hidden: self.embed_hidden,
            module_dim: self.module_dim,
            module_hidden: self.module_hidden,
            activation: Activation::Relu,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }

    pub fn uses_genotypes(&self) -> bool {
        self.baseline != Baseline::Mtsac
    }

    pub fn validate(&self) -> Result<()> {
        if !SUITE_NAMES.contains(&self.suite.as_str()) {
            return Err(config(format!("unknown suite `{}`", self.suite)));
        }
        if self.episodes_per_task == 0 {
            return Err(config("episodes_per_task must be positive"));
        }
        if self.precision == 0 || self.precision > MAX_PRECISION {
            return Err(config(format!("precision {} outside [1, {MAX_PRECISION}]", self.precision)));
        }
        if let Baseline::Fixed(k) = self.baseline {
            if k < self.start_stage {
                return Err(config(format!("fixed-{k} is below the start stage {}", self.start_stage)));
            }
        }
        if self.updates_per_step == 0 {
            return Err(config("updates_per_step must be positive"));
        }
        if self.embed_hidden == 0 || self.module_dim == 0 || self.module_hidden == 0 {
            return Err(config("network widths must be positive"));
        }
        if !(self.min_fitness_gain_frac >= 0.0) {
            return Err(config("min_fitness_gain_frac must be non-negative"));
        }
        if self.uses_genotypes() {
            self.ga_config().validate()?;
            let (_, cap) = self.stage_bounds();
            genotype_length(self.precision, cap)?;
        }
        self.sac_config().validate()?;
        self.stage_config(1.0).validate()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub task_id: usize,
    pub episode_return: f64,
    pub success: bool,
    pub steps: usize,
    pub genotype_id: Option<u64>,
    pub genotype_len: usize,
    pub stage: u32,
    pub module_count: usize,
}

/// One line of `timing.jsonl`; kept apart so that metrics stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub episode: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStates {
    pub init: ChaCha8Rng,
    pub env: ChaCha8Rng,
    pub action: ChaCha8Rng,
    pub train: ChaCha8Rng,
    pub ga: Vec<ChaCha8Rng>,
}

impl RngStates {
    fn new(seed: u64, n_tasks: usize) -> Self {
        Self {
            init: stream_rng(seed, STREAM_INIT),
            env: stream_rng(seed, STREAM_ENV),
            action: stream_rng(seed, STREAM_ACTION),
            train: stream_rng(seed, STREAM_TRAIN),
            ga: (0..n_tasks as u64).map(|t| seeded_rng(seed.wrapping_add(t))).collect(),
        }
    }
}

/// Single-file training state. The replay buffer is not included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub suite: Suite,
    pub episode: usize,
    pub env_steps: u64,
    pub learner: SacLearner,
    pub community: Community,
    pub tracker: StageTracker,
    pub rngs: RngStates,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(MegaError::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.check_consistency()?;
        Ok(ck)
    }

    /// Stages, genotype lengths and network size must agree.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.suite.num_tasks();
        if self.tracker.stages().len() != n || self.learner.n_tasks != n {
            return Err(structural("checkpoint task count mismatch"));
        }
        if !self.config.uses_genotypes() {
            return Ok(());
        }
        if self.community.populations.len() != n {
            return Err(structural("checkpoint population count mismatch"));
        }
        let modules = self.learner.actor.num_modules();
        for (t, pop) in self.community.populations.iter().enumerate() {
            let stage = self.tracker.stage(t);
            if stage as usize > modules {
                return Err(structural(format!("task {t} at stage {stage} but the network has {modules} modules")));
            }
            let len = genotype_length(pop.precision, stage)?;
            if pop.stage != stage || pop.members().iter().any(|g| g.len() != len) {
                return Err(structural(format!("task {t} population does not match stage {stage}")));
            }
        }
        Ok(())
    }

    /// Genotype CSV with a header: one row per genotype of every task.
    pub fn genotype_csv(&self) -> String {
        let mut out = String::from("task_id,stage,p_w,genotype,fitness,eval_count\n");
        for pop in &self.community.populations {
            for g in pop.members() {
                out.push_str(&g.to_csv_line(pop.task_id));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: usize,
    pub task: String,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_success(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.success_rate).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,task,success_rate,mean_return\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.task_id, r.task, r.success_rate, r.mean_return));
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummaryRow {
    pub task_id: usize,
    pub task: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub rows: Vec<SeedSummaryRow>,
    pub suite_mean: f64,
    pub suite_std: f64,
}

/// Per-task and suite-average success, mean ± std across seeds.
pub fn summarize_seeds(reports: &[EvalReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or_else(|| MegaError::InvalidArgument("no reports".into()))?;
    if reports.iter().any(|r| r.rows.len() != first.rows.len()) {
        return Err(structural("reports cover different task sets"));
    }
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let xs: Vec<f64> = reports.iter().map(|r| r.rows[i].success_rate).collect();
            let (mean, std) = mean_std(&xs);
            SeedSummaryRow { task_id: row.task_id, task: row.task.clone(), mean, std }
        })
        .collect();
    let suite: Vec<f64> = reports.iter().map(EvalReport::mean_success).collect();
    let (suite_mean, suite_std) = mean_std(&suite);
    Ok(SeedSummary { rows, suite_mean, suite_std })
}

/// Result of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub episodes: usize,
    pub env_steps: u64,
    pub gradient_steps: u64,
    pub task_names: Vec<String>,
    pub final_stages: Vec<u32>,
    pub module_count: usize,
    /// Success rate over each task's last 100 training episodes.
    pub recent_success: Vec<f64>,
    pub eval: EvalReport,
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub episode: usize,
    pub task_id: usize,
    /// `evolve` (crossover and mutation) or `resample` (random replacement).
    pub mode: String,
    pub best_fitness: Option<f64>,
    pub abandoned_ids: Vec<u64>,
    pub child_ids: Vec<u64>,
}

/// Output files of a run directory.
struct Sinks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    stages: BufWriter<File>,
    generations: BufWriter<File>,
    sac: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            timing: open("timing.jsonl")?,
            stages: open("stage_events.jsonl")?,
            generations: open("generations.jsonl")?,
            sac: open("sac_metrics.jsonl")?,
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.timing, &mut self.stages, &mut self.generations, &mut self.sac] {
            w.flush()?;
        }
        Ok(())
    }
}

/// Live training state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub suite: Suite,
    pub learner: SacLearner,
    pub buffer: ReplayBuffer,
    pub community: Community,
    pub tracker: StageTracker,
    rngs: RngStates,
    episode: usize,
    env_steps: u64,
    recent: Vec<std::collections::VecDeque<bool>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let suite = make_suite(&cfg.suite, cfg.seed)?;
        let n_tasks = suite.num_tasks();
        let mut rngs = RngStates::new(cfg.seed, n_tasks);
        let (start, _) = cfg.stage_bounds();
        let tracker = StageTracker::new(cfg.stage_config(suite.spec.episode_reward_range()), n_tasks)?;

        let (actor, one_hot) = if cfg.uses_genotypes() {
            let dims = cfg.net_dims(suite.spec.obs_dim, suite.spec.action_dim);
            (ModularActorNet::new(dims, start as usize, &mut rngs.init), false)
        } else {
            let dims = cfg.net_dims(suite.spec.obs_dim + n_tasks, suite.spec.action_dim);
            (ModularActorNet::new(dims, 0, &mut rngs.init), true)
        };
        let learner = SacLearner::new(cfg.sac_config(), actor, suite.spec.obs_dim, n_tasks, one_hot, &mut rngs.init)?;

        let populations = if cfg.uses_genotypes() {
            (0..n_tasks)
                .map(|t| TaskPopulation::random(t, cfg.pop_size, cfg.precision, start, &mut rngs.ga[t]))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            community: Community::new(populations)?,
            tracker,
            learner,
            suite,
            rngs,
            episode: 0,
            env_steps: 0,
            recent: vec![Default::default(); n_tasks],
            cfg,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Plans every task trains under: each population's champion.
    fn champion_plans(&self) -> Result<Vec<WeightPlan>> {
        (0..self.suite.num_tasks())
            .map(|t| {
                if self.cfg.uses_genotypes() {
                    decode_to_weights(self.community.populations[t].champion(), self.cfg.decode)
                } else {
                    Ok(WeightPlan::empty())
                }
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            suite: self.suite.clone(),
            episode: self.episode,
            env_steps: self.env_steps,
            learner: self.learner.clone(),
            community: self.community.clone(),
            tracker: self.tracker.clone(),
            rngs: self.rngs.clone(),
        }
    }

    /// Runs the whole episode budget. With `out`, writes metrics, stage
    /// events, SAC metrics, checkpoints and the final report there.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainReport> {
        let mut sinks = out.map(Sinks::open).transpose()?;
        let start = Instant::now();
        let n_tasks = self.suite.num_tasks();
        let total = self.cfg.episodes_per_task * n_tasks;
        let mut plans = self.champion_plans()?;
        let ga_cfg = self.cfg.ga_config();

        while self.episode < total {
            let task_id = self.episode % n_tasks;

            let selected = if self.cfg.uses_genotypes() {
                let pop = &self.community.populations[task_id];
                let idx = select_for_episode(pop, &ga_cfg, &mut self.rngs.ga[task_id]);
                plans[task_id] = decode_to_weights(&pop.members()[idx], self.cfg.decode)?;
                Some(idx)
            } else {
                None
            };
            let (genotype_id, genotype_len, stage) = match selected {
                Some(i) => {
                    let pop = &self.community.populations[task_id];
                    (Some(pop.members()[i].id), pop.members()[i].len(), pop.stage)
                }
                None => (None, 0, 0),
            };

            let mut ep = self.suite.tasks[task_id].reset(&mut self.rngs.env);
            let mut episode_return = 0.0;
            let mut steps = 0;
            while !ep.done {
                let obs = ep.observation();
                let action = if (self.env_steps as usize) < self.cfg.warmup {
                    (0..self.suite.spec.action_dim).map(|_| self.rngs.action.random_range(-1.0..=1.0)).collect()
                } else {
                    let x = self.learner.actor_input(&obs, task_id);
                    let (mean, log_std, _) = self.learner.actor.forward(&x, &plans[task_id])?;
                    sample_action(&mean, &log_std, &mut self.rngs.action).0
                };
                let tr = ep.step(&action)?;
                episode_return += tr.reward;
                steps += 1;
                self.buffer.push_env(&tr, self.cfg.reward_scale);
                self.env_steps += 1;
                if self.env_steps as usize >= self.cfg.warmup {
                    for _ in 0..self.cfg.updates_per_step {
                        let Some(m) = self.learner.train_step(&self.buffer, &plans, &mut self.rngs.train)? else {
                            break;
                        };
                        if !(m.critic_loss.is_finite() && m.actor_loss.is_finite()) {
                            return Err(MegaError::InvalidArgument(format!(
                                "training diverged at gradient step {}",
                                m.step
                            )));
                        }
                        if let Some(s) = sinks.as_mut() {
                            if m.step % self.cfg.sac_log_every.max(1) == 0 {
                                for line in m.log_lines() {
                                    Sinks::line(&mut s.sac, &line)?;
                                }
                            }
                        }
                    }
                }
            }
            let success = ep.success;
            let recent = &mut self.recent[task_id];
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(success);

            if let Some(idx) = selected {
                let pop = &mut self.community.populations[task_id];
                record_fitness(pop, idx, episode_return)?;
                let mut generation_best = None;
                if pop.all_evaluated(ga_cfg.max_eval) {
                    let record = if self.cfg.ga {
                        let report = evolve_population(&mut self.community, task_id, &ga_cfg, &mut self.rngs.ga[task_id])?;
                        GenerationRecord {
                            episode: self.episode,
                            task_id,
                            mode: "evolve".into(),
                            best_fitness: report.best_fitness,
                            abandoned_ids: report.abandoned_ids,
                            child_ids: report.child_ids,
                        }
                    } else {
                        let best_fitness = pop.best().and_then(|g| g.fitness());
                        let abandoned_ids = pop.members().iter().map(|g| g.id).collect();
                        pop.resample(&mut self.rngs.ga[task_id])?;
                        GenerationRecord {
                            episode: self.episode,
                            task_id,
                            mode: "resample".into(),
                            best_fitness,
                            abandoned_ids,
                            child_ids: pop.members().iter().map(|g| g.id).collect(),
                        }
                    };
                    generation_best = record.best_fitness;
                    if let Some(s) = sinks.as_mut() {
                        Sinks::line(&mut s.generations, &record)?;
                    }
                }
                let old_stage = self.tracker.stage(task_id);
                if self.tracker.update_stage(task_id, success, generation_best) == StageChange::Incremented {
                    let new_stage = self.tracker.stage(task_id);
                    purge_stale(&mut self.community.populations[task_id], new_stage, &mut self.rngs.ga[task_id])?;
                    self.tracker.sync_network(&mut self.learner.actor, &mut self.rngs.init);
                    plans[task_id] = decode_to_weights(self.community.populations[task_id].champion(), self.cfg.decode)?;
                    if let Some(s) = sinks.as_mut() {
                        let event = StageEvent {
                            episode: self.episode,
                            task_id,
                            old_stage,
                            new_stage,
                            reason: "low success and stalled fitness".into(),
                        };
                        Sinks::line(&mut s.stages, &event)?;
                    }
                }
            }

            if let Some(s) = sinks.as_mut() {
                let record = MetricsRecord {
                    episode: self.episode,
                    task_id,
                    episode_return,
                    success,
                    steps,
                    genotype_id,
                    genotype_len,
                    stage,
                    module_count: self.learner.actor.num_modules(),
                };
                Sinks::line(&mut s.metrics, &record)?;
                Sinks::line(&mut s.timing, &TimingRecord { episode: self.episode, wall_time_s: start.elapsed().as_secs_f64() })?;
            }
            self.episode += 1;
            if let Some(s) = sinks.as_mut() {
                if self.cfg.checkpoint_every > 0 && self.episode.is_multiple_of(self.cfg.checkpoint_every) {
                    s.flush()?;
                    let ck = self.checkpoint();
                    ck.save(&s.dir.join(format!("checkpoint-{:06}.json", self.episode)))?;
                    std::fs::write(s.dir.join(format!("genotypes-{:06}.csv", self.episode)), ck.genotype_csv())?;
                }
            }
        }

        let ck = self.checkpoint();
        let eval = evaluate(&ck, self.cfg.eval_episodes, self.cfg.seed)?;
        let report = TrainReport {
            config: self.cfg.clone(),
            episodes: self.episode,
            env_steps: self.env_steps,
            gradient_steps: self.learner.steps(),
            task_names: self.suite.tasks.iter().map(|t| t.kind.name().to_string()).collect(),
            final_stages: if self.cfg.uses_genotypes() { self.tracker.stages() } else { vec![0; n_tasks] },
            module_count: self.learner.actor.num_modules(),
            recent_success: self
                .recent
                .iter()
                .map(|r| if r.is_empty() { 0.0 } else { r.iter().filter(|&&s| s).count() as f64 / r.len() as f64 })
                .collect(),
            eval,
        };
        if let Some(mut s) = sinks {
            s.flush()?;
            ck.save(&s.dir.join("checkpoint.json"))?;
            std::fs::write(s.dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(s.dir.join("success.csv"), report.eval.to_csv())?;
            std::fs::write(s.dir.join("genotypes.csv"), ck.genotype_csv())?;
        }
        Ok(report)
    }
}

/// Trains from scratch under `cfg`.
pub fn run_training(cfg: RunConfig, out: Option<&Path>) -> Result<TrainReport> {
    Trainer::new(cfg)?.run(out)
}

/// Greedy (mean-action) success of each task's champion genotype.
pub fn evaluate(ck: &Checkpoint, episodes_per_task: usize, seed: u64) -> Result<EvalReport> {
    ck.check_consistency()?;
    let plans = (0..ck.suite.num_tasks())
        .map(|t| {
            if ck.config.uses_genotypes() {
                decode_to_weights(ck.community.populations[t].champion(), ck.config.decode)
            } else {
                Ok(WeightPlan::empty())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let learner = &ck.learner;
    evaluate_with(&ck.suite, episodes_per_task, seed, |task_id, ep| {
        let x = learner.actor_input(&ep.observation(), task_id);
        let (mean, _, _) = learner.actor.forward(&x, &plans[task_id])?;
        Ok(mean.iter().map(|m| m.tanh()).collect())
    })
}

/// Success table of an arbitrary policy `(task_id, episode) -> action`.
pub fn evaluate_with(
    suite: &Suite,
    episodes_per_task: usize,
    seed: u64,
    mut policy: impl FnMut(usize, &Episode) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let mut rows = Vec::with_capacity(suite.num_tasks());
    for task in &suite.tasks {
        let mut successes = 0usize;
        let mut total_return = 0.0;
        for _ in 0..episodes_per_task {
            let mut ep = task.reset(&mut rng);
            while !ep.done {
                let action = policy(task.task_id, &ep)?;
                total_return += ep.step(&action)?.reward;
            }
            successes += usize::from(ep.success);
        }
        let n = episodes_per_task.max(1) as f64;
        rows.push(EvalRow {
            task_id: task.task_id,
            task: task.kind.name().to_string(),
            success_rate: successes as f64 / n,
            mean_return: total_return / n,
        });
    }
    Ok(EvalReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleUsageRow {
    pub task_id: usize,
    pub task: String,
    pub stage_a: u32,
    pub stage_b: u32,
    pub difference: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleUsage {
    pub rows: Vec<ModuleUsageRow>,
    pub mean_difference: f64,
}

impl ModuleUsage {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,task,stage_a,stage_b,difference\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.task_id, r.task, r.stage_a, r.stage_b, r.difference));
        }
        out.push_str(&format!("mean,,,,{}\n", self.mean_difference));
        out
    }
}

/// Per-task `final_stage_a - final_stage_b`.
pub fn compare_reports(a: &TrainReport, b: &TrainReport) -> Result<ModuleUsage> {
    if a.task_names != b.task_names {
        return Err(structural("runs cover different task sets"));
    }
    let rows: Vec<ModuleUsageRow> = a
        .task_names
        .iter()
        .enumerate()
        .map(|(t, name)| ModuleUsageRow {
            task_id: t,
            task: name.clone(),
            stage_a: a.final_stages[t],
            stage_b: b.final_stages[t],
            difference: a.final_stages[t] as i64 - b.final_stages[t] as i64,
        })
        .collect();
    let mean_difference = rows.iter().map(|r| r.difference as f64).sum::<f64>() / rows.len().max(1) as f64;
    Ok(ModuleUsage { rows, mean_difference })
}

/// Compares the `report.json` files of two run directories.
pub fn compare_module_usage(run_a: &Path, run_b: &Path) -> Result<ModuleUsage> {
    let load = |dir: &Path| -> Result<TrainReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?)
    };
    compare_reports(&load(run_a)?, &load(run_b)?)
}

/// Reads a JSONL file into records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
