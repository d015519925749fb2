//! Soft actor-critic for the genotype-routed actor.
//!
//! The actor is a [`ModularActorNet`] evaluated under each task's current
//! [`WeightPlan`]; the critic is a pair of plain MLPs over
//! `state ⊕ task one-hot ⊕ action`. Each task has its own temperature.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{config, structural, Result};
use crate::genotype::WeightPlan;
use crate::modular_net::{ForwardTrace, ModularActorNet, ParamGrads, SquashedBatch};
use crate::nn::{soft_update, Adam, Dense, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Multiplies rewards when they enter the replay buffer.
    pub reward_scale: f64,
    pub init_alpha: f64,
    pub critic_hidden: usize,
    /// Transitions collected with uniform random actions before updates start.
    pub warmup: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 1e-4,
            tau: 0.005,
            batch_size: 64,
            buffer_capacity: 100_000,
            reward_scale: 0.1,
            init_alpha: 0.1,
            critic_hidden: 64,
            warmup: 1000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(config("buffer capacity must hold at least one batch"));
        }
        if [self.actor_lr, self.critic_lr, self.alpha_lr].iter().any(|lr| !(*lr >= 0.0)) {
            return Err(config("learning rates must be non-negative"));
        }
        if !(self.init_alpha > 0.0) {
            return Err(config("initial alpha must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Critic

/// ReLU hidden layers, linear scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpTrace {
    input: Array2<f64>,
    /// Post-ReLU hidden activations.
    hidden: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> MlpTrace {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        let mut cur = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(cur.view());
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
                hidden.push(y.clone());
            }
            cur = y;
        }
        MlpTrace { input: x.to_owned(), hidden, output: cur }
    }

    /// Backpropagates `dy` (shape of the output). Parameter gradients go into
    /// `grads` when given; the input gradient is always returned.
    pub fn backward(&self, trace: &MlpTrace, dy: &Array2<f64>, mut grads: Option<&mut Mlp>) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { trace.input.view() } else { trace.hidden[i - 1].view() };
            d = match grads.as_deref_mut() {
                Some(g) => self.layers[i].backward(x, &d, &mut g.layers[i]),
                None => self.layers[i].backward_input(&d),
            };
            if i > 0 {
                ndarray::Zip::from(&mut d).and(&trace.hidden[i - 1]).for_each(|g, &h| {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
        d
    }
}

/// Twin Q networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let widths = [input_dim, hidden, hidden, 1];
        Self { q1: Mlp::new(&widths, rng), q2: Mlp::new(&widths, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { q1: self.q1.zeros_like(), q2: self.q2.zeros_like() }
    }

    pub fn input_dim(&self) -> usize {
        self.q1.layers[0].fan_in()
    }

    /// Elementwise minimum of the twins.
    pub fn min_q(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let a = self.q1.forward(x).output;
        let b = self.q2.forward(x).output;
        ndarray::Zip::from(a.column(0)).and(b.column(0)).map_collect(|&p, &q| p.min(q))
    }
}

impl Parameterized for CriticNet {
    fn layers(&self) -> Vec<&Dense> {
        self.q1.layers.iter().chain(&self.q2.layers).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        self.q1.layers.iter_mut().chain(self.q2.layers.iter_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Replay

/// A transition as stored for learning: reward already scaled, `terminal`
/// set only when the episode ended by success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTransition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub task_id: usize,
}

/// FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<StoredTransition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: StoredTransition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn push_env(&mut self, t: &Transition, reward_scale: f64) {
        self.push(StoredTransition {
            state: t.state.clone(),
            action: t.action.clone(),
            reward: t.reward * reward_scale,
            next_state: t.next_state.clone(),
            terminal: t.success,
            task_id: t.task_id,
        });
    }

    pub fn get(&self, i: usize) -> &StoredTransition {
        &self.items[i]
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&StoredTransition> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// A sampled minibatch with the inputs each network needs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub task_ids: Vec<usize>,
    pub actor_states: Array2<f64>,
    pub actor_next_states: Array2<f64>,
    /// `state ⊕ one-hot(task)`.
    pub critic_states: Array2<f64>,
    pub critic_next_states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub terminals: Array1<f64>,
}

/// Appends a task one-hot to every row.
pub fn with_task_one_hot(states: ArrayView2<f64>, task_ids: &[usize], n_tasks: usize) -> Array2<f64> {
    let mut out = Array2::zeros((states.nrows(), states.ncols() + n_tasks));
    out.slice_mut(s![.., ..states.ncols()]).assign(&states);
    for (r, &t) in task_ids.iter().enumerate() {
        out[[r, states.ncols() + t]] = 1.0;
    }
    out
}

impl Batch {
    /// `actor_one_hot` feeds the task one-hot to the actor as well (plain
    /// multi-task SAC).
    pub fn from_transitions(items: &[&StoredTransition], n_tasks: usize, actor_one_hot: bool) -> Self {
        let rows = |f: &dyn Fn(&StoredTransition) -> &[f64]| {
            let v: Vec<&[f64]> = items.iter().map(|t| f(t)).collect();
            crate::nn::stack_rows(&v)
        };
        let states = rows(&|t| &t.state);
        let next_states = rows(&|t| &t.next_state);
        let actions = rows(&|t| &t.action);
        let task_ids: Vec<usize> = items.iter().map(|t| t.task_id).collect();
        let critic_states = with_task_one_hot(states.view(), &task_ids, n_tasks);
        let critic_next_states = with_task_one_hot(next_states.view(), &task_ids, n_tasks);
        let (actor_states, actor_next_states) = if actor_one_hot {
            (critic_states.clone(), critic_next_states.clone())
        } else {
            (states, next_states)
        };
        Self {
            rewards: items.iter().map(|t| t.reward).collect(),
            terminals: items.iter().map(|t| if t.terminal { 1.0 } else { 0.0 }).collect(),
            task_ids,
            actor_states,
            actor_next_states,
            critic_states,
            critic_next_states,
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// Distinct task ids in ascending order, each with its row indices.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut tasks: Vec<usize> = self.task_ids.clone();
        tasks.sort_unstable();
        tasks.dedup();
        tasks
            .into_iter()
            .map(|t| (t, self.task_ids.iter().enumerate().filter(|(_, &x)| x == t).map(|(i, _)| i).collect()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Policy evaluated on a batch, grouped by task so each group shares a plan.
pub struct PolicyEval {
    pub groups: Vec<PolicyGroup>,
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
}

pub struct PolicyGroup {
    pub task_id: usize,
    pub rows: Vec<usize>,
    pub trace: ForwardTrace,
    pub sample: SquashedBatch,
}

pub fn evaluate_policy(
    net: &ModularActorNet,
    states: &Array2<f64>,
    batch: &Batch,
    plans: &[WeightPlan],
    noise: &Array2<f64>,
) -> Result<PolicyEval> {
    let a = net.dims().action_dim;
    if noise.dim() != (batch.len(), a) {
        return Err(structural("noise shape does not match the batch"));
    }
    let mut actions = Array2::zeros((batch.len(), a));
    let mut log_probs = Array1::zeros(batch.len());
    let mut groups = Vec::new();
    for (task_id, rows) in batch.groups() {
        let plan = plans.get(task_id).ok_or_else(|| structural(format!("no plan for task {task_id}")))?;
        let x = states.select(Axis(0), &rows);
        let trace = net.forward_batch(x.view(), plan)?;
        let sample = SquashedBatch::new(&trace.mean, &trace.log_std, noise.select(Axis(0), &rows));
        for (k, &r) in rows.iter().enumerate() {
            actions.row_mut(r).assign(&sample.action.row(k));
            log_probs[r] = sample.log_prob[k];
        }
        groups.push(PolicyGroup { task_id, rows, trace, sample });
    }
    Ok(PolicyEval { groups, actions, log_probs })
}

pub struct ActorLossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub log_probs: Array1<f64>,
}

/// `mean(alpha_t * log pi(a|s) - min(Q1, Q2)(s, a))` with `a` reparameterized
/// through `noise`. Only actor parameters receive gradient.
pub fn actor_loss(
    batch: &Batch,
    net: &ModularActorNet,
    plans: &[WeightPlan],
    critic: &CriticNet,
    alphas: &[f64],
    noise: &Array2<f64>,
) -> Result<ActorLossOutput> {
    let n = batch.len() as f64;
    let eval = evaluate_policy(net, &batch.actor_states, batch, plans, noise)?;
    let x = concatenate(Axis(1), &[batch.critic_states.view(), eval.actions.view()])
        .map_err(|e| structural(e.to_string()))?;
    let t1 = critic.q1.forward(x.view());
    let t2 = critic.q2.forward(x.view());

    let mut loss = 0.0;
    let mut d1 = Array2::zeros((batch.len(), 1));
    let mut d2 = Array2::zeros((batch.len(), 1));
    for r in 0..batch.len() {
        let (q1, q2) = (t1.output[[r, 0]], t2.output[[r, 0]]);
        let alpha = alphas[batch.task_ids[r]];
        loss += alpha * eval.log_probs[r] - q1.min(q2);
        if q1 <= q2 {
            d1[[r, 0]] = -1.0 / n;
        } else {
            d2[[r, 0]] = -1.0 / n;
        }
    }
    loss /= n;

    let dx = critic.q1.backward(&t1, &d1, None) + critic.q2.backward(&t2, &d2, None);
    let state_cols = batch.critic_states.ncols();
    let d_action = dx.slice(s![.., state_cols..]).to_owned();

    let mut grads = net.zero_grads();
    for g in &eval.groups {
        let d_a = d_action.select(Axis(0), &g.rows);
        let d_lp: Array1<f64> = g.rows.iter().map(|&r| alphas[batch.task_ids[r]] / n).collect();
        let head = g.sample.head_grad(&g.trace.log_std, &d_a, &d_lp);
        net.backward_into(&g.trace, &head, &mut grads)?;
    }
    Ok(ActorLossOutput { loss, grads, log_probs: eval.log_probs })
}

pub struct CriticLossOutput {
    pub loss: f64,
    pub grads: CriticNet,
    pub targets: Array1<f64>,
}

/// Soft Bellman regression of both twins onto
/// `r + gamma * (1 - terminal) * (min target-Q(s', a') - alpha_t log pi(a'|s'))`.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss(
    batch: &Batch,
    critic: &CriticNet,
    target: &CriticNet,
    net: &ModularActorNet,
    plans: &[WeightPlan],
    alphas: &[f64],
    gamma: f64,
    next_noise: &Array2<f64>,
) -> Result<CriticLossOutput> {
    let n = batch.len() as f64;
    let next = evaluate_policy(net, &batch.actor_next_states, batch, plans, next_noise)?;
    let xn = concatenate(Axis(1), &[batch.critic_next_states.view(), next.actions.view()])
        .map_err(|e| structural(e.to_string()))?;
    let next_q = target.min_q(xn.view());
    let targets: Array1<f64> = (0..batch.len())
        .map(|r| {
            let alpha = alphas[batch.task_ids[r]];
            let soft_v = next_q[r] - alpha * next.log_probs[r];
            batch.rewards[r] + gamma * (1.0 - batch.terminals[r]) * soft_v
        })
        .collect();

    let x = concatenate(Axis(1), &[batch.critic_states.view(), batch.actions.view()])
        .map_err(|e| structural(e.to_string()))?;
    let t1 = critic.q1.forward(x.view());
    let t2 = critic.q2.forward(x.view());
    let mut loss = 0.0;
    let mut d1 = Array2::zeros((batch.len(), 1));
    let mut d2 = Array2::zeros((batch.len(), 1));
    for r in 0..batch.len() {
        let e1 = t1.output[[r, 0]] - targets[r];
        let e2 = t2.output[[r, 0]] - targets[r];
        loss += e1 * e1 + e2 * e2;
        d1[[r, 0]] = 2.0 * e1 / n;
        d2[[r, 0]] = 2.0 * e2 / n;
    }
    loss /= n;
    let mut grads = critic.zeros_like();
    critic.q1.backward(&t1, &d1, Some(&mut grads.q1));
    critic.q2.backward(&t2, &d2, Some(&mut grads.q2));
    Ok(CriticLossOutput { loss, grads, targets })
}

/// `mean(-alpha * (log pi + target_entropy))` and its derivative with respect
/// to `log_alpha`.
pub fn alpha_loss(log_probs: &[f64], log_alpha: f64, target_entropy: f64) -> (f64, f64) {
    if log_probs.is_empty() {
        return (0.0, 0.0);
    }
    let alpha = log_alpha.exp();
    let mean_gap = log_probs.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len() as f64;
    let loss = -alpha * mean_gap;
    // d(-e^x c)/dx = -e^x c
    (loss, loss)
}

/// Per-task learnable temperatures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaState {
    pub log_alpha: Vec<f64>,
    pub target_entropy: f64,
    optimizers: Vec<Adam>,
}

impl AlphaState {
    pub fn new(n_tasks: usize, init_alpha: f64, action_dim: usize, lr: f64) -> Self {
        Self {
            log_alpha: vec![init_alpha.ln(); n_tasks],
            target_entropy: -(action_dim as f64),
            optimizers: (0..n_tasks).map(|_| Adam::new(lr)).collect(),
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|l| l.exp()).collect()
    }

    /// One Adam step on task `task`'s temperature. Returns the loss.
    pub fn step(&mut self, task: usize, log_probs: &[f64]) -> f64 {
        let (loss, grad) = alpha_loss(log_probs, self.log_alpha[task], self.target_entropy);
        self.optimizers[task].apply_scalar(&mut self.log_alpha[task], grad);
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStepMetrics {
    pub task_id: usize,
    pub alpha: f64,
    /// `-mean(log pi)` over the task's rows of the batch.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub tasks: Vec<TaskStepMetrics>,
}

/// One JSONL record per task of a logged update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogLine {
    pub step: u64,
    pub task_id: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

impl StepMetrics {
    pub fn log_lines(&self) -> Vec<StepLogLine> {
        self.tasks
            .iter()
            .map(|t| StepLogLine {
                step: self.step,
                task_id: t.task_id,
                critic_loss: self.critic_loss,
                actor_loss: self.actor_loss,
                alpha: t.alpha,
                entropy: t.entropy,
            })
            .collect()
    }
}

/// Actor, critics, temperatures and their optimizers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacLearner {
    pub cfg: SacConfig,
    pub n_tasks: usize,
    /// Whether the actor also sees the task one-hot.
    pub actor_one_hot: bool,
    pub actor: ModularActorNet,
    pub critic: CriticNet,
    pub critic_target: CriticNet,
    pub alphas: AlphaState,
    actor_opt: Adam,
    critic_opt: Adam,
    steps: u64,
}

impl SacLearner {
    pub fn new<R: Rng + ?Sized>(
        cfg: SacConfig,
        actor: ModularActorNet,
        obs_dim: usize,
        n_tasks: usize,
        actor_one_hot: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let action_dim = actor.dims().action_dim;
        let expected_actor_in = obs_dim + if actor_one_hot { n_tasks } else { 0 };
        if actor.dims().obs_dim != expected_actor_in {
            return Err(structural(format!(
                "actor input width {} does not match {expected_actor_in}",
                actor.dims().obs_dim
            )));
        }
        let critic = CriticNet::new(obs_dim + n_tasks + action_dim, cfg.critic_hidden, rng);
        let critic_target = critic.clone();
        let alphas = AlphaState::new(n_tasks, cfg.init_alpha, action_dim, cfg.alpha_lr);
        Ok(Self {
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            cfg,
            n_tasks,
            actor_one_hot,
            actor,
            critic,
            critic_target,
            alphas,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Actor input for one raw observation.
    pub fn actor_input(&self, obs: &[f64], task_id: usize) -> Vec<f64> {
        let mut x = obs.to_vec();
        if self.actor_one_hot {
            x.extend((0..self.n_tasks).map(|t| if t == task_id { 1.0 } else { 0.0 }));
        }
        x
    }

    /// One critic, actor, temperature and target update. Returns `None` when
    /// the buffer cannot fill a batch yet.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        plans: &[WeightPlan],
        rng: &mut R,
    ) -> Result<Option<StepMetrics>> {
        if buffer.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let items = buffer.sample(self.cfg.batch_size, rng);
        let batch = Batch::from_transitions(&items, self.n_tasks, self.actor_one_hot);
        self.update(&batch, plans, rng).map(Some)
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, plans: &[WeightPlan], rng: &mut R) -> Result<StepMetrics> {
        let a = self.actor.dims().action_dim;
        let alphas = self.alphas.alphas();

        let next_noise = Array2::from_shape_simple_fn((batch.len(), a), || rng.sample(rand_distr::StandardNormal));
        let c = critic_loss(batch, &self.critic, &self.critic_target, &self.actor, plans, &alphas, self.cfg.gamma, &next_noise)?;
        self.critic_opt.apply(&mut self.critic, &c.grads)?;

        let noise = Array2::from_shape_simple_fn((batch.len(), a), || rng.sample(rand_distr::StandardNormal));
        let act = actor_loss(batch, &self.actor, plans, &self.critic, &alphas, &noise)?;
        self.actor_opt.apply(&mut self.actor, &act.grads)?;

        let mut tasks = Vec::new();
        for (task_id, rows) in batch.groups() {
            let lps: Vec<f64> = rows.iter().map(|&r| act.log_probs[r]).collect();
            self.alphas.step(task_id, &lps);
            tasks.push(TaskStepMetrics {
                task_id,
                alpha: self.alphas.log_alpha[task_id].exp(),
                entropy: -lps.iter().sum::<f64>() / lps.len() as f64,
            });
        }
        soft_update(&self.critic, &mut self.critic_target, self.cfg.tau)?;
        self.steps += 1;
        Ok(StepMetrics { step: self.steps, critic_loss: c.loss, actor_loss: act.loss, tasks })
    }
}
