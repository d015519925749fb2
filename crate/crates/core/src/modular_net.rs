//! Growable module-level actor network.
//!
//! `m_0 = embed(s)`, `m_i = M_i(sum_{j<i} w_{i,j} m_j)`, and the policy head
//! reads the last addressed module. Routing weights come from a
//! [`WeightPlan`] and are constants as far as gradients are concerned.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::genotype::WeightPlan;
use crate::nn::{Activation, Dense, Parameterized};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Hidden width of the two-layer embedding.
    pub embed_hidden: usize,
    /// Shared input/output width of every module.
    pub module_dim: usize,
    /// Hidden width inside a module.
    pub module_hidden: usize,
    pub activation: Activation,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl NetDims {
    /// Small defaults suited to CPU training on the toy suite.
    pub fn desk(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            embed_hidden: 32,
            module_dim: 32,
            module_hidden: 16,
            activation: Activation::Relu,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }

    /// Full-size widths (400 / 400 / 128).
    pub fn full(obs_dim: usize, action_dim: usize) -> Self {
        Self { embed_hidden: 400, module_dim: 400, module_hidden: 128, ..Self::desk(obs_dim, action_dim) }
    }
}

/// One module: `D -> h_m -> D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl ModuleMlp {
    fn init<R: Rng + ?Sized>(dims: &NetDims, rng: &mut R) -> Self {
        Self {
            hidden: Dense::init(dims.module_dim, dims.module_hidden, rng),
            out: Dense::init(dims.module_hidden, dims.module_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularActorNet {
    dims: NetDims,
    pub embed: [Dense; 2],
    pub modules: Vec<ModuleMlp>,
    pub head: Dense,
}

/// Gradients laid out exactly like [`ModularActorNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub embed: [Dense; 2],
    pub modules: Vec<ModuleMlp>,
    pub head: Dense,
}

/// Cached activations of a batched forward pass, enough to run
/// [`ModularActorNet::backward`] without recomputation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub embed_hidden: Array2<f64>,
    /// `m_0..m_K`, post-activation.
    pub outputs: Vec<Array2<f64>>,
    /// Weighted-sum inputs of modules `1..=K`.
    pub module_inputs: Vec<Array2<f64>>,
    /// Hidden activations of modules `1..=K`.
    pub module_hidden: Vec<Array2<f64>>,
    pub plan: WeightPlan,
    pub mean: Array2<f64>,
    /// Clamped log standard deviation.
    pub log_std: Array2<f64>,
    /// Unclamped head output for the log-std half.
    pub raw_log_std: Array2<f64>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.plan.depth()
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

impl ModularActorNet {
    pub fn new<R: Rng + ?Sized>(dims: NetDims, n_modules: usize, rng: &mut R) -> Self {
        let embed = [
            Dense::init(dims.obs_dim, dims.embed_hidden, rng),
            Dense::init(dims.embed_hidden, dims.module_dim, rng),
        ];
        let head = Dense::init(dims.module_dim, 2 * dims.action_dim, rng);
        let mut net = Self { dims, embed, modules: Vec::new(), head };
        for _ in 0..n_modules {
            net.add_module(rng);
        }
        net
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    /// Appends one freshly initialized module. Existing parameters are untouched.
    pub fn add_module<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let module = ModuleMlp::init(&self.dims, rng);
        self.modules.push(module);
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            embed: [self.embed[0].zeros_like(), self.embed[1].zeros_like()],
            modules: self.modules.iter().map(ModuleMlp::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Single-state forward pass.
    pub fn forward(&self, state: &[f64], plan: &WeightPlan) -> Result<(Vec<f64>, Vec<f64>, ForwardTrace)> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| structural(e.to_string()))?;
        let trace = self.forward_batch(x, plan)?;
        let mean = trace.mean.row(0).to_vec();
        let log_std = trace.log_std.row(0).to_vec();
        Ok((mean, log_std, trace))
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>, plan: &WeightPlan) -> Result<ForwardTrace> {
        let act = self.dims.activation;
        if x.ncols() != self.dims.obs_dim {
            return Err(structural(format!(
                "state has {} features, embedding expects {}",
                x.ncols(),
                self.dims.obs_dim
            )));
        }
        if plan.depth() > self.modules.len() {
            return Err(structural(format!(
                "plan addresses {} modules but the network has {}",
                plan.depth(),
                self.modules.len()
            )));
        }
        let mut embed_hidden = self.embed[0].forward(x);
        act.apply(&mut embed_hidden);
        let mut m0 = self.embed[1].forward(embed_hidden.view());
        act.apply(&mut m0);

        let depth = plan.depth();
        let mut outputs = Vec::with_capacity(depth + 1);
        let mut module_inputs = Vec::with_capacity(depth);
        let mut module_hidden = Vec::with_capacity(depth);
        outputs.push(m0);
        for (row, module) in plan.rows().iter().zip(&self.modules) {
            if row.len() != outputs.len() {
                return Err(structural("plan row length does not match its depth"));
            }
            let mut input = Array2::zeros(outputs[0].raw_dim());
            for (w, m) in row.iter().zip(&outputs) {
                input.scaled_add(*w, m);
            }
            let mut h = module.hidden.forward(input.view());
            act.apply(&mut h);
            let mut out = module.out.forward(h.view());
            act.apply(&mut out);
            module_inputs.push(input);
            module_hidden.push(h);
            outputs.push(out);
        }

        let head_out = self.head.forward(outputs[depth].view());
        let a = self.dims.action_dim;
        let mean = head_out.slice(ndarray::s![.., ..a]).to_owned();
        let raw_log_std = head_out.slice(ndarray::s![.., a..]).to_owned();
        let (lo, hi) = (self.dims.log_std_min, self.dims.log_std_max);
        let log_std = raw_log_std.mapv(|v| v.clamp(lo, hi));
        Ok(ForwardTrace {
            input: x.to_owned(),
            embed_hidden,
            outputs,
            module_inputs,
            module_hidden,
            plan: plan.clone(),
            mean,
            log_std,
            raw_log_std,
        })
    }

    /// Gradient of `sum(head_output * grad_head_out)` with respect to every
    /// parameter. `grad_head_out` is `(batch, 2 * action_dim)`, laid out as
    /// `[d mean | d log_std]`; clamped log-std entries pass no gradient.
    pub fn backward(&self, trace: &ForwardTrace, grad_head_out: &Array2<f64>) -> Result<ParamGrads> {
        let mut grads = self.zero_grads();
        self.backward_into(trace, grad_head_out, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_head_out: &Array2<f64>,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        let act = self.dims.activation;
        let a = self.dims.action_dim;
        let depth = trace.depth();
        if grad_head_out.dim() != (trace.batch_size(), 2 * a) {
            return Err(structural(format!(
                "head gradient has shape {:?}, expected ({}, {})",
                grad_head_out.dim(),
                trace.batch_size(),
                2 * a
            )));
        }
        if depth > self.modules.len() || grads.modules.len() < depth || trace.outputs.len() != depth + 1 {
            return Err(structural("trace does not belong to this network"));
        }

        let (lo, hi) = (self.dims.log_std_min, self.dims.log_std_max);
        let mut d_head = grad_head_out.clone();
        ndarray::Zip::from(d_head.slice_mut(ndarray::s![.., a..]))
            .and(&trace.raw_log_std)
            .for_each(|g, &raw| {
                if raw < lo || raw > hi {
                    *g = 0.0;
                }
            });

        let mut d_outputs: Vec<Array2<f64>> =
            (0..=depth).map(|_| Array2::zeros(trace.outputs[0].raw_dim())).collect();
        d_outputs[depth] = self.head.backward(trace.outputs[depth].view(), &d_head, &mut grads.head);

        for i in (1..=depth).rev() {
            let module = &self.modules[i - 1];
            let g = &mut grads.modules[i - 1];
            let mut d_out = std::mem::take(&mut d_outputs[i]);
            act.backprop(&trace.outputs[i], &mut d_out);
            let mut d_h = module.out.backward(trace.module_hidden[i - 1].view(), &d_out, &mut g.out);
            act.backprop(&trace.module_hidden[i - 1], &mut d_h);
            let d_in = module.hidden.backward(trace.module_inputs[i - 1].view(), &d_h, &mut g.hidden);
            for (j, &w) in trace.plan.rows()[i - 1].iter().enumerate() {
                if w != 0.0 {
                    d_outputs[j].scaled_add(w, &d_in);
                }
            }
        }

        let mut d_m0 = std::mem::take(&mut d_outputs[0]);
        act.backprop(&trace.outputs[0], &mut d_m0);
        let mut d_eh = self.embed[1].backward(trace.embed_hidden.view(), &d_m0, &mut grads.embed[1]);
        act.backprop(&trace.embed_hidden, &mut d_eh);
        let [e0, _] = &mut grads.embed;
        self.embed[0].backward(trace.input.view(), &d_eh, e0);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &NetCheckpoint { version: CHECKPOINT_VERSION, net: self.clone() })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: NetCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(structural(format!("unsupported network checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt.net)
    }
}

#[derive(Serialize, Deserialize)]
struct NetCheckpoint {
    version: u32,
    net: ModularActorNet,
}

impl Parameterized for ModularActorNet {
    fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.embed.iter().collect();
        out.push(&self.head);
        for m in &self.modules {
            out.push(&m.hidden);
            out.push(&m.out);
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.embed.iter_mut().collect();
        out.push(&mut self.head);
        for m in &mut self.modules {
            out.push(&mut m.hidden);
            out.push(&mut m.out);
        }
        out
    }
}

impl Parameterized for ParamGrads {
    fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.embed.iter().collect();
        out.push(&self.head);
        for m in &self.modules {
            out.push(&m.hidden);
            out.push(&m.out);
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.embed.iter_mut().collect();
        out.push(&mut self.head);
        for m in &mut self.modules {
            out.push(&mut m.hidden);
            out.push(&mut m.out);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tanh-squashed Gaussian policy

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of `tanh(mean + std * noise)`, including the change of
/// variables.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], noise: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(noise)
        .map(|((&mu, &ls), &xi)| {
            let u = mu + ls.exp() * xi;
            -0.5 * xi * xi - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u)
        })
        .sum()
}

/// Draws `tanh(mean + std * xi)` with `xi ~ N(0, I)` and returns it with its
/// log-probability.
pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let noise: Vec<f64> = mean.iter().map(|_| rng.sample(StandardNormal)).collect();
    let action = mean
        .iter()
        .zip(log_std)
        .zip(&noise)
        .map(|((&mu, &ls), &xi)| (mu + ls.exp() * xi).tanh())
        .collect();
    (action, squashed_log_prob(mean, log_std, &noise))
}

/// Batched reparameterized sample used by the losses.
#[derive(Debug, Clone)]
pub struct SquashedBatch {
    pub noise: Array2<f64>,
    pub pre_tanh: Array2<f64>,
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
}

impl SquashedBatch {
    pub fn new(mean: &Array2<f64>, log_std: &Array2<f64>, noise: Array2<f64>) -> Self {
        let pre_tanh = mean + &(log_std.mapv(f64::exp) * &noise);
        let action = pre_tanh.mapv(f64::tanh);
        let log_prob = Array1::from_iter((0..mean.nrows()).map(|r| {
            squashed_log_prob(&mean.row(r).to_vec(), &log_std.row(r).to_vec(), &noise.row(r).to_vec())
        }));
        Self { noise, pre_tanh, action, log_prob }
    }

    pub fn sample<R: Rng + ?Sized>(mean: &Array2<f64>, log_std: &Array2<f64>, rng: &mut R) -> Self {
        let noise = Array2::from_shape_simple_fn(mean.raw_dim(), || rng.sample(StandardNormal));
        Self::new(mean, log_std, noise)
    }

    /// Chain rule from `(dL/d action, dL/d log_prob)` per row to the head
    /// output `[d mean | d log_std]`, holding the noise fixed.
    pub fn head_grad(&self, log_std: &Array2<f64>, d_action: &Array2<f64>, d_log_prob: &Array1<f64>) -> Array2<f64> {
        let (b, a) = self.action.dim();
        let mut out = Array2::zeros((b, 2 * a));
        for r in 0..b {
            let dlp = d_log_prob[r];
            for k in 0..a {
                let t = self.action[[r, k]];
                let std = log_std[[r, k]].exp();
                let xi = self.noise[[r, k]];
                // d log_prob / d u = 2 tanh(u); d action / d u = 1 - tanh^2
                let d_u = d_action[[r, k]] * (1.0 - t * t) + dlp * 2.0 * t;
                out[[r, k]] = d_u;
                out[[r, a + k]] = d_u * std * xi - dlp;
            }
        }
        out
    }
}
