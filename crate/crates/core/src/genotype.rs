//! Binary genotype policies and their conversion into module-weight plans.
//!
//! A genotype addressing `n_m` modules at precision `p_w` is laid out row by
//! row: row `i` (1-based) holds `i` groups of `p_w` bits, one per input
//! `m_0..m_{i-1}` of module `i`. Each group is read MSB-first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, MegaError, Result};

/// Largest supported bits-per-weight. `e^(2^8 - 1)` still fits an `f64`.
pub const MAX_PRECISION: u32 = 8;

/// Offset subtracted from every exponential in [`half_softmax`].
const HALF_SOFTMAX_SHIFT: f64 = 0.99;

/// Number of bits needed to address `n_modules` modules at `precision` bits
/// per weight.
pub fn genotype_length(precision: u32, n_modules: u32) -> Result<usize> {
    if precision == 0 || n_modules == 0 {
        return Err(MegaError::InvalidArgument(format!(
            "precision and module count must be positive (got p_w={precision}, n_m={n_modules})"
        )));
    }
    if precision > MAX_PRECISION {
        return Err(MegaError::InvalidArgument(format!(
            "precision {precision} exceeds the maximum of {MAX_PRECISION}"
        )));
    }
    let (p, n) = (precision as usize, n_modules as usize);
    Ok(p * n * (n + 1) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightNorm {
    #[default]
    HalfSoftmax,
    Softmax,
}

impl std::str::FromStr for WeightNorm {
    type Err = MegaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halfsoftmax" => Ok(Self::HalfSoftmax),
            "softmax" => Ok(Self::Softmax),
            other => Err(MegaError::Parse(format!("unknown weight normalization `{other}`"))),
        }
    }
}

/// A binary sequence encoding the routing weights of one task at one stage,
/// together with its running fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypePolicy {
    bits: Vec<u8>,
    precision: u32,
    stage: u32,
    fitness: Option<f64>,
    eval_count: u32,
    /// Identifier assigned by the owning population; 0 when unassigned.
    #[serde(default)]
    pub id: u64,
}

impl GenotypePolicy {
    /// Builds an unevaluated genotype, checking length and bit values.
    pub fn from_bits(bits: Vec<u8>, precision: u32, stage: u32) -> Result<Self> {
        let expected = genotype_length(precision, stage)?;
        if bits.len() != expected {
            return Err(structural(format!(
                "genotype has {} bits, stage {stage} at precision {precision} needs {expected}",
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(structural(format!("genotype contains non-binary value {b}")));
        }
        Ok(Self { bits, precision, stage, fitness: None, eval_count: 0, id: 0 })
    }

    pub fn random<R: Rng + ?Sized>(precision: u32, stage: u32, rng: &mut R) -> Result<Self> {
        let len = genotype_length(precision, stage)?;
        let bits = (0..len).map(|_| rng.random_range(0..=1u8)).collect();
        Ok(Self { bits, precision, stage, fitness: None, eval_count: 0, id: 0 })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }

    pub fn eval_count(&self) -> u32 {
        self.eval_count
    }

    /// Folds one episode return into the running-mean fitness.
    pub fn record(&mut self, reward: f64) -> Result<()> {
        if !reward.is_finite() {
            return Err(MegaError::InvalidArgument(format!("non-finite episode reward {reward}")));
        }
        self.eval_count += 1;
        self.fitness = Some(match self.fitness {
            None => reward,
            Some(f) => f + (reward - f) / self.eval_count as f64,
        });
        Ok(())
    }

    /// Same bits, fitness history dropped.
    pub fn fresh_copy(&self) -> Self {
        Self { fitness: None, eval_count: 0, id: 0, ..self.clone() }
    }

    /// Overwrites a bit in place. Callers keep values binary.
    pub(crate) fn set_bit(&mut self, pos: usize, value: u8) {
        debug_assert!(value <= 1);
        self.bits[pos] = value;
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    /// `task_id,stage,p_w,bitstring,fitness,eval_count`; fitness is empty when
    /// the genotype has not been evaluated.
    pub fn to_csv_line(&self, task_id: usize) -> String {
        let fitness = self.fitness.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{task_id},{},{},{},{fitness},{}",
            self.stage,
            self.precision,
            self.bitstring(),
            self.eval_count
        )
    }

    pub fn from_csv_line(line: &str) -> Result<(usize, Self)> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(MegaError::Parse(format!("expected 6 fields, got {}: `{line}`", fields.len())));
        }
        let parse_err = |what: &str| MegaError::Parse(format!("bad {what} in `{line}`"));
        let task_id: usize = fields[0].parse().map_err(|_| parse_err("task_id"))?;
        let stage: u32 = fields[1].parse().map_err(|_| parse_err("stage"))?;
        let precision: u32 = fields[2].parse().map_err(|_| parse_err("p_w"))?;
        let bits = fields[3]
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(parse_err("bitstring")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let fitness = if fields[4].is_empty() {
            None
        } else {
            Some(fields[4].parse::<f64>().map_err(|_| parse_err("fitness"))?)
        };
        let eval_count: u32 = fields[5].parse().map_err(|_| parse_err("eval_count"))?;
        if fitness.is_some() != (eval_count > 0) {
            return Err(structural(format!("fitness/eval_count disagree in `{line}`")));
        }
        let mut g = Self::from_bits(bits, precision, stage)?;
        g.fitness = fitness;
        g.eval_count = eval_count;
        Ok((task_id, g))
    }
}

/// Integer codes `d_{i,j}`; row `i - 1` holds the `i` codes feeding module `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedSegments {
    pub rows: Vec<Vec<u32>>,
}

/// Per-module input weights. Row `i - 1` weights `m_0..m_{i-1}` for module `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPlan {
    rows: Vec<Vec<f64>>,
}

impl WeightPlan {
    /// Validates the lower-triangular shape, non-negativity and unit row sums.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(structural(format!("plan row {} has {} entries", i + 1, row.len())));
            }
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(structural(format!("plan row {} has a negative or non-finite weight", i + 1)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(structural(format!("plan row {} sums to {sum}", i + 1)));
            }
        }
        Ok(Self { rows })
    }

    /// Builds a plan without the row-sum check. Used by test harnesses that
    /// need arbitrary routing (e.g. all-zero rows).
    pub fn unchecked(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    /// Every module reads only from the module directly before it.
    pub fn chain(depth: usize) -> Self {
        let rows = (1..=depth)
            .map(|i| {
                let mut row = vec![0.0; i];
                row[i - 1] = 1.0;
                row
            })
            .collect();
        Self { rows }
    }

    /// An empty plan: the head reads the embedding directly.
    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }
}

pub fn decode_segments(g: &GenotypePolicy) -> Result<DecodedSegments> {
    let p = g.precision as usize;
    let expected = genotype_length(g.precision, g.stage)?;
    if g.bits.len() != expected {
        return Err(structural(format!("genotype length {} != {expected}", g.bits.len())));
    }
    let mut groups = g.bits.chunks_exact(p).map(|group| {
        group.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b))
    });
    let rows = (1..=g.stage as usize)
        .map(|i| groups.by_ref().take(i).collect())
        .collect();
    Ok(DecodedSegments { rows })
}

/// Inverse of [`decode_segments`]: writes each code back as MSB-first bits.
pub fn encode_segments(segments: &DecodedSegments, precision: u32) -> Result<GenotypePolicy> {
    let stage = segments.rows.len() as u32;
    let max = (1u32 << precision) - 1;
    let mut bits = Vec::with_capacity(genotype_length(precision, stage)?);
    for (i, row) in segments.rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(structural(format!("segment row {} has {} entries", i + 1, row.len())));
        }
        for &d in row {
            if d > max {
                return Err(structural(format!("code {d} exceeds {max}")));
            }
            bits.extend((0..precision).rev().map(|shift| ((d >> shift) & 1) as u8));
        }
    }
    GenotypePolicy::from_bits(bits, precision, stage)
}

fn check_codes(d: &[u32]) -> Result<()> {
    if d.is_empty() {
        return Err(structural("cannot normalize an empty code vector"));
    }
    let limit = (1u32 << MAX_PRECISION) - 1;
    if let Some(bad) = d.iter().find(|&&x| x > limit) {
        return Err(MegaError::InvalidArgument(format!("code {bad} exceeds {limit}")));
    }
    Ok(())
}

/// `(e^d_j - 0.99) / (sum_n e^d_n - 0.99 * len)`. A zero code maps to a weight
/// of `0.01 / denominator`, which lets a genotype nearly switch an input off.
pub fn half_softmax(d: &[u32]) -> Result<Vec<f64>> {
    check_codes(d)?;
    let shifted: Vec<f64> = d.iter().map(|&x| (x as f64).exp() - HALF_SOFTMAX_SHIFT).collect();
    let denom: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|s| s / denom).collect())
}

pub fn softmax(d: &[u32]) -> Result<Vec<f64>> {
    check_codes(d)?;
    let max = *d.iter().max().expect("non-empty") as f64;
    let exps: Vec<f64> = d.iter().map(|&x| (x as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Closed-form range of a single softmax weight over `inputs` codes of
/// `precision` bits: `[1/(1+(i-1)e^M), e^M/(e^M+i-1)]` with `M = 2^p - 1`.
pub fn softmax_weight_bounds(inputs: usize, precision: u32) -> (f64, f64) {
    let top = ((1u32 << precision) - 1) as f64;
    let e = top.exp();
    let others = (inputs - 1) as f64;
    (1.0 / (1.0 + others * e), e / (e + others))
}

pub fn normalize(d: &[u32], mode: WeightNorm) -> Result<Vec<f64>> {
    match mode {
        WeightNorm::HalfSoftmax => half_softmax(d),
        WeightNorm::Softmax => softmax(d),
    }
}

pub fn decode_to_weights(g: &GenotypePolicy, mode: WeightNorm) -> Result<WeightPlan> {
    let segments = decode_segments(g)?;
    let rows = segments
        .rows
        .iter()
        .map(|row| normalize(row, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightPlan { rows })
}
