//! Analytic latency / storage / operation model of table kernels and whole
//! tabularized models, and the latency-major greedy configurator.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::model::ModelConfig;
use crate::pq::ceil_log2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Linear,
    Attention,
}

/// Prototypes `K` and subspaces `C` of one layer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub k: usize,
    pub c: usize,
}

impl KernelConfig {
    pub const fn new(k: usize, c: usize) -> Self {
        KernelConfig { k, c }
    }
}

/// Per-layer-class table settings and the entry bit width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableConfig {
    pub input: KernelConfig,
    pub attention: KernelConfig,
    pub ffn: KernelConfig,
    pub output: KernelConfig,
    pub entry_bits: u32,
}

impl TableConfig {
    pub fn uniform(k: usize, c: usize) -> Self {
        let kc = KernelConfig::new(k, c);
        TableConfig {
            input: kc,
            attention: kc,
            ffn: kc,
            output: kc,
            entry_bits: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kc in [self.input, self.attention, self.ffn, self.output] {
            check_kc(kc.k as u64, kc.c as u64)?;
        }
        if self.entry_bits != 16 && self.entry_bits != 32 {
            return Err(Error::config(format!(
                "entry bits must be 16 or 32, got {}",
                self.entry_bits
            )));
        }
        Ok(())
    }
}

fn check_kc(k: u64, c: u64) -> Result<()> {
    if k < 2 || !k.is_power_of_two() {
        return Err(Error::config(format!("K must be a power of two >= 2, got {k}")));
    }
    if c == 0 {
        return Err(Error::config("C must be >= 1"));
    }
    Ok(())
}

fn log2k(k: u64) -> u64 {
    u64::from(k.trailing_zeros())
}

fn log2c(c: u64) -> u64 {
    u64::from(ceil_log2(c as usize))
}

/// `log K + log C + 1` for linear kernels, twice that for attention.
pub fn kernel_latency(kind: KernelKind, k: u64, c: u64) -> Result<u64> {
    check_kc(k, c)?;
    let base = log2k(k) + log2c(c) + 1;
    Ok(match kind {
        KernelKind::Linear => base,
        KernelKind::Attention => 2 * base,
    })
}

/// Storage in bits. For linear kernels `d_dim` is the output width `D_O`,
/// for attention the key width `D_k`.
pub fn kernel_storage(kind: KernelKind, t: u64, d_dim: u64, k: u64, c: u64, bits: u64) -> Result<u64> {
    check_kc(k, c)?;
    Ok(match kind {
        KernelKind::Linear => t * c * log2k(k) + d_dim * k * c * bits,
        KernelKind::Attention => (3 * t + d_dim) * c * log2k(k) + 2 * k * k * c * bits,
    })
}

/// Arithmetic operations (encoding plus aggregation).
pub fn kernel_ops(kind: KernelKind, t: u64, d_dim: u64, k: u64, c: u64) -> Result<u64> {
    check_kc(k, c)?;
    Ok(match kind {
        KernelKind::Linear => t * c * log2k(k) + t * d_dim * log2c(c),
        KernelKind::Attention => (3 * t + d_dim) * c * log2k(k) + (t * t + d_dim * d_dim) * log2c(c),
    })
}

/// Norm and sigmoid costs, which the kernel formulas do not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConstants {
    /// `L_ln = ceil(log2 D) + norm_latency_offset`.
    pub norm_latency_offset: u64,
    /// `L_sigma`.
    pub sigmoid_latency: u64,
    /// `S_ln = norm_storage_factor * D * d` bits.
    pub norm_storage_factor: u64,
    /// `S_sigma = sigmoid_entries * d` bits.
    pub sigmoid_entries: u64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants {
            norm_latency_offset: 3,
            sigmoid_latency: 1,
            norm_storage_factor: 2,
            sigmoid_entries: 4096,
        }
    }
}

impl CostConstants {
    pub fn norm_latency(&self, dim: usize) -> u64 {
        u64::from(ceil_log2(dim)) + self.norm_latency_offset
    }

    pub fn norm_storage(&self, dim: usize, bits: u32) -> u64 {
        self.norm_storage_factor * dim as u64 * u64::from(bits)
    }

    pub fn sigmoid_storage(&self, bits: u32) -> u64 {
        self.sigmoid_entries * u64::from(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub latency: u64,
    pub storage_bits: u64,
    pub ops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.latency += o.latency;
        self.storage_bits += o.storage_bits;
        self.ops += o.ops;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub latency_cycles: u64,
    pub storage_bits: u64,
    pub arith_ops: u64,
    /// Named components in model order; their sum is the total.
    pub breakdown: Vec<(String, Cost)>,
}

pub fn bits_to_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

impl ComplexityReport {
    pub fn storage_bytes(&self) -> u64 {
        bits_to_bytes(self.storage_bits)
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "latency_cycles={}", self.latency_cycles);
        let _ = writeln!(s, "storage_bits={}", self.storage_bits);
        let _ = writeln!(s, "storage_bytes={}", self.storage_bytes());
        let _ = writeln!(s, "arith_ops={}", self.arith_ops);
        for (name, c) in &self.breakdown {
            let _ = writeln!(s, "{name}.latency_cycles={}", c.latency);
            let _ = writeln!(s, "{name}.storage_bits={}", c.storage_bits);
            let _ = writeln!(s, "{name}.arith_ops={}", c.ops);
        }
        s
    }

    /// CSV with columns `component,latency_cycles,storage_bits,arith_ops`,
    /// ending with a `total` row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("component,latency_cycles,storage_bits,arith_ops\n");
        for (name, c) in &self.breakdown {
            let _ = writeln!(s, "{name},{},{},{}", c.latency, c.storage_bits, c.ops);
        }
        let _ = writeln!(
            s,
            "total,{},{},{}",
            self.latency_cycles, self.storage_bits, self.arith_ops
        );
        s
    }
}

fn linear_cost(t: usize, d_out: usize, kc: KernelConfig, bits: u32) -> Result<Cost> {
    let (k, c) = (kc.k as u64, kc.c as u64);
    Ok(Cost {
        latency: kernel_latency(KernelKind::Linear, k, c)?,
        storage_bits: kernel_storage(KernelKind::Linear, t as u64, d_out as u64, k, c, u64::from(bits))?,
        ops: kernel_ops(KernelKind::Linear, t as u64, d_out as u64, k, c)?,
    })
}

fn attention_cost(t: usize, d_k: usize, kc: KernelConfig, bits: u32) -> Result<Cost> {
    let (k, c) = (kc.k as u64, kc.c as u64);
    Ok(Cost {
        latency: kernel_latency(KernelKind::Attention, k, c)?,
        storage_bits: kernel_storage(KernelKind::Attention, t as u64, d_k as u64, k, c, u64::from(bits))?,
        ops: kernel_ops(KernelKind::Attention, t as u64, d_k as u64, k, c)?,
    })
}

/// Whole-model cost. The input linear's storage is charged twice; each
/// encoder layer charges three norms' storage and two norms' latency;
/// the QKV linear is charged at width `3 H D`.
pub fn model_complexity(mc: &ModelConfig, tc: &TableConfig, consts: &CostConstants) -> Result<ComplexityReport> {
    mc.validate()?;
    tc.validate()?;
    let d = tc.entry_bits;
    let (t_i, t_t, dim) = (mc.seq_len, mc.patches, mc.dim);
    let norm = Cost {
        latency: consts.norm_latency(dim),
        storage_bits: consts.norm_storage(dim, d),
        ops: 0,
    };
    let mut breakdown = Vec::new();

    let mut input = linear_cost(t_i, dim, tc.input, d)?;
    input.storage_bits *= 2;
    breakdown.push(("input_linear".to_string(), input));

    for i in 0..mc.layers {
        let mut msa = Cost::default();
        msa += norm;
        msa += norm;
        let mut qkv = linear_cost(t_t, 3 * mc.heads * dim, tc.attention, d)?;
        let proj = linear_cost(t_t, dim, tc.attention, d)?;
        msa += attention_cost(t_t, dim, tc.attention, d)?;
        qkv.latency += proj.latency;
        msa += qkv;
        msa.storage_bits += proj.storage_bits;
        msa.ops += proj.ops;
        breakdown.push((format!("encoder{i}.msa"), msa));

        let mut ffn = Cost {
            latency: 0,
            storage_bits: norm.storage_bits,
            ops: 0,
        };
        ffn += linear_cost(t_t, mc.ffn_dim, tc.ffn, d)?;
        ffn += linear_cost(t_t, dim, tc.ffn, d)?;
        breakdown.push((format!("encoder{i}.ffn"), ffn));
    }

    let mut out = norm;
    out += linear_cost(t_t, mc.outputs, tc.output, d)?;
    out.latency += consts.sigmoid_latency;
    out.storage_bits += consts.sigmoid_storage(d);
    breakdown.push(("output".to_string(), out));

    let mut total = Cost::default();
    for (_, c) in &breakdown {
        total += *c;
    }
    Ok(ComplexityReport {
        latency_cycles: total.latency,
        storage_bits: total.storage_bits,
        arith_ops: total.ops,
        breakdown,
    })
}

/// Chooses the norm latency offset so `mc`/`tc` costs `target` cycles.
/// Fails if no non-negative integer offset hits the target exactly.
pub fn calibrate(mc: &ModelConfig, tc: &TableConfig, target: u64, base: CostConstants) -> Result<CostConstants> {
    let zero = CostConstants {
        norm_latency_offset: 0,
        ..base
    };
    let without = model_complexity(mc, tc, &zero)?.latency_cycles;
    let norms = 2 * mc.layers as u64 + 1;
    if target < without || (target - without) % norms != 0 {
        return Err(Error::config(format!(
            "latency {target} unreachable: {without} cycles before offset, {norms} norms"
        )));
    }
    Ok(CostConstants {
        norm_latency_offset: (target - without) / norms,
        ..base
    })
}

/// Multiply plus add count of the dense forward pass (2 per MAC).
pub fn nn_op_count(mc: &ModelConfig) -> u64 {
    let t = mc.patches as u64;
    let d = mc.dim as u64;
    let dh = mc.head_dim() as u64;
    let h = mc.heads as u64;
    let mut ops = linear_op_count(t, mc.patch_dim() as u64, d);
    for _ in 0..mc.layers {
        ops += linear_op_count(t, d, 3 * d);
        // scores and weighted values, per head
        ops += 2 * h * 2 * t * t * dh;
        ops += linear_op_count(t, d, d);
        ops += linear_op_count(t, d, mc.ffn_dim as u64);
        ops += linear_op_count(t, mc.ffn_dim as u64, d);
    }
    ops + linear_op_count(1, t * d, mc.outputs as u64)
}

pub fn linear_op_count(t: u64, inp: u64, outp: u64) -> u64 {
    2 * t * inp * outp
}

/// Latency budget `tau` (cycles) and storage budget `s` (bytes); both are
/// strict upper bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignConstraints {
    pub latency: f64,
    pub storage_bytes: f64,
}

impl DesignConstraints {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency > 0.0 && self.storage_bytes > 0.0) {
            return Err(Error::config("constraints must be positive"));
        }
        Ok(())
    }
}

/// One row of the configuration dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub model: ModelConfig,
    pub table: TableConfig,
    pub report: ComplexityReport,
}

impl Candidate {
    pub fn latency(&self) -> u64 {
        self.report.latency_cycles
    }
    pub fn storage_bytes(&self) -> u64 {
        self.report.storage_bytes()
    }
}

/// Every model paired with every uniform `(K, C)`, models outermost.
pub fn build_dictionary(
    models: &[ModelConfig],
    kcs: &[KernelConfig],
    entry_bits: u32,
    consts: &CostConstants,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::with_capacity(models.len() * kcs.len());
    for m in models {
        for kc in kcs {
            let table = TableConfig {
                entry_bits,
                ..TableConfig::uniform(kc.k, kc.c)
            };
            let report = model_complexity(m, &table, consts)?;
            out.push(Candidate {
                model: *m,
                table,
                report,
            });
        }
    }
    Ok(out)
}

/// Latency-major greedy over `(latency, storage_bytes)` pairs: the highest
/// latency level below `tau` that has any entry with storage below `s`,
/// then the largest such storage (first on ties). Returns the index.
pub fn select_latency_major(costs: &[(u64, u64)], cons: &DesignConstraints) -> Result<usize> {
    cons.validate()?;
    if costs.is_empty() {
        return Err(Error::config("empty candidate list"));
    }
    let mut levels: Vec<u64> = costs
        .iter()
        .map(|c| c.0)
        .filter(|&l| (l as f64) < cons.latency)
        .collect();
    if levels.is_empty() {
        let min = costs.iter().map(|c| c.0).min().unwrap_or(0);
        return Err(Error::Infeasible(format!(
            "latency: no candidate below {} cycles (fastest is {min})",
            cons.latency
        )));
    }
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.dedup();
    for level in levels {
        let mut best: Option<usize> = None;
        for (i, &(l, s)) in costs.iter().enumerate() {
            if l == level && (s as f64) < cons.storage_bytes && best.map_or(true, |b| s > costs[b].1) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            return Ok(b);
        }
    }
    let min = costs
        .iter()
        .filter(|c| (c.0 as f64) < cons.latency)
        .map(|c| c.1)
        .min()
        .unwrap_or(0);
    Err(Error::Infeasible(format!(
        "storage: no latency-feasible candidate below {} bytes (smallest is {min})",
        cons.storage_bytes
    )))
}

/// Builds the dictionary and applies [`select_latency_major`].
pub fn configure(
    cons: &DesignConstraints,
    models: &[ModelConfig],
    kcs: &[KernelConfig],
    entry_bits: u32,
    consts: &CostConstants,
) -> Result<Candidate> {
    if models.is_empty() || kcs.is_empty() {
        return Err(Error::config("configure needs at least one model and one (K, C)"));
    }
    let dict = build_dictionary(models, kcs, entry_bits, consts)?;
    let costs: Vec<(u64, u64)> = dict.iter().map(|c| (c.latency(), c.storage_bytes())).collect();
    let i = select_latency_major(&costs, cons)?;
    Ok(dict.into_iter().nth(i).expect("index from selection"))
}
