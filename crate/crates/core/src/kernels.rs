//! Table kernels: linear layers with a folded bias column, attention with
//! double quantization, and a sigmoid lookup table.

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::ops::{sigmoid, softmax_in_place};
use crate::pq::{aggregate, build_table, learn_prototypes, Codebook, PQTable};
use crate::tensor::Tensor;

/// Data-path operation tally of a table query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub lookups: u64,
    pub additions: u64,
    /// Multiplies spent in nearest-prototype search.
    pub encode_ops: u64,
    /// Multiplies against layer weights; zero for every table path.
    pub weight_multiplies: u64,
    /// Arithmetic of LayerNorm passthrough stages.
    pub norm_ops: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.lookups += o.lookups;
        self.additions += o.additions;
        self.encode_ops += o.encode_ops;
        self.weight_multiplies += o.weight_multiplies;
        self.norm_ops += o.norm_ops;
    }
}

fn stack_rows(parts: &[Tensor], width: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != 2 || p.cols() != width {
            return Err(Error::shape(format!(
                "training block {:?}, expected width {width}",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(data.len() / width.max(1), width, data)
}

/// Linear layer as a `D_O x K x (C+1)` table; column `C` holds the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTable {
    pub codebook: Codebook,
    pub table: PQTable,
}

impl LinearTable {
    /// Builds the table for `W` (`D_O x D_I`) and `b` over a fixed codebook.
    pub fn from_codebook(codebook: Codebook, w: &Tensor, b: &Tensor) -> Result<Self> {
        let plain = build_table(&codebook, w)?;
        if b.len() != plain.outputs {
            return Err(Error::shape(format!(
                "bias of {} for {} outputs",
                b.len(),
                plain.outputs
            )));
        }
        let (k, c) = (plain.k, plain.subspaces);
        let mut entries = Vec::with_capacity(plain.outputs * k * (c + 1));
        for o in 0..plain.outputs {
            for kk in 0..k {
                let base = (o * k + kk) * c;
                entries.extend_from_slice(&plain.entries[base..base + c]);
                entries.push(b.data()[o]);
            }
        }
        Ok(LinearTable {
            codebook,
            table: PQTable {
                outputs: plain.outputs,
                k,
                subspaces: c + 1,
                entries,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.table.outputs
    }

    pub fn bias(&self, o: usize) -> f64 {
        self.table.entry(o, 0, self.table.subspaces - 1)
    }

    /// Table entry count, bias column included.
    pub fn entry_count(&self) -> usize {
        self.table.entries.len()
    }

    fn write(&self, w: &mut Writer) -> Result<()> {
        w.magic(b"LINT");
        self.codebook.write(w)?;
        self.table.write(w)
    }

    fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(b"LINT")?;
        let codebook = Codebook::read(r)?;
        let table = PQTable::read(r)?;
        if table.k != codebook.k || table.subspaces != codebook.subspaces + 1 {
            return Err(Error::Format("linear table does not match its codebook".into()));
        }
        Ok(LinearTable { codebook, table })
    }
}

/// Learns a codebook over the rows of `inputs` (each `T x D_I`) and
/// tabularizes `W x + b`.
pub fn tabularize_linear(
    w: &Tensor,
    b: &Tensor,
    inputs: &[Tensor],
    k: usize,
    c: usize,
    seed: u64,
) -> Result<LinearTable> {
    if w.shape().len() != 2 {
        return Err(Error::shape("weight must be a matrix"));
    }
    let d_in = w.cols();
    if c == 0 || d_in % c != 0 {
        return Err(Error::config(format!(
            "input dimension {d_in} is not divisible by C={c}"
        )));
    }
    let rows = stack_rows(inputs, d_in)?;
    let cb = learn_prototypes(&rows, k, c, seed)?;
    LinearTable::from_codebook(cb, w, b)
}

/// Table evaluation of `x` (`T x D_I`), one row at a time.
pub fn query_linear(x: &Tensor, lt: &LinearTable) -> Result<Tensor> {
    query_linear_counted(x, lt, &mut OpCounts::default())
}

pub fn query_linear_counted(x: &Tensor, lt: &LinearTable, ops: &mut OpCounts) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != lt.input_dim() {
        return Err(Error::shape(format!(
            "linear table input {:?}, expected width {}",
            x.shape(),
            lt.input_dim()
        )));
    }
    let outp = lt.output_dim();
    let mut out = Vec::with_capacity(x.rows() * outp);
    let mut idx = Vec::with_capacity(lt.table.subspaces);
    for r in 0..x.rows() {
        idx.clear();
        idx.extend(lt.codebook.encode(x.row(r))?);
        idx.push(0);
        ops.encode_ops += lt.codebook.encode_cost();
        for o in 0..outp {
            out.push(aggregate(&idx, &lt.table, o));
        }
        let c = lt.table.subspaces as u64;
        ops.lookups += outp as u64 * c;
        ops.additions += outp as u64 * (c - 1);
    }
    Tensor::matrix(x.rows(), outp, out)
}

/// Activation applied to the scaled `QK^T` prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Softmax,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Activation::Softmax),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::config(format!("unknown activation {s:?} (softmax|sigmoid)"))),
        }
    }
}

/// Tables for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTables {
    pub q_codebook: Codebook,
    pub k_codebook: Codebook,
    /// Entry `(i, j, c)` is `dot(P_Q[c][i], P_K[c][j])`; stored as a
    /// `K x K x C_k` [`PQTable`] with `outputs = K`.
    pub qk_table: PQTable,
    /// Codebook over rows of `QK^T` (length `T`, `C_t` subspaces).
    pub qkt_codebook: Codebook,
    /// Codebook over columns of `V` (length `T`, `C_t` subspaces).
    pub v_codebook: Codebook,
    /// Entry `(i, j, c)` is `dot(act(P_S[i] / sqrt(D_k))[c], P_V[c][j])`.
    pub qkv_table: PQTable,
    pub activation: Activation,
}

fn pairwise_table(a: &Codebook, b: &Codebook, rows: impl Fn(usize, usize) -> Vec<f64>) -> PQTable {
    let (k, c) = (a.k, a.subspaces);
    let mut entries = Vec::with_capacity(k * b.k * c);
    for i in 0..k {
        let left: Vec<Vec<f64>> = (0..c).map(|cc| rows(cc, i)).collect();
        for j in 0..b.k {
            for (cc, l) in left.iter().enumerate() {
                entries.push(crate::tensor::dot(l, b.prototype(cc, j)));
            }
        }
    }
    PQTable {
        outputs: k,
        k: b.k,
        subspaces: c,
        entries,
    }
}

impl AttentionTables {
    pub fn head_dim(&self) -> usize {
        self.q_codebook.dim()
    }

    pub fn seq_len(&self) -> usize {
        self.v_codebook.dim()
    }

    /// `K^2 C_k + K^2 C_t`.
    pub fn entry_count(&self) -> usize {
        self.qk_table.entries.len() + self.qkv_table.entries.len()
    }

    /// Activated, scaled `QK^T` prototype `i`: slices concatenated across
    /// subspaces, activated as one row, then returned whole.
    pub fn activated_prototype(&self, i: usize) -> Vec<f64> {
        activated_row(&self.qkt_codebook, i, self.head_dim(), self.activation)
    }

    /// Approximate `QK^T` (unscaled) via the QK table.
    fn approx_scores(&self, q: &Tensor, k: &Tensor, ops: &mut OpCounts) -> Result<Vec<f64>> {
        let t = q.rows();
        let enc = |cb: &Codebook, x: &Tensor, ops: &mut OpCounts| -> Result<Vec<Vec<usize>>> {
            (0..x.rows())
                .map(|r| {
                    ops.encode_ops += cb.encode_cost();
                    cb.encode(x.row(r))
                })
                .collect()
        };
        let iq = enc(&self.q_codebook, q, ops)?;
        let ik = enc(&self.k_codebook, k, ops)?;
        let (kk, c) = (self.qk_table.k, self.qk_table.subspaces);
        let mut s = vec![0.0; t * k.rows()];
        for (a, qi) in iq.iter().enumerate() {
            for (b, kj) in ik.iter().enumerate() {
                let mut acc = 0.0;
                for cc in 0..c {
                    acc += self.qk_table.entries[(qi[cc] * kk + kj[cc]) * c + cc];
                }
                s[a * k.rows() + b] = acc;
            }
        }
        ops.lookups += (t * k.rows() * c) as u64;
        ops.additions += (t * k.rows() * (c - 1)) as u64;
        Ok(s)
    }

    fn write(&self, w: &mut Writer) -> Result<()> {
        w.magic(b"ATTT");
        w.u8(match self.activation {
            Activation::Softmax => 0,
            Activation::Sigmoid => 1,
        });
        self.q_codebook.write(w)?;
        self.k_codebook.write(w)?;
        self.qk_table.write(w)?;
        self.qkt_codebook.write(w)?;
        self.v_codebook.write(w)?;
        self.qkv_table.write(w)
    }

    fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(b"ATTT")?;
        let activation = match r.u8()? {
            0 => Activation::Softmax,
            1 => Activation::Sigmoid,
            x => return Err(Error::Format(format!("unknown activation tag {x}"))),
        };
        let at = AttentionTables {
            activation,
            q_codebook: Codebook::read(r)?,
            k_codebook: Codebook::read(r)?,
            qk_table: PQTable::read(r)?,
            qkt_codebook: Codebook::read(r)?,
            v_codebook: Codebook::read(r)?,
            qkv_table: PQTable::read(r)?,
        };
        if at.qk_table.subspaces != at.q_codebook.subspaces || at.qkv_table.subspaces != at.v_codebook.subspaces {
            return Err(Error::Format("attention tables do not match their codebooks".into()));
        }
        Ok(at)
    }
}

fn activated_row(cb: &Codebook, i: usize, d_k: usize, act: Activation) -> Vec<f64> {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut row: Vec<f64> = (0..cb.subspaces)
        .flat_map(|c| cb.prototype(c, i).iter().map(move |v| v * scale))
        .collect();
    match act {
        Activation::Softmax => softmax_in_place(&mut row),
        Activation::Sigmoid => row.iter_mut().for_each(|v| *v = sigmoid(*v)),
    }
    row
}

/// Column `d` of `v` as a vector over `T`.
fn column(v: &Tensor, d: usize) -> Vec<f64> {
    (0..v.rows()).map(|t| v.get2(t, d)).collect()
}

/// Learns the four codebooks and two `K^2`-deep tables of one attention
/// head from training `Q`, `K`, `V` blocks (each `T x D_k`).
#[allow(clippy::too_many_arguments)]
pub fn tabularize_attention(
    q: &[Tensor],
    k: &[Tensor],
    v: &[Tensor],
    kp: usize,
    c_k: usize,
    c_t: usize,
    activation: Activation,
    seed: u64,
) -> Result<AttentionTables> {
    let first = q.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let (t, d_k) = (first.rows(), first.cols());
    if q.len() != k.len() || q.len() != v.len() {
        return Err(Error::shape("Q, K and V need the same number of samples"));
    }
    for m in q.iter().chain(k).chain(v) {
        if m.shape() != [t, d_k] {
            return Err(Error::shape(format!(
                "attention block {:?}, expected [{t}, {d_k}]",
                m.shape()
            )));
        }
    }
    if c_k == 0 || d_k % c_k != 0 {
        return Err(Error::config(format!("D_k={d_k} is not divisible by C_k={c_k}")));
    }
    if c_t == 0 || t % c_t != 0 {
        return Err(Error::config(format!("T={t} is not divisible by C_t={c_t}")));
    }
    let n = q.len();

    let q_cb = learn_prototypes(&stack_rows(q, d_k)?, kp, c_k, seed)?;
    let k_cb = learn_prototypes(&stack_rows(k, d_k)?, kp, c_k, seed.wrapping_add(1))?;
    let qk_table = pairwise_table(&q_cb, &k_cb, |c, i| q_cb.prototype(c, i).to_vec());

    let mut partial = AttentionTables {
        q_codebook: q_cb,
        k_codebook: k_cb,
        qk_table,
        qkt_codebook: Codebook {
            subspaces: 1,
            sub_dim: 1,
            k: 1,
            prototypes: vec![0.0],
        },
        v_codebook: Codebook {
            subspaces: 1,
            sub_dim: 1,
            k: 1,
            prototypes: vec![0.0],
        },
        qkv_table: PQTable {
            outputs: 0,
            k: 0,
            subspaces: 0,
            entries: vec![],
        },
        activation,
    };
    let mut scores = Vec::with_capacity(n * t * t);
    let mut cols = Vec::with_capacity(n * d_k * t);
    let mut scratch = OpCounts::default();
    for i in 0..n {
        scores.extend(partial.approx_scores(&q[i], &k[i], &mut scratch)?);
        for d in 0..d_k {
            cols.extend(column(&v[i], d));
        }
    }
    let qkt_cb = learn_prototypes(&Tensor::matrix(n * t, t, scores)?, kp, c_t, seed.wrapping_add(2))?;
    let v_cb = learn_prototypes(&Tensor::matrix(n * d_k, t, cols)?, kp, c_t, seed.wrapping_add(3))?;
    let sub = t / c_t;
    let activated: Vec<Vec<f64>> = (0..qkt_cb.k)
        .map(|i| activated_row(&qkt_cb, i, d_k, activation))
        .collect();
    partial.qkv_table = pairwise_table(&qkt_cb, &v_cb, |c, i| activated[i][c * sub..(c + 1) * sub].to_vec());
    partial.qkt_codebook = qkt_cb;
    partial.v_codebook = v_cb;
    Ok(partial)
}

/// Two-stage table evaluation of one attention head.
pub fn query_attention(q: &Tensor, k: &Tensor, v: &Tensor, at: &AttentionTables) -> Result<Tensor> {
    query_attention_counted(q, k, v, at, &mut OpCounts::default())
}

pub fn query_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    at: &AttentionTables,
    ops: &mut OpCounts,
) -> Result<Tensor> {
    let (t, d_k) = (at.seq_len(), at.head_dim());
    for m in [q, k, v] {
        if m.shape() != [t, d_k] {
            return Err(Error::shape(format!(
                "attention input {:?}, tables expect [{t}, {d_k}]",
                m.shape()
            )));
        }
    }
    let s = at.approx_scores(q, k, ops)?;
    let srows: Vec<Vec<usize>> = s
        .chunks_exact(t)
        .map(|row| {
            ops.encode_ops += at.qkt_codebook.encode_cost();
            at.qkt_codebook.encode(row)
        })
        .collect::<Result<_>>()?;
    let vcols: Vec<Vec<usize>> = (0..d_k)
        .map(|d| {
            ops.encode_ops += at.v_codebook.encode_cost();
            at.v_codebook.encode(&column(v, d))
        })
        .collect::<Result<_>>()?;
    let tab = &at.qkv_table;
    let (kk, c) = (tab.k, tab.subspaces);
    let mut out = vec![0.0; t * d_k];
    for (r, si) in srows.iter().enumerate() {
        for (d, vj) in vcols.iter().enumerate() {
            let mut acc = 0.0;
            for cc in 0..c {
                acc += tab.entries[(si[cc] * kk + vj[cc]) * c + cc];
            }
            out[r * d_k + d] = acc;
        }
    }
    ops.lookups += (t * d_k * c) as u64;
    ops.additions += (t * d_k * (c - 1)) as u64;
    Tensor::matrix(t, d_k, out)
}

/// Per-head attention tables of one multi-head layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadTables {
    pub heads: Vec<AttentionTables>,
}

fn split_heads(qkv: &Tensor, heads: usize) -> Result<Vec<[Tensor; 3]>> {
    if qkv.shape().len() != 2 || qkv.cols() % (3 * heads) != 0 {
        return Err(Error::shape(format!("fused QKV {:?} for {heads} heads", qkv.shape())));
    }
    let d = qkv.cols() / 3;
    let dh = d / heads;
    Ok((0..heads)
        .map(|h| {
            [
                qkv.column_slice(h * dh, dh),
                qkv.column_slice(d + h * dh, dh),
                qkv.column_slice(2 * d + h * dh, dh),
            ]
        })
        .collect())
}

/// Tabularizes every head independently from fused `T x 3D` QKV blocks.
pub fn tabularize_multi_head(
    qkv: &[Tensor],
    heads: usize,
    kp: usize,
    c_k: usize,
    c_t: usize,
    activation: Activation,
    seed: u64,
) -> Result<MultiHeadTables> {
    let split: Vec<Vec<[Tensor; 3]>> = qkv.iter().map(|m| split_heads(m, heads)).collect::<Result<_>>()?;
    let tables = (0..heads)
        .map(|h| {
            let pick = |j: usize| split.iter().map(|s| s[h][j].clone()).collect::<Vec<_>>();
            tabularize_attention(
                &pick(0),
                &pick(1),
                &pick(2),
                kp,
                c_k,
                c_t,
                activation,
                seed.wrapping_add(1000 * h as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(MultiHeadTables { heads: tables })
}

impl MultiHeadTables {
    /// Fused `T x 3D` in, concatenated heads `T x D` out.
    pub fn query(&self, qkv: &Tensor, ops: &mut OpCounts) -> Result<Tensor> {
        let parts = split_heads(qkv, self.heads.len())?;
        let t = qkv.rows();
        let d = qkv.cols() / 3;
        let dh = d / self.heads.len();
        let mut out = vec![0.0; t * d];
        for (h, ([q, k, v], at)) in parts.iter().zip(&self.heads).enumerate() {
            let o = query_attention_counted(q, k, v, at, ops)?;
            for r in 0..t {
                out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(o.row(r));
            }
        }
        Tensor::matrix(t, d, out)
    }

    pub fn entry_count(&self) -> usize {
        self.heads.iter().map(|h| h.entry_count()).sum()
    }

    fn write(&self, w: &mut Writer) -> Result<()> {
        w.len_u32(self.heads.len())?;
        for h in &self.heads {
            h.write(w)?;
        }
        Ok(())
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let n = r.usize()?;
        let heads = (0..n).map(|_| AttentionTables::read(r)).collect::<Result<_>>()?;
        Ok(MultiHeadTables { heads })
    }
}

/// Sigmoid sampled on a uniform grid over `[-r, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidLut {
    pub range: f64,
    pub values: Vec<f64>,
}

/// Grid with `0` at index `m = (n-1)/2` and `r` at `2m`; an even `n` adds a
/// second copy of `sigmoid(r)`.
pub fn sigmoid_lut(resolution: usize, range: f64) -> Result<SigmoidLut> {
    if resolution < 2 || !(range > 0.0 && range.is_finite()) {
        return Err(Error::config(format!(
            "sigmoid table needs >= 2 entries and r > 0 (got {resolution}, {range})"
        )));
    }
    let lut = SigmoidLut {
        range,
        values: vec![0.0; resolution],
    };
    let step = lut.step();
    let values = (0..resolution)
        .map(|i| sigmoid((-range + i as f64 * step).min(range)))
        .collect();
    Ok(SigmoidLut { values, ..lut })
}

impl SigmoidLut {
    fn half(&self) -> usize {
        (self.values.len() - 1) / 2
    }

    pub fn step(&self) -> f64 {
        match self.half() {
            0 => 2.0 * self.range,
            m => self.range / m as f64,
        }
    }

    /// Nearest-entry lookup, saturating outside the range.
    pub fn query(&self, x: f64) -> f64 {
        let pos = ((x + self.range) / self.step()).round();
        let i = if pos.is_nan() || pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.values.len() - 1)
        };
        self.values[i]
    }

    /// Bound on `|query(x) - sigmoid(x)|`.
    pub fn error_bound(&self) -> f64 {
        0.25 * self.step() / 2.0 + sigmoid(-self.range)
    }

    fn write(&self, w: &mut Writer) -> Result<()> {
        w.magic(b"SLUT");
        w.f64(self.range);
        w.len_u32(self.values.len())?;
        w.f64s(&self.values);
        Ok(())
    }

    fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(b"SLUT")?;
        let range = r.f64()?;
        let n = r.usize()?;
        if n < 2 {
            return Err(Error::Format("sigmoid table too small".into()));
        }
        Ok(SigmoidLut {
            range,
            values: r.f64s(n)?,
        })
    }
}

pub fn query_sigmoid(x: f64, lut: &SigmoidLut) -> f64 {
    lut.query(x)
}

pub(crate) mod io {
    //! Kernel (de)serialization hooks for the table-model container.
    use super::*;

    pub fn write_linear(t: &LinearTable, w: &mut Writer) -> Result<()> {
        t.write(w)
    }
    pub fn read_linear(r: &mut Reader) -> Result<LinearTable> {
        LinearTable::read(r)
    }
    pub fn write_attention(t: &MultiHeadTables, w: &mut Writer) -> Result<()> {
        t.write(w)
    }
    pub fn read_attention(r: &mut Reader) -> Result<MultiHeadTables> {
        MultiHeadTables::read(r)
    }
    pub fn write_lut(t: &SigmoidLut, w: &mut Writer) -> Result<()> {
        t.write(w)
    }
    pub fn read_lut(r: &mut Reader) -> Result<SigmoidLut> {
        SigmoidLut::read(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{attention_forward, linear_forward, multi_head_attention};
    use crate::pq::lookup_aggregate;
    use crate::tensor::cosine;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap()
    }

    /// Inputs drawn from 3 fixed rows, so a K=4 codebook recovers them.
    fn few_distinct(n: usize, t: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let pool = gauss(3, d, rng);
        (0..n)
            .map(|i| Tensor::from_rows(&(0..t).map(|r| pool.row((i + r * 2) % 3).to_vec()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn linear_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = few_distinct(5, 4, 6, &mut rng);
        let w = gauss(5, 6, &mut rng);
        let b = Tensor::vector(gauss(1, 5, &mut rng).into_data());
        let lt = tabularize_linear(&w, &b, &xs, 4, 3, 0).unwrap();
        for x in &xs {
            let exact = linear_forward(x, &w, &b).unwrap();
            assert!(query_linear(x, &lt).unwrap().max_abs_diff(&exact) < 1e-9);
        }
    }

    #[test]
    fn zero_bias_column_and_bias_only_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = vec![gauss(20, 4, &mut rng)];
        let w = gauss(3, 4, &mut rng);
        let lt = tabularize_linear(&w, &Tensor::zeros(&[3]), &xs, 8, 2, 0).unwrap();
        assert!((0..3).all(|o| (0..8).all(|k| lt.table.entry(o, k, 2) == 0.0)));
        let y = query_linear(&xs[0], &lt).unwrap();
        for r in 0..20 {
            let idx = lt.codebook.encode(xs[0].row(r)).unwrap();
            let plain = build_table(&lt.codebook, &w).unwrap();
            for o in 0..3 {
                assert_eq!(y.get2(r, o), lookup_aggregate(&idx, &plain, o).unwrap());
            }
        }
        let v = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let lt = tabularize_linear(&Tensor::zeros(&[3, 4]), &v, &xs, 8, 2, 0).unwrap();
        let y = query_linear(&gauss(7, 4, &mut rng), &lt).unwrap();
        for r in 0..7 {
            assert_eq!(y.row(r), v.data());
        }
    }

    #[test]
    fn linear_high_k_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = vec![gauss(2000, 4, &mut rng)];
        let w = gauss(6, 4, &mut rng);
        let b = Tensor::zeros(&[6]);
        let lt = tabularize_linear(&w, &b, &xs, 256, 4, 0).unwrap();
        let x = gauss(200, 4, &mut rng);
        let exact = linear_forward(&x, &w, &b).unwrap();
        let approx = query_linear(&x, &lt).unwrap();
        let diff = approx.add(&exact.map(|v| -v)).unwrap();
        assert!(
            diff.frobenius() / exact.frobenius() < 0.05,
            "{}",
            diff.frobenius() / exact.frobenius()
        );
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = vec![gauss(10, 6, &mut rng)];
        let w = gauss(2, 6, &mut rng);
        assert!(matches!(
            tabularize_linear(&w, &Tensor::zeros(&[2]), &xs, 4, 4, 0),
            Err(Error::Config(_))
        ));
        let lt = tabularize_linear(&w, &Tensor::zeros(&[2]), &xs, 4, 3, 0).unwrap();
        assert!(query_linear(&gauss(2, 5, &mut rng), &lt).is_err());
    }

    proptest! {
        #[test]
        fn linear_query_composes_pq_and_bias_is_exact(seed in 0u64..500, t in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = vec![gauss(30, 4, &mut rng)];
            let w = gauss(3, 4, &mut rng);
            let b = Tensor::vector(gauss(1, 3, &mut rng).into_data());
            let with_b = tabularize_linear(&w, &b, &xs, 5, 2, seed).unwrap();
            let no_b = LinearTable::from_codebook(with_b.codebook.clone(), &w, &Tensor::zeros(&[3])).unwrap();
            let plain = build_table(&with_b.codebook, &w).unwrap();
            let x = gauss(t, 4, &mut rng);
            let y_b = query_linear(&x, &with_b).unwrap();
            let y_0 = query_linear(&x, &no_b).unwrap();
            for r in 0..t {
                let idx = with_b.codebook.encode(x.row(r)).unwrap();
                for o in 0..3 {
                    prop_assert_eq!(y_0.get2(r, o), lookup_aggregate(&idx, &plain, o).unwrap());
                    prop_assert_eq!(y_b.get2(r, o), y_0.get2(r, o) + b.data()[o]);
                }
            }
            let same = Tensor::from_rows(&vec![x.row(0).to_vec(); 3]);
            let y = query_linear(&same, &with_b).unwrap();
            prop_assert_eq!(y.row(0), y.row(2));
        }
    }

    #[test]
    fn attention_zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<Tensor> = (0..6).map(|_| gauss(4, 4, &mut rng)).collect();
        let k: Vec<Tensor> = (0..6).map(|_| gauss(4, 4, &mut rng)).collect();
        let v: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(&[4, 4])).collect();
        let at = tabularize_attention(&q, &k, &v, 8, 2, 2, Activation::Softmax, 0).unwrap();
        assert!(at.qkv_table.entries.iter().all(|&e| e == 0.0));
        let out = query_attention(&q[0], &k[0], &v[0], &at).unwrap();
        assert!(out.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn attention_exact_match_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = vec![gauss(4, 4, &mut rng)];
        let k = vec![gauss(4, 4, &mut rng)];
        let v = vec![gauss(4, 4, &mut rng)];
        let at = tabularize_attention(&q, &k, &v, 4, 2, 1, Activation::Softmax, 0).unwrap();
        let exact = attention_forward(&q[0], &k[0], &v[0]).unwrap();
        let approx = query_attention(&q[0], &k[0], &v[0], &at).unwrap();
        let err = approx.add(&exact.map(|x| -x)).unwrap().frobenius() / exact.frobenius();
        assert!(err < 0.02, "relative error {err}");
    }

    #[test]
    fn attention_table_depths_are_k_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (t, d, ck, ct) in [(4, 4, 2, 2), (8, 8, 4, 1), (6, 2, 1, 3)] {
            let mk = |rng: &mut ChaCha8Rng| (0..20).map(|_| gauss(t, d, rng)).collect::<Vec<_>>();
            let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let at = tabularize_attention(&q, &k, &v, 16, ck, ct, Activation::Softmax, 1).unwrap();
            assert_eq!(at.qk_table.outputs * at.qk_table.k, 256);
            assert_eq!(at.qkv_table.outputs * at.qkv_table.k, 256);
            assert_eq!(at.entry_count(), 256 * ck + 256 * ct);
            for i in 0..16 {
                let row = at.activated_prototype(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_single_row_returns_v_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| (0..30).map(|_| gauss(1, 4, rng)).collect::<Vec<_>>();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let at = tabularize_attention(&q, &k, &v, 8, 2, 1, Activation::Softmax, 3).unwrap();
        for i in 0..5 {
            let out = query_attention(&q[i], &k[i], &v[i], &at).unwrap();
            for d in 0..4 {
                let idx = at.v_codebook.encode(&[v[i].get2(0, d)]).unwrap();
                let rec = at.v_codebook.reconstruct(&idx)[0];
                assert!((out.get2(0, d) - rec).abs() < 1e-12);
            }
            assert_eq!(out, query_attention(&q[i], &k[i], &v[i], &at).unwrap());
        }
    }

    #[test]
    fn attention_rejects_bad_divisibility_and_keeps_k_above_row_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| (0..2).map(|_| gauss(4, 6, rng)).collect::<Vec<_>>();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        assert!(tabularize_attention(&q, &k, &v, 4, 4, 1, Activation::Softmax, 0).is_err());
        assert!(tabularize_attention(&q, &k, &v, 4, 2, 3, Activation::Softmax, 0).is_err());
        let at = tabularize_attention(&q, &k, &v, 64, 2, 2, Activation::Softmax, 0).unwrap();
        assert_eq!(at.q_codebook.k, 64);
        for i in 0..2 {
            let exact = attention_forward(&q[i], &k[i], &v[i]).unwrap();
            let approx = query_attention(&q[i], &k[i], &v[i], &at).unwrap();
            assert!(approx.max_abs_diff(&exact) < 1e-9);
        }
    }

    #[test]
    fn multi_head_exact_recovery_matches_exact_msa() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qkv = vec![gauss(3, 12, &mut rng)];
        let mh = tabularize_multi_head(&qkv, 2, 4, 2, 1, Activation::Softmax, 0).unwrap();
        let exact = multi_head_attention(&qkv[0], 2).unwrap();
        let approx = mh.query(&qkv[0], &mut OpCounts::default()).unwrap();
        assert!(approx.max_abs_diff(&exact) < 1e-9, "{}", approx.max_abs_diff(&exact));
    }

    #[test]
    fn attention_fidelity_at_k256() {
        let mut total = 0.0;
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mk = |rng: &mut ChaCha8Rng| (0..64).map(|_| gauss(8, 8, rng)).collect::<Vec<_>>();
            let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let at = tabularize_attention(&q, &k, &v, 256, 8, 1, Activation::Softmax, seed).unwrap();
            let mut cs = 0.0;
            for i in 0..64 {
                let exact = attention_forward(&q[i], &k[i], &v[i]).unwrap();
                let approx = query_attention(&q[i], &k[i], &v[i], &at).unwrap();
                cs += cosine(exact.data(), approx.data());
            }
            total += cs / 64.0;
        }
        assert!(total / 3.0 >= 0.9, "{}", total / 3.0);
    }

    #[test]
    fn sigmoid_lut_examples() {
        let lut = sigmoid_lut(4095, 8.0).unwrap();
        assert_eq!(lut.query(0.0), 0.5);
        let lut = sigmoid_lut(4096, 8.0).unwrap();
        assert_eq!(lut.query(0.0), 0.5);
        assert_eq!(lut.query(8.0), sigmoid(8.0));
        assert_eq!(lut.query(1e9), sigmoid(8.0));
        assert_eq!(lut.query(-1e9), sigmoid(-8.0));
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -12.0 + 24.0 * i as f64 / 200_000.0;
            worst = worst.max((lut.query(x) - sigmoid(x)).abs());
        }
        assert!(worst < 1e-3, "{worst}");
        assert!(worst <= lut.error_bound());
        assert!(sigmoid_lut(1, 8.0).is_err());
    }

    proptest! {
        #[test]
        fn sigmoid_lut_error_bound(n in 2usize..300, r in 0.5f64..12.0, x in -20.0f64..20.0) {
            let lut = sigmoid_lut(n, r).unwrap();
            prop_assert!((lut.query(x) - sigmoid(x)).abs() <= lut.error_bound() + 1e-12);
        }
    }

    #[test]
    fn kernels_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs = vec![gauss(20, 4, &mut rng)];
        let lt = tabularize_linear(&gauss(3, 4, &mut rng), &Tensor::zeros(&[3]), &xs, 4, 2, 0).unwrap();
        let mut w = Writer::default();
        lt.write(&mut w).unwrap();
        let mut r = Reader::new(&w.buf);
        assert_eq!(LinearTable::read(&mut r).unwrap(), lt);
        r.finish().unwrap();

        let qkv: Vec<Tensor> = (0..5).map(|_| gauss(4, 18, &mut rng)).collect();
        let mh = tabularize_multi_head(&qkv, 3, 8, 2, 2, Activation::Sigmoid, 0).unwrap();
        let mut w = Writer::default();
        mh.write(&mut w).unwrap();
        let mut r = Reader::new(&w.buf);
        assert_eq!(MultiHeadTables::read(&mut r).unwrap(), mh);

        let lut = sigmoid_lut(33, 4.0).unwrap();
        let mut w = Writer::default();
        lut.write(&mut w).unwrap();
        assert_eq!(SigmoidLut::read(&mut Reader::new(&w.buf)).unwrap(), lut);
    }
}
