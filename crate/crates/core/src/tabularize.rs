//! Layer-wise conversion of a trained model into a table model, with
//! per-layer fine-tuning on the tabularized prefix's activations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::cost::{KernelConfig, TableConfig};
use crate::error::{Error, Result};
use crate::kernels::{
    io, query_linear_counted, sigmoid_lut, tabularize_linear, tabularize_multi_head, Activation, LinearTable,
    MultiHeadTables, OpCounts, SigmoidLut,
};
use crate::nn::model::{linear_input, AttentionModel, LayerOp, LinearId, ModelConfig};
use crate::nn::ops::{layer_norm, LayerNormParams};
use crate::tensor::{cosine, matmul_nt, outer_acc, Tensor};
use crate::trace::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    /// Epochs `E`; 0 disables fine-tuning.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneReport {
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Mean over rows of the summed squared error of `x w^T + b` against `y`.
fn mse(w: &[f64], b: &[f64], x: &Tensor, y: &Tensor) -> f64 {
    let (rows, inp, outp) = (x.rows(), x.cols(), y.cols());
    let mut pred = vec![0.0; rows * outp];
    matmul_nt(x.data(), w, rows, inp, outp, &mut pred);
    let mut sum = 0.0;
    for (p, t) in pred.chunks_exact(outp).zip(y.data().chunks_exact(outp)) {
        for ((pv, bv), tv) in p.iter().zip(b).zip(t) {
            let e = pv + bv - tv;
            sum += e * e;
        }
    }
    sum / rows.max(1) as f64
}

fn mse_grad(w: &[f64], b: &[f64], x: &[f64], y: &[f64], inp: usize, outp: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let rows = x.len() / inp;
    let mut err = vec![0.0; rows * outp];
    matmul_nt(x, w, rows, inp, outp, &mut err);
    let scale = 2.0 / rows as f64;
    let mut loss = 0.0;
    let mut gb = vec![0.0; outp];
    for (e_row, y_row) in err.chunks_exact_mut(outp).zip(y.chunks_exact(outp)) {
        for ((e, bv), (t, g)) in e_row.iter_mut().zip(b).zip(y_row.iter().zip(&mut gb)) {
            let d = *e + bv - t;
            loss += d * d;
            *e = d * scale;
            *g += *e;
        }
    }
    let mut gw = vec![0.0; outp * inp];
    outer_acc(&err, x, rows, outp, inp, &mut gw);
    (loss / rows as f64, gw, gb)
}

/// The fine-tuning objective (mean over rows of the summed squared error)
/// and its gradients with respect to `w` and `b`.
pub fn mse_gradient(w: &Tensor, b: &Tensor, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let (outp, inp) = (w.rows(), w.cols());
    if x.cols() != inp || y.cols() != outp || b.len() != outp || x.rows() != y.rows() || x.rows() == 0 {
        return Err(Error::shape("mse gradient: inconsistent shapes"));
    }
    let (loss, gw, gb) = mse_grad(w.data(), b.data(), x.data(), y.data(), inp, outp);
    Ok((loss, Tensor::matrix(outp, inp, gw)?, Tensor::vector(gb)))
}

/// Gradient descent on the layer-local MSE between `x_hat w'^T + b'` and
/// `y`, starting at `(w, b)`. Returns the best parameters seen, so the
/// final MSE never exceeds the initial one.
pub fn fine_tune_layer(
    w: &Tensor,
    b: &Tensor,
    x_hat: &Tensor,
    y: &Tensor,
    ft: &FineTuneConfig,
) -> Result<(Tensor, Tensor, FineTuneReport)> {
    if w.shape().len() != 2 || x_hat.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::shape("fine-tuning expects matrices"));
    }
    let (outp, inp) = (w.rows(), w.cols());
    if x_hat.cols() != inp || y.cols() != outp || b.len() != outp || x_hat.rows() != y.rows() {
        return Err(Error::shape(format!(
            "fine-tune: W {:?}, b {}, X {:?}, Y {:?}",
            w.shape(),
            b.len(),
            x_hat.shape(),
            y.shape()
        )));
    }
    if ft.batch_size == 0 {
        return Err(Error::config("fine-tune batch size must be >= 1"));
    }
    let initial = mse(w.data(), b.data(), x_hat, y);
    if !initial.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut report = FineTuneReport {
        initial_mse: initial,
        final_mse: initial,
    };
    let (mut cw, mut cb) = (w.data().to_vec(), b.data().to_vec());
    let (mut best_w, mut best_b) = (cw.clone(), cb.clone());
    let rows = x_hat.rows();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ft.seed);
    for epoch in 0..ft.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(ft.batch_size) {
            let mut xb = Vec::with_capacity(batch.len() * inp);
            let mut yb = Vec::with_capacity(batch.len() * outp);
            for &r in batch {
                xb.extend_from_slice(x_hat.row(r));
                yb.extend_from_slice(y.row(r));
            }
            let (_, gw, gb) = mse_grad(&cw, &cb, &xb, &yb, inp, outp);
            for (p, g) in cw.iter_mut().zip(&gw) {
                *p -= ft.learning_rate * g;
            }
            for (p, g) in cb.iter_mut().zip(&gb) {
                *p -= ft.learning_rate * g;
            }
        }
        let m = mse(&cw, &cb, x_hat, y);
        if !m.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if m < report.final_mse {
            report.final_mse = m;
            best_w.clone_from(&cw);
            best_b.clone_from(&cb);
        }
    }
    Ok((Tensor::matrix(outp, inp, best_w)?, Tensor::vector(best_b), report))
}

/// One table-model stage; stage `i` replaces graph layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Linear {
        table: LinearTable,
        relu_input: bool,
        flatten: bool,
    },
    Attention {
        block: usize,
        tables: MultiHeadTables,
    },
    Norm(LayerNormParams),
    Residual {
        from: usize,
    },
    Sigmoid(SigmoidLut),
}

impl Stage {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Stage::Linear { .. } => "linear",
            Stage::Attention { .. } => "attention",
            Stage::Norm(_) => "layernorm",
            Stage::Residual { .. } => "residual",
            Stage::Sigmoid(_) => "sigmoid",
        }
    }

    /// Runs the stage; `stage_inputs[j]` is what stage `j` received.
    pub fn apply(&self, input: &Tensor, stage_inputs: &[Tensor], ops: &mut OpCounts) -> Result<Tensor> {
        match self {
            Stage::Linear {
                table,
                relu_input,
                flatten,
            } => query_linear_counted(&linear_input(input, *relu_input, *flatten)?, table, ops),
            Stage::Attention { tables, .. } => tables.query(input, ops),
            Stage::Norm(p) => {
                ops.norm_ops += 7 * input.len() as u64;
                layer_norm(input, p)
            }
            Stage::Residual { from } => {
                let other = stage_inputs.get(*from).ok_or(Error::IndexOutOfRange {
                    index: *from,
                    limit: stage_inputs.len(),
                })?;
                ops.additions += input.len() as u64;
                input.add(other)
            }
            Stage::Sigmoid(lut) => {
                ops.lookups += input.len() as u64;
                Ok(input.map(|x| lut.query(x)))
            }
        }
    }
}

/// A model made of lookup tables plus norm/residual passthroughs.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    pub config: ModelConfig,
    pub table_config: TableConfig,
    /// SHA-256 of the source model's checkpoint bytes.
    pub source_hash: [u8; 32],
    pub stages: Vec<Stage>,
}

/// Knobs of [`tabularize_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularizeOptions {
    pub table: TableConfig,
    /// Subspaces over `T` in the attention kernel; defaults to the
    /// attention class `C`.
    pub attention_time_subspaces: Option<usize>,
    pub activation: Activation,
    pub lut_resolution: usize,
    pub lut_range: f64,
    pub fine_tune: FineTuneConfig,
    pub seed: u64,
}

impl TabularizeOptions {
    pub fn new(table: TableConfig) -> Self {
        TabularizeOptions {
            table,
            attention_time_subspaces: None,
            activation: Activation::Softmax,
            lut_resolution: 4096,
            lut_range: 8.0,
            fine_tune: FineTuneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularizeReport {
    /// `(stage index, result)` for every fine-tuned linear stage.
    pub fine_tune: Vec<(usize, FineTuneReport)>,
}

fn class_of(id: LinearId, t: &TableConfig) -> KernelConfig {
    match id {
        LinearId::Input => t.input,
        LinearId::Qkv(_) | LinearId::Proj(_) => t.attention,
        LinearId::FfnHidden(_) | LinearId::FfnOut(_) => t.ffn,
        LinearId::Output => t.output,
    }
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::matrix(data.len() / cols.max(1), cols, data)
}

pub fn model_hash(model: &AttentionModel) -> Result<[u8; 32]> {
    Ok(Sha256::digest(model.to_bytes()?).into())
}

/// Tabularizes `model` using the dataset samples as calibration inputs.
pub fn tabularize_model(
    model: &AttentionModel,
    data: &Dataset,
    opts: &TabularizeOptions,
) -> Result<(TableModel, TabularizeReport)> {
    let inputs: Vec<Tensor> = data.samples.iter().map(|s| model.sample_input(s)).collect();
    tabularize_model_on(model, &inputs, opts)
}

/// Tabularizes `model` on raw `T_I x D_I` calibration inputs.
pub fn tabularize_model_on(
    model: &AttentionModel,
    inputs: &[Tensor],
    opts: &TabularizeOptions,
) -> Result<(TableModel, TabularizeReport)> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let tc = &opts.table;
    for kc in [tc.input, tc.attention, tc.ffn, tc.output] {
        if kc.k == 0 || kc.c == 0 {
            return Err(Error::config("table K and C must be >= 1"));
        }
    }
    let graph = model.graph();
    let sources: std::collections::BTreeSet<usize> = graph
        .iter()
        .filter_map(|op| match op {
            LayerOp::Residual { from } => Some(*from),
            _ => None,
        })
        .collect();
    let mut exact: Vec<Tensor> = inputs.iter().map(|x| model.patch_input(x)).collect::<Result<_>>()?;
    let mut approx = exact.clone();
    let mut saved: BTreeMap<usize, (Vec<Tensor>, Vec<Tensor>)> = BTreeMap::new();
    let mut stages = Vec::with_capacity(graph.len());
    let mut report = TabularizeReport::default();
    let mut ops = OpCounts::default();

    for (i, op) in graph.iter().enumerate() {
        let seed = opts.seed.wrapping_add(7919 * i as u64);
        if sources.contains(&i) {
            saved.insert(i, (exact.clone(), approx.clone()));
        }
        let stage = match *op {
            LayerOp::Linear {
                id,
                relu_input,
                flatten,
            } => {
                let x_hat: Vec<Tensor> = approx
                    .iter()
                    .map(|a| linear_input(a, relu_input, flatten))
                    .collect::<Result<_>>()?;
                let lin = model.linear(id);
                let (mut w, mut b) = (lin.w.clone(), lin.b.clone());
                if i > 0 && opts.fine_tune.epochs > 0 {
                    let targets: Vec<Tensor> = exact
                        .iter()
                        .map(|e| model.apply_layer(op, e, &[]))
                        .collect::<Result<_>>()?;
                    let ft = FineTuneConfig {
                        seed: opts.fine_tune.seed.wrapping_add(i as u64),
                        ..opts.fine_tune
                    };
                    let (w2, b2, r) =
                        fine_tune_layer(&w, &b, &stack(&x_hat)?, &stack(&targets)?, &ft).map_err(|e| e.at_layer(i))?;
                    log::debug!("stage {i}: fine-tune mse {:.6} -> {:.6}", r.initial_mse, r.final_mse);
                    report.fine_tune.push((i, r));
                    w = w2;
                    b = b2;
                }
                let kc = class_of(id, tc);
                let table = tabularize_linear(&w, &b, &x_hat, kc.k, kc.c, seed).map_err(|e| e.at_layer(i))?;
                Stage::Linear {
                    table,
                    relu_input,
                    flatten,
                }
            }
            LayerOp::Attention { block } => {
                let kc = tc.attention;
                let c_t = opts.attention_time_subspaces.unwrap_or(kc.c);
                let tables = tabularize_multi_head(&approx, model.config.heads, kc.k, kc.c, c_t, opts.activation, seed)
                    .map_err(|e| e.at_layer(i))?;
                Stage::Attention { block, tables }
            }
            LayerOp::Norm(id) => Stage::Norm(model.norm(id).clone()),
            LayerOp::Residual { from } => Stage::Residual { from },
            LayerOp::Sigmoid => Stage::Sigmoid(sigmoid_lut(opts.lut_resolution, opts.lut_range)?),
        };
        for (s, a) in approx.iter_mut().enumerate() {
            *a = match &stage {
                Stage::Residual { from } => a.add(&saved[from].1[s])?,
                st => st.apply(a, &[], &mut ops).map_err(|e| e.at_layer(i))?,
            };
        }
        for (s, e) in exact.iter_mut().enumerate() {
            *e = match *op {
                LayerOp::Residual { from } => e.add(&saved[&from].0[s])?,
                _ => model.apply_layer(op, e, &[])?,
            };
        }
        stages.push(stage);
    }

    Ok((
        TableModel {
            config: model.config,
            table_config: *tc,
            source_hash: model_hash(model)?,
            stages,
        },
        report,
    ))
}

impl TableModel {
    fn patch(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.shape() != [c.seq_len, c.input_dim] {
            return Err(Error::shape(format!(
                "table model input {:?}, expected [{}, {}]",
                x.shape(),
                c.seq_len,
                c.input_dim
            )));
        }
        x.clone().reshape(vec![c.patches, c.patch_dim()])
    }

    /// Outputs of every stage for a raw `T_I x D_I` input.
    pub fn forward_stages(&self, x: &Tensor, ops: &mut OpCounts) -> Result<Vec<Tensor>> {
        let mut cur = self.patch(x)?;
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            inputs.push(cur.clone());
            cur = st.apply(&cur, &inputs, ops).map_err(|e| e.at_layer(i))?;
            outputs.push(cur.clone());
        }
        Ok(outputs)
    }

    /// Probabilities plus the operation tally of one forward pass.
    pub fn forward_counted(&self, x: &Tensor) -> Result<(Tensor, OpCounts)> {
        let mut ops = OpCounts::default();
        let out = self
            .forward_stages(x, &mut ops)?
            .pop()
            .ok_or_else(|| Error::shape("empty table model"))?;
        let n = out.len();
        Ok((out.reshape(vec![n])?, ops))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_counted(x)?.0)
    }

    pub fn sample_input(&self, s: &crate::trace::Sample) -> Tensor {
        s.features(self.config.input_scale())
    }

    pub fn source_hash_hex(&self) -> String {
        self.source_hash.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Total number of table entries across all stages.
    pub fn table_entries(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Linear { table, .. } => table.entry_count(),
                Stage::Attention { tables, .. } => tables.entry_count(),
                Stage::Sigmoid(l) => l.values.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.magic(b"TMDL");
        w.u32(1);
        let c = &self.config;
        for v in [
            c.layers,
            c.dim,
            c.heads,
            c.ffn_dim,
            c.input_dim,
            c.seq_len,
            c.patches,
            c.outputs,
        ] {
            w.len_u32(v)?;
        }
        w.u32(c.segment_bits);
        let t = &self.table_config;
        for kc in [t.input, t.attention, t.ffn, t.output] {
            w.len_u32(kc.k)?;
            w.len_u32(kc.c)?;
        }
        w.u32(t.entry_bits);
        w.bytes(&self.source_hash);
        w.len_u32(self.stages.len())?;
        for st in &self.stages {
            match st {
                Stage::Linear {
                    table,
                    relu_input,
                    flatten,
                } => {
                    w.u8(0);
                    w.u8(u8::from(*relu_input));
                    w.u8(u8::from(*flatten));
                    io::write_linear(table, &mut w)?;
                }
                Stage::Attention { block, tables } => {
                    w.u8(1);
                    w.len_u32(*block)?;
                    io::write_attention(tables, &mut w)?;
                }
                Stage::Norm(p) => {
                    w.u8(2);
                    w.len_u32(p.dim())?;
                    w.f64s(p.gamma.data());
                    w.f64s(p.beta.data());
                }
                Stage::Residual { from } => {
                    w.u8(3);
                    w.len_u32(*from)?;
                }
                Stage::Sigmoid(lut) => {
                    w.u8(4);
                    io::write_lut(lut, &mut w)?;
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(b"TMDL")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported table model version {version}")));
        }
        let config = ModelConfig {
            layers: r.usize()?,
            dim: r.usize()?,
            heads: r.usize()?,
            ffn_dim: r.usize()?,
            input_dim: r.usize()?,
            seq_len: r.usize()?,
            patches: r.usize()?,
            outputs: r.usize()?,
            segment_bits: r.u32()?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut kcs = [KernelConfig::new(0, 0); 4];
        for kc in &mut kcs {
            *kc = KernelConfig::new(r.usize()?, r.usize()?);
        }
        let table_config = TableConfig {
            input: kcs[0],
            attention: kcs[1],
            ffn: kcs[2],
            output: kcs[3],
            entry_bits: r.u32()?,
        };
        let source_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.usize()?;
        let mut stages = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let st = match r.u8()? {
                0 => {
                    let relu_input = r.u8()? != 0;
                    let flatten = r.u8()? != 0;
                    Stage::Linear {
                        table: io::read_linear(&mut r)?,
                        relu_input,
                        flatten,
                    }
                }
                1 => Stage::Attention {
                    block: r.usize()?,
                    tables: io::read_attention(&mut r)?,
                },
                2 => {
                    let d = r.usize()?;
                    Stage::Norm(LayerNormParams {
                        gamma: Tensor::vector(r.f64s(d)?),
                        beta: Tensor::vector(r.f64s(d)?),
                    })
                }
                3 => Stage::Residual { from: r.usize()? },
                4 => Stage::Sigmoid(io::read_lut(&mut r)?),
                tag => return Err(Error::Format(format!("unknown stage tag {tag}"))),
            };
            stages.push(st);
        }
        r.finish()?;
        Ok(TableModel {
            config,
            table_config,
            source_hash,
            stages,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn table_model_forward(tm: &TableModel, x: &Tensor) -> Result<Tensor> {
    tm.forward(x)
}

/// Mean per-stage cosine similarity between exact layer outputs and table
/// stage outputs over raw inputs.
pub fn layer_cosine_report_on(model: &AttentionModel, tm: &TableModel, inputs: &[Tensor]) -> Result<Vec<f64>> {
    if model.config != tm.config {
        return Err(Error::config(
            "table model was built for a different model configuration",
        ));
    }
    if inputs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut sums = vec![0.0; tm.stages.len()];
    let mut ops = OpCounts::default();
    for x in inputs {
        let exact = model.forward_layers(&model.patch_input(x)?)?;
        let approx = tm.forward_stages(x, &mut ops)?;
        if exact.len() != approx.len() {
            return Err(Error::shape("stage count differs from layer count"));
        }
        for (s, (e, a)) in sums.iter_mut().zip(exact.iter().zip(&approx)) {
            *s += cosine(e.data(), a.data());
        }
    }
    Ok(sums.into_iter().map(|s| s / inputs.len() as f64).collect())
}

pub fn layer_cosine_report(model: &AttentionModel, tm: &TableModel, data: &Dataset) -> Result<Vec<f64>> {
    let inputs: Vec<Tensor> = data.samples.iter().map(|s| model.sample_input(s)).collect();
    layer_cosine_report_on(model, tm, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::query_linear;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            input_dim: 3,
            seq_len: 4,
            patches: 4,
            outputs: 5,
            segment_bits: 2,
        }
    }

    fn inputs(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    fn exact_opts() -> TabularizeOptions {
        TabularizeOptions {
            attention_time_subspaces: Some(1),
            fine_tune: FineTuneConfig {
                epochs: 0,
                ..FineTuneConfig::default()
            },
            ..TabularizeOptions::new(TableConfig::uniform(64, 1))
        }
    }

    #[test]
    fn fine_tune_fixed_point_and_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]);
        let x = Tensor::matrix(20, 3, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = crate::nn::ops::linear_forward(&x, &w, &b).unwrap();
        let (w2, b2, r) = fine_tune_layer(&w, &b, &x, &y, &FineTuneConfig::default()).unwrap();
        assert!(r.initial_mse < 1e-20);
        assert!(w2.max_abs_diff(&w) < 1e-12 && b2.max_abs_diff(&b) < 1e-12);
        let off = FineTuneConfig {
            epochs: 0,
            ..FineTuneConfig::default()
        };
        let (w3, b3, _) = fine_tune_layer(&w, &b, &x.map(|v| v + 1.0), &y, &off).unwrap();
        assert_eq!((w3, b3), (w, b));
    }

    #[test]
    fn fine_tune_recovers_shifted_input() {
        // y = 2x + 1 observed through x_hat = x + 0.5; the bias must move to 0.
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let y = Tensor::matrix(20, 1, x.iter().map(|v| 2.0 * v + 1.0).collect()).unwrap();
        let x_hat = Tensor::matrix(20, 1, x.iter().map(|v| v + 0.5).collect()).unwrap();
        let w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::vector(vec![1.0]);
        let ft = FineTuneConfig {
            epochs: 400,
            learning_rate: 0.05,
            batch_size: 4,
            seed: 3,
        };
        let (w2, b2, r) = fine_tune_layer(&w, &b, &x_hat, &y, &ft).unwrap();
        assert!(r.final_mse < 1e-6, "{r:?}");
        assert!((b2.data()[0] - (1.0 - 2.0 * 0.5)).abs() < 1e-3);
        assert!((w2.data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn fine_tune_never_worse_even_with_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::matrix(30, 4, (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::matrix(30, 2, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[2]);
        let ft = FineTuneConfig {
            epochs: 5,
            learning_rate: 0.9,
            batch_size: 30,
            seed: 0,
        };
        let (_, _, r) = fine_tune_layer(&w, &b, &x, &y, &ft).unwrap();
        assert!(r.final_mse <= r.initial_mse);
        assert!(fine_tune_layer(&w, &b, &x, &Tensor::zeros(&[30, 3]), &ft).is_err());
    }

    #[test]
    fn exact_recovery_matches_model_within_lut_error() {
        let model = AttentionModel::new(cfg(), 4).unwrap();
        let xs = inputs(6, 5);
        let (tm, _) = tabularize_model_on(&model, &xs, &exact_opts()).unwrap();
        assert_eq!(tm.stages.len(), model.graph().len());
        for x in &xs {
            let exact = model.forward(x).unwrap();
            let (approx, ops) = tm.forward_counted(x).unwrap();
            assert!(approx.max_abs_diff(&exact) < 1e-3, "{}", approx.max_abs_diff(&exact));
            assert_eq!(ops.weight_multiplies, 0);
            assert!(ops.lookups > 0);
        }
        let cos = layer_cosine_report_on(&model, &tm, &xs).unwrap();
        assert!(cos.iter().all(|&c| c >= 0.999), "{cos:?}");
    }

    #[test]
    fn forward_is_pure_and_bounded() {
        let model = AttentionModel::new(cfg(), 4).unwrap();
        let xs = inputs(10, 6);
        let mut opts = TabularizeOptions::new(TableConfig::uniform(4, 1));
        opts.fine_tune.epochs = 2;
        let (tm, report) = tabularize_model_on(&model, &xs, &opts).unwrap();
        assert!(report
            .fine_tune
            .iter()
            .all(|(i, r)| *i > 0 && r.final_mse <= r.initial_mse));
        let lut = match tm.stages.last().unwrap() {
            Stage::Sigmoid(l) => l.clone(),
            other => panic!("{other:?}"),
        };
        let (lo, hi) = (lut.values[0], *lut.values.last().unwrap());
        for x in inputs(5, 7) {
            let a = tm.forward(&x).unwrap();
            assert_eq!(a, tm.forward(&x).unwrap());
            assert!(a.data().iter().all(|&p| p >= lo && p <= hi && (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn forward_equals_manual_stage_composition() {
        let model = AttentionModel::new(cfg(), 8).unwrap();
        let xs = inputs(10, 9);
        let (tm, _) = tabularize_model_on(&model, &xs, &TabularizeOptions::new(TableConfig::uniform(4, 1))).unwrap();
        let x = &xs[3];
        let mut cur = x.clone().reshape(vec![4, 3]).unwrap();
        let mut seen: Vec<Tensor> = Vec::new();
        let mut ops = OpCounts::default();
        for st in &tm.stages {
            seen.push(cur.clone());
            cur = match st {
                Stage::Linear {
                    table,
                    relu_input,
                    flatten,
                } => {
                    let mut inp = if *relu_input {
                        cur.map(|v| v.max(0.0))
                    } else {
                        cur.clone()
                    };
                    if *flatten {
                        let n = inp.len();
                        inp = inp.reshape(vec![1, n]).unwrap();
                    }
                    query_linear(&inp, table).unwrap()
                }
                Stage::Attention { tables, .. } => tables.query(&cur, &mut ops).unwrap(),
                Stage::Norm(p) => layer_norm(&cur, p).unwrap(),
                Stage::Residual { from } => cur.add(&seen[*from]).unwrap(),
                Stage::Sigmoid(l) => cur.map(|v| l.query(v)),
            };
        }
        assert_eq!(cur.into_data(), tm.forward(x).unwrap().into_data());
    }

    #[test]
    fn norm_and_residual_stages_are_exact_copies() {
        let model = AttentionModel::new(cfg(), 8).unwrap();
        let xs = inputs(4, 9);
        let (tm, _) = tabularize_model_on(&model, &xs, &TabularizeOptions::new(TableConfig::uniform(4, 1))).unwrap();
        let x = Tensor::matrix(4, 8, (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut ops = OpCounts::default();
        for (st, op) in tm.stages.iter().zip(model.graph()) {
            if let (Stage::Norm(_), LayerOp::Norm(_)) = (st, op) {
                assert_eq!(
                    st.apply(&x, &[], &mut ops).unwrap(),
                    model.apply_layer(&op, &x, &[]).unwrap()
                );
            }
            if let (Stage::Residual { from }, LayerOp::Residual { .. }) = (st, op) {
                let prior = vec![x.map(|v| v * 0.5); from + 1];
                assert_eq!(
                    st.apply(&x, &prior, &mut ops).unwrap(),
                    model.apply_layer(&op, &x, &prior).unwrap()
                );
            }
        }
    }

    #[test]
    fn first_stage_is_never_fine_tuned() {
        let model = AttentionModel::new(cfg(), 2).unwrap();
        let xs = inputs(12, 3);
        let mut with = TabularizeOptions::new(TableConfig::uniform(4, 1));
        with.fine_tune.epochs = 3;
        let mut without = with;
        without.fine_tune.epochs = 0;
        let (a, ra) = tabularize_model_on(&model, &xs, &with).unwrap();
        let (b, _) = tabularize_model_on(&model, &xs, &without).unwrap();
        assert_eq!(a.stages[0], b.stages[0]);
        assert!(ra.fine_tune.iter().all(|(i, _)| *i > 0));
        let ca = layer_cosine_report_on(&model, &a, &xs).unwrap();
        let cb = layer_cosine_report_on(&model, &b, &xs).unwrap();
        assert_eq!(ca[0], cb[0]);
    }

    #[test]
    fn random_table_model_is_uncorrelated_early() {
        let model = AttentionModel::new(cfg(), 2).unwrap();
        let other = AttentionModel::new(cfg(), 99).unwrap();
        let xs = inputs(40, 3);
        let (tm, _) = tabularize_model_on(&other, &xs, &exact_opts()).unwrap();
        let tm = TableModel {
            source_hash: model_hash(&model).unwrap(),
            ..tm
        };
        let cos = layer_cosine_report_on(&model, &tm, &xs).unwrap();
        assert!(cos[0].abs() < 0.35, "{cos:?}");
    }

    #[test]
    fn divisibility_errors_name_the_layer() {
        let model = AttentionModel::new(cfg(), 2).unwrap();
        let xs = inputs(4, 3);
        // input width 3 is not divisible by C = 2
        let r = tabularize_model_on(&model, &xs, &TabularizeOptions::new(TableConfig::uniform(4, 2)));
        match r {
            Err(Error::Layer { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tmdl_round_trip_is_bit_exact() {
        let model = AttentionModel::new(cfg(), 2).unwrap();
        let xs = inputs(8, 3);
        let (tm, _) = tabularize_model_on(&model, &xs, &TabularizeOptions::new(TableConfig::uniform(4, 1))).unwrap();
        let bytes = tm.to_bytes().unwrap();
        let back = TableModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, tm);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.source_hash, model_hash(&model).unwrap());
        assert!(TableModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let x = &xs[0];
        assert_eq!(back.forward(x).unwrap(), tm.forward(x).unwrap());
        assert!(tm.forward(&Tensor::zeros(&[3, 3])).is_err());
    }
}
