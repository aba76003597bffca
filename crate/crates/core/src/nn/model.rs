//! The attention-based delta-bitmap predictor.
//!
//! ```text
//! X (T_I x D_I) -> patch -> input linear -> L x [pre-norm MSA + residual,
//!   pre-norm FFN + residual] -> norm -> flatten -> output linear -> sigmoid
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{layer_norm, multi_head_attention, relu, sigmoid, LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::{DatasetConfig, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder layers `L`.
    pub layers: usize,
    /// Hidden / attention dimension `D`.
    pub dim: usize,
    /// Heads `H`.
    pub heads: usize,
    /// Feed-forward dimension `D_F`.
    pub ffn_dim: usize,
    /// Input segment dimension `D_I`.
    pub input_dim: usize,
    /// Input history length `T_I`.
    pub seq_len: usize,
    /// Transformer patches `T_T`; consecutive history rows are grouped.
    pub patches: usize,
    /// Output bitmap size `D_O`.
    pub outputs: usize,
    /// Segment width `c`; inputs are scaled by `2^-c`.
    pub segment_bits: u32,
}

impl ModelConfig {
    /// `D_F = 4D`, one patch per history step.
    pub fn new(layers: usize, dim: usize, heads: usize, data: &DatasetConfig) -> Self {
        ModelConfig {
            layers,
            dim,
            heads,
            ffn_dim: 4 * dim,
            input_dim: data.input_width(),
            seq_len: data.history,
            patches: data.history,
            outputs: data.output_size(),
            segment_bits: data.block_bits,
        }
    }

    pub fn teacher(data: &DatasetConfig) -> Self {
        ModelConfig::new(4, 256, 8, data)
    }

    pub fn student(data: &DatasetConfig) -> Self {
        ModelConfig::new(1, 32, 2, data)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers.max(1),
            self.dim,
            self.heads,
            self.ffn_dim,
            self.input_dim,
            self.seq_len,
            self.patches,
            self.outputs,
        ];
        if dims.contains(&0) {
            return Err(Error::config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "D={} is not divisible by H={}",
                self.dim, self.heads
            )));
        }
        if self.seq_len % self.patches != 0 {
            return Err(Error::config(format!(
                "T_I={} is not divisible by T_T={}",
                self.seq_len, self.patches
            )));
        }
        Ok(())
    }

    pub fn input_scale(&self) -> f64 {
        (-f64::from(self.segment_bits)).exp2()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of one patch: `D_I * T_I / T_T`.
    pub fn patch_dim(&self) -> usize {
        self.input_dim * self.seq_len / self.patches
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    /// Fused `[W_Q; W_K; W_V]`, `3D x D`.
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNormParams,
    pub ffn_hidden: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel {
    pub config: ModelConfig,
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNormParams,
    /// `D_O x (T_T * D)` over the flattened encoder output.
    pub output: Linear,
}

/// Which linear layer of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearId {
    Input,
    Qkv(usize),
    Proj(usize),
    FfnHidden(usize),
    FfnOut(usize),
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormId {
    Pre1(usize),
    Pre2(usize),
    Final,
}

/// One node of the forward graph, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    /// A linear layer. `relu_input` applies ReLU to the incoming activation
    /// first (the FFN nonlinearity); `flatten` views the `T x D` input as a
    /// single row.
    Linear {
        id: LinearId,
        relu_input: bool,
        flatten: bool,
    },
    Norm(NormId),
    /// Multi-head attention over the fused QKV activation of `block`.
    Attention {
        block: usize,
    },
    /// Adds the input of layer `from` to the incoming activation.
    Residual {
        from: usize,
    },
    Sigmoid,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Linear { .. } => "linear",
            LayerOp::Norm(_) => "layernorm",
            LayerOp::Attention { .. } => "attention",
            LayerOp::Residual { .. } => "residual",
            LayerOp::Sigmoid => "sigmoid",
        }
    }
}

fn init_linear(rng: &mut ChaCha8Rng, inp: usize, outp: usize) -> Linear {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = (0..inp * outp).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..outp).map(|_| rng.gen_range(-bound..bound)).collect();
    Linear {
        w: Tensor::matrix(outp, inp, w).unwrap(),
        b: Tensor::vector(b),
    }
}

impl AttentionModel {
    /// Uniform `+-1/sqrt(fan_in)` initialization from `seed`; norms start
    /// as identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let input = init_linear(&mut rng, config.patch_dim(), d);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                norm1: LayerNormParams::identity(d),
                qkv: init_linear(&mut rng, d, 3 * d),
                proj: init_linear(&mut rng, d, d),
                norm2: LayerNormParams::identity(d),
                ffn_hidden: init_linear(&mut rng, d, config.ffn_dim),
                ffn_out: init_linear(&mut rng, config.ffn_dim, d),
            })
            .collect();
        let output = init_linear(&mut rng, config.patches * d, config.outputs);
        Ok(AttentionModel {
            config,
            input,
            layers,
            final_norm: LayerNormParams::identity(d),
            output,
        })
    }

    /// Same structure with every parameter zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data_mut().fill(0.0);
        }
        z
    }

    /// Parameters in declaration order (the checkpoint order).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.input.w, &self.input.b];
        for l in &self.layers {
            v.extend([
                &l.norm1.gamma,
                &l.norm1.beta,
                &l.qkv.w,
                &l.qkv.b,
                &l.proj.w,
                &l.proj.b,
                &l.norm2.gamma,
                &l.norm2.beta,
                &l.ffn_hidden.w,
                &l.ffn_hidden.b,
                &l.ffn_out.w,
                &l.ffn_out.b,
            ]);
        }
        v.extend([
            &self.final_norm.gamma,
            &self.final_norm.beta,
            &self.output.w,
            &self.output.b,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.input.w, &mut self.input.b];
        for l in &mut self.layers {
            v.extend([
                &mut l.norm1.gamma,
                &mut l.norm1.beta,
                &mut l.qkv.w,
                &mut l.qkv.b,
                &mut l.proj.w,
                &mut l.proj.b,
                &mut l.norm2.gamma,
                &mut l.norm2.beta,
                &mut l.ffn_hidden.w,
                &mut l.ffn_hidden.b,
                &mut l.ffn_out.w,
                &mut l.ffn_out.b,
            ]);
        }
        v.extend([
            &mut self.final_norm.gamma,
            &mut self.final_norm.beta,
            &mut self.output.w,
            &mut self.output.b,
        ]);
        v
    }

    /// Names matching [`Self::params`], for diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["input.w".to_string(), "input.b".to_string()];
        for i in 0..self.layers.len() {
            for n in [
                "norm1.gamma",
                "norm1.beta",
                "qkv.w",
                "qkv.b",
                "proj.w",
                "proj.b",
                "norm2.gamma",
                "norm2.beta",
                "ffn_hidden.w",
                "ffn_hidden.b",
                "ffn_out.w",
                "ffn_out.b",
            ] {
                v.push(format!("layer{i}.{n}"));
            }
        }
        v.extend(["final_norm.gamma", "final_norm.beta", "output.w", "output.b"].map(String::from));
        v
    }

    /// Checks parameter shapes against the config.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.dim;
        let lin = |l: &Linear, inp: usize, outp: usize, name: &str| {
            if l.w.shape() != [outp, inp] || l.b.shape() != [outp] {
                Err(Error::shape(format!(
                    "{name}: W {:?} b {:?}, expected [{outp}, {inp}]",
                    l.w.shape(),
                    l.b.shape()
                )))
            } else {
                Ok(())
            }
        };
        let norm = |n: &LayerNormParams, name: &str| {
            if n.gamma.shape() != [d] || n.beta.shape() != [d] {
                Err(Error::shape(format!("{name}: expected [{d}]")))
            } else {
                Ok(())
            }
        };
        lin(&self.input, c.patch_dim(), d, "input")?;
        if self.layers.len() != c.layers {
            return Err(Error::shape(format!(
                "{} encoder layers, config says {}",
                self.layers.len(),
                c.layers
            )));
        }
        for l in &self.layers {
            norm(&l.norm1, "norm1")?;
            lin(&l.qkv, d, 3 * d, "qkv")?;
            lin(&l.proj, d, d, "proj")?;
            norm(&l.norm2, "norm2")?;
            lin(&l.ffn_hidden, d, c.ffn_dim, "ffn_hidden")?;
            lin(&l.ffn_out, c.ffn_dim, d, "ffn_out")?;
        }
        norm(&self.final_norm, "final_norm")?;
        lin(&self.output, c.patches * d, c.outputs, "output")
    }

    pub fn linear(&self, id: LinearId) -> &Linear {
        match id {
            LinearId::Input => &self.input,
            LinearId::Qkv(i) => &self.layers[i].qkv,
            LinearId::Proj(i) => &self.layers[i].proj,
            LinearId::FfnHidden(i) => &self.layers[i].ffn_hidden,
            LinearId::FfnOut(i) => &self.layers[i].ffn_out,
            LinearId::Output => &self.output,
        }
    }

    pub fn norm(&self, id: NormId) -> &LayerNormParams {
        match id {
            NormId::Pre1(i) => &self.layers[i].norm1,
            NormId::Pre2(i) => &self.layers[i].norm2,
            NormId::Final => &self.final_norm,
        }
    }

    /// The forward graph as a flat list of layers.
    pub fn graph(&self) -> Vec<LayerOp> {
        let lin = |id, relu_input, flatten| LayerOp::Linear {
            id,
            relu_input,
            flatten,
        };
        let mut g = vec![lin(LinearId::Input, false, false)];
        for i in 0..self.layers.len() {
            let block_start = g.len();
            g.push(LayerOp::Norm(NormId::Pre1(i)));
            g.push(lin(LinearId::Qkv(i), false, false));
            g.push(LayerOp::Attention { block: i });
            g.push(lin(LinearId::Proj(i), false, false));
            g.push(LayerOp::Residual { from: block_start });
            let ffn_start = g.len();
            g.push(LayerOp::Norm(NormId::Pre2(i)));
            g.push(lin(LinearId::FfnHidden(i), false, false));
            g.push(lin(LinearId::FfnOut(i), true, false));
            g.push(LayerOp::Residual { from: ffn_start });
        }
        g.push(LayerOp::Norm(NormId::Final));
        g.push(lin(LinearId::Output, false, true));
        g.push(LayerOp::Sigmoid);
        g
    }

    /// Validates a raw `T_I x D_I` input and groups it into `T_T` patches.
    pub fn patch_input(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.shape() != [c.seq_len, c.input_dim] {
            return Err(Error::shape(format!(
                "model input {:?}, expected [{}, {}]",
                x.shape(),
                c.seq_len,
                c.input_dim
            )));
        }
        x.clone().reshape(vec![c.patches, c.patch_dim()])
    }

    /// Exact evaluation of graph layer `op` on `input`. `layer_inputs[j]` is
    /// the input that layer `j` received (needed by residual layers).
    pub fn apply_layer(&self, op: &LayerOp, input: &Tensor, layer_inputs: &[Tensor]) -> Result<Tensor> {
        match *op {
            LayerOp::Linear {
                id,
                relu_input,
                flatten,
            } => {
                let x = linear_input(input, relu_input, flatten)?;
                self.linear(id).forward(&x)
            }
            LayerOp::Norm(id) => layer_norm(input, self.norm(id)),
            LayerOp::Attention { .. } => multi_head_attention(input, self.config.heads),
            LayerOp::Residual { from } => input.add(&layer_inputs[from]),
            LayerOp::Sigmoid => Ok(input.map(sigmoid)),
        }
    }

    /// Outputs of every graph layer for one (already patched) input.
    pub fn forward_layers(&self, patched: &Tensor) -> Result<Vec<Tensor>> {
        let graph = self.graph();
        let mut inputs: Vec<Tensor> = Vec::with_capacity(graph.len());
        let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.len());
        let mut cur = patched.clone();
        for op in &graph {
            inputs.push(cur.clone());
            cur = self.apply_layer(op, &cur, &inputs)?;
            outputs.push(cur.clone());
        }
        Ok(outputs)
    }

    /// Output logits for a raw `T_I x D_I` input.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let patched = self.patch_input(x)?;
        Ok(super::backprop::forward(self, patched.data(), None))
    }

    /// Scaled `T_I x D_I` input for a dataset sample.
    pub fn sample_input(&self, sample: &Sample) -> Tensor {
        sample.features(self.config.input_scale())
    }

    /// Delta-bitmap probabilities for a raw `T_I x D_I` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::vector(self.logits(x)?.into_iter().map(sigmoid).collect()))
    }
}

/// The row-view a linear layer consumes.
pub(crate) fn linear_input(input: &Tensor, relu_input: bool, flatten: bool) -> Result<Tensor> {
    let x = if relu_input { relu(input) } else { input.clone() };
    if flatten {
        let n = x.len();
        x.reshape(vec![1, n])
    } else {
        Ok(x)
    }
}

/// Probabilities for one raw input.
pub fn model_forward(model: &AttentionModel, x: &Tensor) -> Result<Tensor> {
    model.forward(x)
}
