//! Parameter containers and forward passes for the three zoo families.
//!
//! A [`Model`] owns named parameter tensors in forward order. Every forward
//! pass builds nodes on a caller-supplied tape, so the same model serves
//! training (parameters require gradients) and attack generation (the input
//! requires gradients, parameters are constants).

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::fp::PermutationPlan;
use crate::tensor::Tensor;
use crate::zoo::arch::{ArchSpec, ConvNetSpec, MixerSpec, TransformerSpec};
use rand_chacha::ChaCha8Rng;

/// Feature-permutation request for one forward pass: apply `plans` to the
/// activation leaving 1-based conv block `position`.
pub struct FpApplication<'a> {
    pub position: usize,
    pub plans: &'a [PermutationPlan],
}

/// How a forward pass should treat the graph.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Register parameters as gradient-requiring leaves (training).
    pub train_params: bool,
    /// Route the FP-site activation through these permutation plans.
    pub fp: Option<FpApplication<'a>>,
}

/// Result of one forward construction.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Parameter leaf nodes, populated only when `train_params` was set.
    pub params: Vec<(String, NodeId)>,
    /// The activations immediately before and after the FP layer, when one
    /// was applied (used for feature-map dumps).
    pub fp_boundary: Option<(NodeId, NodeId)>,
}

/// A built model: spec + named parameters in forward order.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchSpec,
    params: Vec<(String, Tensor)>,
}

/// Initialize parameters for `spec`: He-uniform for conv filters and dense
/// weights, zeros for biases, ones for layer-norm gains, small uniform for
/// positional embeddings. Deterministic in the RNG.
pub fn build_model(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        rng,
    };
    match spec {
        ArchSpec::ConvNet(s) => b.conv_net(s),
        ArchSpec::PatchTransformer(s) => b.transformer(s),
        ArchSpec::Mixer(s) => b.mixer(s),
    }
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
    })
}

struct Builder<'a> {
    params: Vec<(String, Tensor)>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let limit = (6.0 / fan_in as f32).sqrt();
        let t = Tensor::uniform(shape, -limit, limit, self.rng);
        self.params.push((name.to_string(), t));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.push((name.to_string(), Tensor::zeros(shape)));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.params.push((name.to_string(), Tensor::full(shape, 1.0)));
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.ones(&format!("{prefix}.gain"), &[dim]);
        self.zeros(&format!("{prefix}.bias"), &[dim]);
    }

    fn dense(&mut self, prefix: &str, input: usize, output: usize) {
        self.he_uniform(&format!("{prefix}.weight"), &[input, output], input);
        self.zeros(&format!("{prefix}.bias"), &[output]);
    }

    fn conv_net(&mut self, s: &ConvNetSpec) {
        let mut in_ch = s.input.channels;
        for (i, block) in s.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            self.he_uniform(&format!("{name}.filter"), &[block.channels, in_ch, 3, 3], in_ch * 9);
            self.zeros(&format!("{name}.bias"), &[block.channels]);
            in_ch = block.channels;
        }
        self.dense("head", in_ch, s.num_classes);
    }

    fn transformer(&mut self, s: &TransformerSpec) {
        let tokens = (s.input.height / s.patch) * (s.input.width / s.patch);
        let feat = s.input.channels * s.patch * s.patch;
        self.dense("embed", feat, s.dim);
        let pos = Tensor::uniform(&[tokens, s.dim], -0.02, 0.02, self.rng);
        self.params.push(("pos".to_string(), pos));
        for i in 0..s.depth {
            let b = format!("block{}", i + 1);
            self.layer_norm(&format!("{b}.ln1"), s.dim);
            for proj in ["wq", "wk", "wv", "wo"] {
                self.he_uniform(&format!("{b}.attn.{proj}"), &[s.dim, s.dim], s.dim);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                self.zeros(&format!("{b}.attn.{bias}"), &[s.dim]);
            }
            self.layer_norm(&format!("{b}.ln2"), s.dim);
            self.dense(&format!("{b}.mlp.fc1"), s.dim, s.mlp_hidden);
            self.dense(&format!("{b}.mlp.fc2"), s.mlp_hidden, s.dim);
        }
        self.layer_norm("final_ln", s.dim);
        self.dense("head", s.dim, s.num_classes);
    }

    fn mixer(&mut self, s: &MixerSpec) {
        let tokens = (s.input.height / s.patch) * (s.input.width / s.patch);
        let feat = s.input.channels * s.patch * s.patch;
        self.dense("embed", feat, s.dim);
        for i in 0..s.depth {
            let b = format!("block{}", i + 1);
            self.layer_norm(&format!("{b}.ln1"), s.dim);
            self.dense(&format!("{b}.token.fc1"), tokens, s.token_hidden);
            self.dense(&format!("{b}.token.fc2"), s.token_hidden, tokens);
            self.layer_norm(&format!("{b}.ln2"), s.dim);
            self.dense(&format!("{b}.channel.fc1"), s.dim, s.channel_hidden);
            self.dense(&format!("{b}.channel.fc2"), s.channel_hidden, s.dim);
        }
        self.layer_norm("final_ln", s.dim);
        self.dense("head", s.dim, s.num_classes);
    }
}

impl Model {
    pub fn from_parts(spec: ArchSpec, params: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        self.spec.name()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Build the forward graph for a `[N,C,H,W]` input node and return the
    /// `[N, num_classes]` logits node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, opts: &ForwardOptions) -> Result<ForwardPass> {
        let dims = self.spec.input();
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != dims.channels || shape[2] != dims.height || shape[3] != dims.width {
            return Err(Error::dim(
                "model_forward",
                format!(
                    "{} expects [N,{},{},{}], got {shape:?}",
                    self.name(),
                    dims.channels,
                    dims.height,
                    dims.width
                ),
            ));
        }
        if let Some(fp) = &opts.fp {
            match &self.spec {
                ArchSpec::ConvNet(s) => {
                    if fp.position == 0 || fp.position > s.blocks.len() {
                        return Err(Error::config(format!(
                            "fp position {} out of range: {} has blocks 1..={}",
                            fp.position,
                            self.name(),
                            s.blocks.len()
                        )));
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "fp layer requires a conv-net host; {} is not one",
                        self.name()
                    )))
                }
            }
        }
        let mut ctx = Forward {
            model: self,
            tape,
            param_nodes: Vec::new(),
            train_params: opts.train_params,
            fp_boundary: None,
        };
        let logits = match &self.spec {
            ArchSpec::ConvNet(s) => ctx.conv_net(s, x, opts.fp.as_ref())?,
            ArchSpec::PatchTransformer(s) => ctx.transformer(s, x)?,
            ArchSpec::Mixer(s) => ctx.mixer(s, x)?,
        };
        Ok(ForwardPass {
            logits,
            params: ctx.param_nodes,
            fp_boundary: ctx.fp_boundary,
        })
    }
}

struct Forward<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    param_nodes: Vec<(String, NodeId)>,
    train_params: bool,
    fp_boundary: Option<(NodeId, NodeId)>,
}

impl Forward<'_> {
    /// Insert the named parameter as a leaf (gradient-requiring iff training).
    fn p(&mut self, name: &str) -> Result<NodeId> {
        let tensor = self
            .model
            .param(name)
            .ok_or_else(|| Error::Invariant(format!("{}: missing parameter '{name}'", self.model.name())))?
            .clone();
        let id = self.tape.leaf(tensor, self.train_params);
        if self.train_params {
            self.param_nodes.push((name.to_string(), id));
        }
        Ok(id)
    }

    /// `x @ W + b` on a 2-D activation.
    fn dense(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_suffix(y, b)
    }

    /// Dense layer applied tokenwise: flattens `[N,T,D_in]` to `[N*T, D_in]`
    /// and returns `[N*T, D_out]` for the caller to reshape.
    fn dense_tokens(&mut self, x: NodeId, prefix: &str, rows: usize, d_in: usize) -> Result<NodeId> {
        let flat = self.tape.reshape(x, &[rows, d_in])?;
        self.dense(flat, prefix)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b)
    }

    fn conv_net(&mut self, s: &ConvNetSpec, x: NodeId, fp: Option<&FpApplication>) -> Result<NodeId> {
        let mut cur = x;
        for (i, block) in s.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let input = cur;
            let f = self.p(&format!("{name}.filter"))?;
            let b = self.p(&format!("{name}.bias"))?;
            let mut y = self.tape.conv2d(cur, f, block.stride, 1)?;
            y = self.tape.add_channel_bias(y, b)?;
            y = self.tape.relu(y)?;
            if block.residual {
                y = self.tape.add(y, input)?;
            }
            if let Some(fp) = fp {
                if fp.position == i + 1 {
                    let before = y;
                    y = self.tape.feature_permutation(y, fp.plans.to_vec())?;
                    self.fp_boundary = Some((before, y));
                }
            }
            cur = y;
        }
        let (c, h, _) = s.block_output_dims(s.blocks.len());
        let pooled = self.tape.avg_pool2d(cur, h, h)?;
        let n = self.tape.value(pooled).shape()[0];
        let flat = self.tape.reshape(pooled, &[n, c])?;
        self.dense(flat, "head")
    }

    fn transformer(&mut self, s: &TransformerSpec, x: NodeId) -> Result<NodeId> {
        let n = self.tape.value(x).shape()[0];
        let t = (s.input.height / s.patch) * (s.input.width / s.patch);
        let feat = s.input.channels * s.patch * s.patch;
        let (d, heads, dh) = (s.dim, s.heads, s.dim / s.heads);

        let patches = self.tape.patchify(x, s.patch)?;
        let embedded = self.dense_tokens(patches, "embed", n * t, feat)?;
        let mut cur = self.tape.reshape(embedded, &[n, t, d])?;
        let pos = self.p("pos")?;
        cur = self.tape.add_suffix(cur, pos)?;

        for i in 0..s.depth {
            let b = format!("block{}", i + 1);
            // Attention sub-block (pre-norm).
            let h1 = self.layer_norm(cur, &format!("{b}.ln1"))?;
            let flat = self.tape.reshape(h1, &[n * t, d])?;
            let mut qkv = Vec::with_capacity(3);
            for (w, bias) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv")] {
                let wn = self.p(&format!("{b}.attn.{w}"))?;
                let bn = self.p(&format!("{b}.attn.{bias}"))?;
                let proj = self.tape.matmul(flat, wn)?;
                let proj = self.tape.add_suffix(proj, bn)?;
                qkv.push(proj);
            }
            // [N*T,D] -> [N, heads, T, dh] -> [N*heads, T, dh]
            let split = |me: &mut Self, v: NodeId| -> Result<NodeId> {
                let r = me.tape.reshape(v, &[n, t, heads, dh])?;
                let p = me.tape.permute(r, &[0, 2, 1, 3])?;
                me.tape.reshape(p, &[n * heads, t, dh])
            };
            let q = split(self, qkv[0])?;
            let k = qkv[1];
            let v = split(self, qkv[2])?;
            // Keys transposed: [N*heads, dh, T].
            let kt = {
                let r = self.tape.reshape(k, &[n, t, heads, dh])?;
                let p = self.tape.permute(r, &[0, 2, 3, 1])?;
                self.tape.reshape(p, &[n * heads, dh, t])?
            };
            let scores = self.tape.batch_matmul(q, kt)?;
            let scores = self.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
            let attn = self.tape.softmax(scores, 2)?;
            let ctx = self.tape.batch_matmul(attn, v)?;
            let merged = {
                let r = self.tape.reshape(ctx, &[n, heads, t, dh])?;
                let p = self.tape.permute(r, &[0, 2, 1, 3])?;
                self.tape.reshape(p, &[n * t, d])?
            };
            let wo = self.p(&format!("{b}.attn.wo"))?;
            let bo = self.p(&format!("{b}.attn.bo"))?;
            let out = self.tape.matmul(merged, wo)?;
            let out = self.tape.add_suffix(out, bo)?;
            let out3 = self.tape.reshape(out, &[n, t, d])?;
            cur = self.tape.add(cur, out3)?;

            // MLP sub-block.
            let h2 = self.layer_norm(cur, &format!("{b}.ln2"))?;
            let flat2 = self.tape.reshape(h2, &[n * t, d])?;
            let fc1 = self.dense(flat2, &format!("{b}.mlp.fc1"))?;
            let act = self.tape.gelu(fc1)?;
            let fc2 = self.dense(act, &format!("{b}.mlp.fc2"))?;
            let mlp3 = self.tape.reshape(fc2, &[n, t, d])?;
            cur = self.tape.add(cur, mlp3)?;
        }
        let normed = self.layer_norm(cur, "final_ln")?;
        let pooled = self.tape.mean_axis(normed, 1)?;
        self.dense(pooled, "head")
    }

    fn mixer(&mut self, s: &MixerSpec, x: NodeId) -> Result<NodeId> {
        let n = self.tape.value(x).shape()[0];
        let t = (s.input.height / s.patch) * (s.input.width / s.patch);
        let feat = s.input.channels * s.patch * s.patch;
        let d = s.dim;

        let patches = self.tape.patchify(x, s.patch)?;
        let embedded = self.dense_tokens(patches, "embed", n * t, feat)?;
        let mut cur = self.tape.reshape(embedded, &[n, t, d])?;

        for i in 0..s.depth {
            let b = format!("block{}", i + 1);
            // Token mixing: act across the token axis per channel.
            let h1 = self.layer_norm(cur, &format!("{b}.ln1"))?;
            let swapped = self.tape.permute(h1, &[0, 2, 1])?;
            let flat = self.tape.reshape(swapped, &[n * d, t])?;
            let fc1 = self.dense(flat, &format!("{b}.token.fc1"))?;
            let act = self.tape.gelu(fc1)?;
            let fc2 = self.dense(act, &format!("{b}.token.fc2"))?;
            let back = self.tape.reshape(fc2, &[n, d, t])?;
            let mixed = self.tape.permute(back, &[0, 2, 1])?;
            cur = self.tape.add(cur, mixed)?;

            // Channel mixing: act across the channel axis per token.
            let h2 = self.layer_norm(cur, &format!("{b}.ln2"))?;
            let flat2 = self.tape.reshape(h2, &[n * t, d])?;
            let fc1 = self.dense(flat2, &format!("{b}.channel.fc1"))?;
            let act = self.tape.gelu(fc1)?;
            let fc2 = self.dense(act, &format!("{b}.channel.fc2"))?;
            let mixed = self.tape.reshape(fc2, &[n, t, d])?;
            cur = self.tape.add(cur, mixed)?;
        }
        let normed = self.layer_norm(cur, "final_ln")?;
        let pooled = self.tape.mean_axis(normed, 1)?;
        self.dense(pooled, "head")
    }
}

/// Index of the largest logit in a row (ties resolve to the first maximum).
pub fn argmax_row(row: &[f32]) -> u8 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u8
}

/// Run inference on a batch: predicted labels plus raw logits. The FP layer
/// is never active here.
pub fn classify(model: &Model, images: &Tensor) -> Result<(Vec<u8>, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = model.forward(&mut tape, x, &ForwardOptions::default())?;
    let logits = tape.value(pass.logits).clone();
    let k = logits.shape()[1];
    let labels = logits.data().chunks_exact(k).map(argmax_row).collect();
    Ok((labels, logits))
}
