//! Toy flow-matching diffusion transformer.
//!
//! Both block types follow the adaptive-LayerNorm pattern: a per-block MLP
//! maps the conditioning vector to `(α₁, β₁, γ₁, α₂, β₂, γ₂)` and each layer
//! computes `x + s·γ ∘ F(α ∘ LN(x) + β)`, where `s` is the calibration scale
//! of that gate. With `s = 0` the residual path bypasses the layer exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dit::arch::{ArchSpec, Variant, IMAGE_TOKENS, PATCH_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Affine layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Arc<Tensor>,
    pub b: Arc<Tensor>,
}

impl Linear {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let w = rng.normals(fan_in * fan_out).into_iter().map(|z| z * std).collect();
        Self {
            w: Arc::new(Tensor::new(vec![fan_in, fan_out], w).expect("shape")),
            b: Arc::new(Tensor::zeros(&[fan_out])),
        }
    }

    fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self::init(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Weights of one token stream inside a block.
#[derive(Clone, Debug)]
pub struct StreamWeights {
    /// Conditioning → hidden.
    pub mod_hidden: Linear,
    /// Hidden → `(α₁, β₁, γ₁, α₂, β₂, γ₂)`, each `model_dim` wide.
    pub mod_out: Linear,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    /// One stream for the standard block, `[visual, text]` for MM-DiT.
    pub streams: Vec<StreamWeights>,
}

#[derive(Clone, Debug)]
pub struct DitModel {
    pub arch: ArchSpec,
    pub patch: Linear,
    pub pos: Arc<Tensor>,
    pub time_hidden: Linear,
    pub time_out: Linear,
    pub class_table: Arc<Tensor>,
    /// Positional rows for the text stream (MM-DiT only).
    pub text_pos: Option<Arc<Tensor>>,
    pub blocks: Vec<BlockWeights>,
    pub final_mod: Linear,
    pub final_out: Linear,
}

/// Per-gate scale assignment: for every block, `[attn, ff]` (standard) or
/// `[attn_v, attn_t, ff_v, ff_t]` (MM-DiT).
#[derive(Clone, Debug, PartialEq)]
pub struct GateScales {
    per_block: Vec<Vec<f64>>,
}

impl GateScales {
    pub fn identity(arch: &ArchSpec) -> Self {
        Self {
            per_block: vec![vec![1.0; arch.gates_per_block()]; arch.depth],
        }
    }

    pub fn new(per_block: Vec<Vec<f64>>) -> Self {
        Self { per_block }
    }

    /// Every gate of `block` set to `s`, the rest identity.
    pub fn with_block(arch: &ArchSpec, block: usize, s: f64) -> Self {
        let mut g = Self::identity(arch);
        g.per_block[block].iter_mut().for_each(|v| *v = s);
        g
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.per_block
    }

    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        if self.per_block.len() != arch.depth {
            return Err(Error::CalibrationShape(format!(
                "gate scales cover {} blocks, model has {}",
                self.per_block.len(),
                arch.depth
            )));
        }
        for (i, b) in self.per_block.iter().enumerate() {
            if b.len() != arch.gates_per_block() {
                return Err(Error::CalibrationShape(format!(
                    "block {i} has {} gate scales, expected {}",
                    b.len(),
                    arch.gates_per_block()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::CalibrationShape(format!("block {i} has a non-finite scale")));
            }
        }
        Ok(())
    }

    /// `(attention, feed-forward)` scales of `stream` in `block`.
    fn stream_scales(&self, block: usize, stream: usize, streams: usize) -> (f64, f64) {
        let b = &self.per_block[block];
        (b[stream], b[streams + stream])
    }
}

/// `(α₁, β₁, γ₁, α₂, β₂, γ₂)` as graph nodes, each `[B × d]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub alpha1: Var,
    pub beta1: Var,
    pub gamma1: Var,
    pub alpha2: Var,
    pub beta2: Var,
    pub gamma2: Var,
}

impl Modulation {
    /// Splits a `[B × 6d]` node into its six chunks.
    pub fn split(g: &mut Graph, m: Var, d: usize) -> Result<Self> {
        Ok(Self {
            alpha1: g.slice_cols(m, 0, d)?,
            beta1: g.slice_cols(m, d, d)?,
            gamma1: g.slice_cols(m, 2 * d, d)?,
            alpha2: g.slice_cols(m, 3 * d, d)?,
            beta2: g.slice_cols(m, 4 * d, d)?,
            gamma2: g.slice_cols(m, 5 * d, d)?,
        })
    }
}

/// Graph handles of one stream's layer weights.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub mod_hidden: (Var, Var),
    pub mod_out: (Var, Var),
    pub qkv: (Var, Var),
    pub attn_out: (Var, Var),
    pub ff_in: (Var, Var),
    pub ff_out: (Var, Var),
}

/// Graph handles for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub patch: (Var, Var),
    pub pos: Var,
    pub time_hidden: (Var, Var),
    pub time_out: (Var, Var),
    pub class_table: Var,
    pub text_pos: Option<Var>,
    pub blocks: Vec<Vec<StreamVars>>,
    pub final_mod: (Var, Var),
    pub final_out: (Var, Var),
    /// Every tensor in [`DitModel::visit`] order.
    pub ordered: Vec<Var>,
}

pub fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// `α ∘ LN(x) + β`, with the modulation rows broadcast over groups of `group` tokens.
fn modulated_norm(g: &mut Graph, x: Var, alpha: Var, beta: Var, group: usize) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let a = g.mul_groups(n, alpha, group)?;
    g.add_groups(a, beta, group)
}

/// `x + (s·γ) ∘ h`.
fn gated_residual(g: &mut Graph, x: Var, h: Var, gamma: Var, s: f64, group: usize) -> Result<Var> {
    let gate = g.scale(gamma, s)?;
    let gh = g.mul_groups(h, gate, group)?;
    g.add(x, gh)
}

fn feed_forward(g: &mut Graph, h: Var, w: &StreamVars) -> Result<Var> {
    let a = linear(g, h, w.ff_in)?;
    let a = g.gelu(a)?;
    linear(g, a, w.ff_out)
}

/// Standard DiT block over `[B·T × d]` tokens.
pub fn dit_block_forward(
    g: &mut Graph,
    x: Var,
    m: &Modulation,
    w: &StreamVars,
    tokens: usize,
    heads: usize,
    (s_attn, s_ff): (f64, f64),
) -> Result<Var> {
    let h = modulated_norm(g, x, m.alpha1, m.beta1, tokens)?;
    let qkv = linear(g, h, w.qkv)?;
    let att = g.attention(qkv, tokens, heads)?;
    let o = linear(g, att, w.attn_out)?;
    let x = gated_residual(g, x, o, m.gamma1, s_attn, tokens)?;

    let h = modulated_norm(g, x, m.alpha2, m.beta2, tokens)?;
    let f = feed_forward(g, h, w)?;
    gated_residual(g, x, f, m.gamma2, s_ff, tokens)
}

/// Scales of the four MM-DiT gates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmGateScales {
    pub attn_v: f64,
    pub attn_t: f64,
    pub ff_v: f64,
    pub ff_t: f64,
}

impl MmGateScales {
    pub const IDENTITY: Self = Self {
        attn_v: 1.0,
        attn_t: 1.0,
        ff_v: 1.0,
        ff_t: 1.0,
    };
}

/// MM-DiT block: per-stream modulation and projections, joint attention over
/// the concatenated `[visual ; text]` sequence of every sample.
#[allow(clippy::too_many_arguments)]
pub fn mmdit_block_forward(
    g: &mut Graph,
    xv: Var,
    xt: Var,
    mv: &Modulation,
    mt: &Modulation,
    wv: &StreamVars,
    wt: &StreamVars,
    (tv, tt): (usize, usize),
    heads: usize,
    s: MmGateScales,
) -> Result<(Var, Var)> {
    let hv = modulated_norm(g, xv, mv.alpha1, mv.beta1, tv)?;
    let ht = modulated_norm(g, xt, mt.alpha1, mt.beta1, tt)?;
    let qkv_v = linear(g, hv, wv.qkv)?;
    let qkv_t = linear(g, ht, wt.qkv)?;
    let joint = g.concat_groups(qkv_v, tv, qkv_t, tt)?;
    let att = g.attention(joint, tv + tt, heads)?;
    let av = g.slice_groups(att, tv + tt, 0, tv)?;
    let at = g.slice_groups(att, tv + tt, tv, tt)?;
    let ov = linear(g, av, wv.attn_out)?;
    let ot = linear(g, at, wt.attn_out)?;
    let xv = gated_residual(g, xv, ov, mv.gamma1, s.attn_v, tv)?;
    let xt = gated_residual(g, xt, ot, mt.gamma1, s.attn_t, tt)?;

    // Each stream's feed-forward reads its own tokens.
    let hv = modulated_norm(g, xv, mv.alpha2, mv.beta2, tv)?;
    let fv = feed_forward(g, hv, wv)?;
    let xv = gated_residual(g, xv, fv, mv.gamma2, s.ff_v, tv)?;
    let ht = modulated_norm(g, xt, mt.alpha2, mt.beta2, tt)?;
    let ft = feed_forward(g, ht, wt)?;
    let xt = gated_residual(g, xt, ft, mt.gamma2, s.ff_t, tt)?;
    Ok((xv, xt))
}

/// Sinusoidal embedding of `t ∈ [0, 1]`, `[B × dim]`.
pub fn time_embedding(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = 1000.0 * ti;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((arg * f).cos(), (arg * f).sin())).unzip();
        out.extend(cos);
        out.extend(sin);
    }
    Tensor::new(vec![t.len(), dim], out).expect("shape")
}

impl DitModel {
    /// Randomly initialized model.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::new(seed, crate::numerics::rng::stream::WEIGHT_INIT);
        let d = arch.model_dim;
        let normal = |rng: &mut Rng, shape: &[usize], std: f64| {
            let n = shape.iter().product();
            Arc::new(Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|z| z * std).collect()).expect("shape"))
        };
        let patch = Linear::xavier(&mut rng, PATCH_DIM, d);
        let pos = normal(&mut rng, &[IMAGE_TOKENS, d], 0.1);
        let time_hidden = Linear::xavier(&mut rng, d, d);
        let time_out = Linear::xavier(&mut rng, d, d);
        let class_table = normal(&mut rng, &[arch.class_count + 1, d], 1.0);
        let text_pos = match arch.variant {
            Variant::MmDit => Some(normal(&mut rng, &[arch.text_tokens, d], 0.1)),
            Variant::StandardDit => None,
        };
        let mut blocks = Vec::with_capacity(arch.depth);
        for _ in 0..arch.depth {
            let streams = (0..arch.streams())
                .map(|_| {
                    let mod_hidden = Linear::xavier(&mut rng, d, d);
                    let mut mod_out = Linear::init(&mut rng, d, 6 * d, 0.02);
                    // α starts at one, β and γ at zero.
                    let mut bias = vec![0.0; 6 * d];
                    bias[..d].fill(1.0);
                    bias[3 * d..4 * d].fill(1.0);
                    mod_out.b = Arc::new(Tensor::vector(bias));
                    StreamWeights {
                        mod_hidden,
                        mod_out,
                        qkv: Linear::xavier(&mut rng, d, 3 * d),
                        attn_out: Linear::xavier(&mut rng, d, d),
                        ff_in: Linear::xavier(&mut rng, d, arch.ff_dim()),
                        ff_out: Linear::xavier(&mut rng, arch.ff_dim(), d),
                    }
                })
                .collect();
            blocks.push(BlockWeights { streams });
        }
        let final_mod = {
            let mut l = Linear::init(&mut rng, d, 2 * d, 0.02);
            let mut bias = vec![0.0; 2 * d];
            bias[..d].fill(1.0);
            l.b = Arc::new(Tensor::vector(bias));
            l
        };
        let final_out = Linear::init(&mut rng, d, PATCH_DIM, 0.02);
        Ok(Self {
            arch,
            patch,
            pos,
            time_hidden,
            time_out,
            class_table,
            text_pos,
            blocks,
            final_mod,
            final_out,
        })
    }

    /// Visits every tensor with a stable name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Arc<Tensor>)) {
        let lin = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &Arc<Tensor>)| {
            f(&format!("{name}.w"), &l.w);
            f(&format!("{name}.b"), &l.b);
        };
        lin("patch", &self.patch, &mut f);
        f("pos", &self.pos);
        lin("time.hidden", &self.time_hidden, &mut f);
        lin("time.out", &self.time_out, &mut f);
        f("class.table", &self.class_table);
        if let Some(tp) = &self.text_pos {
            f("text.pos", tp);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (s, w) in b.streams.iter().enumerate() {
                let p = stream_prefix(i, s, self.arch.variant);
                lin(&format!("{p}.mod.hidden"), &w.mod_hidden, &mut f);
                lin(&format!("{p}.mod.out"), &w.mod_out, &mut f);
                lin(&format!("{p}.attn.qkv"), &w.qkv, &mut f);
                lin(&format!("{p}.attn.out"), &w.attn_out, &mut f);
                lin(&format!("{p}.ff.in"), &w.ff_in, &mut f);
                lin(&format!("{p}.ff.out"), &w.ff_out, &mut f);
            }
        }
        lin("final.mod", &self.final_mod, &mut f);
        lin("final.out", &self.final_out, &mut f);
    }

    /// Mutable access to every tensor, in [`visit`](Self::visit) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out: Vec<&mut Arc<Tensor>> = Vec::new();
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut Arc<Tensor>>) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        lin(&mut self.patch, &mut out);
        out.push(&mut self.pos);
        lin(&mut self.time_hidden, &mut out);
        lin(&mut self.time_out, &mut out);
        out.push(&mut self.class_table);
        if let Some(tp) = &mut self.text_pos {
            out.push(tp);
        }
        for b in &mut self.blocks {
            for w in &mut b.streams {
                lin(&mut w.mod_hidden, &mut out);
                lin(&mut w.mod_out, &mut out);
                lin(&mut w.qkv, &mut out);
                lin(&mut w.attn_out, &mut out);
                lin(&mut w.ff_in, &mut out);
                lin(&mut w.ff_out, &mut out);
            }
        }
        lin(&mut self.final_mod, &mut out);
        lin(&mut self.final_out, &mut out);
        out
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Arc<Tensor>> {
        let mut m = BTreeMap::new();
        self.visit(|n, t| {
            m.insert(n.to_string(), Arc::clone(t));
        });
        m
    }

    /// Names in visit order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit(|n, _| v.push(n.to_string()));
        v
    }

    /// Replaces tensors by name; every model tensor must be present with its shape.
    pub fn load_named(&mut self, table: &BTreeMap<String, Tensor>) -> Result<()> {
        let names = self.tensor_names();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let t = table
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.is_finite());
        ok
    }

    /// Places every tensor on `g`, trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let mut ordered = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Arc<Tensor>| -> Result<Var> {
            let v = if trainable {
                g.param(Arc::clone(t))?
            } else {
                g.constant(Arc::clone(t))?
            };
            ordered.push(v);
            Ok(v)
        };
        let lin = |g: &mut Graph,
                   l: &Linear,
                   leaf: &mut dyn FnMut(&mut Graph, &Arc<Tensor>) -> Result<Var>|
         -> Result<(Var, Var)> { Ok((leaf(g, &l.w)?, leaf(g, &l.b)?)) };
        let patch = lin(g, &self.patch, &mut leaf)?;
        let pos = leaf(g, &self.pos)?;
        let time_hidden = lin(g, &self.time_hidden, &mut leaf)?;
        let time_out = lin(g, &self.time_out, &mut leaf)?;
        let class_table = leaf(g, &self.class_table)?;
        let text_pos = match &self.text_pos {
            Some(tp) => Some(leaf(g, tp)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut streams = Vec::with_capacity(b.streams.len());
            for w in &b.streams {
                streams.push(StreamVars {
                    mod_hidden: lin(g, &w.mod_hidden, &mut leaf)?,
                    mod_out: lin(g, &w.mod_out, &mut leaf)?,
                    qkv: lin(g, &w.qkv, &mut leaf)?,
                    attn_out: lin(g, &w.attn_out, &mut leaf)?,
                    ff_in: lin(g, &w.ff_in, &mut leaf)?,
                    ff_out: lin(g, &w.ff_out, &mut leaf)?,
                });
            }
            blocks.push(streams);
        }
        let final_mod = lin(g, &self.final_mod, &mut leaf)?;
        let final_out = lin(g, &self.final_out, &mut leaf)?;
        Ok(ModelVars {
            patch,
            pos,
            time_hidden,
            time_out,
            class_table,
            text_pos,
            blocks,
            final_mod,
            final_out,
            ordered,
        })
    }

    /// Records the full forward pass on `g`.
    ///
    /// `x` holds `[B·16 × 4]` patch tokens, `t` and `classes` one entry per
    /// sample. Blocks flagged in `skip` are left out of the computation.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        x: Var,
        t: &[f64],
        classes: &[usize],
        scales: &GateScales,
        skip: Option<&[bool]>,
    ) -> Result<Var> {
        let arch = &self.arch;
        scales.check(arch)?;
        let b = t.len();
        if classes.len() != b {
            return Err(Error::Dimension(format!(
                "{} classes for {b} time values",
                classes.len()
            )));
        }
        if g.value(x).shape() != [b * IMAGE_TOKENS, PATCH_DIM] {
            return Err(Error::Dimension(format!(
                "expected tokens of shape [{}, {PATCH_DIM}], got {:?}",
                b * IMAGE_TOKENS,
                g.value(x).shape()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > arch.null_class()) {
            return Err(Error::Dimension(format!("class id {c} out of range")));
        }
        if t.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("time input".into()));
        }
        let d = arch.model_dim;

        let h = linear(g, x, v.patch)?;
        let mut xv = g.add_tiled(h, v.pos)?;

        let te = g.constant(time_embedding(t, d))?;
        let te = linear(g, te, v.time_hidden)?;
        let te = g.silu(te)?;
        let temb = linear(g, te, v.time_out)?;
        let cemb = g.gather_rows(v.class_table, classes)?;
        let cond = g.add(temb, cemb)?;

        let modulation = |g: &mut Graph, c: Var, w: &StreamVars| -> Result<Modulation> {
            let hdn = linear(g, c, w.mod_hidden)?;
            let hdn = g.silu(hdn)?;
            let m = linear(g, hdn, w.mod_out)?;
            Modulation::split(g, m, d)
        };

        match arch.variant {
            Variant::StandardDit => {
                for (i, bw) in v.blocks.iter().enumerate() {
                    if skip.is_some_and(|s| s[i]) {
                        continue;
                    }
                    let m = modulation(g, cond, &bw[0])?;
                    let s = scales.stream_scales(i, 0, 1);
                    xv = dit_block_forward(g, xv, &m, &bw[0], IMAGE_TOKENS, arch.heads, s)?;
                }
            }
            Variant::MmDit => {
                let tt = arch.text_tokens;
                let tpos = v.text_pos.expect("MM-DiT binds text positions");
                let rep = g.repeat_rows(cemb, tt)?;
                let mut xt = g.add_tiled(rep, tpos)?;
                for (i, bw) in v.blocks.iter().enumerate() {
                    if skip.is_some_and(|s| s[i]) {
                        continue;
                    }
                    let mv = modulation(g, cond, &bw[0])?;
                    let mt = modulation(g, temb, &bw[1])?;
                    let (attn_v, ff_v) = scales.stream_scales(i, 0, 2);
                    let (attn_t, ff_t) = scales.stream_scales(i, 1, 2);
                    let s = MmGateScales {
                        attn_v,
                        attn_t,
                        ff_v,
                        ff_t,
                    };
                    (xv, xt) =
                        mmdit_block_forward(g, xv, xt, &mv, &mt, &bw[0], &bw[1], (IMAGE_TOKENS, tt), arch.heads, s)?;
                }
                // The text stream's final state is not decoded.
                let _ = xt;
            }
        }

        let c = g.silu(cond)?;
        let fm = linear(g, c, v.final_mod)?;
        let alpha = g.slice_cols(fm, 0, d)?;
        let beta = g.slice_cols(fm, d, d)?;
        let h = modulated_norm(g, xv, alpha, beta, IMAGE_TOKENS)?;
        linear(g, h, v.final_out)
    }

    /// Velocity prediction `[B·16 × 4]` for a batch of token grids.
    pub fn velocity(&self, x: &Tensor, t: &[f64], classes: &[usize], scales: &GateScales) -> Result<Tensor> {
        self.velocity_masked(x, t, classes, scales, None)
    }

    /// As [`velocity`](Self::velocity) with the blocks flagged in `skip` removed.
    pub fn velocity_masked(
        &self,
        x: &Tensor,
        t: &[f64],
        classes: &[usize],
        scales: &GateScales,
        skip: Option<&[bool]>,
    ) -> Result<Tensor> {
        if let Some(s) = skip {
            if s.len() != self.arch.depth {
                return Err(Error::Dimension("skip mask length differs from depth".into()));
            }
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = self.forward_graph(&mut g, &vars, xv, t, classes, scales, skip)?;
        Ok(g.value(out).clone())
    }
}

fn stream_prefix(block: usize, stream: usize, variant: Variant) -> String {
    match variant {
        Variant::StandardDit => format!("block{block:02}"),
        Variant::MmDit => format!("block{block:02}.{}", ["v", "t"][stream]),
    }
}
