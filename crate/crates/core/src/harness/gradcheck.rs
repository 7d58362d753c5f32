//! Central finite-difference checks of reverse-mode gradients, per layer and
//! for whole models.

use std::sync::Arc;

use crate::dit::model::{dit_block_forward, linear, mmdit_block_forward, MmGateScales, Modulation, StreamVars};
use crate::dit::train::{flow_matching_loss, FlowBatch, TrainConfig};
use crate::dit::{ArchSpec, DitModel, GateScales, Variant};
use crate::error::Result;
use crate::numerics::{Graph, Rng, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitude, relative to `max(1, |loss|)`, below which entries are
/// compared in absolute terms. Central differences carry roundoff of about
/// `ε·|loss|/h`, so exactly-zero gradients read as a few ulps of `loss/2h`.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = MAGNITUDE_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub draws: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|z| z * std).collect()).expect("shape")
}

/// `Σ build(inputs) ⊙ proj`.
fn projected_loss(build: &Build, inputs: &[Tensor], proj: &Tensor, trainable: bool) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| {
            if trainable {
                g.param(Arc::new(t.clone()))
            } else {
                g.constant(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let p = g.constant(proj.clone())?;
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod)?;
    Ok((g, loss, vars))
}

fn loss_value(build: &Build, inputs: &[Tensor], proj: &Tensor) -> Result<f64> {
    let (g, loss, _) = projected_loss(build, inputs, proj, false)?;
    Ok(g.value(loss).item())
}

/// One draw: compares every input entry's gradient against central differences.
fn check_draw(build: &Build, inputs: Vec<Tensor>, rng: &mut Rng) -> Result<(usize, f64)> {
    let shape = {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let proj = random(rng, &shape, 1.0);
    let (g, loss, vars) = projected_loss(build, &inputs, &proj, true)?;
    let grads = g.grad(loss)?;
    let base = g.value(loss).item();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*v);
        for k in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (loss_value(build, &plus, &proj)? - loss_value(build, &minus, &proj)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[k], numeric, base));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn run_case(
    name: &str,
    draws: usize,
    rng: &mut Rng,
    make_inputs: &dyn Fn(&mut Rng) -> Vec<Tensor>,
    build: &Build,
) -> Result<CheckResult> {
    let mut entries = 0;
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let inputs = make_inputs(rng);
        let (n, w) = check_draw(build, inputs, rng)?;
        entries += n;
        worst = worst.max(w);
    }
    Ok(CheckResult {
        name: name.to_string(),
        draws,
        entries,
        max_rel_err: worst,
    })
}

fn stream_vars(vars: &[Var]) -> StreamVars {
    StreamVars {
        mod_hidden: (vars[0], vars[0]),
        mod_out: (vars[0], vars[0]),
        qkv: (vars[0], vars[1]),
        attn_out: (vars[2], vars[3]),
        ff_in: (vars[4], vars[5]),
        ff_out: (vars[6], vars[7]),
    }
}

fn stream_weights(rng: &mut Rng, d: usize, ff: usize) -> Vec<Tensor> {
    vec![
        random(rng, &[d, 3 * d], 0.4),
        random(rng, &[3 * d], 0.1),
        random(rng, &[d, d], 0.4),
        random(rng, &[d], 0.1),
        random(rng, &[d, ff], 0.4),
        random(rng, &[ff], 0.1),
        random(rng, &[ff, d], 0.4),
        random(rng, &[d], 0.1),
    ]
}

fn modulation(g: &mut Graph, m: Var, d: usize) -> Result<Modulation> {
    Modulation::split(g, m, d)
}

/// Per-layer checks; each case contributes `draws` random instantiations.
pub fn layer_checks(seed: u64, draws: usize) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed, crate::numerics::rng::stream::TEST);
    let (b, t, d, heads) = (2usize, 3usize, 4usize, 2usize);
    let mut out = Vec::new();

    out.push(run_case(
        "linear",
        draws,
        &mut rng,
        &|r| {
            vec![
                random(r, &[b * t, d], 1.0),
                random(r, &[d, 5], 0.5),
                random(r, &[5], 0.5),
            ]
        },
        &|g, v| linear(g, v[0], (v[1], v[2])),
    )?);
    out.push(run_case(
        "layer_norm",
        draws,
        &mut rng,
        &|r| vec![random(r, &[b * t, d], 1.0)],
        &|g, v| g.layer_norm(v[0]),
    )?);
    out.push(run_case(
        "silu",
        draws,
        &mut rng,
        &|r| vec![random(r, &[b, d], 1.5)],
        &|g, v| g.silu(v[0]),
    )?);
    out.push(run_case(
        "gelu",
        draws,
        &mut rng,
        &|r| vec![random(r, &[b, d], 1.5)],
        &|g, v| g.gelu(v[0]),
    )?);
    out.push(run_case(
        "modulated_norm",
        draws,
        &mut rng,
        &|r| {
            vec![
                random(r, &[b * t, d], 1.0),
                random(r, &[b, d], 1.0),
                random(r, &[b, d], 1.0),
            ]
        },
        &move |g, v| {
            let n = g.layer_norm(v[0])?;
            let a = g.mul_groups(n, v[1], t)?;
            g.add_groups(a, v[2], t)
        },
    )?);
    out.push(run_case(
        "attention",
        draws,
        &mut rng,
        &|r| vec![random(r, &[b * t, 3 * d], 1.0)],
        &move |g, v| g.attention(v[0], t, heads),
    )?);
    out.push(run_case(
        "gated_residual",
        draws,
        &mut rng,
        &|r| {
            vec![
                random(r, &[b * t, d], 1.0),
                random(r, &[b * t, d], 1.0),
                random(r, &[b, d], 1.0),
            ]
        },
        &move |g, v| {
            let gate = g.scale(v[2], 0.7)?;
            let gh = g.mul_groups(v[1], gate, t)?;
            g.add(v[0], gh)
        },
    )?);
    out.push(run_case(
        "embedding",
        draws,
        &mut rng,
        &|r| {
            vec![
                random(r, &[b * t, d], 1.0),
                random(r, &[t, d], 1.0),
                random(r, &[3, d], 1.0),
            ]
        },
        &move |g, v| {
            let x = g.add_tiled(v[0], v[1])?;
            let c = g.gather_rows(v[2], &[2, 0])?;
            let rep = g.repeat_rows(c, t)?;
            let s = g.add(x, rep)?;
            let head = g.slice_cols(s, 1, 2)?;
            let joint = g.concat_groups(head, t, head, t)?;
            g.slice_groups(joint, 2 * t, 1, t + 1)
        },
    )?);
    let ff = 2 * d;
    out.push(run_case(
        "dit_block",
        draws,
        &mut rng,
        &move |r| {
            let mut v = vec![random(r, &[b * t, d], 1.0), random(r, &[b, 6 * d], 0.7)];
            v.extend(stream_weights(r, d, ff));
            v
        },
        &move |g, v| {
            let m = modulation(g, v[1], d)?;
            let w = stream_vars(&v[2..]);
            dit_block_forward(g, v[0], &m, &w, t, heads, (0.8, 1.3))
        },
    )?);
    let tt = 2usize;
    out.push(run_case(
        "mmdit_block",
        draws,
        &mut rng,
        &move |r| {
            let mut v = vec![
                random(r, &[b * t, d], 1.0),
                random(r, &[b * tt, d], 1.0),
                random(r, &[b, 6 * d], 0.7),
                random(r, &[b, 6 * d], 0.7),
            ];
            v.extend(stream_weights(r, d, ff));
            v.extend(stream_weights(r, d, ff));
            v
        },
        &move |g, v| {
            let mv = modulation(g, v[2], d)?;
            let mt = modulation(g, v[3], d)?;
            let wv = stream_vars(&v[4..12]);
            let wt = stream_vars(&v[12..20]);
            let s = MmGateScales {
                attn_v: 0.9,
                attn_t: 1.1,
                ff_v: 1.2,
                ff_t: 0.6,
            };
            let (xv, xt) = mmdit_block_forward(g, v[0], v[1], &mv, &mt, &wv, &wt, (t, tt), heads, s)?;
            let joint = g.concat_groups(xv, t, xt, tt)?;
            Ok(joint)
        },
    )?);
    Ok(out)
}

fn tiny_arch(variant: Variant) -> ArchSpec {
    ArchSpec {
        variant,
        depth: 2,
        model_dim: 8,
        heads: 2,
        ff_mult: 2,
        text_tokens: 2,
        class_count: 4,
    }
}

/// Flow-matching loss gradients of a small model with perturbed weights,
/// checked on `per_tensor` random entries of every tensor per draw.
pub fn model_check(variant: Variant, seed: u64, draws: usize, per_tensor: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(seed, crate::numerics::rng::stream::TEST);
    let mut entries = 0;
    let mut worst = 0.0f64;
    let cfg = TrainConfig {
        batch: 2,
        ..TrainConfig::default()
    };
    for draw in 0..draws {
        let mut model = DitModel::init(tiny_arch(variant), seed.wrapping_add(draw as u64))?;
        // Open the gates so every block parameter influences the loss.
        for slot in model.tensors_mut() {
            let noise = rng.normals(slot.len());
            for (p, z) in Arc::make_mut(slot).data_mut().iter_mut().zip(noise) {
                *p += 0.2 * z;
            }
        }
        let batch = FlowBatch::sample(&mut rng, &model, &cfg)?;
        let scales = GateScales::new(
            (0..model.arch.depth)
                .map(|_| (0..model.arch.gates_per_block()).map(|_| 0.5 + rng.uniform()).collect())
                .collect(),
        );
        let loss_of = |m: &DitModel| -> Result<f64> {
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false)?;
            let l = scaled_loss(&mut g, m, &vars, &batch, &scales)?;
            Ok(g.value(l).item())
        };
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true)?;
        let loss = scaled_loss(&mut g, &model, &vars, &batch, &scales)?;
        let grads = g.grad(loss)?;
        let base = g.value(loss).item();
        let analytic: Vec<Tensor> = vars.ordered.iter().map(|&v| grads.get_or_zero(v)).collect();
        let count = model.tensors_mut().len();
        for (ti, grad) in analytic.iter().enumerate().take(count) {
            let len = grad.len();
            for _ in 0..per_tensor.min(len) {
                let k = rng.below(len);
                let probe = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    Arc::make_mut(m.tensors_mut()[ti]).data_mut()[k] += delta;
                    loss_of(&m)
                };
                let numeric = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grad.data()[k], numeric, base));
                entries += 1;
            }
        }
    }
    Ok(CheckResult {
        name: format!(
            "model_{}",
            match variant {
                Variant::StandardDit => "standard_dit",
                Variant::MmDit => "mmdit",
            }
        ),
        draws,
        entries,
        max_rel_err: worst,
    })
}

fn scaled_loss(
    g: &mut Graph,
    model: &DitModel,
    vars: &crate::dit::model::ModelVars,
    batch: &FlowBatch,
    scales: &GateScales,
) -> Result<Var> {
    if scales == &GateScales::identity(&model.arch) {
        return flow_matching_loss(g, model, vars, batch);
    }
    let xt = g.constant(batch.interpolant())?;
    let pred = model.forward_graph(g, vars, xt, &batch.t, &batch.classes, scales, None)?;
    let target = g.constant(batch.target())?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Every layer case plus both model variants.
pub fn full_suite(seed: u64, layer_draws: usize, model_draws: usize) -> Result<Vec<CheckResult>> {
    let mut out = layer_checks(seed, layer_draws)?;
    out.push(model_check(Variant::StandardDit, seed, model_draws, 2)?);
    out.push(model_check(Variant::MmDit, seed, model_draws, 2)?);
    Ok(out)
}
