//! Rectified-flow training of the toy model with Adam.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dit::arch::{IMAGE_TOKENS, PATCH_DIM};
use crate::dit::data::{sample_data_batch, DEFAULT_PIXEL_NOISE};
use crate::dit::model::{DitModel, GateScales};
use crate::error::{Error, Result};
use crate::numerics::rng::stream;
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of replacing the class with the null class.
    pub cond_dropout: f64,
    pub pixel_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 64,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cond_dropout: 0.1,
            pixel_noise: DEFAULT_PIXEL_NOISE,
        }
    }
}

/// One flow-matching minibatch with all randomness drawn up front.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    /// Data tokens `x₁`, `[B·16 × 4]`.
    pub data: Tensor,
    /// Noise tokens `x₀`.
    pub noise: Tensor,
    pub t: Vec<f64>,
    /// Classes after condition dropout.
    pub classes: Vec<usize>,
}

impl FlowBatch {
    pub fn sample(rng: &mut Rng, model: &DitModel, cfg: &TrainConfig) -> Result<Self> {
        if cfg.batch == 0 {
            return Err(Error::Contract("batch must be nonempty".into()));
        }
        let arch = &model.arch;
        let (data, mut classes) = sample_data_batch(rng, cfg.batch, arch.class_count, cfg.pixel_noise)?;
        let noise = Tensor::new(data.shape().to_vec(), rng.normals(cfg.batch * IMAGE_TOKENS * PATCH_DIM))?;
        let t = (0..cfg.batch).map(|_| rng.uniform()).collect();
        for c in classes.iter_mut() {
            if rng.uniform() < cfg.cond_dropout {
                *c = arch.null_class();
            }
        }
        Ok(Self {
            data,
            noise,
            t,
            classes,
        })
    }

    /// `x_t = (1 − t)·x₀ + t·x₁`.
    pub fn interpolant(&self) -> Tensor {
        let per = IMAGE_TOKENS * PATCH_DIM;
        let mut out = self.noise.clone();
        for (i, (o, x1)) in out.data_mut().iter_mut().zip(self.data.data()).enumerate() {
            let t = self.t[i / per];
            *o = (1.0 - t) * *o + t * x1;
        }
        out
    }

    /// Velocity target `x₁ − x₀`.
    pub fn target(&self) -> Tensor {
        self.data.sub(&self.noise).expect("same shape")
    }
}

/// Records `mean((f(x_t, t, c) − (x₁ − x₀))²)` over all batch elements.
pub fn flow_matching_loss(
    g: &mut Graph,
    model: &DitModel,
    vars: &crate::dit::model::ModelVars,
    batch: &FlowBatch,
) -> Result<Var> {
    let xt = g.constant(batch.interpolant())?;
    let pred = model.forward_graph(
        g,
        vars,
        xt,
        &batch.t,
        &batch.classes,
        &GateScales::identity(&model.arch),
        None,
    )?;
    let target = g.constant(batch.target())?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Loss value without recording gradients.
pub fn evaluate_loss(model: &DitModel, batch: &FlowBatch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let l = flow_matching_loss(&mut g, model, &vars, batch)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

/// Trains `model` in place for `cfg.steps` Adam steps.
pub fn train(model: &mut DitModel, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let mut rng = Rng::new(seed, stream::TRAIN_BATCH);
    let sizes: Vec<usize> = model.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = AdamState {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        step: 0,
    };
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = FlowBatch::sample(&mut rng, model, cfg)?;
        let grads = {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let loss = match flow_matching_loss(&mut g, model, &vars, &batch) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Training { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            report.losses.push(value);
            let grads = g.grad(loss)?;
            vars.ordered
                .iter()
                .map(|&v| grads.get_or_zero(v).into_data())
                .collect::<Vec<_>>()
        };
        adam.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(adam.step);
        let bc2 = 1.0 - cfg.beta2.powi(adam.step);
        for (i, slot) in model.tensors_mut().into_iter().enumerate() {
            let p = Arc::make_mut(slot).data_mut();
            let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
            for (k, gk) in grads[i].iter().enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        if !model.is_finite() {
            return Err(Error::Training { step, loss: f64::NAN });
        }
    }
    Ok(report)
}
