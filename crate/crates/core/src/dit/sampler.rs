//! Euler integration of the learned velocity field from noise (`t = 0`) to data (`t = 1`).

use crate::dit::arch::{IMAGE_PIXELS, IMAGE_TOKENS, PATCH_DIM};
use crate::dit::data::{patchify, tokens_to_images};
use crate::dit::model::{DitModel, GateScales};
use crate::error::{Error, Result};
use crate::numerics::rng::stream;
use crate::numerics::{Rng, Tensor};

/// Anything that predicts a velocity for a `[B·16 × 4]` token batch at a shared time `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, &[usize]) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        self(x, t, classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub class_id: usize,
    pub nfe: usize,
    /// Guidance strength `g`; zero means a single conditional pass.
    pub guidance_scale: f64,
    pub seed: u64,
}

/// Classifier-free guidance combination `v_c + g·(v_c − v_u)`.
pub fn guided(cond: &Tensor, uncond: &Tensor, g: f64) -> Result<Tensor> {
    cond.zip_map(uncond, |c, u| c + g * (c - u))
}

/// Model velocity with gate scales and optional guidance.
pub struct ModelField<'a> {
    pub model: &'a DitModel,
    pub scales: GateScales,
    pub guidance_scale: f64,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a DitModel, guidance_scale: f64) -> Self {
        Self {
            model,
            scales: GateScales::identity(&model.arch),
            guidance_scale,
        }
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        let ts = vec![t; classes.len()];
        let vc = self.model.velocity(x, &ts, classes, &self.scales)?;
        if self.guidance_scale == 0.0 {
            return Ok(vc);
        }
        let null = vec![self.model.arch.null_class(); classes.len()];
        let vu = self.model.velocity(x, &ts, &null, &self.scales)?;
        guided(&vc, &vu, self.guidance_scale)
    }
}

/// Initial noise of one sample as `[16 × 4]` tokens; depends only on `seed`.
pub fn initial_noise(seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed, stream::SAMPLE_NOISE);
    patchify(&rng.normals(IMAGE_PIXELS))
}

/// `nfe` Euler steps of size `1/nfe` starting from `x0`.
pub fn euler_integrate(field: &dyn VelocityField, x0: Tensor, classes: &[usize], nfe: usize) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::Contract("nfe must be at least 1".into()));
    }
    let dt = 1.0 / nfe as f64;
    let mut x = x0;
    for n in 0..nfe {
        let t = n as f64 * dt;
        let v = field.velocity(&x, t, classes)?;
        x = x.zip_map(&v, |x, v| x + dt * v)?.check_finite("euler step")?;
    }
    Ok(x)
}

/// Samples one `[8×8]` image per `(class, seed)` item, integrated as a single batch.
///
/// Every row operation of the model is batch-independent, so each image is
/// bitwise identical to sampling its item alone.
pub fn sample_items(field: &dyn VelocityField, items: &[(usize, u64)], nfe: usize) -> Result<Vec<Tensor>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let mut x0 = Vec::with_capacity(items.len() * IMAGE_PIXELS);
    for &(_, seed) in items {
        x0.extend(initial_noise(seed));
    }
    let x0 = Tensor::new(vec![items.len() * IMAGE_TOKENS, PATCH_DIM], x0)?;
    let classes: Vec<usize> = items.iter().map(|&(c, _)| c).collect();
    let x = euler_integrate(field, x0, &classes, nfe)?;
    Ok(tokens_to_images(&x))
}

/// Draws one image for `req` with the given gate scales.
pub fn euler_sample(model: &DitModel, req: &SampleRequest, scales: &GateScales) -> Result<Tensor> {
    let field = ModelField {
        model,
        scales: scales.clone(),
        guidance_scale: req.guidance_scale,
    };
    let mut out = sample_items(&field, &[(req.class_id, req.seed)], req.nfe)?;
    Ok(out.remove(0))
}
