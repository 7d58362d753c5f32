//! Procedural 8×8 shape classes and the token layout shared by the model and sampler.

use crate::dit::arch::{IMAGE_PIXELS, IMAGE_SIDE, IMAGE_TOKENS, PATCH_DIM, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["disk", "cross", "bar_h", "bar_v"];

/// Pixel noise standard deviation of the training data.
pub const DEFAULT_PIXEL_NOISE: f64 = 0.05;

/// Noise-free template of `class`: +1 on the shape, −1 on the background.
pub fn template(class: usize) -> Result<Tensor> {
    if class >= CLASS_NAMES.len() {
        return Err(Error::Contract(format!("class {class} has no template")));
    }
    let mut img = vec![-1.0; IMAGE_PIXELS];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let on = match class {
                0 => {
                    let (dr, dc) = (r as f64 - 3.5, c as f64 - 3.5);
                    dr * dr + dc * dc <= 9.0
                }
                1 => (3..=4).contains(&r) || (3..=4).contains(&c),
                2 => (3..=4).contains(&r),
                _ => (3..=4).contains(&c),
            };
            if on {
                img[r * IMAGE_SIDE + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], img)
}

/// `[8×8]` image → `[16×4]` patch tokens (row-major patches, row-major pixels within).
pub fn patchify(image: &[f64]) -> Vec<f64> {
    let per_row = IMAGE_SIDE / PATCH_SIDE;
    let mut out = vec![0.0; IMAGE_PIXELS];
    for pr in 0..per_row {
        for pc in 0..per_row {
            let tok = pr * per_row + pc;
            for i in 0..PATCH_SIDE {
                for j in 0..PATCH_SIDE {
                    let px = (pr * PATCH_SIDE + i) * IMAGE_SIDE + pc * PATCH_SIDE + j;
                    out[tok * PATCH_DIM + i * PATCH_SIDE + j] = image[px];
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &[f64]) -> Vec<f64> {
    let per_row = IMAGE_SIDE / PATCH_SIDE;
    let mut out = vec![0.0; IMAGE_PIXELS];
    for pr in 0..per_row {
        for pc in 0..per_row {
            let tok = pr * per_row + pc;
            for i in 0..PATCH_SIDE {
                for j in 0..PATCH_SIDE {
                    let px = (pr * PATCH_SIDE + i) * IMAGE_SIDE + pc * PATCH_SIDE + j;
                    out[px] = tokens[tok * PATCH_DIM + i * PATCH_SIDE + j];
                }
            }
        }
    }
    out
}

/// Splits a `[B·16 × 4]` token batch into `B` images of shape `[8×8]`.
pub fn tokens_to_images(tokens: &Tensor) -> Vec<Tensor> {
    tokens
        .data()
        .chunks(IMAGE_TOKENS * PATCH_DIM)
        .map(|c| Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], unpatchify(c)).expect("shape"))
        .collect()
}

/// Template plus i.i.d. Gaussian pixel noise.
pub fn sample_image(rng: &mut Rng, class: usize, noise: f64) -> Result<Tensor> {
    let mut t = template(class)?;
    for v in t.data_mut() {
        *v += noise * rng.normal();
    }
    Ok(t)
}

/// Data batch as `[B·16 × 4]` tokens with uniformly drawn classes.
pub fn sample_data_batch(rng: &mut Rng, batch: usize, class_count: usize, noise: f64) -> Result<(Tensor, Vec<usize>)> {
    let mut tokens = Vec::with_capacity(batch * IMAGE_PIXELS);
    let mut classes = Vec::with_capacity(batch);
    for _ in 0..batch {
        let c = rng.below(class_count);
        let img = sample_image(rng, c, noise)?;
        tokens.extend(patchify(img.data()));
        classes.push(c);
    }
    Ok((Tensor::new(vec![batch * IMAGE_TOKENS, PATCH_DIM], tokens)?, classes))
}

/// Reference images per class, `[n × 64]` each, for distribution-level rewards.
pub fn reference_sets(seed: u64, class_count: usize, per_class: usize) -> Result<Vec<Tensor>> {
    let mut rng = Rng::new(seed, crate::numerics::rng::stream::REFERENCE_SET);
    (0..class_count)
        .map(|c| {
            let mut rows = Vec::with_capacity(per_class * IMAGE_PIXELS);
            for _ in 0..per_class {
                rows.extend_from_slice(sample_image(&mut rng, c, DEFAULT_PIXEL_NOISE)?.data());
            }
            Tensor::new(vec![per_class, IMAGE_PIXELS], rows)
        })
        .collect()
}
