//! Analytic rewards, bucketed candidate evaluation and the diversity metric.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::SearchSpace;
use crate::dit::data::template;
use crate::dit::sampler::{sample_items, VelocityField};
use crate::dit::DitModel;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::numerics::Tensor;

/// Variance below which a correlation is defined as zero.
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    TemplateCorrelation,
    NegMmdRbf { bandwidth: f64 },
    PixelRangePenalty { weight: f64 },
    Composite { terms: Vec<WeightedReward> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedReward {
    pub weight: f64,
    pub reward: RewardSpec,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::Composite {
            terms: vec![
                WeightedReward {
                    weight: 0.8,
                    reward: RewardSpec::TemplateCorrelation,
                },
                WeightedReward {
                    weight: 0.2,
                    reward: RewardSpec::NegMmdRbf { bandwidth: 2.0 },
                },
            ],
        }
    }
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardSpec::TemplateCorrelation => write!(f, "template_correlation"),
            RewardSpec::NegMmdRbf { bandwidth } => write!(f, "neg_mmd_rbf(h={bandwidth})"),
            RewardSpec::PixelRangePenalty { weight } => write!(f, "pixel_range_penalty(w={weight})"),
            RewardSpec::Composite { terms } => {
                write!(f, "composite(")?;
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{}*{}", t.weight, t.reward)?;
                }
                write!(f, ")")
            }
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardSpec::TemplateCorrelation => Ok(()),
            RewardSpec::NegMmdRbf { bandwidth } if *bandwidth > 0.0 && bandwidth.is_finite() => Ok(()),
            RewardSpec::NegMmdRbf { bandwidth } => Err(Error::Contract(format!(
                "MMD bandwidth must be positive, got {bandwidth}"
            ))),
            RewardSpec::PixelRangePenalty { weight } if weight.is_finite() => Ok(()),
            RewardSpec::PixelRangePenalty { weight } => {
                Err(Error::Contract(format!("penalty weight must be finite, got {weight}")))
            }
            RewardSpec::Composite { terms } => terms.iter().try_for_each(|t| {
                if !t.weight.is_finite() {
                    return Err(Error::Contract(format!("composite weight {} is not finite", t.weight)));
                }
                t.reward.validate()
            }),
        }
    }

    fn needs_references(&self) -> bool {
        match self {
            RewardSpec::NegMmdRbf { .. } => true,
            RewardSpec::Composite { terms } => terms.iter().any(|t| t.reward.needs_references()),
            _ => false,
        }
    }

    /// Per-item scores of `images` (each `[8×8]`) drawn for `classes`.
    ///
    /// Set-level terms (MMD) compare all items of one class against that
    /// class's reference set and credit every such item with the result.
    pub fn score(&self, images: &[Tensor], classes: &[usize], references: &[Tensor]) -> Result<Vec<f64>> {
        if images.len() != classes.len() {
            return Err(Error::Contract(format!(
                "{} images for {} classes",
                images.len(),
                classes.len()
            )));
        }
        if self.needs_references() {
            if let Some(&c) = classes.iter().find(|&&c| c >= references.len()) {
                return Err(Error::Contract(format!("no reference set for class {c}")));
            }
        }
        match self {
            RewardSpec::TemplateCorrelation => images
                .iter()
                .zip(classes)
                .map(|(img, &c)| template_correlation(img, c))
                .collect(),
            RewardSpec::NegMmdRbf { bandwidth } => {
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &c) in classes.iter().enumerate() {
                    groups.entry(c).or_default().push(i);
                }
                let mut out = vec![0.0; images.len()];
                for (c, idx) in groups {
                    let set: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
                    let refs = rows(&references[c]);
                    let v = neg_mmd_rbf(&set, &refs, *bandwidth)?;
                    for i in idx {
                        out[i] = v;
                    }
                }
                Ok(out)
            }
            RewardSpec::PixelRangePenalty { weight } => Ok(images
                .iter()
                .map(|img| {
                    let excess = img.data().iter().map(|v| (v.abs() - 1.0).max(0.0).powi(2)).sum::<f64>();
                    -weight * excess / img.len() as f64
                })
                .collect()),
            RewardSpec::Composite { terms } => {
                let mut out = vec![0.0; images.len()];
                for t in terms {
                    let s = t.reward.score(images, classes, references)?;
                    for (o, v) in out.iter_mut().zip(s) {
                        *o += t.weight * v;
                    }
                }
                Ok(out)
            }
        }
    }
}

fn rows(t: &Tensor) -> Vec<Tensor> {
    let cols = t.cols();
    t.data().chunks(cols).map(|r| Tensor::vector(r.to_vec())).collect()
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    (c, var)
}

/// Pearson correlation with the class template; zero for degenerate variance.
pub fn template_correlation(image: &Tensor, class: usize) -> Result<f64> {
    let tpl = template(class)?;
    if image.len() != tpl.len() {
        return Err(Error::Dimension(format!(
            "image has {} pixels, template {}",
            image.len(),
            tpl.len()
        )));
    }
    let (a, va) = centered(image.data());
    let (b, vb) = centered(tpl.data());
    if va < DEGENERATE_VARIANCE || vb < DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_kernel(xs: &[&Tensor], ys: &[&Tensor], h: f64) -> f64 {
    let denom = 2.0 * h * h;
    let mut s = 0.0;
    for x in xs {
        for y in ys {
            s += (-sq_dist(x.data(), y.data()) / denom).exp();
        }
    }
    s / (xs.len() * ys.len()) as f64
}

/// `−MMD²` (biased V-statistic) with RBF kernel of bandwidth `h`.
pub fn neg_mmd_rbf<S, R>(samples: &[S], reference: &[R], bandwidth: f64) -> Result<f64>
where
    S: AsRef<Tensor>,
    R: AsRef<Tensor>,
{
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Contract("MMD needs two nonempty sets".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Contract(format!(
            "MMD bandwidth must be positive, got {bandwidth}"
        )));
    }
    let xs: Vec<&Tensor> = samples.iter().map(|s| s.as_ref()).collect();
    let ys: Vec<&Tensor> = reference.iter().map(|r| r.as_ref()).collect();
    if let Some(t) = xs.iter().chain(&ys).find(|t| t.len() != xs[0].len()) {
        return Err(Error::Dimension(format!(
            "MMD sets mix sizes {} and {}",
            xs[0].len(),
            t.len()
        )));
    }
    let mmd2 =
        mean_kernel(&xs, &xs, bandwidth) + mean_kernel(&ys, &ys, bandwidth) - 2.0 * mean_kernel(&xs, &ys, bandwidth);
    Ok(-mmd2.max(0.0))
}

/// Mean pairwise Euclidean distance divided by `√pixels`.
pub fn diversity_pairwise<S: AsRef<Tensor>>(samples: &[S]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Contract("diversity needs at least two samples".into()));
    }
    let n = samples.len();
    let pixels = samples[0].as_ref().len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += sq_dist(samples[i].as_ref().data(), samples[j].as_ref().data()).sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64 / pixels.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// `(class, seed)` conditions scored together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    items: Vec<(usize, u64)>,
    split: Split,
}

impl Bucket {
    pub fn new(items: Vec<(usize, u64)>, split: Split) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("bucket must hold at least one item".into()));
        }
        let mut seeds: Vec<u64> = items.iter().map(|&(_, s)| s).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("bucket seeds must be distinct".into()));
        }
        Ok(Self { items, split })
    }

    /// Random classes and distinct seeds; train seeds are odd and held-out seeds
    /// even, so the two splits never share a noise draw.
    pub fn sample(rng: &mut Rng, size: usize, class_count: usize, split: Split) -> Result<Self> {
        let parity = match split {
            Split::Train => 1,
            Split::Heldout => 0,
        };
        let mut items = Vec::with_capacity(size);
        let mut used = std::collections::BTreeSet::new();
        while items.len() < size {
            let seed = (rng.next_u64() & !1) | parity;
            if used.insert(seed) {
                items.push((rng.below(class_count), seed));
            }
        }
        Self::new(items, split)
    }

    /// `count` conditions cycling through the classes, with seeds fixed by
    /// `(run_seed, replicate)`.
    pub fn conditions(run_seed: u64, replicate: u64, count: usize, class_count: usize) -> Result<Self> {
        let mut rng = Rng::new(
            run_seed,
            (crate::numerics::rng::stream::CONDITION_SET << 32) | replicate,
        );
        let mut items = Vec::with_capacity(count);
        let mut used = std::collections::BTreeSet::new();
        while items.len() < count {
            let seed = rng.next_u64();
            if used.insert(seed) {
                items.push((items.len() % class_count, seed));
            }
        }
        Self::new(items, Split::Heldout)
    }

    pub fn items(&self) -> &[(usize, u64)] {
        &self.items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> Vec<usize> {
        self.items.iter().map(|&(c, _)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketResult {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sampled images in bucket order.
    pub images: Vec<Tensor>,
}

fn sample_bucket(field: &dyn VelocityField, bucket: &Bucket, nfe: usize) -> Result<Vec<Tensor>> {
    let check = |imgs: Vec<Tensor>, offset: usize| -> Result<Vec<Tensor>> {
        for (i, img) in imgs.iter().enumerate() {
            if !img.is_finite() {
                let (c, s) = bucket.items[offset + i];
                return Err(Error::Evaluation(format!(
                    "non-finite pixels at bucket item {} (class {c}, seed {s})",
                    offset + i
                )));
            }
        }
        Ok(imgs)
    };
    match sample_items(field, &bucket.items, nfe) {
        Ok(imgs) => check(imgs, 0),
        Err(Error::NonFinite(_)) => {
            // Locate the offending item by sampling items alone.
            for (i, item) in bucket.items.iter().enumerate() {
                match sample_items(field, std::slice::from_ref(item), nfe) {
                    Ok(imgs) => {
                        check(imgs, i)?;
                    }
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Evaluation(format!(
                            "non-finite pixels at bucket item {i} (class {}, seed {})",
                            item.0, item.1
                        )))
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Evaluation("non-finite batch with finite items".into()))
        }
        Err(e) => Err(e),
    }
}

/// Samples every bucket item through `field` and scores it.
pub fn evaluate_field(
    field: &dyn VelocityField,
    bucket: &Bucket,
    reward: &RewardSpec,
    references: &[Tensor],
    nfe: usize,
) -> Result<BucketResult> {
    let images = sample_bucket(field, bucket, nfe)?;
    let scores = reward.score(&images, &bucket.classes(), references)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite reward at bucket item {i}")));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(BucketResult { scores, mean, images })
}

/// Evaluates a flat candidate vector of `space` on `bucket`.
pub fn evaluate_candidate(
    candidate: &[f64],
    space: &SearchSpace,
    model: &DitModel,
    bucket: &Bucket,
    reward: &RewardSpec,
    references: &[Tensor],
    nfe: usize,
) -> Result<BucketResult> {
    let field = space.field(model, candidate)?;
    evaluate_field(field.as_ref(), bucket, reward, references, nfe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;

    fn img(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![8, 8], v).unwrap()
    }

    #[test]
    fn correlation_examples() {
        let t = template(1).unwrap();
        assert!((template_correlation(&t, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((template_correlation(&t.scale(-1.0), 1).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(template_correlation(&img(vec![0.3; 64]), 1).unwrap(), 0.0);
        assert!(template_correlation(&t, 4).is_err());
    }

    #[test]
    fn mmd_examples() {
        let a = img((0..64).map(|i| i as f64 / 64.0).collect());
        let b = img(vec![0.1; 64]);
        assert_eq!(neg_mmd_rbf(&[&a, &b], &[&b, &a], 1.5).unwrap(), 0.0);
        let h = 2.0;
        let d2: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let expect = -(2.0 - 2.0 * (-d2 / (2.0 * h * h)).exp());
        assert!((neg_mmd_rbf(&[&a], &[&b], h).unwrap() - expect).abs() < 1e-15);
        let far = img(vec![100.0; 64]);
        assert!((neg_mmd_rbf(&[&far], &[&b], 0.01).unwrap() + 2.0).abs() < 1e-12);
        assert!(neg_mmd_rbf::<&Tensor, &Tensor>(&[], &[&b], 1.0).is_err());
    }

    #[test]
    fn diversity_examples() {
        let a = img(vec![0.2; 64]);
        let b = img(vec![1.2; 64]);
        assert_eq!(diversity_pairwise(&[&a, &a, &a]).unwrap(), 0.0);
        assert!((diversity_pairwise(&[&a, &b]).unwrap() - 1.0).abs() < 1e-15);
        assert!(diversity_pairwise(&[&a]).is_err());
    }

    #[test]
    fn zero_weight_composite_is_constant() {
        let r = RewardSpec::Composite {
            terms: vec![WeightedReward {
                weight: 0.0,
                reward: RewardSpec::TemplateCorrelation,
            }],
        };
        let s = r.score(&[template(0).unwrap()], &[0], &[]).unwrap();
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn penalty_counts_excess_only() {
        let mut v = vec![0.5; 64];
        v[0] = 3.0;
        let s = RewardSpec::PixelRangePenalty { weight: 2.0 }
            .score(&[img(v)], &[0], &[])
            .unwrap();
        assert!((s[0] + 2.0 * 4.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn buckets() {
        assert!(Bucket::new(vec![], Split::Train).is_err());
        assert!(Bucket::new(vec![(0, 1), (1, 1)], Split::Train).is_err());
        let mut rng = Rng::new(3, stream::TEST);
        let tr = Bucket::sample(&mut rng, 16, 4, Split::Train).unwrap();
        let ho = Bucket::sample(&mut rng, 16, 4, Split::Heldout).unwrap();
        assert!(tr.items().iter().all(|&(c, s)| s % 2 == 1 && c < 4));
        assert!(ho.items().iter().all(|&(_, s)| s % 2 == 0));
        let c = Bucket::conditions(1, 0, 8, 4).unwrap();
        assert_eq!(c.classes(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(c, Bucket::conditions(1, 0, 8, 4).unwrap());
        assert_ne!(c, Bucket::conditions(1, 1, 8, 4).unwrap());
    }

    #[test]
    fn reward_spec_toml_roundtrip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W {
            reward: RewardSpec,
        }
        let w = W {
            reward: RewardSpec::default(),
        };
        let text = toml::to_string(&w).unwrap();
        assert_eq!(toml::from_str::<W>(&text).unwrap(), w);
        assert!(RewardSpec::NegMmdRbf { bandwidth: 0.0 }.validate().is_err());
    }
}
