use ditcal::calibration::{Granularity, SearchSpace};
use ditcal::dit::data::{reference_sets, sample_image, template};
use ditcal::dit::sampler::ModelField;
use ditcal::dit::{ArchSpec, DitModel};
use ditcal::numerics::rng::stream;
use ditcal::numerics::{Rng, Tensor};
use ditcal::rewards::{
    diversity_pairwise, evaluate_candidate, evaluate_field, neg_mmd_rbf, template_correlation, Bucket, RewardSpec,
    Split, WeightedReward,
};
use ditcal::Error;

fn image(rng: &mut Rng) -> Tensor {
    Tensor::new(vec![8, 8], rng.normals(64)).unwrap()
}

/// Pearson correlation through raw moment sums.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

#[test]
fn correlation_matches_an_independent_formula() {
    let mut rng = Rng::new(1, stream::TEST);
    for c in 0..4 {
        let tpl = template(c).unwrap();
        for _ in 0..20 {
            let img = image(&mut rng);
            let got = template_correlation(&img, c).unwrap();
            assert!((got - pearson(img.data(), tpl.data())).abs() < 1e-12);
        }
        assert!((template_correlation(&tpl, c).unwrap() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn correlation_is_affine_invariant() {
    let mut rng = Rng::new(2, stream::TEST);
    for _ in 0..50 {
        let img = sample_image(&mut rng, 2, 0.5).unwrap();
        let base = template_correlation(&img, 2).unwrap();
        let a = 0.1 + 5.0 * rng.uniform();
        let b = 4.0 * rng.normal();
        let moved = img.map(|v| a * v + b);
        assert!((template_correlation(&moved, 2).unwrap() - base).abs() < 1e-12);
        let flipped = img.map(|v| -a * v + b);
        assert!((template_correlation(&flipped, 2).unwrap() + base).abs() < 1e-12);
    }
    assert_eq!(
        template_correlation(&Tensor::new(vec![8, 8], vec![0.7; 64]).unwrap(), 0).unwrap(),
        0.0
    );
}

#[test]
fn mmd_of_single_points_has_a_closed_form() {
    let mut rng = Rng::new(3, stream::TEST);
    for _ in 0..20 {
        let (x, y) = (image(&mut rng), image(&mut rng));
        let h = 0.5 + 4.0 * rng.uniform();
        let d2: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let expect = -(2.0 - 2.0 * (-d2 / (2.0 * h * h)).exp());
        assert!((neg_mmd_rbf(&[&x], &[&y], h).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn mmd_properties() {
    let mut rng = Rng::new(4, stream::TEST);
    let xs: Vec<Tensor> = (0..10).map(|_| image(&mut rng)).collect();
    let ys: Vec<Tensor> = (0..12).map(|_| image(&mut rng).map(|v| 0.5 * v + 0.3)).collect();
    assert_eq!(neg_mmd_rbf(&xs, &xs, 2.0).unwrap(), 0.0);
    let a = neg_mmd_rbf(&xs, &ys, 2.0).unwrap();
    let b = neg_mmd_rbf(&ys, &xs, 2.0).unwrap();
    assert!(a < 0.0);
    assert!((a - b).abs() < 1e-14);
    let far: Vec<Tensor> = ys.iter().map(|y| y.map(|v| v + 10.0)).collect();
    assert!(neg_mmd_rbf(&xs, &far, 2.0).unwrap() < a);
    assert!(matches!(
        neg_mmd_rbf::<Tensor, Tensor>(&[], &ys, 2.0),
        Err(Error::Contract(_))
    ));
    assert!(neg_mmd_rbf(&xs, &ys, 0.0).is_err());
}

#[test]
fn composite_is_the_weighted_sum_and_deterministic() {
    let mut rng = Rng::new(5, stream::TEST);
    let refs = reference_sets(5, 4, 8).unwrap();
    let classes = [0, 1, 1, 3, 0, 2];
    let imgs: Vec<Tensor> = classes
        .iter()
        .map(|&c| sample_image(&mut rng, c, 0.4).unwrap())
        .collect();
    let spec = RewardSpec::default();
    let s1 = spec.score(&imgs, &classes, &refs).unwrap();
    assert_eq!(s1, spec.score(&imgs, &classes, &refs).unwrap());
    let corr = RewardSpec::TemplateCorrelation.score(&imgs, &classes, &refs).unwrap();
    let mmd = RewardSpec::NegMmdRbf { bandwidth: 2.0 }
        .score(&imgs, &classes, &refs)
        .unwrap();
    for i in 0..classes.len() {
        assert!((s1[i] - (0.8 * corr[i] + 0.2 * mmd[i])).abs() < 1e-15);
    }
    assert_eq!(mmd[1], mmd[2]);
    assert_eq!(mmd[0], mmd[4]);

    let penalty = RewardSpec::Composite {
        terms: vec![WeightedReward {
            weight: 1.0,
            reward: RewardSpec::PixelRangePenalty { weight: 2.0 },
        }],
    };
    let big = Tensor::new(vec![8, 8], vec![1.5; 64]).unwrap();
    let p = penalty.score(&[big], &[0], &refs).unwrap();
    assert!((p[0] + 2.0 * 0.25).abs() < 1e-15);
    assert!(RewardSpec::NegMmdRbf { bandwidth: 1.0 }
        .score(&imgs, &classes, &refs[..2])
        .is_err());
}

#[test]
fn diversity_of_two_images() {
    let mut rng = Rng::new(6, stream::TEST);
    let (a, b) = (image(&mut rng), image(&mut rng));
    let d = a.sub(&b).unwrap().norm() / 8.0;
    assert!((diversity_pairwise(&[&a, &b]).unwrap() - d).abs() < 1e-14);
    assert_eq!(diversity_pairwise(&[&a, &a, &a]).unwrap(), 0.0);
    assert!(diversity_pairwise(&[&a]).is_err());
}

#[test]
fn buckets_keep_splits_disjoint() {
    let mut rng = Rng::new(7, stream::TEST);
    let train = Bucket::sample(&mut rng, 64, 4, Split::Train).unwrap();
    let held = Bucket::sample(&mut rng, 64, 4, Split::Heldout).unwrap();
    assert!(train.items().iter().all(|&(c, s)| c < 4 && s % 2 == 1));
    assert!(held.items().iter().all(|&(c, s)| c < 4 && s % 2 == 0));
    let a = Bucket::conditions(3, 1, 10, 4).unwrap();
    assert_eq!(a, Bucket::conditions(3, 1, 10, 4).unwrap());
    assert_ne!(a, Bucket::conditions(3, 2, 10, 4).unwrap());
    assert_eq!(a.classes(), vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    assert!(Bucket::new(vec![(0, 5), (1, 5)], Split::Train).is_err());
    assert!(Bucket::new(vec![], Split::Train).is_err());
}

fn small_model() -> DitModel {
    DitModel::init(
        ArchSpec {
            depth: 2,
            model_dim: 8,
            heads: 2,
            ff_mult: 2,
            ..ArchSpec::default()
        },
        8,
    )
    .unwrap()
}

#[test]
fn identity_candidate_matches_the_plain_sampler() {
    let m = small_model();
    let refs = reference_sets(1, 4, 8).unwrap();
    let bucket = Bucket::conditions(1, 0, 8, 4).unwrap();
    let reward = RewardSpec::default();
    let plain = evaluate_field(&ModelField::new(&m, 0.0), &bucket, &reward, &refs, 4).unwrap();
    for g in Granularity::ALL {
        let space = SearchSpace::single(m.arch.clone(), g);
        let r = evaluate_candidate(&space.identity_point(), &space, &m, &bucket, &reward, &refs, 4).unwrap();
        assert_eq!(r, plain);
    }
    let mean = plain.scores.iter().sum::<f64>() / plain.scores.len() as f64;
    assert_eq!(plain.mean, mean);
    assert_eq!(plain.images.len(), 8);
}

#[test]
fn a_diverging_item_is_named() {
    let m = small_model();
    let refs = reference_sets(1, 4, 8).unwrap();
    let field = |x: &Tensor, t: f64, classes: &[usize]| {
        let mut v = m.velocity(
            x,
            &vec![t; classes.len()],
            classes,
            &ditcal::dit::GateScales::identity(&m.arch),
        )?;
        let cols = v.cols();
        for (row, chunk) in v.data_mut().chunks_mut(16 * cols).enumerate() {
            if classes[row] == 3 {
                chunk[0] = f64::NAN;
            }
        }
        Ok(v)
    };
    let bucket = Bucket::new(vec![(0, 11), (1, 12), (3, 13), (2, 14)], Split::Train).unwrap();
    match evaluate_field(&field, &bucket, &RewardSpec::default(), &refs, 4) {
        Err(Error::Evaluation(msg)) => assert!(msg.contains("item 2"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}
