use std::sync::Arc;

use ditcal::calibration::{
    calibrated_forward, dimension, ensemble_velocity, CalibrationSidecar, CalibrationVector, ConditionRole,
    EnsembleMember, EnsembleSpec, Granularity, SearchSpace,
};
use ditcal::dit::data::unpatchify;
use ditcal::dit::sampler::{guided, initial_noise, sample_items, ModelField};
use ditcal::dit::{ArchSpec, DitModel, GateScales, Variant};
use ditcal::numerics::rng::stream;
use ditcal::numerics::{Rng, Tensor};
use ditcal::Error;

fn arch(variant: Variant) -> ArchSpec {
    ArchSpec {
        variant,
        depth: 3,
        model_dim: 8,
        heads: 2,
        ff_mult: 2,
        ..ArchSpec::default()
    }
}

fn model(variant: Variant, seed: u64) -> DitModel {
    let mut m = DitModel::init(arch(variant), seed).unwrap();
    let mut rng = Rng::new(seed, stream::TEST);
    for slot in m.tensors_mut() {
        let z = rng.normals(slot.len());
        for (p, z) in Arc::make_mut(slot).data_mut().iter_mut().zip(z) {
            *p += 0.1 * z;
        }
    }
    m
}

struct Triple {
    x: Tensor,
    t: Vec<f64>,
    c: Vec<usize>,
}

fn triple(rng: &mut Rng, batch: usize, classes: usize) -> Triple {
    Triple {
        x: Tensor::new(vec![batch * 16, 4], rng.normals(batch * 64)).unwrap(),
        t: (0..batch).map(|_| rng.uniform()).collect(),
        c: (0..batch).map(|_| rng.below(classes + 1)).collect(),
    }
}

fn random_vector(rng: &mut Rng, g: Granularity, arch: &ArchSpec) -> CalibrationVector {
    let flat: Vec<f64> = (0..dimension(g, arch)).map(|_| 0.5 + rng.uniform()).collect();
    CalibrationVector::from_flat(&flat, g, arch).unwrap()
}

#[test]
fn dimensions_follow_granularity_and_variant() {
    for (variant, gate) in [(Variant::StandardDit, 7), (Variant::MmDit, 13)] {
        let a = arch(variant);
        assert_eq!(dimension(Granularity::Block, &a), 4);
        assert_eq!(dimension(Granularity::Layer, &a), 7);
        assert_eq!(dimension(Granularity::Gate, &a), gate);
    }
    let a = ArchSpec {
        variant: Variant::MmDit,
        ..ArchSpec::default()
    };
    assert_eq!(dimension(Granularity::Gate, &a), 4 * a.depth + 1);
    assert_eq!(dimension(Granularity::Layer, &a), 2 * a.depth + 1);
}

#[test]
fn identity_calibration_is_bitwise_neutral() {
    let mut rng = Rng::new(1, stream::TEST);
    for variant in [Variant::StandardDit, Variant::MmDit] {
        let m = model(variant, 2);
        for _ in 0..100 {
            let tr = triple(&mut rng, 1, m.arch.class_count);
            let plain = m.velocity(&tr.x, &tr.t, &tr.c, &GateScales::identity(&m.arch)).unwrap();
            for g in Granularity::ALL {
                let id = CalibrationVector::identity(g, &m.arch);
                assert!(id.is_identity());
                let v = calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &id).unwrap();
                assert_eq!(v, plain);
            }
        }
    }
}

#[test]
fn refinement_preserves_the_forward_pass() {
    let mut rng = Rng::new(3, stream::TEST);
    for variant in [Variant::StandardDit, Variant::MmDit] {
        let m = model(variant, 4);
        for _ in 0..10 {
            let tr = triple(&mut rng, 2, m.arch.class_count);
            let coarse = random_vector(&mut rng, Granularity::Block, &m.arch);
            let v0 = calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &coarse).unwrap();
            let layer = coarse.refine(Granularity::Layer, &m.arch).unwrap();
            let gate = layer.refine(Granularity::Gate, &m.arch).unwrap();
            assert_eq!(calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &layer).unwrap(), v0);
            assert_eq!(calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &gate).unwrap(), v0);
            assert_eq!(coarse.refine(Granularity::Gate, &m.arch).unwrap(), gate);
            assert!(gate.refine(Granularity::Block, &m.arch).is_err());
        }
    }
}

#[test]
fn output_weight_scales_velocity_linearly() {
    let mut rng = Rng::new(5, stream::TEST);
    let m = model(Variant::MmDit, 6);
    let tr = triple(&mut rng, 2, m.arch.class_count);
    let base = random_vector(&mut rng, Granularity::Layer, &m.arch);
    let unit = CalibrationVector {
        omega: 1.0,
        ..base.clone()
    };
    let v1 = calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &unit).unwrap();
    for k in [0.0, 0.3, -1.7, 2.0] {
        let c = CalibrationVector {
            omega: k,
            ..base.clone()
        };
        let v = calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &c).unwrap();
        assert_eq!(v, v1.scale(k));
    }
}

#[test]
fn zero_output_weight_returns_the_noise() {
    let m = model(Variant::StandardDit, 7);
    let space = SearchSpace::single(m.arch.clone(), Granularity::Block);
    let mut point = space.identity_point();
    point[0] = 0.0;
    let field = space.field(&m, &point).unwrap();
    let img = sample_items(field.as_ref(), &[(1, 99)], 8).unwrap().remove(0);
    assert_eq!(img.data(), unpatchify(&initial_noise(99)).as_slice());
}

#[test]
fn zero_block_scale_matches_removing_the_block() {
    let mut rng = Rng::new(8, stream::TEST);
    for variant in [Variant::StandardDit, Variant::MmDit] {
        let m = model(variant, 9);
        let tr = triple(&mut rng, 2, m.arch.class_count);
        for b in 0..m.arch.depth {
            let mut flat = vec![1.0; dimension(Granularity::Block, &m.arch)];
            flat[1 + b] = 0.0;
            let c = CalibrationVector::from_flat(&flat, Granularity::Block, &m.arch).unwrap();
            let ablated = calibrated_forward(&m, &tr.x, &tr.t, &tr.c, &c).unwrap();
            let mut skip = vec![false; m.arch.depth];
            skip[b] = true;
            let removed = m
                .velocity_masked(&tr.x, &tr.t, &tr.c, &GateScales::identity(&m.arch), Some(&skip))
                .unwrap();
            assert!(ablated.max_abs_diff(&removed) <= 1e-12);
        }
    }
}

#[test]
fn two_identical_members_at_half_weight_reproduce_the_model() {
    let mut rng = Rng::new(10, stream::TEST);
    let m = model(Variant::MmDit, 11);
    let space = SearchSpace {
        roles: vec![ConditionRole::SamePrompt; 2],
        ..SearchSpace::single(m.arch.clone(), Granularity::Gate)
    };
    let point = space.identity_point();
    assert_eq!(point[0], 0.5);
    assert_eq!(point[space.member_dim()], 0.5);
    let spec = space.decode(&point).unwrap();
    for _ in 0..10 {
        let tr = triple(&mut rng, 3, m.arch.class_count);
        let plain = m.velocity(&tr.x, &tr.t, &tr.c, &GateScales::identity(&m.arch)).unwrap();
        assert_eq!(ensemble_velocity(&spec, &m, &tr.x, &tr.t, &tr.c).unwrap(), plain);
    }
}

fn pair(arch: &ArchSpec, w_cond: f64, w_uncond: f64) -> EnsembleSpec {
    let member = |omega, role| EnsembleMember {
        calibration: CalibrationVector {
            omega,
            ..CalibrationVector::identity(Granularity::Block, arch)
        },
        role,
    };
    EnsembleSpec::new(vec![
        member(w_cond, ConditionRole::Conditional),
        member(w_uncond, ConditionRole::Unconditional),
    ])
    .unwrap()
}

#[test]
fn guidance_is_a_two_member_ensemble() {
    let mut rng = Rng::new(12, stream::TEST);
    let m = model(Variant::StandardDit, 13);
    let s = GateScales::identity(&m.arch);
    for _ in 0..20 {
        let tr = triple(&mut rng, 2, m.arch.class_count - 1);
        let g = 8.0 * rng.uniform();
        let vc = m.velocity(&tr.x, &tr.t, &tr.c, &s).unwrap();
        let null = vec![m.arch.null_class(); 2];
        let vu = m.velocity(&tr.x, &tr.t, &null, &s).unwrap();

        // v_c + g(v_c − v_u)
        let ens = ensemble_velocity(&pair(&m.arch, 1.0 + g, -g), &m, &tr.x, &tr.t, &tr.c).unwrap();
        assert!(ens.max_abs_diff(&guided(&vc, &vu, g).unwrap()) <= 1e-12);

        // v_u + g(v_c − v_u)
        let literal = vu.zip_map(&vc, |u, c| u + g * (c - u)).unwrap();
        let ens = ensemble_velocity(&pair(&m.arch, g, 1.0 - g), &m, &tr.x, &tr.t, &tr.c).unwrap();
        assert!(ens.max_abs_diff(&literal) <= 1e-12);
    }
}

#[test]
fn guidance_pair_identity_point_is_the_conditional_model() {
    let m = model(Variant::StandardDit, 14);
    let space = SearchSpace {
        roles: vec![ConditionRole::Conditional, ConditionRole::Unconditional],
        ..SearchSpace::single(m.arch.clone(), Granularity::Layer)
    };
    let p = space.identity_point();
    assert_eq!((p[0], p[space.member_dim()]), (1.0, 0.0));
    let items = [(0, 1), (2, 5)];
    let a = sample_items(space.field(&m, &p).unwrap().as_ref(), &items, 4).unwrap();
    let b = sample_items(&ModelField::new(&m, 0.0), &items, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn skip_layer_guidance_is_expressible() {
    let mut rng = Rng::new(15, stream::TEST);
    let m = model(Variant::MmDit, 16);
    let tr = triple(&mut rng, 2, m.arch.class_count);
    let g = 1.5;
    let skipped_block = 1;
    let mut flat = vec![1.0; dimension(Granularity::Block, &m.arch)];
    flat[0] = -g;
    flat[1 + skipped_block] = 0.0;
    let weak = CalibrationVector::from_flat(&flat, Granularity::Block, &m.arch).unwrap();
    let strong = CalibrationVector {
        omega: 1.0 + g,
        ..CalibrationVector::identity(Granularity::Block, &m.arch)
    };
    let spec = EnsembleSpec::new(vec![
        EnsembleMember {
            calibration: strong,
            role: ConditionRole::Conditional,
        },
        EnsembleMember {
            calibration: weak,
            role: ConditionRole::Conditional,
        },
    ])
    .unwrap();
    let full = m.velocity(&tr.x, &tr.t, &tr.c, &GateScales::identity(&m.arch)).unwrap();
    let mut skip = vec![false; m.arch.depth];
    skip[skipped_block] = true;
    let without = m
        .velocity_masked(&tr.x, &tr.t, &tr.c, &GateScales::identity(&m.arch), Some(&skip))
        .unwrap();
    let expect = guided(&full, &without, g).unwrap();
    let got = ensemble_velocity(&spec, &m, &tr.x, &tr.t, &tr.c).unwrap();
    assert!(got.max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn shape_and_binding_errors() {
    let a = arch(Variant::StandardDit);
    let other = arch(Variant::MmDit);
    assert!(matches!(
        CalibrationVector::from_flat(&[1.0; 3], Granularity::Block, &a),
        Err(Error::CalibrationShape(_))
    ));
    let c = CalibrationVector::identity(Granularity::Layer, &a);
    assert!(c.gate_scales(&other).is_err());
    assert!(matches!(EnsembleSpec::new(vec![]), Err(Error::Contract(_))));
    let mixed = EnsembleSpec::new(vec![
        EnsembleMember {
            calibration: CalibrationVector::identity(Granularity::Block, &a),
            role: ConditionRole::Conditional,
        },
        EnsembleMember {
            calibration: CalibrationVector::identity(Granularity::Block, &other),
            role: ConditionRole::Conditional,
        },
    ]);
    assert!(matches!(mixed, Err(Error::CalibrationShape(_))));
}

#[test]
fn sidecar_members_round_trip_through_the_search_space() {
    let a = arch(Variant::MmDit);
    let space = SearchSpace {
        roles: vec![ConditionRole::Conditional, ConditionRole::Unconditional],
        guidance_scale: 0.0,
        ..SearchSpace::single(a.clone(), Granularity::Gate)
    };
    let mut rng = Rng::new(17, stream::TEST);
    let point: Vec<f64> = (0..space.dim()).map(|_| rng.normal()).collect();
    let members = CalibrationSidecar::members_from(&space, &point).unwrap();
    assert_eq!(members.len(), 2);
    assert_eq!(members[1].role, ConditionRole::Unconditional);
    let mut flat = Vec::new();
    for m in &members {
        flat.push(m.omega);
        flat.extend(&m.scales);
    }
    assert_eq!(flat, point);
}
