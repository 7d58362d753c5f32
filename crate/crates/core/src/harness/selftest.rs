//! Built-in release checks, each reported with its numeric margin.

use std::fmt;

use crate::calibration::{
    calibrated_forward, ensemble_velocity, CalibrationVector, ConditionRole, EnsembleMember, EnsembleSpec, Granularity,
};
use crate::cmaes::{maximize, rosenbrock, sphere, CmaState, SYMMETRY_TOL};
use crate::dit::sampler::guided;
use crate::dit::{ArchSpec, DitModel, GateScales};
use crate::error::Result;
use crate::harness::gradcheck;
use crate::numerics::rng::stream;
use crate::numerics::{eig_sym, matmul, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity.
    pub value: f64,
    pub threshold: f64,
    /// Distance to the threshold; positive when passing.
    pub margin: f64,
}

impl Check {
    /// Passes when `value < threshold`.
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < threshold,
            value,
            threshold,
            margin: threshold - value,
        }
    }

    /// Passes when `value >= threshold`.
    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            margin: value - threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<32} value={:.3e} threshold={:.3e} margin={:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold,
                c.margin
            )?;
        }
        write!(
            f,
            "{}/{} checks passed",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelftestOptions {
    /// Perturbs the optimizer covariance before the symmetry check.
    pub inject_asymmetry: bool,
}

fn random_spd(rng: &mut Rng, d: usize) -> Result<Tensor> {
    let a = Tensor::matrix(d, d, rng.normals(d * d))?;
    let mut c = matmul(&a, &a.transpose()?)?;
    for i in 0..d {
        let v = c.get2(i, i) + 0.1;
        c.set2(i, i, v);
    }
    Ok(c)
}

fn eig_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut rng = Rng::new(0, stream::TEST);
    let mut recon = 0.0f64;
    let mut ortho = 0.0f64;
    for d in [2usize, 5, 16, 32] {
        let c = random_spd(&mut rng, d)?;
        let e = eig_sym(&c)?;
        let scale = c.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        recon = recon.max(e.reconstruct().max_abs_diff(&c) / scale);
        let btb = matmul(&e.vectors.transpose()?, &e.vectors)?;
        ortho = ortho.max(btb.max_abs_diff(&Tensor::eye(d)));
    }
    out.push(Check::below("eig_sym/reconstruction", recon, 1e-10));
    out.push(Check::below("eig_sym/orthonormality", ortho, 1e-10));
    Ok(())
}

fn cma_checks(out: &mut Vec<Check>, opts: SelftestOptions) -> Result<()> {
    let mut worst_sphere = f64::INFINITY;
    for seed in 0..5 {
        let r = maximize(|x| -sphere(x), vec![1.0; 20], 0.3, seed, 6000, -1e-9)?;
        worst_sphere = worst_sphere.min(r.best);
    }
    out.push(Check::at_least("cmaes/sphere_d20_worst_best", worst_sphere, -1e-9));
    let mut reached = 0;
    for seed in 0..5 {
        let r = maximize(|x| -rosenbrock(x), vec![0.0; 8], 0.5, seed, 30_000, -1e-6)?;
        reached += r.reached as usize;
    }
    out.push(Check::at_least(
        "cmaes/rosenbrock_d8_seeds_reached",
        reached as f64,
        4.0,
    ));

    let mut cma = CmaState::new(vec![0.0; 6], 0.5, None, Rng::new(1, stream::TEST))?;
    let mut rng = Rng::new(2, stream::TEST);
    for _ in 0..50 {
        let xs = cma.ask()?;
        cma.tell(&rng.normals(xs.len()))?;
    }
    if opts.inject_asymmetry {
        cma.inject_asymmetry(1e-6);
    }
    out.push(Check::below("cmaes/covariance_symmetry", cma.asymmetry(), SYMMETRY_TOL));
    Ok(())
}

fn calibration_checks(out: &mut Vec<Check>) -> Result<()> {
    let arch = ArchSpec {
        depth: 2,
        model_dim: 8,
        heads: 2,
        ff_mult: 2,
        ..ArchSpec::default()
    };
    let model = DitModel::init(arch.clone(), 3)?;
    let mut rng = Rng::new(4, stream::TEST);
    let x = Tensor::new(vec![2 * 16, 4], rng.normals(128))?;
    let t = [0.3, 0.8];
    let classes = [1, 2];
    let plain = model.velocity(&x, &t, &classes, &GateScales::identity(&arch))?;
    let mut identity_diff = 0.0f64;
    for g in Granularity::ALL {
        let v = calibrated_forward(&model, &x, &t, &classes, &CalibrationVector::identity(g, &arch))?;
        identity_diff = identity_diff.max(v.max_abs_diff(&plain));
    }
    out.push(Check {
        name: "calibration/identity_exact".into(),
        passed: identity_diff == 0.0,
        value: identity_diff,
        threshold: 0.0,
        margin: -identity_diff,
    });

    let null = [arch.null_class(); 2];
    let vu = model.velocity(&x, &t, &null, &GateScales::identity(&arch))?;
    let mut cfg_diff = 0.0f64;
    for g in [0.0, 1.0, 3.5, 7.0] {
        let member = |omega: f64, role| EnsembleMember {
            calibration: CalibrationVector {
                omega,
                ..CalibrationVector::identity(Granularity::Block, &arch)
            },
            role,
        };
        let spec = EnsembleSpec::new(vec![
            member(1.0 + g, ConditionRole::Conditional),
            member(-g, ConditionRole::Unconditional),
        ])?;
        let ens = ensemble_velocity(&spec, &model, &x, &t, &classes)?;
        cfg_diff = cfg_diff.max(ens.max_abs_diff(&guided(&plain, &vu, g)?));
    }
    out.push(Check::below("calibration/cfg_embedding", cfg_diff, 1e-12));
    Ok(())
}

fn gradient_checks(out: &mut Vec<Check>) -> Result<()> {
    for r in gradcheck::full_suite(0, 10, 2)? {
        out.push(Check::below(
            format!("gradient/{}", r.name),
            r.max_rel_err,
            gradcheck::TOLERANCE,
        ));
    }
    Ok(())
}

pub fn run_selftest(opts: SelftestOptions) -> Result<SelftestReport> {
    let mut checks = Vec::new();
    gradient_checks(&mut checks)?;
    eig_checks(&mut checks)?;
    cma_checks(&mut checks, opts)?;
    calibration_checks(&mut checks)?;
    Ok(SelftestReport { checks })
}
