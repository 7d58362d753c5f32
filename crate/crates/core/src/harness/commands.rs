//! Experiment drivers behind the CLI subcommands. Each writes its artifacts
//! into an output directory and returns a summary.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::calibration::{CalibrationSidecar, ConditionRole, SearchSpace, SidecarProvenance, SIDECAR_FORMAT_VERSION};
use crate::cmaes::{CmaState, StopTrigger};
use crate::dit::data::reference_sets;
use crate::dit::model::GateScales;
use crate::dit::sampler::{ModelField, VelocityField};
use crate::dit::train::train;
use crate::dit::DitModel;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, Provenance};
use crate::harness::config::{EnsembleRoles, RunConfig, Selection};
use crate::harness::csv::{float, Table};
use crate::numerics::rng::stream;
use crate::numerics::{Rng, Tensor};
use crate::rewards::{diversity_pairwise, evaluate_candidate, evaluate_field, Bucket, BucketResult, RewardSpec, Split};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const ABLATE_FILE: &str = "ablate.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const GENERATIONS_FILE: &str = "generations.csv";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const SIDECAR_FILE: &str = "calibration.toml";
pub const EVAL_FILE: &str = "eval.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Writes the resolved configuration, plus derived constants, as a loadable manifest.
fn write_manifest(out: &Path, cfg: &RunConfig, command: &str, derived: toml::Table) -> Result<()> {
    let mut d = derived;
    d.insert("command".into(), toml::Value::String(command.into()));
    d.insert(
        "crate_version".into(),
        toml::Value::String(env!("CARGO_PKG_VERSION").into()),
    );
    d.insert(
        "rng".into(),
        toml::Value::String(crate::numerics::Rng::ALGORITHM.into()),
    );
    let manifest = RunConfig {
        derived: Some(d),
        ..cfg.clone()
    };
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_toml()?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    prepare(out)?;
    let mut model = DitModel::init(cfg.arch.clone(), cfg.seed)?;
    let report = train(&mut model, &cfg.train, cfg.seed)?;
    let references = reference_sets(cfg.seed, cfg.arch.class_count, cfg.data.reference_per_class)?;
    let ck = Checkpoint {
        model,
        references,
        seed: cfg.seed,
        provenance: Provenance {
            train: cfg.train.clone(),
            steps_completed: report.losses.len(),
            initial_loss: report.losses.first().copied(),
            final_loss: report.losses.last().copied(),
            reference_per_class: cfg.data.reference_per_class,
        },
    };
    let path = out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    let mut table = Table::new(&["step", "loss"]);
    for (i, l) in report.losses.iter().enumerate() {
        table.push(vec![i.to_string(), float(*l)])?;
    }
    table.write(&out.join(LOSS_FILE))?;
    let mut derived = toml::Table::new();
    derived.insert("parameter_count".into(), (ck.model.parameter_count() as i64).into());
    derived.insert("arch_hash".into(), ck.model.arch.hash().into());
    write_manifest(out, cfg, "train", derived)?;
    Ok(TrainSummary {
        checkpoint: path,
        losses: report.losses,
    })
}

/// Reward of `field` on the fixed condition set of replicate `replicate`.
fn condition_reward(
    field: &dyn VelocityField,
    ck: &Checkpoint,
    cfg: &RunConfig,
    replicate: usize,
    conditions: usize,
    nfe: usize,
) -> Result<BucketResult> {
    let bucket = Bucket::conditions(cfg.seed, replicate as u64, conditions, ck.model.arch.class_count)?;
    evaluate_field(field, &bucket, &cfg.reward, &ck.references, nfe)
}

fn scaled_field(model: &DitModel, scales: GateScales) -> ModelField<'_> {
    ModelField {
        model,
        scales,
        guidance_scale: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    /// `None` for the baseline row.
    pub block: Option<usize>,
    pub seed: usize,
    pub reward: f64,
}

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    prepare(out)?;
    let a = &cfg.ablate;
    let arch = &ck.model.arch;
    let jobs: Vec<(Option<usize>, usize)> = std::iter::once(None)
        .chain((0..arch.depth).map(Some))
        .flat_map(|b| (0..a.seeds).map(move |s| (b, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(block, seed)| {
            let scales = match block {
                None => GateScales::identity(arch),
                Some(b) => GateScales::with_block(arch, b, 0.0),
            };
            let field = scaled_field(&ck.model, scales);
            let r = condition_reward(&field, &ck, cfg, seed, a.conditions, a.nfe)?;
            Ok(AblateRow {
                block,
                seed,
                reward: r.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["block_id", "seed", "reward"]);
    for r in &rows {
        let id = r.block.map_or("baseline".to_string(), |b| b.to_string());
        table.push(vec![id, r.seed.to_string(), float(r.reward)])?;
    }
    table.write(&out.join(ABLATE_FILE))?;
    write_manifest(out, cfg, "ablate", toml::Table::new())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub block: usize,
    pub scale: f64,
    pub seed: usize,
    pub reward: f64,
}

pub fn cmd_sweep_scale(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    prepare(out)?;
    let sw = &cfg.sweep;
    let arch = &ck.model.arch;
    let mut jobs = Vec::new();
    for b in 0..arch.depth {
        for &s in &sw.scales {
            for seed in 0..sw.seeds {
                jobs.push((b, s, seed));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(block, scale, seed)| {
            let field = scaled_field(&ck.model, GateScales::with_block(arch, block, scale));
            let r = condition_reward(&field, &ck, cfg, seed, sw.conditions, sw.nfe)?;
            Ok(SweepRow {
                block,
                scale,
                seed,
                reward: r.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["block_id", "s", "seed", "reward"]);
    for r in &rows {
        table.push(vec![
            r.block.to_string(),
            float(r.scale),
            r.seed.to_string(),
            float(r.reward),
        ])?;
    }
    table.write(&out.join(SWEEP_FILE))?;
    write_manifest(out, cfg, "sweep-scale", toml::Table::new())?;
    Ok(rows)
}

/// One line of the generation log.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub evaluations: usize,
    /// Step size used to sample this generation.
    pub sigma: f64,
    pub best: f64,
    pub mean: f64,
    pub worst: f64,
    pub best_so_far: f64,
    /// Held-out reward of this generation's best candidate.
    pub heldout: f64,
    pub heldout_best_so_far: f64,
    pub condition_number: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateSummary {
    pub sidecar: CalibrationSidecar,
    pub generations: Vec<GenerationRecord>,
    pub final_sigma: f64,
    pub trigger: StopTrigger,
    pub baseline_heldout: f64,
    pub mean_heldout: f64,
    pub dimension: usize,
}

pub fn search_space(cfg: &RunConfig, arch: &crate::dit::ArchSpec) -> SearchSpace {
    let c = &cfg.calibrate;
    let roles = match (c.n_models, c.roles) {
        (1, _) => vec![ConditionRole::Conditional],
        (_, EnsembleRoles::SamePrompt) => vec![ConditionRole::Conditional, ConditionRole::SamePrompt],
        (_, EnsembleRoles::Cfg) => vec![ConditionRole::Conditional, ConditionRole::Unconditional],
    };
    SearchSpace {
        arch: arch.clone(),
        granularity: c.granularity,
        roles,
        guidance_scale: c.guidance_scale,
    }
}

/// Mean bucket reward of a candidate; a sampler blow-up ranks it last.
fn train_reward(
    v: &[f64],
    space: &SearchSpace,
    ck: &Checkpoint,
    bucket: &Bucket,
    reward: &RewardSpec,
    nfe: usize,
) -> Result<f64> {
    match evaluate_candidate(v, space, &ck.model, bucket, reward, &ck.references, nfe) {
        Ok(r) => Ok(r.mean),
        Err(Error::Evaluation(_)) | Err(Error::NonFinite(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

pub fn cmd_calibrate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<CalibrateSummary> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let c = &cfg.calibrate;
    let arch = &ck.model.arch;
    let space = search_space(cfg, arch);
    let dim = space.dim();
    if dim > c.max_dimension {
        return Err(Error::DimensionOverflow {
            dim,
            max: c.max_dimension,
        });
    }
    prepare(out)?;
    let classes = arch.class_count;
    let identity = space.identity_point();
    let mut cma = CmaState::new(
        identity.clone(),
        c.sigma0,
        c.population,
        Rng::new(cfg.seed, stream::CMA),
    )?;
    let mut bucket_rng = Rng::new(cfg.seed, stream::TRAIN_BUCKET);
    let heldout = Bucket::sample(
        &mut Rng::new(cfg.seed, stream::HELDOUT_BUCKET),
        c.heldout_size,
        classes,
        Split::Heldout,
    )?;
    let heldout_of = |v: &[f64]| -> Result<f64> {
        Ok(evaluate_candidate(v, &space, &ck.model, &heldout, &cfg.reward, &ck.references, c.nfe)?.mean)
    };
    let baseline_heldout = heldout_of(&identity)?;

    let mut best_vec = identity.clone();
    let mut best_heldout = baseline_heldout;
    let mut best_train = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut records = Vec::new();
    let mut header = vec!["generation".to_string(), "candidate".into(), "reward".into()];
    header.extend((0..dim).map(|i| format!("c{i}")));
    let mut candidates_log = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());

    let trigger = loop {
        if let Some(t) = cma.should_stop(&history, &c.stop) {
            break t;
        }
        let sigma = cma.sigma();
        let condition_number = cma.condition_number();
        let candidates = cma.ask()?;
        let bucket = Bucket::sample(&mut bucket_rng, c.bucket_size, classes, Split::Train)?;
        let rewards = candidates
            .par_iter()
            .map(|v| train_reward(v, &space, &ck, &bucket, &cfg.reward, c.nfe))
            .collect::<Result<Vec<f64>>>()?;
        let ibest = (0..rewards.len()).fold(0, |b, i| if rewards[i] > rewards[b] { i } else { b });
        let iworst = (0..rewards.len()).fold(0, |w, i| if rewards[i] < rewards[w] { i } else { w });
        let heldout_now = heldout_of(&candidates[ibest])?;
        if heldout_now > best_heldout {
            best_heldout = heldout_now;
            best_vec = candidates[ibest].clone();
        }
        best_train = best_train.max(rewards[ibest]);
        history.push(best_heldout);
        for (i, (v, r)) in candidates.iter().zip(&rewards).enumerate() {
            let mut row = vec![cma.generation().to_string(), i.to_string(), float(*r)];
            row.extend(v.iter().map(|x| float(*x)));
            candidates_log.push(row)?;
        }
        records.push(GenerationRecord {
            generation: cma.generation(),
            evaluations: cma.evaluations() + rewards.len(),
            sigma,
            best: rewards[ibest],
            mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
            worst: rewards[iworst],
            best_so_far: best_train,
            heldout: heldout_now,
            heldout_best_so_far: best_heldout,
            condition_number,
        });
        cma.tell(&rewards)?;
    };

    let mean_vec = cma.mean().to_vec();
    let mean_heldout = heldout_of(&mean_vec)?;
    let (selected, selected_reward) = match c.selection {
        Selection::BestHeldout => (best_vec, best_heldout),
        Selection::Mean => (mean_vec.clone(), mean_heldout),
    };
    let sidecar = CalibrationSidecar {
        format_version: SIDECAR_FORMAT_VERSION,
        arch_hash: arch.hash(),
        granularity: c.granularity,
        guidance_scale: c.guidance_scale,
        members: CalibrationSidecar::members_from(&space, &selected)?,
        mean_members: CalibrationSidecar::members_from(&space, &mean_vec)?,
        provenance: SidecarProvenance {
            reward: cfg.reward.to_string(),
            generations: cma.generation(),
            evaluations: cma.evaluations(),
            seed: cfg.seed,
            nfe: c.nfe,
            baseline_heldout_reward: baseline_heldout,
            selected_heldout_reward: selected_reward,
            stop_trigger: trigger.name().into(),
        },
    };
    std::fs::write(out.join(SIDECAR_FILE), sidecar.to_toml()?)?;

    let mut log = Table::new(&[
        "generation",
        "evaluations",
        "sigma",
        "best",
        "mean",
        "worst",
        "best_so_far",
        "heldout",
        "heldout_best_so_far",
        "condition_number",
    ]);
    for r in &records {
        log.push(vec![
            r.generation.to_string(),
            r.evaluations.to_string(),
            float(r.sigma),
            float(r.best),
            float(r.mean),
            float(r.worst),
            float(r.best_so_far),
            float(r.heldout),
            float(r.heldout_best_so_far),
            float(r.condition_number),
        ])?;
    }
    log.write(&out.join(GENERATIONS_FILE))?;
    candidates_log.write(&out.join(CANDIDATES_FILE))?;

    let p = cma.params();
    let mut derived = toml::Table::new();
    derived.insert("dimension".into(), (dim as i64).into());
    derived.insert(
        "dimension_without_omega".into(),
        ((dim - space.roles.len()) as i64).into(),
    );
    derived.insert("lambda".into(), (p.lambda as i64).into());
    derived.insert("mu".into(), (p.mu as i64).into());
    derived.insert("weights".into(), p.weights.clone().into());
    derived.insert("mu_eff".into(), p.mu_eff.into());
    derived.insert("c_sigma".into(), p.c_sigma.into());
    derived.insert("d_sigma".into(), p.d_sigma.into());
    derived.insert("c_c".into(), p.c_c.into());
    derived.insert("c_1".into(), p.c_1.into());
    derived.insert("c_mu".into(), p.c_mu.into());
    derived.insert("chi_n".into(), p.chi_n.into());
    derived.insert("checkpoint_arch_hash".into(), arch.hash().into());
    write_manifest(out, cfg, "calibrate", derived)?;

    Ok(CalibrateSummary {
        sidecar,
        generations: records,
        final_sigma: cma.sigma(),
        trigger,
        baseline_heldout,
        mean_heldout,
        dimension: dim,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub nfe: usize,
    pub seed: usize,
    pub reward: f64,
    pub diversity: f64,
}

/// Mean over classes of the within-class pairwise diversity.
pub fn class_diversity(images: &[Tensor], classes: &[usize]) -> Result<f64> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<&Tensor>> = Default::default();
    for (img, &c) in images.iter().zip(classes) {
        by_class.entry(c).or_default().push(img);
    }
    let per: Vec<f64> = by_class
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| diversity_pairwise(v))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return diversity_pairwise(images);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, calibration: Option<&Path>, out: &Path) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let arch = &ck.model.arch;
    let calibrated = match calibration {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", p.display())))?;
            let sc = CalibrationSidecar::from_toml(&text)?;
            let space = sc.search_space(arch)?;
            Some((space, sc.selected_point()))
        }
    };
    prepare(out)?;
    let e = &cfg.eval;
    let mut jobs = Vec::new();
    let models: Vec<&str> = if calibrated.is_some() {
        vec!["baseline", "calibrated"]
    } else {
        vec!["baseline"]
    };
    for m in &models {
        for &nfe in &e.nfe_list {
            for seed in 0..e.seeds {
                jobs.push((*m, nfe, seed));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(m, nfe, seed)| {
            let bucket = Bucket::conditions(cfg.seed, seed as u64, e.conditions, arch.class_count)?;
            let r = match (&calibrated, m) {
                (Some((space, v)), "calibrated") => {
                    let field = space.field(&ck.model, v)?;
                    evaluate_field(field.as_ref(), &bucket, &cfg.reward, &ck.references, nfe)?
                }
                _ => {
                    let field = scaled_field(&ck.model, GateScales::identity(arch));
                    evaluate_field(&field, &bucket, &cfg.reward, &ck.references, nfe)?
                }
            };
            Ok(EvalRow {
                model: m.to_string(),
                nfe,
                seed,
                reward: r.mean,
                diversity: class_diversity(&r.images, &bucket.classes())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["model", "nfe", "seed", "reward", "diversity"]);
    for r in &rows {
        table.push(vec![
            r.model.clone(),
            r.nfe.to_string(),
            r.seed.to_string(),
            float(r.reward),
            float(r.diversity),
        ])?;
    }
    table.write(&out.join(EVAL_FILE))?;
    write_manifest(out, cfg, "eval", toml::Table::new())?;
    Ok(rows)
}
