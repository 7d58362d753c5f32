//! Calibration search space: an output weight `ω` plus scalar gate scales at
//! block, layer or gate granularity, and ensembles of calibrated passes.
//!
//! Flat vectors are laid out as `[ω, s₁, s₂, …]` with scales in block order,
//! attention before feed-forward and visual before text. Ensemble vectors
//! concatenate one such vector per member.

use serde::{Deserialize, Serialize};

use crate::dit::model::{DitModel, GateScales};
use crate::dit::sampler::{guided, VelocityField};
use crate::dit::{ArchSpec, Variant};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale shared by every gate of a block.
    Block,
    /// One scale for the attention layer and one for the feed-forward layer.
    Layer,
    /// One scale per gate; distinct from `Layer` only for MM-DiT.
    Gate,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Block, Granularity::Layer, Granularity::Gate];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Block => "block",
            Granularity::Layer => "layer",
            Granularity::Gate => "gate",
        }
    }

    /// Scales per block at this granularity.
    pub fn scales_per_block(self, arch: &ArchSpec) -> usize {
        match self {
            Granularity::Block => 1,
            Granularity::Layer => 2,
            Granularity::Gate => arch.gates_per_block(),
        }
    }
}

/// Length of the calibration vector, `ω` included.
pub fn dimension(granularity: Granularity, arch: &ArchSpec) -> usize {
    granularity.scales_per_block(arch) * arch.depth + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationVector {
    pub granularity: Granularity,
    pub omega: f64,
    pub scales: Vec<f64>,
    pub arch_hash: String,
}

impl CalibrationVector {
    pub fn identity(granularity: Granularity, arch: &ArchSpec) -> Self {
        Self {
            granularity,
            omega: 1.0,
            scales: vec![1.0; dimension(granularity, arch) - 1],
            arch_hash: arch.hash(),
        }
    }

    pub fn from_flat(v: &[f64], granularity: Granularity, arch: &ArchSpec) -> Result<Self> {
        let dim = dimension(granularity, arch);
        if v.len() != dim {
            return Err(Error::CalibrationShape(format!(
                "{} calibration for this model needs {dim} values, got {}",
                granularity.name(),
                v.len()
            )));
        }
        Ok(Self {
            granularity,
            omega: v[0],
            scales: v[1..].to_vec(),
            arch_hash: arch.hash(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.scales.len() + 1);
        v.push(self.omega);
        v.extend_from_slice(&self.scales);
        v
    }

    pub fn is_identity(&self) -> bool {
        self.omega == 1.0 && self.scales.iter().all(|&s| s == 1.0)
    }

    fn check_binding(&self, arch: &ArchSpec) -> Result<()> {
        if self.arch_hash != arch.hash() {
            return Err(Error::CalibrationShape(format!(
                "calibration bound to architecture {} applied to {}",
                self.arch_hash,
                arch.hash()
            )));
        }
        if self.scales.len() != dimension(self.granularity, arch) - 1 {
            return Err(Error::CalibrationShape(format!(
                "{} scales for a {} calibration of depth {}",
                self.scales.len(),
                self.granularity.name(),
                arch.depth
            )));
        }
        Ok(())
    }

    /// Per-gate assignment; block scales broadcast to every gate of the block.
    pub fn gate_scales(&self, arch: &ArchSpec) -> Result<GateScales> {
        self.check_binding(arch)?;
        let per = self.granularity.scales_per_block(arch);
        let blocks = self
            .scales
            .chunks(per)
            .map(|s| match (self.granularity, arch.variant) {
                (Granularity::Block, _) => vec![s[0]; arch.gates_per_block()],
                (Granularity::Layer, Variant::MmDit) => vec![s[0], s[0], s[1], s[1]],
                _ => s.to_vec(),
            })
            .collect();
        Ok(GateScales::new(blocks))
    }

    /// The same assignment expressed at a finer granularity.
    pub fn refine(&self, to: Granularity, arch: &ArchSpec) -> Result<Self> {
        self.check_binding(arch)?;
        let per = self.granularity.scales_per_block(arch);
        let mut scales = Vec::new();
        for s in self.scales.chunks(per) {
            match (self.granularity, to) {
                (a, b) if a == b => scales.extend_from_slice(s),
                (Granularity::Block, Granularity::Layer) => scales.extend([s[0], s[0]]),
                (Granularity::Block, Granularity::Gate) => {
                    scales.extend(std::iter::repeat_n(s[0], arch.gates_per_block()))
                }
                (Granularity::Layer, Granularity::Gate) => match arch.variant {
                    Variant::MmDit => scales.extend([s[0], s[0], s[1], s[1]]),
                    Variant::StandardDit => scales.extend_from_slice(s),
                },
                (from, to) => {
                    return Err(Error::Contract(format!(
                        "cannot refine {} into coarser {}",
                        from.name(),
                        to.name()
                    )))
                }
            }
        }
        Ok(Self {
            granularity: to,
            omega: self.omega,
            scales,
            arch_hash: self.arch_hash.clone(),
        })
    }
}

/// `ω · f^s(x, t, c)`.
pub fn calibrated_forward(
    model: &DitModel,
    x: &Tensor,
    t: &[f64],
    classes: &[usize],
    c: &CalibrationVector,
) -> Result<Tensor> {
    let scales = c.gate_scales(&model.arch)?;
    let v = model.velocity(x, t, classes, &scales)?;
    Ok(v.scale(c.omega))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionRole {
    /// Receives the request's class.
    Conditional,
    /// Receives the null class.
    Unconditional,
    /// Receives the request's class; marks ensembles of one prompt passed to every member.
    SamePrompt,
}

impl ConditionRole {
    fn class_for(self, class: usize, null: usize) -> usize {
        match self {
            ConditionRole::Unconditional => null,
            ConditionRole::Conditional | ConditionRole::SamePrompt => class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub calibration: CalibrationVector,
    pub role: ConditionRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Contract("ensemble needs at least one member".into()));
        };
        if members
            .iter()
            .any(|m| m.calibration.arch_hash != first.calibration.arch_hash)
        {
            return Err(Error::CalibrationShape(
                "ensemble members bind different architectures".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn single(c: CalibrationVector) -> Self {
        Self {
            members: vec![EnsembleMember {
                calibration: c,
                role: ConditionRole::Conditional,
            }],
        }
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `Σᵢ ωᵢ · f^{sᵢ}(x, t, cᵢ)` with each member's class chosen by its role.
pub fn ensemble_velocity(
    spec: &EnsembleSpec,
    model: &DitModel,
    x: &Tensor,
    t: &[f64],
    classes: &[usize],
) -> Result<Tensor> {
    let null = model.arch.null_class();
    let mut total: Option<Tensor> = None;
    for m in &spec.members {
        let cls: Vec<usize> = classes.iter().map(|&c| m.role.class_for(c, null)).collect();
        let v = calibrated_forward(model, x, t, &cls, &m.calibration)?;
        total = Some(match total {
            None => v,
            Some(acc) => acc.add(&v)?,
        });
    }
    total.ok_or_else(|| Error::Contract("empty ensemble".into()))
}

/// Calibrated single model, optionally with classifier-free guidance.
pub struct CalibratedField<'a> {
    pub model: &'a DitModel,
    pub calibration: CalibrationVector,
    pub guidance_scale: f64,
}

impl VelocityField for CalibratedField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        let ts = vec![t; classes.len()];
        let vc = calibrated_forward(self.model, x, &ts, classes, &self.calibration)?;
        if self.guidance_scale == 0.0 {
            return Ok(vc);
        }
        let null = vec![self.model.arch.null_class(); classes.len()];
        let vu = calibrated_forward(self.model, x, &ts, &null, &self.calibration)?;
        guided(&vc, &vu, self.guidance_scale)
    }
}

pub struct EnsembleField<'a> {
    pub model: &'a DitModel,
    pub spec: EnsembleSpec,
}

impl VelocityField for EnsembleField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        let ts = vec![t; classes.len()];
        ensemble_velocity(&self.spec, self.model, x, &ts, classes)
    }
}

/// Layout of the optimizer's flat vector: one calibration per ensemble member.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub arch: ArchSpec,
    pub granularity: Granularity,
    pub roles: Vec<ConditionRole>,
    /// Guidance applied when the space has a single member.
    pub guidance_scale: f64,
}

impl SearchSpace {
    pub fn single(arch: ArchSpec, granularity: Granularity) -> Self {
        Self {
            arch,
            granularity,
            roles: vec![ConditionRole::Conditional],
            guidance_scale: 0.0,
        }
    }

    pub fn member_dim(&self) -> usize {
        dimension(self.granularity, &self.arch)
    }

    pub fn dim(&self) -> usize {
        self.member_dim() * self.roles.len()
    }

    /// The point that reproduces the unmodified model: all scales one and
    /// output weights summing to one (the unconditional member of a
    /// conditional/unconditional pair starts at zero weight).
    pub fn identity_point(&self) -> Vec<f64> {
        let n = self.roles.len();
        let has_uncond = self.roles.contains(&ConditionRole::Unconditional);
        let n_cond = self
            .roles
            .iter()
            .filter(|r| **r != ConditionRole::Unconditional)
            .count()
            .max(1);
        let mut v = Vec::with_capacity(self.dim());
        for role in &self.roles {
            let omega = match (n, has_uncond, role) {
                (1, _, _) => 1.0,
                (_, true, ConditionRole::Unconditional) => 0.0,
                _ => 1.0 / n_cond as f64,
            };
            v.push(omega);
            v.extend(std::iter::repeat_n(1.0, self.member_dim() - 1));
        }
        v
    }

    pub fn decode(&self, v: &[f64]) -> Result<EnsembleSpec> {
        if v.len() != self.dim() {
            return Err(Error::CalibrationShape(format!(
                "search space has dimension {}, got {} values",
                self.dim(),
                v.len()
            )));
        }
        let members = v
            .chunks(self.member_dim())
            .zip(&self.roles)
            .map(|(chunk, &role)| {
                Ok(EnsembleMember {
                    calibration: CalibrationVector::from_flat(chunk, self.granularity, &self.arch)?,
                    role,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EnsembleSpec::new(members)
    }

    /// Velocity field sampling the candidate `v`.
    pub fn field<'a>(&self, model: &'a DitModel, v: &[f64]) -> Result<Box<dyn VelocityField + Sync + 'a>> {
        let spec = self.decode(v)?;
        if spec.len() == 1 && spec.members[0].role != ConditionRole::Unconditional {
            Ok(Box::new(CalibratedField {
                model,
                calibration: spec.members[0].calibration.clone(),
                guidance_scale: self.guidance_scale,
            }))
        } else {
            Ok(Box::new(EnsembleField { model, spec }))
        }
    }
}

/// One ensemble member as stored in a sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarMember {
    pub role: ConditionRole,
    pub omega: f64,
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarProvenance {
    pub reward: String,
    pub generations: usize,
    pub evaluations: usize,
    pub seed: u64,
    pub nfe: usize,
    pub baseline_heldout_reward: f64,
    pub selected_heldout_reward: f64,
    pub stop_trigger: String,
}

/// Calibration sidecar file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSidecar {
    pub format_version: u32,
    pub arch_hash: String,
    pub granularity: Granularity,
    pub guidance_scale: f64,
    /// Best-on-held-out candidate; this is what `eval` applies.
    pub members: Vec<SidecarMember>,
    /// Final search-distribution mean.
    pub mean_members: Vec<SidecarMember>,
    pub provenance: SidecarProvenance,
}

pub const SIDECAR_FORMAT_VERSION: u32 = 1;

impl CalibrationSidecar {
    pub fn members_from(space: &SearchSpace, v: &[f64]) -> Result<Vec<SidecarMember>> {
        Ok(space
            .decode(v)?
            .members
            .into_iter()
            .map(|m| SidecarMember {
                role: m.role,
                omega: m.calibration.omega,
                scales: m.calibration.scales,
            })
            .collect())
    }

    pub fn search_space(&self, arch: &ArchSpec) -> Result<SearchSpace> {
        if self.format_version != SIDECAR_FORMAT_VERSION {
            return Err(Error::CalibrationShape(format!(
                "unsupported sidecar format version {}",
                self.format_version
            )));
        }
        if self.arch_hash != arch.hash() {
            return Err(Error::CalibrationShape(format!(
                "sidecar bound to architecture {}, model is {}",
                self.arch_hash,
                arch.hash()
            )));
        }
        Ok(SearchSpace {
            arch: arch.clone(),
            granularity: self.granularity,
            roles: self.members.iter().map(|m| m.role).collect(),
            guidance_scale: self.guidance_scale,
        })
    }

    /// Flat vector of the selected members.
    pub fn selected_point(&self) -> Vec<f64> {
        self.members
            .iter()
            .flat_map(|m| std::iter::once(m.omega).chain(m.scales.iter().copied()))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("sidecar serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::harness::config::config_error(text, &e))
    }
}
