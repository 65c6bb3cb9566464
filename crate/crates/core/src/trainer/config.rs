//! Training configuration, modes and ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::curriculum::CurriculumConfig;
use crate::preservation::PreservationConfig;
use crate::replay::ReplayConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mrckg,
    Finetune,
    Ewc,
    ReplayOnly,
    StructureCl,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "mrckg" => Mode::Mrckg,
            "finetune" => Mode::Finetune,
            "ewc" => Mode::Ewc,
            "replay_only" => Mode::ReplayOnly,
            "structure_cl" => Mode::StructureCl,
            _ => return Err(Error::InvalidArgument(format!("unknown mode '{s}'"))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Mrckg => "mrckg",
            Mode::Finetune => "finetune",
            Mode::Ewc => "ewc",
            Mode::ReplayOnly => "replay_only",
            Mode::StructureCl => "structure_cl",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoCmkp,
    NoMmcr,
    NoMscl,
    NoProg,
    NoVisual,
    NoText,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().replace('-', "_").as_str() {
            "no_cmkp" => Ablation::NoCmkp,
            "no_mmcr" => Ablation::NoMmcr,
            "no_mscl" => Ablation::NoMscl,
            "no_prog" => Ablation::NoProg,
            "no_visual" => Ablation::NoVisual,
            "no_text" => Ablation::NoText,
            _ => return Err(Error::InvalidArgument(format!("unknown ablation '{s}'"))),
        })
    }
}

/// How new triples are ordered within a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    /// K-stage progressive curriculum with c_str recomputation.
    Progressive,
    /// Sorted once by φ, single fixed order, no gating.
    Static,
    /// Uniform shuffle each epoch.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub ablations: Vec<Ablation>,
    pub epochs: usize,
    pub stage1_fraction: f64,
    /// Fraction of the epochs over which curriculum stages are spread.
    pub curriculum_span: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_cmkp: f64,
    pub lambda_rep: f64,
    pub lambda_ewc: f64,
    pub patience: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    pub replay: ReplayConfig,
    pub preservation: PreservationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mrckg,
            ablations: Vec::new(),
            epochs: 50,
            stage1_fraction: 0.3,
            curriculum_span: 1.0,
            lr: 5e-4,
            batch_size: 128,
            lambda_cmkp: 1.0,
            lambda_rep: 0.5,
            lambda_ewc: 100.0,
            patience: 10,
            seed: 0,
            model: ModelConfig::default(),
            curriculum: CurriculumConfig::default(),
            replay: ReplayConfig::default(),
            preservation: PreservationConfig::default(),
        }
    }
}

/// Switches derived from mode and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Features {
    pub cmkp: bool,
    pub mmcr_losses: bool,
    pub buffer: bool,
    pub ordering: Ordering,
    pub two_stage: bool,
    pub ewc: bool,
    pub keep_visual: bool,
    pub keep_text: bool,
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage1_fraction {} outside [0, 1]", self.stage1_fraction));
        }
        if !(self.curriculum_span > 0.0 && self.curriculum_span <= 1.0) {
            return bad(format!("curriculum_span {} outside (0, 1]", self.curriculum_span));
        }
        for (name, v) in [
            ("lambda_cmkp", self.lambda_cmkp),
            ("lambda_rep", self.lambda_rep),
            ("lambda_ewc", self.lambda_ewc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and ≥ 0"));
            }
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return bad("lr, epochs and batch_size must be positive".into());
        }
        let mut seen = self.ablations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.ablations.len() {
            return bad("duplicate ablation".into());
        }
        if !self.ablations.is_empty() && !matches!(self.mode, Mode::Mrckg | Mode::StructureCl) {
            return bad(format!("mode {} does not accept ablations", self.mode));
        }
        if self.mode == Mode::StructureCl && (self.has(Ablation::NoVisual) || self.has(Ablation::NoText)) {
            return bad("structure_cl already drops both modalities".into());
        }
        if self.has(Ablation::NoMscl) && self.has(Ablation::NoProg) {
            return bad("no_mscl and no_prog are mutually exclusive".into());
        }
        self.model.validate()?;
        self.curriculum.validate()?;
        self.replay.validate()
    }

    pub fn features(&self) -> Features {
        let full = matches!(self.mode, Mode::Mrckg | Mode::StructureCl);
        let ordering = if !full || self.has(Ablation::NoMscl) {
            Ordering::Shuffled
        } else if self.has(Ablation::NoProg) {
            Ordering::Static
        } else {
            Ordering::Progressive
        };
        Features {
            cmkp: full && !self.has(Ablation::NoCmkp),
            mmcr_losses: full && !self.has(Ablation::NoMmcr),
            buffer: (full && !self.has(Ablation::NoMmcr)) || self.mode == Mode::ReplayOnly,
            ordering,
            two_stage: full,
            ewc: self.mode == Mode::Ewc,
            keep_visual: self.mode != Mode::StructureCl && !self.has(Ablation::NoVisual),
            keep_text: self.mode != Mode::StructureCl && !self.has(Ablation::NoText),
        }
    }

    /// Stage-1 epoch count for snapshots i ≥ 1.
    pub fn stage1_epochs(&self) -> usize {
        (self.stage1_fraction * self.epochs as f64).ceil() as usize
    }
}
