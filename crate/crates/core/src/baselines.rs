//! Strategies as flag sets over the single trainer.
//!
//! Naive fine-tuning, frozen-teacher rehearsal and the ablation ladder up to
//! the full method all run through [`crate::trainer::run_sequence`]; joint
//! training pools every task's training data into one task.

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::evaluation::MetricsReport;
use crate::trainer::{self, References, RunOutcome, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherUpdates {
    /// Memory model is never stepped during a task.
    Frozen,
    /// Memory model follows the refreshing objective at the slow rate.
    Refreshing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consolidation {
    None,
    /// Parameter averaging at task end.
    Msc,
    /// Parameter averaging plus fused working/memory features at retrieval.
    MscFsc,
}

impl Consolidation {
    pub fn model_space(self) -> bool {
        matches!(self, Consolidation::Msc | Consolidation::MscFsc)
    }

    pub fn feature_space(self) -> bool {
        matches!(self, Consolidation::MscFsc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub use_exemplars: bool,
    pub use_distillation: bool,
    pub teacher_updates: TeacherUpdates,
    pub consolidation: Consolidation,
    /// Train once on the union of all tasks instead of sequentially.
    pub joint: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StrategyError {
    #[error("strategy {0}: refreshing the teacher requires distillation")]
    RefreshWithoutDistillation(String),
    #[error("strategy {0}: consolidation requires a distilled memory model")]
    ConsolidationWithoutTeacher(String),
    #[error("strategy {0}: joint training takes no sequential flags")]
    JointWithFlags(String),
    #[error("unknown strategy `{0}` (expected one of {1})")]
    Unknown(String, String),
}

impl Strategy {
    /// Full method: rehearsal + refreshing + model and feature consolidation.
    pub fn krkc() -> Self {
        Self::sequential("krkc", true, true, TeacherUpdates::Refreshing, Consolidation::MscFsc)
    }

    /// Rehearsal with a frozen teacher, no consolidation.
    pub fn frozen_teacher() -> Self {
        Self::sequential("frozen", true, true, TeacherUpdates::Frozen, Consolidation::None)
    }

    /// Rehearsal + refreshing, no consolidation.
    pub fn krh_krf() -> Self {
        Self::sequential("krh_krf", true, true, TeacherUpdates::Refreshing, Consolidation::None)
    }

    /// Rehearsal + refreshing + model-space consolidation only.
    pub fn krh_krf_msc() -> Self {
        Self::sequential("krh_krf_msc", true, true, TeacherUpdates::Refreshing, Consolidation::Msc)
    }

    /// Sequential fine-tuning on new data only.
    pub fn naive() -> Self {
        Self::sequential("naive", false, false, TeacherUpdates::Frozen, Consolidation::None)
    }

    pub fn joint() -> Self {
        Self {
            name: "joint".into(),
            use_exemplars: false,
            use_distillation: false,
            teacher_updates: TeacherUpdates::Frozen,
            consolidation: Consolidation::None,
            joint: true,
        }
    }

    fn sequential(
        name: &str,
        use_exemplars: bool,
        use_distillation: bool,
        teacher_updates: TeacherUpdates,
        consolidation: Consolidation,
    ) -> Self {
        Self {
            name: name.into(),
            use_exemplars,
            use_distillation,
            teacher_updates,
            consolidation,
            joint: false,
        }
    }

    pub const NAMES: [&'static str; 6] = ["naive", "frozen", "krh_krf", "krh_krf_msc", "krkc", "joint"];

    pub fn by_name(name: &str) -> Result<Self, StrategyError> {
        let s = match name {
            "naive" => Self::naive(),
            "frozen" | "krh" => Self::frozen_teacher(),
            "krh_krf" => Self::krh_krf(),
            "krh_krf_msc" => Self::krh_krf_msc(),
            "krkc" => Self::krkc(),
            "joint" => Self::joint(),
            other => return Err(StrategyError::Unknown(other.into(), Self::NAMES.join(", "))),
        };
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.joint {
            if self.use_exemplars || self.use_distillation || self.consolidation != Consolidation::None {
                return Err(StrategyError::JointWithFlags(self.name.clone()));
            }
            return Ok(());
        }
        if self.teacher_updates == TeacherUpdates::Refreshing && !self.use_distillation {
            return Err(StrategyError::RefreshWithoutDistillation(self.name.clone()));
        }
        if self.consolidation != Consolidation::None && !self.use_distillation {
            return Err(StrategyError::ConsolidationWithoutTeacher(self.name.clone()));
        }
        Ok(())
    }

    pub fn refreshes_teacher(&self) -> bool {
        self.use_distillation && self.teacher_updates == TeacherUpdates::Refreshing
    }
}

/// Runs `strategy` on `stream` and returns its metrics.
pub fn run_strategy(
    strategy: &Strategy,
    stream: &[TaskDataset],
    config: &TrainConfig,
    references: Option<&References>,
) -> Result<MetricsReport, TrainError> {
    Ok(run_strategy_full(strategy, stream, None, config, references)?.report)
}

/// Like [`run_strategy`] but also returns checkpoints and logs, and scores a
/// held-out domain when one is given.
pub fn run_strategy_full(
    strategy: &Strategy,
    stream: &[TaskDataset],
    held_out: Option<&TaskDataset>,
    config: &TrainConfig,
    references: Option<&References>,
) -> Result<RunOutcome, TrainError> {
    strategy.validate()?;
    if strategy.joint {
        trainer::run_joint(stream, held_out, config, references)
    } else {
        trainer::run_sequence(stream, held_out, config, strategy, references, &mut ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_strategies_have_expected_flags() {
        let k = Strategy::krkc();
        assert!(k.use_exemplars && k.use_distillation);
        assert_eq!(k.teacher_updates, TeacherUpdates::Refreshing);
        assert_eq!(k.consolidation, Consolidation::MscFsc);
        let f = Strategy::frozen_teacher();
        assert_eq!((f.use_exemplars, f.use_distillation), (true, true));
        assert_eq!(f.teacher_updates, TeacherUpdates::Frozen);
        assert_eq!(f.consolidation, Consolidation::None);
        let n = Strategy::naive();
        assert!(!n.use_exemplars && !n.use_distillation);
        assert_eq!(n.consolidation, Consolidation::None);
        for name in Strategy::NAMES {
            let s = Strategy::by_name(name).unwrap();
            assert_eq!(s.name, name);
            s.validate().unwrap();
        }
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut s = Strategy::krkc();
        s.use_distillation = false;
        assert!(matches!(s.validate(), Err(StrategyError::RefreshWithoutDistillation(_))));
        let mut s = Strategy::naive();
        s.consolidation = Consolidation::Msc;
        assert!(matches!(s.validate(), Err(StrategyError::ConsolidationWithoutTeacher(_))));
        let mut s = Strategy::joint();
        s.use_exemplars = true;
        assert!(matches!(s.validate(), Err(StrategyError::JointWithFlags(_))));
        assert!(matches!(Strategy::by_name("icarl"), Err(StrategyError::Unknown(..))));
    }
}
