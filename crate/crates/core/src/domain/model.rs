use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type OutcomeId = String;
pub type ItemId = String;
pub type CourseId = String;
pub type StudentId = String;

/// Position of an outcome in the curriculum hierarchy, lowest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeLevel {
    UnitOutcome,
    LessonOutcome,
    CourseOutcome,
    ExitOutcome,
    ProgramOutcome,
}

impl OutcomeLevel {
    pub fn rank(self) -> u8 {
        match self {
            OutcomeLevel::UnitOutcome => 0,
            OutcomeLevel::LessonOutcome => 1,
            OutcomeLevel::CourseOutcome => 2,
            OutcomeLevel::ExitOutcome => 3,
            OutcomeLevel::ProgramOutcome => 4,
        }
    }

    /// The level every parent of a node at this level must have.
    pub fn parent_level(self) -> Option<OutcomeLevel> {
        match self {
            OutcomeLevel::UnitOutcome => Some(OutcomeLevel::LessonOutcome),
            OutcomeLevel::LessonOutcome => Some(OutcomeLevel::CourseOutcome),
            OutcomeLevel::CourseOutcome => Some(OutcomeLevel::ExitOutcome),
            OutcomeLevel::ExitOutcome => Some(OutcomeLevel::ProgramOutcome),
            OutcomeLevel::ProgramOutcome => None,
        }
    }
}

impl fmt::Display for OutcomeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeNode {
    pub id: OutcomeId,
    pub level: OutcomeLevel,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parent_ids: Vec<OutcomeId>,
}

impl OutcomeNode {
    pub fn new(id: impl Into<String>, level: OutcomeLevel, parents: &[&str]) -> Self {
        OutcomeNode {
            id: id.into(),
            level,
            description: String::new(),
            parent_ids: parents.iter().map(|p| p.to_string()).collect(),
        }
    }
}

/// Assessment method. Metadata only: every kind is scored the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemKind {
    Test,
    Assignment,
    Presentation,
    Project,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentItem {
    pub id: ItemId,
    pub course_id: CourseId,
    pub kind: ItemKind,
    pub max_marks: f64,
    /// Course outcome id to non-negative weight.
    pub co_weights: BTreeMap<OutcomeId, f64>,
}

impl AssessmentItem {
    /// Checks `max_marks > 0` and that weights are finite, non-negative and
    /// not all zero. Returns the reason on failure.
    pub fn check(&self) -> Result<(), String> {
        if !(self.max_marks.is_finite() && self.max_marks > 0.0) {
            return Err(format!("max_marks must be > 0, got {}", self.max_marks));
        }
        if let Some((co, w)) = self
            .co_weights
            .iter()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(format!("weight for {co} must be a non-negative number, got {w}"));
        }
        if !self.co_weights.values().any(|w| *w > 0.0) {
            return Err("at least one co_weight must be > 0".to_string());
        }
        Ok(())
    }

    pub fn weight_for(&self, co: &str) -> f64 {
        self.co_weights.get(co).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub student_id: StudentId,
    pub item_id: ItemId,
    pub raw: f64,
}

impl Score {
    pub fn new(student: impl Into<String>, item: impl Into<String>, raw: f64) -> Self {
        Score {
            student_id: student.into(),
            item_id: item.into(),
            raw,
        }
    }

    pub fn check_against(&self, item: &AssessmentItem) -> Result<(), String> {
        if !(self.raw.is_finite() && self.raw >= 0.0 && self.raw <= item.max_marks) {
            return Err(format!(
                "raw score {} outside [0, {}] for item {}",
                self.raw, item.max_marks, item.id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mean: f64,
    pub fraction_above_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttainmentReport {
    pub course_id: CourseId,
    pub per_student: BTreeMap<StudentId, BTreeMap<OutcomeId, f64>>,
    pub cohort: BTreeMap<OutcomeId, CohortStats>,
    pub po_rollup: BTreeMap<OutcomeId, f64>,
    pub threshold: f64,
}

/// One student's view of a course. Built from that student's scores only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub course_id: CourseId,
    pub student_id: StudentId,
    pub per_item: BTreeMap<ItemId, f64>,
    pub per_co: BTreeMap<OutcomeId, f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBreakdown {
    pub course_id: CourseId,
    pub item_id: ItemId,
    pub kind: ItemKind,
    pub max_marks: f64,
    pub per_student: BTreeMap<StudentId, f64>,
    pub mean: f64,
}
