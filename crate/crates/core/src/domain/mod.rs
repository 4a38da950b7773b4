//! Curriculum model (outcome hierarchy, assessment items, scores) and the
//! attainment computations built on it. Everything here is a pure function
//! over immutable inputs.

mod attainment;
mod hierarchy;
mod model;

use thiserror::Error;

pub use attainment::{
    build_report, check_threshold, co_attainment, cohort_attainment, item_attainment, item_breakdown,
    po_rollup, student_result, DEFAULT_THRESHOLD,
};
pub use hierarchy::{validate_hierarchy, ValidationReport, Violation};
pub use model::*;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("score references item {score_item} but item {item} was given")]
    MismatchedItem { score_item: String, item: String },
    #[error("no item maps to course outcome {0}")]
    NoMappedItems(String),
    #[error("no student has a score")]
    EmptyCohort,
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("unknown course outcome {0}")]
    UnknownOutcome(String),
    #[error("unknown assessment item {0}")]
    UnknownItem(String),
    #[error("unknown course {0}")]
    UnknownCourse(String),
    #[error("invalid item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("invalid score for {student} on {item}: {reason}")]
    InvalidScore { student: String, item: String, reason: String },
    #[error("duplicate score for {student} on {item}")]
    DuplicateScore { student: String, item: String },
    #[error("invalid outcome hierarchy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidHierarchy(Vec<Violation>),
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl DomainError {
    /// Stable error code used in ERROR envelopes and HTTP bodies.
    pub fn code(&self) -> &'static str {
        match self {
            DomainError::MismatchedItem { .. } => "MismatchedItem",
            DomainError::NoMappedItems(_) => "NoMappedItems",
            DomainError::EmptyCohort => "EmptyCohort",
            DomainError::InvalidThreshold(_) => "InvalidThreshold",
            DomainError::UnknownOutcome(_) => "UnknownOutcome",
            DomainError::UnknownItem(_) => "UnknownItem",
            DomainError::UnknownCourse(_) => "UnknownCourse",
            DomainError::InvalidItem { .. } => "InvalidItem",
            DomainError::InvalidScore { .. } => "InvalidScore",
            DomainError::DuplicateScore { .. } => "DuplicateScore",
            DomainError::InvalidHierarchy(_) => "InvalidHierarchy",
            DomainError::Malformed(_) => "Malformed",
        }
    }
}
