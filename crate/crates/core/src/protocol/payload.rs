//! Typed payloads carried inside envelopes.

use serde::{Deserialize, Serialize};

use crate::auth::Role;

/// What an assessment request asks for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Scope {
    CourseReport,
    StudentResult { student_id: String },
    ItemBreakdown { item_id: String },
}

/// Client to UIA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessRequest {
    pub course_id: String,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// Work handed by the UIA to an Academic or Student Agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentJob {
    pub correlation_id: String,
    pub requested_by: String,
    pub roles: Vec<Role>,
    pub course_id: String,
    pub scope: Scope,
    pub threshold: f64,
}

impl AssessmentJob {
    /// Students may only ask for their own result.
    pub fn scope_permitted(&self) -> bool {
        if self.roles.contains(&Role::Academician) || self.roles.contains(&Role::System) {
            return true;
        }
        if self.roles.contains(&Role::Student) {
            return matches!(&self.scope, Scope::StudentResult { student_id } if *student_id == self.requested_by);
        }
        false
    }
}

/// A class of records the Assessment Agent must fetch.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum DataClass {
    Scores {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        student_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        item_id: Option<String>,
    },
    Items {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        item_id: Option<String>,
    },
    Hierarchy,
}

/// Academic/Student Agent to Assessment Agent. One request may name several
/// data classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRetrieveRequest {
    pub job: AssessmentJob,
    pub classes: Vec<DataClass>,
    /// The Academic or Student Agent the result goes back to.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub reason: String,
}

impl ErrorPayload {
    pub fn new(code: impl Into<String>, reason: impl Into<String>) -> Self {
        ErrorPayload {
            code: code.into(),
            reason: reason.into(),
        }
    }

    pub fn from_value(value: &serde_json::Value) -> ErrorPayload {
        serde_json::from_value(value.clone())
            .unwrap_or_else(|_| ErrorPayload::new("Unknown", value.to_string()))
    }
}
