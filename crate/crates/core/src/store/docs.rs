use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::auth::UserProfile;
use crate::domain::{AssessmentItem, OutcomeNode, Score};

use super::{repository_for, StoreError};

/// Document stored under `score/<course>/<item>/<student>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreDoc {
    pub course_id: String,
    pub item_id: String,
    pub student_id: String,
    pub raw: f64,
}

impl ScoreDoc {
    pub fn key(&self) -> String {
        format!("score/{}/{}/{}", self.course_id, self.item_id, self.student_id)
    }

    pub fn to_score(&self) -> Score {
        Score::new(&self.student_id, &self.item_id, self.raw)
    }
}

fn fail(key: &str, reason: impl Into<String>) -> StoreError {
    StoreError::ValidationFailure {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(key: &str, doc: &Value) -> Result<T, StoreError> {
    serde_json::from_value(doc.clone()).map_err(|e| fail(key, e.to_string()))
}

fn id_matches(key: &str, rest: &str, id: &str) -> Result<(), StoreError> {
    if rest == id {
        Ok(())
    } else {
        Err(fail(key, format!("key does not match id {id:?}")))
    }
}

/// Checks `doc` against the domain invariants for the type its key names.
/// `lookup` reads the current document for another key (scores need their item).
pub(super) fn validate(key: &str, doc: &Value, lookup: impl Fn(&str) -> Option<Value>) -> Result<(), StoreError> {
    let (_, prefix, rest) = repository_for(key)?;
    match prefix {
        "score" => {
            let score: ScoreDoc = parse(key, doc)?;
            if score.key() != key {
                return Err(fail(key, "key does not match course/item/student"));
            }
            let item_doc = lookup(&format!("item/{}", score.item_id))
                .ok_or_else(|| fail(key, format!("unknown item {}", score.item_id)))?;
            let item: AssessmentItem = parse(key, &item_doc)?;
            if item.course_id != score.course_id {
                return Err(fail(key, format!("item {} belongs to course {}", item.id, item.course_id)));
            }
            score.to_score().check_against(&item).map_err(|e| fail(key, e))
        }
        "item" => {
            let item: AssessmentItem = parse(key, doc)?;
            id_matches(key, rest, &item.id)?;
            item.check().map_err(|e| fail(key, e))
        }
        "outcome" => {
            let node: OutcomeNode = parse(key, doc)?;
            id_matches(key, rest, &node.id)
        }
        "user" => {
            let profile: UserProfile = parse(key, doc)?;
            id_matches(key, rest, &profile.principal)
        }
        _ => Err(StoreError::InvalidKeyPrefix(key.to_string())),
    }
}
