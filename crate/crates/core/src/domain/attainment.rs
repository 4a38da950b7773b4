//! Attainment arithmetic.
//!
//! Every value is a normalized weighted mean of `raw / max_marks` fractions,
//! so all outputs stay in `[0, 1]`. A student with no score on a mapped item
//! is counted as scoring zero on it. Summation always runs in item-list or
//! key order so results are reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use super::hierarchy::validate_hierarchy;
use super::model::*;
use super::DomainError;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Slack on threshold comparisons, so a value that is exactly at the
/// threshold in exact arithmetic still counts after rounding.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

pub fn check_threshold(threshold: f64) -> Result<(), DomainError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(DomainError::InvalidThreshold(threshold))
    }
}

pub fn item_attainment(score: &Score, item: &AssessmentItem) -> Result<f64, DomainError> {
    if score.item_id != item.id {
        return Err(DomainError::MismatchedItem {
            score_item: score.item_id.clone(),
            item: item.id.clone(),
        });
    }
    item.check().map_err(|reason| DomainError::InvalidItem {
        id: item.id.clone(),
        reason,
    })?;
    score.check_against(item).map_err(|reason| DomainError::InvalidScore {
        student: score.student_id.clone(),
        item: item.id.clone(),
        reason,
    })?;
    Ok(score.raw / item.max_marks)
}

/// Per-CO attainment of one student. `student_scores` must all belong to the
/// same student.
pub fn co_attainment(
    student_scores: &[Score],
    items: &[AssessmentItem],
    co: &str,
) -> Result<f64, DomainError> {
    let by_item = index_student_scores(student_scores, items)?;
    weighted_co(&by_item, items, co)
}

/// Indexes one student's scores by item, rejecting unknown items, duplicate
/// scores and out-of-range marks.
fn index_student_scores<'a>(
    student_scores: &'a [Score],
    items: &[AssessmentItem],
) -> Result<BTreeMap<&'a str, &'a Score>, DomainError> {
    let mut by_item = BTreeMap::new();
    for score in student_scores {
        let item = items
            .iter()
            .find(|i| i.id == score.item_id)
            .ok_or_else(|| DomainError::UnknownItem(score.item_id.clone()))?;
        score.check_against(item).map_err(|reason| DomainError::InvalidScore {
            student: score.student_id.clone(),
            item: item.id.clone(),
            reason,
        })?;
        if by_item.insert(score.item_id.as_str(), score).is_some() {
            return Err(DomainError::DuplicateScore {
                student: score.student_id.clone(),
                item: score.item_id.clone(),
            });
        }
    }
    Ok(by_item)
}

fn weighted_co(
    by_item: &BTreeMap<&str, &Score>,
    items: &[AssessmentItem],
    co: &str,
) -> Result<f64, DomainError> {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for item in items {
        let w = item.weight_for(co);
        if w > 0.0 {
            let fraction = by_item
                .get(item.id.as_str())
                .map(|s| s.raw / item.max_marks)
                .unwrap_or(0.0);
            weighted += w * fraction;
            total += w;
        }
    }
    if total > 0.0 {
        Ok(weighted / total)
    } else {
        Err(DomainError::NoMappedItems(co.to_string()))
    }
}

fn group_by_student(scores: &[Score]) -> BTreeMap<&str, Vec<Score>> {
    let mut grouped: BTreeMap<&str, Vec<Score>> = BTreeMap::new();
    for score in scores {
        grouped.entry(score.student_id.as_str()).or_default().push(score.clone());
    }
    grouped
}

fn stats_from(values: &[f64], threshold: f64) -> CohortStats {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let above = values.iter().filter(|v| **v >= threshold - THRESHOLD_TOLERANCE).count() as f64;
    CohortStats {
        mean: sum / n,
        fraction_above_threshold: above / n,
    }
}

/// Mean and threshold fraction over every student with at least one score.
pub fn cohort_attainment(
    all_scores: &[Score],
    items: &[AssessmentItem],
    co: &str,
    threshold: f64,
) -> Result<CohortStats, DomainError> {
    check_threshold(threshold)?;
    let grouped = group_by_student(all_scores);
    if grouped.is_empty() {
        return Err(DomainError::EmptyCohort);
    }
    let values = grouped
        .values()
        .map(|scores| co_attainment(scores, items, co))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(stats_from(&values, threshold))
}

/// Program outcomes reachable from a course outcome through its Exit parents.
fn reachable_programs<'a>(
    co: &str,
    by_id: &BTreeMap<&str, &'a OutcomeNode>,
) -> Result<BTreeSet<&'a str>, DomainError> {
    let node = by_id
        .get(co)
        .filter(|n| n.level == OutcomeLevel::CourseOutcome)
        .ok_or_else(|| DomainError::UnknownOutcome(co.to_string()))?;
    let mut programs = BTreeSet::new();
    for exit in node.parent_ids.iter().filter_map(|p| by_id.get(p.as_str())) {
        if exit.level != OutcomeLevel::ExitOutcome {
            continue;
        }
        for program in exit.parent_ids.iter().filter_map(|p| by_id.get(p.as_str())) {
            if program.level == OutcomeLevel::ProgramOutcome {
                programs.insert(program.id.as_str());
            }
        }
    }
    Ok(programs)
}

/// Unweighted mean of the CO values reaching each PO. POs no measured CO
/// reaches are left out.
pub fn po_rollup(
    co_values: &BTreeMap<OutcomeId, f64>,
    hierarchy: &[OutcomeNode],
) -> Result<BTreeMap<OutcomeId, f64>, DomainError> {
    let by_id: BTreeMap<&str, &OutcomeNode> = hierarchy.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (co, value) in co_values {
        for po in reachable_programs(co, &by_id)? {
            let slot = sums.entry(po).or_insert((0.0, 0));
            slot.0 += value;
            slot.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(po, (sum, n))| (po.to_string(), sum / n as f64))
        .collect())
}

/// Items of `course_id`, each checked against the item invariants.
fn course_items(course_id: &str, items: &[AssessmentItem]) -> Result<Vec<AssessmentItem>, DomainError> {
    let selected: Vec<AssessmentItem> = items.iter().filter(|i| i.course_id == course_id).cloned().collect();
    if selected.is_empty() {
        return Err(DomainError::UnknownCourse(course_id.to_string()));
    }
    for item in &selected {
        item.check().map_err(|reason| DomainError::InvalidItem {
            id: item.id.clone(),
            reason,
        })?;
    }
    Ok(selected)
}

/// Full course report: per-student CO attainment, cohort statistics and the
/// PO rollup of cohort means.
pub fn build_report(
    course_id: &str,
    scores: &[Score],
    items: &[AssessmentItem],
    hierarchy: &[OutcomeNode],
    threshold: f64,
) -> Result<AttainmentReport, DomainError> {
    check_threshold(threshold)?;
    let validation = validate_hierarchy(hierarchy);
    if !validation.is_valid() {
        return Err(DomainError::InvalidHierarchy(validation.violations));
    }
    let items = course_items(course_id, items)?;

    let grouped = group_by_student(scores);
    let mut indexed = BTreeMap::new();
    for (student, student_scores) in &grouped {
        indexed.insert(*student, index_student_scores(student_scores, &items)?);
    }
    if indexed.is_empty() {
        return Err(DomainError::EmptyCohort);
    }

    let cos: BTreeSet<&str> = items
        .iter()
        .flat_map(|i| i.co_weights.iter().filter(|(_, w)| **w > 0.0).map(|(co, _)| co.as_str()))
        .collect();
    let by_id: BTreeMap<&str, &OutcomeNode> = hierarchy.iter().map(|n| (n.id.as_str(), n)).collect();
    for co in &cos {
        reachable_programs(co, &by_id)?;
    }

    let mut per_student = BTreeMap::new();
    for (student, by_item) in &indexed {
        let mut row = BTreeMap::new();
        for co in &cos {
            row.insert(co.to_string(), weighted_co(by_item, &items, co)?);
        }
        per_student.insert(student.to_string(), row);
    }

    let mut cohort = BTreeMap::new();
    for co in &cos {
        let values: Vec<f64> = per_student.values().map(|row| row[*co]).collect();
        cohort.insert(co.to_string(), stats_from(&values, threshold));
    }
    let means: BTreeMap<OutcomeId, f64> = cohort.iter().map(|(co, s)| (co.clone(), s.mean)).collect();
    let po_rollup = po_rollup(&means, hierarchy)?;

    Ok(AttainmentReport {
        course_id: course_id.to_string(),
        per_student,
        cohort,
        po_rollup,
        threshold,
    })
}

/// A single student's slice. Only `scores` belonging to `student_id` are used.
pub fn student_result(
    course_id: &str,
    student_id: &str,
    scores: &[Score],
    items: &[AssessmentItem],
    threshold: f64,
) -> Result<StudentResult, DomainError> {
    check_threshold(threshold)?;
    let items = course_items(course_id, items)?;
    let own: Vec<Score> = scores.iter().filter(|s| s.student_id == student_id).cloned().collect();
    if own.is_empty() {
        return Err(DomainError::EmptyCohort);
    }
    let by_item = index_student_scores(&own, &items)?;
    let per_item = by_item
        .iter()
        .map(|(item, score)| {
            let max = items.iter().find(|i| i.id == *item).map(|i| i.max_marks).unwrap_or(1.0);
            (item.to_string(), score.raw / max)
        })
        .collect();
    let cos: BTreeSet<&str> = items
        .iter()
        .flat_map(|i| i.co_weights.iter().filter(|(_, w)| **w > 0.0).map(|(co, _)| co.as_str()))
        .collect();
    let mut per_co = BTreeMap::new();
    for co in cos {
        per_co.insert(co.to_string(), weighted_co(&by_item, &items, co)?);
    }
    Ok(StudentResult {
        course_id: course_id.to_string(),
        student_id: student_id.to_string(),
        per_item,
        per_co,
        threshold,
    })
}

/// Per-student fraction on one item plus the mean over students who have a score.
pub fn item_breakdown(item: &AssessmentItem, scores: &[Score]) -> Result<ItemBreakdown, DomainError> {
    let mut per_student = BTreeMap::new();
    for score in scores.iter().filter(|s| s.item_id == item.id) {
        let value = item_attainment(score, item)?;
        if per_student.insert(score.student_id.clone(), value).is_some() {
            return Err(DomainError::DuplicateScore {
                student: score.student_id.clone(),
                item: item.id.clone(),
            });
        }
    }
    if per_student.is_empty() {
        return Err(DomainError::EmptyCohort);
    }
    let mean = per_student.values().sum::<f64>() / per_student.len() as f64;
    Ok(ItemBreakdown {
        course_id: item.course_id.clone(),
        item_id: item.id.clone(),
        kind: item.kind,
        max_marks: item.max_marks,
        per_student,
        mean,
    })
}
