//! Aligned plain-text tables for `--pretty` output.

use serde_json::Value;

/// Renders rows under a header, padding every column to its widest cell.
/// Cells that look numeric are right-aligned.
pub fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let columns = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(columns) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = (0..columns)
            .map(|i| {
                let cell = cells.get(i).map(String::as_str).unwrap_or("");
                if i > 0 && cell.parse::<f64>().is_ok() {
                    format!("{cell:>w$}", w = widths[i])
                } else {
                    format!("{cell:<w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = vec![line(header)];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.extend(rows.iter().map(|r| line(r)));
    out.join("\n")
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => format!("{:.4}", n.as_f64().unwrap_or_default()),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

fn keys(map: Option<&serde_json::Map<String, Value>>) -> Vec<String> {
    map.map(|m| m.keys().cloned().collect()).unwrap_or_default()
}

/// Table form of a presented report: a course report, a student result or
/// an item breakdown.
pub fn report(doc: &Value) -> String {
    let mut sections = Vec::new();
    let title = |label: &str| {
        let course = doc.get("course_id").map(cell).unwrap_or_default();
        let threshold = doc.get("threshold").map(cell).unwrap_or_default();
        format!("{label} for {course} (threshold {threshold})")
    };
    if let Some(per_student) = doc.get("per_student").and_then(Value::as_object) {
        if let Some(cohort) = doc.get("cohort").and_then(Value::as_object) {
            sections.push(title("Course report"));
            let cos = keys(Some(cohort));
            let mut header = vec!["student".to_string()];
            header.extend(cos.iter().cloned());
            let mut rows: Vec<Vec<String>> = per_student
                .iter()
                .map(|(student, row)| {
                    let mut r = vec![student.clone()];
                    r.extend(cos.iter().map(|co| cell(&row[co])));
                    r
                })
                .collect();
            for (label, field) in [("mean", "mean"), ("fraction >= threshold", "fraction_above_threshold")] {
                let mut r = vec![label.to_string()];
                r.extend(cos.iter().map(|co| cell(&cohort[co][field])));
                rows.push(r);
            }
            sections.push(render(&header, &rows));
            if let Some(po) = doc.get("po_rollup").and_then(Value::as_object) {
                let rows: Vec<Vec<String>> = po.iter().map(|(id, v)| vec![id.clone(), cell(v)]).collect();
                sections.push(render(&["outcome".to_string(), "attainment".to_string()], &rows));
            }
        } else {
            sections.push(format!(
                "{} {}",
                title("Item breakdown"),
                doc.get("item_id").map(cell).unwrap_or_default()
            ));
            let mut rows: Vec<Vec<String>> = per_student.iter().map(|(s, v)| vec![s.clone(), cell(v)]).collect();
            rows.push(vec!["mean".to_string(), doc.get("mean").map(cell).unwrap_or_default()]);
            sections.push(render(&["student".to_string(), "fraction".to_string()], &rows));
        }
    } else if let Some(per_co) = doc.get("per_co").and_then(Value::as_object) {
        sections.push(format!(
            "{} {}",
            title("Student result"),
            doc.get("student_id").map(cell).unwrap_or_default()
        ));
        if let Some(per_item) = doc.get("per_item").and_then(Value::as_object) {
            let rows: Vec<Vec<String>> = per_item.iter().map(|(k, v)| vec![k.clone(), cell(v)]).collect();
            sections.push(render(&["item".to_string(), "fraction".to_string()], &rows));
        }
        let rows: Vec<Vec<String>> = per_co.iter().map(|(k, v)| vec![k.clone(), cell(v)]).collect();
        sections.push(render(&["outcome".to_string(), "attainment".to_string()], &rows));
    } else {
        sections.push(serde_json::to_string_pretty(doc).unwrap_or_default());
    }
    sections.join("\n\n")
}
