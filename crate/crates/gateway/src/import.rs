use imobe_core::auth::Credentials;
use imobe_core::store::{ObeStore, ScoreDoc};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: [&str; 4] = ["course_id", "item_id", "student_id", "raw_score"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line in the uploaded file; the header is line 1.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderError(pub String);

fn parse_row(record: &csv::StringRecord) -> Result<ScoreDoc, String> {
    if record.len() != CSV_HEADER.len() {
        return Err(format!("Malformed: expected 4 fields, found {}", record.len()));
    }
    let field = |i: usize| record[i].trim().to_string();
    let raw = field(3)
        .parse::<f64>()
        .map_err(|_| format!("Malformed: raw_score {:?} is not a number", &record[3]))?;
    if (0..3).any(|i| field(i).is_empty()) {
        return Err("Malformed: empty identifier".to_string());
    }
    Ok(ScoreDoc {
        course_id: field(0),
        item_id: field(1),
        student_id: field(2),
        raw,
    })
}

/// Imports score rows with the caller's credentials. Each accepted row is
/// one store write; bad rows are reported and skipped.
pub fn import_scores(
    store: &ObeStore,
    credentials: &Credentials,
    body: &[u8],
) -> Result<ImportReport, HeaderError> {
    let body = body.strip_prefix(b"\xEF\xBB\xBF".as_slice()).unwrap_or(body);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body);
    let header = reader.headers().map_err(|e| HeaderError(e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(HeaderError(format!(
            "expected header {}, found {:?}",
            CSV_HEADER.join(","),
            names.join(",")
        )));
    }
    let mut report = ImportReport::default();
    for row in reader.records() {
        let (line, parsed) = match row {
            Ok(record) => (record.position().map_or(0, |p| p.line()), parse_row(&record)),
            Err(e) => (e.position().map_or(0, |p| p.line()), Err(format!("Malformed: {e}"))),
        };
        let outcome = parsed.and_then(|doc| {
            let value = serde_json::to_value(&doc).expect("score serializes");
            store
                .put(&doc.key(), value, credentials)
                .map_err(|e| format!("{}: {e}", e.code()))
        });
        match outcome {
            Ok(_) => report.accepted += 1,
            Err(reason) => report.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok(report)
}
