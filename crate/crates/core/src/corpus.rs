//! JSON-lines corpus ingestion with quality-warning filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub text: String,
    #[serde(default)]
    pub quality_warnings: BTreeSet<String>,
}

/// Warning tags dropped by default.
pub const DEFAULT_FILTER_TAGS: [&str; 6] =
    ["adult", "noisy", "header", "footer", "tiny", "short_sentences"];

pub fn default_filter_tags() -> BTreeSet<String> {
    DEFAULT_FILTER_TAGS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read: usize,
    pub retained: usize,
    pub dropped: usize,
    /// Count of dropped documents per offending tag; a document carrying
    /// several active tags counts once under each.
    pub dropped_by_tag: BTreeMap<String, usize>,
}

/// Reads JSON-lines corpus files in order, dropping any document whose
/// warnings intersect `filter_tags`. Blank lines are skipped.
pub fn ingest<P: AsRef<Path>>(
    paths: &[P],
    filter_tags: &BTreeSet<String>,
) -> Result<(Vec<CorpusDocument>, IngestReport)> {
    let mut docs = Vec::new();
    let mut report = IngestReport::default();
    for path in paths {
        let path = path.as_ref();
        let file = File::open(path)?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: CorpusDocument =
                serde_json::from_str(&line).map_err(|e| Error::CorpusFormat {
                    line: idx + 1,
                    msg: format!("{}: {e}", path.display()),
                })?;
            report.read += 1;
            let offending: Vec<&String> =
                doc.quality_warnings.intersection(filter_tags).collect();
            if offending.is_empty() {
                report.retained += 1;
                docs.push(doc);
            } else {
                report.dropped += 1;
                for tag in offending {
                    *report.dropped_by_tag.entry(tag.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    Ok((docs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn drops_documents_with_active_tags() {
        let f = write_jsonl(&[
            r#"{"text": "clean one", "quality_warnings": []}"#,
            r#"{"text": "bad", "quality_warnings": ["adult"]}"#,
            r#"{"text": "messy", "quality_warnings": ["noisy", "tiny"]}"#,
            r#"{"text": "odd but allowed", "quality_warnings": ["exotic"]}"#,
        ]);
        let (docs, report) = ingest(&[f.path()], &default_filter_tags()).unwrap();
        assert_eq!(report.read, 4);
        assert_eq!(report.retained, 2);
        assert_eq!(report.dropped, 2);
        assert_eq!(docs[0].text, "clean one");
        assert_eq!(docs[1].text, "odd but allowed");
        assert_eq!(report.dropped_by_tag["adult"], 1);
        assert_eq!(report.dropped_by_tag["noisy"], 1);
        assert_eq!(report.dropped_by_tag["tiny"], 1);
    }

    #[test]
    fn empty_tag_set_retains_everything() {
        let f = write_jsonl(&[
            r#"{"text": "a", "quality_warnings": ["adult"]}"#,
            r#"{"text": "b", "quality_warnings": ["noisy"]}"#,
        ]);
        let (docs, report) = ingest(&[f.path()], &BTreeSet::new()).unwrap();
        assert_eq!(report.retained, report.read);
        assert_eq!(docs.len(), 2);
    }

    #[test]
    fn missing_warnings_field_defaults_to_none() {
        let f = write_jsonl(&[r#"{"text": "bare"}"#]);
        let (docs, _) = ingest(&[f.path()], &default_filter_tags()).unwrap();
        assert_eq!(docs.len(), 1);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let f = write_jsonl(&[
            r#"{"text": "fine", "quality_warnings": []}"#,
            r#"{"text": 7}"#,
        ]);
        match ingest(&[f.path()], &default_filter_tags()) {
            Err(Error::CorpusFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn files_stream_in_order() {
        let a = write_jsonl(&[r#"{"text": "first"}"#]);
        let b = write_jsonl(&[r#"{"text": "second"}"#]);
        let (docs, _) = ingest(&[a.path(), b.path()], &BTreeSet::new()).unwrap();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        assert_eq!(texts, ["first", "second"]);
    }
}
