//! Story corpora as JSON-lines files.
//!
//! Each line is one story object: a `story_id`, one sentence string per
//! photo slot, and the slot features — either inline as a row-major array of
//! arrays under `features`, or in a separate feature file named by
//! `features_path` (resolved relative to the corpus file).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::features::read_features;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::StoryExample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One corpus line as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub story_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<String>,
    pub sentences: Vec<String>,
}

/// Stories ready for training or evaluation, with their ids kept parallel
/// for reporting.
#[derive(Debug, Clone)]
pub struct Corpus<R: Scalar> {
    pub ids: Vec<String>,
    pub stories: Vec<StoryExample<R>>,
}

impl<R: Scalar> Corpus<R> {
    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }
}

/// Write records as one JSON object per line.
pub fn write_corpus(path: &Path, records: &[StoryRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a corpus, resolving feature files and encoding sentences with the
/// given vocabulary. Every story must have exactly one feature source, one
/// sentence per slot, and the same feature width as the rest of the corpus.
pub fn load_corpus<R: Scalar>(path: &Path, vocab: &Vocabulary) -> Result<Corpus<R>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let fail = |line: usize, reason: String| Error::Format {
        path: path.display().to_string(),
        reason: format!("line {}: {reason}", line + 1),
    };

    let mut ids = Vec::new();
    let mut stories = Vec::new();
    let mut seen = HashSet::new();
    let mut width: Option<usize> = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoryRecord = serde_json::from_str(line)
            .map_err(|e| fail(line_no, format!("invalid story object: {e}")))?;
        if !seen.insert(rec.story_id.clone()) {
            return Err(fail(
                line_no,
                format!("duplicate story_id {:?}", rec.story_id),
            ));
        }

        let features: Tensor<R> = match (&rec.features, &rec.features_path) {
            (Some(rows), None) => {
                let row_refs: Vec<Vec<R>> = rows
                    .iter()
                    .map(|r| r.iter().map(|&v| R::from_f64(v)).collect())
                    .collect();
                Tensor::from_rows(&row_refs)
                    .map_err(|e| fail(line_no, format!("bad inline features: {e}")))?
            }
            (None, Some(rel)) => read_features(&base.join(rel))?,
            _ => {
                return Err(fail(
                    line_no,
                    "story needs exactly one of features / features_path".into(),
                ))
            }
        };
        if !features.all_finite() {
            return Err(fail(line_no, "non-finite feature value".into()));
        }
        if features.shape()[0] != rec.sentences.len() {
            return Err(fail(
                line_no,
                format!(
                    "{} feature rows but {} sentences",
                    features.shape()[0],
                    rec.sentences.len()
                ),
            ));
        }
        match width {
            None => width = Some(features.shape()[1]),
            Some(w) if w != features.shape()[1] => {
                return Err(fail(
                    line_no,
                    format!("feature width {} differs from {w}", features.shape()[1]),
                ))
            }
            _ => {}
        }

        let sentences: Vec<Vec<u32>> = rec.sentences.iter().map(|s| vocab.encode(s)).collect();
        if let Some(empty) = sentences.iter().position(|s| s.len() < 2) {
            return Err(fail(line_no, format!("slot {empty} has an empty sentence")));
        }
        ids.push(rec.story_id);
        stories.push(StoryExample {
            features,
            sentences,
        });
    }
    Ok(Corpus { ids, stories })
}
