//! Information-update corpus ingestion and fixed pair datasets.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selfdata::{InstructionResponsePair, PairOrigin};
use crate::text;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("missing id in record {0}")]
    MissingId(String),
    #[error("empty body in record {0}")]
    EmptyBody(String),
    #[error("pair {index} references unknown article {article_id}")]
    DanglingReference { index: usize, article_id: String },
}

/// One document of the information-update corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl Article {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Article { id: id.into(), body: body.into(), title: None, published_at: None, source_tag: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    PlainDir,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub articles: Vec<Article>,
}

impl Corpus {
    /// Builds a corpus, normalizing bodies and enforcing id uniqueness; articles end up sorted by id.
    pub fn from_articles(name: impl Into<String>, articles: Vec<Article>) -> Result<Self, IngestError> {
        let mut by_id = BTreeMap::new();
        for mut a in articles {
            if a.id.trim().is_empty() {
                return Err(IngestError::MissingId(a.body.chars().take(40).collect()));
            }
            a.body = text::normalize(&a.body);
            if a.body.trim().is_empty() {
                return Err(IngestError::EmptyBody(a.id));
            }
            a.title = a.title.map(|t| text::normalize(&t));
            if by_id.contains_key(&a.id) {
                return Err(IngestError::DuplicateId(a.id));
            }
            by_id.insert(a.id.clone(), a);
        }
        Ok(Corpus { name: name.into(), articles: by_id.into_values().collect() })
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.articles
            .binary_search_by(|a| a.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.articles[i])
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    /// Canonical JSONL serialization (one article per line, id order).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for a in &self.articles {
            out.push_str(&serde_json::to_string(a).expect("article serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_jsonl()).map_err(|e| io_err(path, e))
    }

    /// Fails if any related pair points at an article id that is not in this corpus.
    pub fn check_grounding(&self, pairs: &[InstructionResponsePair]) -> Result<(), IngestError> {
        let ids: HashSet<&str> = self.articles.iter().map(|a| a.id.as_str()).collect();
        for (index, p) in pairs.iter().enumerate() {
            if let Some(src) = &p.source_article_id {
                if !ids.contains(src.as_str()) {
                    return Err(IngestError::DanglingReference { index, article_id: src.clone() });
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.display().to_string(), source }
}

#[derive(Deserialize)]
struct RawArticle {
    id: Option<String>,
    body: Option<String>,
    title: Option<String>,
    published_at: Option<String>,
    source_tag: Option<String>,
}

/// Loads a corpus from a JSONL file or a directory holding one article per file.
pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, IngestError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let articles = match format {
        CorpusFormat::Jsonl => read_jsonl_articles(path)?,
        CorpusFormat::PlainDir => read_dir_articles(path)?,
    };
    Corpus::from_articles(name, articles)
}

fn read_jsonl_articles(path: &Path) -> Result<Vec<Article>, IngestError> {
    let rows = text::read_jsonl::<RawArticle>(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let raw = row.map_err(|e| IngestError::Malformed {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let id = raw.id.filter(|s| !s.trim().is_empty()).ok_or_else(|| IngestError::MissingId(format!("line {line}")))?;
        let body = raw.body.unwrap_or_default();
        if text::normalize(&body).trim().is_empty() {
            return Err(IngestError::EmptyBody(id));
        }
        if let Some(date) = &raw.published_at {
            if !looks_like_iso_date(date) {
                return Err(IngestError::Malformed {
                    path: path.display().to_string(),
                    line,
                    message: format!("published_at {date:?} is not an ISO-8601 date"),
                });
            }
        }
        out.push(Article { id, body, title: raw.title, published_at: raw.published_at, source_tag: raw.source_tag });
    }
    Ok(out)
}

fn read_dir_articles(path: &Path) -> Result<Vec<Article>, IngestError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
        let entry = entry.map_err(|e| io_err(path, e))?;
        let p = entry.path();
        if !p.is_file() {
            continue;
        }
        let Some(stem) = p.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if stem.starts_with('.') {
            continue;
        }
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        let body = String::from_utf8(bytes).map_err(|e| IngestError::Malformed {
            path: p.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        out.push(Article::new(stem, body));
    }
    Ok(out)
}

// YYYY-MM-DD, optionally followed by a time part.
fn looks_like_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
        && (b.len() == 10 || b[10] == b'T' || b[10] == b' ')
}

#[derive(Deserialize)]
struct RawPair {
    instruction: Option<String>,
    response: Option<String>,
    source_article_id: Option<String>,
    origin: Option<PairOrigin>,
}

/// Loads instruction-response pairs. Pairs without `source_article_id` are unrelated.
pub fn load_pairs(path: &Path) -> Result<Vec<InstructionResponsePair>, IngestError> {
    let rows = text::read_jsonl::<RawPair>(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let malformed = |message: String| IngestError::Malformed { path: path.display().to_string(), line, message };
        let raw = row.map_err(|e| malformed(e.to_string()))?;
        let instruction = raw
            .instruction
            .map(|s| text::normalize(&s))
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| malformed("missing instruction".into()))?;
        let response = raw
            .response
            .map(|s| text::normalize(&s))
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| malformed("missing response".into()))?;
        let source_article_id = raw.source_article_id.filter(|s| !s.is_empty());
        let origin = raw.origin.unwrap_or(if source_article_id.is_some() {
            PairOrigin::EvalReference
        } else {
            PairOrigin::FixedUnrelated
        });
        out.push(InstructionResponsePair { instruction, response, source_article_id, origin });
    }
    Ok(out)
}

/// Loads pairs and checks every grounded pair against `corpus`.
pub fn load_pairs_checked(path: &Path, corpus: &Corpus) -> Result<Vec<InstructionResponsePair>, IngestError> {
    let pairs = load_pairs(path)?;
    corpus.check_grounding(&pairs)?;
    Ok(pairs)
}
