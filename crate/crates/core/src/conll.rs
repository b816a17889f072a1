//! CoNLL-style tab-separated corpora.
//!
//! One token per line, blank lines between sentences, `#` comment lines.
//! The generated corpora use the columns `token`, `cat_tag`, `bio_tag`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HxError, Result};
use crate::synthdata::{AnnotatedSentence, BIO_LABELS, CATEGORY_LABELS, ENTITY_TYPES};

/// Which columns hold what, and the label sets tags are validated against.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub token: usize,
    pub cat: Option<usize>,
    pub bio: Option<usize>,
    pub cat_labels: Vec<String>,
    pub entity_types: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            token: 0,
            cat: Some(1),
            bio: Some(2),
            cat_labels: CATEGORY_LABELS.iter().map(|s| s.to_string()).collect(),
            entity_types: ENTITY_TYPES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConllCorpus {
    pub sentences: Vec<AnnotatedSentence>,
    /// Number of illegal `I-X` tags rewritten to `B-X`.
    pub repairs: usize,
}

fn validate_bio(tag: &str, types: &[String], line: usize) -> Result<()> {
    if tag == "O" {
        return Ok(());
    }
    match tag.split_once('-') {
        Some(("B" | "I", ty)) if types.iter().any(|t| t == ty) => Ok(()),
        _ => Err(HxError::Label { line, tag: tag.to_string() }),
    }
}

/// Rewrites `I-X` that does not continue an `X` span into `B-X`.
/// Returns the number of repairs.
pub fn repair_bio(tags: &mut [String]) -> usize {
    let mut repairs = 0;
    let mut prev_type: Option<String> = None;
    for tag in tags.iter_mut() {
        if let Some(ty) = tag.strip_prefix("I-") {
            if prev_type.as_deref() != Some(ty) {
                *tag = format!("B-{ty}");
                repairs += 1;
            }
        }
        prev_type = tag.split_once('-').map(|(_, t)| t.to_string());
    }
    repairs
}

pub fn parse_conll(text: &str, language: &str, columns: &ColumnMap) -> Result<ConllCorpus> {
    let needed = [Some(columns.token), columns.cat, columns.bio].into_iter().flatten().max().unwrap_or(0) + 1;
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut current = AnnotatedSentence {
        tokens: Vec::new(),
        cat_tags: Vec::new(),
        bio_tags: Vec::new(),
        language: language.to_string(),
        underlying: Vec::new(),
    };
    let mut width: Option<usize> = None;
    let mut flush = |s: &mut AnnotatedSentence, repairs: &mut usize| {
        if !s.tokens.is_empty() {
            *repairs += repair_bio(&mut s.bio_tags);
            let fresh = AnnotatedSentence { language: s.language.clone(), ..Default::default() };
            sentences.push(std::mem::replace(s, fresh));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current, &mut repairs);
            width = None;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match width {
            Some(w) if w != cols.len() => {
                return Err(HxError::Parse { line: line_no, msg: format!("expected {w} columns, found {}", cols.len()) })
            }
            _ => width = Some(cols.len()),
        }
        if cols.len() < needed {
            return Err(HxError::Parse {
                line: line_no,
                msg: format!("missing column: need {needed} columns, found {}", cols.len()),
            });
        }
        current.tokens.push(cols[columns.token].to_string());
        if let Some(c) = columns.cat {
            let tag = cols[c];
            if !columns.cat_labels.iter().any(|l| l == tag) {
                return Err(HxError::Label { line: line_no, tag: tag.to_string() });
            }
            current.cat_tags.push(tag.to_string());
        }
        if let Some(c) = columns.bio {
            validate_bio(cols[c], &columns.entity_types, line_no)?;
            current.bio_tags.push(cols[c].to_string());
        }
    }
    flush(&mut current, &mut repairs);
    if repairs > 0 {
        log::warn!("repaired {repairs} illegal I- tags while reading {language}");
    }
    Ok(ConllCorpus { sentences, repairs })
}

pub fn read_conll(path: &Path, language: &str, columns: &ColumnMap) -> Result<ConllCorpus> {
    parse_conll(&fs::read_to_string(path)?, language, columns)
}

/// Sidecar written next to every generated corpus file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSidecar {
    pub language: String,
    pub split: String,
    pub spec_hash: String,
    pub seed: u64,
    pub sentences: usize,
}

pub fn write_conll<W: Write>(w: &mut W, sentences: &[AnnotatedSentence]) -> Result<()> {
    writeln!(w, "# token\tcat_tag\tbio_tag")?;
    for s in sentences {
        for i in 0..s.tokens.len() {
            let cat = s.cat_tags.get(i).map(String::as_str).unwrap_or("_");
            let bio = s.bio_tags.get(i).map(String::as_str).unwrap_or("O");
            writeln!(w, "{}\t{cat}\t{bio}", s.tokens[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_corpus(path: &Path, sentences: &[AnnotatedSentence], sidecar: &CorpusSidecar) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_conll(&mut f, sentences)?;
    f.flush()?;
    let side = path.with_extension("meta.json");
    fs::write(side, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn default_bio_labels() -> Vec<String> {
    BIO_LABELS.iter().map(|s| s.to_string()).collect()
}
