use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{enumerate_space, render_prompt, AugmentCombo, Vocabulary};
use crate::error::{Error, Result};
use crate::fsio;

/// One prompt to embed, as read by the exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub class_name: String,
    pub id: String,
    pub label: i64,
    pub text: String,
}

/// Every augmented prompt for every class; the label is the class position.
pub fn plan_manifest(vocab: &Vocabulary, classes: &[String], combo: AugmentCombo) -> Result<Vec<ManifestRow>> {
    check_classes(classes)?;
    let mut rows = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for (k, spec) in enumerate_space(vocab, class, combo).iter().enumerate() {
            rows.push(ManifestRow {
                class_name: class.clone(),
                id: format!("c{label}-{k}"),
                label: label as i64,
                text: render_prompt(vocab, spec)?,
            });
        }
    }
    Ok(rows)
}

fn check_classes(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Config("class list is empty".into()));
    }
    let mut seen = HashSet::new();
    for c in classes {
        if c.trim().is_empty() || c.trim() != c {
            return Err(Error::Config(format!("bad class name {c:?}")));
        }
        if !seen.insert(c) {
            return Err(Error::Config(format!("class {c:?} listed twice")));
        }
    }
    Ok(())
}

/// One class name per line; blank lines and `#` comments are skipped.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let bytes = fsio::read_all(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    check_classes(&classes)?;
    Ok(classes)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("manifest rows serialize");
        out.push(b'\n');
    }
    fsio::write_atomic(path, &out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let bytes = fsio::read_all(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Metadata(format!("{}: not UTF-8", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Metadata(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
