use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;

const STYLES_JSON: &str = include_str!("../../data/styles.json");
const ADJECTIVES_JSON: &str = include_str!("../../data/adjectives.json");
const SYNONYMS_JSON: &str = include_str!("../../data/synonyms.json");

/// Word lists driving the prompt augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    styles: Vec<String>,
    adjectives: Vec<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::builtin()
    }
}

impl Vocabulary {
    /// 13 image-style descriptors, 42 attribute adjectives and the synonym
    /// table for the PACS, VLCS, OfficeHome and DomainNet class names.
    pub fn builtin() -> Self {
        let styles = serde_json::from_str(STYLES_JSON).expect("bundled styles.json");
        let adjectives = serde_json::from_str(ADJECTIVES_JSON).expect("bundled adjectives.json");
        let synonyms = serde_json::from_str(SYNONYMS_JSON).expect("bundled synonyms.json");
        Vocabulary::new(styles, adjectives, synonyms).expect("bundled vocabulary is valid")
    }

    pub fn new(
        styles: Vec<String>,
        adjectives: Vec<String>,
        synonyms: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        check_list("styles", &styles)?;
        check_list("adjectives", &adjectives)?;
        for (class, list) in &synonyms {
            check_list(&format!("synonyms of {class:?}"), list)?;
            if list.iter().any(|s| s == class) {
                return Err(Error::Config(format!(
                    "synonyms of {class:?} repeat the class name"
                )));
            }
        }
        Ok(Vocabulary {
            styles,
            adjectives,
            synonyms,
        })
    }

    /// Loads any of the three files that are given; the rest fall back to the
    /// built-in lists.
    pub fn from_files(
        styles: Option<&Path>,
        adjectives: Option<&Path>,
        synonyms: Option<&Path>,
    ) -> Result<Self> {
        let base = Vocabulary::builtin();
        let styles = match styles {
            Some(p) => read_json(p)?,
            None => base.styles,
        };
        let adjectives = match adjectives {
            Some(p) => read_json(p)?,
            None => base.adjectives,
        };
        let synonyms = match synonyms {
            Some(p) => read_json(p)?,
            None => base.synonyms,
        };
        Vocabulary::new(styles, adjectives, synonyms)
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn adjectives(&self) -> &[String] {
        &self.adjectives
    }

    pub fn synonym_table(&self) -> &BTreeMap<String, Vec<String>> {
        &self.synonyms
    }

    /// Synonyms for `class_name`; empty when none are listed.
    pub fn synonyms(&self, class_name: &str) -> &[String] {
        self.synonyms.get(class_name).map_or(&[], Vec::as_slice)
    }
}

fn check_list(what: &str, list: &[String]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Config(format!("{what}: list is empty")));
    }
    let mut seen = HashSet::new();
    for s in list {
        if s.trim().is_empty() {
            return Err(Error::Config(format!("{what}: contains an empty entry")));
        }
        if !seen.insert(s) {
            return Err(Error::Config(format!("{what}: duplicate entry {s:?}")));
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fsio::read_all(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_sizes() {
        let v = Vocabulary::builtin();
        assert_eq!(v.styles().len(), 13);
        assert_eq!(v.adjectives().len(), 42);
        assert_eq!(v.styles().first().unwrap(), "painting");
        assert_eq!(v.styles().last().unwrap(), "infograph");
        assert_eq!(v.synonyms("bike"), &["bicycle".to_string(), "cycle".to_string()]);
        assert!(v.synonyms("dog").is_empty());
    }

    #[test]
    fn builtin_synonyms_are_clean() {
        let v = Vocabulary::builtin();
        for (class, list) in v.synonym_table() {
            assert!(!list.is_empty(), "{class}");
            for s in list {
                assert!(!s.is_empty());
                assert_eq!(s.trim(), s);
                assert!(!s.contains("  "), "{s:?}");
            }
        }
        assert_eq!(v.synonyms("backpack").len(), 5);
        assert_eq!(v.synonyms("leaf"), &["leafage".to_string(), "foliage".to_string()]);
    }

    #[test]
    fn rejects_bad_lists() {
        let base = Vocabulary::builtin();
        let dup = vec!["photo".to_string(), "photo".to_string()];
        assert!(Vocabulary::new(dup, base.adjectives.clone(), BTreeMap::new()).is_err());
        let mut syn = BTreeMap::new();
        syn.insert("cat".to_string(), vec![String::new()]);
        assert!(Vocabulary::new(base.styles.clone(), base.adjectives.clone(), syn).is_err());
        let mut syn = BTreeMap::new();
        syn.insert("cat".to_string(), vec!["cat".to_string()]);
        assert!(Vocabulary::new(base.styles.clone(), base.adjectives.clone(), syn).is_err());
    }

    #[test]
    fn loads_files_with_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let syn = dir.path().join("synonyms.json");
        std::fs::write(&syn, r#"{"dog": ["hound", "canine"]}"#).unwrap();
        let v = Vocabulary::from_files(None, None, Some(&syn)).unwrap();
        assert_eq!(v.synonyms("dog").len(), 2);
        assert!(v.synonyms("bike").is_empty());
        assert_eq!(v.styles().len(), 13);
    }
}
