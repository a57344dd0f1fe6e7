//! Prompt augmentations: style descriptions, synonym replacement, attribute
//! adjectives and statement-order swapping.

mod batch;
mod manifest;
mod vocab;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batch, BankIndex, Batch};
pub use manifest::{plan_manifest, read_class_list, read_manifest, write_manifest, ManifestRow};
pub use vocab::Vocabulary;

/// Where the style clause goes relative to the noun phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Order {
    Plain,
    /// "a {style} of a {noun}"
    Pc,
    /// "a {noun} in a {style}"
    Cp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub class_name: String,
    pub synonym: Option<usize>,
    pub style: Option<usize>,
    pub adjective: Option<usize>,
    pub order: Order,
}

impl PromptSpec {
    pub fn plain(class_name: impl Into<String>) -> Self {
        PromptSpec {
            class_name: class_name.into(),
            synonym: None,
            style: None,
            adjective: None,
            order: Order::Plain,
        }
    }

    pub fn with_style(mut self, style: usize, order: Order) -> Self {
        self.style = Some(style);
        self.order = order;
        self
    }

    pub fn with_adjective(mut self, adjective: usize) -> Self {
        self.adjective = Some(adjective);
        self
    }

    pub fn with_synonym(mut self, synonym: usize) -> Self {
        self.synonym = Some(synonym);
        self
    }
}

/// Which augmentations are active. Always holds at least one flag, and SSO
/// only together with ISD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentCombo {
    isd: bool,
    src: bool,
    aac: bool,
    sso: bool,
}

impl AugmentCombo {
    pub fn new(isd: bool, src: bool, aac: bool, sso: bool) -> Result<Self> {
        if !(isd || src || aac || sso) {
            return Err(Error::Config("augmentation combo needs at least one flag".into()));
        }
        if sso && !isd {
            return Err(Error::Config("SSO requires ISD".into()));
        }
        Ok(AugmentCombo { isd, src, aac, sso })
    }

    pub fn isd(&self) -> bool {
        self.isd
    }
    pub fn src(&self) -> bool {
        self.src
    }
    pub fn aac(&self) -> bool {
        self.aac
    }
    pub fn sso(&self) -> bool {
        self.sso
    }
}

impl Default for AugmentCombo {
    /// ISD+AAC+SSO
    fn default() -> Self {
        AugmentCombo {
            isd: true,
            src: false,
            aac: true,
            sso: true,
        }
    }
}

impl FromStr for AugmentCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = [false; 4];
        for tok in s.split('+') {
            let i = match tok.trim().to_ascii_uppercase().as_str() {
                "ISD" => 0,
                "SRC" => 1,
                "AAC" => 2,
                "SSO" => 3,
                other => {
                    return Err(Error::Config(format!(
                        "unknown augmentation {other:?} in {s:?} (expected ISD, SRC, AAC, SSO)"
                    )))
                }
            };
            if flags[i] {
                return Err(Error::Config(format!("augmentation repeated in {s:?}")));
            }
            flags[i] = true;
        }
        AugmentCombo::new(flags[0], flags[1], flags[2], flags[3])
    }
}

impl fmt::Display for AugmentCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.isd, "ISD"),
            (self.src, "SRC"),
            (self.aac, "AAC"),
            (self.sso, "SSO"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        f.write_str(&on.join("+"))
    }
}

impl Serialize for AugmentCombo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AugmentCombo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// "an" before a vowel letter, "a" otherwise.
pub fn article(next_word: &str) -> &'static str {
    match next_word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn with_article(words: &str) -> String {
    format!("{} {}", article(words), words)
}

pub fn render_prompt(vocab: &Vocabulary, spec: &PromptSpec) -> Result<String> {
    let noun = match spec.synonym {
        None => spec.class_name.as_str(),
        Some(i) => vocab
            .synonyms(&spec.class_name)
            .get(i)
            .ok_or_else(|| {
                Error::OutOfRange(format!("synonym {i} for class {:?}", spec.class_name))
            })?
            .as_str(),
    };
    let phrase = match spec.adjective {
        None => with_article(noun),
        Some(i) => {
            let adj = vocab
                .adjectives()
                .get(i)
                .ok_or_else(|| Error::OutOfRange(format!("adjective {i}")))?;
            with_article(&format!("{adj} {noun}"))
        }
    };
    let style = match spec.style {
        None => None,
        Some(i) => Some(
            vocab
                .styles()
                .get(i)
                .ok_or_else(|| Error::OutOfRange(format!("style {i}")))?,
        ),
    };
    match (spec.order, style) {
        (Order::Plain, None) => Ok(phrase),
        (Order::Pc, Some(st)) => Ok(format!("{} of {phrase}", with_article(st))),
        (Order::Cp, Some(st)) => Ok(format!("{phrase} in {}", with_article(st))),
        (Order::Plain, Some(_)) => Err(Error::Invalid("plain prompt with a style".into())),
        (_, None) => Err(Error::Invalid("ordered prompt without a style".into())),
    }
}

pub fn sample_spec<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    class_name: &str,
    combo: AugmentCombo,
    rng: &mut R,
) -> PromptSpec {
    let style = combo
        .isd
        .then(|| rng.random_range(0..vocab.styles().len()));
    let adjective = if combo.aac {
        // index 0 is "no adjective"
        rng.random_range(0..=vocab.adjectives().len()).checked_sub(1)
    } else {
        None
    };
    let synonym = if combo.src {
        rng.random_range(0..=vocab.synonyms(class_name).len())
            .checked_sub(1)
    } else {
        None
    };
    let order = if combo.sso {
        if rng.random_bool(0.5) {
            Order::Pc
        } else {
            Order::Cp
        }
    } else if combo.isd {
        Order::Pc
    } else {
        Order::Plain
    };
    PromptSpec {
        class_name: class_name.to_string(),
        synonym,
        style,
        adjective,
        order,
    }
}

/// Two independent augmented views of one class.
pub fn sample_pair<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    class_name: &str,
    combo: AugmentCombo,
    rng: &mut R,
) -> (String, String) {
    let a = sample_spec(vocab, class_name, combo, rng);
    let b = sample_spec(vocab, class_name, combo, rng);
    (
        render_prompt(vocab, &a).expect("sampled specs are in range"),
        render_prompt(vocab, &b).expect("sampled specs are in range"),
    )
}

/// Every spec `sample_spec` can produce, ordered by style, adjective,
/// synonym, then order.
pub fn enumerate_space(vocab: &Vocabulary, class_name: &str, combo: AugmentCombo) -> Vec<PromptSpec> {
    fn options(on: bool, n: usize) -> Vec<Option<usize>> {
        if on {
            std::iter::once(None).chain((0..n).map(Some)).collect()
        } else {
            vec![None]
        }
    }
    let styles: Vec<Option<usize>> = if combo.isd {
        (0..vocab.styles().len()).map(Some).collect()
    } else {
        vec![None]
    };
    let adjectives = options(combo.aac, vocab.adjectives().len());
    let synonyms = options(combo.src, vocab.synonyms(class_name).len());
    let orders = if combo.sso {
        vec![Order::Pc, Order::Cp]
    } else if combo.isd {
        vec![Order::Pc]
    } else {
        vec![Order::Plain]
    };
    let mut out =
        Vec::with_capacity(styles.len() * adjectives.len() * synonyms.len() * orders.len());
    for &style in &styles {
        for &adjective in &adjectives {
            for &synonym in &synonyms {
                for &order in &orders {
                    out.push(PromptSpec {
                        class_name: class_name.to_string(),
                        synonym,
                        style,
                        adjective,
                        order,
                    });
                }
            }
        }
    }
    out
}
