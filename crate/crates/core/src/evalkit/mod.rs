//! Zero-shot accuracy across prompt templates, text-trained linear probes and
//! the robustness summaries built from them.

mod export;
mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dnet::{self, DisentangleNet};
use crate::embstore::EmbeddingSet;
use crate::error::{invalid, shape, Error, Result};
use crate::ndcore::{l2norm_rows, Tensor2, DEFAULT_L2_EPS};
use crate::promptgen::{article, ManifestRow, Vocabulary};
use crate::trainer::aggregate;

pub use export::{export_report, export_reports, export_representations, ReportFormat};
pub use probe::{probe_eval, probe_train, LinearClassifier, ProbeConfig, ProbeLog};

/// Zero-shot prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Template {
    /// "{class}"
    C,
    /// "a photo of a {class}"
    PC,
    /// "a {class} in a photo"
    CP,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::C, Template::PC, Template::CP];

    pub fn render(self, class_name: &str) -> String {
        match self {
            Template::C => class_name.to_string(),
            Template::PC => format!("a photo of {} {class_name}", article(class_name)),
            Template::CP => format!("{} {class_name} in a photo", article(class_name)),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::C => "C",
            Template::PC => "PC",
            Template::CP => "CP",
        })
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C" => Ok(Template::C),
            "PC" => Ok(Template::PC),
            "CP" => Ok(Template::CP),
            _ => Err(Error::Config(format!("unknown template {s:?} (expected C, PC or CP)"))),
        }
    }
}

/// One prompt per class for a template; labels follow class order.
pub fn template_manifest(classes: &[String], template: Template) -> Vec<ManifestRow> {
    classes
        .iter()
        .enumerate()
        .map(|(label, class)| ManifestRow {
            class_name: class.clone(),
            id: format!("{template}-{label}"),
            label: label as i64,
            text: template.render(class),
        })
        .collect()
}

/// Style-probe training prompts: "a {style} of a {class}" for every style.
pub fn isd_probe_manifest(vocab: &Vocabulary, classes: &[String]) -> Vec<ManifestRow> {
    let mut rows = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for (k, style) in vocab.styles().iter().enumerate() {
            rows.push(ManifestRow {
                class_name: class.clone(),
                id: format!("ISD-{label}-{k}"),
                label: label as i64,
                text: format!("{} {style} of {} {class}", article(style), article(class)),
            });
        }
    }
    rows
}

/// `l2norm(f(rows))`, or the raw rows normalised when no network is given.
pub fn represent(net: Option<&DisentangleNet>, set: &EmbeddingSet) -> Result<Tensor2> {
    Ok(l2norm_rows(&dnet::apply(net, &set.to_tensor())?, DEFAULT_L2_EPS))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Class-text anchors ordered by label. Needs exactly one row per class,
/// labels `0..C`.
fn anchors(net: Option<&DisentangleNet>, class_texts: &EmbeddingSet) -> Result<Tensor2> {
    let n = class_texts.dense_class_count()?;
    if n != class_texts.len() {
        return Err(invalid(format!(
            "class-text set has {} rows for {n} classes; expected one per class",
            class_texts.len()
        )));
    }
    let mut order = vec![0; n];
    for (i, l) in class_texts.labels().enumerate() {
        order[l as usize] = i;
    }
    let sorted = Tensor2::from_vec(n, class_texts.dim(), {
        let t = class_texts.to_tensor();
        order.iter().flat_map(|&i| t.row(i).to_vec()).collect()
    })?;
    Ok(l2norm_rows(&dnet::apply(net, &sorted)?, DEFAULT_L2_EPS))
}

fn check_images(images: &EmbeddingSet, n_classes: usize) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Err(invalid("image set is empty"));
    }
    images
        .meta()
        .iter()
        .map(|m| {
            if m.label < 0 || m.label as usize >= n_classes {
                Err(Error::OutOfRange(format!(
                    "image {:?} has label {} with {n_classes} classes",
                    m.id, m.label
                )))
            } else {
                Ok(m.label as usize)
            }
        })
        .collect()
}

/// Predicted class per image: the anchor with the highest cosine similarity.
pub fn zero_shot_predict(
    net: Option<&DisentangleNet>,
    images: &EmbeddingSet,
    class_texts: &EmbeddingSet,
    apply_to_text: bool,
) -> Result<Vec<usize>> {
    if images.dim() != class_texts.dim() {
        return Err(shape(format!(
            "image dim {} vs class-text dim {}",
            images.dim(),
            class_texts.dim()
        )));
    }
    let a = anchors(if apply_to_text { net } else { None }, class_texts)?;
    let reps = represent(net, images)?;
    if reps.cols() != a.cols() {
        return Err(shape("anchors and image representations differ in width"));
    }
    let scores = reps.matmul_t(&a)?;
    Ok((0..scores.rows()).map(|i| argmax(scores.row(i))).collect())
}

/// Top-1 accuracy in percent.
pub fn zero_shot_eval(
    net: Option<&DisentangleNet>,
    images: &EmbeddingSet,
    class_texts: &EmbeddingSet,
    apply_to_text: bool,
) -> Result<f64> {
    let labels = check_images(images, class_texts.len())?;
    let pred = zero_shot_predict(net, images, class_texts, apply_to_text)?;
    Ok(accuracy(&pred, &labels))
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateScores {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "PC")]
    pub pc: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
}

impl TemplateScores {
    pub fn values(&self) -> [f64; 3] {
        [self.c, self.pc, self.cp]
    }
}

/// Mean, population standard deviation and range of a set of accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub delta: f64,
    pub range: f64,
}

pub fn spread(values: &[f64]) -> Result<Spread> {
    let agg = aggregate(values)?;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Spread {
        mean: agg.mean,
        delta: agg.std,
        range: max - min,
    })
}

/// Zero-shot accuracy under each of the three templates.
pub fn prompt_sweep(
    net: Option<&DisentangleNet>,
    images: &EmbeddingSet,
    class_texts: &[(Template, &EmbeddingSet)],
    apply_to_text: bool,
) -> Result<TemplateScores> {
    let find = |t: Template| -> Result<&EmbeddingSet> {
        let mut hits = class_texts.iter().filter(|(x, _)| *x == t);
        let first = hits
            .next()
            .ok_or_else(|| invalid(format!("no class texts for template {t}")))?;
        if hits.next().is_some() {
            return Err(invalid(format!("template {t} given twice")));
        }
        Ok(first.1)
    };
    let mut acc = [0.0; 3];
    for (a, t) in acc.iter_mut().zip(Template::ALL) {
        *a = zero_shot_eval(net, images, find(t)?, apply_to_text)?;
    }
    Ok(TemplateScores {
        c: acc[0],
        pc: acc[1],
        cp: acc[2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub dataset: String,
    pub per_template: TemplateScores,
    pub mean: f64,
    pub delta: f64,
    pub range: f64,
    #[serde(rename = "lin_C")]
    pub lin_c: Option<f64>,
    #[serde(rename = "lin_ISD")]
    pub lin_isd: Option<f64>,
    #[serde(rename = "delta_ISD")]
    pub delta_isd: Option<f64>,
    #[serde(rename = "delta_C")]
    pub delta_c: Option<f64>,
    /// Probe settings behind `lin_C`/`lin_ISD`, kept for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

impl EvalReport {
    pub fn new(
        dataset: impl Into<String>,
        per_template: TemplateScores,
        lin_c: Option<f64>,
        lin_isd: Option<f64>,
    ) -> Self {
        let s = spread(&per_template.values()).expect("three values");
        EvalReport {
            dataset: dataset.into(),
            per_template,
            mean: s.mean,
            delta: s.delta,
            range: s.range,
            lin_c,
            lin_isd,
            delta_isd: lin_isd.map(|v| v - per_template.c),
            delta_c: lin_c.map(|v| v - per_template.c),
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: ProbeConfig) -> Self {
        self.probe = Some(probe);
        self
    }
}
