use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax, check_images, represent};
use crate::dnet::DisentangleNet;
use crate::embstore::EmbeddingSet;
use crate::error::{invalid, shape, Result};
use crate::ndcore::{linear, softmax_cross_entropy, Tensor2};
use crate::optim::{AdamHyper, AdamState};
use crate::trainer::{EarlyStopper, StopReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            adam: AdamHyper::with_lr(1e-3),
            batch_size: 128,
            early_stop_delta: 0.001,
            early_stop_patience: 10,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub epoch_losses: Vec<f64>,
    pub stop_reason: StopReason,
}

/// Logits are `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearClassifier {
            weight: Tensor2::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }

    /// Weight columns are the given (already normalised) class anchors.
    pub fn from_anchors(anchors: &Tensor2) -> Self {
        LinearClassifier {
            weight: anchors.transpose(),
            bias: vec![0.0; anchors.rows()],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2> {
        linear(x, &self.weight, Some(&self.bias))
    }

    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }
}

/// Fits a softmax classifier on `l2norm(f(text rows))` with shuffled
/// minibatches and Adam; the epoch-mean loss drives early stopping.
pub fn probe_train(
    train_texts: &EmbeddingSet,
    net: Option<&DisentangleNet>,
    config: &ProbeConfig,
) -> Result<(LinearClassifier, ProbeLog)> {
    config.adam.validate()?;
    if config.batch_size == 0 || config.max_epochs == 0 || config.early_stop_patience == 0 {
        return Err(invalid("batch_size, max_epochs and early_stop_patience must be at least 1"));
    }
    let classes = train_texts.dense_class_count()?;
    let x = represent(net, train_texts)?;
    let labels: Vec<usize> = train_texts.labels().map(|l| l as usize).collect();
    let n = labels.len();

    let mut clf = LinearClassifier::zeros(x.cols(), classes);
    let mut adam = AdamState::new(&[clf.weight.data(), clf.bias.as_slice()]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopper::new(config.early_stop_delta, config.early_stop_patience);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::new();
    let mut stop_reason = StopReason::MaxSteps;

    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = softmax_cross_entropy(&clf.logits(&xb)?, &yb)?;
            total += loss * chunk.len() as f64;
            let dw = xb.t_matmul(&dlogits)?;
            let mut db = vec![0.0; classes];
            for i in 0..dlogits.rows() {
                for (d, g) in db.iter_mut().zip(dlogits.row(i)) {
                    *d += g;
                }
            }
            let LinearClassifier { weight, bias } = &mut clf;
            adam.step(&mut [weight.data_mut(), bias.as_mut_slice()], &[dw.data(), &db], &config.adam)?;
        }
        let mean = total / n as f64;
        epoch_losses.push(mean);
        if stopper.observe(mean) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok((clf, ProbeLog { epoch_losses, stop_reason }))
}

/// Top-1 accuracy (percent) of the probe on `l2norm(f(image rows))`.
pub fn probe_eval(clf: &LinearClassifier, net: Option<&DisentangleNet>, images: &EmbeddingSet) -> Result<f64> {
    let labels = check_images(images, clf.classes())?;
    let x = represent(net, images)?;
    if x.cols() != clf.weight.rows() {
        return Err(shape(format!(
            "probe expects width {}, representations have {}",
            clf.weight.rows(),
            x.cols()
        )));
    }
    Ok(accuracy(&clf.predict(&x)?, &labels))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_problem, set};
    use super::super::{anchors, zero_shot_predict};
    use super::*;
    use crate::dnet::DNetConfig;

    #[test]
    fn separable_toy_reaches_full_training_accuracy() {
        let rows = vec![
            vec![1.0, 0.2],
            vec![0.9, -0.3],
            vec![0.8, 0.1],
            vec![-1.0, 0.3],
            vec![-0.7, -0.2],
            vec![-0.9, 0.0],
        ];
        let train = set(&rows, &[0, 0, 0, 1, 1, 1]);
        let (clf, log) = probe_train(&train, None, &ProbeConfig::default()).unwrap();
        assert_eq!(probe_eval(&clf, None, &train).unwrap(), 100.0);
        assert!(log.epoch_losses.len() <= 1000);
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
    }

    #[test]
    fn anchor_classifier_matches_zero_shot() {
        let (images, texts) = random_problem(4, 6, 80, 10);
        let clf = LinearClassifier::from_anchors(&anchors(None, &texts).unwrap());
        let x = represent(None, &images).unwrap();
        assert_eq!(
            clf.predict(&x).unwrap(),
            zero_shot_predict(None, &images, &texts, true).unwrap()
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let (images, _) = random_problem(5, 3, 300, 6);
        let cfg = ProbeConfig {
            max_epochs: 20,
            ..ProbeConfig::default()
        };
        let (a, la) = probe_train(&images, None, &cfg).unwrap();
        let (b, lb) = probe_train(&images, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.epoch_losses.len(), 20);
    }

    #[test]
    fn probe_through_net_at_init_equals_raw() {
        let (images, texts) = random_problem(6, 4, 40, 5);
        let net = DisentangleNet::init(DNetConfig::new(5, 5)).unwrap();
        let cfg = ProbeConfig {
            max_epochs: 30,
            ..ProbeConfig::default()
        };
        let (raw, _) = probe_train(&texts, None, &cfg).unwrap();
        let (via, _) = probe_train(&texts, Some(&net), &cfg).unwrap();
        assert_eq!(raw, via);
        assert_eq!(
            probe_eval(&raw, None, &images).unwrap(),
            probe_eval(&via, Some(&net), &images).unwrap()
        );
    }

    #[test]
    fn errors() {
        let (images, texts) = random_problem(7, 3, 10, 4);
        let clf = LinearClassifier::zeros(4, 3);
        let empty = EmbeddingSet::new(4, vec![], vec![]).unwrap();
        assert!(probe_eval(&clf, None, &empty).is_err());
        let narrow = LinearClassifier::zeros(3, 3);
        assert!(probe_eval(&narrow, None, &images).is_err());
        let gap = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 2]);
        assert!(probe_train(&gap, None, &ProbeConfig::default()).is_err());
        let _ = texts;
    }
}
