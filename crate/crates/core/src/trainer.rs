//! Contrastive training loop: per step one positive pair per class, both views
//! through the shared network, L2 normalisation, InfoNCE and an Adam update.
//! Mean losses are checkpointed every `checkpoint_every` steps and drive early
//! stopping.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dnet::{BlockOrder, DNetConfig, DisentangleNet, NetGrads};
use crate::embstore::EmbeddingSet;
use crate::error::{invalid, Error, Result};
use crate::ndcore::{
    infonce_loss, l2norm_rows, l2norm_rows_backward, sorted_sum, symmetric_infonce_loss, Tensor2,
    DEFAULT_L2_EPS,
};
use crate::optim::{AdamHyper, AdamState};
use crate::promptgen::{AugmentCombo, BankIndex};

/// Network shape; the input width always comes from the bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub block_order: BlockOrder,
    /// Defaults to the input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub leaky_slope: f64,
    pub n_blocks: usize,
    /// Defaults to the input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            block_order: BlockOrder::ActivationLinear,
            hidden_dim: None,
            leaky_slope: 0.01,
            n_blocks: 1,
            out_dim: None,
        }
    }
}

impl NetSpec {
    pub fn resolve(&self, in_dim: usize, init_seed: u64) -> Result<DNetConfig> {
        let cfg = DNetConfig {
            in_dim,
            out_dim: self.out_dim.unwrap_or(in_dim),
            hidden_dim: self.hidden_dim.unwrap_or(in_dim),
            n_blocks: self.n_blocks,
            leaky_slope: self.leaky_slope,
            init_seed,
            block_order: self.block_order,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamHyper,
    /// Classes per batch; all classes when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_classes: Option<usize>,
    pub checkpoint_every: u64,
    /// Augmentations the bank was planned with. Recorded, not re-applied.
    pub combo: AugmentCombo,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub max_steps: u64,
    pub net: NetSpec,
    pub record_wall_time: bool,
    pub seeds: Vec<u64>,
    pub symmetric_loss: bool,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamHyper::default(),
            batch_classes: None,
            checkpoint_every: 50,
            combo: AugmentCombo::default(),
            early_stop_delta: 0.001,
            early_stop_patience: 5,
            max_steps: 100_000,
            net: NetSpec::default(),
            record_wall_time: false,
            seeds: vec![0, 1, 2],
            symmetric_loss: false,
            tau: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.checkpoint_every == 0 || self.early_stop_patience == 0 || self.max_steps == 0 {
            return Err(invalid(
                "checkpoint_every, early_stop_patience and max_steps must be at least 1",
            ));
        }
        if !(self.early_stop_delta >= 0.0) {
            return Err(invalid("early_stop_delta must be non-negative"));
        }
        if matches!(self.batch_classes, Some(k) if k < 2) {
            return Err(invalid("batch_classes must be at least 2"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    /// Step count at the end of the window.
    pub checkpoint: u64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLog {
    pub checkpoints: Vec<Checkpoint>,
    pub config: TrainConfig,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub net: DNetConfig,
    pub seed: u64,
    pub stop_reason: StopReason,
    pub stop_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train log serializes")
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            final_loss: self.checkpoints.last().map(|c| c.mean_loss),
            initial_loss: self.initial_loss,
            n_checkpoints: self.checkpoints.len(),
            stop_reason: self.stop_reason,
            stop_step: self.stop_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_loss: Option<f64>,
    pub initial_loss: f64,
    pub n_checkpoints: usize,
    pub stop_reason: StopReason,
    pub stop_step: u64,
}

/// Tracks the best checkpoint loss. A checkpoint improves when it is below
/// `best − delta`; `patience` consecutive non-improvements stop training.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    delta: f64,
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(delta: f64, patience: usize) -> Self {
        EarlyStopper {
            delta,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds one checkpoint loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.delta {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Replays the stopping rule over a loss sequence. Returns whether it fires
/// and at which index.
pub fn early_stop_decide(losses: &[f64], delta: f64, patience: usize) -> (bool, Option<usize>) {
    let mut s = EarlyStopper::new(delta, patience);
    match losses.iter().position(|&l| s.observe(l)) {
        Some(i) => (true, Some(i)),
        None => (false, None),
    }
}

/// RNG stream for batch sampling. Network init uses the same seed on its own
/// generator, so the two never share draws.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// InfoNCE of the normalised network outputs for two aligned views, with
/// parameter gradients.
pub fn pair_loss(
    net: &DisentangleNet,
    x1: &Tensor2,
    x2: &Tensor2,
    tau: f64,
    symmetric: bool,
) -> Result<(f64, NetGrads)> {
    let (y1, c1) = net.forward_train(x1)?;
    let (y2, c2) = net.forward_train(x2)?;
    let z1 = l2norm_rows(&y1, DEFAULT_L2_EPS);
    let z2 = l2norm_rows(&y2, DEFAULT_L2_EPS);
    let out = if symmetric {
        symmetric_infonce_loss(&z1, &z2, tau)?
    } else {
        infonce_loss(&z1, &z2, tau)?
    };
    let (_, mut grads) = net.backward(&c1, &l2norm_rows_backward(&y1, &out.dz, DEFAULT_L2_EPS)?)?;
    let (_, g2) = net.backward(&c2, &l2norm_rows_backward(&y2, &out.dzp, DEFAULT_L2_EPS)?)?;
    grads.add_assign(&g2)?;
    Ok((out.loss, grads))
}

/// Trains one network on `bank` (rows labelled densely by class). Returns
/// the final-step weights.
pub fn train(bank: &EmbeddingSet, config: &TrainConfig, seed: u64) -> Result<(DisentangleNet, TrainLog)> {
    config.validate()?;
    let n_classes = bank.dense_class_count()?;
    if n_classes < 2 {
        return Err(invalid("training needs at least two classes"));
    }
    let per_batch = config.batch_classes.unwrap_or(n_classes);
    if per_batch > n_classes {
        return Err(invalid(format!(
            "batch_classes {per_batch} exceeds the {n_classes} classes in the bank"
        )));
    }
    let net_cfg = config.net.resolve(bank.dim(), seed)?;
    let mut net = DisentangleNet::init(net_cfg.clone())?;
    let mut adam = AdamState::new(&net.param_slices());
    let index = BankIndex::new(bank);
    let mut rng = batch_rng(seed);
    let all: Vec<i64> = (0..n_classes as i64).collect();
    let started = config.record_wall_time.then(Instant::now);

    let mut stopper = EarlyStopper::new(config.early_stop_delta, config.early_stop_patience);
    let mut checkpoints = Vec::new();
    let mut window = Vec::with_capacity(config.checkpoint_every as usize);
    let mut initial_loss = None;
    let mut stop_reason = StopReason::MaxSteps;
    let mut step = 0;
    while step < config.max_steps {
        let batch = if per_batch == n_classes {
            index.make_batch(&all, &mut rng)?
        } else {
            let mut classes: Vec<i64> = sample(&mut rng, n_classes, per_batch)
                .into_iter()
                .map(|c| c as i64)
                .collect();
            classes.sort_unstable();
            index.make_batch(&classes, &mut rng)?
        };
        let x1 = bank.gather(&batch.first_rows());
        let x2 = bank.gather(&batch.second_rows());
        let (loss, grads) = pair_loss(&net, &x1, &x2, config.tau, config.symmetric_loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteValue(format!("loss at step {step}")));
        }
        initial_loss.get_or_insert(loss);
        adam.step(&mut net.param_slices_mut(), &grads.slices(), &config.adam)?;
        step += 1;
        window.push(loss);

        if window.len() as u64 == config.checkpoint_every {
            let mean_loss = sorted_sum(&mut window) / window.len() as f64;
            window.clear();
            checkpoints.push(Checkpoint {
                checkpoint: step,
                mean_loss,
            });
            if stopper.observe(mean_loss) {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    if !window.is_empty() {
        let mean_loss = sorted_sum(&mut window) / window.len() as f64;
        checkpoints.push(Checkpoint {
            checkpoint: step,
            mean_loss,
        });
    }

    let log = TrainLog {
        checkpoints,
        config: config.clone(),
        initial_loss: initial_loss.expect("at least one step runs"),
        net: net_cfg,
        seed,
        stop_reason,
        stop_step: step,
        wall_time_secs: started.map(|t| t.elapsed().as_secs_f64()),
    };
    Ok((net, log))
}

/// One run per configured seed, in parallel. Results follow the seed order.
pub fn run_seeds(bank: &EmbeddingSet, config: &TrainConfig) -> Result<Vec<(DisentangleNet, TrainLog)>> {
    if config.seeds.is_empty() {
        return Err(invalid("seed list is empty"));
    }
    config.validate()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| s.spawn(move || train(bank, config, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Order-independent: sums run over sorted terms.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let n = values.len() as f64;
    let mean = sorted_sum(&mut values.to_vec()) / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    Ok(Aggregate {
        mean,
        std: (sorted_sum(&mut sq) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embstore::RowMeta;
    use rand::Rng;

    fn bank_from(rows: Vec<Vec<f32>>, labels: &[i64]) -> EmbeddingSet {
        let dim = rows[0].len();
        let meta = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| RowMeta::new(format!("r{i}"), l))
            .collect();
        EmbeddingSet::new(dim, rows.concat(), meta).unwrap()
    }

    /// Rows per class scattered around a class centre.
    fn clustered_bank(classes: usize, per_class: usize, dim: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<Vec<f32>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..per_class {
                rows.push(centre.iter().map(|v| v + rng.random_range(-0.6..0.6)).collect());
                labels.push(c as i64);
            }
        }
        bank_from(rows, &labels)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            adam: AdamHyper::with_lr(1e-2),
            max_steps: 2000,
            checkpoint_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stopping_rule_traces() {
        let l = [1.0, 0.5, 0.4999, 0.4999, 0.4999, 0.4999, 0.4999];
        assert_eq!(early_stop_decide(&l, 0.001, 5), (true, Some(6)));
        let dec: Vec<f64> = (0..100).map(|i| 2.0 - 0.01 * i as f64).collect();
        assert_eq!(early_stop_decide(&dec, 0.001, 5), (false, None));
        assert_eq!(early_stop_decide(&[1.0, 1.0], 0.001, 1), (true, Some(1)));
        assert_eq!(early_stop_decide(&[2.0; 6], 0.001, 5), (true, Some(5)));
        assert_eq!(early_stop_decide(&[2.0; 5], 0.001, 5), (false, None));
        // compared with the best, not the previous checkpoint
        let rebound = [1.0, 2.0, 1.5, 1.2, 1.0, 0.9995];
        assert_eq!(early_stop_decide(&rebound, 0.001, 5), (true, Some(5)));
    }

    #[test]
    fn constant_loss_stops_after_patience_plus_one_checkpoints() {
        let k = 4;
        let rows = vec![vec![0.3f32, -0.2, 0.9]; 2 * k];
        let labels: Vec<i64> = (0..k as i64).flat_map(|c| [c, c]).collect();
        let bank = bank_from(rows, &labels);
        let (_, log) = train(&bank, &TrainConfig::default(), 7).unwrap();
        assert_eq!(log.stop_reason, StopReason::EarlyStop);
        assert_eq!(log.stop_step, 300);
        assert_eq!(log.checkpoints.len(), 6);
        for c in &log.checkpoints {
            assert!((c.mean_loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_loss_is_the_skip_path_loss() {
        let bank = clustered_bank(5, 3, 6, 1);
        let cfg = TrainConfig {
            max_steps: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train(&bank, &cfg, 42).unwrap();
        let batch = BankIndex::new(&bank)
            .make_batch(&[0, 1, 2, 3, 4], &mut batch_rng(42))
            .unwrap();
        let z1 = l2norm_rows(&bank.gather(&batch.first_rows()), DEFAULT_L2_EPS);
        let z2 = l2norm_rows(&bank.gather(&batch.second_rows()), DEFAULT_L2_EPS);
        let want = infonce_loss(&z1, &z2, 0.1).unwrap().loss;
        assert_eq!(log.initial_loss.to_bits(), want.to_bits());
        assert_eq!(log.stop_reason, StopReason::MaxSteps);
        assert_eq!(log.checkpoints, vec![Checkpoint { checkpoint: 1, mean_loss: want }]);
    }

    #[test]
    fn training_reduces_loss_and_stops_early() {
        let bank = clustered_bank(6, 8, 8, 3);
        let before = bank.clone();
        let (_, log) = train(&bank, &quick(), 0).unwrap();
        assert_eq!(bank, before);
        assert_eq!(log.stop_reason, StopReason::EarlyStop);
        assert!(log.stop_step < 2000);
        let first = log.checkpoints[0].mean_loss;
        let best = log.checkpoints.iter().map(|c| c.mean_loss).fold(f64::INFINITY, f64::min);
        assert!(best < first - 0.05, "first {first}, best {best}");
        assert_eq!(log.checkpoints.last().unwrap().checkpoint, log.stop_step);
    }

    #[test]
    fn same_seed_same_weights() {
        let bank = clustered_bank(4, 5, 6, 4);
        let cfg = TrainConfig {
            max_steps: 120,
            ..quick()
        };
        let (a, la) = train(&bank, &cfg, 9).unwrap();
        let (b, lb) = train(&bank, &cfg, 9).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(la.to_json(), lb.to_json());
        let (c, _) = train(&bank, &cfg, 10).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn max_steps_leaves_short_final_window() {
        let bank = clustered_bank(3, 4, 4, 5);
        let cfg = TrainConfig {
            max_steps: 25,
            ..quick()
        };
        let (_, log) = train(&bank, &cfg, 0).unwrap();
        assert_eq!(log.stop_reason, StopReason::MaxSteps);
        assert_eq!(log.stop_step, 25);
        let steps: Vec<u64> = log.checkpoints.iter().map(|c| c.checkpoint).collect();
        assert_eq!(steps, vec![10, 20, 25]);
    }

    #[test]
    fn class_subsets_and_downsampling() {
        let bank = clustered_bank(10, 3, 8, 6);
        let cfg = TrainConfig {
            batch_classes: Some(4),
            max_steps: 60,
            net: NetSpec {
                out_dim: Some(4),
                hidden_dim: Some(12),
                n_blocks: 2,
                ..NetSpec::default()
            },
            ..quick()
        };
        let (net, log) = train(&bank, &cfg, 1).unwrap();
        assert_eq!(net.config().out_dim, 4);
        assert_eq!(log.stop_step, 60);
    }

    #[test]
    fn rejects_bad_input() {
        let one = clustered_bank(1, 3, 4, 0);
        assert!(train(&one, &TrainConfig::default(), 0).is_err());
        let bank = clustered_bank(3, 3, 4, 0);
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&bank, &bad, 0).is_err());
        let too_many = TrainConfig {
            batch_classes: Some(4),
            ..TrainConfig::default()
        };
        assert!(train(&bank, &too_many, 0).is_err());
        let wide = TrainConfig {
            net: NetSpec {
                out_dim: Some(5),
                ..NetSpec::default()
            },
            ..TrainConfig::default()
        };
        assert!(train(&bank, &wide, 0).is_err());
        let no_seeds = TrainConfig {
            seeds: vec![],
            ..TrainConfig::default()
        };
        assert!(run_seeds(&bank, &no_seeds).is_err());
    }

    #[test]
    fn seeds_run_in_parallel_and_match_serial_runs() {
        let bank = clustered_bank(4, 4, 5, 8);
        let cfg = TrainConfig {
            max_steps: 40,
            seeds: vec![3, 1, 2],
            ..quick()
        };
        let runs = run_seeds(&bank, &cfg).unwrap();
        assert_eq!(runs.len(), 3);
        for ((net, log), seed) in runs.iter().zip([3, 1, 2]) {
            assert_eq!(log.seed, seed);
            let (solo, _) = train(&bank, &cfg, seed).unwrap();
            assert_eq!(net, &solo);
        }
    }

    #[test]
    fn aggregates() {
        let a = aggregate(&[96.9, 97.1, 97.3]).unwrap();
        assert!((a.mean - 97.1).abs() < 1e-9);
        assert!((a.std - 0.163_299_316).abs() < 1e-6);
        let b = aggregate(&[97.3, 97.1, 96.9]).unwrap();
        assert_eq!(a, b);
        assert_eq!(aggregate(&[5.0]).unwrap().std, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig {
            batch_classes: Some(8),
            ..TrainConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"tau": 0.1, "lr": 1}"#).is_err());
    }
}
