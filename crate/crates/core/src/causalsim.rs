//! Synthetic content/style data with known latents.
//!
//! Content `C ~ N(0, I)`, style `S = g_s(C) + σε`, and two observation maps
//! `X = g_v(C, S)` and `T = g_t(C, S)`. Each generator is a stack of random
//! orthogonal layers with LeakyReLU(0.2) between them. A "prompt
//! augmentation" redraws ε for a fixed content, so two augmentations share
//! `C` exactly and differ only through style.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dnet::DisentangleNet;
use crate::embstore::{EmbeddingSet, RowMeta};
use crate::error::{invalid, shape, Error, Result};
use crate::ndcore::{leaky_relu, Tensor2};
use crate::trainer::{train, TrainConfig, TrainLog, TrainSummary};

pub const GENERATOR_SLOPE: f64 = 0.2;
pub const RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalConfig {
    /// Observation width; at least `n_c + n_s`.
    pub d: usize,
    pub mix_depth: usize,
    pub n_c: usize,
    pub n_classes: usize,
    pub n_s: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub style_noise_sigma: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            d: 16,
            mix_depth: 2,
            n_c: 4,
            n_classes: 8,
            n_s: 4,
            n_samples: 4000,
            seed: 0,
            style_noise_sigma: 1.0,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_s == 0 || self.n_samples == 0 || self.n_classes == 0 {
            return Err(invalid("n_c, n_s, n_samples and n_classes must be positive"));
        }
        if self.d < self.n_c + self.n_s {
            return Err(invalid(format!(
                "d = {} is narrower than n_c + n_s = {}",
                self.d,
                self.n_c + self.n_s
            )));
        }
        if !(self.style_noise_sigma >= 0.0 && self.style_noise_sigma.is_finite()) {
            return Err(invalid("style_noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Square layers applied as `x ← x·Wᵀ`, LeakyReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    layers: Vec<Tensor2>,
}

impl Mixer {
    pub fn random<R: Rng + ?Sized>(width: usize, depth: usize, rng: &mut R) -> Self {
        Mixer {
            layers: (0..depth).map(|_| random_orthogonal(width, rng)).collect(),
        }
    }

    pub fn layers(&self) -> &[Tensor2] {
        &self.layers
    }

    /// Zero-pads `x` on the right to the mixer width first.
    pub fn apply(&self, x: &Tensor2, width: usize) -> Result<Tensor2> {
        let mut h = pad_cols(x, width)?;
        for (l, w) in self.layers.iter().enumerate() {
            h = h.matmul_t(w)?;
            if l + 1 < self.layers.len() {
                h = leaky_relu(&h, GENERATOR_SLOPE);
            }
        }
        Ok(h)
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor2 {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor2::from_vec(n, n, (0..n * n).map(|k| q[(k / n, k % n)]).collect())
        .expect("square matrix")
}

fn pad_cols(x: &Tensor2, width: usize) -> Result<Tensor2> {
    if x.cols() > width {
        return Err(shape(format!("cannot pad {} columns to {width}", x.cols())));
    }
    let mut out = Tensor2::zeros(x.rows(), width);
    for i in 0..x.rows() {
        out.row_mut(i)[..x.cols()].copy_from_slice(x.row(i));
    }
    Ok(out)
}

fn concat_cols(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        row[..a.cols()].copy_from_slice(a.row(i));
        row[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generators {
    pub g_s: Mixer,
    pub g_t: Mixer,
    pub g_v: Mixer,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: CausalConfig,
    pub generators: Generators,
    pub c: Tensor2,
    /// `g_s(C)` before noise.
    pub s_mean: Tensor2,
    pub s: Tensor2,
    pub x_emb: Tensor2,
    pub t_emb: Tensor2,
    /// Quantile bucket of the first content coordinate.
    pub y: Vec<usize>,
}

impl SyntheticDataset {
    fn style_from_content(gens: &Generators, cfg: &CausalConfig, c: &Tensor2) -> Result<Tensor2> {
        let m = cfg.n_c.max(cfg.n_s);
        Ok(gens.g_s.apply(c, m)?.select_cols(0..cfg.n_s))
    }

    /// `g_t(C, S)` for arbitrary latents.
    pub fn text_map(&self, c: &Tensor2, s: &Tensor2) -> Result<Tensor2> {
        self.generators.g_t.apply(&concat_cols(c, s), self.config.d)
    }

    /// `g_v(C, S)` for arbitrary latents.
    pub fn image_map(&self, c: &Tensor2, s: &Tensor2) -> Result<Tensor2> {
        self.generators.g_v.apply(&concat_cols(c, s), self.config.d)
    }
}

/// Everything is drawn from one seeded stream: g_s, g_t, g_v layers, then C,
/// then ε.
pub fn sample_dataset(config: &CausalConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.n_c.max(config.n_s);
    let generators = Generators {
        g_s: Mixer::random(m, config.mix_depth, &mut rng),
        g_t: Mixer::random(config.d, config.mix_depth, &mut rng),
        g_v: Mixer::random(config.d, config.mix_depth, &mut rng),
    };
    let n = config.n_samples;
    let c = gaussian(n, config.n_c, 1.0, &mut rng);
    let s_mean = SyntheticDataset::style_from_content(&generators, config, &c)?;
    let mut s = gaussian(n, config.n_s, config.style_noise_sigma, &mut rng);
    s.add_assign(&s_mean)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| c.get(a, 0).total_cmp(&c.get(b, 0)).then(a.cmp(&b)));
    let mut y = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        y[i] = rank * config.n_classes / n;
    }

    let mut ds = SyntheticDataset {
        config: config.clone(),
        generators,
        c,
        s_mean,
        s,
        x_emb: Tensor2::zeros(0, 0),
        t_emb: Tensor2::zeros(0, 0),
        y,
    };
    ds.x_emb = ds.image_map(&ds.c, &ds.s)?;
    ds.t_emb = ds.text_map(&ds.c, &ds.s)?;
    Ok(ds)
}

/// A fresh text embedding of row `i`: same content, newly drawn style noise.
pub fn augment_style<R: Rng + ?Sized>(ds: &SyntheticDataset, i: usize, rng: &mut R) -> Result<Vec<f64>> {
    if i >= ds.c.rows() {
        return Err(Error::OutOfRange(format!("row {i} of {}", ds.c.rows())));
    }
    let sigma = ds.config.style_noise_sigma;
    let s: Vec<f64> = ds
        .s_mean
        .row(i)
        .iter()
        .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let c = Tensor2::from_vec(1, ds.config.n_c, ds.c.row(i).to_vec())?;
    let s = Tensor2::from_vec(1, ds.config.n_s, s)?;
    Ok(ds.text_map(&c, &s)?.into_data())
}

/// Bank of augmented text embeddings. Every dataset row is its own class
/// (label = row index) with `rows_per_anchor` augmentations.
pub fn build_bank<R: Rng + ?Sized>(ds: &SyntheticDataset, rows_per_anchor: usize, rng: &mut R) -> Result<EmbeddingSet> {
    if rows_per_anchor < 2 {
        return Err(invalid("a synthetic bank needs at least two rows per anchor"));
    }
    let n = ds.c.rows();
    let mut data = Vec::with_capacity(n * rows_per_anchor * ds.config.d);
    let mut meta = Vec::with_capacity(n * rows_per_anchor);
    for i in 0..n {
        for r in 0..rows_per_anchor {
            data.extend(augment_style(ds, i, rng)?.into_iter().map(|v| v as f32));
            meta.push(RowMeta::new(format!("{i}-{r}"), i as i64));
        }
    }
    EmbeddingSet::new(ds.config.d, data, meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Score {
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

/// Held-out R² of a ridge regression (λ = 1e−3, with intercept) from the
/// representation to each target column. Fits on the first half of the rows
/// and scores on the second.
pub fn identifiability_score(representation: &Tensor2, target: &Tensor2) -> Result<R2Score> {
    let n = representation.rows();
    if target.rows() != n {
        return Err(shape(format!("{n} representation rows, {} target rows", target.rows())));
    }
    let k = representation.cols();
    let half = n / 2;
    if half <= k + 1 || n - half < 2 {
        return Err(invalid(format!("{n} rows are too few for a {k}-wide probe")));
    }
    let to_mat = |t: &Tensor2, rows: std::ops::Range<usize>| {
        DMatrix::from_fn(rows.len(), t.cols(), |i, j| t.get(rows.start + i, j))
    };
    let x_tr = to_mat(representation, 0..half);
    let x_te = to_mat(representation, half..n);
    let y_tr = to_mat(target, 0..half);
    let y_te = to_mat(target, half..n);

    let mx: DVector<f64> = x_tr.row_mean().transpose();
    let my: DVector<f64> = y_tr.row_mean().transpose();
    let mut a = x_tr;
    for mut row in a.row_iter_mut() {
        row -= mx.transpose();
    }
    let mut b = y_tr;
    for mut row in b.row_iter_mut() {
        row -= my.transpose();
    }
    let gram = a.transpose() * &a + DMatrix::identity(k, k) * RIDGE_LAMBDA;
    let w = gram
        .cholesky()
        .ok_or_else(|| invalid("ridge system is not positive definite"))?
        .solve(&(a.transpose() * b));

    let mut xc = x_te;
    for mut row in xc.row_iter_mut() {
        row -= mx.transpose();
    }
    let pred = xc * w;
    let mut per_dim = Vec::with_capacity(target.cols());
    for j in 0..target.cols() {
        let col = y_te.column(j);
        let mean = col.mean();
        let sst: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        if sst <= f64::EPSILON * col.len() as f64 {
            return Err(invalid(format!("target column {j} is constant on the held-out half")));
        }
        let sse: f64 = col
            .iter()
            .zip(pred.column(j).iter())
            .map(|(y, p)| (y - (p + my[j])).powi(2))
            .sum();
        per_dim.push(1.0 - sse / sst);
    }
    let mean = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
    Ok(R2Score { per_dim, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRunConfig {
    /// Anchors sampled per training step.
    pub batch_classes: usize,
    pub causal: CausalConfig,
    pub rows_per_anchor: usize,
    /// `batch_classes` here must stay unset; the top-level value is used.
    pub train: TrainConfig,
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        SynthRunConfig {
            batch_classes: 256,
            causal: CausalConfig::default(),
            rows_per_anchor: 8,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthReport {
    pub baseline_content_r2: f64,
    pub baseline_gap: f64,
    pub baseline_style_r2: f64,
    pub config: SynthRunConfig,
    pub content_r2: f64,
    pub gap: f64,
    pub style_r2: f64,
    pub train_log: TrainSummary,
}

impl SynthReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct SynthOutcome {
    pub net: DisentangleNet,
    pub log: TrainLog,
    pub report: SynthReport,
}

/// Samples the dataset, builds the augmentation bank, trains on it (seeded
/// with the dataset seed) and scores `f(T)` and raw `T` against C and S.
pub fn run_synth(config: &SynthRunConfig) -> Result<SynthOutcome> {
    if config.train.batch_classes.is_some() {
        return Err(Error::Config(
            "set batch_classes at the top level of a synth config, not under [train]".into(),
        ));
    }
    let seed = config.causal.seed;
    let ds = sample_dataset(&config.causal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let bank = build_bank(&ds, config.rows_per_anchor, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_classes: Some(config.batch_classes.min(config.causal.n_samples)),
        ..config.train.clone()
    };
    let (net, log) = train(&bank, &train_cfg, seed)?;

    let rep = net.forward(&ds.t_emb)?;
    let content = identifiability_score(&rep, &ds.c)?.mean;
    let style = identifiability_score(&rep, &ds.s)?.mean;
    let base_content = identifiability_score(&ds.t_emb, &ds.c)?.mean;
    let base_style = identifiability_score(&ds.t_emb, &ds.s)?.mean;
    let report = SynthReport {
        baseline_content_r2: base_content,
        baseline_gap: base_content - base_style,
        baseline_style_r2: base_style,
        config: config.clone(),
        content_r2: content,
        gap: content - style,
        style_r2: style,
        train_log: log.summary(),
    };
    Ok(SynthOutcome { net, log, report })
}
