//! Residual MLP with a zero-initialised, bias-free output projection.
//!
//! ```text
//! y = trunk(x) · P + skip(x)
//! ```
//!
//! `trunk` is `n_blocks` repetitions of LeakyReLU followed by a biased linear
//! layer, `P` starts at exactly zero, and `skip` is the identity (or a
//! nearest-neighbour downsample when `out_dim < in_dim`). At initialisation the
//! network therefore returns its input unchanged.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::fsio;
use crate::ndcore::{
    leaky_relu, leaky_relu_backward, linear, linear_backward, nn_downsample,
    nn_downsample_backward, Tensor2,
};

pub const MAGIC: &[u8; 8] = b"CLAPNET1";

/// Order of the two operations inside each trunk block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    ActivationLinear,
    LinearActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DNetConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
    #[serde(default)]
    pub block_order: BlockOrder,
}

impl DNetConfig {
    /// Defaults: square trunk (`hidden_dim = in_dim`), one block, slope 0.01.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        DNetConfig {
            in_dim,
            out_dim,
            hidden_dim: in_dim,
            n_blocks: 1,
            leaky_slope: 0.01,
            init_seed: 0,
            block_order: BlockOrder::ActivationLinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_dim == 0 {
            return Err(invalid("network dimensions must be positive"));
        }
        if self.out_dim > self.in_dim {
            return Err(invalid(format!(
                "out_dim {} exceeds in_dim {}; the skip path only downsamples",
                self.out_dim, self.in_dim
            )));
        }
        if self.n_blocks == 0 {
            return Err(invalid("n_blocks must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(invalid(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// `N·(d_prev·hidden + hidden) + hidden·out_dim`
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let first = self.in_dim * h + h;
        let rest = (self.n_blocks - 1) * (h * h + h);
        first + rest + h * self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleNet {
    config: DNetConfig,
    trunk: Vec<Block>,
    projection: Tensor2,
}

/// Activations kept from a forward pass for [`DisentangleNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor2,
    /// Per block: (block input, intermediate) where the intermediate is the
    /// activated input or the pre-activation, depending on block order.
    blocks: Vec<(Tensor2, Tensor2)>,
    trunk_out: Tensor2,
}

/// Gradients laid out like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub trunk: Vec<Block>,
    pub projection: Tensor2,
}

impl NetGrads {
    pub fn add_assign(&mut self, other: &NetGrads) -> Result<()> {
        if self.trunk.len() != other.trunk.len() {
            return Err(shape("gradient block count mismatch"));
        }
        for (a, b) in self.trunk.iter_mut().zip(&other.trunk) {
            a.weight.add_assign(&b.weight)?;
            if a.bias.len() != b.bias.len() {
                return Err(shape("gradient bias length mismatch"));
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        self.projection.add_assign(&other.projection)
    }

    /// Views in parameter declaration order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 1);
        for b in &self.trunk {
            out.push(b.weight.data());
            out.push(b.bias.as_slice());
        }
        out.push(self.projection.data());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl DisentangleNet {
    /// Kaiming-uniform trunk weights (±√(6/fan_in)), zero trunk biases, and
    /// an all-zero projection.
    pub fn init(config: DNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut trunk = Vec::with_capacity(config.n_blocks);
        let mut fan_in = config.in_dim;
        for _ in 0..config.n_blocks {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * config.hidden_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            trunk.push(Block {
                weight: Tensor2::from_vec(fan_in, config.hidden_dim, data)?,
                bias: vec![0.0; config.hidden_dim],
            });
            fan_in = config.hidden_dim;
        }
        let projection = Tensor2::zeros(config.hidden_dim, config.out_dim);
        Ok(DisentangleNet {
            config,
            trunk,
            projection,
        })
    }

    pub fn config(&self) -> &DNetConfig {
        &self.config
    }

    pub fn trunk(&self) -> &[Block] {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut [Block] {
        &mut self.trunk
    }

    pub fn projection(&self) -> &Tensor2 {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Tensor2 {
        &mut self.projection
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameters in declaration order: (W₁, b₁, …, W_N, b_N, P).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 1);
        for b in &self.trunk {
            out.push(b.weight.data());
            out.push(b.bias.as_slice());
        }
        out.push(self.projection.data());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 1);
        for b in &mut self.trunk {
            out.push(b.weight.data_mut());
            out.push(b.bias.as_mut_slice());
        }
        out.push(self.projection.data_mut());
        out
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            trunk: self
                .trunk
                .iter()
                .map(|b| Block {
                    weight: Tensor2::zeros(b.weight.rows(), b.weight.cols()),
                    bias: vec![0.0; b.bias.len()],
                })
                .collect(),
            projection: Tensor2::zeros(self.projection.rows(), self.projection.cols()),
        }
    }

    pub fn skip(&self, x: &Tensor2) -> Result<Tensor2> {
        if self.config.out_dim == self.config.in_dim {
            Ok(x.clone())
        } else {
            nn_downsample(x, self.config.out_dim)
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &Tensor2) -> Result<(Tensor2, ForwardCache)> {
        if x.cols() != self.config.in_dim {
            return Err(shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.config.in_dim
            )));
        }
        let slope = self.config.leaky_slope;
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.trunk.len());
        for b in &self.trunk {
            let (next, mid) = match self.config.block_order {
                BlockOrder::ActivationLinear => {
                    let a = leaky_relu(&h, slope);
                    (linear(&a, &b.weight, Some(&b.bias))?, a)
                }
                BlockOrder::LinearActivation => {
                    let u = linear(&h, &b.weight, Some(&b.bias))?;
                    (leaky_relu(&u, slope), u)
                }
            };
            blocks.push((h, mid));
            h = next;
        }
        let projected = h.matmul(&self.projection)?;
        let mut y = self.skip(x)?;
        for (yv, &pv) in y.data_mut().iter_mut().zip(projected.data()) {
            // An exact zero leaves the skip value (and its sign of zero) as is.
            if pv != 0.0 {
                *yv += pv;
            }
        }
        let cache = ForwardCache {
            input: x.clone(),
            blocks,
            trunk_out: h,
        };
        Ok((y, cache))
    }

    /// Smallest |input| seen by any LeakyReLU for this batch, i.e. how far
    /// the batch sits from the activation kink.
    pub fn kink_margin(&self, x: &Tensor2) -> Result<f64> {
        let (_, cache) = self.forward_train(x)?;
        let mut m = f64::INFINITY;
        for (input, mid) in &cache.blocks {
            let pre = match self.config.block_order {
                BlockOrder::ActivationLinear => input,
                BlockOrder::LinearActivation => mid,
            };
            m = pre.data().iter().fold(m, |m, v| m.min(v.abs()));
        }
        Ok(m)
    }

    /// Reverse-mode gradients of a scalar loss given `dy = ∂L/∂y`.
    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor2) -> Result<(Tensor2, NetGrads)> {
        if dy.shape() != (cache.input.rows(), self.config.out_dim) {
            return Err(shape(format!(
                "output gradient {:?} for output {:?}",
                dy.shape(),
                (cache.input.rows(), self.config.out_dim)
            )));
        }
        let slope = self.config.leaky_slope;
        let d_projection = cache.trunk_out.t_matmul(dy)?;
        let mut dh = dy.matmul_t(&self.projection)?;
        let mut trunk_grads = Vec::with_capacity(self.trunk.len());
        for (b, (input, mid)) in self.trunk.iter().zip(&cache.blocks).rev() {
            let (g, d_input) = match self.config.block_order {
                BlockOrder::ActivationLinear => {
                    let g = linear_backward(mid, &b.weight, &dh)?;
                    let d_input = leaky_relu_backward(input, &g.dx, slope)?;
                    (g, d_input)
                }
                BlockOrder::LinearActivation => {
                    let du = leaky_relu_backward(mid, &dh, slope)?;
                    let g = linear_backward(input, &b.weight, &du)?;
                    let d_input = g.dx.clone();
                    (g, d_input)
                }
            };
            trunk_grads.push(Block {
                weight: g.dw,
                bias: g.db,
            });
            dh = d_input;
        }
        trunk_grads.reverse();
        let skip_grad = if self.config.out_dim == self.config.in_dim {
            dy.clone()
        } else {
            nn_downsample_backward(dy, self.config.in_dim)?
        };
        dh.add_assign(&skip_grad)?;
        Ok((
            dh,
            NetGrads {
                trunk: trunk_grads,
                projection: d_projection,
            },
        ))
    }

    /// `CLAPNET1` encoding: magic, u32 config length, config JSON, then every
    /// parameter matrix as little-endian f64 in declaration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let cfg_len = u32::try_from(cfg.len()).map_err(|_| invalid("config block too large"))?;
        let mut out = Vec::with_capacity(12 + cfg.len() + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(&cfg);
        for s in self.param_slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                what: "network header",
                needed: 12,
                available: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let cfg_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let cfg_end = 12 + cfg_len;
        if bytes.len() < cfg_end {
            return Err(Error::Truncated {
                what: "network config",
                needed: cfg_end,
                available: bytes.len(),
            });
        }
        let config: DNetConfig = serde_json::from_slice(&bytes[12..cfg_end])
            .map_err(|e| Error::Config(format!("network config: {e}")))?;
        let mut net = DisentangleNet::init(config)?;
        let payload = &bytes[cfg_end..];
        let needed = net.param_count() * 8;
        if payload.len() < needed {
            return Err(Error::Truncated {
                what: "network parameters",
                needed,
                available: payload.len(),
            });
        }
        if payload.len() > needed {
            return Err(shape(format!(
                "parameter block has {} bytes, config implies {needed}",
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("network parameter".into()));
        }
        net.set_params_flat(&values)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        DisentangleNet::from_bytes(&fsio::read_all(path)?)
    }
}

/// Applies `net` when given, otherwise passes embeddings through unchanged.
pub fn apply(net: Option<&DisentangleNet>, x: &Tensor2) -> Result<Tensor2> {
    match net {
        Some(n) => n.forward(x),
        None => Ok(x.clone()),
    }
}
