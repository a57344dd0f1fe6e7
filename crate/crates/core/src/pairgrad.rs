//! Finite-difference checks of the full training objective: network, row
//! normalisation and InfoNCE, differentiated with respect to every network
//! parameter.
//!
//! The differences are taken on a separate evaluation of the objective in
//! double-double arithmetic. In plain f64 the loss carries ~1e-15 of
//! rounding noise, which a difference quotient turns into ~1e-12 absolute
//! error; that swamps gradient entries below ~1e-7, and such entries are
//! common (weights feeding the 0.01-slope side of a LeakyReLU).

use rand::Rng;
use twofloat::TwoFloat;

use crate::dnet::{BlockOrder, DNetConfig, DisentangleNet};
use crate::error::{shape, Result};
use crate::ndcore::{nn_source_index, rel_error, GradCheckReport, Tensor2, DEFAULT_L2_EPS};
use crate::trainer::pair_loss;

/// Step of the 5-point central stencil used on the double-double objective.
pub const FD_STEP: f64 = 1e-6;
/// Instances with a LeakyReLU input closer than this to zero are redrawn;
/// a stencil straddling the kink measures a one-sided slope.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Case {
    pub net: DisentangleNet,
    pub x1: Tensor2,
    pub x2: Tensor2,
    pub tau: f64,
    pub symmetric: bool,
}

/// A random network with a nonzero projection and a batch of `K ≤ max_k`
/// noisy positive pairs of width `D ≤ max_d`.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R, max_k: usize, max_d: usize) -> Result<Case> {
    loop {
        let k = rng.random_range(2..=max_k.max(2));
        let d = rng.random_range(2..=max_d.max(2));
        let cfg = DNetConfig {
            in_dim: d,
            out_dim: rng.random_range(1..=d),
            hidden_dim: rng.random_range(2..=max_d.max(2)),
            n_blocks: rng.random_range(1..=2),
            leaky_slope: if rng.random_bool(0.5) { 0.01 } else { 0.2 },
            init_seed: rng.random(),
            block_order: if rng.random_bool(0.5) {
                BlockOrder::ActivationLinear
            } else {
                BlockOrder::LinearActivation
            },
        };
        let mut net = DisentangleNet::init(cfg)?;
        for v in net.projection_mut().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for b in net.trunk_mut() {
            for v in &mut b.bias {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let x1 = Tensor2::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let mut x2 = x1.clone();
        for v in x2.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let margin = net.kink_margin(&x1)?.min(net.kink_margin(&x2)?);
        if margin < MIN_KINK_MARGIN {
            continue;
        }
        return Ok(Case {
            net,
            x1,
            x2,
            tau: rng.random_range(0.1..1.0),
            symmetric: rng.random_bool(0.25),
        });
    }
}

type Dd = TwoFloat;

fn dd(v: f64) -> Dd {
    TwoFloat::from(v)
}

// The crate's own exp/ln stop at roughly f64 accuracy, which would put the
// noise straight back into the differences.

/// `exp` to ~1e-29 relative: `x = k·ln2 + r`, Taylor series on `r/1024`,
/// then ten squarings.
fn dd_exp(x: Dd) -> Dd {
    let k = (x.hi() / std::f64::consts::LN_2).round();
    let r = x - twofloat::consts::LN_2 * k;
    let s = r / 1024.0;
    let mut term = dd(1.0);
    let mut sum = dd(1.0);
    for n in 1..=10 {
        term = term * s / n as f64;
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

/// `a / b` by long division on the leading parts; the crate's own
/// double-double quotient is only f64-accurate.
fn dd_div(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    dd(q1) + q2 + q3
}

/// Two Newton steps on `exp(y) = x` from the f64 logarithm.
fn dd_ln(x: Dd) -> Dd {
    let mut y = dd(x.hi().ln());
    for _ in 0..2 {
        y = y + x * dd_exp(-y) - 1.0;
    }
    y
}

/// Row-major dense matrix of double-double values.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl Mat {
    fn from_tensor(t: &Tensor2) -> Mat {
        Mat {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| dd(v)).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    /// `self · w + bias`, with `w` given as a flat row-major slice.
    fn affine(&self, w: &[Dd], out: usize, bias: Option<&[Dd]>) -> Mat {
        let mut data = Vec::with_capacity(self.rows * out);
        for i in 0..self.rows {
            for j in 0..out {
                let mut acc = bias.map_or(dd(0.0), |b| b[j]);
                for k in 0..self.cols {
                    acc += self.at(i, k) * w[k * out + j];
                }
                data.push(acc);
            }
        }
        Mat { rows: self.rows, cols: out, data }
    }

    fn leaky(mut self, slope: f64) -> Mat {
        for v in &mut self.data {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self
    }
}

/// The training objective evaluated from scratch in double-double precision,
/// for parameters laid out as [`DisentangleNet::params_flat`].
pub struct ReferenceObjective<'a> {
    cfg: &'a DNetConfig,
    x1: Mat,
    x2: Mat,
    tau: f64,
    symmetric: bool,
}

impl<'a> ReferenceObjective<'a> {
    pub fn new(case: &'a Case) -> Self {
        ReferenceObjective {
            cfg: case.net.config(),
            x1: Mat::from_tensor(&case.x1),
            x2: Mat::from_tensor(&case.x2),
            tau: case.tau,
            symmetric: case.symmetric,
        }
    }

    fn forward(&self, x: &Mat, params: &[Dd]) -> Mat {
        let c = self.cfg;
        let mut at = 0;
        let mut h = Mat { rows: x.rows, cols: x.cols, data: x.data.clone() };
        for b in 0..c.n_blocks {
            let fan_in = if b == 0 { c.in_dim } else { c.hidden_dim };
            let w = &params[at..at + fan_in * c.hidden_dim];
            at += fan_in * c.hidden_dim;
            let bias = &params[at..at + c.hidden_dim];
            at += c.hidden_dim;
            h = match c.block_order {
                BlockOrder::ActivationLinear => h.leaky(c.leaky_slope).affine(w, c.hidden_dim, Some(bias)),
                BlockOrder::LinearActivation => h.affine(w, c.hidden_dim, Some(bias)).leaky(c.leaky_slope),
            };
        }
        let mut y = h.affine(&params[at..at + c.hidden_dim * c.out_dim], c.out_dim, None);
        for i in 0..y.rows {
            for j in 0..c.out_dim {
                let src = if c.out_dim == c.in_dim { j } else { nn_source_index(j, c.in_dim, c.out_dim) };
                y.data[i * c.out_dim + j] += x.at(i, src);
            }
        }
        for i in 0..y.rows {
            let row = &mut y.data[i * y.cols..(i + 1) * y.cols];
            let mut sq = dd(0.0);
            for v in row.iter() {
                sq += *v * *v;
            }
            let n = sq.sqrt();
            let n = if n > DEFAULT_L2_EPS { n } else { dd(DEFAULT_L2_EPS) };
            for v in row.iter_mut() {
                *v = dd_div(*v, n);
            }
        }
        y
    }

    fn infonce(&self, z: &Mat, zp: &Mat) -> Dd {
        let k = z.rows;
        let mut total = dd(0.0);
        for i in 0..k {
            let logits: Vec<Dd> = (0..k)
                .map(|j| {
                    let mut s = dd(0.0);
                    for d in 0..z.cols {
                        s += z.at(i, d) * zp.at(j, d);
                    }
                    s / self.tau
                })
                .collect();
            let max = logits.iter().copied().fold(logits[0], |m, v| if v > m { v } else { m });
            let mut denom = dd(0.0);
            for &l in &logits {
                denom += dd_exp(l - max);
            }
            total += max + dd_ln(denom) - logits[i];
        }
        total / k as f64
    }

    pub fn value(&self, params: &[Dd]) -> Dd {
        let z1 = self.forward(&self.x1, params);
        let z2 = self.forward(&self.x2, params);
        if self.symmetric {
            (self.infonce(&z1, &z2) + self.infonce(&z2, &z1)) * 0.5
        } else {
            self.infonce(&z1, &z2)
        }
    }

    /// 5-point central differences of [`Self::value`] at `params`.
    pub fn numeric_gradient(&self, params: &[f64], step: f64) -> Vec<f64> {
        let mut probe: Vec<Dd> = params.iter().map(|&v| dd(v)).collect();
        let at = |probe: &mut Vec<Dd>, k: usize, offset: f64| {
            // p + offset is exact in double-double
            probe[k] = dd(params[k]) + offset;
            let v = self.value(probe);
            probe[k] = dd(params[k]);
            v
        };
        (0..params.len())
            .map(|k| {
                let p1 = at(&mut probe, k, step);
                let m1 = at(&mut probe, k, -step);
                let p2 = at(&mut probe, k, 2.0 * step);
                let m2 = at(&mut probe, k, -2.0 * step);
                let num = (p1 - m1) * 8.0 - (p2 - m2);
                f64::from(num / (12.0 * step))
            })
            .collect()
    }
}

/// Analytic parameter gradients against central differences of the
/// double-double objective.
pub fn check_case(case: &Case) -> Result<GradCheckReport> {
    let (_, grads) = pair_loss(&case.net, &case.x1, &case.x2, case.tau, case.symmetric)?;
    let analytic = grads.flatten();
    let params = case.net.params_flat();
    if analytic.len() != params.len() {
        return Err(shape("gradient and parameter layouts differ"));
    }
    let numeric = ReferenceObjective::new(case).numeric_gradient(&params, FD_STEP);
    let errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel_error(a, n)).collect();
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        errors,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_cases_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let case = random_case(&mut rng, 8, 16).unwrap();
            let r = check_case(&case).unwrap();
            assert!(r.passes(1e-5), "{}", r.max_rel_error);
        }
    }

    #[test]
    fn extended_exp_and_ln() {
        // e = exp(1) to double-double precision
        let e = dd_exp(dd(1.0));
        let want = twofloat::consts::E;
        assert!(f64::from((e - want).abs()) < 3e-29);
        assert!(f64::from((dd_ln(want) - 1.0).abs()) < 1e-29);
        let x = dd(-7.25);
        assert!(f64::from((dd_ln(dd_exp(x)) - x).abs()) < 1e-28);
        assert_eq!(dd_exp(dd(0.0)), dd(1.0));
    }

    #[test]
    fn reference_objective_matches_f64_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let case = random_case(&mut rng, 6, 8).unwrap();
            let (loss, _) = pair_loss(&case.net, &case.x1, &case.x2, case.tau, case.symmetric).unwrap();
            let params: Vec<Dd> = case.net.params_flat().into_iter().map(dd).collect();
            let reference = f64::from(ReferenceObjective::new(&case).value(&params));
            assert!((loss - reference).abs() < 1e-13 * loss.abs().max(1.0), "{loss} vs {reference}");
        }
    }

    #[test]
    fn agrees_with_f64_differences_on_large_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let case = random_case(&mut rng, 4, 6).unwrap();
        let r = check_case(&case).unwrap();
        let mut probe = case.net.clone();
        let plain = crate::ndcore::grad_check(
            |p: &[f64]| {
                probe.set_params_flat(p).unwrap();
                pair_loss(&probe, &case.x1, &case.x2, case.tau, case.symmetric).unwrap().0
            },
            &case.net.params_flat(),
            &r.analytic,
            1e-4,
            crate::ndcore::Stencil::Central5,
        )
        .unwrap();
        for (a, b) in r.numeric.iter().zip(&plain.numeric) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let case = random_case(&mut rng, 4, 6).unwrap();
        let (_, grads) = pair_loss(&case.net, &case.x1, &case.x2, case.tau, case.symmetric).unwrap();
        let numeric = ReferenceObjective::new(&case).numeric_gradient(&case.net.params_flat(), FD_STEP);
        let mut wrong = grads.flatten();
        let last = wrong.len() - 1;
        wrong[last] = wrong[last] * 1.001 + 1e-6;
        assert!(rel_error(wrong[last], numeric[last]) > 1e-5);
    }
}
