use super::sorted_sum;
use super::tensor::{dot, Tensor2};
use crate::error::{invalid, shape, Error, Result};

/// Tolerance on row norms accepted by [`infonce_loss`].
const NORM_TOL: f64 = 1e-6;

/// Loss value with gradients for both views.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub dz: Tensor2,
    pub dzp: Tensor2,
}

/// One-directional InfoNCE over `K` positive pairs `(z_i, z'_i)`:
///
/// `L = (1/K) Σ_i −log( exp(z_i·z'_i/τ) / Σ_j exp(z_i·z'_j/τ) )`.
///
/// Rows must already be L2-normalised (or exactly zero). Sums run over sorted
/// terms, so reordering the pairs leaves the loss bitwise unchanged.
pub fn infonce_loss(z: &Tensor2, zp: &Tensor2, tau: f64) -> Result<InfoNce> {
    let k = z.rows();
    if k == 0 {
        return Err(invalid("InfoNCE needs at least one pair"));
    }
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if z.shape() != zp.shape() {
        return Err(shape(format!(
            "InfoNCE views {:?} and {:?}",
            z.shape(),
            zp.shape()
        )));
    }
    check_normalized(z)?;
    check_normalized(zp)?;

    let mut logits = z.matmul_t(zp)?;
    for v in logits.data_mut() {
        *v /= tau;
    }

    let mut terms = Vec::with_capacity(k);
    let mut probs = Tensor2::zeros(k, k);
    let mut exps = vec![0.0; k];
    for i in 0..k {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (e, &s) in exps.iter_mut().zip(row) {
            *e = (s - max).exp();
        }
        let p = probs.row_mut(i);
        p.copy_from_slice(&exps);
        let denom = sorted_sum(&mut exps);
        for v in p.iter_mut() {
            *v /= denom;
        }
        terms.push(max + denom.ln() - row[i]);
    }
    let loss = sorted_sum(&mut terms) / k as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("InfoNCE loss".into()));
    }

    // dL/ds_ij = (p_ij − δ_ij) / K, and s = Z·Z'ᵀ / τ.
    let scale = 1.0 / (k as f64 * tau);
    let mut g = probs;
    for i in 0..k {
        let row = g.row_mut(i);
        row[i] -= 1.0;
        for v in row {
            *v *= scale;
        }
    }
    let dz = g.matmul(zp)?;
    let dzp = g.t_matmul(z)?;
    Ok(InfoNce { loss, dz, dzp })
}

/// Average of the InfoNCE loss in both directions, for ablations.
pub fn symmetric_infonce_loss(z: &Tensor2, zp: &Tensor2, tau: f64) -> Result<InfoNce> {
    let fwd = infonce_loss(z, zp, tau)?;
    let bwd = infonce_loss(zp, z, tau)?;
    let mut dz = fwd.dz;
    dz.add_assign(&bwd.dzp)?;
    let mut dzp = fwd.dzp;
    dzp.add_assign(&bwd.dz)?;
    for v in dz.data_mut().iter_mut().chain(dzp.data_mut()) {
        *v *= 0.5;
    }
    Ok(InfoNce {
        loss: 0.5 * (fwd.loss + bwd.loss),
        dz,
        dzp,
    })
}

fn check_normalized(x: &Tensor2) -> Result<()> {
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt();
        if (n - 1.0).abs() > NORM_TOL && n > NORM_TOL {
            return Err(invalid(format!(
                "row {i} has norm {n}; InfoNCE expects L2-normalised rows"
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(shape(format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(invalid("cross-entropy over an empty batch"));
    }
    let mut grad = Tensor2::zeros(b, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::OutOfRange(format!("label {y} with {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut denom = 0.0;
        for (gj, &s) in g.iter_mut().zip(row) {
            *gj = (s - max).exp();
            denom += *gj;
        }
        total += max + denom.ln() - row[y];
        for gj in g.iter_mut() {
            *gj /= denom * b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}
