use super::tensor::{dot, Tensor2};
use crate::error::{invalid, shape, Result};

pub const DEFAULT_L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Tensor2,
    pub dw: Tensor2,
    pub db: Vec<f64>,
}

/// `y = x·W (+ bias)` with `x: B×I`, `W: I×O`.
pub fn linear(x: &Tensor2, w: &Tensor2, bias: Option<&[f64]>) -> Result<Tensor2> {
    let mut y = x.matmul(w)?;
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(shape(format!(
                "bias of length {} for {} outputs",
                b.len(),
                w.cols()
            )));
        }
        for i in 0..y.rows() {
            for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(y)
}

pub fn linear_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<LinearGrads> {
    if dy.shape() != (x.rows(), w.cols()) || x.cols() != w.rows() {
        return Err(shape(format!(
            "linear backward with x {:?}, W {:?}, dY {:?}",
            x.shape(),
            w.shape(),
            dy.shape()
        )));
    }
    let dx = dy.matmul_t(w)?;
    let dw = x.t_matmul(dy)?;
    let mut db = vec![0.0; w.cols()];
    for i in 0..dy.rows() {
        for (acc, g) in db.iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

/// Elementwise `x` for `x ≥ 0`, `slope·x` otherwise.
pub fn leaky_relu(x: &Tensor2, slope: f64) -> Tensor2 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    y
}

/// Gradient of [`leaky_relu`]; the positive branch is used at exactly zero.
pub fn leaky_relu_backward(x: &Tensor2, dy: &Tensor2, slope: f64) -> Result<Tensor2> {
    if x.shape() != dy.shape() {
        return Err(shape("leaky_relu backward shape mismatch"));
    }
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv < 0.0 {
            *g *= slope;
        }
    }
    Ok(dx)
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2norm_rows(x: &Tensor2, eps: f64) -> Tensor2 {
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let n = dot(row, row).sqrt().max(eps);
        for v in row {
            *v /= n;
        }
    }
    y
}

pub fn l2norm_rows_backward(x: &Tensor2, dy: &Tensor2, eps: f64) -> Result<Tensor2> {
    if x.shape() != dy.shape() {
        return Err(shape("l2norm backward shape mismatch"));
    }
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let gr = dy.row(i);
        let norm = dot(xr, xr).sqrt();
        let out = dx.row_mut(i);
        if norm > eps {
            // y = x/n;  dx = (dy - y (y·dy)) / n
            let proj = dot(xr, gr) / (norm * norm);
            for ((o, &g), &xv) in out.iter_mut().zip(gr).zip(xr) {
                *o = (g - xv * proj) / norm;
            }
        } else {
            for (o, &g) in out.iter_mut().zip(gr) {
                *o = g / eps;
            }
        }
    }
    Ok(dx)
}

/// Source column of output column `j` when resampling `c_in` features to
/// `c_out` by nearest neighbour with centre alignment.
pub fn nn_source_index(j: usize, c_in: usize, c_out: usize) -> usize {
    // floor((j + 0.5) * c_in / c_out), in integer arithmetic
    ((2 * j + 1) * c_in) / (2 * c_out)
}

pub fn nn_downsample(x: &Tensor2, c_out: usize) -> Result<Tensor2> {
    let c_in = x.cols();
    if c_out == 0 || c_out > c_in {
        return Err(invalid(format!(
            "nearest-neighbour resize from {c_in} to {c_out} columns (upsampling unsupported)"
        )));
    }
    let mut y = Tensor2::zeros(x.rows(), c_out);
    for i in 0..x.rows() {
        let src = x.row(i);
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v = src[nn_source_index(j, c_in, c_out)];
        }
    }
    Ok(y)
}

pub fn nn_downsample_backward(dy: &Tensor2, c_in: usize) -> Result<Tensor2> {
    let c_out = dy.cols();
    if c_out == 0 || c_out > c_in {
        return Err(invalid(format!("downsample backward {c_in} -> {c_out}")));
    }
    let mut dx = Tensor2::zeros(dy.rows(), c_in);
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let out = dx.row_mut(i);
        for (j, &gj) in g.iter().enumerate() {
            out[nn_source_index(j, c_in, c_out)] += gj;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor2, h: f64, mut f: impl FnMut(&Tensor2) -> f64) -> Vec<f64> {
        let mut probe = x.clone();
        (0..x.data().len())
            .map(|k| {
                let orig = probe.data()[k];
                probe.data_mut()[k] = orig + h;
                let fp = f(&probe);
                probe.data_mut()[k] = orig - h;
                let fm = f(&probe);
                probe.data_mut()[k] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Random projection of the output, so the scalar probes every entry.
    fn weights(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        random(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum(y: &Tensor2, g: &Tensor2) -> f64 {
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = linear(&x, &Tensor2::identity(2), None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let z = linear(&x, &Tensor2::zeros(2, 3), None).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let b = linear(&x, &Tensor2::identity(2), Some(&[0.5, -1.0])).unwrap();
        assert_eq!(b.data(), &[1.5, 1.0]);
    }

    #[test]
    fn linear_shape_errors() {
        let x = Tensor2::zeros(1, 3);
        assert!(linear(&x, &Tensor2::zeros(2, 2), None).is_err());
        assert!(linear(&Tensor2::zeros(1, 2), &Tensor2::zeros(2, 2), Some(&[1.0])).is_err());
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(3, 4, &mut rng);
        let w = random(4, 2, &mut rng);
        let b = vec![0.3, -0.2];
        let g = weights(3, 2, 99);
        let grads = linear_backward(&x, &w, &g).unwrap();

        let nx = numeric_grad(&x, 1e-6, |x| weighted_sum(&linear(x, &w, Some(&b)).unwrap(), &g));
        let nw = numeric_grad(&w, 1e-6, |w| weighted_sum(&linear(&x, w, Some(&b)).unwrap(), &g));
        let bt = Tensor2::from_vec(1, 2, b.clone()).unwrap();
        let nb = numeric_grad(&bt, 1e-6, |bt| {
            weighted_sum(&linear(&x, &w, Some(bt.data())).unwrap(), &g)
        });
        assert!(max_rel(grads.dx.data(), &nx) <= 1e-7);
        assert!(max_rel(grads.dw.data(), &nw) <= 1e-7);
        assert!(max_rel(&grads.db, &nb) <= 1e-7);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor2::from_rows(&[vec![-1.0, 5.0, 0.0]]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[-0.01, 5.0, 0.0]);
        let d = leaky_relu_backward(&x, &Tensor2::from_rows(&[vec![1.0; 3]]).unwrap(), 0.01).unwrap();
        assert_eq!(d.data(), &[0.01, 1.0, 1.0]);
    }

    #[test]
    fn leaky_relu_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random(4, 5, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 1e-3_f64.copysign(*v);
            }
        }
        let g = weights(4, 5, 11);
        let a = leaky_relu_backward(&x, &g, 0.01).unwrap();
        let n = numeric_grad(&x, 1e-6, |x| weighted_sum(&leaky_relu(x, 0.01), &g));
        assert!(max_rel(a.data(), &n) <= 1e-7);
    }

    #[test]
    fn l2norm_values() {
        let x = Tensor2::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let y = l2norm_rows(&x, DEFAULT_L2_EPS);
        assert_eq!(y.row(0), &[0.6, 0.8]);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn l2norm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(5, 6, &mut rng);
        for i in 0..x.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt();
            if n < 0.1 {
                x.row_mut(i)[0] += 0.2;
            }
        }
        let g = weights(5, 6, 13);
        let a = l2norm_rows_backward(&x, &g, DEFAULT_L2_EPS).unwrap();
        let n = numeric_grad(&x, 1e-6, |x| weighted_sum(&l2norm_rows(x, DEFAULT_L2_EPS), &g));
        assert!(max_rel(a.data(), &n) <= 1e-6);
    }

    #[test]
    fn downsample_index_rule() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(nn_downsample(&x, 2).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(nn_downsample(&x, 4).unwrap(), x);
        let y = Tensor2::from_rows(&[vec![7.0, 9.0]]).unwrap();
        assert_eq!(nn_downsample(&y, 1).unwrap().data(), &[9.0]);
        assert!(nn_downsample(&y, 3).is_err());
        assert!(nn_downsample(&y, 0).is_err());
    }

    #[test]
    fn downsample_index_matches_float_rule() {
        for c_in in 1..40usize {
            for c_out in 1..=c_in {
                for j in 0..c_out {
                    let float = ((j as f64 + 0.5) * c_in as f64 / c_out as f64).floor() as usize;
                    assert_eq!(nn_source_index(j, c_in, c_out), float, "{c_in}->{c_out} j={j}");
                }
            }
        }
    }

    #[test]
    fn downsample_backward_scatters() {
        let dy = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let dx = nn_downsample_backward(&dy, 4).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 2.0]);
    }
}
