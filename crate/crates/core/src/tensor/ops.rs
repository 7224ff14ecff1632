//! Forward-only tensor operations. These are the same kernels the [`Graph`]
//! records, without the bookkeeping needed for gradients.
//!
//! [`Graph`]: super::Graph

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Padding, Reduction, Tensor};
use crate::error::{Error, Result};

/// 2-D convolution over `[H,W,Cin]` or `[B,H,W,Cin]` with kernels
/// `[kh,kw,Cin,Cout]`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), bias.shape(), stride, padding)?;
    let (out, _) = kernels::conv2d_forward(input.data(), kernels.data(), bias.data(), &g);
    Tensor::new(conv_shape(input.rank(), &g), out)
}

pub(crate) fn conv_shape(rank: usize, g: &ConvGeom) -> Vec<usize> {
    if rank == 3 {
        vec![g.out_h, g.out_w, g.cout]
    } else {
        vec![g.batch, g.out_h, g.out_w, g.cout]
    }
}

pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let g = PoolGeom::new(input.shape(), k, stride)?;
    let (out, _) = kernels::maxpool_forward(input.data(), &g);
    Tensor::new(pool_shape(input.rank(), &g), out)
}

pub(crate) fn pool_shape(rank: usize, g: &PoolGeom) -> Vec<usize> {
    if rank == 3 {
        vec![g.out_h, g.out_w, g.c]
    } else {
        vec![g.batch, g.out_h, g.out_w, g.c]
    }
}

/// `input · weight + bias` for `input [n]` or `[B, n]`, `weight [n, m]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, n, m) = dense_dims(input, weight, bias)?;
    let out = kernels::dense_forward(input.data(), weight.data(), bias.data(), rows, n);
    Tensor::new(dense_shape(input.rank(), rows, m), out)
}

pub(crate) fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (rows, n) = kernels::matrix_dims(input.shape(), "dense input")?;
    let [wn, m] = *weight.shape() else {
        return Err(Error::Dimension(format!(
            "dense weight must be [n, m], got {:?}",
            weight.shape()
        )));
    };
    if wn != n {
        return Err(Error::Dimension(format!(
            "dense input length {n} does not match weight rows {wn}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Dimension(format!(
            "dense bias must be [{m}], got {:?}",
            bias.shape()
        )));
    }
    Ok((rows, n, m))
}

pub(crate) fn dense_shape(rank: usize, rows: usize, m: usize) -> Vec<usize> {
    if rank == 1 {
        vec![m]
    } else {
        vec![rows, m]
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Temperature softmax over the last axis of a vector or matrix.
pub fn softmax_t(logits: &Tensor, tau: f64) -> Result<Tensor> {
    kernels::check_tau(tau)?;
    let (_, k) = kernels::matrix_dims(logits.shape(), "softmax_t")?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax_t received non-finite logits".into()));
    }
    let out = kernels::softmax_rows(logits.data(), k, tau);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over rows of `-Σ target·ln(predicted + ε)`.
pub fn cross_entropy(target: &Tensor, predicted: &Tensor) -> Result<f64> {
    cross_entropy_with(target, predicted, Reduction::Mean)
}

pub fn cross_entropy_with(target: &Tensor, predicted: &Tensor, reduction: Reduction) -> Result<f64> {
    let k = check_pair(target, predicted, "cross_entropy")?;
    kernels::check_probability_rows(target.data(), k, "cross_entropy target")?;
    kernels::check_probability_rows(predicted.data(), k, "cross_entropy prediction")?;
    let per_row = kernels::cross_entropy_rows(target.data(), predicted.data(), k);
    Ok(kernels::reduce(&per_row, reduction))
}

/// Per-row cross-entropy without reduction.
pub fn cross_entropy_rows(target: &Tensor, predicted: &Tensor) -> Result<Vec<f64>> {
    let k = check_pair(target, predicted, "cross_entropy")?;
    kernels::check_probability_rows(target.data(), k, "cross_entropy target")?;
    kernels::check_probability_rows(predicted.data(), k, "cross_entropy prediction")?;
    Ok(kernels::cross_entropy_rows(target.data(), predicted.data(), k))
}

pub(crate) fn check_pair(target: &Tensor, predicted: &Tensor, what: &str) -> Result<usize> {
    if target.shape() != predicted.shape() {
        return Err(Error::Dimension(format!(
            "{what}: target shape {:?} differs from prediction shape {:?}",
            target.shape(),
            predicted.shape()
        )));
    }
    let (_, k) = kernels::matrix_dims(target.shape(), what)?;
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    #[test]
    fn lenet_first_layer_shape() {
        let x = Tensor::zeros([32, 32, 1]);
        let k = Tensor::full([5, 5, 1, 6], 0.1);
        let b = Tensor::zeros([6]);
        let y = conv2d(&x, &k, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[28, 28, 6]);
    }

    #[test]
    fn conv_of_zero_image_is_bias() {
        let x = Tensor::zeros([9, 7, 3]);
        let k = Tensor::new([3, 3, 3, 2], (0..54).map(|i| i as f64 - 20.0).collect()).unwrap();
        let b = Tensor::from_vec(vec![0.25, -1.5]);
        for padding in [Padding::Valid, Padding::Same] {
            let y = conv2d(&x, &k, &b, 1, padding).unwrap();
            for px in y.data().chunks_exact(2) {
                assert_eq!(px, &[0.25, -1.5]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros([8, 8, 2]);
        let k = Tensor::zeros([3, 3, 1, 4]);
        let b = Tensor::zeros([4]);
        assert!(matches!(
            conv2d(&x, &k, &b, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
        let k = Tensor::zeros([9, 9, 2, 4]);
        assert!(matches!(
            conv2d(&x, &k, &b, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pool_shapes_and_constants() {
        let x = Tensor::full([28, 28, 6], 0.7);
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[14, 14, 6]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!(matches!(
            maxpool2d(&Tensor::zeros([1, 4, 1]), 2, 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dense_shapes_and_identity() {
        let x = Tensor::from_vec((0..400).map(f64::from).collect());
        let w = Tensor::zeros([400, 120]);
        let b = Tensor::zeros([120]);
        assert_eq!(dense(&x, &w, &b).unwrap().shape(), &[120]);

        let n = 4;
        let mut eye = vec![0.0; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let x = Tensor::from_vec(vec![1.5, -2.0, 0.0, 3.25]);
        let y = dense(&x, &Tensor::new([n, n], eye).unwrap(), &Tensor::zeros([n])).unwrap();
        assert_eq!(y.data(), x.data());

        assert!(matches!(
            dense(&Tensor::zeros([3]), &Tensor::zeros([4, 2]), &Tensor::zeros([2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_examples() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let y = relu(&Tensor::from_vec(vec![-3.0, -0.5]));
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&Tensor::from_vec(vec![0.0, 0.0]), 3.7).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax_t(&Tensor::from_vec(vec![2.0, 0.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p.data()[0], e / (1.0 + e), 1e-12));
        assert!(close(p.data()[1], 1.0 / (1.0 + e), 1e-12));
        assert!(close(p.data()[0], 0.7311, 1e-4));

        // At tau = 1000 the first entry is still 0.3356; the 1e-3 band is
        // reached from tau ~ 3400 on.
        let p = softmax_t(&Tensor::from_vec(vec![10.0, 0.0, 0.0]), 1e4).unwrap();
        assert!(p.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-3)));

        assert!(matches!(
            softmax_t(&Tensor::from_vec(vec![1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            softmax_t(&Tensor::from_vec(vec![1.0]), -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Tensor::from_vec(vec![1.0, 0.0]);
        let p = Tensor::from_vec(vec![0.5, 0.5]);
        assert!(close(cross_entropy(&t, &p).unwrap(), std::f64::consts::LN_2, 1e-9));

        let y = Tensor::from_vec(vec![0.2, 0.3, 0.5]);
        let h = super::super::entropy(y.data());
        assert!(close(cross_entropy(&y, &y).unwrap(), h, 1e-9));

        let one_hot = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        assert!(cross_entropy(&one_hot, &one_hot).unwrap().abs() < 1e-9);

        let bad = Tensor::from_vec(vec![1.5, -0.5]);
        assert!(matches!(cross_entropy(&bad, &p), Err(Error::Domain(_))));
    }
}
