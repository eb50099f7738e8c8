//! Building blocks of the forward pass. Activations are `[T, C]` matrices
//! (time-major) for a single sequence.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Tensor;
use crate::math::{gelu, sigmoid, swish};
use crate::{Error, Result};

pub const RMSNORM_EPS: f64 = 1e-8;
pub const GROUPNORM_EPS: f64 = 1e-5;

/// RMSNorm over the last dimension of `x`.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::param("rmsnorm on a scalar"))?;
    if gamma.shape() != [d] {
        return Err(Error::param(format!("gamma shape {:?} != [{d}]", gamma.shape())));
    }
    let mut out = x.clone();
    if d > 0 {
        for row in out.data_mut().chunks_exact_mut(d) {
            rmsnorm_slice(row, gamma.data(), eps);
        }
    }
    Ok(out)
}

fn rmsnorm_slice(row: &mut [f64], gamma: &[f64], eps: f64) {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for (v, g) in row.iter_mut().zip(gamma) {
        *v *= inv * g;
    }
}

pub fn rmsnorm_rows(x: &Array2<f64>, gamma: &[f64]) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        rmsnorm_slice(row.as_slice_mut().expect("owned rows are contiguous"), gamma, RMSNORM_EPS);
    }
    out
}

/// `x · wᵀ + b` with `w` shaped `[out, in]`.
pub fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: Option<&[f64]>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &ArrayView1::from(b);
    }
    y
}

/// 1-D convolution with symmetric zero padding `dilation·(k−1)/2`.
///
/// `w` is `[out, in, k]`. Output length is `floor((T − 1)/stride) + 1`, so
/// a stride of 1 preserves length and a stride of 2 gives `ceil(T/2)`.
pub fn conv1d(x: &Array2<f64>, w: &Tensor, b: &[f64], stride: usize, dilation: usize) -> Result<Array2<f64>> {
    let w = w.view3()?;
    let (c_out, c_in, k) = w.dim();
    let (t, cx) = x.dim();
    if cx != c_in || b.len() != c_out {
        return Err(Error::param(format!("conv1d: input {cx} channels vs weight {:?}", w.shape())));
    }
    let pad = dilation * (k - 1) / 2;
    let t_out = if t == 0 { 0 } else { (t - 1) / stride + 1 };
    let mut y = Array2::<f64>::zeros((t_out, c_out));
    y += &ArrayView1::from(b);
    for j in 0..k {
        let wj = w.slice(s![.., .., j]);
        let mut gathered = Array2::<f64>::zeros((t_out, c_in));
        let mut any = false;
        for o in 0..t_out {
            let src = (o * stride + j * dilation) as isize - pad as isize;
            if (0..t as isize).contains(&src) {
                gathered.row_mut(o).assign(&x.row(src as usize));
                any = true;
            }
        }
        if any {
            y += &gathered.dot(&wj.t());
        }
    }
    Ok(y)
}

/// Depthwise length-preserving convolution, `w` shaped `[C, k]`.
pub fn depthwise_conv(x: &Array2<f64>, w: ArrayView2<f64>, b: &[f64]) -> Array2<f64> {
    let (t, c) = x.dim();
    let k = w.ncols();
    let pad = (k - 1) / 2;
    let mut y = Array2::<f64>::zeros((t, c));
    for o in 0..t {
        let mut row = y.row_mut(o);
        row.assign(&ArrayView1::from(b));
        for j in 0..k {
            let src = o as isize + j as isize - pad as isize;
            if (0..t as isize).contains(&src) {
                let xr = x.row(src as usize);
                for ch in 0..c {
                    row[ch] += w[[ch, j]] * xr[ch];
                }
            }
        }
    }
    y
}

/// GroupNorm over time and the channels of each group, then affine.
pub fn group_norm(x: &Array2<f64>, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Array2<f64> {
    let (t, c) = x.dim();
    let per = c / groups;
    let mut y = x.to_owned();
    for g in 0..groups {
        let cols = s![.., g * per..(g + 1) * per];
        let block = x.slice(cols);
        let n = (t * per) as f64;
        let mean = block.sum() / n;
        let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let mut out = y.slice_mut(cols);
        for ((_, j), v) in out.indexed_iter_mut() {
            let ch = g * per + j;
            *v = (*v - mean) * inv * gamma[ch] + beta[ch];
        }
    }
    y
}

/// GLU over the channel axis: first half gated by the sigmoid of the second.
pub fn glu(x: &Array2<f64>) -> Array2<f64> {
    let half = x.ncols() / 2;
    let a = x.slice(s![.., ..half]);
    let b = x.slice(s![.., half..]);
    ndarray::Zip::from(&a).and(&b).map_collect(|&a, &b| a * sigmoid(b))
}

pub struct GruWeights<'a> {
    pub w: [ArrayView2<'a, f64>; 3],
    pub u: [ArrayView2<'a, f64>; 3],
    pub b: [&'a [f64]; 3],
}

/// One GRU direction from a zero state. Gate order is (z, r, h):
/// `h_t = (1 − z_t)·h_{t−1} + z_t·h̃_t`.
pub fn gru(x: &Array2<f64>, wts: &GruWeights<'_>, reverse: bool) -> Array2<f64> {
    let t_len = x.nrows();
    let hidden = wts.u[0].nrows();
    let proj: Vec<Array2<f64>> = (0..3).map(|g| linear(x, wts.w[g], Some(wts.b[g]))).collect();
    let mut h = Array1::<f64>::zeros(hidden);
    let mut out = Array2::<f64>::zeros((t_len, hidden));
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let z = (&proj[0].row(t) + &wts.u[0].dot(&h)).mapv(sigmoid);
        let r = (&proj[1].row(t) + &wts.u[1].dot(&h)).mapv(sigmoid);
        let cand = (&proj[2].row(t) + &wts.u[2].dot(&(&r * &h))).mapv(f64::tanh);
        h = &h * &z.mapv(|v| 1.0 - v) + &z * &cand;
        out.row_mut(t).assign(&h);
    }
    out
}

/// Absolute sinusoidal encodings: `sin(t/10000^(2i/d))` on even channels,
/// `cos` on odd ones.
pub fn sinusoidal_positions(t_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, d), |(t, c)| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise softmax.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Multi-head scaled dot-product self-attention without biases. Returns the
/// projected output and the per-head attention weights.
pub fn mhsa(
    x: &Array2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    w_v: ArrayView2<f64>,
    w_o: ArrayView2<f64>,
    heads: usize,
    head_dim: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let q = linear(x, w_q, None);
    let k = linear(x, w_k, None);
    let v = linear(x, w_v, None);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut concat = Array2::<f64>::zeros((x.nrows(), heads * head_dim));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut a);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    (linear(&concat, w_o, None), weights)
}

/// Position-wise feed-forward: `W2·GELU(W1·x + b1) + b2`.
pub fn ffn(x: &Array2<f64>, w1: ArrayView2<f64>, b1: &[f64], w2: ArrayView2<f64>, b2: &[f64]) -> Array2<f64> {
    let hdn = linear(x, w1, Some(b1)).mapv(gelu);
    linear(&hdn, w2, Some(b2))
}

/// NaN passes through so later finiteness checks still see it.
pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
}

pub fn swish_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(swish);
}

pub fn gelu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(gelu);
}

/// Concatenate along channels.
pub fn concat_channels(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn relu_keeps_nan() {
        let mut x = Array2::from_shape_vec((1, 3), vec![-1.0, f64::NAN, 2.0]).unwrap();
        relu_inplace(&mut x);
        assert_eq!(x[[0, 0]], 0.0);
        assert!(x[[0, 1]].is_nan());
        assert_eq!(x[[0, 2]], 2.0);
    }

    #[test]
    fn rmsnorm_examples() {
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::filled(vec![2], 1.0);
        let y = rmsnorm(&x, &g, RMSNORM_EPS).unwrap();
        let r = 12.5f64.sqrt();
        assert_abs_diff_eq!(y.data()[0], 3.0 / r, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], 4.0 / r, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[0], 0.84853, epsilon = 1e-5);
        let z = rmsnorm(&Tensor::zeros(vec![3, 4]), &Tensor::filled(vec![4], 1.0), RMSNORM_EPS).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_lengths() {
        let w = Tensor::filled(vec![1, 1, 3], 1.0);
        for (t, expect) in [(1, 1), (2, 1), (7, 4), (150, 75), (152, 76)] {
            let x = Array2::ones((t, 1));
            assert_eq!(conv1d(&x, &w, &[0.0], 2, 1).unwrap().nrows(), expect);
        }
        let w5 = Tensor::filled(vec![1, 1, 5], 1.0);
        let x = Array2::ones((9, 1));
        assert_eq!(conv1d(&x, &w5, &[0.0], 1, 2).unwrap().nrows(), 9);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        // out[t] = Σ_j w[j]·x[t + j·d − pad]
        let x = Array2::from_shape_fn((6, 1), |(t, _)| (t + 1) as f64);
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap();
        let y = conv1d(&x, &w, &[0.5], 1, 2).unwrap();
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for t in 0..6 {
            let mut acc = 0.5;
            for (j, wj) in [1.0, 10.0, 100.0].iter().enumerate() {
                let src = t as isize + 2 * j as isize - 2;
                if (0..6).contains(&src) {
                    acc += wj * xs[src as usize];
                }
            }
            assert_abs_diff_eq!(y[[t, 0]], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_unit_gru_hand_trace() {
        let (wz, uz, bz) = (0.5, -0.3, 0.1);
        let (wr, ur, br) = (-0.2, 0.7, 0.05);
        let (wh, uh, bh) = (0.9, 0.4, -0.1);
        let xs = [1.0, -2.0];
        let wv = [[wz], [wr], [wh]].map(|v| Array2::from_elem((1, 1), v[0]));
        let uv = [uz, ur, uh].map(|v| Array2::from_elem((1, 1), v));
        let bz_s = [bz];
        let br_s = [br];
        let bh_s = [bh];
        let wts = GruWeights {
            w: [wv[0].view(), wv[1].view(), wv[2].view()],
            u: [uv[0].view(), uv[1].view(), uv[2].view()],
            b: [&bz_s, &br_s, &bh_s],
        };
        let x = Array2::from_shape_vec((2, 1), xs.to_vec()).unwrap();
        let out = gru(&x, &wts, false);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for (t, &xt) in xs.iter().enumerate() {
            let z = sig(wz * xt + uz * h + bz);
            let r = sig(wr * xt + ur * h + br);
            let c = (wh * xt + uh * (r * h) + bh).tanh();
            h = (1.0 - z) * h + z * c;
            assert_abs_diff_eq!(out[[t, 0]], h, epsilon = 1e-12);
        }
        let back = gru(&x, &wts, true);
        let mut h = 0.0;
        for t in (0..2).rev() {
            let xt = xs[t];
            let z = sig(wz * xt + uz * h + bz);
            let r = sig(wr * xt + ur * h + br);
            let c = (wh * xt + uh * (r * h) + bh).tanh();
            h = (1.0 - z) * h + z * c;
            assert_abs_diff_eq!(back[[t, 0]], h, epsilon = 1e-12);
        }
    }

    #[test]
    fn glu_halves_channels() {
        let x = Array2::from_elem((3, 768), 0.5);
        assert_eq!(glu(&x).dim(), (3, 384));
        assert_abs_diff_eq!(glu(&x)[[0, 0]], 0.5 / (1.0 + (-0.5f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let x = Array2::from_shape_fn((5, 4), |(t, c)| (t * 4 + c) as f64 * if c < 2 { 1.0 } else { 3.0 });
        let y = group_norm(&x, 2, &[1.0; 4], &[0.0; 4], 0.0);
        for g in 0..2 {
            let block = y.slice(s![.., g * 2..g * 2 + 2]);
            assert_abs_diff_eq!(block.mean().unwrap(), 0.0, epsilon = 1e-12);
            let var = block.iter().map(|v| v * v).sum::<f64>() / block.len() as f64;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let x = Array2::from_shape_fn((7, 4), |(t, c)| ((t * 3 + c * 5) % 7) as f64 - 3.0);
        let w = Array2::from_shape_fn((4, 4), |(i, j)| ((i + 2 * j) % 5) as f64 * 0.3 - 0.5);
        let (out, weights) = mhsa(&x, w.view(), w.view(), w.view(), w.view(), 2, 2);
        assert_eq!(out.dim(), (7, 4));
        for a in weights {
            for row in a.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert_abs_diff_eq!(pe[[1, 0]], 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(pe[[2, 3]], (2.0 / 100.0f64).cos(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rmsnorm_unit_rms(xs in proptest::collection::vec(-100.0f64..100.0, 2..32)) {
            prop_assume!(xs.iter().any(|v| v.abs() > 1e-2));
            let n = xs.len();
            let y = rmsnorm(&Tensor::new(vec![n], xs).unwrap(), &Tensor::filled(vec![n], 1.0), RMSNORM_EPS).unwrap();
            let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            prop_assert!((rms - 1.0).abs() < 1e-5);
        }

        #[test]
        fn rmsnorm_preserves_argmax(xs in proptest::collection::vec(-10.0f64..10.0, 2..16), g in 0.01f64..10.0) {
            let n = xs.len();
            let y = rmsnorm(&Tensor::new(vec![n], xs.clone()).unwrap(), &Tensor::filled(vec![n], g), RMSNORM_EPS).unwrap();
            prop_assert_eq!(crate::math::argmax(&xs), crate::math::argmax(y.data()));
        }
    }
}
