//! Minimal dense f64 tensor arithmetic: the digital reference path.
//!
//! Row-major flat storage, no broadcasting beyond bias-add. All operations
//! here are pure and deterministic; the analog path degrades from this
//! reference, which makes zero-noise equivalence a sharp test.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("tensor contains non-finite entries"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the flat data under a new shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// 2-D element accessor (row-major).
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }
}

/// Exact IEEE double matrix product: a[m×k] · b[k×n] -> [m×n].
///
/// Accumulation per output element runs over k in ascending order, so the
/// result is bit-identical to the textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::shape("matmul expects 2-D tensors"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {}x{} vs {}x{}",
            m, k, k2, n
        )));
    }
    let mut out = vec![0.0; m * n];
    // ikj loop: same per-element addition order as ijk, better locality.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = inp + 2 * pad;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Unfold x[C×H×W] into the (C·kh·kw) × (H_out·W_out) patch matrix.
///
/// Column j holds the zero-padded receptive field of output position j;
/// this realizes the convolution-as-MVM view that tile mapping relies on.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::shape("im2col expects C×H×W input"));
    }
    if kh < 1 || kw < 1 || stride < 1 {
        return Err(Error::shape("im2col requires kh,kw,stride >= 1"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let h_out = conv_out_dim(h, kh, stride, pad)
        .ok_or_else(|| Error::shape("im2col: non-positive output height"))?;
    let w_out = conv_out_dim(w, kw, stride, pad)
        .ok_or_else(|| Error::shape("im2col: non-positive output width"))?;
    let rows = c * kh * kw;
    let cols = h_out * w_out;
    let mut out = vec![0.0; rows * cols];
    for ci in 0..c {
        let plane = &x.data[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        orow[oy * w_out + ox] = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a C×H×W grid.
pub fn col2im(
    cols: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let h_out = conv_out_dim(h, kh, stride, pad)
        .ok_or_else(|| Error::shape("col2im: non-positive output height"))?;
    let w_out = conv_out_dim(w, kw, stride, pad)
        .ok_or_else(|| Error::shape("col2im: non-positive output width"))?;
    let ncols = h_out * w_out;
    if cols.shape != [c * kh * kw, ncols] {
        return Err(Error::shape("col2im: column matrix shape mismatch"));
    }
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let crow = &cols.data[r * ncols..(r + 1) * ncols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += crow[oy * w_out + ox];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Standard cross-correlation forward: x[Cin×H×W] * w[Cout×Cin×kh×kw] + bias.
///
/// Implemented as im2col followed by matmul, so it is bit-identical to that
/// composition by construction.
pub fn conv2d_ref(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if w.shape.len() != 4 {
        return Err(Error::shape("conv2d_ref expects Cout×Cin×kh×kw weights"));
    }
    let (cout, cin, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if x.shape.len() != 3 || x.shape[0] != cin {
        return Err(Error::shape(format!(
            "conv2d_ref: input channels {:?} incompatible with weight Cin {}",
            x.shape, cin
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv2d_ref: bias length != Cout"));
        }
    }
    let cols = im2col(x, kh, kw, stride, pad)?;
    let h_out = conv_out_dim(x.shape[1], kh, stride, pad).unwrap();
    let w_out = conv_out_dim(x.shape[2], kw, stride, pad).unwrap();
    let wmat = Tensor::new(vec![cout, cin * kh * kw], w.data.clone())?;
    let mut y = matmul(&wmat, &cols)?;
    if let Some(b) = bias {
        let ncols = h_out * w_out;
        for co in 0..cout {
            for v in &mut y.data[co * ncols..(co + 1) * ncols] {
                *v += b[co];
            }
        }
    }
    y.reshape(vec![cout, h_out, w_out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Textbook i,j,k triple loop, the independent matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at2(i, kk) * b.at2(kk, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    /// Direct sliding-window convolution, independent of im2col.
    fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
        let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let h_out = conv_out_dim(h, kh, stride, pad).unwrap();
        let w_out = conv_out_dim(win, kw, stride, pad).unwrap();
        let mut out = vec![0.0; cout * h_out * w_out];
        for co in 0..cout {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + iy as usize) * win + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[(co * h_out + oy) * w_out + ox] = acc + bias.map_or(0.0, |b| b[co]);
                }
            }
        }
        Tensor::new(vec![cout, h_out, w_out], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn matmul_row_times_col() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![7, 5]);
            let b = rand_tensor(&mut rng, vec![5, 3]);
            assert_eq!(matmul(&a, &b).unwrap(), matmul_oracle(&a, &b));
        }
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn im2col_1x1_kernel_is_flatten() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, 1, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_padded_ones_column_sums() {
        // 3x3 ones, 3x3 kernel, pad 1: column j sums count in-bounds taps.
        let x = Tensor::filled(vec![1, 3, 3], 1.0);
        let cols = im2col(&x, 3, 3, 1, 1).unwrap();
        assert_eq!(cols.shape(), &[9, 9]);
        let sums: Vec<f64> = (0..9)
            .map(|j| (0..9).map(|r| cols.at2(r, j)).sum())
            .collect();
        assert_eq!(sums, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn im2col_nonpositive_output_dims() {
        let x = Tensor::zeros(vec![1, 2, 2]);
        assert!(im2col(&x, 5, 5, 1, 0).is_err());
    }

    #[test]
    fn conv_via_im2col_equals_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let k = *[1usize, 3, 5].get(case % 3).unwrap();
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..3);
            let h = rng.gen_range(k + 1..k + 8);
            let w = rng.gen_range(k + 1..k + 8);
            let x = rand_tensor(&mut rng, vec![cin, h, w]);
            let wt = rand_tensor(&mut rng, vec![cout, cin, k, k]);
            let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let got = conv2d_ref(&x, &wt, Some(&bias), stride, pad).unwrap();
            let want = conv_oracle(&x, &wt, Some(&bias), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "conv mismatch: {g} vs {w}");
            }
        }
    }

    #[test]
    fn conv_1x1_scalar_weight_doubles_input() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_ref(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn conv_zero_weights_all_bias() {
        let x = Tensor::filled(vec![2, 3, 3], 0.7);
        let w = Tensor::zeros(vec![2, 2, 3, 3]);
        let y = conv2d_ref(&x, &w, Some(&[1.5, -0.5]), 1, 1).unwrap();
        for v in &y.data()[..9] {
            assert_eq!(*v, 1.5);
        }
        for v in &y.data()[9..] {
            assert_eq!(*v, -0.5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![2, 5, 4]);
        let cols = im2col(&x, 3, 3, 1, 1).unwrap();
        let y = rand_tensor(&mut rng, cols.shape().to_vec());
        let back = col2im(&y, 2, 5, 4, 3, 3, 1, 1).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
