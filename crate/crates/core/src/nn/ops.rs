//! Forward and analytic backward kernels for the layers of the network.
//!
//! Layouts: activations are `[N, C, H, W]` (images) or `[N, F]` (vectors);
//! dense weights are `[out, in]`, convolution weights `[out, in, k, k]`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `y = x · wᵀ + b`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(x, 2, "dense input")?;
    expect_rank(w, 2, "dense weight")?;
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    if w.shape()[1] != i {
        return Err(Error::ShapeMismatch(format!(
            "dense weight {:?} does not accept {i} inputs",
            w.shape()
        )));
    }
    let mut y = vec![0.0; n * o];
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "dense bias {:?} should be [{o}]",
                b.shape()
            )));
        }
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nt(n, i, o, x.data(), w.data(), &mut y);
    Tensor::new(vec![n, o], y)
}

/// Gradients `(dx, dw, db)` of a dense layer.
pub fn dense_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut gx = vec![0.0; n * i];
    gemm_nn(n, o, i, gy.data(), w.data(), &mut gx);
    let mut gw = vec![0.0; o * i];
    gemm_tn(o, n, i, gy.data(), x.data(), &mut gw);
    let mut gb = vec![0.0; o];
    for row in gy.data().chunks_exact(o) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    (
        Tensor::new(vec![n, i], gx).expect("shape"),
        Tensor::new(vec![o, i], gw).expect("shape"),
        Tensor::new(vec![o], gb).expect("shape"),
    )
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn of(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        expect_rank(x, 4, "conv input")?;
        expect_rank(w, 4, "conv weight")?;
        let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c || k != k2 || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {:?} (stride {stride}) incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{wd} smaller than kernel {k} with padding {padding}"
            )));
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            kernel: k,
            stride,
            padding,
            in_h: h,
            in_w: wd,
        })
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let src = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::of(x, w, stride, padding)?;
    if b.shape() != [g.out_channels] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias {:?} should be [{}]",
            b.shape(),
            g.out_channels
        )));
    }
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;
    let mut cols = vec![0.0; g.patch_len() * plane];
    let mut y = vec![0.0; n * out_len];
    for s in 0..n {
        im2col(&g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        for (o, chunk) in ys.chunks_exact_mut(plane).enumerate() {
            chunk.fill(b.data()[o]);
        }
        gemm_nn(g.out_channels, g.patch_len(), plane, w.data(), &cols, ys);
    }
    Tensor::new(vec![n, g.out_channels, oh, ow], y)
}

/// Gradients `(dx, dw, db)` of a convolution.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::of(x, w, stride, padding)?;
    let n = x.shape()[0];
    let plane = g.out_h() * g.out_w();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;
    if gy.len() != n * out_len {
        return Err(Error::ShapeMismatch(format!(
            "conv output gradient {:?} does not match geometry",
            gy.shape()
        )));
    }
    let pl = g.patch_len();
    let mut cols = vec![0.0; pl * plane];
    let mut gcols = vec![0.0; pl * plane];
    let mut gx = vec![0.0; n * in_len];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for s in 0..n {
        let gys = &gy.data()[s * out_len..(s + 1) * out_len];
        im2col(&g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        gemm_nt(g.out_channels, plane, pl, gys, &cols, &mut gw);
        gcols.fill(0.0);
        gemm_tn(pl, g.out_channels, plane, w.data(), gys, &mut gcols);
        col2im(&g, &gcols, &mut gx[s * in_len..(s + 1) * in_len]);
        for (o, chunk) in gys.chunks_exact(plane).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![g.out_channels], gb)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

/// Passes gradient where the input was strictly positive.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward from the sigmoid output `y`.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape")
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 4, "pool input")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], gy: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(gy.len() * plane);
    for &g in gy.data() {
        data.extend(std::iter::repeat(g / plane as f64).take(plane));
    }
    Tensor::new(input_shape.to_vec(), data).expect("shape")
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "logits")?;
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of `[N, K]` logits against class ids, and its
/// gradient `(softmax - onehot) / N`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank(logits, 2, "logits")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 || labels.len() != n || labels.iter().any(|&y| y >= k) {
        return Err(Error::ShapeMismatch(format!(
            "cross-entropy needs K >= 2 and {n} labels in [0, {k}), got {} labels",
            labels.len()
        )));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad.push((p - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// `(1/N) Σ_i ‖pred_i − target_i‖²` over rows, and its gradient.
pub fn squared_l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} and target {:?} must be equal rank-2 shapes",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.shape()[0] as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}
