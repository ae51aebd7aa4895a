//! Forward and backward passes of the individual layer types.
//!
//! Convolution weights are laid out `[kh][kw][cin][cout]`, which makes the
//! im2col patch matrix of an `h x w x cin` tensor multiply straight into an
//! `h x w x cout` output.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output is `ceil(n / stride)` along each axis.
    Same,
    Valid,
}

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    /// Output size and leading pad along one axis of length `n`.
    fn axis(&self, n: usize) -> (usize, usize) {
        match self.padding {
            Padding::Same => {
                let out = n.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel).saturating_sub(n);
                (out, total / 2)
            }
            Padding::Valid => ((n.saturating_sub(self.kernel)) / self.stride + 1, 0),
        }
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (self.axis(h).0, self.axis(w).0)
    }

    fn check(&self, x: &Tensor, weights: &[f64], bias: &[f64]) -> Result<()> {
        if x.d != self.cin || weights.len() != self.weight_len() || bias.len() != self.cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input {:?}, {} weights, {} biases for {self:?}",
                    x.shape(),
                    weights.len(),
                    bias.len()
                ),
            });
        }
        if self.kernel == 0
            || self.stride == 0
            || (self.padding == Padding::Valid && (x.h < self.kernel || x.w < self.kernel))
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {} / stride {} on {:?}", self.kernel, self.stride, x.shape()),
            });
        }
        Ok(())
    }
}

/// Patch matrix `[out_h * out_w, k * k * cin]`.
fn im2col(x: &Tensor, g: &ConvGeom) -> (Vec<f64>, usize, usize) {
    let (oh, pt) = g.axis(x.h);
    let (ow, pl) = g.axis(x.w);
    let k = g.kernel;
    let row_len = k * k * x.d;
    let mut cols = vec![0.0; oh * ow * row_len];
    for orow in 0..oh {
        for ocol in 0..ow {
            let dst = &mut cols[(orow * ow + ocol) * row_len..][..row_len];
            for ki in 0..k {
                let r = (orow * g.stride + ki) as isize - pt as isize;
                if r < 0 || r >= x.h as isize {
                    continue;
                }
                for kj in 0..k {
                    let c = (ocol * g.stride + kj) as isize - pl as isize;
                    if c < 0 || c >= x.w as isize {
                        continue;
                    }
                    let src = x.idx(r as usize, c as usize, 0);
                    let off = (ki * k + kj) * x.d;
                    dst[off..off + x.d].copy_from_slice(&x.data[src..src + x.d]);
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], g: &ConvGeom, h: usize, w: usize) -> Tensor {
    let (oh, pt) = g.axis(h);
    let (ow, pl) = g.axis(w);
    let k = g.kernel;
    let d = g.cin;
    let row_len = k * k * d;
    let mut out = Tensor::zeros(h, w, d);
    for orow in 0..oh {
        for ocol in 0..ow {
            let src = &cols[(orow * ow + ocol) * row_len..][..row_len];
            for ki in 0..k {
                let r = (orow * g.stride + ki) as isize - pt as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let c = (ocol * g.stride + kj) as isize - pl as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let dst = out.idx(r as usize, c as usize, 0);
                    let off = (ki * k + kj) * d;
                    out.data[dst..dst + d]
                        .iter_mut()
                        .zip(&src[off..off + d])
                        .for_each(|(o, s)| *o += s);
                }
            }
        }
    }
    out
}

/// `C = A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // satisfies; all matrices are dense row-major slices sized accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn patches<'a>(x: &'a Tensor, g: &ConvGeom) -> (std::borrow::Cow<'a, [f64]>, usize, usize) {
    if g.kernel == 1 && g.stride == 1 {
        (std::borrow::Cow::Borrowed(&x.data), x.h, x.w)
    } else {
        let (cols, oh, ow) = im2col(x, g);
        (std::borrow::Cow::Owned(cols), oh, ow)
    }
}

/// Cross-correlation plus bias.
pub fn conv2d_forward(x: &Tensor, weights: &[f64], bias: &[f64], g: &ConvGeom) -> Result<Tensor> {
    g.check(x, weights, bias)?;
    let (cols, oh, ow) = patches(x, g);
    let kk = g.kernel * g.kernel * g.cin;
    let mut out = Tensor::zeros(oh, ow, g.cout);
    for px in out.data.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    gemm(
        oh * ow,
        kk,
        g.cout,
        &cols,
        (kk, 1),
        weights,
        (g.cout, 1),
        1.0,
        &mut out.data,
        (g.cout, 1),
    );
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, weights: &[f64], grad_out: &Tensor, g: &ConvGeom) -> Result<ConvGrads> {
    let zero_bias = vec![0.0; g.cout];
    g.check(x, weights, &zero_bias)?;
    let (oh, ow) = g.output_shape(x.h, x.w);
    if grad_out.shape() != (oh, ow, g.cout) {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            detail: format!("gradient {:?}, expected {:?}", grad_out.shape(), (oh, ow, g.cout)),
        });
    }
    let (cols, _, _) = patches(x, g);
    let kk = g.kernel * g.kernel * g.cin;
    let p = oh * ow;

    let mut grad_w = vec![0.0; kk * g.cout];
    // cols^T [kk x p] * grad_out [p x cout]
    gemm(
        kk,
        p,
        g.cout,
        &cols,
        (1, kk),
        &grad_out.data,
        (g.cout, 1),
        0.0,
        &mut grad_w,
        (g.cout, 1),
    );

    let mut grad_b = vec![0.0; g.cout];
    for px in grad_out.data.chunks_exact(g.cout) {
        grad_b.iter_mut().zip(px).for_each(|(b, v)| *b += v);
    }

    let mut grad_cols = vec![0.0; p * kk];
    // grad_out [p x cout] * W^T [cout x kk]
    gemm(
        p,
        g.cout,
        kk,
        &grad_out.data,
        (g.cout, 1),
        weights,
        (1, g.cout),
        0.0,
        &mut grad_cols,
        (kk, 1),
    );
    let input = if g.kernel == 1 && g.stride == 1 {
        Tensor {
            h: x.h,
            w: x.w,
            d: x.d,
            data: grad_cols,
        }
    } else {
        col2im(&grad_cols, g, x.h, x.w)
    };
    Ok(ConvGrads {
        input,
        weights: grad_w,
        bias: grad_b,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        h: x.h,
        w: x.w,
        d: x.d,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        h: x.h,
        w: x.w,
        d: x.d,
    }
}

/// Max pooling with `size x size` windows; `argmax` holds, per output value,
/// the flat input index that produced it (first occurrence on ties).
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool_forward(x: &Tensor, size: usize, stride: usize) -> Result<PoolOutput> {
    if size == 0
        || stride == 0
        || !x.h.is_multiple_of(stride)
        || !x.w.is_multiple_of(stride)
        || x.h < size
        || x.w < size
    {
        return Err(Error::ShapeMismatch {
            op: "maxpool",
            detail: format!("{:?} not divisible by stride {stride}", x.shape()),
        });
    }
    let oh = (x.h - size) / stride + 1;
    let ow = (x.w - size) / stride + 1;
    let mut output = Tensor::zeros(oh, ow, x.d);
    let mut argmax = vec![0; oh * ow * x.d];
    for r in 0..oh {
        for c in 0..ow {
            for ch in 0..x.d {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..size {
                    for j in 0..size {
                        let idx = x.idx(r * stride + i, c * stride + j, ch);
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = output.idx(r, c, ch);
                output.data[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok(PoolOutput { output, argmax })
}

pub fn maxpool_backward(grad_out: &Tensor, argmax: &[usize], input_shape: (usize, usize, usize)) -> Result<Tensor> {
    if argmax.len() != grad_out.data.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool backward",
            detail: format!("{} routes for {} gradients", argmax.len(), grad_out.data.len()),
        });
    }
    let (h, w, d) = input_shape;
    let mut grad = Tensor::zeros(h, w, d);
    for (&i, &g) in argmax.iter().zip(&grad_out.data) {
        grad.data[i] += g;
    }
    Ok(grad)
}

/// Transposed convolution with stride `factor` and kernel
/// `2 * factor - factor % 2`, cropped so the output is exactly `factor`
/// times the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeom {
    pub factor: usize,
    pub cin: usize,
    pub cout: usize,
}

impl UpGeom {
    pub fn kernel(&self) -> usize {
        2 * self.factor - self.factor % 2
    }

    pub fn pad(&self) -> usize {
        self.factor / 2
    }

    pub fn weight_len(&self) -> usize {
        self.kernel() * self.kernel() * self.cin * self.cout
    }

    fn check(&self, x: &Tensor, weights: &[f64], bias_len: usize) -> Result<()> {
        if self.factor == 0 || x.d != self.cin || weights.len() != self.weight_len() || bias_len != self.cout {
            return Err(Error::ShapeMismatch {
                op: "upconv",
                detail: format!("input {:?}, {} weights for {self:?}", x.shape(), weights.len()),
            });
        }
        Ok(())
    }

    /// Visits every (input pixel, kernel tap, output pixel) triple that
    /// lands inside the output.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (k, p, s) = (self.kernel(), self.pad() as isize, self.factor);
        let (oh, ow) = (h * s, w * s);
        for i in 0..h {
            for ki in 0..k {
                let or = (i * s + ki) as isize - p;
                if or < 0 || or >= oh as isize {
                    continue;
                }
                for j in 0..w {
                    for kj in 0..k {
                        let oc = (j * s + kj) as isize - p;
                        if oc < 0 || oc >= ow as isize {
                            continue;
                        }
                        f(i, j, ki, kj, or as usize, oc as usize);
                    }
                }
            }
        }
    }
}

/// Separable bilinear interpolation kernel for an upsampling factor.
pub fn bilinear_kernel(factor: usize) -> Vec<f64> {
    let k = 2 * factor - factor % 2;
    let f = factor as f64;
    let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
    let axis: Vec<f64> = (0..k).map(|i| 1.0 - (i as f64 - center).abs() / f).collect();
    let mut out = Vec::with_capacity(k * k);
    for a in &axis {
        for b in &axis {
            out.push(a * b);
        }
    }
    out
}

/// Bilinear weights mapping each input channel to the same output channel.
pub fn bilinear_weights(g: &UpGeom) -> Vec<f64> {
    let kernel = bilinear_kernel(g.factor);
    let mut w = vec![0.0; g.weight_len()];
    for (tap, &kv) in kernel.iter().enumerate() {
        for c in 0..g.cin.min(g.cout) {
            w[(tap * g.cin + c) * g.cout + c] = kv;
        }
    }
    w
}

pub fn upconv_forward(x: &Tensor, weights: &[f64], bias: &[f64], g: &UpGeom) -> Result<Tensor> {
    g.check(x, weights, bias.len())?;
    let k = g.kernel();
    let mut out = Tensor::zeros(x.h * g.factor, x.w * g.factor, g.cout);
    for px in out.data.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    g.for_each_tap(x.h, x.w, |i, j, ki, kj, or, oc| {
        let xi = x.idx(i, j, 0);
        let oi = out.idx(or, oc, 0);
        let wbase = (ki * k + kj) * g.cin * g.cout;
        for ci in 0..g.cin {
            let v = x.data[xi + ci];
            let wrow = &weights[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
            for (o, &wv) in out.data[oi..oi + g.cout].iter_mut().zip(wrow) {
                *o += v * wv;
            }
        }
    });
    Ok(out)
}

pub fn upconv_backward(x: &Tensor, weights: &[f64], grad_out: &Tensor, g: &UpGeom) -> Result<ConvGrads> {
    g.check(x, weights, g.cout)?;
    if grad_out.shape() != (x.h * g.factor, x.w * g.factor, g.cout) {
        return Err(Error::ShapeMismatch {
            op: "upconv backward",
            detail: format!("gradient {:?} for input {:?}", grad_out.shape(), x.shape()),
        });
    }
    let k = g.kernel();
    let mut gx = Tensor::zeros(x.h, x.w, x.d);
    let mut gw = vec![0.0; g.weight_len()];
    let mut gb = vec![0.0; g.cout];
    for px in grad_out.data.chunks_exact(g.cout) {
        gb.iter_mut().zip(px).for_each(|(b, v)| *b += v);
    }
    g.for_each_tap(x.h, x.w, |i, j, ki, kj, or, oc| {
        let xi = x.idx(i, j, 0);
        let go = &grad_out.data[grad_out.idx(or, oc, 0)..][..g.cout];
        let wbase = (ki * k + kj) * g.cin * g.cout;
        for ci in 0..g.cin {
            let wrow = wbase + ci * g.cout;
            let mut acc = 0.0;
            for co in 0..g.cout {
                acc += go[co] * weights[wrow + co];
                gw[wrow + co] += x.data[xi + ci] * go[co];
            }
            gx.data[xi + ci] += acc;
        }
    });
    Ok(ConvGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} + {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Per-pixel softmax over channels.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for px in out.data.chunks_exact_mut(logits.d) {
        let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        px.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Class-weighted cross-entropy of 2-channel logits against a binary mask,
/// averaged over pixels, with its exact gradient.
pub fn weighted_cross_entropy(logits: &Tensor, target: &BinaryMask, class_weights: [f64; 2]) -> Result<(f64, Tensor)> {
    if logits.d != 2 || (logits.h, logits.w) != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            detail: format!("logits {:?} vs target {:?}", logits.shape(), target.dims()),
        });
    }
    if class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::param("classWeights", "must be positive"));
    }
    let n = (logits.h * logits.w) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (px, &t) in grad.data.chunks_exact_mut(2).zip(target.data()) {
        let t = t as usize;
        let m = px[0].max(px[1]);
        let e0 = (px[0] - m).exp();
        let e1 = (px[1] - m).exp();
        let lse = m + (e0 + e1).ln();
        let wt = class_weights[t];
        loss += wt * (lse - px[t]);
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for c in 0..2 {
            px[c] = wt * (p[c] - if c == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Tensor {
        Tensor::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop cross-correlation with same padding and stride 1.
    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], k: usize, cout: usize) -> Tensor {
        let p = (k - 1) / 2;
        let mut out = Tensor::zeros(x.h, x.w, cout);
        for r in 0..x.h {
            for c in 0..x.w {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ki in 0..k {
                        for kj in 0..k {
                            let (rr, cc) = (
                                r as isize + ki as isize - p as isize,
                                c as isize + kj as isize - p as isize,
                            );
                            if rr < 0 || cc < 0 || rr >= x.h as isize || cc >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.d {
                                acc += x.at(rr as usize, cc as usize, ci) * w[((ki * k + kj) * x.d + ci) * cout + co];
                            }
                        }
                    }
                    *out.at_mut(r, c, co) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 5, 4, 3);
        let g = ConvGeom {
            kernel: 1,
            stride: 1,
            cin: 3,
            cout: 3,
            padding: Padding::Same,
        };
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &w, &[0.0; 3], &g).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::new(5, 5, 1, vec![1.0; 25]).unwrap();
        let g = ConvGeom {
            kernel: 3,
            stride: 1,
            cin: 1,
            cout: 1,
            padding: Padding::Same,
        };
        let y = conv2d_forward(&x, &[1.0; 9], &[0.0], &g).unwrap();
        assert_eq!(y.at(2, 2, 0), 9.0);
        assert_eq!(y.at(0, 0, 0), 4.0);
        assert_eq!(y.at(4, 4, 0), 4.0);
        assert_eq!(y.at(0, 2, 0), 6.0);
        assert_eq!(y.at(3, 4, 0), 6.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, cin, cout) in [(3, 2, 4), (1, 3, 2), (5, 1, 3)] {
            let x = random_tensor(&mut rng, 7, 6, cin);
            let w: Vec<f64> = (0..k * k * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = ConvGeom {
                kernel: k,
                stride: 1,
                cin,
                cout,
                padding: Padding::Same,
            };
            let fast = conv2d_forward(&x, &w, &b, &g).unwrap();
            let slow = naive_conv(&x, &w, &b, k, cout);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_same_padding_shape() {
        let g = ConvGeom {
            kernel: 3,
            stride: 2,
            cin: 1,
            cout: 1,
            padding: Padding::Same,
        };
        assert_eq!(g.output_shape(7, 8), (4, 4));
        let x = Tensor::zeros(7, 8, 1);
        assert_eq!(conv2d_forward(&x, &[0.0; 9], &[0.0], &g).unwrap().shape(), (4, 4, 1));
        let bad = Tensor::zeros(7, 8, 2);
        assert!(conv2d_forward(&bad, &[0.0; 9], &[0.0], &g).is_err());
    }

    #[test]
    fn conv_backward_zero_and_single_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 5, 5, 2);
        let g = ConvGeom {
            kernel: 3,
            stride: 1,
            cin: 2,
            cout: 1,
            padding: Padding::Same,
        };
        let w: Vec<f64> = (0..18).map(|_| rng.random::<f64>()).collect();
        let zero = conv2d_backward(&x, &w, &Tensor::zeros(5, 5, 1), &g).unwrap();
        assert!(zero
            .input
            .data
            .iter()
            .chain(&zero.weights)
            .chain(&zero.bias)
            .all(|&v| v == 0.0));

        let mut go = Tensor::zeros(5, 5, 1);
        *go.at_mut(2, 3, 0) = 1.0;
        let gr = conv2d_backward(&x, &w, &go, &g).unwrap();
        for ki in 0..3 {
            for kj in 0..3 {
                for ci in 0..2 {
                    let expected = x.at(2 + ki - 1, 3 + kj - 1, ci);
                    assert_eq!(gr.weights[(ki * 3 + kj) * 2 + ci], expected);
                }
            }
        }
        assert_eq!(gr.bias, vec![1.0]);
    }

    #[test]
    fn maxpool_ramp_and_ties() {
        let x = Tensor::new(4, 4, 1, (1..=16).map(f64::from).collect()).unwrap();
        let p = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(p.output.data, vec![6.0, 8.0, 14.0, 16.0]);

        let c = Tensor::new(4, 4, 1, vec![3.0; 16]).unwrap();
        let p = maxpool_forward(&c, 2, 2).unwrap();
        assert_eq!(p.output.data, vec![3.0; 4]);
        let g = maxpool_backward(&Tensor::new(2, 2, 1, vec![1.0; 4]).unwrap(), &p.argmax, (4, 4, 1)).unwrap();
        // each window's first cell receives the gradient
        for r in 0..4 {
            for col in 0..4 {
                let expected = if r % 2 == 0 && col % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.at(r, col, 0), expected);
            }
        }
        assert!(maxpool_forward(&Tensor::zeros(5, 4, 1), 2, 2).is_err());
    }

    #[test]
    fn bilinear_upconv_of_constant() {
        let g = UpGeom {
            factor: 2,
            cin: 2,
            cout: 2,
        };
        let x = Tensor::new(6, 6, 2, vec![0.8; 72]).unwrap();
        let y = upconv_forward(&x, &bilinear_weights(&g), &[0.0; 2], &g).unwrap();
        assert_eq!(y.shape(), (12, 12, 2));
        for r in 0..12 {
            for c in 0..12 {
                for ch in 0..2 {
                    let v = y.at(r, c, ch);
                    if (1..11).contains(&r) && (1..11).contains(&c) {
                        assert!((v - 0.8).abs() < 1e-15);
                    } else {
                        assert!(v > 0.0 && v <= 0.8 + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn upconv_spike_stamps_the_kernel() {
        for factor in [2, 3, 8] {
            let g = UpGeom {
                factor,
                cin: 1,
                cout: 1,
            };
            let (h, w) = (5, 5);
            let mut x = Tensor::zeros(h, w, 1);
            *x.at_mut(2, 2, 0) = 1.0;
            let y = upconv_forward(&x, &bilinear_weights(&g), &[0.0], &g).unwrap();
            let kernel = bilinear_kernel(factor);
            let k = g.kernel();
            let origin = (2 * factor) as isize - g.pad() as isize;
            for r in 0..h * factor {
                for c in 0..w * factor {
                    let (kr, kc) = (r as isize - origin, c as isize - origin);
                    let expected = if (0..k as isize).contains(&kr) && (0..k as isize).contains(&kc) {
                        kernel[kr as usize * k + kc as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(y.at(r, c, 0), expected, "factor {factor} at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn softmax_and_loss_analytic_values() {
        let logits = Tensor::zeros(3, 3, 2);
        let p = softmax(&logits);
        assert!(p.data.iter().all(|&v| v == 0.5));
        let t = BinaryMask::from_fn(3, 3, |r, _| r == 1);
        let (l, _) = weighted_cross_entropy(&logits, &t, [1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let confident = Tensor::new(1, 2, 2, vec![40.0, -40.0, -40.0, 40.0]).unwrap();
        let t = BinaryMask::new(1, 2, vec![0, 1]).unwrap();
        let (l, _) = weighted_cross_entropy(&confident, &t, [1.0, 1.0]).unwrap();
        assert!(l < 1e-30);

        assert!(weighted_cross_entropy(&logits, &BinaryMask::zeros(2, 3), [1.0, 1.0]).is_err());
        assert!(weighted_cross_entropy(&logits, &BinaryMask::zeros(3, 3), [0.0, 1.0]).is_err());
    }
}
