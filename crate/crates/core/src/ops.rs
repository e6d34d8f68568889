//! Primitive tensor operations: forward kernels and their vector-Jacobian
//! products.
//!
//! The primitive set covers what tiny convolutional supernets need: matmul,
//! conv2d (cross-correlation with zero padding), relu, average pooling
//! (in-bounds divisor, i.e. padding does not count), global average pooling,
//! elementwise add/mul, constant and tensor-scalar scaling, row/element
//! selection, softmax over the last axis, cross-entropy-with-logits, mean
//! squared error, sum, bias add and channel concatenation. All numerics are
//! 64-bit and accumulation order is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A primitive operation with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Input `[n,ci,h,w]`, kernel `[co,ci,kh,kw]`; zero padding, cross-correlation.
    Conv2d { stride: usize, pad: usize },
    Relu,
    /// Square window; the divisor counts only in-bounds taps.
    AvgPool2d { kernel: usize, stride: usize, pad: usize },
    /// `[n,c,h,w] -> [n,c]`
    GlobalAvgPool,
    Add,
    Mul,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Multiply input 0 by the scalar tensor in input 1.
    ScaleByScalar,
    /// Extract row `index` of a `[rows,cols]` matrix as `[cols]`.
    Row { index: usize },
    /// Extract element `index` of a rank-1 vector as a scalar.
    Select { index: usize },
    /// `[n,k] + [k]`, broadcast over rows.
    AddBias,
    /// `[n,c,h,w] + [c]`, broadcast over batch and space.
    AddChanBias,
    /// Softmax over the last axis.
    Softmax,
    /// Inputs: logits `[n,k]`, one-hot targets `[n,k]`. Mean over the batch.
    CrossEntropyLogits,
    /// Mean squared error over all elements of two equally-shaped tensors.
    Mse,
    /// Sum of all elements, as a scalar.
    Sum,
    /// Concatenate along `axis`; all other dimensions must agree.
    Concat { axis: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::AvgPool2d { .. } => "avgpool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ScaleByScalar => "scale_by_scalar",
            Primitive::Row { .. } => "row",
            Primitive::Select { .. } => "select",
            Primitive::AddBias => "add_bias",
            Primitive::AddChanBias => "add_chan_bias",
            Primitive::Softmax => "softmax",
            Primitive::CrossEntropyLogits => "cross_entropy_logits",
            Primitive::Mse => "mse",
            Primitive::Sum => "sum",
            Primitive::Concat { .. } => "concat",
        }
    }
}

fn shape_err(primitive: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        primitive,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn arity(prim: &Primitive, inputs: &[&Tensor], expected: usize) -> Result<()> {
    if inputs.len() != expected {
        return Err(Error::InvalidAttr {
            primitive: prim.name(),
            message: format!("expected {expected} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

/// Evaluate a primitive on concrete inputs.
pub fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    match prim {
        Primitive::MatMul => {
            arity(prim, inputs, 2)?;
            matmul(inputs[0], inputs[1])
        }
        Primitive::Conv2d { stride, pad } => {
            arity(prim, inputs, 2)?;
            conv2d(inputs[0], inputs[1], *stride, *pad)
        }
        Primitive::Relu => {
            arity(prim, inputs, 1)?;
            Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }))
        }
        Primitive::AvgPool2d {
            kernel,
            stride,
            pad,
        } => {
            arity(prim, inputs, 1)?;
            avg_pool(inputs[0], *kernel, *stride, *pad)
        }
        Primitive::GlobalAvgPool => {
            arity(prim, inputs, 1)?;
            global_avg_pool(inputs[0])
        }
        Primitive::Add => {
            arity(prim, inputs, 2)?;
            zip_same_shape(prim, inputs[0], inputs[1], |a, b| a + b)
        }
        Primitive::Mul => {
            arity(prim, inputs, 2)?;
            zip_same_shape(prim, inputs[0], inputs[1], |a, b| a * b)
        }
        Primitive::Scale(c) => {
            arity(prim, inputs, 1)?;
            Ok(inputs[0].map(|v| c * v))
        }
        Primitive::ScaleByScalar => {
            arity(prim, inputs, 2)?;
            let s = inputs[1]
                .item()
                .map_err(|_| shape_err("scale_by_scalar", inputs[0].shape(), inputs[1].shape()))?;
            Ok(inputs[0].map(|v| s * v))
        }
        Primitive::Row { index } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let [rows, cols] = dims2("row", x)?;
            if *index >= rows {
                return Err(Error::InvalidAttr {
                    primitive: "row",
                    message: format!("row {index} out of {rows}"),
                });
            }
            Tensor::from_vec(
                vec![cols],
                x.data()[index * cols..(index + 1) * cols].to_vec(),
            )
        }
        Primitive::Select { index } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() != 1 {
                return Err(shape_err("select", x.shape(), &[]));
            }
            if *index >= x.numel() {
                return Err(Error::InvalidAttr {
                    primitive: "select",
                    message: format!("index {index} out of {}", x.numel()),
                });
            }
            Ok(Tensor::scalar(x.data()[*index]))
        }
        Primitive::AddBias => {
            arity(prim, inputs, 2)?;
            add_bias(inputs[0], inputs[1])
        }
        Primitive::AddChanBias => {
            arity(prim, inputs, 2)?;
            add_chan_bias(inputs[0], inputs[1])
        }
        Primitive::Softmax => {
            arity(prim, inputs, 1)?;
            softmax(inputs[0])
        }
        Primitive::CrossEntropyLogits => {
            arity(prim, inputs, 2)?;
            cross_entropy(inputs[0], inputs[1])
        }
        Primitive::Mse => {
            arity(prim, inputs, 2)?;
            if inputs[0].shape() != inputs[1].shape() {
                return Err(shape_err("mse", inputs[0].shape(), inputs[1].shape()));
            }
            let n = inputs[0].numel() as f64;
            let mut acc = 0.0;
            for (a, b) in inputs[0].data().iter().zip(inputs[1].data()) {
                let d = a - b;
                acc += d * d;
            }
            Ok(Tensor::scalar(acc / n))
        }
        Primitive::Sum => {
            arity(prim, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Primitive::Concat { axis } => concat(inputs, *axis),
    }
}

/// Vector-Jacobian products: gradient with respect to each input.
///
/// `needs[i]` marks which input gradients the caller will consume; the rest
/// come back as `None` without being computed.
pub fn backward(
    prim: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    grad_out: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match prim {
        Primitive::MatMul => {
            let a = inputs[0];
            let b = inputs[1];
            let [m, k] = dims2("matmul", a)?;
            let [_, n] = dims2("matmul", b)?;
            if needs[0] {
                // dA = dY . B^T
                let mut da = Tensor::zeros(a.shape());
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += grad_out.data()[i * n + c] * b.data()[j * n + c];
                        }
                        da.data_mut()[i * k + j] = acc;
                    }
                }
                grads[0] = Some(da);
            }
            if needs[1] {
                // dB = A^T . dY
                let mut db = Tensor::zeros(b.shape());
                for i in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += a.data()[r * k + i] * grad_out.data()[r * n + j];
                        }
                        db.data_mut()[i * n + j] = acc;
                    }
                }
                grads[1] = Some(db);
            }
        }
        Primitive::Conv2d { stride, pad } => {
            let (dx, dw) = conv2d_backward(inputs[0], inputs[1], grad_out, *stride, *pad, needs);
            grads[0] = dx;
            grads[1] = dw;
        }
        Primitive::Relu => {
            if needs[0] {
                let x = inputs[0];
                let mut dx = Tensor::zeros(x.shape());
                for (i, (&xv, &g)) in x.data().iter().zip(grad_out.data()).enumerate() {
                    dx.data_mut()[i] = if xv > 0.0 { g } else { 0.0 };
                }
                grads[0] = Some(dx);
            }
        }
        Primitive::AvgPool2d {
            kernel,
            stride,
            pad,
        } => {
            if needs[0] {
                grads[0] = Some(avg_pool_backward(inputs[0], grad_out, *kernel, *stride, *pad));
            }
        }
        Primitive::GlobalAvgPool => {
            if needs[0] {
                let x = inputs[0];
                let (n, c, h, w) = dims4("global_avg_pool", x)?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Tensor::zeros(x.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let g = grad_out.data()[ni * c + ci] * inv;
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            dx.data_mut()[base + p] = g;
                        }
                    }
                }
                grads[0] = Some(dx);
            }
        }
        Primitive::Add => {
            if needs[0] {
                grads[0] = Some(grad_out.clone());
            }
            if needs[1] {
                grads[1] = Some(grad_out.clone());
            }
        }
        Primitive::Mul => {
            if needs[0] {
                grads[0] = Some(zip_same_shape(prim, grad_out, inputs[1], |g, b| g * b)?);
            }
            if needs[1] {
                grads[1] = Some(zip_same_shape(prim, grad_out, inputs[0], |g, a| g * a)?);
            }
        }
        Primitive::Scale(cst) => {
            if needs[0] {
                grads[0] = Some(grad_out.map(|g| cst * g));
            }
        }
        Primitive::ScaleByScalar => {
            let s = inputs[1].item()?;
            if needs[0] {
                grads[0] = Some(grad_out.map(|g| s * g));
            }
            if needs[1] {
                let mut acc = 0.0;
                for (g, x) in grad_out.data().iter().zip(inputs[0].data()) {
                    acc += g * x;
                }
                grads[1] = Some(Tensor::scalar(acc));
            }
        }
        Primitive::Row { index } => {
            if needs[0] {
                let x = inputs[0];
                let [_, cols] = dims2("row", x)?;
                let mut dx = Tensor::zeros(x.shape());
                dx.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(grad_out.data());
                grads[0] = Some(dx);
            }
        }
        Primitive::Select { index } => {
            if needs[0] {
                let mut dx = Tensor::zeros(inputs[0].shape());
                dx.data_mut()[*index] = grad_out.data()[0];
                grads[0] = Some(dx);
            }
        }
        Primitive::AddBias => {
            let [n, k] = dims2("add_bias", inputs[0])?;
            if needs[0] {
                grads[0] = Some(grad_out.clone());
            }
            if needs[1] {
                let mut db = Tensor::zeros(&[k]);
                for r in 0..n {
                    for c in 0..k {
                        db.data_mut()[c] += grad_out.data()[r * k + c];
                    }
                }
                grads[1] = Some(db);
            }
        }
        Primitive::AddChanBias => {
            let (n, c, h, w) = dims4("add_chan_bias", inputs[0])?;
            if needs[0] {
                grads[0] = Some(grad_out.clone());
            }
            if needs[1] {
                let mut db = Tensor::zeros(&[c]);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            db.data_mut()[ci] += grad_out.data()[base + p];
                        }
                    }
                }
                grads[1] = Some(db);
            }
        }
        Primitive::Softmax => {
            if needs[0] {
                // dx_i = y_i * (g_i - sum_j g_j y_j), per row
                let y = output;
                let cols = *y.shape().last().unwrap();
                let rows = y.numel() / cols;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += grad_out.data()[base + c] * y.data()[base + c];
                    }
                    for c in 0..cols {
                        dx.data_mut()[base + c] =
                            y.data()[base + c] * (grad_out.data()[base + c] - dot);
                    }
                }
                grads[0] = Some(dx);
            }
        }
        Primitive::CrossEntropyLogits => {
            let logits = inputs[0];
            let targets = inputs[1];
            let [n, k] = dims2("cross_entropy_logits", logits)?;
            let g = grad_out.data()[0] / n as f64;
            if needs[0] {
                let probs = softmax(logits)?;
                let mut dl = Tensor::zeros(logits.shape());
                for i in 0..n * k {
                    dl.data_mut()[i] = (probs.data()[i] - targets.data()[i]) * g;
                }
                grads[0] = Some(dl);
            }
            if needs[1] {
                let lsm = log_softmax(logits);
                let mut dt = Tensor::zeros(targets.shape());
                for i in 0..n * k {
                    dt.data_mut()[i] = -lsm[i] * g;
                }
                grads[1] = Some(dt);
            }
        }
        Primitive::Mse => {
            let scale = 2.0 * grad_out.data()[0] / inputs[0].numel() as f64;
            if needs[0] || needs[1] {
                let mut da = Tensor::zeros(inputs[0].shape());
                for (i, (a, b)) in inputs[0].data().iter().zip(inputs[1].data()).enumerate() {
                    da.data_mut()[i] = scale * (a - b);
                }
                if needs[1] {
                    grads[1] = Some(da.map(|v| -v));
                }
                if needs[0] {
                    grads[0] = Some(da);
                }
            }
        }
        Primitive::Sum => {
            if needs[0] {
                grads[0] = Some(Tensor::filled(inputs[0].shape(), grad_out.data()[0]));
            }
        }
        Primitive::Concat { axis } => {
            let mut offset = 0;
            let out_shape = output.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let out_axis = out_shape[*axis];
            for (i, x) in inputs.iter().enumerate() {
                let len = x.shape()[*axis];
                if needs[i] {
                    let mut dx = Tensor::zeros(x.shape());
                    for o in 0..outer {
                        for a in 0..len {
                            let src = (o * out_axis + offset + a) * inner;
                            let dst = (o * len + a) * inner;
                            dx.data_mut()[dst..dst + inner]
                                .copy_from_slice(&grad_out.data()[src..src + inner]);
                        }
                    }
                    grads[i] = Some(dx);
                }
                offset += len;
            }
        }
    }
    Ok(grads)
}

fn dims2(primitive: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(shape_err(primitive, s, &[0, 0])),
    }
}

fn dims4(primitive: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(shape_err(primitive, s, &[0, 0, 0, 0])),
    }
}

fn zip_same_shape(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(prim.name(), a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2("matmul", a)?;
    let [k2, n] = dims2("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..k {
            let av = a.data()[i * k + j];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out.data_mut()[i * n + c] += av * b.data()[j * n + c];
            }
        }
    }
    Ok(out)
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride < 1 {
        return Err(Error::InvalidAttr {
            primitive: "conv2d",
            message: "stride must be >= 1".into(),
        });
    }
    let (n, ci, h, wd) = dims4("conv2d", x)?;
    let (co, ci2, kh, kw) = dims4("conv2d", w)?;
    if ci != ci2 {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    }
    let (ho, wo) = match (
        conv_out_dim(h, kh, stride, pad),
        conv_out_dim(wd, kw, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("conv2d", x.shape(), w.shape())),
    };
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for c_out in 0..co {
            for c_in in 0..ci {
                let wbase = (c_out * ci + c_in) * kh * kw;
                let xbase = (ni * ci + c_in) * h * wd;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[xbase + iy as usize * wd + ix as usize]
                                    * wdat[wbase + ky * kw + kx];
                            }
                        }
                        od[((ni * co + c_out) * ho + oy) * wo + ox] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let [ho, wo] = [grad_out.shape()[2], grad_out.shape()[3]];
    let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
    let xd = x.data();
    let wdat = w.data();
    let gd = grad_out.data();
    for ni in 0..n {
        for c_out in 0..co {
            for c_in in 0..ci {
                let wbase = (c_out * ci + c_in) * kh * kw;
                let xbase = (ni * ci + c_in) * h * wd;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gd[((ni * co + c_out) * ho + oy) * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * wd + ix as usize;
                                let wi = wbase + ky * kw + kx;
                                if let Some(dx) = dx.as_mut() {
                                    dx.data_mut()[xi] += g * wdat[wi];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw.data_mut()[wi] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn avg_pool(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if kernel < 1 || stride < 1 {
        return Err(Error::InvalidAttr {
            primitive: "avgpool2d",
            message: "kernel and stride must be >= 1".into(),
        });
    }
    let (n, c, h, w) = dims4("avgpool2d", x)?;
    let (ho, wo) = match (
        conv_out_dim(h, kernel, stride, pad),
        conv_out_dim(w, kernel, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("avgpool2d", x.shape(), &[kernel, kernel])),
    };
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[base + iy as usize * w + ix as usize];
                            count += 1;
                        }
                    }
                    out.data_mut()[((ni * c + ci) * ho + oy) * wo + ox] = acc / count as f64;
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool_backward(
    x: &Tensor,
    grad_out: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ho, wo] = [grad_out.shape()[2], grad_out.shape()[3]];
    let mut dx = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut taps = Vec::with_capacity(kernel * kernel);
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            taps.push(base + iy as usize * w + ix as usize);
                        }
                    }
                    let g = grad_out.data()[((ni * c + ci) * ho + oy) * wo + ox]
                        / taps.len() as f64;
                    for t in taps {
                        dx.data_mut()[t] += g;
                    }
                }
            }
        }
    }
    dx
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4("global_avg_pool", x)?;
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut acc = 0.0;
            for p in 0..h * w {
                acc += x.data()[base + p];
            }
            out.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    Ok(out)
}

fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, k] = dims2("add_bias", x)?;
    if b.shape() != [k] {
        return Err(shape_err("add_bias", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for r in 0..n {
        for c in 0..k {
            out.data_mut()[r * k + c] += b.data()[c];
        }
    }
    Ok(out)
}

fn add_chan_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4("add_chan_bias", x)?;
    if b.shape() != [c] {
        return Err(shape_err("add_chan_bias", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let bias = b.data()[ci];
            for p in 0..h * w {
                out.data_mut()[base + p] += bias;
            }
        }
    }
    Ok(out)
}

fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.shape().is_empty() {
        return Err(shape_err("softmax", x.shape(), &[1]));
    }
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let base = r * cols;
        let row = &x.data()[base..base + cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out.data_mut()[base + c] = e;
            denom += e;
        }
        for c in 0..cols {
            out.data_mut()[base + c] /= denom;
        }
    }
    Ok(out)
}

fn log_softmax(x: &Tensor) -> Vec<f64> {
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let base = r * cols;
        let row = &x.data()[base..base + cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for c in 0..cols {
            out[base + c] = row[c] - lse;
        }
    }
    out
}

fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let [n, k] = dims2("cross_entropy_logits", logits)?;
    if targets.shape() != [n, k] {
        return Err(shape_err(
            "cross_entropy_logits",
            logits.shape(),
            targets.shape(),
        ));
    }
    let lsm = log_softmax(logits);
    let mut acc = 0.0;
    for i in 0..n * k {
        acc -= targets.data()[i] * lsm[i];
    }
    Ok(Tensor::scalar(acc / n as f64))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::InvalidAttr {
            primitive: "concat",
            message: "no inputs".into(),
        });
    }
    let rank = inputs[0].shape().len();
    if axis >= rank {
        return Err(Error::InvalidAttr {
            primitive: "concat",
            message: format!("axis {axis} out of rank {rank}"),
        });
    }
    let mut axis_total = 0;
    for x in inputs {
        if x.shape().len() != rank {
            return Err(shape_err("concat", inputs[0].shape(), x.shape()));
        }
        for (d, (&a, &b)) in inputs[0].shape().iter().zip(x.shape()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err("concat", inputs[0].shape(), x.shape()));
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut out_shape = inputs[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let mut offset = 0;
    for x in inputs {
        let len = x.shape()[axis];
        for o in 0..outer {
            for a in 0..len {
                let src = (o * len + a) * inner;
                let dst = (o * axis_total + offset + a) * inner;
                out.data_mut()[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
            }
        }
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let a = Tensor::from_vec(vec![3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect())
            .unwrap();
        let out = forward(&Primitive::MatMul, &[&Tensor::eye(3), &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = forward(&Primitive::MatMul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        for c in [-3.0, 0.0, 7.5] {
            let out = forward(&Primitive::Softmax, &[&Tensor::filled(&[3], c)]).unwrap();
            for v in out.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        // Centered 3x3 delta kernel reproduces the input under pad=1.
        let x = Tensor::from_vec(vec![1, 1, 4, 4], (0..16).map(|v| v as f64 - 7.0).collect())
            .unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = forward(&Primitive::Conv2d { stride: 1, pad: 1 }, &[&x, &k]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv2d_strided_shape() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let k = Tensor::zeros(&[5, 3, 3, 3]);
        let out = forward(&Primitive::Conv2d { stride: 2, pad: 1 }, &[&x, &k]).unwrap();
        assert_eq!(out.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn avg_pool_excludes_padding_from_divisor() {
        // 2x2 input, 3x3 kernel, pad 1: every window sees all four values.
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = forward(
            &Primitive::AvgPool2d {
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            &[&x],
        )
        .unwrap();
        for v in out.data() {
            assert!((v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let mut t = Tensor::zeros(&[2, 4]);
        t.data_mut()[0] = 1.0;
        t.data_mut()[7] = 1.0;
        let loss = forward(&Primitive::CrossEntropyLogits, &[&logits, &t]).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let b = Tensor::filled(&[1, 1, 2, 2], 2.0);
        let out = forward(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[8], 2.0);
    }
}
