//! Numeric kernels behind the graph ops.
//!
//! Each kernel comes as a forward function plus the vector-Jacobian products
//! the graph needs. Kernels are pure: inputs are never mutated, and the
//! summation order inside each kernel is fixed so repeated runs are
//! bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// y = max(0, x). Subgradient at 0 is 0.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_vjp(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// dy * y * (1 - y), where `y` is the sigmoid output.
pub fn sigmoid_vjp(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.dims().to_vec(), data).unwrap()
}

/// Lane decomposition of `dims` along `axis`: (outer, len, inner).
fn lanes(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
    }
    let (outer, len, inner) = lanes(x.dims(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for c in 0..len {
                max = max.max(src[base + c * inner]);
            }
            let mut sum = 0.0;
            for c in 0..len {
                let e = (src[base + c * inner] - max).exp();
                out[base + c * inner] = e;
                sum += e;
            }
            for c in 0..len {
                out[base + c * inner] /= sum;
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// dx = y * (dy - <dy, y>) per lane, where `y` is the softmax output.
pub fn softmax_vjp(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = lanes(y.dims(), axis);
    let yv = y.data();
    let gv = dy.data();
    let mut out = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for c in 0..len {
                let k = base + c * inner;
                dot += gv[k] * yv[k];
            }
            for c in 0..len {
                let k = base + c * inner;
                out[k] = yv[k] * (gv[k] - dot);
            }
        }
    }
    Tensor::new(y.dims().to_vec(), out).unwrap()
}

/// log(sum(exp)) per lane along `axis`, max-shifted.
pub fn log_sum_exp(x: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(x.dims(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for c in 0..len {
                max = max.max(src[base + c * inner]);
            }
            let mut sum = 0.0;
            for c in 0..len {
                sum += (src[base + c * inner] - max).exp();
            }
            out[o * inner + i] = max + sum.ln();
        }
    }
    out
}

/// Conv output extent, or an error when the formula does not come out integral.
fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize, axis: &'static str) -> Result<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::shape("conv2d", axis, format!("kernel <= {span}"), kernel));
    }
    let steps = span - kernel;
    if steps % stride != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("{axis}: (in + 2*pad - k) = {steps} not divisible by stride {stride}"),
        ));
    }
    Ok(steps / stride + 1)
}

/// Unfold x (C,H,W) into a (C*kh*kw) x (oh*ow) matrix.
fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let ohw = oh * ow;
    let mut cols = vec![0.0; c_in * kh * kw * ohw];
    let src = x.data();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let sy = (oy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + sy as usize) * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let sx = (ox * stride + kj) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            cols[dst_row + ox] = src[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a (C*kh*kw) x (oh*ow) matrix back onto an input-shaped tensor.
fn col2im(
    cols: &[f64],
    dims: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (c_in, h, w) = (dims[0], dims[1], dims[2]);
    let ohw = oh * ow;
    let mut out = Tensor::zeros(dims);
    let dst = out.data_mut();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let sy = (oy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + sy as usize) * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let sx = (ox * stride + kj) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[dst_row + sx as usize] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    // Row-major matrices; `ta`/`tb` select a transposed view via strides.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Validate conv2d argument shapes; returns (oh, ow).
pub fn conv2d_check(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape("conv2d", "input rank", 3, x.rank()));
    }
    if k.rank() != 4 {
        return Err(Error::shape("conv2d", "kernel rank", 4, k.rank()));
    }
    if k.dims()[1] != x.dims()[0] {
        return Err(Error::shape("conv2d", "input channels", k.dims()[1], x.dims()[0]));
    }
    if bias.rank() != 1 || bias.dims()[0] != k.dims()[0] {
        return Err(Error::shape("conv2d", "bias channels", k.dims()[0], bias.numel()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let oh = conv_extent(x.dims()[1], k.dims()[2], stride, pad, "height")?;
    let ow = conv_extent(x.dims()[2], k.dims()[3], stride, pad, "width")?;
    Ok((oh, ow))
}

/// Cross-correlation of x (C_in,H,W) with k (C_out,C_in,kh,kw) plus bias.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (oh, ow) = conv2d_check(x, k, bias, stride, pad)?;
    let (c_out, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3]);
    let ckk = x.dims()[0] * kh * kw;
    let ohw = oh * ow;
    let cols = im2col(x, kh, kw, stride, pad, oh, ow);
    let mut out = vec![0.0; c_out * ohw];
    gemm(c_out, ckk, ohw, k.data(), false, &cols, false, &mut out);
    for o in 0..c_out {
        let b = bias.data()[o];
        for v in &mut out[o * ohw..(o + 1) * ohw] {
            *v += b;
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dk: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_vjp(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> ConvGrads {
    let (c_out, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3]);
    let (oh, ow) = (dy.dims()[1], dy.dims()[2]);
    let ohw = oh * ow;
    let ckk = x.dims()[0] * kh * kw;

    let db = need_db.then(|| {
        let mut d = vec![0.0; c_out];
        for o in 0..c_out {
            d[o] = dy.data()[o * ohw..(o + 1) * ohw].iter().sum();
        }
        Tensor::new(vec![c_out], d).unwrap()
    });

    let cols = (need_dk || need_dx).then(|| im2col(x, kh, kw, stride, pad, oh, ow));

    let dk = need_dk.then(|| {
        let mut d = vec![0.0; c_out * ckk];
        gemm(c_out, ohw, ckk, dy.data(), false, cols.as_ref().unwrap(), true, &mut d);
        Tensor::new(k.dims().to_vec(), d).unwrap()
    });

    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; ckk * ohw];
        gemm(ckk, c_out, ohw, k.data(), true, dy.data(), false, &mut dcols);
        col2im(&dcols, x.dims(), kh, kw, stride, pad, oh, ow)
    });

    ConvGrads { dx, dk, db }
}

/// Hadamard product. `b` may have extent 1 on axis 0 (broadcast over the
/// leading axis); no other broadcasting is supported.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() == b.dims() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        return Tensor::new(a.dims().to_vec(), data);
    }
    if mul_broadcasts(a, b) {
        let chunk = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for block in a.data().chunks_exact(chunk) {
            data.extend(block.iter().zip(b.data()).map(|(&x, &y)| x * y));
        }
        return Tensor::new(a.dims().to_vec(), data);
    }
    Err(Error::shape(
        "elementwise_mul",
        "dims",
        format!("{:?}", a.dims()),
        format!("{:?}", b.dims()),
    ))
}

pub fn mul_broadcasts(a: &Tensor, b: &Tensor) -> bool {
    a.rank() == b.rank() && a.rank() >= 1 && b.dims()[0] == 1 && a.dims()[1..] == b.dims()[1..]
}

/// (da, db) for the Hadamard product, folding the broadcast axis of `b`.
pub fn mul_vjp(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    if a.dims() == b.dims() {
        let da = mul(dy, b).unwrap();
        let db = mul(dy, a).unwrap();
        return (da, db);
    }
    let da = mul(dy, b).unwrap();
    let chunk = b.numel();
    let mut db = Tensor::zeros(b.dims());
    for (block_dy, block_a) in dy.data().chunks_exact(chunk).zip(a.data().chunks_exact(chunk)) {
        for (d, (&g, &x)) in db.data_mut().iter_mut().zip(block_dy.iter().zip(block_a)) {
            *d += g * x;
        }
    }
    (da, db)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "add",
            "dims",
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

/// Nearest-neighbour resize of a (C,H,W) tensor; source index floor(i*H/H').
pub fn resize_nearest(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("resize_nearest", "input rank", 3, x.rank()));
    }
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize_nearest", "target extent must be >= 1"));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = vec![0.0; c * th * tw];
    let src = x.data();
    for ch in 0..c {
        for i in 0..th {
            let sy = i * h / th;
            let src_row = (ch * h + sy) * w;
            let dst_row = (ch * th + i) * tw;
            for j in 0..tw {
                out[dst_row + j] = src[src_row + j * w / tw];
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

pub fn resize_nearest_vjp(x_dims: &[usize], dy: &Tensor) -> Tensor {
    let (c, h, w) = (x_dims[0], x_dims[1], x_dims[2]);
    let (th, tw) = (dy.dims()[1], dy.dims()[2]);
    let mut dx = Tensor::zeros(x_dims);
    let dst = dx.data_mut();
    let g = dy.data();
    for ch in 0..c {
        for i in 0..th {
            let sy = i * h / th;
            let dst_row = (ch * h + sy) * w;
            let src_row = (ch * th + i) * tw;
            for j in 0..tw {
                dst[dst_row + j * w / tw] += g[src_row + j];
            }
        }
    }
    dx
}

/// Stack a's channels before b's; spatial dims must match.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(Error::shape("concat_channels", "rank", 3, a.rank().max(b.rank())));
    }
    if a.dims()[1..] != b.dims()[1..] {
        return Err(Error::shape(
            "concat_channels",
            "spatial dims",
            format!("{:?}", &a.dims()[1..]),
            format!("{:?}", &b.dims()[1..]),
        ));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.dims()[0] + b.dims()[0], a.dims()[1], a.dims()[2]], data)
}

pub fn concat_channels_vjp(ca: usize, dy: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (dy.dims()[1], dy.dims()[2]);
    let split = ca * h * w;
    let da = Tensor::new(vec![ca, h, w], dy.data()[..split].to_vec()).unwrap();
    let db = Tensor::new(vec![dy.dims()[0] - ca, h, w], dy.data()[split..].to_vec()).unwrap();
    (da, db)
}

/// -sum(q * log_softmax(l)) over every lane along `axis`.
///
/// The channel sums of `q` are not assumed to be 1; the gradient handles the
/// general case so finite-difference checks hold for arbitrary inputs.
pub fn soft_cross_entropy(q: &Tensor, l: &Tensor, axis: usize) -> Result<f64> {
    if q.dims() != l.dims() {
        return Err(Error::shape(
            "soft_cross_entropy",
            "dims",
            format!("{:?}", q.dims()),
            format!("{:?}", l.dims()),
        ));
    }
    let lse = log_sum_exp(l, axis);
    let (outer, len, inner) = lanes(l.dims(), axis);
    let (qv, lv) = (q.data(), l.data());
    let mut total = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let z = lse[o * inner + i];
            for c in 0..len {
                let k = base + c * inner;
                total -= qv[k] * (lv[k] - z);
            }
        }
    }
    Ok(total)
}

/// d/dl of soft_cross_entropy, scaled by the upstream scalar `g`.
pub fn soft_cross_entropy_vjp_l(q: &Tensor, l: &Tensor, axis: usize, g: f64) -> Tensor {
    let p = softmax(l, axis).unwrap();
    let (outer, len, inner) = lanes(l.dims(), axis);
    let (qv, pv) = (q.data(), p.data());
    let mut out = vec![0.0; l.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut qsum = 0.0;
            for c in 0..len {
                qsum += qv[base + c * inner];
            }
            for c in 0..len {
                let k = base + c * inner;
                out[k] = g * (qsum * pv[k] - qv[k]);
            }
        }
    }
    Tensor::new(l.dims().to_vec(), out).unwrap()
}
