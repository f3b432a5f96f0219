//! Numeric kernels. The autodiff tape wraps these; forward-only code calls
//! them directly, so each path executes the same arithmetic.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// GEMM wrappers
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            S::ZERO,
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub fn matmul_tb<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, kb) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "matmul_tb inner dims {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            1,
            k as isize,
            S::ZERO,
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n]
pub fn matmul_ta<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "matmul_ta inner dims {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            S::ZERO,
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

// ---------------------------------------------------------------------------
// Convolution (zero padding) via im2col
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold x[c,h,w] into columns [(c*kh*kw), (oh*ow)] with zero padding.
pub fn im2col<S: Scalar>(
    x: &Tensor<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let n = oh * ow;
    let mut cols = Tensor::zeros(&[c * kh * kw, n]);
    let xd = x.data();
    let cd = cols.data_mut();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cd[base + oy * ow + ox] = xd[xrow + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input; adjoint of [`im2col`].
pub fn col2im<S: Scalar>(
    cols: &Tensor<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let n = oh * ow;
    assert_eq!(cols.shape(), &[c * kh * kw, n]);
    let mut x = Tensor::zeros(&[c, h, w]);
    let xd = x.data_mut();
    let cd = cols.data();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xd[xrow + ix as usize] += cd[base + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// y[co,oh,ow] = w[co,ci,kh,kw] * x[ci,h,w] + b[co]; returns (y, cols).
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ciw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w2d = Tensor::from_vec(&[co, ci * kh * kw], w.data().to_vec());
    let mut y = matmul(&w2d, &cols);
    if let Some(b) = b {
        assert_eq!(b.len(), co);
        let n = oh * ow;
        let yd = y.data_mut();
        for o in 0..co {
            let bv = b.data()[o];
            for e in &mut yd[o * n..(o + 1) * n] {
                *e += bv;
            }
        }
    }
    (y.reshaped(&[co, oh, ow]), cols)
}

/// Gradients of conv2d; returns (dx, dw, db).
pub fn conv2d_backward<S: Scalar>(
    dy: &Tensor<S>,
    cols: &Tensor<S>,
    w: &Tensor<S>,
    xshape: &[usize],
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (c, h, wd) = (xshape[0], xshape[1], xshape[2]);
    let n = dy.shape()[1] * dy.shape()[2];
    let dy2d = Tensor::from_vec(&[co, n], dy.data().to_vec());
    // dW = dy2d @ cols^T
    let dw = matmul_tb(&dy2d, cols);
    let dw = dw.reshaped(&[co, ci, kh, kw]);
    // db = row sums of dy2d
    let mut db = Tensor::zeros(&[co]);
    for o in 0..co {
        let mut s = S::ZERO;
        for &v in &dy2d.data()[o * n..(o + 1) * n] {
            s += v;
        }
        db.data_mut()[o] = s;
    }
    // dcols = W^T @ dy2d, dx = col2im(dcols)
    let w2d = Tensor::from_vec(&[co, ci * kh * kw], w.data().to_vec());
    let dcols = matmul_ta(&w2d, &dy2d);
    let dx = col2im(&dcols, c, h, wd, kh, kw, stride, pad);
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution with replicate padding (Sobel filtering)
// ---------------------------------------------------------------------------

fn clamp_idx(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

/// Same-size depthwise 3x3 filter with edge replication.
pub fn depthwise3x3_replicate<S: Scalar>(x: &Tensor<S>, kernel: &[f64; 9]) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k: Vec<S> = kernel.iter().map(|&v| S::from_f64(v)).collect();
    let mut y = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let plane = ci * h * w;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = S::ZERO;
                for ky in 0..3usize {
                    let sy = clamp_idx(iy as isize + ky as isize - 1, h);
                    for kx in 0..3usize {
                        let sx = clamp_idx(ix as isize + kx as isize - 1, w);
                        acc += k[ky * 3 + kx] * xd[plane + sy * w + sx];
                    }
                }
                yd[plane + iy * w + ix] = acc;
            }
        }
    }
    y
}

/// Input gradient of [`depthwise3x3_replicate`]: scatter each output grad
/// through the same clamped taps it read from.
pub fn depthwise3x3_replicate_backward<S: Scalar>(
    dy: &Tensor<S>,
    kernel: &[f64; 9],
) -> Tensor<S> {
    let (c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let k: Vec<S> = kernel.iter().map(|&v| S::from_f64(v)).collect();
    let mut dx = Tensor::zeros(&[c, h, w]);
    let gd = dy.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        let plane = ci * h * w;
        for iy in 0..h {
            for ix in 0..w {
                let g = gd[plane + iy * w + ix];
                for ky in 0..3usize {
                    let sy = clamp_idx(iy as isize + ky as isize - 1, h);
                    for kx in 0..3usize {
                        let sx = clamp_idx(ix as isize + kx as isize - 1, w);
                        xd[plane + sy * w + sx] += k[ky * 3 + kx] * g;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

pub fn avgpool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let q = S::from_f64(0.25);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = (ci * h + 2 * oy) * w + 2 * ox;
                let i1 = i0 + w;
                let s = xd[i0] + xd[i0 + 1] + xd[i1] + xd[i1 + 1];
                yd[(ci * oh + oy) * ow + ox] = s * q;
            }
        }
    }
    y
}

pub fn avgpool2_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let q = S::from_f64(0.25);
    let gd = dy.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(ci * oh + oy) * ow + ox] * q;
                let i0 = (ci * h + 2 * oy) * w + 2 * ox;
                let i1 = i0 + w;
                xd[i0] += g;
                xd[i0 + 1] += g;
                xd[i1] += g;
                xd[i1 + 1] += g;
            }
        }
    }
    dx
}

/// Window bounds used by adaptive average pooling: [floor(i*n/o), ceil((i+1)*n/o)).
pub fn adaptive_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avgpool<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, w, ow);
                let mut s = S::ZERO;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xd[(ci * h + iy) * w + ix];
                    }
                }
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                yd[(ci * oh + oy) * ow + ox] = s * S::from_f64(1.0 / cnt);
            }
        }
    }
    y
}

pub fn adaptive_avgpool_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let gd = dy.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, w, ow);
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                let g = gd[(ci * oh + oy) * ow + ox] * S::from_f64(1.0 / cnt);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        xd[(ci * h + iy) * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn nearest_up2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = xd[(ci * h + iy) * w + ix];
                let o = (ci * 2 * h + 2 * iy) * 2 * w + 2 * ix;
                yd[o] = v;
                yd[o + 1] = v;
                yd[o + 2 * w] = v;
                yd[o + 2 * w + 1] = v;
            }
        }
    }
    y
}

pub fn nearest_up2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let gd = dy.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let o = (ci * h2 + 2 * iy) * w2 + 2 * ix;
                xd[(ci * h + iy) * w + ix] = gd[o] + gd[o + 1] + gd[o + w2] + gd[o + w2 + 1];
            }
        }
    }
    dx
}

/// Pad [c,h,w] by one pixel on each side, replicating edges.
pub fn replicate_pad1<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h + 2, w + 2);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            let sy = (oy as isize - 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let sx = (ox as isize - 1).clamp(0, w as isize - 1) as usize;
                yd[(ci * oh + oy) * ow + ox] = xd[(ci * h + sy) * w + sx];
            }
        }
    }
    y
}

/// Adjoint of [`replicate_pad1`]: border gradients fold back onto the
/// replicated source pixels.
pub fn replicate_pad1_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (oh - 2, ow - 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let gd = dy.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            let sy = (oy as isize - 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let sx = (ox as isize - 1).clamp(0, w as isize - 1) as usize;
                xd[(ci * h + sy) * w + sx] += gd[(ci * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// Max-pool by an integer factor; used for mask pyramids (forward only).
pub fn maxpool_factor<S: Scalar>(x: &Tensor<S>, fy: usize, fx: usize) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % fy == 0 && w % fx == 0, "maxpool factor must divide dims");
    let (oh, ow) = (h / fy, w / fx);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = xd[(ci * h + oy * fy) * w + ox * fx];
                for iy in oy * fy..(oy + 1) * fy {
                    for ix in ox * fx..(ox + 1) * fx {
                        let v = xd[(ci * h + iy) * w + ix];
                        if v > m {
                            m = v;
                        }
                    }
                }
                yd[(ci * oh + oy) * ow + ox] = m;
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Space-to-depth / depth-to-space (the latent codec core)
// ---------------------------------------------------------------------------

/// x[c,h,w] -> y[c*f*f, h/f, w/f]; out channel = c*f*f + dy*f + dx.
pub fn space_to_depth<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % f == 0 && w % f == 0, "space_to_depth needs divisible dims");
    let (oh, ow) = (h / f, w / f);
    let mut y = Tensor::zeros(&[c * f * f, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = ci * f * f + dy * f + dx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        yd[(oc * oh + oy) * ow + ox] =
                            xd[(ci * h + oy * f + dy) * w + ox * f + dx];
                    }
                }
            }
        }
    }
    y
}

pub fn depth_to_space<S: Scalar>(y: &Tensor<S>, f: usize) -> Tensor<S> {
    let (cf, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    assert!(cf % (f * f) == 0, "depth_to_space channel count");
    let c = cf / (f * f);
    let (h, w) = (oh * f, ow * f);
    let mut x = Tensor::zeros(&[c, h, w]);
    let yd = y.data();
    let xd = x.data_mut();
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = ci * f * f + dy * f + dx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        xd[(ci * h + oy * f + dy) * w + ox * f + dx] =
                            yd[(oc * oh + oy) * ow + ox];
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Token layout
// ---------------------------------------------------------------------------

/// x[c,h,w] -> tokens[h*w, c], row-major over spatial positions.
pub fn chw_to_tokens<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = h * w;
    let mut y = Tensor::zeros(&[n, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for p in 0..n {
            yd[p * c + ci] = xd[ci * n + p];
        }
    }
    y
}

pub fn tokens_to_chw<S: Scalar>(t: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    assert_eq!(n, h * w);
    let mut y = Tensor::zeros(&[c, h, w]);
    let td = t.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for p in 0..n {
            yd[ci * n + p] = td[p * c + ci];
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Softmax / normalisation / activations
// ---------------------------------------------------------------------------

/// Row-wise softmax of x[n,k].
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let mut y = x.clone();
    let yd = y.data_mut();
    for r in 0..n {
        let row = &mut yd[r * k..(r + 1) * k];
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    y
}

/// dx for softmax given its output y and upstream dy: y ⊙ (dy − <dy,y> per row).
pub fn softmax_rows_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let (n, k) = (y.shape()[0], y.shape()[1]);
    let mut dx = Tensor::zeros(&[n, k]);
    let yd = y.data();
    let gd = dy.data();
    let xd = dx.data_mut();
    for r in 0..n {
        let mut dot = S::ZERO;
        for i in r * k..(r + 1) * k {
            dot += gd[i] * yd[i];
        }
        for i in r * k..(r + 1) * k {
            xd[i] = yd[i] * (gd[i] - dot);
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormStats<S: Scalar> {
    pub mean: Vec<S>,
    pub invstd: Vec<S>,
}

/// Group normalisation of x[c,h,w] with per-channel affine.
pub fn group_norm<S: Scalar>(
    x: &Tensor<S>,
    groups: usize,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> (Tensor<S>, NormStats<S>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(c % groups == 0, "groups must divide channels");
    let gsz = (c / groups) * h * w;
    let mut y = Tensor::zeros(&[c, h, w]);
    let mut stats = NormStats {
        mean: vec![S::ZERO; groups],
        invstd: vec![S::ZERO; groups],
    };
    let xd = x.data();
    let yd = y.data_mut();
    let inv_n = S::from_f64(1.0 / gsz as f64);
    for g in 0..groups {
        let start = g * gsz;
        let mut mean = S::ZERO;
        for &v in &xd[start..start + gsz] {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::ZERO;
        for &v in &xd[start..start + gsz] {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let invstd = S::ONE / (var + S::from_f64(NORM_EPS)).sqrt();
        stats.mean[g] = mean;
        stats.invstd[g] = invstd;
        let c0 = g * (c / groups);
        for cc in 0..c / groups {
            let ch = c0 + cc;
            let ga = gamma.data()[ch];
            let be = beta.data()[ch];
            for p in 0..h * w {
                let i = (ch * h + p / w) * w + p % w;
                yd[i] = ga * (xd[i] - mean) * invstd + be;
            }
        }
    }
    (y, stats)
}

/// Gradients of group_norm. Returns (dx, dgamma, dbeta).
pub fn group_norm_backward<S: Scalar>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    groups: usize,
    gamma: &Tensor<S>,
    stats: &NormStats<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let per = c / groups;
    let gsz = per * hw;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xd = x.data();
    let gd = dy.data();
    let inv_n = S::from_f64(1.0 / gsz as f64);
    for g in 0..groups {
        let mean = stats.mean[g];
        let invstd = stats.invstd[g];
        let c0 = g * per;
        // Accumulate per-group sums of dxhat and dxhat*xhat, plus the
        // per-channel affine grads.
        let mut sum_dxh = S::ZERO;
        let mut sum_dxh_xh = S::ZERO;
        for cc in 0..per {
            let ch = c0 + cc;
            let ga = gamma.data()[ch];
            let mut dg = S::ZERO;
            let mut db = S::ZERO;
            for p in 0..hw {
                let i = ch * hw + p;
                let xh = (xd[i] - mean) * invstd;
                let dyv = gd[i];
                dg += dyv * xh;
                db += dyv;
                let dxh = dyv * ga;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            dgamma.data_mut()[ch] = dg;
            dbeta.data_mut()[ch] = db;
        }
        let xdm = dx.data_mut();
        for cc in 0..per {
            let ch = c0 + cc;
            let ga = gamma.data()[ch];
            for p in 0..hw {
                let i = ch * hw + p;
                let xh = (xd[i] - mean) * invstd;
                let dxh = gd[i] * ga;
                xdm[i] = invstd * (dxh - (sum_dxh + xh * sum_dxh_xh) * inv_n);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise layer norm of x[n,d] with affine over the feature axis.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> (Tensor<S>, NormStats<S>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut stats = NormStats {
        mean: vec![S::ZERO; n],
        invstd: vec![S::ZERO; n],
    };
    let xd = x.data();
    let yd = y.data_mut();
    let inv_d = S::from_f64(1.0 / d as f64);
    for r in 0..n {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::ZERO;
        for &v in row {
            let e = v - mean;
            var += e * e;
        }
        var *= inv_d;
        let invstd = S::ONE / (var + S::from_f64(NORM_EPS)).sqrt();
        stats.mean[r] = mean;
        stats.invstd[r] = invstd;
        for j in 0..d {
            yd[r * d + j] = gamma.data()[j] * (row[j] - mean) * invstd + beta.data()[j];
        }
    }
    (y, stats)
}

pub fn layer_norm_backward<S: Scalar>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &NormStats<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let xd = x.data();
    let gd = dy.data();
    let inv_d = S::from_f64(1.0 / d as f64);
    for r in 0..n {
        let mean = stats.mean[r];
        let invstd = stats.invstd[r];
        let mut sum_dxh = S::ZERO;
        let mut sum_dxh_xh = S::ZERO;
        for j in 0..d {
            let i = r * d + j;
            let xh = (xd[i] - mean) * invstd;
            let dxh = gd[i] * gamma.data()[j];
            dgamma.data_mut()[j] += gd[i] * xh;
            dbeta.data_mut()[j] += gd[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let xdm = dx.data_mut();
        for j in 0..d {
            let i = r * d + j;
            let xh = (xd[i] - mean) * invstd;
            let dxh = gd[i] * gamma.data()[j];
            xdm[i] = invstd * (dxh - (sum_dxh + xh * sum_dxh_xh) * inv_d);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<S: Scalar>(dy: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(xv);
        *d = *d * (s + xv * s * (S::ONE - s));
    }
    dx
}

/// Numerically stable softplus ln(1+e^x) = max(x,0) + ln(1+e^{-|x|}).
pub fn softplus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.maxv(S::ZERO) + (-v.abs()).exp().ln_1p())
}

pub fn softplus_backward<S: Scalar>(dy: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        *d = *d * sigmoid(xv);
    }
    dx
}
