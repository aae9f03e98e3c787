//! Forward and backward kernels for single samples in CHW layout.

use matrixmultiply::dgemm;

/// `c = alpha · a · b + beta · c` on row-major buffers, with `a` given by
/// explicit strides so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass buffers whose extents match the strides.
    unsafe {
        dgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// Unfolds `(in_c, h, w)` into a `(in_c·k·k) × (out_h·out_w)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let mut col = vec![0.0; g.patch() * hw];
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let mut x = vec![0.0; g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns `(output, col)`; `weight` is `out_c × patch`.
pub fn conv_forward(
    x: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let out_c = bias.len();
    let hw = g.out_h() * g.out_w();
    let col = im2col(x, g);
    let mut out = vec![0.0; out_c * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    let p = g.patch();
    gemm(out_c, p, hw, weight, p as isize, 1, &col, hw as isize, 1, 1.0, &mut out);
    (out, col)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    dout: &[f64],
    col: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let out_c = dbias.len();
    let hw = g.out_h() * g.out_w();
    let p = g.patch();
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    // dW += dout · colᵀ
    gemm(out_c, hw, p, dout, hw as isize, 1, col, 1, hw as isize, 1.0, dweight);
    if !need_input {
        return None;
    }
    // dcol = Wᵀ · dout
    let mut dcol = vec![0.0; p * hw];
    gemm(p, out_c, hw, weight, 1, p as isize, dout, hw as isize, 1, 0.0, &mut dcol);
    Some(col2im(&dcol, g))
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Gradient through ReLU given the layer input; the kink gets slope 0.
pub fn relu_backward(dout: &[f64], input: &[f64]) -> Vec<f64> {
    dout.iter()
        .zip(input)
        .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
        .collect()
}

/// 2×2 stride-2 max pooling over `(c, h, w)`. Returns the output and, per
/// output cell, the flat input index of the winner: the first maximal
/// element in row-major order within the window.
pub fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dout: &[f64], arg: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&d, &a) in dout.iter().zip(arg) {
        dx[a as usize] += d;
    }
    dx
}

/// `y = W x + b` with `W` of shape `out × inp`.
pub fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let inp = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * inp..(o + 1) * inp]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

pub fn dense_backward(
    dout: &[f64],
    x: &[f64],
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let inp = x.len();
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        if d != 0.0 {
            for (dw, v) in dweight[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                *dw += d * v;
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut dx = vec![0.0; inp];
    for (o, &d) in dout.iter().enumerate() {
        if d != 0.0 {
            for (g, w) in dx.iter_mut().zip(&weight[o * inp..(o + 1) * inp]) {
                *g += d * w;
            }
        }
    }
    Some(dx)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `-ln p_label`, computed from logits via log-sum-exp.
pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}
