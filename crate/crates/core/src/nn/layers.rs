//! Forward and backward kernels. Activations are batch-major: `[N, C, H, W]`
//! for feature maps and `[N, F]` for flat features.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output spatial size, or `None` when the kernel does not fit.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k && stride >= 1).then(|| (padded - k) / stride + 1)
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    batch: usize,
    weight: &[f64],
    bias: &[f64],
    gate: Option<&[bool]>,
) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.in_c * g.kh * g.kw;
    let mut out = vec![0.0; batch * g.filters * out_plane];
    for n in 0..batch {
        let xs = &x[n * g.in_c * in_plane..(n + 1) * g.in_c * in_plane];
        for f in 0..g.filters {
            if gate.is_some_and(|m| !m[f]) {
                continue;
            }
            let o = &mut out[(n * g.filters + f) * out_plane..(n * g.filters + f + 1) * out_plane];
            o.fill(bias[f]);
            let wf = &weight[f * ksize..(f + 1) * ksize];
            for c in 0..g.in_c {
                let plane = &xs[c * in_plane..(c + 1) * in_plane];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let w = wf[(c * g.kh + ki) * g.kw + kj];
                        for oy in 0..g.out_h {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                            let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.in_w as isize {
                                    *ov += w * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`. Gated-off filters
/// contribute nothing since their output was forced to zero.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    batch: usize,
    weight: &[f64],
    grad_out: &[f64],
    gate: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.in_c * g.kh * g.kw;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.filters];
    for n in 0..batch {
        let xs = &x[n * g.in_c * in_plane..(n + 1) * g.in_c * in_plane];
        let gxs = &mut gx[n * g.in_c * in_plane..(n + 1) * g.in_c * in_plane];
        for f in 0..g.filters {
            if gate.is_some_and(|m| !m[f]) {
                continue;
            }
            let go = &grad_out[(n * g.filters + f) * out_plane..(n * g.filters + f + 1) * out_plane];
            gb[f] += go.iter().sum::<f64>();
            let wf = &weight[f * ksize..(f + 1) * ksize];
            let gwf = &mut gw[f * ksize..(f + 1) * ksize];
            for c in 0..g.in_c {
                let plane = &xs[c * in_plane..(c + 1) * in_plane];
                let gplane = &mut gxs[c * in_plane..(c + 1) * in_plane];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = (c * g.kh + ki) * g.kw + kj;
                        let w = wf[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            let base = iy as usize * g.in_w;
                            for ox in 0..g.out_w {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.in_w as isize {
                                    let d = go[oy * g.out_w + ox];
                                    acc += d * plane[base + ix as usize];
                                    gplane[base + ix as usize] += d * w;
                                }
                            }
                        }
                        gwf[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn dense_forward(
    x: &[f64],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[f64],
    bias: &[f64],
    gate: Option<&[bool]>,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_f];
    for n in 0..batch {
        let xs = &x[n * in_f..(n + 1) * in_f];
        for j in 0..out_f {
            if gate.is_some_and(|m| !m[j]) {
                continue;
            }
            let wj = &weight[j * in_f..(j + 1) * in_f];
            let dot: f64 = wj.iter().zip(xs).map(|(w, v)| w * v).sum();
            out[n * out_f + j] = dot + bias[j];
        }
    }
    out
}

pub(crate) fn dense_backward(
    x: &[f64],
    batch: usize,
    in_f: usize,
    out_f: usize,
    weight: &[f64],
    grad_out: &[f64],
    gate: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; batch * in_f];
    let mut gw = vec![0.0; out_f * in_f];
    let mut gb = vec![0.0; out_f];
    for n in 0..batch {
        let xs = &x[n * in_f..(n + 1) * in_f];
        let gxs = &mut gx[n * in_f..(n + 1) * in_f];
        for j in 0..out_f {
            if gate.is_some_and(|m| !m[j]) {
                continue;
            }
            let d = grad_out[n * out_f + j];
            gb[j] += d;
            let wj = &weight[j * in_f..(j + 1) * in_f];
            let gwj = &mut gw[j * in_f..(j + 1) * in_f];
            for i in 0..in_f {
                gwj[i] += d * xs[i];
                gxs[i] += d * wj[i];
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn relu_backward(x: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    x.data().iter().zip(grad_out).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// Non-overlapping max pooling. Returns the output and, per output element,
/// the flat input index of the selected maximum (first one on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}
