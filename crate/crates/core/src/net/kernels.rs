//! Single-image layer kernels on flat `[c, h, w]` buffers.

/// Geometry shared by conv forward and both backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // need 0 <= ox*s + off < in_len
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = {
            let lim = in_len as isize - off; // ox*s < lim
            if lim <= 0 {
                0
            } else {
                ((lim - 1) / s + 1).min(out_len as isize)
            }
        };
        (lo as usize, (hi_excl.max(lo)) as usize)
    }

    fn in_index(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    let out_hw = g.out_h * g.out_w;
    let in_hw = g.in_h * g.in_w;
    for o in 0..g.out_c {
        let plane = &mut out[o * out_hw..(o + 1) * out_hw];
        plane.fill(bias[o]);
        for c in 0..g.in_c {
            let src = &input[c * in_hw..(c + 1) * in_hw];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.in_h);
                for kx in 0..k {
                    let w = weight[((o * g.in_c + c) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.in_w);
                    for oy in oy0..oy1 {
                        let iy = g.in_index(oy, ky);
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst = &mut plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, s) in dst[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                *d += w * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += w * row[g.in_index(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the conv input.
pub(crate) fn conv_backward_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let k = g.kernel;
    let out_hw = g.out_h * g.out_w;
    let in_hw = g.in_h * g.in_w;
    grad_in.fill(0.0);
    for o in 0..g.out_c {
        let go = &grad_out[o * out_hw..(o + 1) * out_hw];
        for c in 0..g.in_c {
            let gi = &mut grad_in[c * in_hw..(c + 1) * in_hw];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.in_h);
                for kx in 0..k {
                    let w = weight[((o * g.in_c + c) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.in_w);
                    for oy in oy0..oy1 {
                        let iy = g.in_index(oy, ky);
                        let src = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let dst = &mut gi[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, s) in dst[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&src[ox0..ox1]) {
                                *d += w * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[g.in_index(ox, kx)] += w * src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients into `grad_w` / `grad_b`.
pub(crate) fn conv_backward_params(
    g: &ConvGeom,
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let k = g.kernel;
    let out_hw = g.out_h * g.out_w;
    let in_hw = g.in_h * g.in_w;
    for o in 0..g.out_c {
        let go = &grad_out[o * out_hw..(o + 1) * out_hw];
        grad_b[o] += go.iter().sum::<f64>();
        for c in 0..g.in_c {
            let src = &input[c * in_hw..(c + 1) * in_hw];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.in_h);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.in_w);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = g.in_index(oy, ky);
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let gr = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            acc += gr[ox0..ox1]
                                .iter()
                                .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox0..ox1 {
                                acc += gr[ox] * row[g.in_index(ox, kx)];
                            }
                        }
                    }
                    grad_w[((o * g.in_c + c) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Max pooling without padding; returns the flat input index of each maximum
/// (first maximum in scan order on ties).
pub(crate) fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
    out: &mut [f64],
) -> Vec<usize> {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut argmax = vec![0; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + window {
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
    argmax
}

pub(crate) fn maxpool_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i] += g;
    }
}

pub(crate) fn fc_forward(weight: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let n = input.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight[o * n..(o + 1) * n];
        *y = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub(crate) fn fc_backward_input(weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let n = grad_in.len();
    grad_in.fill(0.0);
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * n..(o + 1) * n];
        for (d, w) in grad_in.iter_mut().zip(row) {
            *d += g * w;
        }
    }
}

pub(crate) fn fc_backward_params(input: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) {
    let n = input.len();
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        if g == 0.0 {
            continue;
        }
        for (d, x) in grad_w[o * n..(o + 1) * n].iter_mut().zip(input) {
            *d += g * x;
        }
    }
}
