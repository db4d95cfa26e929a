//! Batched layer kernels. Convolution is lowered to im2col + GEMM; every
//! reduction runs in a fixed order so results are bit-reproducible.

use super::layer::Conv2d;

/// `C = A·B + beta·C` with row-major operands. `A` is `m×k` (or `k×m` when
/// `trans_a`), `B` is `k×n` (or `n×k` when `trans_b`), `C` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above guarantees every strided access stays in bounds,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub conv: Conv2d,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(conv: Conv2d, in_h: usize, in_w: usize) -> Self {
        let (out_h, out_w) = conv
            .output_hw(in_h, in_w)
            .expect("geometry validated at model construction");
        Self {
            conv,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.conv.in_channels * self.in_plane()
    }

    pub fn out_len(&self) -> usize {
        self.conv.out_channels * self.positions()
    }

    /// Column buffer length for one sample (all groups).
    pub fn cols_len(&self) -> usize {
        self.conv.groups * self.conv.patch_len() * self.positions()
    }

    fn im2col(&self, x: &[f64], group: usize, cols: &mut [f64]) {
        let c = &self.conv;
        let p = self.positions();
        let pad = c.padding as isize;
        let mut row = 0;
        for ci in 0..c.group_in() {
            let plane = &x[(group * c.group_in() + ci) * self.in_plane()..][..self.in_plane()];
            for ky in 0..c.kernel_h {
                for kx in 0..c.kernel_w {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oy in 0..self.out_h {
                        let iy = (oy * c.stride + ky) as isize - pad;
                        for ox in 0..self.out_w {
                            let ix = (ox * c.stride + kx) as isize - pad;
                            dst[idx] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                plane[iy as usize * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                            idx += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], group: usize, dx: &mut [f64]) {
        let c = &self.conv;
        let p = self.positions();
        let pad = c.padding as isize;
        let in_plane = self.in_plane();
        let mut row = 0;
        for ci in 0..c.group_in() {
            let plane = &mut dx[(group * c.group_in() + ci) * in_plane..][..in_plane];
            for ky in 0..c.kernel_h {
                for kx in 0..c.kernel_w {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oy in 0..self.out_h {
                        let iy = (oy * c.stride + ky) as isize - pad;
                        for ox in 0..self.out_w {
                            let ix = (ox * c.stride + kx) as isize - pad;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                plane[iy as usize * self.in_w + ix as usize] += src[idx];
                            }
                            idx += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Forward pass over `batch` samples. Returns the output and, when
    /// `keep_cols` is set, the im2col buffers needed by the backward pass.
    pub fn forward(
        &self,
        batch: usize,
        x: &[f64],
        weight: &[f64],
        bias: &[f64],
        keep_cols: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let c = &self.conv;
        let (k, p, ocg) = (c.patch_len(), self.positions(), c.group_out());
        let per_group = k * p;
        let mut out = vec![0.0; batch * self.out_len()];
        let mut saved = keep_cols.then(|| vec![0.0; batch * self.cols_len()]);
        let mut scratch = vec![0.0; if keep_cols { 0 } else { per_group }];
        for s in 0..batch {
            let xs = &x[s * self.in_len()..(s + 1) * self.in_len()];
            let os = &mut out[s * self.out_len()..(s + 1) * self.out_len()];
            for g in 0..c.groups {
                let cols: &mut [f64] = match saved.as_mut() {
                    Some(buf) => &mut buf[(s * c.groups + g) * per_group..][..per_group],
                    None => &mut scratch,
                };
                self.im2col(xs, g, cols);
                gemm(
                    false,
                    false,
                    ocg,
                    p,
                    k,
                    &weight[g * ocg * k..(g + 1) * ocg * k],
                    cols,
                    0.0,
                    &mut os[g * ocg * p..(g + 1) * ocg * p],
                );
            }
            for (oc, chunk) in os.chunks_mut(p).enumerate() {
                let b = bias[oc];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        (out, saved)
    }

    /// Accumulates weight/bias gradients and optionally computes the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        batch: usize,
        cols: &[f64],
        weight: &[f64],
        dout: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let c = &self.conv;
        let (k, p, ocg) = (c.patch_len(), self.positions(), c.group_out());
        let per_group = k * p;
        let mut dx = want_dx.then(|| vec![0.0; batch * self.in_len()]);
        let mut dcols = vec![0.0; if want_dx { per_group } else { 0 }];
        for s in 0..batch {
            let ds = &dout[s * self.out_len()..(s + 1) * self.out_len()];
            for g in 0..c.groups {
                let cols_g = &cols[(s * c.groups + g) * per_group..][..per_group];
                let dout_g = &ds[g * ocg * p..(g + 1) * ocg * p];
                gemm(
                    false,
                    true,
                    ocg,
                    k,
                    p,
                    dout_g,
                    cols_g,
                    1.0,
                    &mut dweight[g * ocg * k..(g + 1) * ocg * k],
                );
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        true,
                        false,
                        k,
                        p,
                        ocg,
                        &weight[g * ocg * k..(g + 1) * ocg * k],
                        dout_g,
                        0.0,
                        &mut dcols,
                    );
                    self.col2im_add(
                        &dcols,
                        g,
                        &mut dx[s * self.in_len()..(s + 1) * self.in_len()],
                    );
                }
            }
            for (oc, chunk) in ds.chunks(p).enumerate() {
                dbias[oc] += chunk.iter().sum::<f64>();
            }
        }
        dx
    }
}

pub(crate) fn dense_forward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; batch * outputs];
    gemm(false, true, batch, outputs, inputs, x, weight, 0.0, &mut y);
    for row in y.chunks_mut(outputs) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(true, false, outputs, inputs, batch, dy, x, 1.0, dweight);
    for row in dy.chunks(outputs) {
        dbias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; batch * inputs];
        gemm(false, false, batch, inputs, outputs, dy, weight, 0.0, &mut dx);
        dx
    })
}

/// Max pooling; returns outputs and the flat input index each output came from.
/// Ties pick the first (row-major) position in the window.
pub(crate) fn max_pool_forward(
    batch: usize,
    [ch, h, w]: [usize; 3],
    size: usize,
    stride: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(batch * ch * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * ch {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
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

pub(crate) fn max_pool_backward(in_len: usize, argmax: &[usize], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(
    logits: &[f64],
    classes: usize,
    labels: &[u8],
) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let scale = 1.0 / batch as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, (row, g)) in logits
        .chunks(classes)
        .zip(grad.chunks_mut(classes))
        .enumerate()
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let y = labels[s] as usize;
        total += log_z - row[y];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * scale;
        }
        g[y] -= scale;
    }
    (total * scale, grad)
}
