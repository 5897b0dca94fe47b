//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)` of size `k x n`.
/// When `trans_a` is set, `a` is stored as `k x m` (and likewise for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stored layouts exactly.
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
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
    pub fn in_area(&self) -> usize {
        self.height * self.width
    }
}

/// Number of images per im2col chunk, bounding the column buffer to ~4M values.
pub(crate) fn conv_chunk(g: &ConvGeom, batch: usize) -> usize {
    let per_image = g.patch() * g.out_area();
    (4_000_000 / per_image.max(1)).clamp(1, batch.max(1))
}

/// Fills `cols` (`patch x (images * out_area)`) from `images` consecutive inputs.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], images: usize, cols: &mut [f64]) {
    let oa = g.out_area();
    let row_len = images * oa;
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for img in 0..images {
                    let src = &x[(img * g.channels + c) * g.in_area()..][..g.in_area()];
                    let dst = &mut dst_row[img * oa..(img + 1) * oa];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.height as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.width..][..g.width];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.width as isize {
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
}

/// Scatter-adds column gradients back onto the input gradient.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], images: usize, dx: &mut [f64]) {
    let oa = g.out_area();
    let row_len = images * oa;
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for img in 0..images {
                    let dst = &mut dx[(img * g.channels + c) * g.in_area()..][..g.in_area()];
                    let src = &src_row[img * oa..(img + 1) * oa];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                drow[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution over a batch. `y` has layout `[batch, out_ch, out_h, out_w]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    out_ch: usize,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    y: &mut [f64],
) {
    let oa = g.out_area();
    let chunk = conv_chunk(g, batch);
    let mut cols = vec![0.0; g.patch() * chunk * oa];
    let mut tmp = vec![0.0; out_ch * chunk * oa];
    let mut start = 0;
    while start < batch {
        let n = chunk.min(batch - start);
        let xs = &x[start * g.channels * g.in_area()..];
        im2col(g, xs, n, &mut cols);
        gemm(out_ch, g.patch(), n * oa, w, false, &cols, false, 0.0, &mut tmp);
        for img in 0..n {
            for o in 0..out_ch {
                let src = &tmp[o * n * oa + img * oa..][..oa];
                let dst = &mut y[((start + img) * out_ch + o) * oa..][..oa];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        start += n;
    }
}

/// Backward 2-D convolution; accumulates into `dw`, `db` and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    out_ch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let oa = g.out_area();
    for img in 0..batch {
        for o in 0..out_ch {
            db[o] += dy[(img * out_ch + o) * oa..][..oa].iter().sum::<f64>();
        }
    }
    let chunk = conv_chunk(g, batch);
    let mut cols = vec![0.0; g.patch() * chunk * oa];
    let mut dys = vec![0.0; out_ch * chunk * oa];
    let mut dcols = vec![0.0; g.patch() * chunk * oa];
    let mut start = 0;
    while start < batch {
        let n = chunk.min(batch - start);
        im2col(g, &x[start * g.channels * g.in_area()..], n, &mut cols);
        for img in 0..n {
            for o in 0..out_ch {
                let src = &dy[((start + img) * out_ch + o) * oa..][..oa];
                dys[o * n * oa + img * oa..][..oa].copy_from_slice(src);
            }
        }
        let cols_n = &cols[..g.patch() * n * oa];
        let dys_n = &dys[..out_ch * n * oa];
        gemm(out_ch, n * oa, g.patch(), dys_n, false, cols_n, true, 1.0, dw);
        if let Some(dx) = dx.as_deref_mut() {
            let dcols_n = &mut dcols[..g.patch() * n * oa];
            gemm(g.patch(), out_ch, n * oa, w, true, dys_n, false, 0.0, dcols_n);
            col2im(
                g,
                dcols_n,
                n,
                &mut dx[start * g.channels * g.in_area()..],
            );
        }
        start += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let transpose = |v: &[f64], r: usize, c: usize| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = v[i * c + j];
                }
            }
            t
        };
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
