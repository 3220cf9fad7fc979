//! Raw CPU kernels operating on NCHW slices.

/// `c = a · b + beta · c` for row-major operands; `ta`/`tb` select a
/// transposed view of the stored matrix. `a` is logically m×k, `b` k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe views that
    // stay within the asserted lengths.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back into an image (adjoint of `im2col`).
pub fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch. `x` is N×Cin×H×W, `w` is
/// Cout×Cin×kh×kw; returns N×Cout×Ho×Wo.
pub fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    w: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0f32; n * cout * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; k * p]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, k, p, w, false, xb, false, ob, beta);
        } else {
            im2col(xb, g, &mut col);
            gemm(cout, k, p, w, false, &col, false, ob, beta);
        }
    }
    out
}

/// Backward convolution. Accumulates into `dw`/`db` and returns dx when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    w: &[f32],
    cout: usize,
    dy: &[f32],
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![0.0f32; n * in_len]);
    let mut col = vec![0.0f32; k * p];
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..n {
            let dyb = &dy[b * cout * p..(b + 1) * cout * p];
            for (co, chunk) in dyb.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * cout * p..(b + 1) * cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            if g.is_pointwise() {
                gemm(cout, p, k, dyb, false, xb, true, dw, 1.0);
            } else {
                im2col(xb, g, &mut col);
                gemm(cout, p, k, dyb, false, &col, true, dw, 1.0);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, p, w, true, dyb, false, dxb, 1.0);
            } else {
                gemm(k, cout, p, w, true, dyb, false, &mut col, 0.0);
                col2im(&col, g, dxb);
            }
        }
    }
    dx
}

/// Per-(image, group) statistics produced by the group-norm forward pass.
pub struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub const GN_EPS: f32 = 1e-5;

pub fn group_norm_forward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, GroupStats) {
    let (n, c, h, w) = dims;
    let cg = c / groups;
    let glen = cg * h * w;
    let mut y = vec![0.0f32; x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cg) * h * w;
            let xs = &x[start..start + glen];
            let m = xs.iter().map(|&v| v as f64).sum::<f64>() / glen as f64;
            let var = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / glen as f64;
            let r = 1.0 / (var + GN_EPS as f64).sqrt();
            mean.push(m as f32);
            rstd.push(r as f32);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let off = start + ci * h * w;
                for i in 0..h * w {
                    let xh = ((x[off + i] as f64 - m) * r) as f32;
                    y[off + i] = xh * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[f32],
    stats: &GroupStats,
    dy: &[f32],
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (n, c, h, w) = dims;
    let cg = c / groups;
    let glen = cg * h * w;
    let hw = h * w;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    for b in 0..n {
        for gi in 0..groups {
            let si = b * groups + gi;
            let m = stats.mean[si] as f64;
            let r = stats.rstd[si] as f64;
            let start = (b * c + gi * cg) * hw;
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let off = start + ci * hw;
                let mut dg = 0.0f64;
                let mut dbt = 0.0f64;
                for i in 0..hw {
                    let xh = (x[off + i] as f64 - m) * r;
                    let g = dy[off + i] as f64;
                    dg += g * xh;
                    dbt += g;
                    let dxh = g * gamma[ch] as f64;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                if let Some(dgm) = dgamma.as_deref_mut() {
                    dgm[ch] += dg as f32;
                }
                if let Some(dbm) = dbeta.as_deref_mut() {
                    dbm[ch] += dbt as f32;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let mean_dxh = sum_dxh / glen as f64;
                let mean_dxh_xh = sum_dxh_xh / glen as f64;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = start + ci * hw;
                    for i in 0..hw {
                        let xh = (x[off + i] as f64 - m) * r;
                        let dxh = dy[off + i] as f64 * gamma[ch] as f64;
                        dx[off + i] = (r * (dxh - mean_dxh - xh * mean_dxh_xh)) as f32;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; returns output and flat argmax indices into the input.
pub fn max_pool_forward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let (n, c, h, w) = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![f32::NEG_INFINITY; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let oi = plane * ho * wo + oy * wo + ox;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ii = base + iy as usize * w + ix as usize;
                        if x[ii] > out[oi] {
                            out[oi] = x[ii];
                            arg[oi] = ii as u32;
                        }
                    }
                }
            }
        }
    }
    (out, arg, ho, wo)
}

/// Source index for nearest-neighbour resampling (floor convention).
pub fn nearest_src(o: usize, in_len: usize, out_len: usize) -> usize {
    ((o * in_len) / out_len).min(in_len - 1)
}

/// Bilinear source taps `(i0, i1, w0, w1)` with half-pixel centres.
pub fn bilinear_taps(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f32, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let l1 = src - i0 as f32;
    (i0, i1, 1.0 - l1, l1)
}

pub fn resize_forward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
    bilinear: bool,
) -> Vec<f32> {
    let (n, c, h, w) = dims;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = if bilinear {
                    let (y0, y1, wy0, wy1) = bilinear_taps(oy, h, oh);
                    let (x0, x1, wx0, wx1) = bilinear_taps(ox, w, ow);
                    wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1])
                } else {
                    src[nearest_src(oy, h, oh) * w + nearest_src(ox, w, ow)]
                };
            }
        }
    }
    out
}

pub fn resize_backward(
    dy: &[f32],
    dims: (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
    bilinear: bool,
) -> Vec<f32> {
    let (n, c, h, w) = dims;
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let g = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                if bilinear {
                    let (y0, y1, wy0, wy1) = bilinear_taps(oy, h, oh);
                    let (x0, x1, wx0, wx1) = bilinear_taps(ox, w, ow);
                    dst[y0 * w + x0] += v * wy0 * wx0;
                    dst[y0 * w + x1] += v * wy0 * wx1;
                    dst[y1 * w + x0] += v * wy1 * wx0;
                    dst[y1 * w + x1] += v * wy1 * wx1;
                } else {
                    dst[nearest_src(oy, h, oh) * w + nearest_src(ox, w, ow)] += v;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut naive = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5);
        }
        // transposed storage of both operands
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom { cin: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        let cout = 3;
        let x: Vec<f32> = (0..2 * 5 * 4).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let w: Vec<f32> = (0..cout * 2 * 9).map(|i| ((i * 5) % 7) as f32 * 0.1 - 0.3).collect();
        let bias = [0.5, -0.25, 1.0];
        let out = conv2d_forward(&x, 1, &g, &w, cout, Some(&bias));
        let (ho, wo) = g.out_hw();
        assert_eq!((ho, wo), (3, 2));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                acc += w[((co * 2 + ci) * 3 + ki) * 3 + kj]
                                    * x[(ci * 5 + iy as usize) * 4 + ix as usize];
                            }
                        }
                    }
                    let got = out[(co * ho + oy) * wo + ox];
                    assert!((got - acc).abs() < 1e-4, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let y = resize_forward(&x, (1, 1, 3, 4), 3, 4, true);
        assert_eq!(x, y);
        let y = resize_forward(&x, (1, 1, 3, 4), 3, 4, false);
        assert_eq!(x, y);
    }
}
