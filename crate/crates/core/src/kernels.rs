//! Raw numeric kernels behind the tape ops. All buffers are row-major.

/// `c = alpha * op(a) * op(b) + beta * c` where `a` is `m×k` and `b` is `k×n`,
/// both given with explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds for the strided views; matrixmultiply does no checking itself.
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(k == 0 || span(m, k, rsa, csa) as usize <= a.len());
    assert!(k == 0 || span(k, n, rsb, csb) as usize <= b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserted spans keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Plain `m×k · k×n` product.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c);
    c
}

/// Unfolds one `c×h×w` image into a `(c·9)×(h·w)` matrix of 3×3 zero-padded patches.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - 1;
                        *out = if ix < 0 || ix >= w as isize {
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

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
}

/// 3×3, stride 1, zero-pad 1 convolution (cross-correlation).
pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let ck = d.c * 9;
    let mut out = vec![0.0; d.n * d.o * hw];
    let mut cols = vec![0.0; ck * hw];
    for s in 0..d.n {
        im2col(&x[s * d.c * hw..(s + 1) * d.c * hw], d.c, d.h, d.w, &mut cols);
        let dst = &mut out[s * d.o * hw..(s + 1) * d.o * hw];
        for (oc, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[oc]);
        }
        gemm(d.o, ck, hw, 1.0, wt, ck as isize, 1, &cols, hw as isize, 1, 1.0, dst);
    }
    out
}

/// Gradients of the convolution. Each output is only computed when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    d: ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let hw = d.h * d.w;
    let ck = d.c * 9;
    let mut dx = want_dx.then(|| vec![0.0; d.n * d.c * hw]);
    let mut dw = want_dw.then(|| vec![0.0; d.o * ck]);
    let mut db = vec![0.0; d.o];
    let mut cols = vec![0.0; ck * hw];
    let mut dcols = vec![0.0; ck * hw];
    for s in 0..d.n {
        let g = &gout[s * d.o * hw..(s + 1) * d.o * hw];
        for (oc, plane) in g.chunks(hw).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * d.c * hw..(s + 1) * d.c * hw], d.c, d.h, d.w, &mut cols);
            // dw += g · colsᵀ
            gemm(d.o, hw, ck, 1.0, g, hw as isize, 1, &cols, 1, hw as isize, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = wᵀ · g
            gemm(ck, d.o, hw, 1.0, wt, 1, ck as isize, g, hw as isize, 1, 0.0, &mut dcols);
            col2im(&dcols, d.c, d.h, d.w, &mut dx[s * d.c * hw..(s + 1) * d.c * hw]);
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling over `[n, c, h, w]`; returns the pooled values and the flat argmax
/// index of each window (first maximum wins).
pub(crate) fn maxpool2_forward(x: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
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
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Cached activations of a GRU step, needed for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// Hidden-side candidate pre-activation `h·W_hn + b_hn`.
    pub hn: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_value(v: f64) -> f64 {
    sigmoid(v)
}

/// GRU step with gate layout `[reset | update | candidate]` along the `3·hid` axis:
///
/// ```text
/// r  = σ(x·Wr + bxr + h·Ur + bhr)
/// z  = σ(x·Wz + bxz + h·Uz + bhz)
/// n  = tanh(x·Wn + bxn + r ⊙ (h·Un + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_forward(
    x: &[f64],
    h: &[f64],
    wx: &[f64],
    wh: &[f64],
    bx: &[f64],
    bh: &[f64],
    batch: usize,
    inp: usize,
    hid: usize,
) -> (Vec<f64>, GruCache) {
    let g3 = 3 * hid;
    let mut a = matmul(x, wx, batch, inp, g3);
    let mut c = matmul(h, wh, batch, hid, g3);
    for s in 0..batch {
        for j in 0..g3 {
            a[s * g3 + j] += bx[j];
            c[s * g3 + j] += bh[j];
        }
    }
    let mut out = vec![0.0; batch * hid];
    let mut cache = GruCache {
        r: vec![0.0; batch * hid],
        z: vec![0.0; batch * hid],
        n: vec![0.0; batch * hid],
        hn: vec![0.0; batch * hid],
    };
    for s in 0..batch {
        for j in 0..hid {
            let (ar, az, an) = (a[s * g3 + j], a[s * g3 + hid + j], a[s * g3 + 2 * hid + j]);
            let (cr, cz, cn) = (c[s * g3 + j], c[s * g3 + hid + j], c[s * g3 + 2 * hid + j]);
            let r = sigmoid(ar + cr);
            let z = sigmoid(az + cz);
            let nn = (an + r * cn).tanh();
            let i = s * hid + j;
            out[i] = (1.0 - z) * nn + z * h[i];
            cache.r[i] = r;
            cache.z[i] = z;
            cache.n[i] = nn;
            cache.hn[i] = cn;
        }
    }
    (out, cache)
}

pub(crate) struct GruGrads {
    pub dx: Vec<f64>,
    pub dh: Vec<f64>,
    pub dwx: Vec<f64>,
    pub dwh: Vec<f64>,
    pub dbx: Vec<f64>,
    pub dbh: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward(
    x: &[f64],
    h: &[f64],
    wx: &[f64],
    wh: &[f64],
    cache: &GruCache,
    gout: &[f64],
    batch: usize,
    inp: usize,
    hid: usize,
) -> GruGrads {
    let g3 = 3 * hid;
    let mut da = vec![0.0; batch * g3];
    let mut dc = vec![0.0; batch * g3];
    let mut dh = vec![0.0; batch * hid];
    for s in 0..batch {
        for j in 0..hid {
            let i = s * hid + j;
            let (r, z, n, hn) = (cache.r[i], cache.z[i], cache.n[i], cache.hn[i]);
            let g = gout[i];
            dh[i] = g * z;
            let dn = g * (1.0 - z);
            let dz = g * (h[i] - n);
            let dpre_n = dn * (1.0 - n * n);
            let dr = dpre_n * hn;
            let dpre_z = dz * z * (1.0 - z);
            let dpre_r = dr * r * (1.0 - r);
            da[s * g3 + j] = dpre_r;
            da[s * g3 + hid + j] = dpre_z;
            da[s * g3 + 2 * hid + j] = dpre_n;
            dc[s * g3 + j] = dpre_r;
            dc[s * g3 + hid + j] = dpre_z;
            dc[s * g3 + 2 * hid + j] = dpre_n * r;
        }
    }
    let mut dx = vec![0.0; batch * inp];
    // dx = da · wxᵀ
    gemm(batch, g3, inp, 1.0, &da, g3 as isize, 1, wx, 1, g3 as isize, 0.0, &mut dx);
    // dh += dc · whᵀ
    gemm(batch, g3, hid, 1.0, &dc, g3 as isize, 1, wh, 1, g3 as isize, 1.0, &mut dh);
    let mut dwx = vec![0.0; inp * g3];
    gemm(inp, batch, g3, 1.0, x, 1, inp as isize, &da, g3 as isize, 1, 0.0, &mut dwx);
    let mut dwh = vec![0.0; hid * g3];
    gemm(hid, batch, g3, 1.0, h, 1, hid as isize, &dc, g3 as isize, 1, 0.0, &mut dwh);
    let mut dbx = vec![0.0; g3];
    let mut dbh = vec![0.0; g3];
    for s in 0..batch {
        for j in 0..g3 {
            dbx[j] += da[s * g3 + j];
            dbh[j] += dc[s * g3 + j];
        }
    }
    GruGrads {
        dx,
        dh,
        dwx,
        dwh,
        dbx,
        dbh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        // aᵀ · b
        gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (v, a) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
