//! Raw numeric kernels behind the tape operations.
//!
//! Hot loops are written so LLVM can autovectorize them: inner loops run over
//! contiguous slices, reductions use four independent accumulators, and
//! scatter/gather work is kept out of the innermost loop wherever a stride-1
//! layout allows it.

use super::Real;

/// `out = a·b` for row-major `a: m×k`, `b: k×n`. i-k-j loop order; the inner
/// update is an axpy over a contiguous output row.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with four accumulators so the reduction vectorizes without
/// reassociation flags.
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `out += a·bᵀ` for `a: m×n`, `b: k×n` (both row-major), giving `m×k`.
/// Each output element is a dot of two contiguous rows; used for dA = dC·Bᵀ.
pub fn matmul_abt_acc(a: &[Real], b: &[Real], m: usize, n: usize, k: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out += aᵀ·b` for `a: m×k`, `b: m×n`, giving `k×n`. Axpy inner loop;
/// used for dB = Aᵀ·dC.
pub fn matmul_atb_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Convolution geometry. `out_extent` must stay positive for a valid layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let eff = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < eff {
            return None;
        }
        Some((padded - eff) / self.stride + 1)
    }

    /// Output-coordinate range `[lo, hi)` for which `o*stride - pad + k*dilation`
    /// lands inside `[0, input)`.
    fn valid_range(&self, input: usize, k: usize, out: usize) -> (usize, usize) {
        let off = (k * self.dilation) as i64 - self.pad as i64;
        let s = self.stride as i64;
        // lo: smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // hi: largest o with o*s + off <= input-1, plus one
        let hi = (input as i64 - 1 - off).div_euclid(s) + 1;
        let lo = lo.max(0) as usize;
        let hi = hi.clamp(0, out as i64) as usize;
        (lo.min(hi), hi)
    }
}

/// Forward convolution: `x: [cin×h×w]`, `w: [cout×cin×kh×kw]`, optional bias
/// `[cout]`. Stride-1 inner loops run contiguously over output columns.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[Real],
    w: &[Real],
    b: Option<&[Real]>,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    out: &mut [Real],
) {
    let oh = spec.out_extent(h, kh).expect("conv output height");
    let ow = spec.out_extent(wd, kw).expect("conv output width");
    debug_assert_eq!(out.len(), cout * oh * ow);
    match b {
        Some(bias) => {
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow].fill(bias[co]);
            }
        }
        None => out.fill(0.0),
    }
    let s = spec.stride;
    for co in 0..cout {
        let oc_base = co * oh * ow;
        for ci in 0..cin {
            let xc = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = spec.valid_range(h, ky, oh);
                if oy_lo >= oy_hi {
                    continue;
                }
                for kx in 0..kw {
                    let wval = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wval == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = spec.valid_range(wd, kx, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s + ky * spec.dilation) as i64 - spec.pad as i64;
                        let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut out[oc_base + oy * ow..oc_base + (oy + 1) * ow];
                        let ix0 = (ox_lo * s + kx * spec.dilation) as i64 - spec.pad as i64;
                        let ix0 = ix0 as usize;
                        if s == 1 {
                            let xs = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                            let os = &mut orow[ox_lo..ox_hi];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o += wval * xv;
                            }
                        } else {
                            for (t, ox) in (ox_lo..ox_hi).enumerate() {
                                orow[ox] += wval * xrow[ix0 + t * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input; mirrors the forward loop structure.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_x(
    dout: &[Real],
    w: &[Real],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    dx: &mut [Real],
) {
    let oh = spec.out_extent(h, kh).expect("conv output height");
    let ow = spec.out_extent(wd, kw).expect("conv output width");
    let s = spec.stride;
    for co in 0..cout {
        let oc_base = co * oh * ow;
        for ci in 0..cin {
            let dxc = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = spec.valid_range(h, ky, oh);
                if oy_lo >= oy_hi {
                    continue;
                }
                for kx in 0..kw {
                    let wval = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wval == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = spec.valid_range(wd, kx, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s + ky * spec.dilation - spec.pad) as usize;
                        let drow = &dout[oc_base + oy * ow..oc_base + (oy + 1) * ow];
                        let ix0 = ox_lo * s + kx * spec.dilation - spec.pad;
                        if s == 1 {
                            let xs = &mut dxc[iy * wd + ix0..iy * wd + ix0 + (ox_hi - ox_lo)];
                            let ds = &drow[ox_lo..ox_hi];
                            for (o, &dv) in xs.iter_mut().zip(ds) {
                                *o += wval * dv;
                            }
                        } else {
                            for (t, ox) in (ox_lo..ox_hi).enumerate() {
                                dxc[iy * wd + ix0 + t * s] += wval * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. convolution weights; dot products for stride 1.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_w(
    dout: &[Real],
    x: &[Real],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    dw: &mut [Real],
) {
    let oh = spec.out_extent(h, kh).expect("conv output height");
    let ow = spec.out_extent(wd, kw).expect("conv output width");
    let s = spec.stride;
    for co in 0..cout {
        let oc_base = co * oh * ow;
        for ci in 0..cin {
            let xc = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = spec.valid_range(h, ky, oh);
                if oy_lo >= oy_hi {
                    continue;
                }
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = spec.valid_range(wd, kx, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s + ky * spec.dilation - spec.pad) as usize;
                        let drow = &dout[oc_base + oy * ow + ox_lo..oc_base + oy * ow + ox_hi];
                        let ix0 = ox_lo * s + kx * spec.dilation - spec.pad;
                        if s == 1 {
                            acc += dot(drow, &xc[iy * wd + ix0..iy * wd + ix0 + drow.len()]);
                        } else {
                            for (t, &dv) in drow.iter().enumerate() {
                                acc += dv * xc[iy * wd + ix0 + t * s];
                            }
                        }
                    }
                    dw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution bias: per-channel sum of `dout`.
pub fn conv2d_bwd_b(dout: &[Real], cout: usize, oh: usize, ow: usize, db: &mut [Real]) {
    for co in 0..cout {
        let mut s = 0.0;
        for &d in &dout[co * oh * ow..(co + 1) * oh * ow] {
            s += d;
        }
        db[co] += s;
    }
}

/// Source coordinate and lerp weights for align-corners-false resampling.
/// Returns (i0, i1, w1): sample = (1-w1)*src[i0] + w1*src[i1].
fn resize_coord(dst: usize, src_len: usize, scale: Real) -> (usize, usize, Real) {
    let sc = (dst as Real + 0.5) * scale - 0.5;
    let sc = sc.max(0.0).min(src_len as Real - 1.0);
    let i0 = sc.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, sc - i0 as Real)
}

/// Bilinear resize of `[c×h×w]` to `[c×h2×w2]`, align-corners-false.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_fwd(
    x: &[Real],
    c: usize,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    out: &mut [Real],
) {
    let sy = h as Real / h2 as Real;
    let sx = w as Real / w2 as Real;
    let cols: Vec<(usize, usize, Real)> = (0..w2).map(|j| resize_coord(j, w, sx)).collect();
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            let (y0, y1, wy) = resize_coord(i, h, sy);
            let r0 = &xc[y0 * w..y0 * w + w];
            let r1 = &xc[y1 * w..y1 * w + w];
            let orow = &mut out[ch * h2 * w2 + i * w2..ch * h2 * w2 + (i + 1) * w2];
            for (o, &(x0, x1, wx)) in orow.iter_mut().zip(&cols) {
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                *o = top + wy * (bot - top);
            }
        }
    }
}

/// Backward of bilinear resize: scatter-add of the four lerp weights.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_bwd(
    dout: &[Real],
    c: usize,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    dx: &mut [Real],
) {
    let sy = h as Real / h2 as Real;
    let sx = w as Real / w2 as Real;
    let cols: Vec<(usize, usize, Real)> = (0..w2).map(|j| resize_coord(j, w, sx)).collect();
    for ch in 0..c {
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            let (y0, y1, wy) = resize_coord(i, h, sy);
            let drow = &dout[ch * h2 * w2 + i * w2..ch * h2 * w2 + (i + 1) * w2];
            for (&d, &(x0, x1, wx)) in drow.iter().zip(&cols) {
                dxc[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                dxc[y0 * w + x1] += d * (1.0 - wy) * wx;
                dxc[y1 * w + x0] += d * wy * (1.0 - wx);
                dxc[y1 * w + x1] += d * wy * wx;
            }
        }
    }
}

/// Per-channel valid cross-correlation: `x: [c×hx×wx]`, `z: [c×hz×wz]`,
/// output `[c×(hx-hz+1)×(wx-wz+1)]`.
#[allow(clippy::too_many_arguments)]
pub fn dwxcorr_fwd(
    x: &[Real],
    z: &[Real],
    c: usize,
    hx: usize,
    wx: usize,
    hz: usize,
    wz: usize,
    out: &mut [Real],
) {
    let oh = hx - hz + 1;
    let ow = wx - wz + 1;
    out.fill(0.0);
    for ch in 0..c {
        let xc = &x[ch * hx * wx..(ch + 1) * hx * wx];
        let zc = &z[ch * hz * wz..(ch + 1) * hz * wz];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for zy in 0..hz {
            for zx in 0..wz {
                let zval = zc[zy * wz + zx];
                if zval == 0.0 {
                    continue;
                }
                for oy in 0..oh {
                    let xrow = &xc[(oy + zy) * wx + zx..(oy + zy) * wx + zx + ow];
                    let orow = &mut oc[oy * ow..(oy + 1) * ow];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += zval * xv;
                    }
                }
            }
        }
    }
}

/// Backward of depthwise cross-correlation w.r.t. both operands.
#[allow(clippy::too_many_arguments)]
pub fn dwxcorr_bwd(
    dout: &[Real],
    x: &[Real],
    z: &[Real],
    c: usize,
    hx: usize,
    wx: usize,
    hz: usize,
    wz: usize,
    dx: Option<&mut [Real]>,
    dz: Option<&mut [Real]>,
) {
    let oh = hx - hz + 1;
    let ow = wx - wz + 1;
    if let Some(dx) = dx {
        for ch in 0..c {
            let zc = &z[ch * hz * wz..(ch + 1) * hz * wz];
            let dc = &dout[ch * oh * ow..(ch + 1) * oh * ow];
            let dxc = &mut dx[ch * hx * wx..(ch + 1) * hx * wx];
            for zy in 0..hz {
                for zx in 0..wz {
                    let zval = zc[zy * wz + zx];
                    if zval == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let drow = &dc[oy * ow..(oy + 1) * ow];
                        let xrow = &mut dxc[(oy + zy) * wx + zx..(oy + zy) * wx + zx + ow];
                        for (o, &dv) in xrow.iter_mut().zip(drow) {
                            *o += zval * dv;
                        }
                    }
                }
            }
        }
    }
    if let Some(dz) = dz {
        for ch in 0..c {
            let xc = &x[ch * hx * wx..(ch + 1) * hx * wx];
            let dc = &dout[ch * oh * ow..(ch + 1) * oh * ow];
            let dzc = &mut dz[ch * hz * wz..(ch + 1) * hz * wz];
            for zy in 0..hz {
                for zx in 0..wz {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let drow = &dc[oy * ow..(oy + 1) * ow];
                        let xrow = &xc[(oy + zy) * wx + zx..(oy + zy) * wx + zx + ow];
                        acc += dot(drow, xrow);
                    }
                    dzc[zy * wz + zx] += acc;
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction; `x: m×n` in place semantics on `out`.
pub fn softmax_rows(x: &[Real], m: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
}

/// Backward of row-wise softmax: dx = y ⊙ (dy − rowdot(y, dy)).
pub fn softmax_rows_bwd(y: &[Real], dy: &[Real], m: usize, n: usize, dx: &mut [Real]) {
    for i in 0..m {
        let yr = &y[i * n..(i + 1) * n];
        let dyr = &dy[i * n..(i + 1) * n];
        let s = dot(yr, dyr);
        let dxr = &mut dx[i * n..(i + 1) * n];
        for j in 0..n {
            dxr[j] += yr[j] * (dyr[j] - s);
        }
    }
}

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Row-wise layer norm with per-column gain/bias.
pub fn layer_norm_rows(x: &[Real], gain: &[Real], bias: &[Real], m: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<Real>() / n as Real;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
}

/// Backward of layer norm w.r.t. input, gain, and bias.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_bwd(
    x: &[Real],
    gain: &[Real],
    dy: &[Real],
    m: usize,
    n: usize,
    dx: Option<&mut [Real]>,
    dgain: Option<&mut [Real]>,
    dbias: Option<&mut [Real]>,
) {
    let nr = n as Real;
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dbias = dbias;
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let dyr = &dy[i * n..(i + 1) * n];
        let mean = row.iter().sum::<Real>() / nr;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / nr;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..n {
                dg[j] += dyr[j] * (row[j] - mean) * inv;
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..n {
                db[j] += dyr[j];
            }
        }
        if let Some(dxs) = dx.as_deref_mut() {
            // dxhat = dy ⊙ gain; dx = inv·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..n {
                let dxh = dyr[j] * gain[j];
                let xh = (row[j] - mean) * inv;
                m1 += dxh;
                m2 += dxh * xh;
            }
            m1 /= nr;
            m2 /= nr;
            let dxr = &mut dxs[i * n..(i + 1) * n];
            for j in 0..n {
                let dxh = dyr[j] * gain[j];
                let xh = (row[j] - mean) * inv;
                dxr[j] += inv * (dxh - m1 - xh * m2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul_naive(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul(&eye, &x, 2, 2, 2, &mut out);
        assert_eq!(out, x);
        let proj = vec![1.0, 0.0, 0.0, 0.0];
        let y = vec![5.0, 6.0, 7.0, 8.0];
        matmul(&proj, &y, 2, 2, 2, &mut out);
        assert_eq!(out, vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn dilated_conv_on_single_pixel_input() {
        // 1x1 input, k=3, pad=2, dilation=2: only the center tap lands in
        // bounds; off-center taps produce empty valid ranges that must be
        // skipped, not sliced.
        let spec = ConvSpec { stride: 1, pad: 2, dilation: 2 };
        assert_eq!(spec.out_extent(1, 3), Some(1));
        let x = [3.0];
        let w: Vec<Real> = (1..=9).map(|v| v as Real).collect();
        let mut out = [0.0];
        conv2d_fwd(&x, &w, Some(&[0.5]), 1, 1, 1, 1, 3, 3, spec, &mut out);
        // center weight is w[4] = 5
        assert_eq!(out[0], 3.0 * 5.0 + 0.5);

        let mut dx = [0.0];
        conv2d_bwd_x(&[2.0], &w, 1, 1, 1, 1, 3, 3, spec, &mut dx);
        assert_eq!(dx[0], 2.0 * 5.0);

        let mut dw = vec![0.0; 9];
        conv2d_bwd_w(&[2.0], &x, 1, 1, 1, 1, 3, 3, spec, &mut dw);
        let mut expect = vec![0.0; 9];
        expect[4] = 2.0 * 3.0;
        assert_eq!(dw, expect);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::tensor::rng::stream(&[3, 4, 2]);
        let a: Vec<Real> = (0..12).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let b: Vec<Real> = (0..8).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let mut out = vec![0.0; 6];
        matmul(&a, &b, 3, 4, 2, &mut out);
        let oracle = matmul_naive(&a, &b, 3, 4, 2);
        for (x, y) in out.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = crate::tensor::rng::stream(&[9]);
        let m = 5;
        let k = 3;
        let n = 4;
        let a: Vec<Real> = (0..m * k).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let c: Vec<Real> = (0..m * n).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let b: Vec<Real> = (0..k * n).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();

        // dA = C·Bᵀ
        let mut da = vec![0.0; m * k];
        matmul_abt_acc(&c, &b, m, n, k, &mut da);
        let bt: Vec<Real> = {
            let mut t = vec![0.0; n * k];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b[i * n + j];
                }
            }
            t
        };
        let oracle = matmul_naive(&c, &bt, m, n, k);
        for (x, y) in da.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }

        // dB = Aᵀ·C
        let mut dbv = vec![0.0; k * n];
        matmul_atb_acc(&a, &c, m, k, n, &mut dbv);
        let at: Vec<Real> = {
            let mut t = vec![0.0; k * m];
            for i in 0..m {
                for j in 0..k {
                    t[j * m + i] = a[i * k + j];
                }
            }
            t
        };
        let oracle = matmul_naive(&at, &c, k, m, n);
        for (x, y) in dbv.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn conv_naive(
        x: &[Real],
        w: &[Real],
        b: Option<&[Real]>,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        spec: ConvSpec,
    ) -> Vec<Real> {
        let oh = spec.out_extent(h, kh).unwrap();
        let ow = spec.out_extent(wd, kw).unwrap();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as i64 - spec.pad as i64;
                                let ix = (ox * spec.stride + kx * spec.dilation) as i64 - spec.pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x[(ci * h + iy as usize) * wd + ix as usize]
                                        * w[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_kernel_doubles_input() {
        let x: Vec<Real> = (0..9).map(|i| i as Real).collect();
        let w = vec![2.0];
        let spec = ConvSpec { stride: 1, pad: 0, dilation: 1 };
        let mut out = vec![0.0; 9];
        conv2d_fwd(&x, &w, None, 1, 3, 3, 1, 1, 1, spec, &mut out);
        for (o, xv) in out.iter().zip(&x) {
            assert_eq!(*o, 2.0 * xv);
        }
    }

    #[test]
    fn conv_matches_sliding_window_oracle_on_small_shapes() {
        let mut rng = crate::tensor::rng::stream(&[77]);
        for &(h, w) in &[(4usize, 4usize), (5, 7), (8, 8)] {
            for &spec in &[
                ConvSpec { stride: 1, pad: 1, dilation: 1 },
                ConvSpec { stride: 2, pad: 1, dilation: 1 },
                ConvSpec { stride: 1, pad: 2, dilation: 2 },
            ] {
                let (cin, cout, kh, kw) = (2, 3, 3, 3);
                if spec.out_extent(h, kh).is_none() || spec.out_extent(w, kw).is_none() {
                    continue;
                }
                let x: Vec<Real> =
                    (0..cin * h * w).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
                let wt: Vec<Real> =
                    (0..cout * cin * kh * kw).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
                let b: Vec<Real> = (0..cout).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
                let oh = spec.out_extent(h, kh).unwrap();
                let ow = spec.out_extent(w, kw).unwrap();
                let mut out = vec![0.0; cout * oh * ow];
                conv2d_fwd(&x, &wt, Some(&b), cin, h, w, cout, kh, kw, spec, &mut out);
                let oracle = conv_naive(&x, &wt, Some(&b), cin, h, w, cout, kh, kw, spec);
                for (a, o) in out.iter().zip(&oracle) {
                    assert!((a - o).abs() < 1e-10, "spec {spec:?}");
                }
            }
        }
    }

    #[test]
    fn conv_dilation_output_size() {
        let spec = ConvSpec { stride: 1, pad: 0, dilation: 2 };
        assert_eq!(spec.out_extent(7, 3), Some(3));
    }

    #[test]
    fn bilinear_constant_and_single_source() {
        let x = vec![5.0; 6];
        let mut out = vec![0.0; 24];
        bilinear_resize_fwd(&x, 1, 2, 3, 4, 6, &mut out);
        assert!(out.iter().all(|&v| (v - 5.0).abs() < 1e-12));

        let one = vec![3.25];
        let mut out = vec![0.0; 16];
        bilinear_resize_fwd(&one, 1, 1, 1, 4, 4, &mut out);
        assert!(out.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn bilinear_matches_direct_formula() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let (h, w, h2, w2) = (2usize, 2usize, 4usize, 4usize);
        let mut out = vec![0.0; 16];
        bilinear_resize_fwd(&x, 1, h, w, h2, w2, &mut out);
        for i in 0..h2 {
            for j in 0..w2 {
                let sy = ((i as Real + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let sx = ((j as Real + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (wy, wx) = (sy - y0 as Real, sx - x0 as Real);
                let v = (1.0 - wy) * ((1.0 - wx) * x[y0 * 2 + x0] + wx * x[y0 * 2 + x1])
                    + wy * ((1.0 - wx) * x[y1 * 2 + x0] + wx * x[y1 * 2 + x1]);
                assert!((out[i * 4 + j] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_basic() {
        let x = vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0];
        let mut out = vec![0.0; 6];
        softmax_rows(&x, 2, 3, &mut out);
        for j in 0..3 {
            assert!((out[j] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out[3] - 1.0).abs() < 1e-12);
        assert!(out[4].abs() < 1e-12);
    }

    #[test]
    fn softmax_known_values() {
        let x = vec![1.0, 2.0, 3.0];
        let mut out = vec![0.0; 3];
        softmax_rows(&x, 1, 3, &mut out);
        let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = vec![1.0, 2.0, 3.0];
        let gain = vec![1.0; 3];
        let bias = vec![0.0; 3];
        let mut out = vec![0.0; 3];
        layer_norm_rows(&x, &gain, &bias, 1, 3, &mut out);
        let mean: Real = out.iter().sum::<Real>() / 3.0;
        assert!(mean.abs() < 1e-12);
        let var: Real = out.iter().map(|&v| v * v).sum::<Real>() / 3.0;
        assert!((var - 1.0).abs() < 2e-5); // eps-induced slack
    }

    #[test]
    fn dwxcorr_delta_kernel_copies_search() {
        let x: Vec<Real> = (0..2 * 3 * 3).map(|i| i as Real).collect();
        let z = vec![1.0, 1.0];
        let mut out = vec![0.0; 2 * 3 * 3];
        dwxcorr_fwd(&x, &z, 2, 3, 3, 1, 1, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn dwxcorr_matches_sliding_window() {
        let mut rng = crate::tensor::rng::stream(&[55]);
        let (c, hx, wx, hz, wz) = (2usize, 5usize, 5usize, 3usize, 3usize);
        let x: Vec<Real> = (0..c * hx * wx).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let z: Vec<Real> = (0..c * hz * wz).map(|_| crate::tensor::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let (oh, ow) = (hx - hz + 1, wx - wz + 1);
        let mut out = vec![0.0; c * oh * ow];
        dwxcorr_fwd(&x, &z, c, hx, wx, hz, wz, &mut out);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for zy in 0..hz {
                        for zx in 0..wz {
                            s += x[(ch * hx + oy + zy) * wx + ox + zx] * z[(ch * hz + zy) * wz + zx];
                        }
                    }
                    assert!((out[(ch * oh + oy) * ow + ox] - s).abs() < 1e-10);
                }
            }
        }
    }
}
