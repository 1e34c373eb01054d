//! Raw numeric routines behind the tape operations.
//!
//! Everything here is single-threaded and iterates in a fixed order, so all
//! results are bitwise deterministic for identical inputs. Convolutions are
//! lowered to im2col plus GEMM; channel statistics accumulate in `f64`
//! regardless of the working precision.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of one convolution: shapes, stride and padding, all in elements.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(Error::invalid("conv", format!("stride {:?} has a zero entry", stride)));
            }
            if in_dims[a] + 2 * padding[a] < kernel[a] {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "spatial axis {}: input {} + 2*padding {} is smaller than kernel {}",
                        a, in_dims[a], padding[a], kernel[a]
                    ),
                ));
            }
        }
        let out_dims = [
            (in_dims[0] + 2 * padding[0] - kernel[0]) / stride[0] + 1,
            (in_dims[1] + 2 * padding[1] - kernel[1]) / stride[1] + 1,
            (in_dims[2] + 2 * padding[2] - kernel[2]) / stride[2] + 1,
        ];
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            in_dims,
            kernel,
            stride,
            padding,
            out_dims,
        })
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// A 1x1x1 stride-1 unpadded convolution is a plain channel mixing; the
    /// im2col matrix would equal the input, so it is skipped entirely.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

// ---------------------------------------------------------------------------
// GEMM wrappers
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn gemm_strided<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[S],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Largest offset each operand can reach; guards the unsafe call below.
    let reach = |off: usize, rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        let r = off as isize + (rows as isize - 1) * rs + (cols as isize - 1) * cs;
        debug_assert!(r >= 0);
        r as usize
    };
    assert!(k == 0 || reach(a_off, m, k, rsa, csa) < a.len());
    assert!(k == 0 || reach(b_off, k, n, rsb, csb) < b.len());
    assert!(reach(c_off, m, n, rsc, csc) < c.len());
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}

/// `c = alpha * a @ b + beta * c` with all operands dense row-major.
fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, alpha: S, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    gemm_strided(
        m, k, n, alpha, a, 0, k as isize, 1, b, 0, n as isize, 1, beta, c, 0, n as isize, 1,
    );
}

/// `c = alpha * a @ b^T + beta * c`; `b` is stored row-major as `n x k`.
fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, alpha: S, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    gemm_strided(
        m, k, n, alpha, a, 0, k as isize, 1, b, 0, 1, k as isize, beta, c, 0, n as isize, 1,
    );
}

/// `c = alpha * a^T @ b + beta * c`; `a` is stored row-major as `k x m`.
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, alpha: S, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    gemm_strided(
        m, k, n, alpha, a, 0, 1, m as isize, b, 0, n as isize, 1, beta, c, 0, n as isize, 1,
    );
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Unfolds one batch item into the `patch_len x out_spatial` im2col matrix.
/// Out-of-bounds taps (padding region) become zeros.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.out_spatial();
    debug_assert_eq!(x.len(), g.cin * g.in_spatial());
    debug_assert_eq!(cols.len(), g.patch_len() * n);

    let mut row = 0usize;
    for ci in 0..g.cin {
        let plane = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst_row = &mut cols[row * n..(row + 1) * n];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        let dst_z = &mut dst_row[oz * oh * ow..(oz + 1) * oh * ow];
                        if iz < 0 || iz >= d as isize {
                            dst_z.fill(S::ZERO);
                            continue;
                        }
                        let src_z = &plane[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let dst_y = &mut dst_z[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= h as isize {
                                dst_y.fill(S::ZERO);
                                continue;
                            }
                            let src_y = &src_z[iy as usize * w..(iy as usize + 1) * w];
                            if sw == 1 {
                                // Contiguous run: x index = ox + (kx - pw).
                                let shift = kx as isize - pw as isize;
                                let lo = (-shift).max(0).min(ow as isize) as usize;
                                let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                                dst_y[..lo].fill(S::ZERO);
                                if hi > lo {
                                    let src_lo = (lo as isize + shift) as usize;
                                    dst_y[lo..hi].copy_from_slice(&src_y[src_lo..src_lo + (hi - lo)]);
                                }
                                dst_y[hi..].fill(S::ZERO);
                            } else {
                                for (ox, out) in dst_y.iter_mut().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    *out = if ix < 0 || ix >= w as isize {
                                        S::ZERO
                                    } else {
                                        src_y[ix as usize]
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Transpose of `im2col`: scatter-adds a column matrix back onto the input
/// grid. The destination must be pre-zeroed by the caller.
fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.out_spatial();

    let mut row = 0usize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src_row = &cols[row * n..(row + 1) * n];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let src_z = &src_row[oz * oh * ow..(oz + 1) * oh * ow];
                        let dst_z = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_y = &src_z[oy * ow..(oy + 1) * ow];
                            let dst_y = dst_z + iy as usize * w;
                            if sw == 1 {
                                let shift = kx as isize - pw as isize;
                                let lo = (-shift).max(0).min(ow as isize) as usize;
                                let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                                if hi > lo {
                                    let dst_lo = (dst_y as isize + lo as isize + shift) as usize;
                                    let dst = &mut plane[dst_lo..dst_lo + (hi - lo)];
                                    for (dv, sv) in dst.iter_mut().zip(&src_y[lo..hi]) {
                                        *dv = *dv + *sv;
                                    }
                                }
                            } else {
                                for (ox, sv) in src_y.iter().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        let at = dst_y + ix as usize;
                                        plane[at] = plane[at] + *sv;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Convolution forward: `y[b] = w @ im2col(x[b]) + bias`.
pub fn conv_forward<S: Scalar>(x: &[S], w: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
    let n = g.out_spatial();
    let k = g.patch_len();
    let in_len = g.cin * g.in_spatial();
    let out_len = g.cout * n;
    let mut y = vec![S::ZERO; g.batch * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::ZERO; k * n] };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm_nn(g.cout, k, n, S::ONE, w, xb, S::ZERO, yb);
        } else {
            im2col(xb, g, &mut cols);
            gemm_nn(g.cout, k, n, S::ONE, w, &cols, S::ZERO, yb);
        }
        for co in 0..g.cout {
            let bv = bias[co];
            for v in &mut yb[co * n..(co + 1) * n] {
                *v = *v + bv;
            }
        }
    }
    y
}

/// Gradients of the convolution. Each requested gradient is freshly
/// allocated; the caller accumulates.
pub fn conv_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let n = g.out_spatial();
    let k = g.patch_len();
    let in_len = g.cin * g.in_spatial();
    let out_len = g.cout * n;

    let mut db = want_db.then(|| vec![S::ZERO; g.cout]);
    if let Some(db) = db.as_mut() {
        for b in 0..g.batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            for co in 0..g.cout {
                let mut acc = 0.0f64;
                for v in &dyb[co * n..(co + 1) * n] {
                    acc += v.as_f64();
                }
                db[co] = db[co] + S::from_f64(acc);
            }
        }
    }

    let mut dw = want_dw.then(|| vec![S::ZERO; g.cout * k]);
    let mut dx = want_dx.then(|| vec![S::ZERO; g.batch * in_len]);
    let needs_cols = !g.is_pointwise() && (want_dw || want_dx);
    let mut cols = if needs_cols { vec![S::ZERO; k * n] } else { Vec::new() };
    let mut dcols = if want_dx && !g.is_pointwise() { vec![S::ZERO; k * n] } else { Vec::new() };

    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if !g.is_pointwise() && want_dw {
            im2col(xb, g, &mut cols);
        }
        if let Some(dw) = dw.as_mut() {
            let cols_b: &[S] = if g.is_pointwise() { xb } else { &cols };
            gemm_nt(g.cout, n, k, S::ONE, dyb, cols_b, S::ONE, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm_tn(k, g.cout, n, S::ONE, w, dyb, S::ZERO, dxb);
            } else {
                gemm_tn(k, g.cout, n, S::ONE, w, dyb, S::ZERO, &mut dcols);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Transposed convolution, kernel 1x2x2, stride 1x2x2 (in-plane doubling)
// ---------------------------------------------------------------------------

/// Weight layout `[cin, cout, 1, 2, 2]`. Every output voxel receives exactly
/// one kernel tap, so the op decomposes into four phase GEMMs.
pub fn conv_transpose_inplane_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    batch: usize,
    cin: usize,
    cout: usize,
    in_dims: [usize; 3],
) -> Vec<S> {
    let [d, h, wd] = in_dims;
    let n = d * h * wd;
    let (h2, w2) = (2 * h, 2 * wd);
    let in_len = cin * n;
    let out_len = cout * d * h2 * w2;
    let mut y = vec![S::ZERO; batch * out_len];
    let mut phase_buf = vec![S::ZERO; cout * n];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        for ky in 0..2 {
            for kx in 0..2 {
                let phase = ky * 2 + kx;
                // phase_buf = w[:, :, 0, ky, kx]^T (cout x cin) @ xb (cin x n)
                gemm_strided(
                    cout,
                    cin,
                    n,
                    S::ONE,
                    w,
                    phase,
                    4,
                    (cout * 4) as isize,
                    xb,
                    0,
                    n as isize,
                    1,
                    S::ZERO,
                    &mut phase_buf,
                    0,
                    n as isize,
                    1,
                );
                for co in 0..cout {
                    let bv = bias[co];
                    for dz in 0..d {
                        for iy in 0..h {
                            let src = &phase_buf[(co * d + dz) * h * wd + iy * wd..][..wd];
                            let dst_base = ((co * d + dz) * h2 + (2 * iy + ky)) * w2 + kx;
                            for (ix, sv) in src.iter().enumerate() {
                                yb[dst_base + 2 * ix] = *sv + bv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_inplane_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    batch: usize,
    cin: usize,
    cout: usize,
    in_dims: [usize; 3],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let [d, h, wd] = in_dims;
    let n = d * h * wd;
    let (h2, w2) = (2 * h, 2 * wd);
    let in_len = cin * n;
    let out_len = cout * d * h2 * w2;

    let mut db = want_db.then(|| vec![S::ZERO; cout]);
    if let Some(db) = db.as_mut() {
        for b in 0..batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            for co in 0..cout {
                let mut acc = 0.0f64;
                for v in &dyb[co * d * h2 * w2..(co + 1) * d * h2 * w2] {
                    acc += v.as_f64();
                }
                db[co] = db[co] + S::from_f64(acc);
            }
        }
    }

    let mut dx = want_dx.then(|| vec![S::ZERO; batch * in_len]);
    let mut dw = want_dw.then(|| vec![S::ZERO; cin * cout * 4]);
    if !(want_dx || want_dw) {
        return (dx, dw, db);
    }

    let mut dyp = vec![S::ZERO; cout * n];
    let mut dwp = vec![S::ZERO; cin * cout];
    for ky in 0..2 {
        for kx in 0..2 {
            let phase = ky * 2 + kx;
            if want_dw {
                dwp.fill(S::ZERO);
            }
            for b in 0..batch {
                let dyb = &dy[b * out_len..(b + 1) * out_len];
                // Gather the phase view of dy: dyp[co, z, y, x] = dy[co, z, 2y+ky, 2x+kx].
                for co in 0..cout {
                    for dz in 0..d {
                        for iy in 0..h {
                            let src_base = ((co * d + dz) * h2 + (2 * iy + ky)) * w2 + kx;
                            let dst = &mut dyp[(co * d + dz) * h * wd + iy * wd..][..wd];
                            for (ix, dv) in dst.iter_mut().enumerate() {
                                *dv = dyb[src_base + 2 * ix];
                            }
                        }
                    }
                }
                if want_dw {
                    let xb = &x[b * in_len..(b + 1) * in_len];
                    // dwp (cin x cout) += xb (cin x n) @ dyp^T (n x cout)
                    gemm_nt(cin, n, cout, S::ONE, xb, &dyp, S::ONE, &mut dwp);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                    // dxb (cin x n) += w_phase (cin x cout) @ dyp (cout x n)
                    gemm_strided(
                        cin,
                        cout,
                        n,
                        S::ONE,
                        w,
                        phase,
                        (cout * 4) as isize,
                        4,
                        &dyp,
                        0,
                        n as isize,
                        1,
                        S::ONE,
                        dxb,
                        0,
                        n as isize,
                        1,
                    );
                }
            }
            if let Some(dw) = dw.as_mut() {
                for ci in 0..cin {
                    for co in 0..cout {
                        dw[(ci * cout + co) * 4 + phase] = dwp[ci * cout + co];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// 1x2x2 max pooling; returns outputs plus the flat input index of each
/// selected element (first occurrence wins on ties).
pub fn max_pool_inplane_forward<S: Scalar>(
    x: &[S],
    shape: [usize; 5],
) -> (Vec<S>, Vec<usize>) {
    let [b, c, d, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![S::ZERO; b * c * d * oh * ow];
    let mut arg = vec![0usize; y.len()];
    let mut oi = 0usize;
    for bc in 0..b * c {
        for dz in 0..d {
            let base = (bc * d + dz) * h * w;
            for hy in 0..oh {
                for wx in 0..ow {
                    let i00 = base + (2 * hy) * w + 2 * wx;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y[oi] = x[best];
                    arg[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_inplane_backward<S: Scalar>(dy: &[S], arg: &[usize], in_len: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; in_len];
    for (v, &i) in dy.iter().zip(arg.iter()) {
        dx[i] = dx[i] + *v;
    }
    dx
}

/// Spatial axis selector for the mean projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialAxis {
    Depth,
    Height,
    Width,
}

/// Mean over the two spatial axes other than `keep`; kept axis retains its
/// extent, reduced axes collapse to 1.
pub fn pool_mean_forward<S: Scalar>(x: &[S], shape: [usize; 5], keep: SpatialAxis) -> (Vec<S>, [usize; 5]) {
    let [b, c, d, h, w] = shape;
    let (out_shape, kept) = match keep {
        SpatialAxis::Depth => ([b, c, d, 1, 1], d),
        SpatialAxis::Height => ([b, c, 1, h, 1], h),
        SpatialAxis::Width => ([b, c, 1, 1, w], w),
    };
    let mut y = vec![S::ZERO; b * c * kept];
    let inv = 1.0f64 / (d * h * w / kept) as f64;
    for bc in 0..b * c {
        let plane = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let out = &mut y[bc * kept..(bc + 1) * kept];
        match keep {
            SpatialAxis::Depth => {
                for (dz, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for v in &plane[dz * h * w..(dz + 1) * h * w] {
                        acc += v.as_f64();
                    }
                    *o = S::from_f64(acc * inv);
                }
            }
            SpatialAxis::Height => {
                let mut acc = vec![0.0f64; h];
                for dz in 0..d {
                    for hy in 0..h {
                        for v in &plane[(dz * h + hy) * w..(dz * h + hy + 1) * w] {
                            acc[hy] += v.as_f64();
                        }
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = S::from_f64(a * inv);
                }
            }
            SpatialAxis::Width => {
                let mut acc = vec![0.0f64; w];
                for dz in 0..d {
                    for hy in 0..h {
                        let row = &plane[(dz * h + hy) * w..(dz * h + hy + 1) * w];
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = S::from_f64(a * inv);
                }
            }
        }
    }
    (y, out_shape)
}

pub fn pool_mean_backward<S: Scalar>(dy: &[S], shape: [usize; 5], keep: SpatialAxis) -> Vec<S> {
    let [b, c, d, h, w] = shape;
    let kept = match keep {
        SpatialAxis::Depth => d,
        SpatialAxis::Height => h,
        SpatialAxis::Width => w,
    };
    let inv = S::from_f64(1.0 / (d * h * w / kept) as f64);
    let mut dx = vec![S::ZERO; b * c * d * h * w];
    for bc in 0..b * c {
        let src = &dy[bc * kept..(bc + 1) * kept];
        let plane = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
        for dz in 0..d {
            for hy in 0..h {
                let row = &mut plane[(dz * h + hy) * w..(dz * h + hy + 1) * w];
                match keep {
                    SpatialAxis::Depth => {
                        let g = src[dz] * inv;
                        for v in row {
                            *v = g;
                        }
                    }
                    SpatialAxis::Height => {
                        let g = src[hy] * inv;
                        for v in row {
                            *v = g;
                        }
                    }
                    SpatialAxis::Width => {
                        for (wx, v) in row.iter_mut().enumerate() {
                            *v = src[wx] * inv;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnTrainOut<S: Scalar> {
    pub y: Vec<S>,
    pub mean: Vec<S>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Train-mode forward: normalizes by batch statistics computed over
/// `(batch, depth, height, width)` per channel. Statistics accumulate in f64.
pub fn bn_forward_train<S: Scalar>(
    x: &[S],
    shape: [usize; 5],
    gamma: &[S],
    beta: &[S],
) -> BnTrainOut<S> {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let n = (b * spatial) as f64;
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    let mut inv_std = vec![S::ZERO; c];
    let mut y = vec![S::ZERO; x.len()];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for bi in 0..b {
            let blk = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for v in blk {
                sum += v.as_f64();
            }
        }
        let m = sum / n;
        let mut sq = 0.0f64;
        for bi in 0..b {
            let blk = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for v in blk {
                let e = v.as_f64() - m;
                sq += e * e;
            }
        }
        let v = sq / n;
        let istd = 1.0 / (v + BN_EPS).sqrt();
        mean[ci] = S::from_f64(m);
        var[ci] = S::from_f64(v);
        inv_std[ci] = S::from_f64(istd);
        let g = gamma[ci].as_f64();
        let bt = beta[ci].as_f64();
        for bi in 0..b {
            let src = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dst = &mut y[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for (o, xv) in dst.iter_mut().zip(src) {
                *o = S::from_f64((xv.as_f64() - m) * istd * g + bt);
            }
        }
    }
    BnTrainOut { y, mean, var, inv_std }
}

pub fn bn_forward_eval<S: Scalar>(
    x: &[S],
    shape: [usize; 5],
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
) -> Vec<S> {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let mut y = vec![S::ZERO; x.len()];
    for ci in 0..c {
        let m = running_mean[ci].as_f64();
        let istd = 1.0 / (running_var[ci].as_f64() + BN_EPS).sqrt();
        let g = gamma[ci].as_f64();
        let bt = beta[ci].as_f64();
        for bi in 0..b {
            let src = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dst = &mut y[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for (o, xv) in dst.iter_mut().zip(src) {
                *o = S::from_f64((xv.as_f64() - m) * istd * g + bt);
            }
        }
    }
    y
}

/// Train-mode backward. `mean` / `inv_std` are the saved batch statistics.
pub fn bn_backward_train<S: Scalar>(
    x: &[S],
    shape: [usize; 5],
    gamma: &[S],
    dy: &[S],
    mean: &[S],
    inv_std: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let n = (b * spatial) as f64;
    let mut dx = vec![S::ZERO; x.len()];
    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    for ci in 0..c {
        let m = mean[ci].as_f64();
        let istd = inv_std[ci].as_f64();
        let mut s1 = 0.0f64; // sum dy
        let mut s2 = 0.0f64; // sum dy * xhat
        for bi in 0..b {
            let xs = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dys = &dy[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for (xv, dv) in xs.iter().zip(dys) {
                let xhat = (xv.as_f64() - m) * istd;
                s1 += dv.as_f64();
                s2 += dv.as_f64() * xhat;
            }
        }
        dgamma[ci] = S::from_f64(s2);
        dbeta[ci] = S::from_f64(s1);
        let g = gamma[ci].as_f64();
        let k1 = s1 / n;
        let k2 = s2 / n;
        for bi in 0..b {
            let xs = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dys = &dy[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dxs = &mut dx[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for ((xv, dv), ov) in xs.iter().zip(dys).zip(dxs.iter_mut()) {
                let xhat = (xv.as_f64() - m) * istd;
                *ov = S::from_f64(g * istd * (dv.as_f64() - k1 - xhat * k2));
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode backward: the running statistics are constants.
pub fn bn_backward_eval<S: Scalar>(
    x: &[S],
    shape: [usize; 5],
    gamma: &[S],
    dy: &[S],
    running_mean: &[S],
    running_var: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let mut dx = vec![S::ZERO; x.len()];
    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    for ci in 0..c {
        let m = running_mean[ci].as_f64();
        let istd = 1.0 / (running_var[ci].as_f64() + BN_EPS).sqrt();
        let g = gamma[ci].as_f64();
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for bi in 0..b {
            let xs = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dys = &dy[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            let dxs = &mut dx[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for ((xv, dv), ov) in xs.iter().zip(dys).zip(dxs.iter_mut()) {
                let dvf = dv.as_f64();
                s1 += dvf;
                s2 += dvf * (xv.as_f64() - m) * istd;
                *ov = S::from_f64(dvf * g * istd);
            }
        }
        dgamma[ci] = S::from_f64(s2);
        dbeta[ci] = S::from_f64(s1);
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Softmax over the channel axis
// ---------------------------------------------------------------------------

/// Max-subtraction stabilized softmax across channels, per voxel.
pub fn softmax_channels_forward<S: Scalar>(x: &[S], shape: [usize; 5]) -> Vec<S> {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let mut y = vec![S::ZERO; x.len()];
    for bi in 0..b {
        let base = bi * c * spatial;
        for s in 0..spatial {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * spatial + s].as_f64());
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = (x[base + ci * spatial + s].as_f64() - m).exp();
                y[base + ci * spatial + s] = S::from_f64(e);
                sum += e;
            }
            let inv = 1.0 / sum;
            for ci in 0..c {
                let at = base + ci * spatial + s;
                y[at] = S::from_f64(y[at].as_f64() * inv);
            }
        }
    }
    y
}

pub fn softmax_channels_backward<S: Scalar>(y: &[S], dy: &[S], shape: [usize; 5]) -> Vec<S> {
    let [b, c, d, h, w] = shape;
    let spatial = d * h * w;
    let mut dx = vec![S::ZERO; y.len()];
    for bi in 0..b {
        let base = bi * c * spatial;
        for s in 0..spatial {
            let mut dot = 0.0f64;
            for ci in 0..c {
                let at = base + ci * spatial + s;
                dot += dy[at].as_f64() * y[at].as_f64();
            }
            for ci in 0..c {
                let at = base + ci * spatial + s;
                dx[at] = S::from_f64(y[at].as_f64() * (dy[at].as_f64() - dot));
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Broadcast / reduce between 5-d shapes
// ---------------------------------------------------------------------------

fn strides5(shape: &[usize; 5]) -> [usize; 5] {
    let mut s = [0usize; 5];
    let mut acc = 1usize;
    for a in (0..5).rev() {
        s[a] = acc;
        acc *= shape[a];
    }
    s
}

/// Repeats size-1 axes of `from` up to `to`. Axes must match or be 1.
pub fn broadcast_forward<S: Scalar>(x: &[S], from: [usize; 5], to: [usize; 5]) -> Vec<S> {
    let src_strides = strides5(&from);
    let mut eff = [0usize; 5];
    for a in 0..5 {
        eff[a] = if from[a] == 1 { 0 } else { src_strides[a] };
    }
    let mut y = vec![S::ZERO; to.iter().product()];
    let mut oi = 0usize;
    for i0 in 0..to[0] {
        let b0 = i0 * eff[0];
        for i1 in 0..to[1] {
            let b1 = b0 + i1 * eff[1];
            for i2 in 0..to[2] {
                let b2 = b1 + i2 * eff[2];
                for i3 in 0..to[3] {
                    let b3 = b2 + i3 * eff[3];
                    if eff[4] == 0 {
                        let v = x[b3];
                        for o in &mut y[oi..oi + to[4]] {
                            *o = v;
                        }
                    } else {
                        y[oi..oi + to[4]].copy_from_slice(&x[b3..b3 + to[4]]);
                    }
                    oi += to[4];
                }
            }
        }
    }
    y
}

/// Adjoint of `broadcast_forward`: sums gradients over the repeated axes.
pub fn broadcast_backward<S: Scalar>(dy: &[S], from: [usize; 5], to: [usize; 5]) -> Vec<S> {
    let src_strides = strides5(&from);
    let mut eff = [0usize; 5];
    for a in 0..5 {
        eff[a] = if from[a] == 1 { 0 } else { src_strides[a] };
    }
    let mut dx = vec![S::ZERO; from.iter().product()];
    let mut oi = 0usize;
    for i0 in 0..to[0] {
        let b0 = i0 * eff[0];
        for i1 in 0..to[1] {
            let b1 = b0 + i1 * eff[1];
            for i2 in 0..to[2] {
                let b2 = b1 + i2 * eff[2];
                for i3 in 0..to[3] {
                    let b3 = b2 + i3 * eff[3];
                    if eff[4] == 0 {
                        let mut acc = dx[b3];
                        for v in &dy[oi..oi + to[4]] {
                            acc = acc + *v;
                        }
                        dx[b3] = acc;
                    } else {
                        for (d, v) in dx[b3..b3 + to[4]].iter_mut().zip(&dy[oi..oi + to[4]]) {
                            *d = *d + *v;
                        }
                    }
                    oi += to[4];
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
    fn gemm_nn_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm_nn(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_nt_and_tn_match_manual_transpose() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 2.0, -1.0, 0.5, 1.0]; // 2x3, used as 3x2 transpose
        let mut c = [0.0f64; 4];
        gemm_nt(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        // a @ b^T
        assert_eq!(c, [7.0, 3.0, 16.0, 4.5]);
        let mut c2 = [0.0f64; 9];
        gemm_tn(3, 2, 3, 1.0, &a, &b, 0.0, &mut c2);
        // a^T (3x2) @ b (2x3)
        assert_eq!(c2, [1.0 - 4.0, 2.0, 2.0 + 4.0, 2.0 - 5.0, 2.5, 4.0 + 5.0, 3.0 - 6.0, 3.0, 6.0 + 6.0]);
    }

    #[test]
    fn im2col_identity_for_pointwise_geometry() {
        let g = ConvGeom::new(1, 2, 3, [2, 2, 2], [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        assert!(g.is_pointwise());
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut cols = vec![0.0f32; g.patch_len() * g.out_spatial()];
        im2col(&x, &g, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn conv_same_padding_ones_kernel_counts_neighbors() {
        // All-ones 5x5 image, all-ones 3x3 kernel, same padding: center 9, corner 4.
        let g = ConvGeom::new(1, 1, 1, [1, 5, 5], [1, 3, 3], [1, 1, 1], [0, 1, 1]).unwrap();
        let x = vec![1.0f32; 25];
        let w = vec![1.0f32; 9];
        let y = conv_forward(&x, &w, &[0.0], &g);
        assert_eq!(g.out_dims, [1, 5, 5]);
        assert_eq!(y[12], 9.0); // center
        assert_eq!(y[0], 4.0); // corner
        assert_eq!(y[2], 6.0); // edge
    }

    #[test]
    fn conv_stride_two_downsamples() {
        let g = ConvGeom::new(1, 1, 1, [1, 4, 4], [1, 1, 1], [1, 2, 2], [0, 0, 0]).unwrap();
        assert_eq!(g.out_dims, [1, 2, 2]);
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let y = conv_forward(&x, &[1.0], &[0.0], &g);
        assert_eq!(y, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random data: the two linear
        // maps are transposes of each other.
        let g = ConvGeom::new(1, 2, 1, [3, 4, 4], [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        let nx = g.cin * g.in_spatial();
        let nc = g.patch_len() * g.out_spatial();
        let x: Vec<f64> = (0..nx).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let c: Vec<f64> = (0..nc).map(|i| ((i * 53 + 7) % 23) as f64 - 11.0).collect();
        let mut cols = vec![0.0f64; nc];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0f64; nx];
        col2im_add(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_conv_doubles_inplane_dims() {
        let (cin, cout) = (2, 3);
        let x = vec![1.0f32; cin * 2 * 2 * 2];
        let w = vec![0.5f32; cin * cout * 4];
        let b = vec![0.25f32; cout];
        let y = conv_transpose_inplane_forward(&x, &w, &b, 1, cin, cout, [2, 2, 2]);
        assert_eq!(y.len(), cout * 2 * 4 * 4);
        // Each output receives exactly one tap per input channel: 2 * 0.5 + bias.
        assert!(y.iter().all(|&v| (v - 1.25).abs() < 1e-6));
    }

    #[test]
    fn max_pool_selects_first_on_ties() {
        let x = vec![
            1.0f32, 1.0, //
            1.0, 1.0,
        ];
        let (y, arg) = max_pool_inplane_forward(&x, [1, 1, 1, 2, 2]);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pool_mean_keep_height() {
        // 1x1x1x2x2 grid [[1,2],[3,4]]: keeping H averages over D and W.
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let (y, shape) = pool_mean_forward(&x, [1, 1, 1, 2, 2], SpatialAxis::Height);
        assert_eq!(shape, [1, 1, 1, 2, 1]);
        assert_eq!(y, vec![1.5, 3.5]);
    }

    #[test]
    fn bn_train_two_values_normalize_to_unit() {
        // Per-channel values {1, 3}: mean 2, population var 1.
        let x = vec![1.0f32, 3.0];
        let out = bn_forward_train(&x, [2, 1, 1, 1, 1], &[1.0], &[0.0]);
        assert!((out.y[0] + 1.0).abs() < 1e-4);
        assert!((out.y[1] - 1.0).abs() < 1e-4);
        assert_eq!(out.mean, vec![2.0]);
        assert_eq!(out.var, vec![1.0]);
    }

    #[test]
    fn bn_eval_identity_with_unit_running_stats() {
        let x = vec![-0.5f32, 1.25, 3.0, -2.0];
        let y = bn_forward_eval(&x, [1, 1, 1, 2, 2], &[1.0], &[0.0], &[0.0], &[1.0]);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_two_channel_example() {
        // Logits (0, ln 3) per voxel -> probabilities (0.25, 0.75).
        let x = vec![0.0f32, (3.0f32).ln()];
        let y = softmax_channels_forward(&x, [1, 2, 1, 1, 1]);
        assert!((y[0] - 0.25).abs() < 1e-6);
        assert!((y[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let from = [1usize, 1, 2, 1, 3];
        let to = [2usize, 2, 2, 2, 3];
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let y = broadcast_forward(&x, from, to);
        assert_eq!(y.len(), 48);
        let dy = vec![1.0f64; 48];
        let dx = broadcast_backward(&dy, from, to);
        // Each source element is repeated 2*2*2 = 8 times.
        assert!(dx.iter().all(|&v| v == 8.0));
    }
}
