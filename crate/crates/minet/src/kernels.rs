//! Low-level numeric kernels for the layer operations.
//!
//! All kernels run in a fixed loop order so results are bit-reproducible
//! across runs. Inner loops over rows are written against slices so the
//! stride-1 paths vectorize.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// Geometry of a convolution: stride, zero padding, dilation, groups, and
/// (for the transposed direction) output padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub output_padding: (usize, usize),
}

impl ConvMeta {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvMeta {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
            groups: 1,
            output_padding: (0, 0),
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = (output_padding, output_padding);
        self
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output spatial shape of `conv2d`: floor((H + 2p - d(k-1) - 1)/s) + 1.
pub fn conv2d_output_shape(xs: &Shape, ws: &Shape, meta: &ConvMeta) -> Result<Shape> {
    let oh = conv_out_dim(xs[2], ws[2], meta.stride.0, meta.padding.0, meta.dilation.0);
    let ow = conv_out_dim(xs[3], ws[3], meta.stride.1, meta.padding.1, meta.dilation.1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([xs[0], ws[0], oh, ow]),
        _ => Err(Error::EmptyOutput {
            op: "conv2d",
            h: xs[2],
            w: xs[3],
        }),
    }
}

/// Output spatial shape of `conv_transpose2d`:
/// s(H-1) + d(k-1) + 1 - 2p + output_padding.
pub fn conv_transpose2d_output_shape(xs: &Shape, ws: &Shape, meta: &ConvMeta) -> Result<Shape> {
    let dim = |input: usize, k: usize, s: usize, p: usize, d: usize, op: usize| -> Option<usize> {
        let grown = s * (input - 1) + d * (k - 1) + 1 + op;
        if grown <= 2 * p {
            None
        } else {
            Some(grown - 2 * p)
        }
    };
    let oh = dim(
        xs[2],
        ws[2],
        meta.stride.0,
        meta.padding.0,
        meta.dilation.0,
        meta.output_padding.0,
    );
    let ow = dim(
        xs[3],
        ws[3],
        meta.stride.1,
        meta.padding.1,
        meta.dilation.1,
        meta.output_padding.1,
    );
    let cout = ws[1] * meta.groups;
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok([xs[0], cout, oh, ow]),
        _ => Err(Error::EmptyOutput {
            op: "conv_transpose2d",
            h: xs[2],
            w: xs[3],
        }),
    }
}

/// Range `lo..hi` of output indices `o` with `0 <= o*stride + offset < limit`,
/// clamped to `0..out_limit`.
fn valid_range(limit: usize, out_limit: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = limit as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_limit);
    (lo.min(hi), hi)
}

/// Cross-correlation with dilation, stride, groups, and zero padding.
///
/// `x` is `(N, Cin, H, W)`, `w` is `(Cout, Cin/groups, kh, kw)`,
/// `bias` is `Cout` values.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    bias: &[T],
    meta: &ConvMeta,
    os: &Shape,
) -> Vec<T> {
    let (n_b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh_dim, ow_dim) = (os[2], os[3]);
    let cog = cout / meta.groups;
    debug_assert_eq!(cig * meta.groups, cin);

    let (sh, sw) = meta.stride;
    let (ph, pw) = meta.padding;
    let (dh, dw) = meta.dilation;

    let mut out = vec![T::zero(); n_b * cout * oh_dim * ow_dim];
    for n in 0..n_b {
        for co in 0..cout {
            let out_plane = &mut out[(n * cout + co) * oh_dim * ow_dim..][..oh_dim * ow_dim];
            let b = bias[co];
            for v in out_plane.iter_mut() {
                *v = b;
            }
            let grp = co / cog;
            for cil in 0..cig {
                let ci = grp * cig + cil;
                let x_plane = &x[(n * cin + ci) * h * wd..][..h * wd];
                for khi in 0..kh {
                    let off_h = (khi * dh) as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(h, oh_dim, sh, off_h);
                    for kwi in 0..kw {
                        let wv = w[((co * cig + cil) * kh + khi) * kw + kwi];
                        let off_w = (kwi * dw) as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(wd, ow_dim, sw, off_w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * sh) as isize + off_h;
                            let x_row = &x_plane[ih as usize * wd..][..wd];
                            let o_row = &mut out_plane[oh * ow_dim..][..ow_dim];
                            if sw == 1 {
                                let iw0 = (ow_lo as isize + off_w) as usize;
                                let len = ow_hi - ow_lo;
                                for (o, &xv) in o_row[ow_lo..ow_hi]
                                    .iter_mut()
                                    .zip(&x_row[iw0..iw0 + len])
                                {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * sw) as isize + off_w;
                                    o_row[ow] = o_row[ow] + wv * x_row[iw as usize];
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

/// Backward pass of [`conv2d_forward`]. Returns `(dx, dw, db)`; `dx` is
/// skipped when the input does not need a gradient.
pub fn conv2d_backward<T: Scalar>(
    gout: &[T],
    os: &Shape,
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    meta: &ConvMeta,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n_b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh_dim, ow_dim) = (os[2], os[3]);
    let cog = cout / meta.groups;

    let (sh, sw) = meta.stride;
    let (ph, pw) = meta.padding;
    let (dh, dw) = meta.dilation;

    let mut dx = if need_dx {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    let mut dwt = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];

    for n in 0..n_b {
        for co in 0..cout {
            let g_plane = &gout[(n * cout + co) * oh_dim * ow_dim..][..oh_dim * ow_dim];
            let mut acc_b = T::zero();
            for &g in g_plane {
                acc_b = acc_b + g;
            }
            db[co] = db[co] + acc_b;

            let grp = co / cog;
            for cil in 0..cig {
                let ci = grp * cig + cil;
                let x_plane = &x[(n * cin + ci) * h * wd..][..h * wd];
                let dx_base = (n * cin + ci) * h * wd;
                for khi in 0..kh {
                    let off_h = (khi * dh) as isize - ph as isize;
                    let (oh_lo, oh_hi) = valid_range(h, oh_dim, sh, off_h);
                    for kwi in 0..kw {
                        let widx = ((co * cig + cil) * kh + khi) * kw + kwi;
                        let wv = w[widx];
                        let off_w = (kwi * dw) as isize - pw as isize;
                        let (ow_lo, ow_hi) = valid_range(wd, ow_dim, sw, off_w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc_w = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * sh) as isize + off_h) as usize;
                            let g_row = &g_plane[oh * ow_dim..][..ow_dim];
                            let x_row = &x_plane[ih * wd..][..wd];
                            if sw == 1 {
                                let iw0 = (ow_lo as isize + off_w) as usize;
                                let len = ow_hi - ow_lo;
                                for (&g, &xv) in
                                    g_row[ow_lo..ow_hi].iter().zip(&x_row[iw0..iw0 + len])
                                {
                                    acc_w = acc_w + g * xv;
                                }
                                if let Some(d) = dx.as_mut() {
                                    let d_row = &mut d[dx_base + ih * wd..][..wd];
                                    for (dv, &g) in d_row[iw0..iw0 + len]
                                        .iter_mut()
                                        .zip(&g_row[ow_lo..ow_hi])
                                    {
                                        *dv = *dv + wv * g;
                                    }
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * sw) as isize + off_w) as usize;
                                    let g = g_row[ow];
                                    acc_w = acc_w + g * x_row[iw];
                                    if let Some(d) = dx.as_mut() {
                                        d[dx_base + ih * wd + iw] = d[dx_base + ih * wd + iw] + wv * g;
                                    }
                                }
                            }
                        }
                        dwt[widx] = dwt[widx] + acc_w;
                    }
                }
            }
        }
    }
    (dx, dwt, db)
}

/// Fractionally-strided (transposed) convolution: the adjoint of
/// [`conv2d_forward`] with the same geometry, plus a per-output-channel bias.
///
/// `x` is `(N, Cin, H, W)`, `w` is `(Cin, Cout/groups, kh, kw)`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    bias: &[T],
    meta: &ConvMeta,
    os: &Shape,
) -> Vec<T> {
    let (n_b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (_, cog, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let cout = os[1];
    let (oh_dim, ow_dim) = (os[2], os[3]);
    let cig = cin / meta.groups;

    let (sh, sw) = meta.stride;
    let (ph, pw) = meta.padding;
    let (dh, dw) = meta.dilation;

    let mut out = vec![T::zero(); n_b * cout * oh_dim * ow_dim];
    for n in 0..n_b {
        for co in 0..cout {
            let plane = &mut out[(n * cout + co) * oh_dim * ow_dim..][..oh_dim * ow_dim];
            let b = bias[co];
            for v in plane.iter_mut() {
                *v = b;
            }
        }
        for ci in 0..cin {
            let grp = ci / cig;
            let x_plane = &x[(n * cin + ci) * h * wd..][..h * wd];
            for col in 0..cog {
                let co = grp * cog + col;
                let out_base = (n * cout + co) * oh_dim * ow_dim;
                for khi in 0..kh {
                    let off_h = (khi * dh) as isize - ph as isize;
                    // input rows h with 0 <= h*sh + off_h < OH
                    let (h_lo, h_hi) = valid_range(oh_dim, h, sh, off_h);
                    for kwi in 0..kw {
                        let wv = w[((ci * cog + col) * kh + khi) * kw + kwi];
                        let off_w = (kwi * dw) as isize - pw as isize;
                        let (w_lo, w_hi) = valid_range(ow_dim, wd, sw, off_w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        for hy in h_lo..h_hi {
                            let oh = ((hy * sh) as isize + off_h) as usize;
                            let x_row = &x_plane[hy * wd..][..wd];
                            let o_row = &mut out[out_base + oh * ow_dim..][..ow_dim];
                            if sw == 1 {
                                let ow0 = (w_lo as isize + off_w) as usize;
                                let len = w_hi - w_lo;
                                for (o, &xv) in
                                    o_row[ow0..ow0 + len].iter_mut().zip(&x_row[w_lo..w_hi])
                                {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for wp in w_lo..w_hi {
                                    let ow = ((wp * sw) as isize + off_w) as usize;
                                    o_row[ow] = o_row[ow] + wv * x_row[wp];
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

/// Backward pass of [`conv_transpose2d_forward`]. Returns `(dx, dw, db)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    gout: &[T],
    os: &Shape,
    x: &[T],
    xs: &Shape,
    w: &[T],
    ws: &Shape,
    meta: &ConvMeta,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (n_b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (_, cog, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let cout = os[1];
    let (oh_dim, ow_dim) = (os[2], os[3]);
    let cig = cin / meta.groups;

    let (sh, sw) = meta.stride;
    let (ph, pw) = meta.padding;
    let (dh, dw) = meta.dilation;

    let mut dx = if need_dx {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    let mut dwt = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];

    for n in 0..n_b {
        for co in 0..cout {
            let g_plane = &gout[(n * cout + co) * oh_dim * ow_dim..][..oh_dim * ow_dim];
            let mut acc = T::zero();
            for &g in g_plane {
                acc = acc + g;
            }
            db[co] = db[co] + acc;
        }
        for ci in 0..cin {
            let grp = ci / cig;
            let x_plane = &x[(n * cin + ci) * h * wd..][..h * wd];
            let dx_base = (n * cin + ci) * h * wd;
            for col in 0..cog {
                let co = grp * cog + col;
                let g_plane = &gout[(n * cout + co) * oh_dim * ow_dim..][..oh_dim * ow_dim];
                for khi in 0..kh {
                    let off_h = (khi * dh) as isize - ph as isize;
                    let (h_lo, h_hi) = valid_range(oh_dim, h, sh, off_h);
                    for kwi in 0..kw {
                        let widx = ((ci * cog + col) * kh + khi) * kw + kwi;
                        let wv = w[widx];
                        let off_w = (kwi * dw) as isize - pw as isize;
                        let (w_lo, w_hi) = valid_range(ow_dim, wd, sw, off_w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let mut acc_w = T::zero();
                        for hy in h_lo..h_hi {
                            let oh = ((hy * sh) as isize + off_h) as usize;
                            let g_row = &g_plane[oh * ow_dim..][..ow_dim];
                            let x_row = &x_plane[hy * wd..][..wd];
                            if sw == 1 {
                                let ow0 = (w_lo as isize + off_w) as usize;
                                let len = w_hi - w_lo;
                                for (&xv, &g) in
                                    x_row[w_lo..w_hi].iter().zip(&g_row[ow0..ow0 + len])
                                {
                                    acc_w = acc_w + xv * g;
                                }
                                if let Some(d) = dx.as_mut() {
                                    let d_row = &mut d[dx_base + hy * wd..][..wd];
                                    for (dv, &g) in
                                        d_row[w_lo..w_hi].iter_mut().zip(&g_row[ow0..ow0 + len])
                                    {
                                        *dv = *dv + wv * g;
                                    }
                                }
                            } else {
                                for wp in w_lo..w_hi {
                                    let ow = ((wp * sw) as isize + off_w) as usize;
                                    let g = g_row[ow];
                                    acc_w = acc_w + x_row[wp] * g;
                                    if let Some(d) = dx.as_mut() {
                                        d[dx_base + hy * wd + wp] =
                                            d[dx_base + hy * wd + wp] + wv * g;
                                    }
                                }
                            }
                        }
                        dwt[widx] = dwt[widx] + acc_w;
                    }
                }
            }
        }
    }
    (dx, dwt, db)
}

/// Per-(sample, channel) normalization over the H×W plane with biased
/// variance, followed by a learnable affine. Returns the output together
/// with the per-plane mean and inverse standard deviation needed by the
/// backward pass.
pub fn instance_norm_forward<T: Scalar>(
    x: &[T],
    xs: &Shape,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mus = vec![T::zero(); n_b * c];
    let mut inv_stds = vec![T::zero(); n_b * c];

    for n in 0..n_b {
        for ci in 0..c {
            let p = (n * c + ci) * m;
            let plane = &x[p..p + m];
            let mut sum = T::zero();
            for &v in plane {
                sum = sum + v;
            }
            let mu = sum / mf;
            let mut var = T::zero();
            for &v in plane {
                let d = v - mu;
                var = var + d * d;
            }
            var = var / mf;
            let inv = T::one() / (var + eps).sqrt();
            mus[n * c + ci] = mu;
            inv_stds[n * c + ci] = inv;
            let (g, b) = (gamma[ci], beta[ci]);
            let o = &mut out[p..p + m];
            for (ov, &v) in o.iter_mut().zip(plane) {
                *ov = (v - mu) * inv * g + b;
            }
        }
    }
    (out, mus, inv_stds)
}

/// Backward pass of [`instance_norm_forward`]. Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    xs: &Shape,
    gamma: &[T],
    mus: &[T],
    inv_stds: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];

    for n in 0..n_b {
        for ci in 0..c {
            let p = (n * c + ci) * m;
            let plane = &x[p..p + m];
            let g_plane = &gout[p..p + m];
            let mu = mus[n * c + ci];
            let inv = inv_stds[n * c + ci];
            let ga = gamma[ci];

            let mut sum_g = T::zero();
            let mut sum_g_xhat = T::zero();
            for (&g, &v) in g_plane.iter().zip(plane) {
                let xhat = (v - mu) * inv;
                sum_g = sum_g + g;
                sum_g_xhat = sum_g_xhat + g * xhat;
            }
            dbeta[ci] = dbeta[ci] + sum_g;
            dgamma[ci] = dgamma[ci] + sum_g_xhat;

            // dxhat = g * gamma; means of dxhat and dxhat*xhat then recenter
            let mean_dxhat = ga * sum_g / mf;
            let mean_dxhat_xhat = ga * sum_g_xhat / mf;
            let d = &mut dx[p..p + m];
            for ((dv, &g), &v) in d.iter_mut().zip(g_plane).zip(plane) {
                let xhat = (v - mu) * inv;
                *dv = inv * (g * ga - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean over the H×W plane per (sample, channel): `(N,C,H,W) -> (N,C,1,1)`.
pub fn global_avg_pool_forward<T: Scalar>(x: &[T], xs: &Shape) -> Vec<T> {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut out = vec![T::zero(); n_b * c];
    for nc in 0..n_b * c {
        let plane = &x[nc * m..(nc + 1) * m];
        let mut sum = T::zero();
        for &v in plane {
            sum = sum + v;
        }
        out[nc] = sum / mf;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(gout: &[T], xs: &Shape) -> Vec<T> {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut dx = vec![T::zero(); n_b * c * m];
    for nc in 0..n_b * c {
        let g = gout[nc] / mf;
        for dv in &mut dx[nc * m..(nc + 1) * m] {
            *dv = g;
        }
    }
    dx
}

/// Fully connected layer on channel descriptors: `x` is `(N, Cin, 1, 1)`,
/// `w` is `Cout x Cin` row-major, `bias` is `Cout`.
pub fn linear_forward<T: Scalar>(x: &[T], n_b: usize, cin: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let cout = bias.len();
    let mut out = vec![T::zero(); n_b * cout];
    for n in 0..n_b {
        let xr = &x[n * cin..(n + 1) * cin];
        for co in 0..cout {
            let wr = &w[co * cin..(co + 1) * cin];
            let mut acc = bias[co];
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc = acc + wv * xv;
            }
            out[n * cout + co] = acc;
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    n_b: usize,
    cin: usize,
    cout: usize,
    w: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n_b * cin];
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for n in 0..n_b {
        let xr = &x[n * cin..(n + 1) * cin];
        let gr = &gout[n * cout..(n + 1) * cout];
        let dxr = &mut dx[n * cin..(n + 1) * cin];
        for co in 0..cout {
            let g = gr[co];
            db[co] = db[co] + g;
            let wr = &w[co * cin..(co + 1) * cin];
            let dwr = &mut dw[co * cin..(co + 1) * cin];
            for ci in 0..cin {
                dxr[ci] = dxr[ci] + g * wr[ci];
                dwr[ci] = dwr[ci] + g * xr[ci];
            }
        }
    }
    (dx, dw, db)
}

/// Softmax across the channel axis, per (sample, pixel).
pub fn softmax_channels_forward<T: Scalar>(x: &[T], xs: &Shape) -> Vec<T> {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..n_b {
        for p in 0..m {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                let v = x[(n * c + ci) * m + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (x[(n * c + ci) * m + p] - max).exp();
                out[(n * c + ci) * m + p] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                let idx = (n * c + ci) * m + p;
                out[idx] = out[idx] / sum;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(gout: &[T], y: &[T], xs: &Shape) -> Vec<T> {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for n in 0..n_b {
        for p in 0..m {
            let mut dot = T::zero();
            for ci in 0..c {
                let idx = (n * c + ci) * m + p;
                dot = dot + gout[idx] * y[idx];
            }
            for ci in 0..c {
                let idx = (n * c + ci) * m + p;
                dx[idx] = y[idx] * (gout[idx] - dot);
            }
        }
    }
    dx
}
