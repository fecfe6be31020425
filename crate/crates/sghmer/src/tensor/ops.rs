//! Differentiable primitives. Each op validates shapes, computes the
//! forward values, and records a backward closure producing per-input
//! gradient contributions. Only the primitives the recognizer needs exist;
//! see `gradcheck::check_all_primitives` for the registry.

use rayon::prelude::*;

use super::{op_output, r, BackwardArgs, Real, Tensor};
use crate::error::{Error, Result};

/// Work threshold below which ops stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

fn same_shape<R: Real>(name: &str, a: &Tensor<R>, b: &Tensor<R>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("{name}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

pub fn add<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let shape = same_shape("add", a, b)?;
    let values = {
        let (av, bv) = (a.values(), b.values());
        av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect()
    };
    Ok(op_output(
        shape,
        values,
        vec![a.clone(), b.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            vec![
                Some(args.out_grad.to_vec()),
                Some(args.out_grad.to_vec()),
            ]
        }),
    ))
}

pub fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let shape = same_shape("sub", a, b)?;
    let values = {
        let (av, bv) = (a.values(), b.values());
        av.iter().zip(bv.iter()).map(|(&x, &y)| x - y).collect()
    };
    Ok(op_output(
        shape,
        values,
        vec![a.clone(), b.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            vec![
                Some(args.out_grad.to_vec()),
                Some(args.out_grad.iter().map(|&g| -g).collect()),
            ]
        }),
    ))
}

pub fn mul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let shape = same_shape("mul", a, b)?;
    let values = {
        let (av, bv) = (a.values(), b.values());
        av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect()
    };
    Ok(op_output(
        shape,
        values,
        vec![a.clone(), b.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let (av, bv) = (args.inputs[0].values, args.inputs[1].values);
            vec![
                Some(g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                Some(g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
            ]
        }),
    ))
}

pub fn scale<R: Real>(a: &Tensor<R>, c: f64) -> Tensor<R> {
    let cr: R = r(c);
    let values = a.values().iter().map(|&x| x * cr).collect();
    op_output(
        a.shape(),
        values,
        vec![a.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            vec![Some(args.out_grad.iter().map(|&g| g * cr).collect())]
        }),
    )
}

pub fn sum_all<R: Real>(a: &Tensor<R>) -> Tensor<R> {
    let total: R = a.values().iter().copied().sum();
    let n = a.numel();
    op_output(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| vec![Some(vec![args.out_grad[0]; n])]),
    )
}

pub fn relu<R: Real>(a: &Tensor<R>) -> Tensor<R> {
    let values = a
        .values()
        .iter()
        .map(|&x| if x > R::zero() { x } else { R::zero() })
        .collect();
    op_output(
        a.shape(),
        values,
        vec![a.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            let xv = args.inputs[0].values;
            // subgradient at 0 is 0
            vec![Some(
                args.out_grad
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > R::zero() { g } else { R::zero() })
                    .collect(),
            )]
        }),
    )
}

pub fn sigmoid<R: Real>(a: &Tensor<R>) -> Tensor<R> {
    let values: Vec<R> = a
        .values()
        .iter()
        .map(|&x| {
            if x >= R::zero() {
                R::one() / (R::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (R::one() + e)
            }
        })
        .collect();
    op_output(
        a.shape(),
        values,
        vec![a.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            vec![Some(
                args.out_grad
                    .iter()
                    .zip(args.out_values)
                    .map(|(&g, &y)| g * y * (R::one() - y))
                    .collect(),
            )]
        }),
    )
}

pub fn tanh<R: Real>(a: &Tensor<R>) -> Tensor<R> {
    let values: Vec<R> = a.values().iter().map(|&x| x.tanh()).collect();
    op_output(
        a.shape(),
        values,
        vec![a.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| {
            vec![Some(
                args.out_grad
                    .iter()
                    .zip(args.out_values)
                    .map(|(&g, &y)| g * (R::one() - y * y))
                    .collect(),
            )]
        }),
    )
}

/// `y = x · wᵀ + b` with `x: (B, in)` (rank-1 treated as one row),
/// `w: (out, in)`, `b: (out)`.
pub fn linear<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: Option<&Tensor<R>>) -> Result<Tensor<R>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::Shape(format!("linear: weight must be rank 2, got {ws:?}")));
    }
    let (rank1, rows, d_in) = match xs.len() {
        1 => (true, 1usize, xs[0]),
        2 => (false, xs[0], xs[1]),
        _ => return Err(Error::Shape(format!("linear: input rank {} unsupported", xs.len()))),
    };
    let (d_out, w_in) = (ws[0], ws[1]);
    if d_in != w_in {
        return Err(Error::Shape(format!(
            "linear: input shape {xs:?} does not match weight shape {ws:?}"
        )));
    }
    if let Some(b) = b {
        let bs = b.shape();
        if bs != [d_out] {
            return Err(Error::Shape(format!(
                "linear: bias shape {bs:?} does not match weight shape {ws:?}"
            )));
        }
    }

    let mut values = vec![R::zero(); rows * d_out];
    {
        let xv_guard = x.values();
        let xv: &[R] = &xv_guard;
        let wv_guard = w.values();
        let wv: &[R] = &wv_guard;
        let bv = b.map(|b| b.to_vec());
        let row_job = |(row, out_row): (usize, &mut [R])| {
            let xr = &xv[row * d_in..(row + 1) * d_in];
            for (o, out) in out_row.iter_mut().enumerate() {
                let wr = &wv[o * d_in..(o + 1) * d_in];
                let mut acc = R::zero();
                for (a, b) in xr.iter().zip(wr) {
                    acc += *a * *b;
                }
                if let Some(bv) = &bv {
                    acc += bv[o];
                }
                *out = acc;
            }
        };
        if rows * d_out * d_in > PAR_THRESHOLD {
            values.par_chunks_mut(d_out).enumerate().for_each(row_job);
        } else {
            values.chunks_mut(d_out).enumerate().for_each(row_job);
        }
    }

    let mut inputs = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        inputs.push(b.clone());
    }
    let has_bias = b.is_some();
    let out_shape = if rank1 { vec![d_out] } else { vec![rows, d_out] };
    Ok(op_output(
        out_shape,
        values,
        inputs,
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let xv = args.inputs[0].values;
            let wv = args.inputs[1].values;
            // dx = g · w
            let mut dx = vec![R::zero(); rows * d_in];
            let dx_job = |(row, dx_row): (usize, &mut [R])| {
                let gr = &g[row * d_out..(row + 1) * d_out];
                for (o, &gv) in gr.iter().enumerate() {
                    let wr = &wv[o * d_in..(o + 1) * d_in];
                    for (d, &wv) in dx_row.iter_mut().zip(wr) {
                        *d += gv * wv;
                    }
                }
            };
            if rows * d_out * d_in > PAR_THRESHOLD {
                dx.par_chunks_mut(d_in).enumerate().for_each(dx_job);
            } else {
                dx.chunks_mut(d_in).enumerate().for_each(dx_job);
            }
            // dw = gᵀ · x
            let mut dw = vec![R::zero(); d_out * d_in];
            let dw_job = |(o, dw_row): (usize, &mut [R])| {
                for row in 0..rows {
                    let gv = g[row * d_out + o];
                    let xr = &xv[row * d_in..(row + 1) * d_in];
                    for (d, &x) in dw_row.iter_mut().zip(xr) {
                        *d += gv * x;
                    }
                }
            };
            if rows * d_out * d_in > PAR_THRESHOLD {
                dw.par_chunks_mut(d_in).enumerate().for_each(dw_job);
            } else {
                dw.chunks_mut(d_in).enumerate().for_each(dw_job);
            }
            let mut out = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![R::zero(); d_out];
                for row in 0..rows {
                    for (d, &gv) in db.iter_mut().zip(&g[row * d_out..(row + 1) * d_out]) {
                        *d += gv;
                    }
                }
                out.push(Some(db));
            }
            out
        }),
    ))
}

fn pad_nchw<R: Real>(x: &[R], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<R> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![R::zero(); b * c * hp * wp];
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * h * w;
            let dst = (bi * c + ci) * hp * wp;
            for row in 0..h {
                let s = src + row * w;
                let d = dst + (row + p) * wp + p;
                out[d..d + w].copy_from_slice(&x[s..s + w]);
            }
        }
    }
    out
}

/// Cross-correlation of `x: (B,C,H,W)` with `k: (O,C,KH,KW)`.
/// Kernel extents must be odd; output extents must be at least 1.
pub fn conv2d<R: Real>(
    x: &Tensor<R>,
    k: &Tensor<R>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::Shape(format!("conv2d: x {xs:?}, k {ks:?} (want rank 4)")));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if c != kc {
        return Err(Error::Shape(format!(
            "conv2d: input channels {c} vs kernel channels {kc}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Invalid(format!("conv2d: kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d: stride must be positive".into()));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(Error::Invalid(format!(
            "conv2d: output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
        )));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;

    let xpad = pad_nchw(&x.values(), b, c, h, w, padding);
    let mut values = vec![R::zero(); b * o * oh * ow];
    {
        let kv_guard = k.values();
        let kv: &[R] = &kv_guard;
        let xpad: &[R] = &xpad;
        let job = |(bo, out): (usize, &mut [R])| {
            let (bi, oi) = (bo / o, bo % o);
            for ci in 0..c {
                let xbase = (bi * c + ci) * hp * wp;
                let kbase = (oi * c + ci) * kh * kw;
                for ki in 0..kh {
                    let krow = &kv[kbase + ki * kw..kbase + (ki + 1) * kw];
                    for ohi in 0..oh {
                        let xrow = &xpad[xbase + (ohi * stride + ki) * wp..];
                        let orow = &mut out[ohi * ow..(ohi + 1) * ow];
                        for (owi, ov) in orow.iter_mut().enumerate() {
                            let xseg = &xrow[owi * stride..owi * stride + kw];
                            let mut acc = R::zero();
                            for (xv, kv) in xseg.iter().zip(krow) {
                                acc += *xv * *kv;
                            }
                            *ov += acc;
                        }
                    }
                }
            }
        };
        if b * o * oh * ow * c * kh * kw > PAR_THRESHOLD {
            values.par_chunks_mut(oh * ow).enumerate().for_each(job);
        } else {
            values.chunks_mut(oh * ow).enumerate().for_each(job);
        }
    }

    Ok(op_output(
        vec![b, o, oh, ow],
        values,
        vec![x.clone(), k.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let xv = args.inputs[0].values;
            let kv = args.inputs[1].values;
            let xpad = pad_nchw(xv, b, c, h, w, padding);

            // dx: accumulate into a padded buffer per batch element, then crop.
            let mut dxpad = vec![R::zero(); b * c * hp * wp];
            let dx_job = |(bi, dxp): (usize, &mut [R])| {
                for oi in 0..o {
                    let gbase = (bi * o + oi) * oh * ow;
                    for ci in 0..c {
                        let kbase = (oi * c + ci) * kh * kw;
                        for ki in 0..kh {
                            let krow = &kv[kbase + ki * kw..kbase + (ki + 1) * kw];
                            for ohi in 0..oh {
                                let grow = &g[gbase + ohi * ow..gbase + (ohi + 1) * ow];
                                let drow = &mut dxp[(ci * hp + ohi * stride + ki) * wp..];
                                for (owi, &gv) in grow.iter().enumerate() {
                                    let dseg = &mut drow[owi * stride..owi * stride + kw];
                                    for (d, &kvv) in dseg.iter_mut().zip(krow) {
                                        *d += gv * kvv;
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if b * o * oh * ow * c * kh * kw > PAR_THRESHOLD {
                dxpad.par_chunks_mut(c * hp * wp).enumerate().for_each(dx_job);
            } else {
                dxpad.chunks_mut(c * hp * wp).enumerate().for_each(dx_job);
            }
            let mut dx = vec![R::zero(); b * c * h * w];
            for bi in 0..b {
                for ci in 0..c {
                    let src = (bi * c + ci) * hp * wp;
                    let dst = (bi * c + ci) * h * w;
                    for row in 0..h {
                        let s = src + (row + padding) * wp + padding;
                        let d = dst + row * w;
                        dx[d..d + w].copy_from_slice(&dxpad[s..s + w]);
                    }
                }
            }

            // dk: parallel over output channels, serial over batch inside.
            let mut dk = vec![R::zero(); o * c * kh * kw];
            let dk_job = |(oi, dko): (usize, &mut [R])| {
                for bi in 0..b {
                    let gbase = (bi * o + oi) * oh * ow;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * hp * wp;
                        for ki in 0..kh {
                            let dkrow = &mut dko[(ci * kh + ki) * kw..(ci * kh + ki + 1) * kw];
                            for ohi in 0..oh {
                                let grow = &g[gbase + ohi * ow..gbase + (ohi + 1) * ow];
                                let xrow = &xpad[xbase + (ohi * stride + ki) * wp..];
                                for (owi, &gv) in grow.iter().enumerate() {
                                    let xseg = &xrow[owi * stride..owi * stride + kw];
                                    for (d, &xvv) in dkrow.iter_mut().zip(xseg) {
                                        *d += gv * xvv;
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if b * o * oh * ow * c * kh * kw > PAR_THRESHOLD {
                dk.par_chunks_mut(c * kh * kw).enumerate().for_each(dk_job);
            } else {
                dk.chunks_mut(c * kh * kw).enumerate().for_each(dk_job);
            }
            vec![Some(dx), Some(dk)]
        }),
    ))
}

/// 2x2 average pooling with stride 2. Extents must be even.
pub fn avg_pool2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Shape(format!("avg_pool2: want rank 4, got {xs:?}")));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool2: extents must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter: R = r(0.25);
    let mut values = vec![R::zero(); b * c * oh * ow];
    {
        let xv = x.values();
        for bc in 0..b * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = src + 2 * i * w + 2 * j;
                    values[dst + i * ow + j] =
                        (xv[p] + xv[p + 1] + xv[p + w] + xv[p + w + 1]) * quarter;
                }
            }
        }
    }
    Ok(op_output(
        vec![b, c, oh, ow],
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let mut dx = vec![R::zero(); b * c * h * w];
            for bc in 0..b * c {
                let src = bc * oh * ow;
                let dst = bc * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[src + i * ow + j] * quarter;
                        let p = dst + 2 * i * w + 2 * j;
                        dx[p] += gv;
                        dx[p + 1] += gv;
                        dx[p + w] += gv;
                        dx[p + w + 1] += gv;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Batch-statistics normalization over rows: `x: (rows, feat)`.
/// Returns the normalized output plus the batch mean/variance so callers
/// can maintain running statistics. Rejects single-row batches.
pub fn batchnorm_train<R: Real>(
    x: &Tensor<R>,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    eps: f64,
) -> Result<(Tensor<R>, Vec<R>, Vec<R>)> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("batchnorm: want rank 2, got {xs:?}")));
    }
    let (rows, feat) = (xs[0], xs[1]);
    if rows < 2 {
        return Err(Error::Invalid(
            "batchnorm: train mode requires at least 2 rows (zero variance pathology)".into(),
        ));
    }
    if gamma.shape() != [feat] || beta.shape() != [feat] {
        return Err(Error::Shape(format!(
            "batchnorm: scale/shift must be ({feat}), got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let epsr: R = r(eps);
    let inv_rows = R::one() / r::<R>(rows as f64);

    let xv = x.to_vec();
    let mut mean = vec![R::zero(); feat];
    let mut var = vec![R::zero(); feat];
    for row in xv.chunks(feat) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_rows;
    }
    for row in xv.chunks(feat) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in var.iter_mut() {
        *s *= inv_rows;
    }
    let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + epsr).sqrt()).collect();

    let mut xhat = vec![R::zero(); rows * feat];
    for (row_out, row_in) in xhat.chunks_mut(feat).zip(xv.chunks(feat)) {
        for (((o, &v), &m), &is) in row_out.iter_mut().zip(row_in).zip(&mean).zip(&inv_std) {
            *o = (v - m) * is;
        }
    }
    let values = {
        let gv = gamma.values();
        let bv = beta.values();
        xhat.chunks(feat)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.iter())
                    .zip(bv.iter())
                    .map(|((&xh, &g), &b)| g * xh + b)
                    .collect::<Vec<_>>()
            })
            .collect()
    };

    let xhat_saved = xhat;
    let inv_std_saved = inv_std;
    let out = op_output(
        vec![rows, feat],
        values,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let gammav = args.inputs[1].values;
            let n: R = r(rows as f64);
            // per-feature reductions of dxhat and dxhat*xhat
            let mut sum_dxh = vec![R::zero(); feat];
            let mut sum_dxh_xh = vec![R::zero(); feat];
            let mut dgamma = vec![R::zero(); feat];
            let mut dbeta = vec![R::zero(); feat];
            for (grow, xrow) in g.chunks(feat).zip(xhat_saved.chunks(feat)) {
                for f in 0..feat {
                    let dxh = grow[f] * gammav[f];
                    sum_dxh[f] += dxh;
                    sum_dxh_xh[f] += dxh * xrow[f];
                    dgamma[f] += grow[f] * xrow[f];
                    dbeta[f] += grow[f];
                }
            }
            let mut dx = vec![R::zero(); rows * feat];
            for ((dxrow, grow), xrow) in dx
                .chunks_mut(feat)
                .zip(g.chunks(feat))
                .zip(xhat_saved.chunks(feat))
            {
                for f in 0..feat {
                    let dxh = grow[f] * gammav[f];
                    dxrow[f] = inv_std_saved[f] / n
                        * (n * dxh - sum_dxh[f] - xrow[f] * sum_dxh_xh[f]);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    );
    Ok((out, mean, var))
}

/// Normalization with frozen statistics: elementwise affine map.
pub fn batchnorm_eval<R: Real>(
    x: &Tensor<R>,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    running_mean: &[R],
    running_var: &[R],
    eps: f64,
) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("batchnorm: want rank 2, got {xs:?}")));
    }
    let (rows, feat) = (xs[0], xs[1]);
    if gamma.shape() != [feat] || beta.shape() != [feat] || running_mean.len() != feat {
        return Err(Error::Shape(format!("batchnorm eval: feature count mismatch ({feat})")));
    }
    let epsr: R = r(eps);
    let inv_std: Vec<R> = running_var
        .iter()
        .map(|&v| R::one() / (v + epsr).sqrt())
        .collect();
    let mean = running_mean.to_vec();
    let values = {
        let xv = x.values();
        let gv = gamma.values();
        let bv = beta.values();
        let mut out = vec![R::zero(); rows * feat];
        for (orow, xrow) in out.chunks_mut(feat).zip(xv.chunks(feat)) {
            for f in 0..feat {
                orow[f] = gv[f] * (xrow[f] - mean[f]) * inv_std[f] + bv[f];
            }
        }
        out
    };
    let inv_std_saved = inv_std;
    let mean_saved = mean;
    Ok(op_output(
        vec![rows, feat],
        values,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let xv = args.inputs[0].values;
            let gammav = args.inputs[1].values;
            let mut dx = vec![R::zero(); rows * feat];
            let mut dgamma = vec![R::zero(); feat];
            let mut dbeta = vec![R::zero(); feat];
            for ((dxrow, grow), xrow) in
                dx.chunks_mut(feat).zip(g.chunks(feat)).zip(xv.chunks(feat))
            {
                for f in 0..feat {
                    dxrow[f] = grow[f] * gammav[f] * inv_std_saved[f];
                    dgamma[f] += grow[f] * (xrow[f] - mean_saved[f]) * inv_std_saved[f];
                    dbeta[f] += grow[f];
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    ))
}

fn softmax_rows<R: Real>(x: &[R], rows: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * n];
    for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
        let mut mx = xrow[0];
        for &v in xrow.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = R::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Stable softmax over the last axis of a rank-1 or rank-2 tensor.
/// Rejects non-finite inputs.
pub fn softmax<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let xs = x.shape();
    let (rows, n) = match xs.len() {
        1 => (1, xs[0]),
        2 => (xs[0], xs[1]),
        _ => return Err(Error::Shape(format!("softmax: rank {} unsupported", xs.len()))),
    };
    if n == 0 {
        return Err(Error::Invalid("softmax: empty input".into()));
    }
    if !x.all_finite() {
        return Err(Error::Invalid("softmax: non-finite input entry".into()));
    }
    let values = softmax_rows(&x.values(), rows, n);
    Ok(op_output(
        xs,
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let y = args.out_values;
            let mut dx = vec![R::zero(); rows * n];
            for ((dxrow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let mut dot = R::zero();
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    dot += gv * yv;
                }
                for i in 0..n {
                    dxrow[i] = yrow[i] * (grow[i] - dot);
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Row-wise softmax over positions where `mask` is nonzero; masked
/// positions come out exactly 0. A row with no valid position is an error.
pub fn masked_softmax<R: Real>(x: &Tensor<R>, mask: &[u8]) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("masked_softmax: want rank 2, got {xs:?}")));
    }
    let (rows, n) = (xs[0], xs[1]);
    if mask.len() != rows * n {
        return Err(Error::Shape(format!(
            "masked_softmax: mask length {} vs {rows}x{n}",
            mask.len()
        )));
    }
    let mut values = vec![R::zero(); rows * n];
    {
        let xv = x.values();
        for row in 0..rows {
            let xrow = &xv[row * n..(row + 1) * n];
            let mrow = &mask[row * n..(row + 1) * n];
            let mut mx: Option<R> = None;
            for (i, &v) in xrow.iter().enumerate() {
                if mrow[i] != 0 && mx.map_or(true, |m| v > m) {
                    mx = Some(v);
                }
            }
            let Some(mx) = mx else {
                return Err(Error::Invalid(format!(
                    "masked_softmax: row {row} has no valid position"
                )));
            };
            let orow = &mut values[row * n..(row + 1) * n];
            let mut sum = R::zero();
            for i in 0..n {
                if mrow[i] != 0 {
                    orow[i] = (xrow[i] - mx).exp();
                    sum += orow[i];
                }
            }
            for i in 0..n {
                if mrow[i] != 0 {
                    orow[i] = orow[i] / sum;
                }
            }
        }
    }
    let mask_saved = mask.to_vec();
    Ok(op_output(
        xs,
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let y = args.out_values;
            let mut dx = vec![R::zero(); rows * n];
            for row in 0..rows {
                let yrow = &y[row * n..(row + 1) * n];
                let grow = &g[row * n..(row + 1) * n];
                let mrow = &mask_saved[row * n..(row + 1) * n];
                let mut dot = R::zero();
                for i in 0..n {
                    if mrow[i] != 0 {
                        dot += grow[i] * yrow[i];
                    }
                }
                let dxrow = &mut dx[row * n..(row + 1) * n];
                for i in 0..n {
                    if mrow[i] != 0 {
                        dxrow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Row gather: `table: (V, d)`, one output row per id.
pub fn embedding<R: Real>(table: &Tensor<R>, ids: &[usize]) -> Result<Tensor<R>> {
    let ts = table.shape();
    if ts.len() != 2 {
        return Err(Error::Shape(format!("embedding: table rank {} != 2", ts.len())));
    }
    let (v, d) = (ts[0], ts[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Invalid(format!("embedding: id {bad} out of range (vocab {v})")));
    }
    let rows = ids.len();
    let mut values = vec![R::zero(); rows * d];
    {
        let tv = table.values();
        for (out, &id) in values.chunks_mut(d).zip(ids) {
            out.copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
    }
    let ids_saved = ids.to_vec();
    Ok(op_output(
        vec![rows, d],
        values,
        vec![table.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let mut dt = vec![R::zero(); v * d];
            for (grow, &id) in g.chunks(d).zip(&ids_saved) {
                for (t, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                    *t += gv;
                }
            }
            vec![Some(dt)]
        }),
    ))
}

/// Attention-weighted spatial sum: `alpha: (B,P)`, `f: (B,C,P)` -> `(B,C)`.
pub fn attn_context<R: Real>(alpha: &Tensor<R>, f: &Tensor<R>) -> Result<Tensor<R>> {
    let als = alpha.shape();
    let fs = f.shape();
    if als.len() != 2 || fs.len() != 3 || als[0] != fs[0] || als[1] != fs[2] {
        return Err(Error::Shape(format!(
            "attn_context: alpha {als:?} vs features {fs:?}"
        )));
    }
    let (b, c, p) = (fs[0], fs[1], fs[2]);
    let mut values = vec![R::zero(); b * c];
    {
        let av = alpha.values();
        let fv = f.values();
        for bi in 0..b {
            let arow = &av[bi * p..(bi + 1) * p];
            for ci in 0..c {
                let frow = &fv[(bi * c + ci) * p..(bi * c + ci + 1) * p];
                let mut acc = R::zero();
                for (&a, &x) in arow.iter().zip(frow) {
                    acc += a * x;
                }
                values[bi * c + ci] = acc;
            }
        }
    }
    Ok(op_output(
        vec![b, c],
        values,
        vec![alpha.clone(), f.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let av = args.inputs[0].values;
            let fv = args.inputs[1].values;
            let mut da = vec![R::zero(); b * p];
            let mut df = vec![R::zero(); b * c * p];
            for bi in 0..b {
                let arow = &av[bi * p..(bi + 1) * p];
                for ci in 0..c {
                    let gv = g[bi * c + ci];
                    let frow = &fv[(bi * c + ci) * p..(bi * c + ci + 1) * p];
                    let darow = &mut da[bi * p..(bi + 1) * p];
                    for pi in 0..p {
                        darow[pi] += gv * frow[pi];
                    }
                    let dfrow = &mut df[(bi * c + ci) * p..(bi * c + ci + 1) * p];
                    for pi in 0..p {
                        dfrow[pi] += gv * arow[pi];
                    }
                }
            }
            vec![Some(da), Some(df)]
        }),
    ))
}

/// Concatenation along the channel axis of `(B,C_i,H,W)` tensors.
pub fn concat_channels<R: Real>(xs: &[&Tensor<R>]) -> Result<Tensor<R>> {
    if xs.is_empty() {
        return Err(Error::Invalid("concat_channels: empty input list".into()));
    }
    let s0 = xs[0].shape();
    if s0.len() != 4 {
        return Err(Error::Shape(format!("concat_channels: want rank 4, got {s0:?}")));
    }
    let (b, h, w) = (s0[0], s0[2], s0[3]);
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let s = x.shape();
        if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "concat_channels: incompatible shapes {s0:?} vs {s:?}"
            )));
        }
        channels.push(s[1]);
    }
    let ctot: usize = channels.iter().sum();
    let plane = h * w;
    let mut values = vec![R::zero(); b * ctot * plane];
    for bi in 0..b {
        let mut coff = 0usize;
        for (x, &ci) in xs.iter().zip(&channels) {
            let xv = x.values();
            let src = bi * ci * plane;
            let dst = (bi * ctot + coff) * plane;
            values[dst..dst + ci * plane].copy_from_slice(&xv[src..src + ci * plane]);
            coff += ci;
        }
    }
    let inputs: Vec<Tensor<R>> = xs.iter().map(|x| (*x).clone()).collect();
    let channels_saved = channels;
    Ok(op_output(
        vec![b, ctot, h, w],
        values,
        inputs,
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let mut out: Vec<Option<Vec<R>>> = Vec::with_capacity(channels_saved.len());
            let mut coff = 0usize;
            for &ci in &channels_saved {
                let mut dx = vec![R::zero(); b * ci * plane];
                for bi in 0..b {
                    let src = (bi * ctot + coff) * plane;
                    let dst = bi * ci * plane;
                    dx[dst..dst + ci * plane].copy_from_slice(&g[src..src + ci * plane]);
                }
                out.push(Some(dx));
                coff += ci;
            }
            out
        }),
    ))
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_values<R: Real>(values: &[R], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<R>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_rank = out_shape.len();
    let mut out = vec![R::zero(); values.len()];
    let mut idx = vec![0usize; out_rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *o = values[src];
        for d in (0..out_rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Axis permutation with data movement; gradient applies the inverse.
pub fn permute<R: Real>(x: &Tensor<R>, perm: &[usize]) -> Result<Tensor<R>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::Invalid(format!(
            "permute: {perm:?} is not a permutation of rank {rank}"
        )));
    }
    let (out_shape, values) = permute_values(&x.values(), &shape, perm);
    let mut inverse = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out_shape_saved = out_shape.clone();
    Ok(op_output(
        out_shape,
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let (_, dx) = permute_values(args.out_grad, &out_shape_saved, &inverse);
            vec![Some(dx)]
        }),
    ))
}

/// Shape change preserving row-major element order.
pub fn reshape<R: Real>(x: &Tensor<R>, shape: &[usize]) -> Result<Tensor<R>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} -> {shape:?} changes element count",
            x.shape()
        )));
    }
    Ok(op_output(
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|args: &BackwardArgs<'_, R>| vec![Some(args.out_grad.to_vec())]),
    ))
}

/// Repeats each row `times` times: `(B,A)` -> `(B*times, A)` with output
/// row `b*times + t` equal to input row `b`.
pub fn repeat_rows<R: Real>(x: &Tensor<R>, times: usize) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 2 || times == 0 {
        return Err(Error::Shape(format!("repeat_rows: shape {xs:?}, times {times}")));
    }
    let (b, a) = (xs[0], xs[1]);
    let mut values = vec![R::zero(); b * times * a];
    {
        let xv = x.values();
        for bi in 0..b {
            let src = &xv[bi * a..(bi + 1) * a];
            for t in 0..times {
                let dst = (bi * times + t) * a;
                values[dst..dst + a].copy_from_slice(src);
            }
        }
    }
    Ok(op_output(
        vec![b * times, a],
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let mut dx = vec![R::zero(); b * a];
            for bi in 0..b {
                let dst = &mut dx[bi * a..(bi + 1) * a];
                for t in 0..times {
                    let src = &g[(bi * times + t) * a..(bi * times + t + 1) * a];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// L2-normalizes each row of `(T,d)`; the norm is floored at `eps`.
pub fn row_normalize<R: Real>(x: &Tensor<R>, eps: f64) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("row_normalize: want rank 2, got {xs:?}")));
    }
    let (t, d) = (xs[0], xs[1]);
    let epsr: R = r(eps);
    let mut denoms = vec![R::zero(); t];
    let mut floored = vec![false; t];
    let mut values = vec![R::zero(); t * d];
    {
        let xv = x.values();
        for ti in 0..t {
            let row = &xv[ti * d..(ti + 1) * d];
            let mut sq = R::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            let denom = if norm > epsr {
                denoms[ti] = norm;
                norm
            } else {
                floored[ti] = true;
                denoms[ti] = epsr;
                epsr
            };
            for (o, &v) in values[ti * d..(ti + 1) * d].iter_mut().zip(row) {
                *o = v / denom;
            }
        }
    }
    Ok(op_output(
        xs,
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let y = args.out_values;
            let mut dx = vec![R::zero(); t * d];
            for ti in 0..t {
                let grow = &g[ti * d..(ti + 1) * d];
                let yrow = &y[ti * d..(ti + 1) * d];
                let dxrow = &mut dx[ti * d..(ti + 1) * d];
                if floored[ti] {
                    // y = x / eps: plain scaling
                    for (o, &gv) in dxrow.iter_mut().zip(grow) {
                        *o = gv / denoms[ti];
                    }
                } else {
                    let mut dot = R::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for i in 0..d {
                        dxrow[i] = (grow[i] - yrow[i] * dot) / denoms[ti];
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Contiguous row slice `[start, start+len)` of a rank-2 tensor.
pub fn slice_rows<R: Real>(x: &Tensor<R>, start: usize, len: usize) -> Result<Tensor<R>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("slice_rows: want rank 2, got {xs:?}")));
    }
    let (t, d) = (xs[0], xs[1]);
    if start + len > t || len == 0 {
        return Err(Error::Shape(format!(
            "slice_rows: [{start}, {}) out of {t} rows",
            start + len
        )));
    }
    let values = x.values()[start * d..(start + len) * d].to_vec();
    Ok(op_output(
        vec![len, d],
        values,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let mut dx = vec![R::zero(); t * d];
            dx[start * d..(start + len) * d].copy_from_slice(args.out_grad);
            vec![Some(dx)]
        }),
    ))
}

/// Mean cross-entropy of `logits: (M,N)` against target ids over rows where
/// `mask` is nonzero. Uses the log-sum-exp form; probabilities never
/// materialize in the forward pass.
pub fn masked_cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    mask: &[u8],
) -> Result<Tensor<R>> {
    let ls = logits.shape();
    if ls.len() != 2 {
        return Err(Error::Shape(format!("cross_entropy: want rank 2, got {ls:?}")));
    }
    let (m, n) = (ls[0], ls[1]);
    if targets.len() != m || mask.len() != m {
        return Err(Error::Shape(format!(
            "cross_entropy: {m} rows vs {} targets / {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&v| v != 0).count();
    if count == 0 {
        return Err(Error::Invalid("cross_entropy: no valid target rows".into()));
    }
    for (i, (&t, &mk)) in targets.iter().zip(mask).enumerate() {
        if mk != 0 && t >= n {
            return Err(Error::Invalid(format!(
                "cross_entropy: target {t} out of range at row {i} (classes {n})"
            )));
        }
    }
    let mut total = R::zero();
    {
        let lv = logits.values();
        for row in 0..m {
            if mask[row] == 0 {
                continue;
            }
            let xrow = &lv[row * n..(row + 1) * n];
            let mut mx = xrow[0];
            for &v in xrow.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = R::zero();
            for &v in xrow.iter() {
                sum += (v - mx).exp();
            }
            total += mx + sum.ln() - xrow[targets[row]];
        }
    }
    let inv_count = R::one() / r::<R>(count as f64);
    let targets_saved = targets.to_vec();
    let mask_saved = mask.to_vec();
    Ok(op_output(
        vec![1],
        vec![total * inv_count],
        vec![logits.clone()],
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let gscale = args.out_grad[0] * inv_count;
            let lv = args.inputs[0].values;
            let mut dl = vec![R::zero(); m * n];
            for row in 0..m {
                if mask_saved[row] == 0 {
                    continue;
                }
                let xrow = &lv[row * n..(row + 1) * n];
                let probs = softmax_rows(xrow, 1, n);
                let drow = &mut dl[row * n..(row + 1) * n];
                for i in 0..n {
                    drow[i] = probs[i] * gscale;
                }
                drow[targets_saved[row]] -= gscale;
            }
            vec![Some(dl)]
        }),
    ))
}

/// Concatenation along axis 0 of rank-2 tensors with equal column counts.
pub fn concat_rows<R: Real>(xs: &[&Tensor<R>]) -> Result<Tensor<R>> {
    if xs.is_empty() {
        return Err(Error::Invalid("concat_rows: empty input list".into()));
    }
    let d = {
        let s = xs[0].shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("concat_rows: want rank 2, got {s:?}")));
        }
        s[1]
    };
    let mut row_counts = Vec::with_capacity(xs.len());
    let mut values = Vec::new();
    for x in xs {
        let s = x.shape();
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape(format!(
                "concat_rows: incompatible shape {s:?} (want columns {d})"
            )));
        }
        row_counts.push(s[0]);
        values.extend_from_slice(&x.values());
    }
    let total: usize = row_counts.iter().sum();
    let inputs: Vec<Tensor<R>> = xs.iter().map(|x| (*x).clone()).collect();
    Ok(op_output(
        vec![total, d],
        values,
        inputs,
        Box::new(move |args: &BackwardArgs<'_, R>| {
            let g = args.out_grad;
            let mut out = Vec::with_capacity(row_counts.len());
            let mut off = 0usize;
            for &rc in &row_counts {
                out.push(Some(g[off * d..(off + rc) * d].to_vec()));
                off += rc;
            }
            out
        }),
    ))
}
