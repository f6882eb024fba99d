//! Raw numeric kernels behind the tape ops.
//!
//! Every kernel writes each output element from exactly one closure with a
//! fixed-order inner reduction, so the parallel and sequential builds agree
//! bitwise.

use crate::par;
use crate::tensor::Scalar;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk_mut(out, n.max(1), 2 * k, |i, row| {
        row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Batched matmul: lhs [batch,m,k], rhs [batch,k,n] (or [k,n] shared when
/// `rhs_batched` is false), out [batch,m,n].
pub fn bmm<T: Scalar>(
    lhs: &[T],
    rhs: &[T],
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
    out: &mut [T],
) {
    par::for_each_chunk_mut(out, n.max(1), 2 * k, |q, row| {
        let b = q / m.max(1);
        let i = q % m.max(1);
        row.fill(T::zero());
        let a_row = &lhs[(b * m + i) * k..(b * m + i + 1) * k];
        let rbase = if rhs_batched { b * k * n } else { 0 };
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &rhs[rbase + p * n..rbase + (p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Gradient w.r.t. bmm lhs: dA[b] = dC[b] * B[b]^T.
pub fn bmm_grad_lhs<T: Scalar>(
    grad: &[T],
    rhs: &[T],
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
    out: &mut [T],
) {
    par::for_each_chunk_mut(out, k.max(1), 2 * n, |q, row| {
        let b = q / m.max(1);
        let i = q % m.max(1);
        let g_row = &grad[(b * m + i) * n..(b * m + i + 1) * n];
        let rbase = if rhs_batched { b * k * n } else { 0 };
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &rhs[rbase + p * n..rbase + (p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            *o = s;
        }
    });
}

/// Gradient w.r.t. bmm rhs. For a shared (non-batched) rhs the batch
/// contributions are summed in index order.
pub fn bmm_grad_rhs<T: Scalar>(
    grad: &[T],
    lhs: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
    out: &mut [T],
) {
    if rhs_batched {
        // out[b,p,j] = sum_i lhs[b,i,p] * grad[b,i,j]
        par::for_each_chunk_mut(out, k * n, 2 * m * n, |b, block| {
            let a = &lhs[b * m * k..(b + 1) * m * k];
            let g = &grad[b * m * n..(b + 1) * m * n];
            for p in 0..k {
                let row = &mut block[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[i * k + p];
                    let g_row = &g[i * n..(i + 1) * n];
                    for (o, &gv) in row.iter_mut().zip(g_row) {
                        *o += av * gv;
                    }
                }
            }
        });
    } else {
        // out[p,j] = sum_b sum_i lhs[b,i,p] * grad[b,i,j]
        par::for_each_chunk_mut(out, n.max(1), 2 * batch * m, |p, row| {
            for b in 0..batch {
                for i in 0..m {
                    let av = lhs[(b * m + i) * k + p];
                    let g_row = &grad[(b * m + i) * n..(b * m + i + 1) * n];
                    for (o, &gv) in row.iter_mut().zip(g_row) {
                        *o += av * gv;
                    }
                }
            }
        });
    }
}

/// Numerically stable softmax over contiguous rows of width `w`.
pub fn softmax_rows<T: Scalar>(x: &[T], w: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    par::for_each_chunk_mut(out, w, 8, |r, row| {
        let xr = &x[r * w..(r + 1) * w];
        let mut max = xr[0];
        for &v in xr {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in row.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in row.iter_mut() {
            *o *= inv;
        }
    });
}

/// dx = y ⊙ (g − Σ g⊙y) per row, where y is the saved softmax output.
pub fn softmax_backward<T: Scalar>(y: &[T], grad: &[T], w: usize, out: &mut [T]) {
    par::for_each_chunk_mut(out, w, 8, |r, row| {
        let yr = &y[r * w..(r + 1) * w];
        let gr = &grad[r * w..(r + 1) * w];
        let mut dot = T::zero();
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot += yv * gv;
        }
        for ((o, &yv), &gv) in row.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    });
}

fn row_stats<T: Scalar>(xr: &[T], eps: T) -> (T, T) {
    let inv_w = T::one() / T::from_f64(xr.len() as f64);
    let mut mean = T::zero();
    for &v in xr {
        mean += v;
    }
    mean *= inv_w;
    let mut var = T::zero();
    for &v in xr {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_w;
    (mean, T::one() / (var + eps).sqrt())
}

/// Layer norm over rows of width `w` with learned gain/bias of length `w`.
pub fn layer_norm_rows<T: Scalar>(x: &[T], gain: &[T], bias: &[T], w: usize, eps: T, out: &mut [T]) {
    par::for_each_chunk_mut(out, w, 12, |r, row| {
        let xr = &x[r * w..(r + 1) * w];
        let (mean, inv_std) = row_stats(xr, eps);
        for (j, o) in row.iter_mut().enumerate() {
            *o = gain[j] * ((xr[j] - mean) * inv_std) + bias[j];
        }
    });
}

/// Layer-norm input gradient (gain/bias gradients accumulate separately).
pub fn layer_norm_backward_input<T: Scalar>(
    x: &[T],
    gain: &[T],
    grad: &[T],
    w: usize,
    eps: T,
    out: &mut [T],
) {
    let inv_w = T::one() / T::from_f64(w as f64);
    par::for_each_chunk_mut(out, w, 16, |r, row| {
        let xr = &x[r * w..(r + 1) * w];
        let gr = &grad[r * w..(r + 1) * w];
        let (mean, inv_std) = row_stats(xr, eps);
        let mut sum_gh = T::zero();
        let mut sum_gh_h = T::zero();
        for (j, &gv) in gr.iter().enumerate() {
            let gh = gv * gain[j];
            let h = (xr[j] - mean) * inv_std;
            sum_gh += gh;
            sum_gh_h += gh * h;
        }
        sum_gh *= inv_w;
        sum_gh_h *= inv_w;
        for (j, o) in row.iter_mut().enumerate() {
            let gh = gr[j] * gain[j];
            let h = (xr[j] - mean) * inv_std;
            *o = (gh - sum_gh - h * sum_gh_h) * inv_std;
        }
    });
}

/// dγ[j] += Σ_rows g⊙x̂, dβ[j] += Σ_rows g.
pub fn layer_norm_backward_affine<T: Scalar>(
    x: &[T],
    grad: &[T],
    w: usize,
    eps: T,
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let rows = grad.len() / w;
    for r in 0..rows {
        let xr = &x[r * w..(r + 1) * w];
        let gr = &grad[r * w..(r + 1) * w];
        let (mean, inv_std) = row_stats(xr, eps);
        for j in 0..w {
            dgain[j] += gr[j] * ((xr[j] - mean) * inv_std);
            dbias[j] += gr[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: &[T], out: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    par::for_each_chunk_mut(out, 256, 8, |q, chunk| {
        let src = &x[q * 256..q * 256 + chunk.len()];
        for (o, &v) in chunk.iter_mut().zip(src) {
            let u = c * (v + a * v * v * v);
            *o = half * v * (T::one() + u.tanh_fast());
        }
    });
}

pub fn gelu_backward<T: Scalar>(x: &[T], grad: &[T], out: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    par::for_each_chunk_mut(out, 256, 12, |q, chunk| {
        let src = &x[q * 256..q * 256 + chunk.len()];
        let g = &grad[q * 256..q * 256 + chunk.len()];
        for ((o, &v), &gv) in chunk.iter_mut().zip(src).zip(g) {
            let u = c * (v + a * v * v * v);
            let t = u.tanh_fast();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            *o = gv * d;
        }
    });
}

/// Output indices `o` with `0 <= o*stride + off < extent_in`, clamped to
/// `0..extent_out`. Hoists the padding test out of the inner loops.
fn valid_range(extent_in: usize, extent_out: usize, off: isize, stride: usize) -> (usize, usize) {
    let lo = if off < 0 { ((-off) as usize).div_ceil(stride) } else { 0 };
    let last_in = extent_in as isize - 1 - off;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(extent_out);
    (lo.min(hi), hi)
}

/// Unfolds one image (cin, h, w) into a (cin*kh*kw, ho*wo) patch matrix so
/// convolution becomes a matrix product. Padding cells stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    image: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    col.fill(T::zero());
    let nout = ho * wo;
    for ci in 0..cin {
        let plane = &image[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            let y_off = u as isize - pad_t as isize;
            let (oh_lo, oh_hi) = valid_range(h, ho, y_off, stride);
            for v in 0..kw {
                let x_off = v as isize - pad_l as isize;
                let (ow_lo, ow_hi) = valid_range(w, wo, x_off, stride);
                if ow_lo >= ow_hi {
                    continue;
                }
                let krow = (ci * kh * kw + u * kw + v) * nout;
                for oh in oh_lo..oh_hi {
                    let y = ((oh * stride) as isize + y_off) as usize;
                    let in_row = &plane[y * w..(y + 1) * w];
                    let dst = &mut col[krow + oh * wo + ow_lo..krow + oh * wo + ow_hi];
                    if stride == 1 {
                        let x0 = (ow_lo as isize + x_off) as usize;
                        dst.copy_from_slice(&in_row[x0..x0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = in_row[(((ow_lo + j) * stride) as isize + x_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Sequential C[m,n] = A[m,k] * B[k,n]; used inside per-image workers.
fn matmul_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn unfold_batch<T: Scalar>(
    input: &[T],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kdim = cin * kh * kw;
    let nout = ho * wo;
    let mut cols = vec![T::zero(); bsz * kdim * nout];
    par::for_each_chunk_mut(&mut cols, kdim * nout, 2, |b, col| {
        im2col(&input[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, kh, kw, stride, pad_t, pad_l, ho, wo, col);
    });
    cols
}

/// 2-D convolution, NCHW input and OIHW kernel, zero padding. Runs as
/// im2col + matmul per image.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let kdim = cin * kh * kw;
    let nout = ho * wo;
    let cols = unfold_batch(input, bsz, cin, h, w, kh, kw, stride, pad_t, pad_l, ho, wo);
    par::for_each_chunk_mut(out, cout * nout, 2 * kdim, |b, image_out| {
        matmul_seq(kernel, &cols[b * kdim * nout..(b + 1) * kdim * nout], cout, kdim, nout, image_out);
    });
}

/// Kernel gradient dK[co,p] = sum over batch and output positions of
/// grad ⊙ unfolded input; parallel over kernel rows, batch summed in order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_kernel<T: Scalar>(
    grad: &[T],
    input: &[T],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    dkernel: &mut [T],
) {
    let kdim = cin * kh * kw;
    let nout = ho * wo;
    let cols = unfold_batch(input, bsz, cin, h, w, kh, kw, stride, pad_t, pad_l, ho, wo);
    par::for_each_chunk_mut(dkernel, kdim, 2 * bsz * nout, |co, krow| {
        for b in 0..bsz {
            let g_row = &grad[(b * cout + co) * nout..(b * cout + co + 1) * nout];
            let col = &cols[b * kdim * nout..(b + 1) * kdim * nout];
            for (p, o) in krow.iter_mut().enumerate() {
                let c_row = &col[p * nout..(p + 1) * nout];
                let mut s = T::zero();
                for (&gv, &cv) in g_row.iter().zip(c_row) {
                    s += gv * cv;
                }
                *o += s;
            }
        }
    });
}

/// Input gradient: dCol = K^T * g per image, folded back with overlap-add.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input<T: Scalar>(
    grad: &[T],
    kernel: &[T],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    ho: usize,
    wo: usize,
    dinput: &mut [T],
) {
    let _ = bsz;
    let kdim = cin * kh * kw;
    let nout = ho * wo;
    par::for_each_chunk_mut(dinput, cin * h * w, 4 * cout * kh * kw, |b, dimage| {
        let g = &grad[b * cout * nout..(b + 1) * cout * nout];
        // dcol[p, j] = sum_co kernel[co, p] * g[co, j]
        let mut dcol = vec![T::zero(); kdim * nout];
        for co in 0..cout {
            let k_row = &kernel[co * kdim..(co + 1) * kdim];
            let g_row = &g[co * nout..(co + 1) * nout];
            for (p, &kv) in k_row.iter().enumerate() {
                let d_row = &mut dcol[p * nout..(p + 1) * nout];
                for (o, &gv) in d_row.iter_mut().zip(g_row) {
                    *o += kv * gv;
                }
            }
        }
        // col2im overlap-add.
        for ci in 0..cin {
            let plane = &mut dimage[ci * h * w..(ci + 1) * h * w];
            for u in 0..kh {
                let y_off = u as isize - pad_t as isize;
                let (oh_lo, oh_hi) = valid_range(h, ho, y_off, stride);
                for v in 0..kw {
                    let x_off = v as isize - pad_l as isize;
                    let (ow_lo, ow_hi) = valid_range(w, wo, x_off, stride);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let krow = (ci * kh * kw + u * kw + v) * nout;
                    for oh in oh_lo..oh_hi {
                        let y = ((oh * stride) as isize + y_off) as usize;
                        let src = &dcol[krow + oh * wo + ow_lo..krow + oh * wo + ow_hi];
                        if stride == 1 {
                            let x0 = y * w + (ow_lo as isize + x_off) as usize;
                            let dst = &mut plane[x0..x0 + src.len()];
                            for (o, &sv) in dst.iter_mut().zip(src) {
                                *o += sv;
                            }
                        } else {
                            for (j, &sv) in src.iter().enumerate() {
                                let x = (((ow_lo + j) * stride) as isize + x_off) as usize;
                                plane[y * w + x] += sv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Valid-padding 2-D max pool over planes; per-output argmax recorded for
/// backward.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    par::for_each_chunk_mut(argmax, ho * wo, 2 * k * k, |p, arg_plane| {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for u in 0..k {
                    for v in 0..k {
                        let idx = (oh * stride + u) * w + ow * stride + v;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                arg_plane[oh * wo + ow] = best_idx;
            }
        }
    });
    par::for_each_chunk_mut(out, ho * wo, 2, |p, plane_out| {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let args = &argmax[p * ho * wo..(p + 1) * ho * wo];
        for (o, &idx) in plane_out.iter_mut().zip(args) {
            *o = plane[idx];
        }
    });
}

pub fn max_pool2d_backward<T: Scalar>(
    grad: &[T],
    argmax: &[usize],
    h: usize,
    w: usize,
    out_plane: usize,
    dinput: &mut [T],
) {
    par::for_each_chunk_mut(dinput, h * w, 2, |p, plane| {
        let base = p * out_plane;
        for q in 0..out_plane {
            plane[argmax[base + q]] += grad[base + q];
        }
    });
}

/// Masked mean token cross-entropy over rows of logits.
/// Returns (loss, masked count); `losses` is scratch of length rows.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &[T],
    targets: &[usize],
    mask: &[bool],
    vocab: usize,
    losses: &mut [T],
) -> (T, usize) {
    par::for_each_chunk_mut(losses, 1, 3 * vocab, |r, cell| {
        if !mask[r] {
            cell[0] = T::zero();
            return;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        cell[0] = max + sum.ln() - row[targets[r]];
    });
    let m = mask.iter().filter(|&&b| b).count();
    let mut total = T::zero();
    for &l in losses.iter() {
        total += l;
    }
    (total / T::from_f64(m as f64), m)
}

/// d logits = mask ⊙ (softmax − onehot(target)) / m, scaled by upstream.
pub fn masked_cross_entropy_backward<T: Scalar>(
    logits: &[T],
    targets: &[usize],
    mask: &[bool],
    vocab: usize,
    m_count: usize,
    upstream: T,
    out: &mut [T],
) {
    let scale = upstream / T::from_f64(m_count as f64);
    par::for_each_chunk_mut(out, vocab, 6, |r, row| {
        if !mask[r] {
            row.fill(T::zero());
            return;
        }
        let xr = &logits[r * vocab..(r + 1) * vocab];
        let mut max = xr[0];
        for &v in xr {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in row.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in row.iter_mut() {
            *o *= inv * scale;
        }
        row[targets[r]] -= scale;
    });
}
