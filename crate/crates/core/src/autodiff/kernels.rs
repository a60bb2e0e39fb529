//! Raw loops behind the tape operators. Everything here works on flat
//! row-major slices; shape validation happens in the callers.
//!
//! The convolution kernels are written so that LLVM vectorizes the inner
//! `LANES` loops; the accumulator blocks are sized to stay in registers.
//! Those blocks are indexed by position on purpose, so the range-loop lint
//! is off for this module.
#![allow(clippy::needless_range_loop)]

use std::any::TypeId;

use super::tensor::Real;

const LANES: usize = 16;

#[inline(always)]
fn fma<T: Real>(a: T, b: T, c: T) -> T {
    a.mul_add(b, c)
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = fma(alpha, xv, *yv);
    }
}

/// Dot product with split accumulators so the reduction vectorizes.
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] = fma(a[l], b[l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = fma(a, b, tail);
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// Gradient of `matmul` w.r.t. `a`: `da[m,k] += g[m,n] · bᵀ`.
pub fn matmul_grad_a<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize, da: &mut [T]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = da[i * k + p] + dot(gi, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Gradient of `matmul` w.r.t. `b`: `db[k,n] += aᵀ · g[m,n]`.
pub fn matmul_grad_b<T: Real>(g: &[T], a: &[T], m: usize, k: usize, n: usize, db: &mut [T]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, gi, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Geometry of a stride-1 convolution over a single sample.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    /// Zero padding placed before each spatial axis for "same" output size.
    pub fn pad_before(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn pad_after(&self) -> usize {
        self.k - 1 - self.pad_before()
    }
}

/// Copies `x [c,h,w]` into a zero-padded `[c, h+before+after, w+before+after]` buffer.
pub fn pad_input<T: Real>(x: &[T], c: usize, h: usize, w: usize, before: usize, after: usize) -> Vec<T> {
    let hp = h + before + after;
    let wp = w + before + after;
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[(ch * h + i) * w..(ch * h + i + 1) * w];
            let dst_start = (ch * hp + i + before) * wp + before;
            out[dst_start..dst_start + w].copy_from_slice(src);
        }
    }
    out
}

/// Valid cross-correlation of a pre-padded input:
/// `out[co,i,j] = bias[co] + Σ w[co,ci,p,q] · xp[ci,i+p,j+q]` for `i < h`, `j < w`.
///
/// `xp` has shape `[cin, h+k-1, w+k-1]`; `weights` is `[cout,cin,k,k]`.
pub fn conv_valid<T: Real>(xp: &[T], weights: &[T], bias: Option<&[T]>, g: ConvGeom, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(wt), Some(out)) = (as_f32(xp), as_f32(weights), as_f32_mut(out)) {
        if avx512::available() {
            let bias = bias.map(|b| as_f32(b).expect("same element type"));
            // SAFETY: the CPU supports AVX-512F and the slice lengths match `g`
            unsafe { avx512::conv_valid(xp, wt, bias, g, out) };
            return;
        }
    }
    let mut co = 0;
    while co < g.cout {
        let left = g.cout - co;
        if left >= 8 {
            conv_block::<T, 8>(xp, weights, bias, g, co, out);
            co += 8;
        } else if left >= 4 {
            conv_block::<T, 4>(xp, weights, bias, g, co, out);
            co += 4;
        } else if left >= 2 {
            conv_block::<T, 2>(xp, weights, bias, g, co, out);
            co += 2;
        } else {
            conv_block::<T, 1>(xp, weights, bias, g, co, out);
            co += 1;
        }
    }
}

fn conv_block<T: Real, const CB: usize>(
    xp: &[T],
    weights: &[T],
    bias: Option<&[T]>,
    g: ConvGeom,
    co0: usize,
    out: &mut [T],
) {
    let ConvGeom { cin, h, w, k, .. } = g;
    let hp = h + k - 1;
    let wp = w + k - 1;
    let taps = cin * k * k;
    // packed[tap][b] keeps the CB weights of one tap contiguous
    let mut packed = vec![[T::zero(); CB]; taps];
    for (tap, slot) in packed.iter_mut().enumerate() {
        for (b, v) in slot.iter_mut().enumerate() {
            *v = weights[(co0 + b) * taps + tap];
        }
    }
    let mut b0 = [T::zero(); CB];
    if let Some(bias) = bias {
        b0.copy_from_slice(&bias[co0..co0 + CB]);
    }

    for i in 0..h {
        let mut j0 = 0;
        while j0 + LANES <= w {
            let mut acc = [[T::zero(); LANES]; CB];
            for b in 0..CB {
                acc[b] = [b0[b]; LANES];
            }
            let mut tap = 0;
            for ci in 0..cin {
                for p in 0..k {
                    let row = &xp[(ci * hp + i + p) * wp..(ci * hp + i + p + 1) * wp];
                    for q in 0..k {
                        let x: &[T; LANES] = row[j0 + q..j0 + q + LANES].try_into().unwrap();
                        let wt = &packed[tap];
                        for b in 0..CB {
                            let wv = wt[b];
                            for l in 0..LANES {
                                acc[b][l] = fma(wv, x[l], acc[b][l]);
                            }
                        }
                        tap += 1;
                    }
                }
            }
            for b in 0..CB {
                let o = ((co0 + b) * h + i) * w + j0;
                out[o..o + LANES].copy_from_slice(&acc[b]);
            }
            j0 += LANES;
        }
        for j in j0..w {
            let mut acc = b0;
            let mut tap = 0;
            for ci in 0..cin {
                for p in 0..k {
                    let row = (ci * hp + i + p) * wp + j;
                    for q in 0..k {
                        let x = xp[row + q];
                        for b in 0..CB {
                            acc[b] = fma(packed[tap][b], x, acc[b]);
                        }
                        tap += 1;
                    }
                }
            }
            for b in 0..CB {
                out[((co0 + b) * h + i) * w + j] = acc[b];
            }
        }
    }
}

fn as_f32<T: Real>(x: &[T]) -> Option<&[f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: T is f32
        .then(|| unsafe { std::slice::from_raw_parts(x.as_ptr().cast::<f32>(), x.len()) })
}

fn as_f32_mut<T: Real>(x: &mut [T]) -> Option<&mut [f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: T is f32
        .then(|| unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr().cast::<f32>(), x.len()) })
}

/// Hand-blocked f32 kernels for CPUs with AVX-512F. Column tails are
/// handled with masked loads and stores.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::ConvGeom;

    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx512f")
    }

    fn tail_mask(n: usize) -> u16 {
        if n >= 16 {
            u16::MAX
        } else {
            (1u16 << n) - 1
        }
    }

    /// # Safety
    /// AVX-512F must be available; slices must match the geometry.
    pub unsafe fn conv_valid(xp: &[f32], weights: &[f32], bias: Option<&[f32]>, g: ConvGeom, out: &mut [f32]) {
        let hp = g.h + g.k - 1;
        let wp = g.w + g.k - 1;
        assert!(xp.len() >= g.cin * hp * wp);
        assert!(weights.len() >= g.cout * g.cin * g.k * g.k);
        assert!(out.len() >= g.cout * g.h * g.w);
        let mut co = 0;
        while co < g.cout {
            let left = g.cout - co;
            // SAFETY: bounds asserted above, feature checked by the caller
            unsafe {
                if left >= 8 {
                    conv_block::<8, 2>(xp, weights, bias, g, co, out);
                    co += 8;
                } else if left >= 4 {
                    conv_block::<4, 4>(xp, weights, bias, g, co, out);
                    co += 4;
                } else if left >= 2 {
                    conv_block::<2, 8>(xp, weights, bias, g, co, out);
                    co += 2;
                } else {
                    conv_block::<1, 8>(xp, weights, bias, g, co, out);
                    co += 1;
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn conv_block<const CB: usize, const JB: usize>(
        xp: &[f32],
        weights: &[f32],
        bias: Option<&[f32]>,
        g: ConvGeom,
        co0: usize,
        out: &mut [f32],
    ) {
        let taps = g.cin * g.k * g.k;
        let mut packed = vec![0f32; taps * CB];
        for tap in 0..taps {
            for b in 0..CB {
                packed[tap * CB + b] = weights[(co0 + b) * taps + tap];
            }
        }
        let mut b0 = [0f32; CB];
        if let Some(bias) = bias {
            b0.copy_from_slice(&bias[co0..co0 + CB]);
        }
        for i in 0..g.h {
            let mut j0 = 0;
            while j0 + JB * 16 <= g.w {
                unsafe { conv_tile::<CB, JB>(xp, &packed, &b0, g, co0, i, j0, u16::MAX, out) };
                j0 += JB * 16;
            }
            while j0 < g.w {
                let mask = tail_mask(g.w - j0);
                unsafe { conv_tile::<CB, 1>(xp, &packed, &b0, g, co0, i, j0, mask, out) };
                j0 += 16;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn conv_tile<const CB: usize, const JB: usize>(
        xp: &[f32],
        packed: &[f32],
        b0: &[f32; CB],
        g: ConvGeom,
        co0: usize,
        i: usize,
        j0: usize,
        mask: u16,
        out: &mut [f32],
    ) {
        let ConvGeom { cin, h, w, k, .. } = g;
        let hp = h + k - 1;
        let wp = w + k - 1;
        let mut acc = [[_mm512_setzero_ps(); JB]; CB];
        for b in 0..CB {
            let v = _mm512_set1_ps(b0[b]);
            for a in acc[b].iter_mut() {
                *a = v;
            }
        }
        let xptr = xp.as_ptr();
        let mut wptr = packed.as_ptr();
        for ci in 0..cin {
            for p in 0..k {
                // SAFETY: row start is inside xp; masked lanes never touch memory
                let row = unsafe { xptr.add((ci * hp + i + p) * wp + j0) };
                for q in 0..k {
                    let mut xs = [_mm512_setzero_ps(); JB];
                    for (jb, x) in xs.iter_mut().enumerate() {
                        *x = unsafe { _mm512_maskz_loadu_ps(mask, row.add(q + jb * 16)) };
                    }
                    for b in 0..CB {
                        let wv = _mm512_set1_ps(unsafe { *wptr.add(b) });
                        for jb in 0..JB {
                            acc[b][jb] = _mm512_fmadd_ps(wv, xs[jb], acc[b][jb]);
                        }
                    }
                    wptr = unsafe { wptr.add(CB) };
                }
            }
        }
        let optr = out.as_mut_ptr();
        for b in 0..CB {
            for jb in 0..JB {
                let o = ((co0 + b) * h + i) * w + j0 + jb * 16;
                unsafe { _mm512_mask_storeu_ps(optr.add(o), mask, acc[b][jb]) };
            }
        }
    }

    /// Rows of the output gradient processed per pass, so one band of
    /// `gout` and `xp` stays in cache across all kernel taps.
    const ROW_BAND: usize = 8;

    /// # Safety
    /// AVX-512F must be available; slices must match the geometry.
    pub unsafe fn kernel_grad(xp: &[f32], gout: &[f32], g: ConvGeom, gweights: &mut [f32]) {
        let hp = g.h + g.k - 1;
        let wp = g.w + g.k - 1;
        assert!(xp.len() >= g.cin * hp * wp);
        assert!(gout.len() >= g.cout * g.h * g.w);
        assert!(gweights.len() >= g.cout * g.cin * g.k * g.k);
        for r0 in (0..g.h).step_by(ROW_BAND) {
            let r1 = (r0 + ROW_BAND).min(g.h);
            let mut co = 0;
            while co < g.cout {
                let cb = if g.cout - co >= 4 {
                    4
                } else if g.cout - co >= 2 {
                    2
                } else {
                    1
                };
                for ci in 0..g.cin {
                    for p in 0..g.k {
                        for q0 in (0..g.k).step_by(4) {
                            let nq = (g.k - q0).min(4);
                            let at = KgAt {
                                co0: co,
                                ci,
                                p,
                                q0,
                                r0,
                                r1,
                            };
                            // SAFETY: bounds asserted above, feature checked by the caller
                            unsafe {
                                match (cb, nq) {
                                    (4, 4) => kg_tile::<4, 4>(xp, gout, g, at, gweights),
                                    (4, 3) => kg_tile::<4, 3>(xp, gout, g, at, gweights),
                                    (4, 2) => kg_tile::<4, 2>(xp, gout, g, at, gweights),
                                    (4, _) => kg_tile::<4, 1>(xp, gout, g, at, gweights),
                                    (2, 4) => kg_tile::<2, 4>(xp, gout, g, at, gweights),
                                    (2, 3) => kg_tile::<2, 3>(xp, gout, g, at, gweights),
                                    (2, 2) => kg_tile::<2, 2>(xp, gout, g, at, gweights),
                                    (2, _) => kg_tile::<2, 1>(xp, gout, g, at, gweights),
                                    (_, 4) => kg_tile::<1, 4>(xp, gout, g, at, gweights),
                                    (_, 3) => kg_tile::<1, 3>(xp, gout, g, at, gweights),
                                    (_, 2) => kg_tile::<1, 2>(xp, gout, g, at, gweights),
                                    (_, _) => kg_tile::<1, 1>(xp, gout, g, at, gweights),
                                }
                            }
                        }
                    }
                }
                co += cb;
            }
        }
    }

    #[derive(Clone, Copy)]
    struct KgAt {
        co0: usize,
        ci: usize,
        p: usize,
        q0: usize,
        r0: usize,
        r1: usize,
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn kg_tile<const CB: usize, const NQ: usize>(
        xp: &[f32],
        gout: &[f32],
        g: ConvGeom,
        at: KgAt,
        gweights: &mut [f32],
    ) {
        let ConvGeom { cin, h, w, k, .. } = g;
        let hp = h + k - 1;
        let wp = w + k - 1;
        let KgAt { co0, ci, p, q0, r0, r1 } = at;
        let mut acc = [[_mm512_setzero_ps(); NQ]; CB];
        for i in r0..r1 {
            // SAFETY: row starts lie inside their slices; tails are masked
            let xrow = unsafe { xp.as_ptr().add((ci * hp + i + p) * wp + q0) };
            let mut j0 = 0;
            while j0 < w {
                let mask = tail_mask(w - j0);
                let mut gv = [_mm512_setzero_ps(); CB];
                for (b, v) in gv.iter_mut().enumerate() {
                    *v = unsafe { _mm512_maskz_loadu_ps(mask, gout.as_ptr().add(((co0 + b) * h + i) * w + j0)) };
                }
                for dq in 0..NQ {
                    let xv = unsafe { _mm512_maskz_loadu_ps(mask, xrow.add(j0 + dq)) };
                    for b in 0..CB {
                        acc[b][dq] = _mm512_fmadd_ps(gv[b], xv, acc[b][dq]);
                    }
                }
                j0 += 16;
            }
        }
        for b in 0..CB {
            for dq in 0..NQ {
                let idx = (((co0 + b) * cin + ci) * k + p) * k + q0 + dq;
                gweights[idx] += _mm512_reduce_add_ps(acc[b][dq]);
            }
        }
    }
}

/// Same-padded convolution of one sample `x [cin,h,w]`.
pub fn conv2d_same<T: Real>(x: &[T], weights: &[T], bias: &[T], g: ConvGeom, out: &mut [T]) {
    let xp = pad_input(x, g.cin, g.h, g.w, g.pad_before(), g.pad_after());
    conv_valid(&xp, weights, Some(bias), g, out);
}

/// Gradient of [`conv2d_same`] w.r.t. its input. This is itself a
/// convolution of the output gradient with the flipped, channel-swapped
/// kernel, padded the opposite way.
pub fn conv2d_same_grad_input<T: Real>(gout: &[T], weights: &[T], g: ConvGeom, gin: &mut [T]) {
    let mut tmp = vec![T::zero(); gin.len()];
    conv2d_same_grad_input_into(gout, weights, g, &mut tmp);
    gin.iter_mut().zip(&tmp).for_each(|(a, &b)| *a = *a + b);
}

/// As [`conv2d_same_grad_input`] but overwrites `gin`.
pub fn conv2d_same_grad_input_into<T: Real>(gout: &[T], weights: &[T], g: ConvGeom, gin: &mut [T]) {
    let (flipped, gp, swapped) = flipped_problem(gout, weights, g);
    conv_valid(&gp, &flipped, None, swapped, gin);
}

fn flipped_problem<T: Real>(gout: &[T], weights: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>, ConvGeom) {
    let k = g.k;
    let mut flipped = vec![T::zero(); weights.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for p in 0..k {
                for q in 0..k {
                    flipped[((ci * g.cout + co) * k + (k - 1 - p)) * k + (k - 1 - q)] =
                        weights[((co * g.cin + ci) * k + p) * k + q];
                }
            }
        }
    }
    let gp = pad_input(gout, g.cout, g.h, g.w, g.pad_after(), g.pad_before());
    (
        flipped,
        gp,
        ConvGeom {
            cin: g.cout,
            cout: g.cin,
            ..g
        },
    )
}

/// Gradient of [`conv2d_same`] w.r.t. kernels and bias (accumulated).
pub fn conv2d_same_grad_params<T: Real>(x: &[T], gout: &[T], g: ConvGeom, gweights: &mut [T], gbias: &mut [T]) {
    let ConvGeom { cin, cout, h, w, .. } = g;
    for co in 0..cout {
        let s: T = gout[co * h * w..(co + 1) * h * w].iter().copied().sum();
        gbias[co] = gbias[co] + s;
    }
    let xp = pad_input(x, cin, h, w, g.pad_before(), g.pad_after());
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(gout), Some(gw)) = (as_f32(&xp), as_f32(gout), as_f32_mut(gweights)) {
        if avx512::available() {
            // SAFETY: the CPU supports AVX-512F and the slice lengths match `g`
            unsafe { avx512::kernel_grad(xp, gout, g, gw) };
            return;
        }
    }
    let mut co = 0;
    while co < cout {
        let left = cout - co;
        if left >= 4 {
            kernel_grad_block::<T, 4>(&xp, gout, g, co, gweights);
            co += 4;
        } else if left >= 2 {
            kernel_grad_block::<T, 2>(&xp, gout, g, co, gweights);
            co += 2;
        } else {
            kernel_grad_block::<T, 1>(&xp, gout, g, co, gweights);
            co += 1;
        }
    }
}

fn kernel_grad_block<T: Real, const CB: usize>(xp: &[T], gout: &[T], g: ConvGeom, co0: usize, gweights: &mut [T]) {
    let ConvGeom { cin, h, w, k, .. } = g;
    let hp = h + k - 1;
    let wp = w + k - 1;
    for ci in 0..cin {
        for p in 0..k {
            for q0 in (0..k).step_by(4) {
                let nq = (k - q0).min(4);
                let mut acc = [[[T::zero(); LANES]; 4]; CB];
                let mut tail = [[T::zero(); 4]; CB];
                for i in 0..h {
                    let xrow = &xp[(ci * hp + i + p) * wp..(ci * hp + i + p + 1) * wp];
                    let mut j0 = 0;
                    while j0 + LANES <= w {
                        let mut gv = [[T::zero(); LANES]; CB];
                        for b in 0..CB {
                            let o = ((co0 + b) * h + i) * w + j0;
                            gv[b].copy_from_slice(&gout[o..o + LANES]);
                        }
                        for dq in 0..nq {
                            let q = q0 + dq;
                            let xv: &[T; LANES] = xrow[j0 + q..j0 + q + LANES].try_into().unwrap();
                            for b in 0..CB {
                                for l in 0..LANES {
                                    acc[b][dq][l] = fma(gv[b][l], xv[l], acc[b][dq][l]);
                                }
                            }
                        }
                        j0 += LANES;
                    }
                    for j in j0..w {
                        for b in 0..CB {
                            let gvs = gout[((co0 + b) * h + i) * w + j];
                            for dq in 0..nq {
                                tail[b][dq] = fma(gvs, xrow[j + q0 + dq], tail[b][dq]);
                            }
                        }
                    }
                }
                for b in 0..CB {
                    for dq in 0..nq {
                        let s = acc[b][dq].iter().fold(tail[b][dq], |s, &v| s + v);
                        let idx = (((co0 + b) * cin + ci) * k + p) * k + q0 + dq;
                        gweights[idx] = gweights[idx] + s;
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the flat input index of each
/// selected element (first maximum in row-major order on ties).
pub fn maxpool2x2<T: Real>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            let top = (ch * h + 2 * i) * w;
            let r0 = &x[top..top + 2 * ow];
            let r1 = &x[top + w..top + w + 2 * ow];
            let o = (ch * oh + i) * ow;
            let orow = &mut out[o..o + ow];
            let arow = &mut arg[o..o + ow];
            for j in 0..ow {
                let (a, b, cc, d) = (r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]);
                // strict comparisons keep the first maximum in row-major order
                let mut best = a;
                let mut at = top + 2 * j;
                if b > best {
                    best = b;
                    at = top + 2 * j + 1;
                }
                if cc > best {
                    best = cc;
                    at = top + w + 2 * j;
                }
                if d > best {
                    best = d;
                    at = top + w + 2 * j + 1;
                }
                orow[j] = best;
                arow[j] = at as u32;
            }
        }
    }
    arg
}

/// Bin boundaries `[start, end)` splitting `len` into `bins` near-equal,
/// non-overlapping pieces.
pub fn adaptive_bins(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins).map(|b| (b * len / bins, (b + 1) * len / bins)).collect()
}

pub fn adaptive_avgpool<T: Real>(x: &[T], c: usize, h: usize, w: usize, s: usize, out: &mut [T]) {
    let rb = adaptive_bins(h, s);
    let cb = adaptive_bins(w, s);
    for ch in 0..c {
        for (bi, &(r0, r1)) in rb.iter().enumerate() {
            for (bj, &(c0, c1)) in cb.iter().enumerate() {
                let mut sum = T::zero();
                for r in r0..r1 {
                    for v in &x[(ch * h + r) * w + c0..(ch * h + r) * w + c1] {
                        sum = sum + *v;
                    }
                }
                let count = T::lit(((r1 - r0) * (c1 - c0)) as f64);
                out[(ch * s + bi) * s + bj] = sum / count;
            }
        }
    }
}

pub fn adaptive_avgpool_grad<T: Real>(gout: &[T], c: usize, h: usize, w: usize, s: usize, gin: &mut [T]) {
    let rb = adaptive_bins(h, s);
    let cb = adaptive_bins(w, s);
    for ch in 0..c {
        for (bi, &(r0, r1)) in rb.iter().enumerate() {
            for (bj, &(c0, c1)) in cb.iter().enumerate() {
                let count = T::lit(((r1 - r0) * (c1 - c0)) as f64);
                let gv = gout[(ch * s + bi) * s + bj] / count;
                for r in r0..r1 {
                    for v in &mut gin[(ch * h + r) * w + c0..(ch * h + r) * w + c1] {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct same-padded correlation with explicit bounds checks.
    fn conv_reference(x: &[f64], wts: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
        let pb = g.pad_before() as isize;
        let mut out = vec![0.0; g.cout * g.h * g.w];
        for co in 0..g.cout {
            for i in 0..g.h {
                for j in 0..g.w {
                    let mut s = bias[co];
                    for ci in 0..g.cin {
                        for p in 0..g.k {
                            for q in 0..g.k {
                                let r = i as isize + p as isize - pb;
                                let c = j as isize + q as isize - pb;
                                if r >= 0 && c >= 0 && (r as usize) < g.h && (c as usize) < g.w {
                                    s += wts[((co * g.cin + ci) * g.k + p) * g.k + q]
                                        * x[(ci * g.h + r as usize) * g.w + c as usize];
                                }
                            }
                        }
                    }
                    out[(co * g.h + i) * g.w + j] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn blocked_conv_matches_reference() {
        for &(cin, cout, h, w, k) in &[
            (1, 4, 5, 37, 4),
            (3, 5, 7, 19, 3),
            (2, 8, 4, 16, 4),
            (4, 3, 6, 33, 5),
            (1, 1, 3, 3, 1),
        ] {
            let g = ConvGeom { cin, cout, h, w, k };
            let x = pseudo(cin * h * w, 1);
            let wts = pseudo(cout * cin * k * k, 2);
            let bias = pseudo(cout, 3);
            let mut out = vec![0.0; cout * h * w];
            conv2d_same(&x, &wts, &bias, g, &mut out);
            let want = conv_reference(&x, &wts, &bias, g);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_grads_match_adjoint_identity() {
        // <conv(x), g> must equal <x, conv_grad_input(g)> and <w, conv_grad_w>
        let g = ConvGeom {
            cin: 3,
            cout: 5,
            h: 6,
            w: 21,
            k: 4,
        };
        let x = pseudo(g.cin * g.h * g.w, 4);
        let wts = pseudo(g.cout * g.cin * 16, 5);
        let zero_bias = vec![0.0; g.cout];
        let gout = pseudo(g.cout * g.h * g.w, 6);
        let mut y = vec![0.0; gout.len()];
        conv2d_same(&x, &wts, &zero_bias, g, &mut y);
        let lhs: f64 = y.iter().zip(&gout).map(|(a, b)| a * b).sum();

        let mut gin = vec![0.0; x.len()];
        conv2d_same_grad_input(&gout, &wts, g, &mut gin);
        let rhs_x: f64 = gin.iter().zip(&x).map(|(a, b)| a * b).sum();

        let mut gw = vec![0.0; wts.len()];
        let mut gb = vec![0.0; g.cout];
        conv2d_same_grad_params(&x, &gout, g, &mut gw, &mut gb);
        let rhs_w: f64 = gw.iter().zip(&wts).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn f32_fast_path_matches_f64() {
        // shapes hit full tiles, single vectors and masked tails
        for &(cin, cout, h, w, k) in &[
            (1, 4, 6, 70, 4),
            (4, 8, 5, 39, 4),
            (3, 11, 4, 17, 3),
            (2, 1, 3, 5, 2),
            (5, 16, 3, 98, 4),
        ] {
            let g = ConvGeom { cin, cout, h, w, k };
            let x = pseudo(cin * h * w, 7);
            let wts = pseudo(cout * cin * k * k, 8);
            let bias = pseudo(cout, 9);
            let gout = pseudo(cout * h * w, 10);
            let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();

            let mut y64 = vec![0.0; cout * h * w];
            conv2d_same(&x, &wts, &bias, g, &mut y64);
            let mut y32 = vec![0f32; cout * h * w];
            conv2d_same(&f(&x), &f(&wts), &f(&bias), g, &mut y32);
            for (a, b) in y32.iter().zip(&y64) {
                assert!((*a as f64 - b).abs() < 1e-4, "{g:?} forward");
            }

            let mut gi64 = vec![0.0; x.len()];
            conv2d_same_grad_input(&gout, &wts, g, &mut gi64);
            let mut gi32 = vec![0f32; x.len()];
            conv2d_same_grad_input_into(&f(&gout), &f(&wts), g, &mut gi32);
            for (a, b) in gi32.iter().zip(&gi64) {
                assert!((*a as f64 - b).abs() < 1e-4, "{g:?} grad input");
            }

            let (mut gw64, mut gb64) = (vec![0.0; wts.len()], vec![0.0; cout]);
            conv2d_same_grad_params(&x, &gout, g, &mut gw64, &mut gb64);
            let (mut gw32, mut gb32) = (vec![0f32; wts.len()], vec![0f32; cout]);
            conv2d_same_grad_params(&f(&x), &f(&gout), g, &mut gw32, &mut gb32);
            for (a, b) in gw32.iter().zip(&gw64).chain(gb32.iter().zip(&gb64)) {
                assert!((*a as f64 - b).abs() < 1e-3, "{g:?} grad params");
            }
        }
    }

    #[test]
    fn maxpool_picks_argmax_positions() {
        let x = [0.0f32, 5.0, 1.0, 2.0, 3.0, -1.0, 9.0, 2.0, 7.0, 1.0, 1.0, 0.0];
        let mut out = [0.0f32; 3];
        let arg = maxpool2x2(&x, 1, 2, 6, &mut out);
        assert_eq!(out, [9.0, 7.0, 3.0]);
        assert_eq!(arg, vec![6, 8, 4]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let arg = maxpool2x2(&x, 1, 2, 2, &mut out);
        assert_eq!(arg, vec![0]);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn adaptive_bins_partition() {
        let bins = adaptive_bins(49, 3);
        assert_eq!(bins, vec![(0, 16), (16, 32), (32, 49)]);
        assert_eq!(adaptive_bins(5, 5), (0..5).map(|i| (i, i + 1)).collect::<Vec<_>>());
    }

    #[test]
    fn dot_and_matmul() {
        let x: Vec<f64> = (0..37).map(|v| v as f64).collect();
        let naive: f64 = x.iter().map(|v| v * v).sum();
        assert_eq!(dot(&x, &x), naive);
        let a = [1.0, 2.0, 3.0, 4.0];
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul(&a, &id, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }
}
