//! Raw numeric kernels on flat slices. Shape checking happens in the tape
//! layer; these assume consistent dims (debug asserts only).
//!
//! Two rules govern every kernel:
//! - The innermost loop runs over independent contiguous outputs, so LLVM can
//!   vectorize without reassociating floating-point reductions.
//! - Parallel splits are per disjoint output region with sequential inner
//!   accumulation, so results are bit-identical at any rayon thread count.
//!
//! Convolution is direct (blocked loops). No im2col buffers, no FFT path.
//! Strided convs subsample the strided operand into per-phase planes first so
//! every tap still reduces over contiguous rows.

use crate::tensor::Scalar;
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;

/// out[m,n] = a[m,k] · b[k,n]. `out` must be zeroed (or hold a partial sum to
/// accumulate onto).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |orow: &mut [T], arow: &[T]| {
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            row(orow, arow);
        }
    } else {
        out.par_chunks_exact_mut(n).zip(a.par_chunks_exact(k)).for_each(|(orow, arow)| row(orow, arow));
    }
}

/// Batched out[b,m,n] = a[b,m,k] · bm[b,k,n].
pub fn matmul_batched<T: Scalar>(a: &[T], bm: &[T], out: &mut [T], batch: usize, m: usize, k: usize, n: usize) {
    let work = batch * m * k * n;
    let body = |(ob, (ab, bb)): (&mut [T], (&[T], &[T]))| {
        for (orow, arow) in ob.chunks_exact_mut(n).zip(ab.chunks_exact(k)) {
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bb[kk * n..kk * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    };
    if work < PAR_THRESHOLD {
        out.chunks_exact_mut(m * n).zip(a.chunks_exact(m * k).zip(bm.chunks_exact(k * n))).for_each(body);
    } else {
        out.par_chunks_exact_mut(m * n)
            .zip(a.par_chunks_exact(m * k).zip(bm.par_chunks_exact(k * n)))
            .for_each(body);
    }
}

/// Geometry of one conv application, shared by forward and both backward
/// passes so the index math exists exactly once.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
    /// Output range [lo, hi) with 0 <= o*stride + koff - pad < extent.
    fn valid_range(&self, koff: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if koff >= self.pad { 0 } else { (self.pad - koff).div_ceil(self.stride) };
        let last_in = extent + self.pad - 1;
        let hi = if last_in < koff { 0 } else { ((last_in - koff) / self.stride + 1).min(out_extent) };
        (lo, hi.max(lo))
    }
}

/// Split tap offset koff − pad into s·q + r with r ∈ [0, s), so an input index
/// o·s + koff − pad lands at row o + q of phase plane r.
fn tap_phase(koff: usize, pad: usize, s: usize) -> (usize, isize) {
    let t = koff as isize - pad as isize;
    let r = t.rem_euclid(s as isize);
    (r as usize, (t - r) / s as isize)
}

/// Subsample every [h, w] plane into s² phase planes laid out
/// [plane, ry, rx, ceil(h/s), ceil(w/s)], zero padded. Strided convs read taps
/// from these planes so their inner loops stay contiguous like stride 1.
fn phase_split<T: Scalar>(x: &[T], h: usize, w: usize, s: usize) -> Vec<T> {
    let (hs, ws) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![T::ZERO; x.len() / (h * w) * s * s * hs * ws];
    for (p, xp) in x.chunks_exact(h * w).enumerate() {
        for iy in 0..h {
            let xrow = &xp[iy * w..iy * w + w];
            let (ry, a) = (iy % s, iy / s);
            for rx in 0..s.min(w) {
                let cnt = (w - rx).div_ceil(s);
                let dst = &mut out[((p * s + ry) * s + rx) * hs * ws + a * ws..][..cnt];
                for (b, o) in dst.iter_mut().enumerate() {
                    *o = xrow[rx + b * s];
                }
            }
        }
    }
    out
}

/// y[n,oc,oy,ox] = Σ k[oc,ic,ky,kx] · x[n, g·Cg+ic, oy·s+ky−p, ox·s+kx−p].
/// `out` must be zeroed.
pub fn conv2d_fwd<T: Scalar>(x: &[T], k: &[T], out: &mut [T], d: ConvDims) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (cig, cog) = (d.in_per_group(), d.out_per_group());
    debug_assert_eq!(x.len(), d.n * d.c_in * d.h * d.w);
    debug_assert_eq!(k.len(), d.c_out * cig * d.kh * d.kw);
    debug_assert_eq!(out.len(), d.n * d.c_out * ho * wo);
    let s = d.stride;
    let (hs, ws) = (d.h.div_ceil(s), d.w.div_ceil(s));
    let phases = if s > 1 { phase_split(x, d.h, d.w, s) } else { Vec::new() };

    // One task per (n, oc) output plane; all accumulation inside is sequential.
    let plane = |idx: usize, oplane: &mut [T]| {
        let (n, oc) = (idx / d.c_out, idx % d.c_out);
        let g = oc / cog;
        for ic in 0..cig {
            let pidx = n * d.c_in + g * cig + ic;
            let kbase = ((oc * cig) + ic) * d.kh * d.kw;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = d.valid_range(ky, d.h, ho);
                let (ry, qy) = tap_phase(ky, d.pad, s);
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = d.valid_range(kx, d.w, wo);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let wv = k[kbase + ky * d.kw + kx];
                    if s == 1 {
                        let xplane = &x[pidx * d.h * d.w..][..d.h * d.w];
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - d.pad;
                            let xrow = &xplane[iy * d.w + (ox_lo + kx - d.pad)..][..len];
                            let orow = &mut oplane[oy * wo + ox_lo..][..len];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    } else {
                        let (rx, qx) = tap_phase(kx, d.pad, s);
                        let pp = &phases[((pidx * s + ry) * s + rx) * hs * ws..][..hs * ws];
                        let b0 = (ox_lo as isize + qx) as usize;
                        for oy in oy_lo..oy_hi {
                            let a = (oy as isize + qy) as usize;
                            let xrow = &pp[a * ws + b0..][..len];
                            let orow = &mut oplane[oy * wo + ox_lo..][..len];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    };
    let work = d.n * d.c_out * ho * wo * cig * d.kh * d.kw;
    if work < PAR_THRESHOLD {
        out.chunks_exact_mut(ho * wo).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        out.par_chunks_exact_mut(ho * wo).enumerate().for_each(|(i, p)| plane(i, p));
    }
}

/// dx[n,ic,iy,ix] += Σ dy[n,oc,oy,ox] · k[oc,ic,ky,kx] for the matching conv.
/// Also the forward pass of transposed conv (kernel layout [Cin, Cout, kh, kw]
/// there, with x playing dy's role). `dx` must be zeroed.
pub fn conv2d_bwd_x<T: Scalar>(dy: &[T], k: &[T], dx: &mut [T], d: ConvDims) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (cig, cog) = (d.in_per_group(), d.out_per_group());
    debug_assert_eq!(dy.len(), d.n * d.c_out * ho * wo);
    debug_assert_eq!(dx.len(), d.n * d.c_in * d.h * d.w);

    let s = d.stride;
    let (hs, ws) = (d.h.div_ceil(s), d.w.div_ceil(s));

    // One task per (n, ic) input plane: iterate every oc feeding it. For
    // stride > 1 the adds land in local phase planes (contiguous rows) and get
    // interleaved back into the real layout once at the end.
    let plane = |idx: usize, xplane: &mut [T]| {
        let (n, ic_abs) = (idx / d.c_in, idx % d.c_in);
        let (g, ic) = (ic_abs / cig, ic_abs % cig);
        let mut acc = if s > 1 { vec![T::ZERO; s * s * hs * ws] } else { Vec::new() };
        for oc_in_g in 0..cog {
            let oc = g * cog + oc_in_g;
            let yplane = &dy[(n * d.c_out + oc) * ho * wo..][..ho * wo];
            let kbase = ((oc * cig) + ic) * d.kh * d.kw;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = d.valid_range(ky, d.h, ho);
                let (ry, qy) = tap_phase(ky, d.pad, s);
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = d.valid_range(kx, d.w, wo);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let wv = k[kbase + ky * d.kw + kx];
                    if s == 1 {
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - d.pad;
                            let yrow = &yplane[oy * wo + ox_lo..][..len];
                            let xrow = &mut xplane[iy * d.w + (ox_lo + kx - d.pad)..][..len];
                            for (o, &yv) in xrow.iter_mut().zip(yrow) {
                                *o += wv * yv;
                            }
                        }
                    } else {
                        let (rx, qx) = tap_phase(kx, d.pad, s);
                        let ap = &mut acc[(ry * s + rx) * hs * ws..][..hs * ws];
                        let b0 = (ox_lo as isize + qx) as usize;
                        for oy in oy_lo..oy_hi {
                            let a = (oy as isize + qy) as usize;
                            let yrow = &yplane[oy * wo + ox_lo..][..len];
                            let arow = &mut ap[a * ws + b0..][..len];
                            for (o, &yv) in arow.iter_mut().zip(yrow) {
                                *o += wv * yv;
                            }
                        }
                    }
                }
            }
        }
        if s > 1 {
            for iy in 0..d.h {
                let (ry, a) = (iy % s, iy / s);
                let xrow = &mut xplane[iy * d.w..][..d.w];
                for rx in 0..s.min(d.w) {
                    let cnt = (d.w - rx).div_ceil(s);
                    let src = &acc[(ry * s + rx) * hs * ws + a * ws..][..cnt];
                    for (b, &v) in src.iter().enumerate() {
                        xrow[rx + b * s] += v;
                    }
                }
            }
        }
    };
    let work = d.n * d.c_in * d.h * d.w * cog * d.kh * d.kw;
    if work < PAR_THRESHOLD {
        dx.chunks_exact_mut(d.h * d.w).enumerate().for_each(|(i, p)| plane(i, p));
    } else {
        dx.par_chunks_exact_mut(d.h * d.w).enumerate().for_each(|(i, p)| plane(i, p));
    }
}

/// dk[oc,ic,ky,kx] += Σ_{n,oy,ox} dy[n,oc,oy,ox] · x[n, g·Cg+ic, oy·s+ky−p, ox·s+kx−p].
/// `dk` must be zeroed.
pub fn conv2d_bwd_k<T: Scalar>(x: &[T], dy: &[T], dk: &mut [T], d: ConvDims) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (cig, cog) = (d.in_per_group(), d.out_per_group());
    debug_assert_eq!(dk.len(), d.c_out * cig * d.kh * d.kw);
    let s = d.stride;
    let (hs, ws) = (d.h.div_ceil(s), d.w.div_ceil(s));
    let phases = if s > 1 { phase_split(x, d.h, d.w, s) } else { Vec::new() };

    // One task per oc: the reduction over (n, oy, ox) stays sequential, so the
    // result is independent of thread count.
    let per_oc = |oc: usize, dkslice: &mut [T]| {
        let g = oc / cog;
        for n in 0..d.n {
            let yplane = &dy[(n * d.c_out + oc) * ho * wo..][..ho * wo];
            for ic in 0..cig {
                let pidx = n * d.c_in + g * cig + ic;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = d.valid_range(ky, d.h, ho);
                    let (ry, qy) = tap_phase(ky, d.pad, s);
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = d.valid_range(kx, d.w, wo);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let mut acc = T::ZERO;
                        if s == 1 {
                            let xplane = &x[pidx * d.h * d.w..][..d.h * d.w];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - d.pad;
                                let yrow = &yplane[oy * wo + ox_lo..][..len];
                                let xrow = &xplane[iy * d.w + (ox_lo + kx - d.pad)..][..len];
                                for (&yv, &xv) in yrow.iter().zip(xrow) {
                                    acc += yv * xv;
                                }
                            }
                        } else {
                            let (rx, qx) = tap_phase(kx, d.pad, s);
                            let pp = &phases[((pidx * s + ry) * s + rx) * hs * ws..][..hs * ws];
                            let b0 = (ox_lo as isize + qx) as usize;
                            for oy in oy_lo..oy_hi {
                                let a = (oy as isize + qy) as usize;
                                let yrow = &yplane[oy * wo + ox_lo..][..len];
                                let xrow = &pp[a * ws + b0..][..len];
                                for (&yv, &xv) in yrow.iter().zip(xrow) {
                                    acc += yv * xv;
                                }
                            }
                        }
                        dkslice[ic * d.kh * d.kw + ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    };
    let work = d.n * d.c_out * ho * wo * cig * d.kh * d.kw;
    if work < PAR_THRESHOLD {
        dk.chunks_exact_mut(cig * d.kh * d.kw).enumerate().for_each(|(oc, s)| per_oc(oc, s));
    } else {
        dk.par_chunks_exact_mut(cig * d.kh * d.kw).enumerate().for_each(|(oc, s)| per_oc(oc, s));
    }
}

/// Add per-channel bias onto an [N, C, S] activation (S = spatial elems).
pub fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, s: usize) {
    debug_assert_eq!(out.len(), n * c * s);
    debug_assert_eq!(bias.len(), c);
    for plane in out.chunks_exact_mut(s * c) {
        for (ch, p) in plane.chunks_exact_mut(s).enumerate() {
            let b = bias[ch];
            for v in p {
                *v += b;
            }
        }
    }
}

/// db[ch] += Σ_{n, spatial} dy[n, ch, ...].
pub fn channel_bias_grad<T: Scalar>(dy: &[T], db: &mut [T], n: usize, c: usize, s: usize) {
    debug_assert_eq!(dy.len(), n * c * s);
    debug_assert_eq!(db.len(), c);
    for plane in dy.chunks_exact(s * c) {
        for (ch, p) in plane.chunks_exact(s).enumerate() {
            let mut acc = T::ZERO;
            for &v in p {
                acc += v;
            }
            db[ch] += acc;
        }
    }
}
