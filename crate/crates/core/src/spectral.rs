//! The two linear transforms behind the wavelet and Fourier mixers.
//!
//! Haar DWT: orthonormal, on disjoint 2x2 blocks [[a,b],[c,d]]:
//!   LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2.
//! The transform matrix is symmetric with square 4I, so the inverse applies
//! the same coefficients. LH carries vertical detail under this convention.
//!
//! DFT: unnormalized forward (inverse would carry 1/(H*W)), computed
//! separably through cos/sin tables as plain matrix products. Parseval reads
//! sum|X|^2 = H*W * sum|x|^2.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One decomposition level. All four subbands are [N,C,H/2,W/2].
#[derive(Clone, Debug)]
pub struct WaveletSubbands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    /// 1-based level in a multilevel decomposition.
    pub level: usize,
}

#[derive(Clone, Debug)]
pub struct Spectrum2D<T> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
}

impl<T: Scalar> WaveletSubbands<T> {
    pub fn total_energy(&self) -> f64 {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }
}

fn expect_nchw<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(op, format!("need [N,C,H,W], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]))
}

/// One plane, row width `w`, into the four subband buffers (LL, LH, HL, HH).
pub(crate) fn haar_plane_fwd<T: Scalar>(plane: &[T], w: usize, sub: &mut [Vec<T>; 4]) {
    let h = plane.len() / w;
    let ww = w / 2;
    let half = T::from_f64(0.5);
    for by in 0..h / 2 {
        let r0 = &plane[2 * by * w..][..w];
        let r1 = &plane[(2 * by + 1) * w..][..w];
        for bx in 0..ww {
            let (a, b) = (r0[2 * bx], r0[2 * bx + 1]);
            let (c, d) = (r1[2 * bx], r1[2 * bx + 1]);
            let i = by * ww + bx;
            sub[0][i] = (a + b + c + d) * half;
            sub[1][i] = (a + b - c - d) * half;
            sub[2][i] = (a - b + c - d) * half;
            sub[3][i] = (a - b - c + d) * half;
        }
    }
}

/// Inverse of [`haar_plane_fwd`]; `plane` width is `w`, subbands are w/2 wide.
pub(crate) fn haar_plane_inv<T: Scalar>(sub: &[&[T]; 4], w: usize, plane: &mut [T]) {
    let h = plane.len() / w;
    let ww = w / 2;
    let half = T::from_f64(0.5);
    for by in 0..h / 2 {
        for bx in 0..ww {
            let i = by * ww + bx;
            let (ll, lh, hl, hh) = (sub[0][i], sub[1][i], sub[2][i], sub[3][i]);
            plane[2 * by * w + 2 * bx] = (ll + lh + hl + hh) * half;
            plane[2 * by * w + 2 * bx + 1] = (ll + lh - hl - hh) * half;
            plane[(2 * by + 1) * w + 2 * bx] = (ll - lh + hl - hh) * half;
            plane[(2 * by + 1) * w + 2 * bx + 1] = (ll - lh - hl + hh) * half;
        }
    }
}

pub fn dwt2_haar<T: Scalar>(x: &Tensor<T>) -> Result<WaveletSubbands<T>> {
    let (n, c, h, w) = expect_nchw(x, "dwt2_haar")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("dwt2_haar", format!("spatial dims {h}x{w} must be even; pad the input first")));
    }
    let (hh, ww) = (h / 2, w / 2);
    let shape = [n, c, hh, ww];
    let mut out: [Tensor<T>; 4] = std::array::from_fn(|_| Tensor::zeros(&shape));
    let mut sub = [vec![T::ZERO; hh * ww], vec![T::ZERO; hh * ww], vec![T::ZERO; hh * ww], vec![T::ZERO; hh * ww]];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..][..h * w];
        haar_plane_fwd(plane, w, &mut sub);
        for (t, buf) in out.iter_mut().zip(&sub) {
            t.data_mut()[p * hh * ww..(p + 1) * hh * ww].copy_from_slice(buf);
        }
    }
    let [ll, lh, hl, hh_t] = out;
    Ok(WaveletSubbands { ll, lh, hl, hh: hh_t, level: 1 })
}

pub fn idwt2_haar<T: Scalar>(s: &WaveletSubbands<T>) -> Result<Tensor<T>> {
    let (n, c, hh, ww) = expect_nchw(&s.ll, "idwt2_haar")?;
    for (name, t) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        if t.shape() != s.ll.shape() {
            return Err(Error::shape("idwt2_haar", format!("{name} {:?} vs ll {:?}", t.shape(), s.ll.shape())));
        }
    }
    let (h, w) = (hh * 2, ww * 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let sub: [&[T]; 4] = [
            &s.ll.data()[p * hh * ww..][..hh * ww],
            &s.lh.data()[p * hh * ww..][..hh * ww],
            &s.hl.data()[p * hh * ww..][..hh * ww],
            &s.hh.data()[p * hh * ww..][..hh * ww],
        ];
        let plane = &mut out.data_mut()[p * h * w..][..h * w];
        haar_plane_inv(&sub, w, plane);
    }
    Ok(out)
}

/// Level k+1 decomposes level k's LL. Result is ordered shallow to deep.
pub fn dwt2_multilevel<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<Vec<WaveletSubbands<T>>> {
    let (_, _, h, w) = expect_nchw(x, "dwt2_multilevel")?;
    if levels == 0 {
        return Err(Error::config("levels", "must be >= 1"));
    }
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape("dwt2_multilevel", format!("{h}x{w} not divisible by 2^{levels}")));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for level in 1..=levels {
        let mut s = dwt2_haar(&cur)?;
        s.level = level;
        cur = s.ll.clone();
        out.push(s);
    }
    Ok(out)
}

/// Exact inverse of [`dwt2_multilevel`]: reconstruct deepest-first, feeding
/// each reconstruction in as the LL of the level above.
pub fn idwt2_multilevel<T: Scalar>(levels: &[WaveletSubbands<T>]) -> Result<Tensor<T>> {
    let Some(deepest) = levels.last() else {
        return Err(Error::Empty { what: "subband list".into() });
    };
    let mut cur = idwt2_haar(deepest)?;
    for s in levels.iter().rev().skip(1) {
        let merged = WaveletSubbands { ll: cur, lh: s.lh.clone(), hl: s.hl.clone(), hh: s.hh.clone(), level: s.level };
        cur = idwt2_haar(&merged)?;
    }
    Ok(cur)
}

/// cos/sin tables for the separable DFT. Entry [i,j] = cos/sin(2π·(i·j mod n)/n);
/// the mod keeps the tables exactly symmetric and periodic.
pub struct DftTables<T> {
    pub h: usize,
    pub w: usize,
    cos_h: Vec<T>,
    sin_h: Vec<T>,
    cos_w: Vec<T>,
    sin_w: Vec<T>,
}

impl<T: Scalar> DftTables<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let build = |n: usize| {
            let mut cos_t = vec![T::ZERO; n * n];
            let mut sin_t = vec![T::ZERO; n * n];
            for i in 0..n {
                for j in 0..n {
                    let k = (i * j) % n;
                    // Quarter turns get exact values; libm sin(pi) is ~1e-16,
                    // which would leak into analytically zero bins.
                    let (c, s) = if (4 * k) % n == 0 {
                        [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][(4 * k / n) % 4]
                    } else {
                        let ang = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                        (ang.cos(), ang.sin())
                    };
                    cos_t[i * n + j] = T::from_f64(c);
                    sin_t[i * n + j] = T::from_f64(s);
                }
            }
            (cos_t, sin_t)
        };
        let (cos_h, sin_h) = build(h);
        let (cos_w, sin_w) = if w == h { (cos_h.clone(), sin_h.clone()) } else { build(w) };
        DftTables { h, w, cos_h, sin_h, cos_w, sin_w }
    }
}

/// Unnormalized DFT of one [h,w] plane:
/// X[u,v] = Σ_{y,x} x[y,x] · e^{-2πi(uy/h + vx/w)}. Returns (re, im).
pub(crate) fn dft2_plane<T: Scalar>(x: &[T], h: usize, w: usize, t: &DftTables<T>) -> (Vec<T>, Vec<T>) {
    use crate::kernels::matmul;
    debug_assert_eq!(x.len(), h * w);
    // Pass 1 along x: A = Ar - i·B with Ar = x·Cw, B = x·Sw.
    let mut ar = vec![T::ZERO; h * w];
    let mut b = vec![T::ZERO; h * w];
    matmul(x, &t.cos_w, &mut ar, h, w, w);
    matmul(x, &t.sin_w, &mut b, h, w, w);
    // Pass 2 along y: Re = Ch·Ar - Sh·B, Im = -(Ch·B + Sh·Ar).
    let mut re = vec![T::ZERO; h * w];
    let mut tmp = vec![T::ZERO; h * w];
    matmul(&t.cos_h, &ar, &mut re, h, h, w);
    matmul(&t.sin_h, &b, &mut tmp, h, h, w);
    for (r, &s) in re.iter_mut().zip(&tmp) {
        *r -= s;
    }
    let mut im = vec![T::ZERO; h * w];
    matmul(&t.cos_h, &b, &mut im, h, h, w);
    matmul(&t.sin_h, &ar, &mut im, h, h, w);
    for v in im.iter_mut() {
        *v = -*v;
    }
    (re, im)
}

/// The map x -> Re(DFT2(x)) on one plane. Its matrix kernel
/// cos(2π(uy/h + vx/w)) is symmetric in (u,v)<->(y,x), i.e. the map is
/// self-adjoint: this is both the fourier mixer and its backward pass.
pub(crate) fn cos_mix_plane<T: Scalar>(x: &[T], h: usize, w: usize, t: &DftTables<T>) -> Vec<T> {
    use crate::kernels::matmul;
    let mut p1c = vec![T::ZERO; h * w];
    let mut p1s = vec![T::ZERO; h * w];
    matmul(x, &t.cos_w, &mut p1c, h, w, w);
    matmul(x, &t.sin_w, &mut p1s, h, w, w);
    let mut out = vec![T::ZERO; h * w];
    let mut tmp = vec![T::ZERO; h * w];
    matmul(&t.cos_h, &p1c, &mut out, h, h, w);
    matmul(&t.sin_h, &p1s, &mut tmp, h, h, w);
    for (o, &s) in out.iter_mut().zip(&tmp) {
        *o -= s;
    }
    out
}

/// Unnormalized 2D DFT over the spatial axes of [N,C,H,W].
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Result<Spectrum2D<T>> {
    let (_, _, h, w) = expect_nchw(x, "dft2")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("dft2", "empty spatial extent"));
    }
    let t = DftTables::new(h, w);
    let mut real = Tensor::zeros(x.shape());
    let mut imag = Tensor::zeros(x.shape());
    for p in 0..x.numel() / (h * w) {
        let (re, im) = dft2_plane(&x.data()[p * h * w..][..h * w], h, w, &t);
        real.data_mut()[p * h * w..(p + 1) * h * w].copy_from_slice(&re);
        imag.data_mut()[p * h * w..(p + 1) * h * w].copy_from_slice(&im);
    }
    Ok(Spectrum2D { real, imag })
}

/// Real part of [`dft2`], the FNet-style mixing map.
pub fn fourier_mix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(dft2(x)?.real)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(vals: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn haar_2x2_analytic() {
        let s = dwt2_haar(&plane(&[1.0, 2.0, 3.0, 4.0], 2, 2)).unwrap();
        assert_eq!(s.ll.data(), &[5.0]);
        assert_eq!(s.lh.data(), &[-2.0]);
        assert_eq!(s.hl.data(), &[-1.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    #[test]
    fn haar_constant_kills_details() {
        let s = dwt2_haar(&plane(&[1.0; 4], 2, 2)).unwrap();
        assert_eq!(s.ll.data(), &[2.0]);
        assert_eq!(s.lh.data(), &[0.0]);
        assert_eq!(s.hl.data(), &[0.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    #[test]
    fn haar_rejects_odd_dims() {
        let err = dwt2_haar(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("pad"), "error should instruct caller to pad: {err}");
    }

    #[test]
    fn idwt_of_zero_subbands_is_zero() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let s = WaveletSubbands { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z, level: 1 };
        assert!(idwt2_haar(&s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_is_pure_ll() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 3.0);
        let mut s = dwt2_haar(&x).unwrap();
        assert!(s.lh.data().iter().all(|&v| v == 0.0));
        // Zeroing the (already zero) details and inverting returns the image.
        s.lh = Tensor::zeros(s.ll.shape());
        s.hl = Tensor::zeros(s.ll.shape());
        s.hh = Tensor::zeros(s.ll.shape());
        let back = idwt2_haar(&s).unwrap();
        assert!(back.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn multilevel_level1_equals_single() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i as f64).sin());
        let multi = dwt2_multilevel(&x, 1).unwrap();
        let single = dwt2_haar(&x).unwrap();
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].ll.data(), single.ll.data());
        assert_eq!(multi[0].hh.data(), single.hh.data());
    }

    #[test]
    fn multilevel_constant_concentrates_in_deepest_ll() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 1.0);
        let levels = dwt2_multilevel(&x, 3).unwrap();
        for s in &levels[..2] {
            assert!(s.lh.data().iter().all(|&v| v == 0.0));
        }
        let deepest = levels.last().unwrap();
        // Each level doubles the LL amplitude: 1 -> 2 -> 4 -> 8.
        assert_eq!(deepest.ll.data(), &[8.0]);
    }

    #[test]
    fn multilevel_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(dwt2_multilevel(&x, 3).is_err());
    }

    #[test]
    fn dft_2x2_analytic() {
        let s = dft2(&plane(&[1.0, 2.0, 3.0, 4.0], 2, 2)).unwrap();
        let re: Vec<f64> = s.real.data().to_vec();
        let im_max = s.imag.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (got, want) in re.iter().zip(&[10.0, -2.0, -4.0, 0.0]) {
            assert!((got - want).abs() < 1e-12, "re {re:?}");
        }
        assert!(im_max < 1e-12);
    }

    #[test]
    fn dft_constant_is_pure_dc() {
        let c = 0.7;
        let s = dft2(&Tensor::<f64>::full(&[1, 1, 4, 4], c)).unwrap();
        assert!((s.real.data()[0] - 16.0 * c).abs() < 1e-10);
        for &v in &s.real.data()[1..] {
            assert!(v.abs() < 1e-10);
        }
        assert!(s.imag.data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn fourier_mix_is_real_part_of_dft() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| ((i * 37 % 11) as f64) / 11.0 - 0.5);
        let mixed = fourier_mix(&x).unwrap();
        let full = dft2(&x).unwrap();
        assert_eq!(mixed.data(), full.real.data());
    }
}
