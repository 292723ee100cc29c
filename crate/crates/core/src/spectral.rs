//! Frequency-domain checks of the gradient filter.
//!
//! Two things live here: the SNR comparison between the filtered output
//! gradient and the resulting input gradient for a single patch under
//! circular convolution, and the DC-to-AC energy ratio of convolution
//! kernels. SNR is measured in the spatial domain,
//! `‖ref‖² / ‖ref − approx‖²`, which by Parseval equals the spectral ratio
//! without fixing a DFT normalisation.
//!
//! The DFT is the naive `O((HW)²)` unnormalised transform; maps here are
//! at most a few dozen pixels on a side.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::tensor::{rot180, Kernel4, Tensor4};

/// Relative floor under which an energy counts as zero.
const ZERO_ENERGY: f64 = 1e-15;

/// Dense real 2D map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return shape_err(format!("map {h}x{w} with {} values", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    /// Kernel taps of one channel pair as a map.
    pub fn from_kernel(k: &Kernel4, co: usize, ci: usize) -> Self {
        let (kh, kw) = k.kernel_hw();
        Self {
            h: kh,
            w: kw,
            data: k.taps(co, ci).to_vec(),
        }
    }

    /// Copies `self` into the top-left corner of an `h×w` zero map.
    pub fn zero_extend(&self, h: usize, w: usize) -> Result<Self> {
        if self.h > h || self.w > w {
            return shape_err(format!("cannot extend {}x{} to {h}x{w}", self.h, self.w));
        }
        Ok(Self::from_fn(h, w, |i, j| {
            if i < self.h && j < self.w {
                self.at(i, j)
            } else {
                0.0
            }
        }))
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Unnormalised 2D DFT values, row-major over `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2 {
    pub h: usize,
    pub w: usize,
    pub values: Vec<Complex64>,
}

impl Spectrum2 {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.values[u * self.w + v]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum()
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

fn dft2_complex(h: usize, w: usize, input: &[Complex64], sign: f64) -> Vec<Complex64> {
    let th = twiddles(h, sign);
    let tw = twiddles(w, sign);
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..h {
                let row = th[(u * i) % h];
                for j in 0..w {
                    acc += input[i * w + j] * row * tw[(v * j) % w];
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// `X[u,v] = Σ_{h,w} x[h,w]·exp(−2πi(uh/H + vw/W))`.
pub fn dft2(map: &Map2) -> Spectrum2 {
    let input: Vec<Complex64> = map.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Spectrum2 {
        h: map.h,
        w: map.w,
        values: dft2_complex(map.h, map.w, &input, -1.0),
    }
}

/// Inverse of [`dft2`], keeping the real part.
pub fn idft2(spec: &Spectrum2) -> Map2 {
    let n = (spec.h * spec.w) as f64;
    let out = dft2_complex(spec.h, spec.w, &spec.values, 1.0);
    Map2 {
        h: spec.h,
        w: spec.w,
        data: out.iter().map(|z| z.re / n).collect(),
    }
}

/// Cyclic convolution of `a` with `b`, `b` zero-extended to `a`'s dims:
/// `c[h,w] = Σ_{u,v} a[(h−u) mod H, (w−v) mod W] · b[u,v]`.
pub fn circular_conv2(a: &Map2, b: &Map2) -> Result<Map2> {
    if b.h > a.h || b.w > a.w {
        return shape_err(format!("kernel {}x{} larger than map {}x{}", b.h, b.w, a.h, a.w));
    }
    let (h, w) = (a.h, a.w);
    Ok(Map2::from_fn(h, w, |i, j| {
        let mut acc = 0.0;
        for u in 0..b.h {
            let ai = (i + h - u) % h;
            for v in 0..b.w {
                acc += a.at(ai, (j + w - v) % w) * b.at(u, v);
            }
        }
        acc
    }))
}

fn snr_from_slices(reference: &[f64], approx: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise.sqrt() <= ZERO_ENERGY * signal.sqrt() {
        f64::INFINITY
    } else {
        signal / noise
    }
}

/// `‖reference‖² / ‖reference − approx‖²`; `+inf` when the error is
/// negligible against the reference.
pub fn measure_snr(reference: &Tensor4, approx: &Tensor4) -> Result<f64> {
    if reference.dims() != approx.dims() {
        return shape_err(format!(
            "measure_snr: {:?} vs {:?}",
            reference.dims(),
            approx.dims()
        ));
    }
    Ok(snr_from_slices(reference.data(), approx.data()))
}

pub fn measure_snr_map(reference: &Map2, approx: &Map2) -> Result<f64> {
    if (reference.h, reference.w) != (approx.h, approx.w) {
        return shape_err("measure_snr: map dims differ");
    }
    Ok(snr_from_slices(&reference.data, &approx.data))
}

/// DC bin energy over the largest AC bin energy of `map`'s own DFT.
/// `+inf` when the AC energy is negligible.
pub fn dc_ratio_of_map(map: &Map2) -> f64 {
    let spec = dft2(map);
    let dc = spec.values[0].norm_sqr();
    let total = spec.energy();
    let max_ac = spec.values[1..]
        .iter()
        .map(|z| z.norm_sqr())
        .fold(0.0, f64::max);
    if max_ac <= ZERO_ENERGY * total {
        f64::INFINITY
    } else {
        dc / max_ac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcRatioReport {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Row-major over `(c_out, c_in)`.
    pub ratios: Vec<f64>,
    pub aggregate: f64,
}

impl DcRatioReport {
    pub fn at(&self, co: usize, ci: usize) -> f64 {
        self.ratios[co * self.in_channels + ci]
    }
}

/// Per channel pair DC dominance on the kernel's own `H_k×W_k` spectrum.
pub fn dc_energy_ratio(kernel: &Kernel4) -> DcRatioReport {
    let [co_n, ci_n, _, _] = kernel.dims();
    let mut ratios = Vec::with_capacity(co_n * ci_n);
    for co in 0..co_n {
        for ci in 0..ci_n {
            ratios.push(dc_ratio_of_map(&Map2::from_kernel(kernel, co, ci)));
        }
    }
    let aggregate = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    DcRatioReport {
        out_channels: co_n,
        in_channels: ci_n,
        ratios,
        aggregate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub snr_gy: f64,
    pub snr_gx: f64,
    pub holds: bool,
}

/// Slack allowed when comparing the two SNRs.
pub const PROP1_TOLERANCE: f64 = 1e-9;

/// Single-patch comparison: filters `g_y` to its mean, propagates both the
/// exact and the filtered gradient through circular convolution with the
/// rotated kernel and reports both SNRs.
pub fn verify_prop1(kernel: &Kernel4, g_y: &Map2) -> Result<SnrReport> {
    let [co, ci, kh, kw] = kernel.dims();
    if co != 1 || ci != 1 {
        return shape_err(format!("expected a single channel pair, got {co}x{ci}"));
    }
    if kh > g_y.h || kw > g_y.w {
        return shape_err(format!("kernel {kh}x{kw} larger than patch {}x{}", g_y.h, g_y.w));
    }
    let mean = g_y.data.iter().sum::<f64>() / g_y.data.len() as f64;
    let g_y_f = Map2::from_fn(g_y.h, g_y.w, |_, _| mean);
    let rotated = Map2::from_kernel(&rot180(kernel), 0, 0);
    let g_x = circular_conv2(g_y, &rotated)?;
    let g_x_f = circular_conv2(&g_y_f, &rotated)?;
    let snr_gy = measure_snr_map(g_y, &g_y_f)?;
    let snr_gx = measure_snr_map(&g_x, &g_x_f)?;
    Ok(SnrReport {
        snr_gy,
        snr_gx,
        holds: snr_holds(snr_gy, snr_gx),
    })
}

fn snr_holds(snr_gy: f64, snr_gx: f64) -> bool {
    if snr_gx == f64::INFINITY {
        true
    } else {
        snr_gx >= snr_gy - PROP1_TOLERANCE
    }
}

/// One randomised single-patch trial.
#[derive(Debug, Clone)]
pub struct Prop1Trial {
    pub kernel: Kernel4,
    pub g_y: Map2,
    /// DC ratio of the kernel zero-extended to the patch, i.e. on the
    /// spectrum the circular convolution actually multiplies by.
    pub dc_ratio: f64,
}

/// Draws a Gaussian `g_y` patch and a Gaussian kernel, then raises a
/// constant tap offset until the kernel's DC bin dominates every AC bin on
/// the patch grid. Terminates once all taps are non-negative at the latest.
pub fn dc_dominant_trial<R: Rng + ?Sized>(rng: &mut R, patch: usize, ksize: usize) -> Prop1Trial {
    let g_y = Map2::from_fn(patch, patch, |_, _| StandardNormal.sample(rng));
    let taps: Vec<f64> = (0..ksize * ksize).map(|_| StandardNormal.sample(rng)).collect();
    let step = 0.05;
    let mut offset = 0.0;
    loop {
        let shifted: Vec<f64> = taps.iter().map(|t| t + offset).collect();
        let kmap = Map2::new(ksize, ksize, shifted.clone()).expect("square kernel");
        let ratio = dc_ratio_of_map(&kmap.zero_extend(patch, patch).expect("kernel fits"));
        if ratio >= 1.0 {
            return Prop1Trial {
                kernel: Kernel4::new([1, 1, ksize, ksize], shifted).expect("kernel dims"),
                g_y,
                dc_ratio: ratio,
            };
        }
        offset += step;
    }
}
