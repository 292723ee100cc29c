//! Gradient filtering and the simplified convolution backward passes.
//!
//! The filter cuts each gradient plane into `r×r` patches and keeps one
//! value per patch. With a block-constant output gradient the input-gradient
//! convolution reduces to a channel mix weighted by the spatial kernel sums,
//! and the kernel gradient reduces to an inner product between the patch
//! grids of the gradient and of the (patch-summed) input. Patches are
//! treated as extending indefinitely with their own value, so each output
//! element only reads the patch containing it.
//!
//! Only the unique per-patch values are ever materialised on the training
//! path; [`expand`] exists for tests and diagnostics.

use crate::conv::OpCount;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Kernel4, Tensor4};

/// Divisor used for patches clipped by the map edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartialPatchMode {
    /// Always divide by `r²`.
    StrictR2,
    /// Divide by the number of elements actually inside the patch.
    #[default]
    TrueMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterCfg {
    pub r: usize,
    pub partial_patch_mode: PartialPatchMode,
}

impl FilterCfg {
    pub fn new(r: usize) -> Self {
        Self {
            r,
            partial_patch_mode: PartialPatchMode::TrueMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return config_err("patch size r must be >= 1");
        }
        Ok(())
    }
}

/// One value per `r×r` patch for every (batch, channel) plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    dims: [usize; 4],
    values: Vec<f64>,
    origin_hw: (usize, usize),
    r: usize,
}

/// `⌈len / r⌉`.
#[inline]
pub fn patch_count(len: usize, r: usize) -> usize {
    len.div_ceil(r)
}

/// Number of map rows (or cols) covered by patch index `p`.
#[inline]
fn patch_extent(p: usize, r: usize, len: usize) -> usize {
    r.min(len - p * r)
}

impl PatchGrid {
    pub fn new(dims: [usize; 4], values: Vec<f64>, origin_hw: (usize, usize), r: usize) -> Result<Self> {
        if r == 0 {
            return config_err("patch size r must be >= 1");
        }
        if dims[2] != patch_count(origin_hw.0, r) || dims[3] != patch_count(origin_hw.1, r) {
            return shape_err(format!(
                "grid {}x{} does not tile {}x{} with r={r}",
                dims[2], dims[3], origin_hw.0, origin_hw.1
            ));
        }
        if values.len() != dims.iter().product::<usize>() {
            return shape_err(format!("grid {dims:?} needs {} values", dims.iter().product::<usize>()));
        }
        Ok(Self {
            dims,
            values,
            origin_hw,
            r,
        })
    }

    /// `(N, C, P_h, P_w)`.
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn origin_hw(&self) -> (usize, usize) {
        self.origin_hw
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, ph: usize, pw: usize) -> f64 {
        let [_, cs, hs, ws] = self.dims;
        self.values[((n * cs + c) * hs + ph) * ws + pw]
    }

    /// Number of map elements covered by patch `(ph, pw)`.
    pub fn patch_cardinality(&self, ph: usize, pw: usize) -> usize {
        patch_extent(ph, self.r, self.origin_hw.0) * patch_extent(pw, self.r, self.origin_hw.1)
    }
}

/// Per-(c_out, c_in) sum of kernel taps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernelSum {
    dims: (usize, usize),
    values: Vec<f64>,
}

impl SpatialKernelSum {
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize) -> f64 {
        self.values[co * self.dims.1 + ci]
    }
}

fn reduce_patches(t: &Tensor4, r: usize, divide: impl Fn(usize) -> f64) -> PatchGrid {
    let [n_batch, c, h, w] = t.dims();
    let (ph_n, pw_n) = (patch_count(h, r), patch_count(w, r));
    let mut values = vec![0.0; n_batch * c * ph_n * pw_n];
    for n in 0..n_batch {
        for ch in 0..c {
            let plane = t.plane(n, ch);
            let gbase = (n * c + ch) * ph_n * pw_n;
            for row in 0..h {
                let grow = gbase + (row / r) * pw_n;
                let src = &plane[row * w..(row + 1) * w];
                for (pw, chunk) in src.chunks(r).enumerate() {
                    values[grow + pw] += chunk.iter().sum::<f64>();
                }
            }
            for ph in 0..ph_n {
                for pw in 0..pw_n {
                    let card = patch_extent(ph, r, h) * patch_extent(pw, r, w);
                    values[gbase + ph * pw_n + pw] /= divide(card);
                }
            }
        }
    }
    PatchGrid {
        dims: [n_batch, c, ph_n, pw_n],
        values,
        origin_hw: (h, w),
        r,
    }
}

/// Replaces every patch of `g_y` with its mean.
pub fn filter_gradient(g_y: &Tensor4, cfg: FilterCfg) -> Result<PatchGrid> {
    cfg.validate()?;
    let r2 = (cfg.r * cfg.r) as f64;
    Ok(match cfg.partial_patch_mode {
        PartialPatchMode::TrueMean => reduce_patches(g_y, cfg.r, |card| card as f64),
        PartialPatchMode::StrictR2 => reduce_patches(g_y, cfg.r, |_| r2),
    })
}

/// Per-patch sums of `x`; never divided.
pub fn patch_sum_input(x: &Tensor4, cfg: FilterCfg) -> Result<PatchGrid> {
    cfg.validate()?;
    Ok(reduce_patches(x, cfg.r, |_| 1.0))
}

/// Block-constant map with each patch value replicated over its patch.
pub fn expand(grid: &PatchGrid) -> Tensor4 {
    let [n_batch, c, _, _] = grid.dims;
    let (h, w) = grid.origin_hw;
    let r = grid.r;
    Tensor4::from_fn([n_batch, c, h, w], |[n, ch, i, j]| grid.at(n, ch, i / r, j / r))
}

pub fn spatial_sum_kernel(kernel: &Kernel4) -> SpatialKernelSum {
    let [co_n, ci_n, _, _] = kernel.dims();
    let mut values = Vec::with_capacity(co_n * ci_n);
    for co in 0..co_n {
        for ci in 0..ci_n {
            values.push(kernel.taps(co, ci).iter().sum());
        }
    }
    SpatialKernelSum {
        dims: (co_n, ci_n),
        values,
    }
}

/// Channel mix on the unique grid: `u[n,ci,p] = Σ_co θs[co,ci] · g̃[n,co,p]`.
fn mix_on_grid(g_u: &PatchGrid, ksum: &SpatialKernelSum, count: &mut OpCount) -> Vec<f64> {
    let [n_batch, c_out, ph_n, pw_n] = g_u.dims;
    let c_in = ksum.dims.1;
    let cells = ph_n * pw_n;
    let mut mixed = vec![0.0; n_batch * c_in * cells];
    for n in 0..n_batch {
        for ci in 0..c_in {
            let dst = &mut mixed[(n * c_in + ci) * cells..(n * c_in + ci + 1) * cells];
            for co in 0..c_out {
                let s = ksum.at(co, ci);
                let src = &g_u.values[(n * c_out + co) * cells..(n * c_out + co + 1) * cells];
                for (d, g) in dst.iter_mut().zip(src) {
                    *d += s * g;
                }
            }
        }
    }
    let terms = (n_batch * c_in * cells) as u64;
    count.multiplies += terms * c_out as u64;
    count.additions += terms * (c_out as u64 - 1);
    mixed
}

fn check_backward_input(g_u: &PatchGrid, ksum: &SpatialKernelSum, out_dims: [usize; 4]) -> Result<()> {
    let [n_batch, c_out, _, _] = g_u.dims;
    if ksum.dims.0 != c_out {
        return shape_err(format!(
            "gradient grid has {c_out} channels, kernel sum has {} outputs",
            ksum.dims.0
        ));
    }
    if out_dims[0] != n_batch || out_dims[1] != ksum.dims.1 {
        return shape_err(format!(
            "output dims {out_dims:?} inconsistent with batch {n_batch} / {} input channels",
            ksum.dims.1
        ));
    }
    if out_dims[2] == 0 || out_dims[3] == 0 {
        return shape_err("output spatial dims must be >= 1");
    }
    Ok(())
}

fn expand_mixed(mixed: &[f64], grid_dims: [usize; 4], c_in: usize, r: usize, out_dims: [usize; 4]) -> Tensor4 {
    let [_, _, ph_n, pw_n] = grid_dims;
    // Pixels past the last patch (output larger than the gradient map) read
    // the edge patch, which is treated as extending outward.
    Tensor4::from_fn(out_dims, |[n, ci, h, w]| {
        let ph = (h / r).min(ph_n - 1);
        let pw = (w / r).min(pw_n - 1);
        mixed[((n * c_in + ci) * ph_n + ph) * pw_n + pw]
    })
}

/// `g̃_x[n,ci,h,w] = Σ_co θs[co,ci] · g̃_u[n,co,⌊h/r⌋,⌊w/r⌋]`.
pub fn filtered_backward_input(
    g_u: &PatchGrid,
    ksum: &SpatialKernelSum,
    out_dims: [usize; 4],
) -> Result<Tensor4> {
    counted_filtered_backward_input(g_u, ksum, out_dims).map(|(t, _)| t)
}

/// As [`filtered_backward_input`], tallying the arithmetic of the channel
/// mix on the unique grid. Expansion is a copy and is not counted.
pub fn counted_filtered_backward_input(
    g_u: &PatchGrid,
    ksum: &SpatialKernelSum,
    out_dims: [usize; 4],
) -> Result<(Tensor4, OpCount)> {
    check_backward_input(g_u, ksum, out_dims)?;
    let mut count = OpCount::default();
    let mixed = mix_on_grid(g_u, ksum, &mut count);
    let g_x = expand_mixed(&mixed, g_u.dims, ksum.dims.1, g_u.r, out_dims);
    Ok((g_x, count))
}

/// `g̃_k[co,ci,u,v] = Σ_{n,p} x̃_u[n,ci,p] · g̃_u[n,co,p]`, one term per patch;
/// identical for every tap `(u, v)`.
pub fn filtered_backward_kernel(
    g_u: &PatchGrid,
    x_u: &PatchGrid,
    kernel_dims: [usize; 4],
) -> Result<Kernel4> {
    let [gn, c_out, gph, gpw] = g_u.dims;
    let [xn, c_in, xph, xpw] = x_u.dims;
    if gn != xn || gph != xph || gpw != xpw || g_u.r != x_u.r {
        return shape_err(format!(
            "gradient grid {:?} (r={}) and input grid {:?} (r={}) differ",
            g_u.dims, g_u.r, x_u.dims, x_u.r
        ));
    }
    if kernel_dims[0] != c_out || kernel_dims[1] != c_in {
        return shape_err(format!(
            "kernel dims {kernel_dims:?} inconsistent with {c_out} out / {c_in} in channels"
        ));
    }
    let cells = gph * gpw;
    let mut pair = vec![0.0; c_out * c_in];
    for n in 0..gn {
        for co in 0..c_out {
            let g = &g_u.values[(n * c_out + co) * cells..(n * c_out + co + 1) * cells];
            for ci in 0..c_in {
                let x = &x_u.values[(n * c_in + ci) * cells..(n * c_in + ci + 1) * cells];
                pair[co * c_in + ci] += crate::tensor::frobenius_inner(g, x);
            }
        }
    }
    Ok(Kernel4::from_fn(kernel_dims, |[co, ci, _, _]| pair[co * c_in + ci]))
}

/// Exact sum of the expanded filtered gradient, per output channel.
pub fn filtered_bias_grad(g_u: &PatchGrid) -> Vec<f64> {
    let [n_batch, c_out, ph_n, pw_n] = g_u.dims;
    let mut g_b = vec![0.0; c_out];
    for n in 0..n_batch {
        for (co, gb) in g_b.iter_mut().enumerate() {
            for ph in 0..ph_n {
                for pw in 0..pw_n {
                    *gb += g_u.at(n, co, ph, pw) * g_u.patch_cardinality(ph, pw) as f64;
                }
            }
        }
    }
    g_b
}

/// Gradients produced by one filtered convolution backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredGrads {
    pub g_x: Tensor4,
    pub g_kernel: Kernel4,
    pub g_bias: Vec<f64>,
}

/// Backward pass from the stored input patch sums; the full input is not
/// needed. `g_y` and the input must share spatial dims.
pub fn filtered_backward(
    x_u: &PatchGrid,
    kernel: &Kernel4,
    g_y: &Tensor4,
    cfg: FilterCfg,
) -> Result<FilteredGrads> {
    cfg.validate()?;
    if x_u.r != cfg.r {
        return shape_err(format!("input grid built with r={}, filter uses r={}", x_u.r, cfg.r));
    }
    let [n_batch, c_out, h, w] = g_y.dims();
    if x_u.origin_hw != (h, w) {
        return shape_err(format!(
            "filtered backward needs equal input/output spatial dims, got {:?} vs {h}x{w}",
            x_u.origin_hw
        ));
    }
    if kernel.out_channels() != c_out || kernel.in_channels() != x_u.dims[1] {
        return shape_err(format!(
            "kernel {:?} inconsistent with g_y {:?} / input grid {:?}",
            kernel.dims(),
            g_y.dims(),
            x_u.dims
        ));
    }
    let g_u = filter_gradient(g_y, cfg)?;
    let ksum = spatial_sum_kernel(kernel);
    let g_x = filtered_backward_input(&g_u, &ksum, [n_batch, x_u.dims[1], h, w])?;
    let g_kernel = filtered_backward_kernel(&g_u, x_u, kernel.dims())?;
    let g_bias = filtered_bias_grad(&g_u);
    Ok(FilteredGrads { g_x, g_kernel, g_bias })
}

/// Full filtered backward for one convolution layer, starting from `x`.
pub fn filtered_conv_bp(x: &Tensor4, kernel: &Kernel4, g_y: &Tensor4, cfg: FilterCfg) -> Result<FilteredGrads> {
    if x.batch() != g_y.batch() {
        return shape_err(format!("batch mismatch: x {}, g_y {}", x.batch(), g_y.batch()));
    }
    let x_u = patch_sum_input(x, cfg)?;
    filtered_backward(&x_u, kernel, g_y, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq4x4() -> Tensor4 {
        Tensor4::from_fn([1, 1, 4, 4], |[_, _, h, w]| (h * 4 + w + 1) as f64)
    }

    fn grid(values: &[f64], origin: (usize, usize), r: usize) -> PatchGrid {
        let dims = [1, 1, patch_count(origin.0, r), patch_count(origin.1, r)];
        PatchGrid::new(dims, values.to_vec(), origin, r).unwrap()
    }

    #[test]
    fn filter_examples() {
        let c = Tensor4::from_fn([2, 3, 5, 7], |_| 0.3);
        for r in 1..6 {
            let g = filter_gradient(&c, FilterCfg::new(r)).unwrap();
            assert!(g.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }

        let g = filter_gradient(&seq4x4(), FilterCfg::new(2)).unwrap();
        assert_eq!(g.dims(), [1, 1, 2, 2]);
        assert_eq!(g.values(), &[3.5, 5.5, 11.5, 13.5]);

        let x = Tensor4::from_fn([2, 2, 3, 5], |[n, c, h, w]| (n + 2 * c) as f64 - (h * w) as f64);
        let g = filter_gradient(&x, FilterCfg::new(1)).unwrap();
        assert_eq!(g.values(), x.data());
    }

    #[test]
    fn partial_patch_modes() {
        // 3x3 map, r=2: patch (1,1) holds only the corner element 9
        let x = Tensor4::from_fn([1, 1, 3, 3], |[_, _, h, w]| (h * 3 + w + 1) as f64);
        let mean = filter_gradient(&x, FilterCfg::new(2)).unwrap();
        assert_eq!(mean.values(), &[3.0, 4.5, 7.5, 9.0]);
        let strict = filter_gradient(
            &x,
            FilterCfg {
                r: 2,
                partial_patch_mode: PartialPatchMode::StrictR2,
            },
        )
        .unwrap();
        assert_eq!(strict.values(), &[3.0, 2.25, 3.75, 2.25]);
    }

    #[test]
    fn r_zero_rejected() {
        assert!(matches!(
            filter_gradient(&seq4x4(), FilterCfg::new(0)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn expand_examples() {
        let e = expand(&grid(&[2.5], (2, 2), 2));
        assert_eq!(e.data(), &[2.5; 4]);

        let e = expand(&grid(&[3.5, 5.5, 11.5, 13.5], (4, 4), 2));
        let oracle = Tensor4::from_fn([1, 1, 4, 4], |[_, _, h, w]| {
            [[3.5, 5.5], [11.5, 13.5]][h / 2][w / 2]
        });
        assert_eq!(e, oracle);

        let x = Tensor4::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c * 9 + h * 3 + w) as f64 * 0.7);
        assert_eq!(expand(&filter_gradient(&x, FilterCfg::new(1)).unwrap()), x);
    }

    #[test]
    fn spatial_sum_examples() {
        let k = Kernel4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_sum_kernel(&k).values(), &[10.0]);
        assert_eq!(spatial_sum_kernel(&Kernel4::zeros([2, 3, 3, 3])).values(), &[0.0; 6]);
    }

    #[test]
    fn patch_sum_examples() {
        let ones = Tensor4::from_fn([1, 1, 4, 4], |_| 1.0);
        assert_eq!(patch_sum_input(&ones, FilterCfg::new(2)).unwrap().values(), &[4.0; 4]);
        let x = seq4x4();
        assert_eq!(patch_sum_input(&x, FilterCfg::new(1)).unwrap().values(), x.data());
        assert_eq!(
            patch_sum_input(&x, FilterCfg::new(2)).unwrap().values(),
            &[14.0, 22.0, 46.0, 54.0]
        );
        // sums ignore the partial-patch divisor
        let x3 = Tensor4::from_fn([1, 1, 3, 3], |_| 1.0);
        let strict = FilterCfg {
            r: 2,
            partial_patch_mode: PartialPatchMode::StrictR2,
        };
        assert_eq!(patch_sum_input(&x3, strict).unwrap().values(), &[4.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn backward_input_examples() {
        let k = Kernel4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ksum = spatial_sum_kernel(&k);
        let g_u = grid(&[3.5, 5.5, 11.5, 13.5], (4, 4), 2);
        let gx = filtered_backward_input(&g_u, &ksum, [1, 1, 4, 4]).unwrap();
        assert_eq!(
            gx.data(),
            &[
                35.0, 35.0, 55.0, 55.0, 35.0, 35.0, 55.0, 55.0, 115.0, 115.0, 135.0, 135.0, 115.0,
                115.0, 135.0, 135.0
            ]
        );

        let zero = spatial_sum_kernel(&Kernel4::zeros([1, 1, 3, 3]));
        let gx = filtered_backward_input(&g_u, &zero, [1, 1, 4, 4]).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            filtered_backward_input(&g_u, &spatial_sum_kernel(&Kernel4::zeros([2, 1, 1, 1])), [1, 1, 4, 4]),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn backward_kernel_examples() {
        let x_u = patch_sum_input(&Tensor4::from_fn([1, 1, 4, 4], |_| 1.0), FilterCfg::new(2)).unwrap();
        let g_u = filter_gradient(&seq4x4(), FilterCfg::new(2)).unwrap();
        let gk = filtered_backward_kernel(&g_u, &x_u, [1, 1, 3, 3]).unwrap();
        assert_eq!(gk.data(), &[136.0; 9]);

        let zero = grid(&[0.0; 4], (4, 4), 2);
        let gk = filtered_backward_kernel(&zero, &x_u, [1, 1, 3, 3]).unwrap();
        assert_eq!(gk.data(), &[0.0; 9]);

        let other = patch_sum_input(&Tensor4::zeros([1, 1, 6, 6]), FilterCfg::new(2)).unwrap();
        assert!(filtered_backward_kernel(&g_u, &other, [1, 1, 3, 3]).is_err());
    }

    #[test]
    fn composite_example() {
        let x = Tensor4::from_fn([1, 1, 4, 4], |_| 1.0);
        let k = Kernel4::new([1, 1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = filtered_conv_bp(&x, &k, &seq4x4(), FilterCfg::new(2)).unwrap();
        assert_eq!(out.g_x.at([0, 0, 0, 0]), 35.0);
        assert_eq!(out.g_x.at([0, 0, 3, 3]), 135.0);
        assert_eq!(out.g_kernel.data(), &[136.0; 9]);
        assert_eq!(out.g_bias, vec![136.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_outputs() {
        let x = Tensor4::from_fn([2, 3, 5, 5], |[n, c, h, w]| (n + c + h + w) as f64);
        let k = Kernel4::from_fn([4, 3, 3, 3], |[a, b, c, d]| (a * b + c) as f64 - d as f64);
        let out = filtered_conv_bp(&x, &k, &Tensor4::zeros([2, 4, 5, 5]), FilterCfg::new(2)).unwrap();
        assert!(out.g_x.data().iter().all(|&v| v == 0.0));
        assert!(out.g_kernel.data().iter().all(|&v| v == 0.0));
        assert!(out.g_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_matches_expanded_sum_with_partial_patches() {
        let g = Tensor4::from_fn([1, 2, 5, 3], |[_, c, h, w]| (c as f64 + 1.0) * (h as f64 - w as f64 * 0.5));
        let g_u = filter_gradient(&g, FilterCfg::new(2)).unwrap();
        let b = filtered_bias_grad(&g_u);
        let e = expand(&g_u);
        for (c, bc) in b.iter().enumerate() {
            let s: f64 = e.plane(0, c).iter().sum();
            assert!((bc - s).abs() < 1e-12);
            let exact: f64 = g.plane(0, c).iter().sum();
            assert!((bc - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_stores_unique_values_only() {
        let g = Tensor4::zeros([3, 5, 7, 9]);
        for r in 1..10 {
            let grid = filter_gradient(&g, FilterCfg::new(r)).unwrap();
            assert_eq!(grid.len(), 3 * 5 * 7usize.div_ceil(r) * 9usize.div_ceil(r));
        }
    }

    #[test]
    fn counted_mix_matches_leading_multiplies() {
        let g = Tensor4::from_fn([1, 3, 8, 8], |[_, c, h, w]| (c + h + w) as f64);
        let k = Kernel4::from_fn([3, 5, 3, 3], |_| 1.0);
        let g_u = filter_gradient(&g, FilterCfg::new(4)).unwrap();
        let (_, count) = counted_filtered_backward_input(&g_u, &spatial_sum_kernel(&k), [1, 5, 8, 8]).unwrap();
        assert_eq!(count.multiplies, 2 * 2 * 5 * 3);
        assert_eq!(count.additions, 2 * 2 * 5 * 2);
    }

    fn map_strategy() -> impl Strategy<Value = (Tensor4, usize)> {
        (1usize..3, 1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, c, a, b, r)| {
            let (h, w) = (a * r, b * r);
            prop::collection::vec(-3.0f64..3.0, n * c * h * w)
                .prop_map(move |d| (Tensor4::new([n, c, h, w], d).unwrap(), r))
        })
    }

    proptest! {
        #[test]
        fn filter_is_projection((g, r) in map_strategy()) {
            let cfg = FilterCfg::new(r);
            let once = filter_gradient(&g, cfg).unwrap();
            let twice = filter_gradient(&expand(&once), cfg).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn filter_preserves_sum((g, r) in map_strategy()) {
            let e = expand(&filter_gradient(&g, FilterCfg::new(r)).unwrap());
            let scale = g.data().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((e.sum() - g.sum()).abs() <= 1e-9 * scale);
        }

        #[test]
        fn rotation_keeps_spatial_sum(data in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 3 * 2)) {
            let k = Kernel4::new([2, 3, 3, 2], data).unwrap();
            let a = spatial_sum_kernel(&k);
            let b = spatial_sum_kernel(&crate::tensor::rot180(&k));
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
