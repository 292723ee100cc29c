//! Analytic FLOP and activation-memory model for one convolution layer.
//!
//! One multiply or one add is one FLOP. The filtered cost splits into the
//! leading term (channel mix on the unique patch grid) and an itemised
//! residual that does not shrink with `r` the way the leading term does.

use crate::filter::patch_count;

/// Shape of one convolution layer for costing purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCfg {
    pub c_x: u64,
    pub c_y: u64,
    pub h_y: u64,
    pub w_y: u64,
    pub h_k: u64,
    pub w_k: u64,
    pub h_x: u64,
    pub w_x: u64,
}

impl LayerCfg {
    /// Same-resolution layer: input and output share `h×w`.
    pub fn same(c_x: u64, c_y: u64, h: u64, w: u64, k: u64) -> Self {
        Self {
            c_x,
            c_y,
            h_y: h,
            w_y: w,
            h_k: k,
            w_k: k,
            h_x: h,
            w_x: w,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.c_x, self.c_y, self.h_y, self.w_y, self.h_k, self.w_k, self.h_x, self.w_x]
            .iter()
            .all(|&d| d >= 1)
    }

    fn grid_y(&self, r: u64) -> u64 {
        ceil_div(self.h_y, r) * ceil_div(self.w_y, r)
    }
}

#[inline]
fn ceil_div(a: u64, b: u64) -> u64 {
    patch_count(a as usize, b as usize) as u64
}

/// Residual costs of the filtered pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overhead {
    /// Spatial kernel sums: `C_x·C_y·(H_k·W_k − 1)` adds.
    pub kernel_sum: u64,
    /// Patch means of `g_y`: `C_y·H_y·W_y` adds plus one multiply per patch.
    pub gradient_filter: u64,
    /// Patch sums of `x`: `C_x·H_x·W_x` adds.
    pub input_patch_sum: u64,
}

impl Overhead {
    pub fn total(&self) -> u64 {
        self.kernel_sum + self.gradient_filter + self.input_patch_sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub r: u64,
    pub flops: u64,
    pub leading_term: u64,
    pub overhead: Overhead,
    /// Per image: `C_x·⌈H_x/r⌉·⌈W_x/r⌉`.
    pub stored_activation_elements: u64,
    pub memory_saving_fraction: f64,
    pub fwd_overhead_ratio: f64,
    pub bwd_overhead_ratio: f64,
}

impl CostReport {
    pub fn overhead_terms(&self) -> u64 {
        self.overhead.total()
    }
}

/// `2·C_x·C_y·H_y·W_y·H_k·W_k`.
pub fn vanilla_bp_flops(cfg: &LayerCfg) -> u64 {
    2 * cfg.c_x * cfg.c_y * cfg.w_y * cfg.h_y * cfg.w_k * cfg.h_k
}

/// `⌈H_y/r⌉·⌈W_y/r⌉·C_x·(2·C_y − 1)`.
pub fn filtered_leading_term(cfg: &LayerCfg, r: u64) -> u64 {
    cfg.grid_y(r) * cfg.c_x * (2 * cfg.c_y - 1)
}

/// # Panics
/// If `r == 0`.
pub fn filtered_bp_flops(cfg: &LayerCfg, r: u64) -> CostReport {
    assert!(r >= 1, "patch size must be >= 1");
    let leading_term = filtered_leading_term(cfg, r);
    let overhead = Overhead {
        kernel_sum: cfg.c_x * cfg.c_y * (cfg.h_k * cfg.w_k - 1),
        gradient_filter: cfg.c_y * cfg.h_y * cfg.w_y + cfg.grid_y(r) * cfg.c_y,
        input_patch_sum: cfg.c_x * cfg.h_x * cfg.w_x,
    };
    let (stored, saving) = memory_report(cfg, r, 1);
    CostReport {
        r,
        flops: leading_term + overhead.total(),
        leading_term,
        overhead,
        stored_activation_elements: stored,
        memory_saving_fraction: saving,
        fwd_overhead_ratio: 1.0 / (2.0 * cfg.c_y as f64 * (cfg.w_k * cfg.h_k) as f64),
        bwd_overhead_ratio: (r * r - 1) as f64 / (2.0 * cfg.c_x as f64),
    }
}

/// `2·C_x·C_y − C_x`: the leading term once a single patch covers the map.
pub fn min_flops(cfg: &LayerCfg) -> u64 {
    2 * cfg.c_x * cfg.c_y - cfg.c_x
}

/// Stored activation elements for a batch of `n` and the fraction saved
/// against storing the full input.
pub fn memory_report(cfg: &LayerCfg, r: u64, n: u64) -> (u64, f64) {
    let stored = n * cfg.c_x * ceil_div(cfg.h_x, r) * ceil_div(cfg.w_x, r);
    let full = n * cfg.c_x * cfg.h_x * cfg.w_x;
    (stored, 1.0 - stored as f64 / full as f64)
}

pub fn sweep_curve(cfg: &LayerCfg, r_values: &[u64]) -> Vec<CostReport> {
    r_values.iter().map(|&r| filtered_bp_flops(cfg, r)).collect()
}
