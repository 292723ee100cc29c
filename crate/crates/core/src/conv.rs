//! Reference stride-1 convolution with exact back-propagation.
//!
//! Everything here is a direct nested loop over NCHW buffers. The counted
//! variant of the input-gradient pass walks the dense scatter loop (every
//! output-gradient element against every kernel tap and channel pair), so
//! its tallies match the analytic `2·C_x·C_y·H_y·W_y·H_k·W_k` count.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Kernel4, Tensor4};

/// Symmetric zero padding; stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub padding: usize,
    pub stride: usize,
}

impl ConvCfg {
    pub fn new(padding: usize) -> Self {
        Self { padding, stride: 1 }
    }

    /// Padding that keeps spatial dims for an odd kernel side.
    pub fn same(kernel: usize) -> Self {
        Self::new(kernel / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 {
            return config_err(format!(
                "stride {} unsupported; only stride 1 is implemented",
                self.stride
            ));
        }
        Ok(())
    }
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self::new(0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub multiplies: u64,
    pub additions: u64,
}

impl OpCount {
    pub fn flops(&self) -> u64 {
        self.multiplies + self.additions
    }
}

/// Output spatial dims `(H - H_k + 1 + 2p, W - W_k + 1 + 2p)`.
pub fn output_hw(in_hw: (usize, usize), k_hw: (usize, usize), cfg: ConvCfg) -> Result<(usize, usize)> {
    let ph = in_hw.0 + 2 * cfg.padding;
    let pw = in_hw.1 + 2 * cfg.padding;
    if ph < k_hw.0 || pw < k_hw.1 {
        return shape_err(format!(
            "padded input {ph}x{pw} smaller than kernel {}x{}",
            k_hw.0, k_hw.1
        ));
    }
    Ok((ph - k_hw.0 + 1, pw - k_hw.1 + 1))
}

/// Rows `i` of the output for which `i + u - p` lands inside `0..len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &Tensor4, kernel: &Kernel4, bias: &[f64], cfg: ConvCfg) -> Result<Tensor4> {
    cfg.validate()?;
    let [n_batch, c_in, h, w] = x.dims();
    let [c_out, k_in, kh, kw] = kernel.dims();
    if k_in != c_in {
        return shape_err(format!("kernel expects {k_in} input channels, x has {c_in}"));
    }
    if bias.len() != c_out {
        return shape_err(format!("bias has {} entries for {c_out} channels", bias.len()));
    }
    let (ho, wo) = output_hw((h, w), (kh, kw), cfg)?;
    let p = cfg.padding;
    let mut y = Tensor4::zeros([n_batch, c_out, ho, wo]);
    let yd = y.data_mut();
    let xd = x.data();
    let kd = kernel.data();
    for n in 0..n_batch {
        for co in 0..c_out {
            let ybase = (n * c_out + co) * ho * wo;
            yd[ybase..ybase + ho * wo].fill(bias[co]);
            for ci in 0..c_in {
                let xbase = (n * c_in + ci) * h * w;
                let kbase = (co * c_in + ci) * kh * kw;
                for u in 0..kh {
                    let (i0, i1) = valid_range(ho, h, u, p);
                    for v in 0..kw {
                        let tap = kd[kbase + u * kw + v];
                        let (j0, j1) = valid_range(wo, w, v, p);
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - p) * w;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                yd[yrow + j] += xd[xrow + j + v - p] * tap;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn check_backward(g_y: &Tensor4, kernel: &Kernel4, in_hw: (usize, usize), cfg: ConvCfg) -> Result<()> {
    cfg.validate()?;
    let [_, c_out, ho, wo] = g_y.dims();
    if kernel.out_channels() != c_out {
        return shape_err(format!(
            "g_y has {c_out} channels, kernel has {} outputs",
            kernel.out_channels()
        ));
    }
    let expect = output_hw(in_hw, kernel.kernel_hw(), cfg)?;
    if expect != (ho, wo) {
        return shape_err(format!(
            "g_y spatial {ho}x{wo} inconsistent with input {}x{} (expected {}x{})",
            in_hw.0, in_hw.1, expect.0, expect.1
        ));
    }
    Ok(())
}

/// Input gradient for an input of spatial size `in_hw`.
///
/// Equivalent to full correlation of `g_y` with the rotated kernel, cropped
/// to the input extent.
pub fn conv2d_backward_input(
    g_y: &Tensor4,
    kernel: &Kernel4,
    in_hw: (usize, usize),
    cfg: ConvCfg,
) -> Result<Tensor4> {
    check_backward(g_y, kernel, in_hw, cfg)?;
    let [n_batch, c_out, ho, wo] = g_y.dims();
    let [_, c_in, kh, kw] = kernel.dims();
    let (h, w) = in_hw;
    let p = cfg.padding;
    let mut g_x = Tensor4::zeros([n_batch, c_in, h, w]);
    let gx = g_x.data_mut();
    let gy = g_y.data();
    let kd = kernel.data();
    for n in 0..n_batch {
        for ci in 0..c_in {
            let xbase = (n * c_in + ci) * h * w;
            for co in 0..c_out {
                let ybase = (n * c_out + co) * ho * wo;
                let kbase = (co * c_in + ci) * kh * kw;
                for u in 0..kh {
                    let (i0, i1) = valid_range(ho, h, u, p);
                    for v in 0..kw {
                        let tap = kd[kbase + u * kw + v];
                        let (j0, j1) = valid_range(wo, w, v, p);
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - p) * w;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                gx[xrow + j + v - p] += gy[yrow + j] * tap;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(g_x)
}

/// Same result as [`conv2d_backward_input`], computed by the dense scatter
/// loop with every multiply and accumulate tallied, including products that
/// fall into the zero padding.
pub fn counted_backward_input(
    g_y: &Tensor4,
    kernel: &Kernel4,
    in_hw: (usize, usize),
    cfg: ConvCfg,
) -> Result<(Tensor4, OpCount)> {
    check_backward(g_y, kernel, in_hw, cfg)?;
    let [n_batch, c_out, ho, wo] = g_y.dims();
    let [_, c_in, kh, kw] = kernel.dims();
    let (h, w) = in_hw;
    let p = cfg.padding as isize;
    let mut g_x = Tensor4::zeros([n_batch, c_in, h, w]);
    let mut count = OpCount::default();
    for n in 0..n_batch {
        for co in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let g = g_y.at([n, co, i, j]);
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let prod = g * kernel.at([co, ci, u, v]);
                                count.multiplies += 1;
                                count.additions += 1;
                                let xi = i as isize + u as isize - p;
                                let xj = j as isize + v as isize - p;
                                if xi >= 0 && xj >= 0 && (xi as usize) < h && (xj as usize) < w {
                                    *g_x.at_mut([n, ci, xi as usize, xj as usize]) += prod;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((g_x, count))
}

/// `g_k[co,ci,u,v] = Σ_{n,i,j} x_pad[n,ci,i+u,j+v] · g_y[n,co,i,j]`.
pub fn conv2d_backward_kernel(
    g_y: &Tensor4,
    x: &Tensor4,
    kernel_hw: (usize, usize),
    cfg: ConvCfg,
) -> Result<Kernel4> {
    cfg.validate()?;
    let [n_batch, c_in, h, w] = x.dims();
    let [gn, c_out, ho, wo] = g_y.dims();
    if gn != n_batch {
        return shape_err(format!("batch mismatch: x {n_batch}, g_y {gn}"));
    }
    let (kh, kw) = kernel_hw;
    if output_hw((h, w), kernel_hw, cfg)? != (ho, wo) {
        return shape_err(format!(
            "g_y spatial {ho}x{wo} inconsistent with x {h}x{w} and kernel {kh}x{kw}"
        ));
    }
    let p = cfg.padding;
    let mut g_k = Kernel4::zeros([c_out, c_in, kh, kw]);
    let gk = g_k.data_mut();
    let xd = x.data();
    let gy = g_y.data();
    for n in 0..n_batch {
        for co in 0..c_out {
            let ybase = (n * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let xbase = (n * c_in + ci) * h * w;
                let kbase = (co * c_in + ci) * kh * kw;
                for u in 0..kh {
                    let (i0, i1) = valid_range(ho, h, u, p);
                    for v in 0..kw {
                        let (j0, j1) = valid_range(wo, w, v, p);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - p) * w;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                acc += xd[xrow + j + v - p] * gy[yrow + j];
                            }
                        }
                        gk[kbase + u * kw + v] += acc;
                    }
                }
            }
        }
    }
    Ok(g_k)
}

pub fn conv2d_backward_bias(g_y: &Tensor4) -> Vec<f64> {
    let [n_batch, c_out, _, _] = g_y.dims();
    let mut g_b = vec![0.0; c_out];
    for n in 0..n_batch {
        for (co, gb) in g_b.iter_mut().enumerate() {
            *gb += g_y.plane(n, co).iter().sum::<f64>();
        }
    }
    g_b
}
