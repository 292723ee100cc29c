//! Dense rank-4 storage in row-major NCHW order.
//!
//! [`Tensor4`] holds feature maps and their gradients, [`Kernel4`] holds
//! convolution weights laid out as `(C_out, C_in, H, W)`. Both are plain
//! owned buffers of `f64`; every operation in the crate is a pure function
//! over them.

use crate::error::{shape_err, Result};

/// Feature map or gradient map, dims `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

/// Convolution weights, dims `(C_out, C_in, H_k, W_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

fn check_dims(dims: [usize; 4], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return shape_err(format!("all dims must be >= 1, got {dims:?}"));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return shape_err(format!(
            "dims {dims:?} need {expected} elements, got {len}"
        ));
    }
    Ok(())
}

macro_rules! rank4_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
                check_dims(dims, data.len())?;
                Ok(Self { dims, data })
            }

            /// # Panics
            /// If any dim is zero.
            pub fn zeros(dims: [usize; 4]) -> Self {
                assert!(dims.iter().all(|&d| d > 0), "zero dim in {dims:?}");
                Self {
                    dims,
                    data: vec![0.0; dims.iter().product()],
                }
            }

            pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
                let mut t = Self::zeros(dims);
                let [_, b, c, d] = dims;
                for (flat, v) in t.data.iter_mut().enumerate() {
                    let i3 = flat % d;
                    let i2 = (flat / d) % c;
                    let i1 = (flat / (d * c)) % b;
                    let i0 = flat / (d * c * b);
                    *v = f([i0, i1, i2, i3]);
                }
                t
            }

            #[inline]
            pub fn dims(&self) -> [usize; 4] {
                self.dims
            }

            #[inline]
            pub fn data(&self) -> &[f64] {
                &self.data
            }

            #[inline]
            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn offset(&self, i: [usize; 4]) -> usize {
                let [_, b, c, d] = self.dims;
                ((i[0] * b + i[1]) * c + i[2]) * d + i[3]
            }

            #[inline]
            pub fn at(&self, i: [usize; 4]) -> f64 {
                self.data[self.offset(i)]
            }

            #[inline]
            pub fn at_mut(&mut self, i: [usize; 4]) -> &mut f64 {
                let o = self.offset(i);
                &mut self.data[o]
            }

            pub fn scaled(&self, alpha: f64) -> Self {
                Self {
                    dims: self.dims,
                    data: self.data.iter().map(|v| v * alpha).collect(),
                }
            }

            pub fn l2_norm(&self) -> f64 {
                l2_norm(&self.data)
            }

            pub fn sum(&self) -> f64 {
                self.data.iter().sum()
            }
        }
    };
}

rank4_common!(Tensor4);
rank4_common!(Kernel4);

impl Tensor4 {
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Contiguous `H*W` plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn frobenius_inner(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!(
                "frobenius_inner: {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        Ok(frobenius_inner(&self.data, &other.data))
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims != other.dims {
            return shape_err(format!("sub: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}

impl Kernel4 {
    pub fn out_channels(&self) -> usize {
        self.dims[0]
    }

    pub fn in_channels(&self) -> usize {
        self.dims[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.dims[2], self.dims[3])
    }

    /// Taps of one (c_out, c_in) pair, row-major `H_k*W_k`.
    pub fn taps(&self, co: usize, ci: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (co * self.dims[1] + ci) * hw;
        &self.data[start..start + hw]
    }

    pub fn frobenius_inner(&self, other: &Kernel4) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!(
                "frobenius_inner: {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        Ok(frobenius_inner(&self.data, &other.data))
    }
}

/// Rotates every spatial kernel by 180 degrees.
pub fn rot180(k: &Kernel4) -> Kernel4 {
    let [_, _, kh, kw] = k.dims;
    Kernel4::from_fn(k.dims, |[o, i, u, v]| k.at([o, i, kh - 1 - u, kw - 1 - v]))
}

/// Sum of elementwise products. Callers check lengths; this panics on mismatch.
pub fn frobenius_inner(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "frobenius_inner length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: [usize; 4], data: &[f64]) -> Tensor4 {
        Tensor4::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn rot180_point_is_identity() {
        let k = Kernel4::new([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(rot180(&k).data(), &[5.0]);
    }

    #[test]
    fn rot180_reverses_2x2() {
        let k = Kernel4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot180(&k).data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn rot180_twice_3x3() {
        let k = Kernel4::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(rot180(&rot180(&k)), k);
    }

    #[test]
    fn frobenius_examples() {
        let a = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let ones = t([1, 1, 2, 2], &[1.0; 4]);
        assert_eq!(a.frobenius_inner(&eye).unwrap(), 5.0);
        assert_eq!(a.frobenius_inner(&Tensor4::zeros([1, 1, 2, 2])).unwrap(), 0.0);

        // loop oracle
        let mut expected = 0.0;
        for h in 0..2 {
            for w in 0..2 {
                expected += a.at([0, 0, h, w]) * ones.at([0, 0, h, w]);
            }
        }
        assert_eq!(expected, 10.0);
        assert_eq!(a.frobenius_inner(&ones).unwrap(), expected);
    }

    #[test]
    fn frobenius_shape_error() {
        let a = Tensor4::zeros([1, 1, 2, 2]);
        let b = Tensor4::zeros([1, 1, 2, 3]);
        assert!(matches!(
            a.frobenius_inner(&b),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(Tensor4::zeros([1, 1, 2, 2]).l2_norm(), 0.0);
        assert_eq!(t([1, 1, 1, 1], &[3.0]).l2_norm(), 3.0);
        assert_eq!(t([1, 1, 1, 2], &[3.0, 4.0]).l2_norm(), 5.0);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor4::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Kernel4::new([2, 1, 3, 3], vec![0.0; 9]).is_err());
    }

    #[test]
    fn from_fn_is_row_major() {
        let x = Tensor4::from_fn([2, 3, 4, 5], |[n, c, h, w]| {
            (((n * 3 + c) * 4 + h) * 5 + w) as f64
        });
        for (i, v) in x.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }

    fn kernel_strategy() -> impl Strategy<Value = Kernel4> {
        (1usize..4, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(a, b, c, d)| {
            prop::collection::vec(-10.0f64..10.0, a * b * c * d)
                .prop_map(move |data| Kernel4::new([a, b, c, d], data).unwrap())
        })
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..64).prop_flat_map(|len| {
            (
                prop::collection::vec(-5.0f64..5.0, len),
                prop::collection::vec(-5.0f64..5.0, len),
                prop::collection::vec(-5.0f64..5.0, len),
                -3.0f64..3.0,
            )
        })
    }

    proptest! {
        #[test]
        fn rot180_involution(k in kernel_strategy()) {
            prop_assert_eq!(rot180(&rot180(&k)), k);
        }

        #[test]
        fn frobenius_symmetric_bilinear((a, b, c, alpha) in pair_strategy()) {
            // tolerance relative to the magnitude of the summed terms
            let scale: f64 = a.iter().zip(&b).zip(&c)
                .map(|((x, y), z)| (alpha * x * y).abs() + (z * y).abs())
                .sum::<f64>()
                .max(1.0);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * scale;
            prop_assert_eq!(frobenius_inner(&a, &b), frobenius_inner(&b, &a));
            let lhs_in: Vec<f64> = a.iter().zip(&c).map(|(x, z)| alpha * x + z).collect();
            let lhs = frobenius_inner(&lhs_in, &b);
            let rhs = alpha * frobenius_inner(&a, &b) + frobenius_inner(&c, &b);
            prop_assert!(close(lhs, rhs), "{} vs {}", lhs, rhs);
        }
    }
}
