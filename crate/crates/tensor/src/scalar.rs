//! Floating-point element types usable by tensors and models.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Storage tag written into checkpoint containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Gathers the numeric traits the engine relies on, plus a GEMM kernel and
/// a byte encoding for each concrete float.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = op(a) * op(b) + beta * c` for row-major `m x k` and `k x n` operands.
    ///
    /// When `a_t` is set, `a` is stored as `k x m`; when `b_t` is set, `b` is
    /// stored as `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless for `f32` and `f64` literals used in configuration.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 6] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize, n as isize, 1]
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, a_t, b_t);
                // SAFETY: slice lengths were checked against the strided extents above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta_one() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, &a, false, &b, false, &mut c, 1.0);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn byte_encoding_round_trips() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }
}
