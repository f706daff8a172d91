//! Scalar abstraction so every numeric path runs in 32- or 64-bit mode.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads `LSTNET_PRECISION` (`f32` | `f64`), defaulting to 32-bit.
    pub fn from_env() -> crate::Result<Self> {
        match std::env::var("LSTNET_PRECISION") {
            Err(_) => Ok(Precision::F32),
            Ok(v) => match v.trim() {
                "" | "f32" => Ok(Precision::F32),
                "f64" => Ok(Precision::F64),
                other => Err(crate::Error::Config(format!(
                    "LSTNET_PRECISION must be f32 or f64, got '{other}'"
                ))),
            },
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m x k`, `k x n` and `m x n`
    /// regions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Layout of one GEMM operand inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatRef {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatRef {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(self) -> Self {
        MatRef {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Products up to this many multiply-adds skip the packing kernels.
const SMALL_GEMM: usize = 1 << 15;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: MatRef,
    b: &[T],
    lb: MatRef,
    beta: T,
    c: &mut [T],
    lc: MatRef,
) {
    let packed: Vec<T>;
    let (b, lb) = if lb.cs == 1 {
        (b, lb)
    } else {
        packed = (0..k * n).map(|t| b[lb.offset + (t / n) * lb.rs + (t % n) * lb.cs]).collect();
        (packed.as_slice(), MatRef::row_major(0, n))
    };
    for i in 0..m {
        let row = lc.offset + i * lc.rs;
        for j in 0..n {
            let cij = &mut c[row + j * lc.cs];
            *cij = if beta == T::zero() { T::zero() } else { *cij * beta };
        }
        for p in 0..k {
            let aip = a[la.offset + i * la.rs + p * la.cs];
            let brow = lb.offset + p * lb.rs;
            if lc.cs == 1 {
                for (cij, bpj) in c[row..row + n].iter_mut().zip(&b[brow..brow + n]) {
                    *cij += aip * *bpj;
                }
            } else {
                for j in 0..n {
                    c[row + j * lc.cs] += aip * b[brow + j];
                }
            }
        }
    }
}

/// Bounds-checked GEMM: `c[m x n] = a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: MatRef,
    b: &[T],
    lb: MatRef,
    beta: T,
    c: &mut [T],
    lc: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || lb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    if m * n * k <= SMALL_GEMM {
        small_gemm(m, k, n, a, la, b, lb, beta, c, lc);
        return;
    }
    // SAFETY: all three regions were bounds-checked above; `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
