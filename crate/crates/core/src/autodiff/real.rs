use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Floating point precision of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// A strided, read-only matrix view used to drive GEMM without copies.
#[doc(hidden)]
#[derive(Clone, Copy)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Scalar type a tape can run in.
pub trait Real:
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
    + FromStr
    + Serialize
    + DeserializeOwned
    + 'static
{
    const PRECISION: Precision;

    #[doc(hidden)]
    /// `c = a * b + beta * c` where `c` is written with strides `(rsc, csc)`.
    fn gemm_raw(a: MatView<'_, Self>, b: MatView<'_, Self>, beta: Self, c: &mut [Self], rsc: isize, csc: isize);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm<T>(a: &MatView<'_, T>, b: &MatView<'_, T>, c: &[T], rsc: isize, csc: isize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> isize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs
        }
    };
    assert!(last(a.rows, a.cols, a.rs, a.cs) < a.data.len().max(1) as isize);
    assert!(last(b.rows, b.cols, b.rs, b.cs) < b.data.len().max(1) as isize);
    assert!(last(a.rows, b.cols, rsc, csc) < c.len().max(1) as isize);
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn gemm_raw(a: MatView<'_, f32>, b: MatView<'_, f32>, beta: f32, c: &mut [f32], rsc: isize, csc: isize) {
        check_gemm(&a, &b, c, rsc, csc);
        if a.rows == 0 || b.cols == 0 {
            return;
        }
        // SAFETY: every view and the output were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                a.rows,
                a.cols,
                b.cols,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn gemm_raw(a: MatView<'_, f64>, b: MatView<'_, f64>, beta: f64, c: &mut [f64], rsc: isize, csc: isize) {
        check_gemm(&a, &b, c, rsc, csc);
        if a.rows == 0 || b.cols == 0 {
            return;
        }
        // SAFETY: every view and the output were bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                a.rows,
                a.cols,
                b.cols,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}
