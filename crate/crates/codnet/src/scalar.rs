//! Element type abstraction: the whole engine is generic over `f32`/`f64`.
//!
//! `f64` is the default for tests and anything that feeds a
//! finite-difference check; `f32` roughly halves training time and memory
//! and is selectable per run via the `precision` field of
//! [`crate::config::RunConfig`].

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Element width tag, stored in checkpoints and run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of the compute graph.
///
/// The supertraits give us arithmetic and constants; the methods add the
/// GEMM kernel and the few conversions the engine needs (literals are
/// written in `f64` and narrowed once, at the boundary).
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Narrow an `f64` literal/intermediate to this type.
    fn c(v: f64) -> Self;

    /// Widen to `f64` (exact for both supported types).
    fn to_f64(self) -> f64;

    /// Little-endian byte serialization for checkpoints.
    fn write_le(self, out: &mut Vec<u8>);

    /// Inverse of [`Scalar::write_le`]; `bytes` holds exactly
    /// [`Scalar::BYTE_WIDTH`] bytes.
    fn read_le(bytes: &[u8]) -> Self;

    const BYTE_WIDTH: usize;

    /// Matrix product `c ← a·b` (or `c += a·b` when `accumulate`): the one
    /// dense GEMM kernel every convolution funnels through. Operands may be
    /// row-major views or transposes of row-major arrays; `c` must be
    /// row-major. Single-threaded, so results are reproducible run to run on
    /// a given machine.
    fn gemm(
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        c: ArrayViewMut2<'_, Self>,
        accumulate: bool,
    );
}

/// Reinterpret a dense 2-d view as a faer matrix without copying. Row-major
/// contiguous views map directly; a transposed row-major view is exactly a
/// column-major matrix.
fn as_faer<T>(v: ArrayView2<'_, T>) -> faer::mat::MatRef<'_, T> {
    let (m, n) = v.dim();
    if let Some(s) = v.to_slice() {
        faer::mat::MatRef::from_row_major_slice(s, m, n)
    } else {
        let t = v.reversed_axes();
        let s = t
            .to_slice()
            .expect("gemm operand must be contiguous or a transposed contiguous view");
        faer::mat::MatRef::from_column_major_slice(s, m, n)
    }
}

fn faer_gemm<T: faer::traits::ComplexField>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    mut c: ArrayViewMut2<'_, T>,
    alpha: T,
    accumulate: bool,
) {
    let (m, n) = c.dim();
    let cs = c.as_slice_mut().expect("gemm output is row-major");
    let cf = faer::mat::MatMut::from_row_major_slice_mut(cs, m, n);
    let accum = if accumulate {
        faer::Accum::Add
    } else {
        faer::Accum::Replace
    };
    faer::linalg::matmul::matmul(cf, accum, as_faer(a), as_faer(b), alpha, faer::Par::Seq);
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }

    fn gemm(
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        c: ArrayViewMut2<'_, Self>,
        accumulate: bool,
    ) {
        faer_gemm(a, b, c, 1.0f64, accumulate);
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }

    fn gemm(
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        c: ArrayViewMut2<'_, Self>,
        accumulate: bool,
    ) {
        faer_gemm(a, b, c, 1.0f32, accumulate);
    }
}
