//! Dense numeric substrate: row-major `f64` matrices and vectors, seeded
//! counter-based randomness, power-iteration spectral norms, and im2col
//! unfolding for convolution.
//!
//! Everything here is a pure function of its inputs. Batch-shaped work is
//! spread across threads when the `parallel` feature is on; each output row
//! is still produced by a single thread in a fixed order, so results are
//! bitwise identical to the sequential build.

mod conv;
mod matrix;
mod rng;
mod spectral;

pub use conv::{col2im_sample, im2col, im2col_sample, ConvShape};
pub use matrix::{matmul, matmul_seq, matmul_tl, matmul_tr, solve_dense, Matrix, Vector};
pub use rng::Rng;
pub use spectral::{rayleigh_ratio, spectral_norm, spectral_norm_default, SPECTRAL_ITERS, SPECTRAL_TOL};

/// Work below this many inner flops is not worth handing to the thread pool.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// Apply `f` to each `width`-sized row of `out`, in parallel when the
/// `parallel` feature is on and the work is large enough.
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if work_per_row.saturating_mul(out.len() / width.max(1)) >= PAR_THRESHOLD {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}
