//! Raw numeric kernels behind the autodiff graph.
//!
//! Every function here works on flat slices plus explicit dimension structs;
//! shape validation happens one level up in [`crate::graph`]. Kernels are
//! deterministic: fixed iteration order, fixed reduction order, no
//! thread-count-dependent arithmetic. With the `parallel` feature enabled a
//! few hot kernels split their work across rayon workers, but each output
//! element is still produced by the same single summation in the same order,
//! so results are bitwise identical to the sequential path.

pub mod batchnorm;
pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod pool;
pub mod resize;
pub mod shuffle;
pub mod softmax;

/// Column-chunk width for im2col GEMMs.
///
/// Keeps the unpacked patch matrix around 18 MB for a 64-channel 3x3 conv
/// (576 rows) so the working set stays cache- and RAM-friendly, and gives the
/// parallel path units of work to spread across threads.
pub(crate) const COL_CHUNK: usize = 8192;
