//! Batched matrix multiply over the trailing two axes.
//!
//! Tensors are treated as `(batch, M, K) x (batch, K, P) -> (batch, M, P)`
//! where `batch = N * C`. One GEMM per batch item; with the `parallel`
//! feature the batch items run on rayon workers (outputs are disjoint, so
//! results stay bitwise identical).

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
}

#[cfg_attr(feature = "parallel", allow(dead_code))]
fn one<E: Scalar>(a: &[E], b: &[E], d: &MatMulDims, c: &mut [E], item: usize) {
    let (m, k, p) = (d.m, d.k, d.p);
    unsafe {
        E::gemm(
            m,
            k,
            p,
            E::ONE,
            a.as_ptr().add(item * m * k),
            k as isize,
            1,
            b.as_ptr().add(item * k * p),
            p as isize,
            1,
            E::ZERO,
            c.as_mut_ptr().add(item * m * p),
            p as isize,
            1,
        );
    }
}

pub fn matmul_fwd<E: Scalar>(a: &[E], b: &[E], d: &MatMulDims, c: &mut [E]) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        c.par_chunks_mut(d.m * d.p)
            .enumerate()
            .for_each(|(item, out)| one_into(a, b, d, out, item));
    }
    #[cfg(not(feature = "parallel"))]
    for item in 0..d.batch {
        one(a, b, d, c, item);
    }
}

/// Like [`one`] but writing into a standalone output slice for item `item`.
#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
fn one_into<E: Scalar>(a: &[E], b: &[E], d: &MatMulDims, out: &mut [E], item: usize) {
    let (m, k, p) = (d.m, d.k, d.p);
    unsafe {
        E::gemm(
            m,
            k,
            p,
            E::ONE,
            a.as_ptr().add(item * m * k),
            k as isize,
            1,
            b.as_ptr().add(item * k * p),
            p as isize,
            1,
            E::ZERO,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// da += dc * b^T and db += a^T * dc, one batch item at a time.
pub fn matmul_bwd<E: Scalar>(
    a: &[E],
    b: &[E],
    dc: &[E],
    d: &MatMulDims,
    da: &mut [E],
    db: &mut [E],
) {
    let (m, k, p) = (d.m, d.k, d.p);
    for item in 0..d.batch {
        unsafe {
            // da (m x k) += dc (m x p) * b^T (p x k)
            E::gemm(
                m,
                p,
                k,
                E::ONE,
                dc.as_ptr().add(item * m * p),
                p as isize,
                1,
                b.as_ptr().add(item * k * p),
                1,
                p as isize,
                E::ONE,
                da.as_mut_ptr().add(item * m * k),
                k as isize,
                1,
            );
            // db (k x p) += a^T (k x m) * dc (m x p)
            E::gemm(
                k,
                m,
                p,
                E::ONE,
                a.as_ptr().add(item * m * k),
                1,
                k as isize,
                dc.as_ptr().add(item * m * p),
                p as isize,
                1,
                E::ONE,
                db.as_mut_ptr().add(item * k * p),
                p as isize,
                1,
            );
        }
    }
}
