//! Raw rank-2 kernels shared by forward and backward passes.
//!
//! Shapes are validated by the graph layer; these assume consistency.

use super::Tensor;
use crate::scalar::Scalar;

/// `a [m,k] @ b [k,n] -> [m,n]`, ikj loop order.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a [m,k] @ b^T` where `b` is `[n,k]` -> `[m,n]`; row-dot formulation.
pub(crate) fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], k);
    let mut out = Vec::with_capacity(m * n);
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for p in 0..n {
            let brow = &bd[p * k..(p + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a^T @ b` where `a` is `[k,m]`, `b` is `[k,n]` -> `[m,n]`; outer-product accumulation.
pub(crate) fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &aip) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Column-wise sum of a rank-2 tensor -> `[n]`.
pub(crate) fn column_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![c],
        data: out,
    }
}
