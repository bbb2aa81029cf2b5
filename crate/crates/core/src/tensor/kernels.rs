// Value-level kernels shared by the tape and the gradient rules.

use alloc::vec;

use super::{Shape, Tensor};

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_parts(Shape::new(c, r), out)
}

/// `a · b` for `[m × k] · [k × n]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(Shape::new(m, n), out)
}

/// Accumulates `g · bᵀ` into `out` (`[m × n] · [n × k]ᵀ`), the left-operand
/// gradient of a matmul.
pub(crate) fn add_matmul_a_bt(out: &mut [f64], g: &[f64], b: &Tensor, m: usize) {
    let (k, n) = (b.rows(), b.cols());
    let bd = b.data();
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Accumulates `aᵀ · g` into `out`, the right-operand gradient of a matmul.
pub(crate) fn add_matmul_at_b(out: &mut [f64], a: &Tensor, g: &[f64], n: usize) {
    let (m, k) = (a.rows(), a.cols());
    let ad = a.data();
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Result shape of a broadcasting binary op, if compatible.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some(Shape::new(dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

/// Flat index into an operand of shape `s` broadcast to position `(r, c)`.
#[inline]
pub(crate) fn bidx(s: Shape, r: usize, c: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { r };
    let c = if s.cols == 1 { 0 } else { c };
    r * s.cols + c
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}
