//! Value-level dense linear algebra kernels shared by the tensor ops.
//!
//! Everything here works on flat row-major `f64` slices. The autodiff layer
//! in `tensor.rs` builds on these for both forward values and backward
//! formulas.

use rayon::prelude::*;

/// Threshold (in multiply-adds) above which matmuls fan out over rayon.
const PAR_FLOPS: usize = 1 << 21;

/// C = A (m×k) · B (k×n).
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for l in 0..k {
            let alv = a[i * k + l];
            if alv == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += alv * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// C = A (m×k) · Bᵀ where B is (n×k).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// C = Aᵀ · B where A is (k×m) and B is (k×n).
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for l in 0..k {
                let alv = a[l * m + i];
                if alv == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += alv * bv;
                }
            }
        });
    } else {
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            for i in 0..m {
                let alv = a[l * m + i];
                if alv == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += alv * bv;
                }
            }
        }
    }
    out
}

/// In-place lower Cholesky of a symmetric matrix stored row-major.
///
/// On success the strictly upper triangle is zeroed. On failure returns the
/// 1-based index of the first non-positive leading minor.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j + 1);
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves `op(T) · X = B` in place, where T is triangular (n×n) and B is
/// (n×k) row-major. `lower` describes T's stored triangle; `transpose`
/// selects op(T) = Tᵀ. Returns the 1-based row of a zero diagonal entry on
/// failure.
pub(crate) fn tri_solve_in_place(
    t: &[f64],
    n: usize,
    rhs: &mut [f64],
    k: usize,
    lower: bool,
    transpose: bool,
) -> Result<(), usize> {
    let coef = |i: usize, j: usize| -> f64 {
        if transpose {
            t[j * n + i]
        } else {
            t[i * n + j]
        }
    };
    let effective_lower = lower != transpose;
    if effective_lower {
        for i in 0..n {
            let d = coef(i, i);
            if d == 0.0 {
                return Err(i + 1);
            }
            for j in 0..i {
                let c = coef(i, j);
                if c == 0.0 {
                    continue;
                }
                let (head, tail) = rhs.split_at_mut(i * k);
                let xi = &mut tail[..k];
                let xj = &head[j * k..(j + 1) * k];
                for (o, v) in xi.iter_mut().zip(xj) {
                    *o -= c * v;
                }
            }
            for v in rhs[i * k..(i + 1) * k].iter_mut() {
                *v /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            let d = coef(i, i);
            if d == 0.0 {
                return Err(i + 1);
            }
            for j in (i + 1)..n {
                let c = coef(i, j);
                if c == 0.0 {
                    continue;
                }
                let (head, tail) = rhs.split_at_mut(j * k);
                let xi = &mut head[i * k..(i + 1) * k];
                let xj = &tail[..k];
                for (o, v) in xi.iter_mut().zip(xj) {
                    *o -= c * v;
                }
            }
            for v in rhs[i * k..(i + 1) * k].iter_mut() {
                *v /= d;
            }
        }
    }
    Ok(())
}

pub(crate) fn transpose_vals(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        let bt = transpose_vals(&b, 3, 2); // 2x3
        let c2 = matmul_nt(&a, &bt, 2, 3, 2);
        assert_eq!(c2, c);

        let at = transpose_vals(&a, 2, 3); // 3x2
        let c3 = matmul_tn(&at, &b, 3, 2, 2);
        assert_eq!(c3, c);
    }

    #[test]
    fn cholesky_hand_case() {
        let mut a = vec![4.0, 2.0, 2.0, 5.0];
        cholesky_in_place(&mut a, 2).unwrap();
        assert_eq!(a, vec![2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn cholesky_failure_reports_minor() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0]; // indefinite
        assert_eq!(cholesky_in_place(&mut a, 2), Err(2));
    }

    #[test]
    fn tri_solve_all_modes() {
        let l = [2.0, 0.0, 1.0, 2.0];
        let mut b = vec![2.0, 3.0];
        tri_solve_in_place(&l, 2, &mut b, 1, true, false).unwrap();
        assert_eq!(b, vec![1.0, 1.0]);

        // Lᵀ x = [4, 2] → x = [1.5, 1]
        let mut b = vec![4.0, 2.0];
        tri_solve_in_place(&l, 2, &mut b, 1, true, true).unwrap();
        assert_eq!(b, vec![1.5, 1.0]);
    }
}
