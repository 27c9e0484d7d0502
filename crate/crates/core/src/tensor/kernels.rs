use super::Real;

/// `out += a (p×q) · b (q×r)`, all row-major.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        let a_row = &a[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += aᵀ · g` where `a` is p×q and `g` is p×r; `out` is q×r.
pub(crate) fn matmul_tn_into<T: Real>(a: &[T], g: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &gij) in out_row.iter_mut().zip(g_row) {
                *o += aik * gij;
            }
        }
    }
}

/// `out += g · bᵀ` where `g` is p×r and `b` is q×r; `out` is p×q.
pub(crate) fn matmul_nt_into<T: Real>(g: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            let mut acc = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * q + k] += acc;
        }
    }
}

/// Sums `terms` in ascending value order, so the result depends only on the
/// multiset of terms and not on their arrangement. `terms` is reordered.
pub fn ordered_sum<T: Real>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = T::zero();
    for &t in terms.iter() {
        acc += t;
    }
    acc
}
