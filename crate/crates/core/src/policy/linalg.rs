//! Row-major dense kernels used by the forward and backward passes.

/// `out = a · b` with `a: rows×inner`, `b: inner×cols`.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    out.fill(0.0);
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for (k, &x) in a[r * inner..(r + 1) * inner].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (oj, &bj) in o.iter_mut().zip(&b[k * cols..(k + 1) * cols]) {
                *oj += x * bj;
            }
        }
    }
}

/// `out += aᵀ · g` with `a: rows×inner`, `g: rows×cols`; the weight gradient of `a · W`.
pub fn add_at_b(a: &[f64], g: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), inner * cols);
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        for (k, &x) in a[r * inner..(r + 1) * inner].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (oj, &gj) in out[k * cols..(k + 1) * cols].iter_mut().zip(gr) {
                *oj += x * gj;
            }
        }
    }
}

/// `out += g · wᵀ` with `g: rows×cols`, `w: inner×cols`; the input gradient of `a · W`.
pub fn add_a_bt(g: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), rows * inner);
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let o = &mut out[r * inner..(r + 1) * inner];
        for (k, ok) in o.iter_mut().enumerate() {
            *ok += dot(gr, &w[k * cols..(k + 1) * cols]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds `bias` to every row.
pub fn add_row_bias(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

/// Column sums of `g` accumulated into `out`.
pub fn add_col_sums(g: &[f64], out: &mut [f64]) {
    for row in g.chunks_exact(out.len()) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

/// In-place numerically stable softmax over one row.
pub fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x)` computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
