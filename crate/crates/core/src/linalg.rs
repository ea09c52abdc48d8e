//! Small dense-vector helpers shared across modules.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, or `None` for a zero (or non-finite) vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(a.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += Wᵀ g` for a row-major `rows × cols` matrix.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr != 0.0 {
            axpy(gr, &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `W += g xᵀ` (outer-product accumulation).
pub fn outer_acc(w: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr != 0.0 {
            axpy(gr, x, &mut w[r * cols..(r + 1) * cols]);
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    // first maximum wins, which gives lowest-index tie breaking
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

pub fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}
