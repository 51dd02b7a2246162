use nalgebra::DMatrix;

/// Pivot ratio below which a factorization is treated as singular.
const PIVOT_RATIO: f64 = 1e-14;

fn factor_ok(a: &DMatrix<f64>) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = a.clone().lu();
    let u = lu.u();
    let diag: Vec<f64> = u.diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    (max > 0.0 && max.is_finite() && min > PIVOT_RATIO * max).then_some(lu)
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let x = factor_ok(a)?.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Like [`solve`], but retries once with `a + mu I`, `mu = 1e-12 max|a_kk|`.
/// The flag reports whether the ridge was needed.
pub fn solve_with_ridge(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    if let Some(x) = solve(a, b) {
        return Some((x, false));
    }
    let scale = a.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mu = 1e-12 * if scale > 0.0 { scale } else { 1.0 };
    let mut shifted = a.clone();
    for k in 0..a.nrows().min(a.ncols()) {
        shifted[(k, k)] += mu;
    }
    let x = shifted.lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some((x, true))
}
