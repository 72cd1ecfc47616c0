//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0[0]
}

/// `H^{-1/2}` for a symmetric positive definite `H`.
pub fn inv_sqrt_spd(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(h);
    if vals.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Some(&vecs * d * vecs.transpose())
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(symmetrize(m)).map(|c| c.inverse())
}

/// Log-determinant through a Cholesky factor; `None` unless positive definite.
pub fn chol_logdet(m: &DMatrix<f64>) -> Option<f64> {
    let c = Cholesky::new(symmetrize(m))?;
    let l = c.l_dirty();
    let mut acc = 0.0;
    for k in 0..m.nrows() {
        let d = l[(k, k)];
        if !(d > 0.0) {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

/// Solve `m x = b` for symmetric PSD `m`, falling back to a pseudo-inverse
/// when the Cholesky factorisation fails. Returns the solution and whether
/// the fallback was used.
pub fn solve_psd(m: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        let x = c.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return (x, false);
        }
    }
    (pseudo_inverse_sym(&sym) * b, true)
}

pub fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = scale * 1e-12 * m.nrows() as f64;
    let inv = vals.map(|v| if v.abs() > cut { 1.0 / v } else { 0.0 });
    &vecs * DMatrix::from_diagonal(&inv) * vecs.transpose()
}

pub fn quad_form(s: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (s * v).dot(v)
}

/// Flip `v` so that its largest-magnitude coordinate is positive.
pub fn canonical_sign(v: &DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for k in 1..v.len() {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        -v
    } else {
        v.clone()
    }
}

/// Angle between the lines spanned by `u` and `v`, in [0, π/2]. Uses atan2
/// so that tiny angles keep full precision.
pub fn line_angle(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let a = u.normalize();
    let b = v.normalize();
    let c = a.dot(&b).abs();
    let sign = if a.dot(&b) < 0.0 { -1.0 } else { 1.0 };
    let s = (&a - &b * sign).norm() * (&a + &b * sign).norm() / 2.0;
    s.atan2(c)
}

/// Gram-Schmidt orthonormalisation of the columns of `m`, dropping columns
/// that are numerically dependent on earlier ones.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for c in 0..m.ncols() {
        let col: DVector<f64> = m.column(c).into_owned();
        if let Some(v) = orthogonalize_against(&col, &basis) {
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&basis)
}

/// Remove the components of `v` along an orthonormal `basis` (twice, for
/// stability) and normalise. `None` when nothing meaningful remains.
pub fn orthogonalize_against(v: &DVector<f64>, basis: &[DVector<f64>]) -> Option<DVector<f64>> {
    let norm0 = v.norm();
    if norm0 == 0.0 {
        return None;
    }
    let mut w = v.clone();
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(&w);
            w.axpy(-c, b, 1.0);
        }
    }
    let n = w.norm();
    if n <= 1e-10 * norm0 {
        None
    } else {
        Some(w / n)
    }
}

/// Complete an orthonormal set of columns to a basis of the full space,
/// using the standard basis vectors in order.
pub fn complete_basis(u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows();
    let mut basis: Vec<DVector<f64>> = (0..u.ncols()).map(|c| u.column(c).into_owned()).collect();
    let mut extra = Vec::new();
    for k in 0..n {
        if basis.len() == n {
            break;
        }
        let e = DVector::from_fn(n, |r, _| if r == k { 1.0 } else { 0.0 });
        if let Some(v) = orthogonalize_against(&e, &basis) {
            basis.push(v.clone());
            extra.push(v);
        }
    }
    if extra.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&extra)
    }
}

/// Half-vectorisation (lower triangle, column major).
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for c in 0..n {
        for r in c..n {
            out.push(m[(r, c)]);
        }
    }
    out
}
