//! Dense kernels: rank-revealing nullspaces, symmetric eigenvalues, least squares and
//! orthogonal completion. Everything here is small and dense.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Default relative singular-value threshold.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Orthonormal basis of a subspace, stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    pub vectors: DenseMatrix,
    pub tol: f64,
}

impl SubspaceBasis {
    pub fn empty(ambient: usize, tol: f64) -> Self {
        SubspaceBasis {
            vectors: DMatrix::zeros(ambient, 0),
            tol,
        }
    }

    pub fn full(ambient: usize, tol: f64) -> Self {
        SubspaceBasis {
            vectors: DMatrix::identity(ambient, ambient),
            tol,
        }
    }

    /// Orthonormalize an arbitrary spanning set given as columns.
    pub fn from_spanning(cols: &DenseMatrix, tol: f64) -> Self {
        SubspaceBasis {
            vectors: orthonormal_span(cols, tol),
            tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().copied().collect()
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(v.len());
        }
        &self.vectors * (self.vectors.transpose() * v)
    }

    /// Distance of `v` from the subspace relative to `|v|`.
    pub fn rel_distance(&self, v: &DVector<f64>) -> f64 {
        let nv = v.norm();
        if nv == 0.0 {
            return 0.0;
        }
        (v - self.project(v)).norm() / nv
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.rel_distance(v) <= tol
    }

    /// Largest principal-angle sine between the two subspaces; zero when they coincide.
    pub fn gap(&self, other: &SubspaceBasis) -> f64 {
        if self.dim() != other.dim() {
            return 1.0;
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.dim() {
            worst = worst.max(other.rel_distance(&self.vectors.column(k).into_owned()));
        }
        for k in 0..other.dim() {
            worst = worst.max(self.rel_distance(&other.vectors.column(k).into_owned()));
        }
        worst
    }

    /// Part of `self` orthogonal to `other`.
    pub fn minus(&self, other: &SubspaceBasis) -> SubspaceBasis {
        if self.dim() == 0 {
            return self.clone();
        }
        let mut w = self.vectors.clone();
        if other.dim() > 0 {
            w -= &other.vectors * (other.vectors.transpose() * &self.vectors);
        }
        SubspaceBasis::from_spanning(&w, 1e-6)
    }

    /// Orthogonal complement in the ambient space.
    pub fn complement(&self) -> SubspaceBasis {
        SubspaceBasis::full(self.ambient(), self.tol).minus(self)
    }

    pub fn intersect(&self, other: &SubspaceBasis) -> Result<SubspaceBasis> {
        if self.dim() == 0 || other.dim() == 0 {
            return Ok(SubspaceBasis::empty(self.ambient(), self.tol));
        }
        let (a, b) = (self.dim(), other.dim());
        let mut m = DMatrix::zeros(self.ambient(), a + b);
        m.view_mut((0, 0), (self.ambient(), a)).copy_from(&self.vectors);
        m.view_mut((0, a), (self.ambient(), b))
            .copy_from(&(-&other.vectors));
        let ns = nullspace(&m, 1e-8)?;
        let coeffs = ns.vectors.rows(0, a).into_owned();
        Ok(SubspaceBasis::from_spanning(&(&self.vectors * coeffs), 1e-8))
    }

    /// Replace the basis by the canonical one (see [`canonical_basis`]).
    pub fn canonical(&self) -> SubspaceBasis {
        SubspaceBasis {
            vectors: canonical_basis(&self.vectors),
            tol: self.tol,
        }
    }
}

fn orthonormal_span(cols: &DenseMatrix, tol: f64) -> DenseMatrix {
    let n = cols.nrows();
    if cols.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let mut work: Vec<DVector<f64>> = cols.column_iter().map(|c| c.into_owned()).collect();
    let scale = work.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    let mut out: Vec<DVector<f64>> = Vec::new();
    while !work.is_empty() && out.len() < n {
        let (k, nk) = work
            .iter()
            .enumerate()
            .map(|(k, c)| (k, c.norm()))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        if nk <= tol * scale {
            break;
        }
        let mut q = work.swap_remove(k) / nk;
        for b in &out {
            let d = b.dot(&q);
            q -= b * d;
        }
        q /= q.norm();
        for c in work.iter_mut() {
            let d = q.dot(c);
            *c -= &q * d;
        }
        out.push(q);
    }
    let mut m = DMatrix::zeros(n, out.len());
    for (k, v) in out.iter().enumerate() {
        m.set_column(k, v);
    }
    m
}

/// Right singular vectors and values of `m`, using a QR pre-reduction for tall inputs.
fn right_svd(m: &DenseMatrix) -> (DVector<f64>, DenseMatrix) {
    let (r, c) = m.shape();
    let square = if r > c {
        m.clone().qr().r()
    } else if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = SVD::new(square, false, true);
    (svd.singular_values, svd.v_t.expect("v_t requested"))
}

/// Orthonormal basis of `{v : |Mv| <= tol * sigma_max * |v|}`.
pub fn nullspace(m: &DenseMatrix, tol: f64) -> Result<SubspaceBasis> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Shape("nullspace of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid("nullspace tolerance must be positive".into()));
    }
    let c = m.ncols();
    let (s, vt) = right_svd(m);
    let smax = s.max();
    if smax == 0.0 {
        return Ok(SubspaceBasis::full(c, tol));
    }
    let idx: Vec<usize> = (0..s.len()).filter(|&k| s[k] <= tol * smax).collect();
    let mut v = DMatrix::zeros(c, idx.len());
    for (col, &k) in idx.iter().enumerate() {
        v.set_column(col, &vt.row(k).transpose());
    }
    Ok(SubspaceBasis { vectors: v, tol })
}

/// Numerical rank with a relative threshold.
pub fn rank(m: &DenseMatrix, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let s = m.clone().singular_values();
    let smax = s.max();
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > tol * smax).count()
}

/// Ascending eigenvalues of the symmetric part of `m`.
pub fn sym_eigvals(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigenvalues of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Minimum-norm least-squares solution and residual norm.
pub fn lstsq(a: &DenseMatrix, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if a.nrows() != b.len() {
        return Err(Error::Shape("least squares right-hand side".into()));
    }
    let svd = SVD::new(a.clone(), true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let x = svd
        .solve(b, eps)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let res = (a * &x - b).norm();
    Ok((x, res))
}

/// Extend `k` orthonormal rows of length `n` to an `n x n` orthogonal matrix whose first
/// `k` rows are the input.
pub fn orthogonal_completion(rows: &DenseMatrix) -> Result<DenseMatrix> {
    let (k, n) = rows.shape();
    if k > n {
        return Err(Error::Shape(format!("{k} rows in dimension {n}")));
    }
    let gram = rows * rows.transpose();
    let err = (&gram - DMatrix::identity(k, k)).abs().max();
    if err > 1e-10 {
        return Err(Error::Invalid(format!(
            "rows are not orthonormal (deviation {err:.3e})"
        )));
    }
    let mut basis: Vec<DVector<f64>> = (0..k).map(|i| rows.row(i).transpose()).collect();
    let mut remaining: Vec<usize> = (0..n).collect();
    while basis.len() < n {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for (pos, &i) in remaining.iter().enumerate() {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let d = b.dot(&v);
                    v -= b * d;
                }
            }
            let nv = v.norm();
            if best.as_ref().is_none_or(|(_, _, bn)| nv > *bn + 1e-12) {
                best = Some((pos, v, nv));
            }
        }
        let (pos, v, nv) = best.expect("a candidate remains");
        remaining.remove(pos);
        basis.push(v / nv);
    }
    let mut out = DMatrix::zeros(n, n);
    for (i, b) in basis.iter().enumerate() {
        out.set_row(i, &b.transpose());
    }
    Ok(out)
}

/// Canonical orthonormal basis of the column span: reduced row echelon form of the basis
/// vectors, Gram-Schmidt in order, then the first significant entry of each made positive.
pub fn canonical_basis(cols: &DenseMatrix) -> DenseMatrix {
    let (n, d) = cols.shape();
    if d == 0 {
        return cols.clone();
    }
    let mut r = cols.transpose();
    let mut prow = 0;
    for c in 0..n {
        if prow == d {
            break;
        }
        let (best, val) = (prow..d)
            .map(|i| (i, r[(i, c)].abs()))
            .fold((prow, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val < 1e-8 {
            continue;
        }
        r.swap_rows(prow, best);
        let p = r[(prow, c)];
        for j in 0..n {
            r[(prow, j)] /= p;
        }
        for i in 0..d {
            if i != prow {
                let f = r[(i, c)];
                if f != 0.0 {
                    for j in 0..n {
                        r[(i, j)] -= f * r[(prow, j)];
                    }
                }
            }
        }
        prow += 1;
    }
    let mut out: Vec<DVector<f64>> = Vec::new();
    for i in 0..prow {
        let mut v: DVector<f64> = r.row(i).transpose();
        for _ in 0..2 {
            for b in &out {
                let dd = b.dot(&v);
                v -= b * dd;
            }
        }
        let nv = v.norm();
        if nv < 1e-10 {
            continue;
        }
        v /= nv;
        for x in v.iter_mut() {
            if x.abs() < 1e-14 {
                *x = 0.0;
            }
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
            if *first < 0.0 {
                v = -v;
            }
        }
        out.push(v);
    }
    let mut m = DMatrix::zeros(n, out.len());
    for (k, v) in out.iter().enumerate() {
        m.set_column(k, v);
    }
    m
}

/// Row-major flattening.
pub fn row_major(m: &DenseMatrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DenseMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> DenseMatrix {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn nullspace_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let ns = nullspace(&m, DEFAULT_TOL).unwrap();
        assert_eq!(ns.dim(), 1);
        assert!((ns.vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(nullspace(&DMatrix::zeros(3, 3), DEFAULT_TOL).unwrap().dim(), 3);
        assert!(nullspace(&DMatrix::zeros(0, 3), DEFAULT_TOL).is_err());
    }

    #[test]
    fn eigen_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        assert_eq!(sym_eigvals(&d).unwrap(), vec![1.0, 2.0, 3.0]);
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ev = sym_eigvals(&s).unwrap();
        assert!((ev[0] + 1.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
        assert!(sym_eigvals(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn completion_examples() {
        let r = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let q = orthogonal_completion(&r).unwrap();
        assert_eq!(q.row(0), r.row(0));
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        for i in 1..3 {
            assert!(q[(i, 0)].abs() < 1e-14);
        }
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(orthogonal_completion(&id).unwrap(), id);
        let bad = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(orthogonal_completion(&bad).is_err());
    }

    #[test]
    fn canonical_basis_is_unique() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 6, 3);
        let mix = rand_mat(&mut rng, 3, 3);
        let b = &a * mix;
        let ca = canonical_basis(&SubspaceBasis::from_spanning(&a, 1e-10).vectors);
        let cb = canonical_basis(&SubspaceBasis::from_spanning(&b, 1e-10).vectors);
        assert!((ca - cb).abs().max() < 1e-10);
    }

    #[test]
    fn lstsq_recovers_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, res) = lstsq(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12 && res < 1e-12);
    }

    fn char_poly_roots(m: &DenseMatrix) -> Vec<f64> {
        if m.nrows() == 2 {
            let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let tr = a + d;
            let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
            vec![(tr - disc) / 2.0, (tr + disc) / 2.0]
        } else {
            // Trigonometric solution of the depressed cubic for a symmetric 3x3 matrix.
            let q = m.trace() / 3.0;
            let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
            let p2 = (m[(0, 0)] - q).powi(2)
                + (m[(1, 1)] - q).powi(2)
                + (m[(2, 2)] - q).powi(2)
                + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let bm = (m - DMatrix::identity(3, 3) * q) / p;
            let r = (bm.determinant() / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            let e2 = 3.0 * q - e1 - e3;
            let mut v = vec![e1, e2, e3];
            v.sort_by(|a, b| a.total_cmp(b));
            v
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn constructed_rank_nullspace(seed in 0u64..10_000, r in 0usize..5, rows in 1usize..9, cols in 1usize..7) {
            let r = r.min(rows).min(cols);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = rand_mat(&mut rng, rows, r) * rand_mat(&mut rng, r, cols);
            let ns = nullspace(&m, DEFAULT_TOL).unwrap();
            prop_assert_eq!(ns.dim(), cols - r);
            let gram = ns.vectors.transpose() * &ns.vectors;
            prop_assert!((gram - DMatrix::identity(ns.dim(), ns.dim())).abs().max() < 1e-9);
            let mnorm = m.norm().max(1e-300);
            if ns.dim() > 0 {
                prop_assert!((&m * &ns.vectors).norm() <= 10.0 * DEFAULT_TOL * mnorm + 1e-300);
            }
            let nt = nullspace(&m.transpose(), DEFAULT_TOL).unwrap();
            prop_assert_eq!(ns.dim() as i64 - nt.dim() as i64, cols as i64 - rows as i64);
        }

        #[test]
        fn eigenvalues_match_characteristic_roots(seed in 0u64..10_000, n in 2usize..4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, n, n);
            let s = (&a + a.transpose()) * 0.5;
            let ev = sym_eigvals(&s).unwrap();
            let roots = char_poly_roots(&s);
            for (x, y) in ev.iter().zip(&roots) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn completion_is_orthogonal(seed in 0u64..10_000, k in 1usize..5, extra in 0usize..4) {
            let n = k + extra;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = rand_mat(&mut rng, n, k).qr().q();
            let rows = q.transpose();
            let full = orthogonal_completion(&rows).unwrap();
            prop_assert!((full.transpose() * &full - DMatrix::identity(n, n)).abs().max() <= 1e-10);
            prop_assert!((full.rows(0, k) - &rows).abs().max() <= 1e-14);
        }
    }
}
