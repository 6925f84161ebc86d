//! Nontrivial symmetry groups from sampled linear constraints.
//!
//! For a Z-system the unknowns are `(Z, omega, c_Z, c_xi, c_zeta)` and each sample gives
//! the two conditions
//!
//! ```text
//! zeta_z . (Z z + omega) = (c_Z - c_xi) zeta + c_zeta
//! xi_z   . (Z z + omega) = c_xi xi
//! ```
//!
//! The general solver works directly with `a(z)(Z z + omega) = (X + c_Z I) psi(z)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Point};
use crate::linalg::{self, DenseMatrix, SubspaceBasis};
use crate::system::{Base, Kind, SystemDef};

/// A symmetry triple `(X, Z, omega)` with its scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub x: DenseMatrix,
    pub z: DenseMatrix,
    pub omega: DVector<f64>,
    pub c_z: f64,
    pub c_xi: f64,
    pub c_zeta: f64,
}

impl Generator {
    /// Z-system generator with `X = -Z^T`.
    pub fn zsystem(z: DenseMatrix, omega: DVector<f64>) -> Generator {
        Generator {
            x: -z.transpose(),
            z,
            omega,
            c_z: 0.0,
            c_xi: 0.0,
            c_zeta: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// `N = Z - c_Z I`.
    pub fn n_matrix(&self) -> DenseMatrix {
        &self.z - DMatrix::identity(self.n(), self.n()) * self.c_z
    }

    /// `z* = Z z + omega`.
    pub fn zstar(&self, z: &[f64]) -> DVector<f64> {
        &self.z * DVector::from_column_slice(z) + &self.omega
    }

    /// `(Z, omega)` flattened row-major.
    pub fn zw_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut v = DVector::zeros(n * n + n);
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = self.z[(i, j)];
            }
            v[n * n + i] = self.omega[i];
        }
        v
    }

    pub fn from_zsystem_vector(v: &[f64], n: usize) -> Generator {
        let z = DMatrix::from_fn(n, n, |i, j| v[i * n + j]);
        let omega = DVector::from_fn(n, |i, _| v[n * n + i]);
        let mut g = Generator::zsystem(z, omega);
        g.c_z = v[n * n + n];
        g.c_xi = v[n * n + n + 1];
        g.c_zeta = v[n * n + n + 2];
        g
    }

    pub fn zsystem_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut v = DVector::zeros(n * n + n + 3);
        v.rows_mut(0, n * n + n).copy_from(&self.zw_vector());
        v[n * n + n] = self.c_z;
        v[n * n + n + 1] = self.c_xi;
        v[n * n + n + 2] = self.c_zeta;
        v
    }

    pub fn from_general_vector(v: &[f64], m: usize, n: usize) -> Generator {
        let x = DMatrix::from_fn(m, m, |i, j| v[i * m + j]);
        let o = m * m;
        let z = DMatrix::from_fn(n, n, |i, j| v[o + i * n + j]);
        let omega = DVector::from_fn(n, |i, _| v[o + n * n + i]);
        Generator {
            x,
            z,
            omega,
            c_z: v[o + n * n + n],
            c_xi: 0.0,
            c_zeta: 0.0,
        }
    }

    /// `(X, Z, omega, c_Z)` flattened row-major.
    pub fn general_vector(&self) -> DVector<f64> {
        let (m, n) = (self.x.nrows(), self.n());
        let mut v = DVector::zeros(m * m + n * n + n + 1);
        for i in 0..m {
            for j in 0..m {
                v[i * m + j] = self.x[(i, j)];
            }
        }
        v.rows_mut(m * m, n * n + n).copy_from(&self.zw_vector());
        v[m * m + n * n + n] = self.c_z;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Zsystem,
    General,
}

/// Generator space split into `{.}_0`, the `{.}_zeta` representative and `{.}_c`.
#[derive(Clone, Debug)]
pub struct SymmetrySpace {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub zero: Vec<Generator>,
    pub zeta: Option<Generator>,
    /// Informational remainder with nonzero scaling constants.
    pub consts: Vec<Generator>,
    /// Trivial symmetries found and removed.
    pub trivial: Vec<Generator>,
    pub tol: f64,
    pub sample_count: usize,
    /// Largest normalized constraint residual over the returned basis.
    pub residual: f64,
}

impl SymmetrySpace {
    pub fn total_dim(&self) -> usize {
        self.zero.len() + usize::from(self.zeta.is_some()) + self.consts.len()
    }

    pub fn basis(&self) -> Vec<&Generator> {
        self.zero
            .iter()
            .chain(self.zeta.iter())
            .chain(self.consts.iter())
            .collect()
    }

    /// `{.}_0` as a subspace of flattened `(Z, omega)`.
    pub fn zero_span(&self) -> SubspaceBasis {
        span_of(&self.zero, self.n, self.tol)
    }
}

fn span_of(gens: &[Generator], n: usize, tol: f64) -> SubspaceBasis {
    let mut m = DMatrix::zeros(n * n + n, gens.len());
    for (k, g) in gens.iter().enumerate() {
        m.set_column(k, &g.zw_vector());
    }
    SubspaceBasis::from_spanning(&m, tol.max(1e-10))
}

fn normalize_row(mut r: Vec<f64>) -> Vec<f64> {
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nr > 0.0 {
        r.iter_mut().for_each(|x| *x /= nr);
    }
    r
}

fn stack(rows: Vec<Vec<f64>>, cols: usize) -> DenseMatrix {
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

fn zsystem_rows(sys: &SystemDef, p: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = sys.n;
    let nu = n * n + n + 3;
    let zv = sys.zvalues(p)?;
    let eos = sys.kind == Kind::ZsystemEos;
    let row_for = |g: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; nu];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = g[i] * p[j];
            }
            r[n * n + i] = g[i];
        }
        r
    };
    let mut out = Vec::with_capacity(2);
    let mut r1 = row_for(&zv.zeta_z);
    r1[n * n + n] = -zv.zeta;
    r1[n * n + n + 1] = zv.zeta;
    r1[n * n + n + 2] = -1.0;
    out.push(normalize_row(r1));
    if eos {
        if let Some(s) = &zv.zzeta_z {
            out.push(normalize_row(row_for(s)));
        }
    } else {
        let mut r2 = row_for(&zv.xi_z);
        r2[n * n + n + 1] = -zv.xi;
        out.push(normalize_row(r2));
    }
    Ok(out)
}

fn zsystem_matrix(sys: &SystemDef, pts: &[Point]) -> Result<DenseMatrix> {
    let n = sys.n;
    let nu = n * n + n + 3;
    let per: Vec<Vec<Vec<f64>>> = pts
        .par_iter()
        .map(|p| zsystem_rows(sys, p))
        .collect::<Result<_>>()?;
    let mut rows: Vec<Vec<f64>> = per.into_iter().flatten().collect();
    if sys.kind == Kind::ZsystemEos {
        let mut pin = vec![0.0; nu];
        pin[n * n + n + 1] = 1.0;
        rows.push(pin);
    }
    Ok(stack(rows, nu))
}

/// Largest normalized Z-system constraint residual of `g` over the samples.
pub fn zsystem_residual(sys: &SystemDef, g: &Generator, pts: &[Point]) -> Result<f64> {
    let v = g.zsystem_vector();
    let nv = v.norm().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for p in pts {
        for r in zsystem_rows(sys, p)? {
            let d: f64 = r.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            worst = worst.max(d.abs() / nv);
        }
    }
    Ok(worst)
}

/// Largest relative residual of `a(Zz + omega) = (X + c_Z I) psi` over the samples.
pub fn general_residual(sys: &SystemDef, g: &Generator, pts: &[Point]) -> Result<f64> {
    if g.x.nrows() != sys.m || g.n() != sys.n {
        return Err(Error::Shape("generator does not match system dimensions".into()));
    }
    let xc = &g.x + DMatrix::identity(sys.m, sys.m) * g.c_z;
    let res: Vec<f64> = pts
        .par_iter()
        .map(|p| -> Result<f64> {
            let (psi, a) = sys.psi_flux_at(p)?;
            let psi = DVector::from_vec(psi);
            let zs = g.zstar(p);
            let lhs = &a * &zs;
            let rhs = &xc * &psi;
            let scale = a.norm() * zs.norm() + xc.norm() * psi.norm();
            Ok((lhs - rhs).norm() / scale.max(1e-300))
        })
        .collect::<Result<_>>()?;
    Ok(res.into_iter().fold(0.0, f64::max))
}

fn check_samples(need: usize, got: usize) -> Result<()> {
    if got < need {
        return Err(Error::InsufficientSamples { need, got });
    }
    Ok(())
}

/// Columns of `basis` that satisfy `rows . v = 0`, as an orthonormal set.
fn restrict(basis: &DenseMatrix, rows: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if basis.ncols() == 0 {
        return Ok(basis.clone());
    }
    let c = rows * basis;
    if c.abs().max() <= tol {
        return Ok(basis.clone());
    }
    let ns = linalg::nullspace(&c, tol)?;
    Ok(SubspaceBasis::from_spanning(&(basis * ns.vectors), 1e-10).vectors)
}

fn orth_minus(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let sa = SubspaceBasis {
        vectors: a.clone(),
        tol: 1e-9,
    };
    let sb = SubspaceBasis {
        vectors: b.clone(),
        tol: 1e-9,
    };
    sa.minus(&sb).vectors
}

/// Symmetries of a Z-system via the two scalar constraints.
pub fn solve_zsystem(sys: &SystemDef, pts: &[Point], tol: f64) -> Result<SymmetrySpace> {
    if !sys.is_zsystem() {
        return Err(Error::Invalid(format!(
            "system `{}` is not a Z-system",
            sys.name
        )));
    }
    let n = sys.n;
    let nu = n * n + n + 3;
    check_samples(nu, pts.len())?;
    let mat = zsystem_matrix(sys, pts)?;
    let all = linalg::nullspace(&mat, tol)?.vectors;

    let cz = n * n + n;
    let const_rows = DMatrix::from_fn(3, nu, |i, j| f64::from(u8::from(j == cz + i)));
    let zero_all = restrict(&all, &const_rows, tol)?;
    let mut ident = DVector::zeros(nu);
    for i in 0..n {
        ident[i * n + i] = 1.0;
    }
    ident /= (n as f64).sqrt();
    let zero_sb = SubspaceBasis {
        vectors: zero_all.clone(),
        tol,
    };
    let mut trivial = Vec::new();
    let zero = if zero_all.ncols() > 0 && zero_sb.contains(&ident, 1e-7) {
        trivial.push(Generator::from_zsystem_vector(
            (ident.clone() * (n as f64).sqrt()).as_slice(),
            n,
        ));
        orth_minus(&zero_all, &DMatrix::from_column_slice(nu, 1, ident.as_slice()))
    } else {
        zero_all.clone()
    };
    let zero = linalg::canonical_basis(&zero);

    let zc_rows = DMatrix::from_fn(2, nu, |i, j| f64::from(u8::from(j == cz + i)));
    let zeta_all = restrict(&all, &zc_rows, tol)?;
    let zeta_part = orth_minus(&zeta_all, &zero_all);
    let zeta = if zeta_part.ncols() > 0 {
        let k = (0..zeta_part.ncols())
            .max_by(|&a, &b| {
                zeta_part[(cz + 2, a)]
                    .abs()
                    .total_cmp(&zeta_part[(cz + 2, b)].abs())
            })
            .expect("nonempty");
        let v = zeta_part.column(k).into_owned();
        let c = v[cz + 2];
        if c.abs() > 1e-8 {
            let v = clean(v / c);
            Some(Generator::from_zsystem_vector(v.as_slice(), n))
        } else {
            None
        }
    } else {
        None
    };

    let mut known = zero_all.clone();
    if let Some(g) = &zeta {
        known = concat(&known, &DMatrix::from_column_slice(nu, 1, g.zsystem_vector().as_slice()));
    }
    if !trivial.is_empty() {
        known = concat(&known, &DMatrix::from_column_slice(nu, 1, ident.as_slice()));
    }
    let known = SubspaceBasis::from_spanning(&known, 1e-10).vectors;
    let rest = linalg::canonical_basis(&orth_minus(&all, &known));

    let mut residual: f64 = 0.0;
    for v in zero.column_iter().chain(rest.column_iter()) {
        residual = residual.max((&mat * v).amax());
    }
    if let Some(g) = &zeta {
        let v = g.zsystem_vector();
        residual = residual.max((&mat * &v).amax() / v.norm());
    }
    let to_gen = |m: &DenseMatrix| -> Vec<Generator> {
        m.column_iter()
            .map(|c| Generator::from_zsystem_vector(c.as_slice(), n))
            .collect()
    };
    Ok(SymmetrySpace {
        method: Method::Zsystem,
        n,
        m: n,
        zero: to_gen(&zero),
        zeta,
        consts: to_gen(&rest),
        trivial,
        tol,
        sample_count: pts.len(),
        residual,
    })
}

fn clean(mut v: DVector<f64>) -> DVector<f64> {
    let s = v.amax();
    for x in v.iter_mut() {
        if x.abs() <= 1e-13 * s {
            *x = 0.0;
        }
    }
    v
}

fn general_rows(sys: &SystemDef, p: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (m, n) = (sys.m, sys.n);
    let nu = m * m + n * n + n + 1;
    let (psi, a) = sys.psi_flux_at(p)?;
    let o = m * m;
    Ok((0..m)
        .map(|i| {
            let mut r = vec![0.0; nu];
            for l in 0..m {
                r[i * m + l] = -psi[l];
            }
            for j in 0..n {
                for k in 0..n {
                    r[o + j * n + k] = a[(i, j)] * p[k];
                }
                r[o + n * n + j] = a[(i, j)];
            }
            r[o + n * n + n] = -psi[i];
            normalize_row(r)
        })
        .collect())
}

/// Symmetries from `a(z)(Z z + omega) = (X + c_Z I) psi(z)`, with the scaling triple and
/// pure constant shifts of `z` removed.
pub fn solve_general(sys: &SystemDef, pts: &[Point], tol: f64) -> Result<SymmetrySpace> {
    let (m, n) = (sys.m, sys.n);
    let nu = m * m + n * n + n + 1;
    check_samples(nu.div_ceil(m), pts.len())?;
    if pts.len() * m < nu {
        return Err(Error::InsufficientSamples {
            need: nu.div_ceil(m),
            got: pts.len(),
        });
    }
    let per: Vec<Vec<Vec<f64>>> = pts
        .par_iter()
        .map(|p| general_rows(sys, p))
        .collect::<Result<_>>()?;
    let mat = stack(per.into_iter().flatten().collect(), nu);
    let all = linalg::nullspace(&mat, tol)?.vectors;
    let o = m * m;

    let mut scaling = DVector::zeros(nu);
    for i in 0..m {
        scaling[i * m + i] = 1.0;
    }
    scaling[o + n * n + n] = -1.0;
    let mut trivial = vec![Generator::from_general_vector(scaling.as_slice(), m, n)];
    let scaling = scaling.normalize();

    let not_omega = DMatrix::from_fn(m * m + n * n + 1, nu, |i, j| {
        let target = if i < o + n * n { i } else { o + n * n + n };
        f64::from(u8::from(j == target))
    });
    let shifts = restrict(&all, &not_omega, tol)?;
    for c in shifts.column_iter() {
        trivial.push(Generator::from_general_vector(c.as_slice(), m, n));
    }
    let tr = concat(&shifts, &DMatrix::from_column_slice(nu, 1, scaling.as_slice()));
    let nontrivial = orth_minus(&all, &SubspaceBasis::from_spanning(&tr, 1e-10).vectors);

    let cz_row = DMatrix::from_fn(1, nu, |_, j| f64::from(u8::from(j == o + n * n + n)));
    let zero = restrict(&nontrivial, &cz_row, tol)?;
    let rest = linalg::canonical_basis(&orth_minus(&nontrivial, &zero));
    let zero = linalg::canonical_basis(&zero);
    let mut residual: f64 = 0.0;
    for v in zero.column_iter().chain(rest.column_iter()) {
        residual = residual.max((&mat * v).amax());
    }
    let to_gen = |mm: &DenseMatrix| -> Vec<Generator> {
        mm.column_iter()
            .map(|c| Generator::from_general_vector(c.as_slice(), m, n))
            .collect()
    };
    Ok(SymmetrySpace {
        method: Method::General,
        n,
        m,
        zero: to_gen(&zero),
        zeta: None,
        consts: to_gen(&rest),
        trivial,
        tol,
        sample_count: pts.len(),
        residual,
    })
}

/// Solver selected by system kind.
pub fn solve(sys: &SystemDef, pts: &[Point], tol: f64) -> Result<SymmetrySpace> {
    if sys.is_zsystem() {
        solve_zsystem(sys, pts, tol)
    } else {
        solve_general(sys, pts, tol)
    }
}

#[derive(Clone, Debug)]
pub struct LambdaClassification {
    pub lambda_v: SubspaceBasis,
    pub lambda_i: SubspaceBasis,
    pub lambda_perp: SubspaceBasis,
    pub l: usize,
}

/// `Lambda^perp`, `Lambda^I`, `Lambda^V` from `{.}_0` and the `{.}_zeta` representative.
pub fn classify_lambda(space: &SymmetrySpace) -> Result<LambdaClassification> {
    let n = space.n;
    let tol = 1e-8;
    let gens: Vec<&Generator> = space.zero.iter().chain(space.zeta.iter()).collect();
    let (perp, inv) = if gens.is_empty() {
        (SubspaceBasis::full(n, tol), SubspaceBasis::empty(n, tol))
    } else {
        let mut full = Vec::new();
        let mut half = Vec::new();
        for g in &gens {
            let s = g.zw_vector().amax().max(f64::MIN_POSITIVE);
            for i in 0..n {
                full.push(g.z.row(i).iter().map(|x| x / s).collect::<Vec<_>>());
                let col: Vec<f64> = g.z.column(i).iter().map(|x| x / s).collect();
                full.push(col.clone());
                half.push(col);
            }
            let w: Vec<f64> = g.omega.iter().map(|x| x / s).collect();
            full.push(w.clone());
            half.push(w);
        }
        let perp = abs_nullspace(&stack(full, n), tol)?;
        let half = abs_nullspace(&stack(half, n), tol)?;
        (perp.clone(), half.minus(&perp))
    };
    let seen = SubspaceBasis::from_spanning(
        &concat(&perp.vectors, &inv.vectors),
        1e-10,
    );
    let v = seen.complement();
    Ok(LambdaClassification {
        l: n - perp.dim(),
        lambda_v: v.canonical(),
        lambda_i: inv.canonical(),
        lambda_perp: perp.canonical(),
    })
}

/// Nullspace with an absolute threshold on rows already scaled to unit size.
fn abs_nullspace(m: &DenseMatrix, tol: f64) -> Result<SubspaceBasis> {
    if m.abs().max() <= tol {
        return Ok(SubspaceBasis::full(m.ncols(), tol));
    }
    let s = m.clone().singular_values().max();
    linalg::nullspace(m, tol / s.max(1.0))
}

fn concat(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// One subclass predicate with its numeric evidence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Flag {
    pub name: &'static str,
    pub holds: bool,
    pub evidence: String,
}

fn flag(name: &'static str, holds: bool, evidence: String) -> Flag {
    Flag {
        name,
        holds,
        evidence,
    }
}

/// Names of the flags that hold.
pub fn flag_names(flags: &[Flag]) -> Vec<&'static str> {
    flags.iter().filter(|f| f.holds).map(|f| f.name).collect()
}

/// Evaluate the subclass predicates `W, C, ⊥, T, T*, q, q*, I, I*, ω, ω*`.
pub fn classify_subclasses(
    sys: &SystemDef,
    space: &SymmetrySpace,
    lambda: &LambdaClassification,
    pts: &[Point],
) -> Result<Vec<Flag>> {
    let mut out = Vec::new();
    if let Some(z) = sys.zeta() {
        let w = z.third_vanishes_symbolically().unwrap_or(false);
        out.push(flag("W", w, "third derivatives of zeta vanish identically".into()));
        let (c, r) = sys.check_closed(pts, 1e-9)?;
        out.push(flag("C", c, format!("max |z . psi| = {r:.3e}")));
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| Ok(normalize_row(z.eval(p, 1)?.g)))
            .collect::<Result<_>>()?;
        let ns = linalg::nullspace(&stack(rows, sys.n), 1e-9)?;
        out.push(flag("⊥", ns.dim() > 0, format!("dim null(zeta_z) = {}", ns.dim())));
    }
    if let Some(e) = sys.eos() {
        let t = e.has_zzeta();
        out.push(flag("T", t, "equation of state depends on z_zeta".into()));
        out.push(flag("T*", !t, "equation of state in xi only".into()));
    }
    if sys.m == sys.n {
        let (mut par, mut nonzero, mut qmax): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let mut scale: f64 = 0.0;
        for p in pts {
            let ep = sys.entropy_at(p)?;
            let q = DVector::from_vec(ep.q);
            let psi = DVector::from_vec(ep.psi);
            let pn = psi.norm_squared();
            scale = scale.max(psi.norm());
            qmax = qmax.max(q.norm());
            if pn > 0.0 {
                let lam = q.dot(&psi) / pn;
                nonzero = nonzero.max(lam.abs());
                let r = (&q - &psi * lam).norm() / (q.norm() + psi.norm()).max(1e-300);
                par = par.max(r);
            } else {
                par = par.max(q.norm());
            }
        }
        let tol = 1e-8;
        let qstar = qmax <= tol * scale.max(1.0);
        out.push(flag(
            "q",
            !qstar && par <= tol && nonzero > tol,
            format!("max parallel residual {par:.3e}, max |lambda| {nonzero:.3e}"),
        ));
        out.push(flag("q*", qstar, format!("max |q| = {qmax:.3e}")));
    }
    let di = lambda.lambda_i.dim();
    out.push(flag("I", di > 0, format!("dim Lambda^I = {di}")));
    out.push(flag("I*", di == 0, format!("dim Lambda^I = {di}")));
    let wmax = space
        .zero
        .iter()
        .map(|g| g.omega.amax() / g.zw_vector().amax().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let w = wmax > 1e-8;
    out.push(flag("ω", w, format!("max |omega| / |(Z, omega)| = {wmax:.3e}")));
    out.push(flag("ω*", !w, format!("max |omega| / |(Z, omega)| = {wmax:.3e}")));
    Ok(out)
}

/// Linear constraints used to select compatible generators.
#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// `X mu = 0`.
    Stationary(Vec<f64>),
    /// `X e = X^T e = 0`.
    SelfSimilar(Vec<f64>),
    /// `Z^T e = 0` and `omega . e = 0`.
    FixComponent(Vec<f64>),
    /// Row `l` (0-based) of `Z` and `omega_l` vanish.
    ExchangeRow(usize),
}

fn constraint_image(c: &Constraint, g: &Generator) -> Result<DVector<f64>> {
    let dv = |e: &[f64], len: usize| -> Result<DVector<f64>> {
        if e.len() != len {
            return Err(Error::Shape(format!(
                "constraint vector of length {} for dimension {len}",
                e.len()
            )));
        }
        Ok(DVector::from_column_slice(e))
    };
    Ok(match c {
        Constraint::Stationary(mu) => &g.x * dv(mu, g.x.nrows())?,
        Constraint::SelfSimilar(e) => {
            let e = dv(e, g.x.nrows())?;
            let a = &g.x * &e;
            let b = g.x.transpose() * &e;
            DVector::from_iterator(a.len() * 2, a.iter().chain(b.iter()).copied())
        }
        Constraint::FixComponent(e) => {
            let e = dv(e, g.n())?;
            let a = g.z.transpose() * &e;
            let w = g.omega.dot(&e);
            DVector::from_iterator(a.len() + 1, a.iter().copied().chain([w]))
        }
        Constraint::ExchangeRow(l) => {
            if *l >= g.n() {
                return Err(Error::Arity {
                    index: l + 1,
                    arity: g.n(),
                });
            }
            let mut e = vec![0.0; g.n()];
            e[*l] = 1.0;
            return constraint_image(&Constraint::FixComponent(e), g);
        }
    })
}

/// Sub-space of `{.}_0` satisfying the constraint, re-orthonormalized. The `{.}_zeta`
/// representative is kept when it satisfies the constraint on its own.
pub fn filter_generators(space: &SymmetrySpace, c: &Constraint) -> Result<SymmetrySpace> {
    let tol = 1e-9;
    let mut out = space.clone();
    out.consts.clear();
    if let Some(g) = &space.zeta {
        if constraint_image(c, g)?.amax() > tol * g.zsystem_vector().amax() {
            out.zeta = None;
        }
    }
    if space.zero.is_empty() {
        return Ok(out);
    }
    let imgs = space
        .zero
        .iter()
        .map(|g| constraint_image(c, g))
        .collect::<Result<Vec<_>>>()?;
    let rows = imgs[0].len();
    let cm = DMatrix::from_fn(rows, imgs.len(), |i, k| imgs[k][i]);
    let coeffs = if cm.amax() <= tol {
        DMatrix::identity(imgs.len(), imgs.len())
    } else {
        linalg::nullspace(&cm, tol)?.vectors
    };
    let vecs: Vec<DVector<f64>> = space
        .zero
        .iter()
        .map(|g| match space.method {
            Method::Zsystem => g.zsystem_vector(),
            Method::General => g.general_vector(),
        })
        .collect();
    let len = vecs[0].len();
    let basis = DMatrix::from_fn(len, vecs.len(), |i, k| vecs[k][i]);
    let kept = linalg::canonical_basis(&SubspaceBasis::from_spanning(&(basis * coeffs), 1e-10).vectors);
    out.zero = kept
        .column_iter()
        .map(|col| match space.method {
            Method::Zsystem => Generator::from_zsystem_vector(col.as_slice(), space.n),
            Method::General => Generator::from_general_vector(col.as_slice(), space.m, space.n),
        })
        .collect();
    Ok(out)
}

/// `zeta(z) = Y . z + z . W z / 2` after checking `W = W^T` and `W Y = 0`.
pub fn wy_zeta(w: &DenseMatrix, y: &DVector<f64>) -> Result<Expr> {
    let n = y.len();
    if w.shape() != (n, n) {
        return Err(Error::Shape("W and Y dimensions differ".into()));
    }
    if (w - w.transpose()).amax() > 1e-12 {
        return Err(Error::Invalid("W must be symmetric".into()));
    }
    let wy = (w * y).amax();
    if wy > 1e-12 * (1.0 + w.amax() * y.amax()) {
        return Err(Error::Invalid(format!("W Y = 0 violated (max {wy:.3e})")));
    }
    let mut terms = Vec::new();
    for i in 0..n {
        if y[i] != 0.0 {
            terms.push(Expr::c(y[i]) * Expr::v(i));
        }
    }
    for i in 0..n {
        for j in i..n {
            let c = if i == j { 0.5 * w[(i, i)] } else { w[(i, j)] };
            if c != 0.0 {
                let t = if i == j {
                    Expr::v(i).pow(Expr::c(2.0))
                } else {
                    Expr::v(i) * Expr::v(j)
                };
                terms.push(Expr::c(c) * t);
            }
        }
    }
    Ok(Expr::sum(terms).simplify())
}

/// Generators `(Z, omega_Z)` attached to a pair `(W, Y)`.
#[derive(Clone, Debug)]
pub struct WyGenerators {
    pub generators: Vec<Generator>,
    /// Basis of `{y : W y = 0, Y . y = 0}`.
    pub d_perp: SubspaceBasis,
    /// Largest residual of the `omega_Z` solves.
    pub omega_residual: f64,
}

pub fn wy_generators(w: &DenseMatrix, y: &DVector<f64>) -> Result<WyGenerators> {
    wy_zeta(w, y)?;
    let n = y.len();
    let tol = 1e-9;
    let mut dm = w.clone().insert_row(n, 0.0);
    dm.set_row(n, &y.transpose());
    let d_perp = if dm.amax() == 0.0 {
        SubspaceBasis::full(n, tol)
    } else {
        linalg::nullspace(&dm, tol)?
    };
    let ker_w = if w.amax() == 0.0 {
        SubspaceBasis::full(n, tol)
    } else {
        linalg::nullspace(w, tol)?
    };
    let nz = n * n;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for a in 0..n {
        for b in 0..n {
            // (WZ + Z^T W)_ab
            let mut r = vec![0.0; nz];
            for k in 0..n {
                r[k * n + b] += w[(a, k)];
                r[k * n + a] += w[(k, b)];
            }
            rows.push(r);
        }
    }
    for yv in d_perp.vectors.column_iter() {
        for j in 0..n {
            let mut r = vec![0.0; nz];
            for i in 0..n {
                r[i * n + j] = yv[i];
            }
            rows.push(r);
        }
    }
    for kv in ker_w.vectors.column_iter() {
        let mut r = vec![0.0; nz];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = kv[j] * y[i];
            }
        }
        rows.push(r);
    }
    let cm = stack(rows, nz);
    let zs = if cm.amax() == 0.0 {
        DMatrix::identity(nz, nz)
    } else {
        linalg::nullspace(&cm, tol)?.vectors
    };
    let zs = linalg::canonical_basis(&zs);
    let np = d_perp.dim();
    let mut lhs = DMatrix::zeros(1 + np + n, n);
    lhs.set_row(0, &y.transpose());
    for (k, v) in d_perp.vectors.column_iter().enumerate() {
        lhs.set_row(1 + k, &v.transpose());
    }
    lhs.view_mut((1 + np, 0), (n, n)).copy_from(w);
    let mut gens = Vec::new();
    let mut worst: f64 = 0.0;
    for col in zs.column_iter() {
        let z = DMatrix::from_fn(n, n, |i, j| col[i * n + j]);
        let mut rhs = DVector::zeros(1 + np + n);
        rhs.rows_mut(1 + np, n).copy_from(&(-(z.transpose() * y)));
        let (omega, res) = linalg::lstsq(&lhs, &rhs)?;
        worst = worst.max(res);
        if res > 1e-8 {
            return Err(Error::Numerical(format!(
                "omega_Z solve inconsistent (residual {res:.3e})"
            )));
        }
        gens.push(Generator::zsystem(z, clean(omega)));
    }
    Ok(WyGenerators {
        generators: gens,
        d_perp,
        omega_residual: worst,
    })
}

/// Largest relative distance of `gens` from `space`'s `{.}_0`.
pub fn membership_gap(space: &SymmetrySpace, gens: &[Generator]) -> f64 {
    let sb = space.zero_span();
    gens.iter()
        .map(|g| sb.rel_distance(&g.zw_vector()))
        .fold(0.0, f64::max)
}

/// Largest relative distance between the `(Z, omega)` spans of two generator lists.
pub fn span_gap(a: &[Generator], b: &[Generator], n: usize) -> f64 {
    span_of(a, n, 1e-10).gap(&span_of(b, n, 1e-10))
}

/// Residual of `q* = (X + c_Z I) q + a omega`, where `q*` is the derivative of `q` along
/// `z* = Z z + omega`.
pub fn entropy_bookkeeping_residual(sys: &SystemDef, g: &Generator, pts: &[Point]) -> Result<f64> {
    let m = sys.m;
    let mut worst: f64 = 0.0;
    for p in pts {
        let zs = g.zstar(p);
        let zp = DVector::from_column_slice(p);
        let ep = sys.entropy_at(p)?;
        let a = sys.flux_at(p)?;
        let q = DVector::from_vec(ep.q);
        let rhs = (&g.x + DMatrix::identity(m, m) * g.c_z) * &q + &a * &g.omega;
        let mut lhs = DVector::zeros(m);
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let h = sys.hess_at(p, &e)?;
            lhs[i] = (h * &zp).dot(&zs);
        }
        let scale = 1.0 + lhs.norm().max(rhs.norm());
        worst = worst.max((lhs - rhs).norm() / scale);
    }
    Ok(worst)
}

/// True if the system carries exact third derivatives (needed for the general Hessians).
pub fn supports_hessian(sys: &SystemDef) -> bool {
    match &sys.base {
        Base::Explicit(_) => true,
        Base::Fields(fs) => fs.terms.iter().all(|t| t.zeta.has_third()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{DomainBox, Sampling};

    fn p(s: &str, n: usize) -> Expr {
        Expr::parse(s, n).unwrap()
    }

    fn galilean_sys() -> SystemDef {
        SystemDef::zsystem_eos(
            "g",
            p("z1+0.5*z2^2", 2),
            p("z1", 1),
            None,
            DomainBox::new(vec![1.0, -1.0], vec![2.0, 1.0], vec![]).unwrap(),
            Sampling::default(),
            (1e-6, 1e6),
        )
        .unwrap()
    }

    #[test]
    fn galilean_pair() {
        let s = galilean_sys();
        let pts = s.samples().unwrap();
        let sp = solve_zsystem(&s, &pts, 1e-9).unwrap();
        assert_eq!(sp.zero.len(), 1);
        let g = &sp.zero[0];
        let r = g.z[(0, 1)];
        // Z = [[0,1],[0,0]], omega = (0,-1) up to scale.
        let want = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0, -1.0]) * r;
        assert!((g.zw_vector() - want).amax() < 1e-10, "{g:?}");
        assert!(sp.residual < 1e-8);
        let z = sp.zeta.as_ref().unwrap();
        assert!((z.omega[0] - 1.0).abs() < 1e-9 && z.z.amax() < 1e-9);
    }

    #[test]
    fn insufficient_samples() {
        let s = galilean_sys();
        let pts = s.samples().unwrap();
        assert!(matches!(
            solve_zsystem(&s, &pts[..3], 1e-9),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn linear_zeta_counts() {
        // zeta = z1, xi = 1 in n = 2: zeta* = (Zz+omega)_1 = 0 forces row 1 and omega_1 to
        // vanish, leaving Z_21, Z_22, omega_2; Z = diag(0,1) is a proper member.
        let s = SystemDef::zsystem(
            "l",
            p("z1", 2),
            p("1", 2),
            DomainBox::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![]).unwrap(),
            Sampling::default(),
        )
        .unwrap();
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        assert_eq!(sp.zero.len(), 3);
        for g in &sp.zero {
            assert!(g.z.row(0).amax() < 1e-12 && g.omega[0].abs() < 1e-12);
        }
    }

    #[test]
    fn wy_example_dims() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let r = wy_generators(&w, &y).unwrap();
        assert_eq!(r.generators.len(), 3);
        for g in &r.generators {
            let anti = (&g.z + g.z.transpose()).amax() < 1e-12;
            if anti {
                assert!(g.omega.amax() < 1e-12);
            } else {
                // boost: Z_1j = Z_j1 scaled, omega = -e_j scaled
                let j = if g.z[(0, 1)].abs() > 0.5 { 1 } else { 2 };
                let s = g.z[(0, j)];
                assert!((g.omega[j] + s).abs() < 1e-12, "{g:?}");
            }
        }
        let zero = wy_generators(
            &DMatrix::zeros(3, 3),
            &DVector::from_vec(vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!(zero.generators.is_empty());
        assert!(wy_generators(&w, &DVector::from_vec(vec![0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn wy_zeta_form() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let z = wy_zeta(&w, &y).unwrap();
        for pt in [[0.3, 0.7], [-1.0, 2.0]] {
            assert!((z.eval(&pt).unwrap() - (pt[0] + 0.5 * pt[1] * pt[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_fix_component() {
        let s = galilean_sys();
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let f = filter_generators(&sp, &Constraint::Stationary(vec![0.0, 1.0])).unwrap();
        assert_eq!(f.zero.len(), 1);
        let f = filter_generators(&sp, &Constraint::Stationary(vec![1.0, 0.0])).unwrap();
        assert_eq!(f.zero.len(), 0);
        let f = filter_generators(&sp, &Constraint::FixComponent(vec![0.0, 1.0])).unwrap();
        assert_eq!(f.zero.len(), 0);
    }

    #[test]
    fn filter_isentropic_reductions() {
        let s = crate::catalog::euler_isentropic(3, 1.4).unwrap();
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let st = filter_generators(&sp, &Constraint::Stationary(vec![0.0, 0.0, 1.0])).unwrap();
        assert_eq!(st.zero.len(), 2);
        for g in &st.zero {
            assert!((&g.x * DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-9);
        }
        let ss = filter_generators(&sp, &Constraint::SelfSimilar(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(ss.zero.len(), 1);
        let g = &ss.zero[0];
        assert!((&g.z + g.z.transpose()).amax() < 1e-9);
    }
}
