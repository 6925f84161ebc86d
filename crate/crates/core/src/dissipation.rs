//! Symmetric-gradient dissipation `D(z, theta)` and its invariance under `{.}_0` generators
//! through `A~ = Z^T A + A Z - A X^T - X A`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SubspaceBasis};
use crate::symmetry::{Generator, SymmetrySpace};

pub const INVARIANCE_TOL: f64 = 1e-10;

/// Symmetric `n x n` coefficient matrix of the dissipation form.
#[derive(Clone, Debug, PartialEq)]
pub struct DissipationForm {
    a: DenseMatrix,
}

impl DissipationForm {
    /// Symmetrizes `a`.
    pub fn new(a: DenseMatrix) -> Result<DissipationForm> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::Shape(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("A has non-finite entries".into()));
        }
        let a = (&a + a.transpose()) * 0.5;
        Ok(DissipationForm { a })
    }

    pub fn identity(n: usize) -> DissipationForm {
        DissipationForm {
            a: DMatrix::identity(n, n),
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// `A~ = Z^T A + A Z - A X^T - X A`.
pub fn a_tilde(a: &DenseMatrix, x: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.nrows();
    for (name, m) in [("A", a), ("X", x), ("Z", z)] {
        if m.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {n}x{n}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(z.transpose() * a + a * z - a * x.transpose() - x * a)
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratorInvariance {
    pub index: usize,
    pub frobenius: f64,
    pub max_abs: f64,
    pub antisymmetric_z: bool,
    pub passes: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvarianceScope {
    /// Every `{.}_0` generator leaves the form invariant.
    Full,
    /// Exactly the generators with antisymmetric `Z`.
    RotationSubspan,
    /// Some other proper sub-span.
    Partial,
    None,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub generators: Vec<GeneratorInvariance>,
    pub zero_dim: usize,
    pub invariant_dim: usize,
    pub rotation_dim: usize,
    pub scope: InvarianceScope,
    /// `(Z, omega)` row-major basis of the invariant sub-span.
    #[serde(skip)]
    pub invariant_span: SubspaceBasis,
    pub tol: f64,
}

fn flatten(m: &DenseMatrix) -> Vec<f64> {
    linalg::row_major(m)
}

fn span_in_zw(gens: &[Generator], coeffs: &SubspaceBasis, n: usize, tol: f64) -> SubspaceBasis {
    let k = coeffs.dim();
    if k == 0 {
        return SubspaceBasis::empty(n * n + n, tol);
    }
    let mut cols = DMatrix::zeros(n * n + n, k);
    for c in 0..k {
        let v = coeffs.column(c);
        let mut acc = DVector::zeros(n * n + n);
        for (g, w) in gens.iter().zip(&v) {
            acc += g.zw_vector() * *w;
        }
        cols.set_column(c, &acc);
    }
    SubspaceBasis::from_spanning(&cols, tol)
}

fn kernel_of(
    gens: &[Generator],
    n: usize,
    map: impl Fn(&Generator) -> Result<Vec<f64>>,
    tol: f64,
) -> Result<SubspaceBasis> {
    let k = gens.len();
    let cols: Vec<Vec<f64>> = gens.iter().map(&map).collect::<Result<_>>()?;
    let rows = cols.first().map_or(0, Vec::len);
    let mut m = DMatrix::zeros(rows.max(1), k);
    for (c, v) in cols.iter().enumerate() {
        for (r, x) in v.iter().enumerate() {
            m[(r, c)] = *x;
        }
    }
    let coeffs = linalg::nullspace(&m, tol)?;
    Ok(span_in_zw(gens, &coeffs, n, 1e-9))
}

/// Evaluates `A~` on every `{.}_0` generator and finds the sub-span where it vanishes.
pub fn invariance_check(form: &DissipationForm, space: &SymmetrySpace) -> Result<InvarianceReport> {
    let a = form.matrix();
    let n = space.n;
    if form.n() != n {
        return Err(Error::Shape(format!("A is {0}x{0}, generators act on n={n}", form.n())));
    }
    let gens = &space.zero;
    let mut per = Vec::with_capacity(gens.len());
    for (index, g) in gens.iter().enumerate() {
        let at = a_tilde(a, &g.x, &g.z)?;
        let scale = 1.0_f64.max(a.norm() * g.z.norm());
        let frobenius = at.norm();
        per.push(GeneratorInvariance {
            index,
            frobenius,
            max_abs: at.amax(),
            antisymmetric_z: (&g.z + g.z.transpose()).amax() <= INVARIANCE_TOL * scale,
            passes: frobenius <= INVARIANCE_TOL * scale,
        });
    }
    let (inv, rot) = if gens.is_empty() {
        let e = SubspaceBasis::empty(n * n + n, 1e-9);
        (e.clone(), e)
    } else {
        let inv = kernel_of(gens, n, |g| Ok(flatten(&a_tilde(a, &g.x, &g.z)?)), 1e-9)?;
        let rot = kernel_of(gens, n, |g| Ok(flatten(&(&g.z + g.z.transpose()))), 1e-9)?;
        (inv, rot)
    };
    let zero_dim = gens.len();
    let scope = if zero_dim > 0 && inv.dim() == zero_dim {
        InvarianceScope::Full
    } else if inv.dim() == 0 {
        InvarianceScope::None
    } else if inv.dim() == rot.dim() && inv.gap(&rot) < 1e-6 {
        InvarianceScope::RotationSubspan
    } else {
        InvarianceScope::Partial
    };
    Ok(InvarianceReport {
        generators: per,
        zero_dim,
        invariant_dim: inv.dim(),
        rotation_dim: rot.dim(),
        scope,
        invariant_span: inv,
        tol: INVARIANCE_TOL,
    })
}

/// Basis of symmetric `A` with `Z^T A + A Z = 0` for every given `Z`, each normalized to unit
/// Frobenius norm, with the largest residual.
pub fn commuting_forms(zs: &[DenseMatrix], tol: f64) -> Result<(Vec<DenseMatrix>, f64)> {
    let n = zs
        .first()
        .ok_or_else(|| Error::Invalid("no generator matrices".into()))?
        .nrows();
    if zs.iter().any(|z| z.shape() != (n, n)) {
        return Err(Error::Shape("generator matrices differ in size".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let unit = |k: usize| {
        let (i, j) = pairs[k];
        let mut e = DMatrix::zeros(n, n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    };
    let mut m = DMatrix::zeros(zs.len() * n * n, pairs.len());
    for k in 0..pairs.len() {
        let e = unit(k);
        for (t, z) in zs.iter().enumerate() {
            let r = z.transpose() * &e + &e * z;
            for (p, x) in flatten(&r).iter().enumerate() {
                m[(t * n * n + p, k)] = *x;
            }
        }
    }
    let ns = linalg::nullspace(&m, tol)?;
    let mut out = Vec::with_capacity(ns.dim());
    let mut worst = 0.0_f64;
    for c in 0..ns.dim() {
        let v = ns.column(c);
        let mut a = DMatrix::zeros(n, n);
        for (k, w) in v.iter().enumerate() {
            a += unit(k) * *w;
        }
        let a = &a / a.norm();
        for z in zs {
            worst = worst.max((z.transpose() * &a + &a * z).norm());
        }
        out.push(a);
    }
    Ok((out, worst))
}

/// Values of an `n`-component field on a regular lattice in `m` space dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteField {
    pub n: usize,
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Node-major, first axis slowest.
    pub values: Vec<f64>,
}

impl DiscreteField {
    pub fn new(n: usize, dims: Vec<usize>, spacing: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() != spacing.len() {
            return Err(Error::Shape("dims and spacing must be nonempty and equal length".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Invalid("every axis needs at least 2 nodes".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Invalid("spacing must be positive".into()));
        }
        let nodes: usize = dims.iter().product();
        if values.len() != nodes * n || n == 0 {
            return Err(Error::Shape(format!(
                "{} values for {nodes} nodes of {n} components",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("field values must be finite".into()));
        }
        Ok(DiscreteField {
            n,
            dims,
            spacing,
            values,
        })
    }

    /// Samples `f(x)` at `x = index * spacing`.
    pub fn from_fn(
        n: usize,
        dims: Vec<usize>,
        spacing: Vec<f64>,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let nodes: usize = dims.iter().product();
        let mut values = Vec::with_capacity(nodes * n);
        for node in 0..nodes {
            let x: Vec<f64> = Self::index_of(&dims, node)
                .iter()
                .zip(&spacing)
                .map(|(&i, h)| i as f64 * h)
                .collect();
            let v = f(&x);
            if v.len() != n {
                return Err(Error::Shape("field function returned the wrong length".into()));
            }
            values.extend(v);
        }
        Self::new(n, dims, spacing, values)
    }

    pub fn m(&self) -> usize {
        self.dims.len()
    }

    pub fn nodes(&self) -> usize {
        self.dims.iter().product()
    }

    fn index_of(dims: &[usize], mut node: usize) -> Vec<usize> {
        let mut idx = vec![0; dims.len()];
        for a in (0..dims.len()).rev() {
            idx[a] = node % dims[a];
            node /= dims[a];
        }
        idx
    }

    fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    fn value(&self, node: usize, comp: usize) -> f64 {
        self.values[node * self.n + comp]
    }

    /// `d z_comp / d x_axis` at `node`: central inside, second-order one-sided at the ends
    /// when the axis has three or more nodes.
    pub fn derivative(&self, node: usize, comp: usize, axis: usize) -> f64 {
        let d = self.dims[axis];
        let s = self.stride(axis);
        let h = self.spacing[axis];
        let i = (node / s) % d;
        let at = |k: usize| self.value(node - i * s + k * s, comp);
        if i > 0 && i + 1 < d {
            (at(i + 1) - at(i - 1)) / (2.0 * h)
        } else if d == 2 {
            (at(1) - at(0)) / h
        } else if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else {
            (3.0 * at(d - 1) - 4.0 * at(d - 2) + at(d - 3)) / (2.0 * h)
        }
    }

    fn trapezoid_weight(&self, node: usize) -> f64 {
        Self::index_of(&self.dims, node)
            .iter()
            .zip(self.dims.iter().zip(&self.spacing))
            .map(|(&i, (&d, &h))| if i == 0 || i + 1 == d { 0.5 * h } else { h })
            .product()
    }

    /// Little-endian `m`, `n` (u64), dims (u64 each), spacing (f64 each), then the values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Invalid(format!("grid write: {e}"));
        w.write_u64::<LittleEndian>(self.m() as u64).map_err(io)?;
        w.write_u64::<LittleEndian>(self.n as u64).map_err(io)?;
        for &d in &self.dims {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &h in self.spacing.iter().chain(&self.values) {
            w.write_f64::<LittleEndian>(h).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<DiscreteField> {
        let io = |e: std::io::Error| Error::Invalid(format!("grid read: {e}"));
        let m = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if m == 0 || m > 16 || n == 0 || n > 1 << 16 {
            return Err(Error::Invalid(format!("grid header m={m} n={n}")));
        }
        let dims = (0..m)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let spacing = (0..m)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let total = dims
            .iter()
            .try_fold(n, |acc, &d| acc.checked_mul(d))
            .filter(|&t| t <= 1 << 28)
            .ok_or_else(|| Error::Invalid("grid too large".into()))?;
        let mut values = vec![0.0; total];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(io)?;
        DiscreteField::new(n, dims, spacing, values)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationValue {
    pub nodal: Vec<f64>,
    pub integral: f64,
}

/// `S(f) = sum_ij A_ij (f_{j,x_i} + f_{i,x_j})` at each node.
pub fn contracted(form: &DissipationForm, f: &DiscreteField) -> Result<Vec<f64>> {
    let n = form.n();
    if f.n != n || f.m() != n {
        return Err(Error::Shape(format!(
            "field has m={} n={}, form needs m = n = {n}",
            f.m(),
            f.n
        )));
    }
    let a = form.matrix();
    Ok((0..f.nodes())
        .into_par_iter()
        .map(|node| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if a[(i, j)] != 0.0 {
                        s += a[(i, j)] * (f.derivative(node, j, i) + f.derivative(node, i, j));
                    }
                }
            }
            s
        })
        .collect())
}

/// `D(z, theta) = S(z) S(theta)` per node and its trapezoidal integral.
pub fn dissipation_value(
    form: &DissipationForm,
    field: &DiscreteField,
    theta: &DiscreteField,
) -> Result<DissipationValue> {
    if field.dims != theta.dims || field.spacing != theta.spacing || field.n != theta.n {
        return Err(Error::Shape("field and test function grids differ".into()));
    }
    let sz = contracted(form, field)?;
    let st = contracted(form, theta)?;
    let nodal: Vec<f64> = sz.iter().zip(&st).map(|(a, b)| a * b).collect();
    let integral = nodal
        .iter()
        .enumerate()
        .map(|(k, v)| v * field.trapezoid_weight(k))
        .sum();
    Ok(DissipationValue { nodal, integral })
}
