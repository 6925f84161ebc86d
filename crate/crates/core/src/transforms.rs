//! System transformations: linear change of variables, reduction by fixing `z_n`,
//! entropy/energy exchange and reparameterization of `zeta`, with their induced maps on
//! symmetry generators.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet, Point};
use crate::linalg::{self, DenseMatrix};
use crate::sampling::DomainBox;
use crate::symmetry::{Generator, Method, SymmetrySpace};
use crate::system::{Eos, Field, Kind, SystemDef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Qu,
    Reduce,
    Exchange,
    ZetaF,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Qu => "qu",
            TransformKind::Reduce => "reduce",
            TransformKind::Exchange => "exchange",
            TransformKind::ZetaF => "zeta-f",
        }
    }
}

/// Parameters of an applied transformation and the name of its source system.
#[derive(Clone, Debug, Serialize)]
pub struct TransformRecord {
    pub kind: TransformKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    /// 1-based axis for reduce and exchange.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    pub source: String,
}

impl TransformRecord {
    fn new(kind: TransformKind, source: &SystemDef) -> TransformRecord {
        TransformRecord {
            kind,
            q: None,
            axis: None,
            c_e: None,
            f: None,
            source: source.name.clone(),
        }
    }

    /// One-line summary used as a provenance entry.
    pub fn describe(&self) -> String {
        let mut s = format!("transform {} of {}", self.kind.as_str(), self.source);
        if let Some(q) = &self.q {
            s.push_str(&format!(" q={q:?}"));
        }
        if let Some(a) = self.axis {
            s.push_str(&format!(" axis={a}"));
        }
        if let Some(c) = self.c_e {
            s.push_str(&format!(" c_e={c}"));
        }
        if let Some(f) = &self.f {
            s.push_str(&format!(" f={f}"));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Transformed {
    pub system: SystemDef,
    pub record: TransformRecord,
}

fn zsystem_parts(sys: &SystemDef) -> Result<(Expr, Field)> {
    match (sys.zeta(), sys.xi()) {
        (Some(z), Some(x)) => Ok((z.expr.clone(), x.clone())),
        _ => Err(Error::Unsupported(format!(
            "transformations need a Z-system, `{}` is {}",
            sys.name,
            sys.kind.as_str()
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn rebuild(
    src: &SystemDef,
    suffix: &str,
    kind: Kind,
    zeta: Expr,
    xi: Field,
    dom: DomainBox,
    e_h: Option<Vec<f64>>,
    record: &TransformRecord,
) -> Result<SystemDef> {
    let name = format!("{}-{suffix}", src.name);
    let mut s = SystemDef::zsystem_field(&name, kind, zeta, xi, dom, src.sampling)?;
    if let Some(e) = e_h {
        s = s.with_e_h(e)?;
    }
    s.provenance = src.provenance.clone();
    s.provenance.push(record.describe());
    Ok(s)
}

pub(crate) fn corners(d: &DomainBox) -> Vec<Point> {
    let n = d.dim();
    (0..1usize << n)
        .map(|mask| {
            (0..n)
                .map(|k| if mask >> k & 1 == 1 { d.upper[k] } else { d.lower[k] })
                .collect()
        })
        .collect()
}

pub(crate) fn clean_guards(guards: Vec<Expr>) -> Result<Vec<Expr>> {
    let mut out = Vec::new();
    for g in guards {
        let g = g.simplify();
        match g.as_const() {
            Some(c) if c > 0.0 => {}
            Some(c) => {
                return Err(Error::Invalid(format!(
                    "guard reduces to the constant {c}, the image domain is empty"
                )))
            }
            None => out.push(g),
        }
    }
    Ok(out)
}

/// Box around the images of `pts`, with guards encoding the source box and source guards
/// pulled back through `inv`. If the guards fail at the bounding-box center, the box is
/// shrunk symmetrically about the image of the source center.
pub(crate) fn image_domain(
    src: &DomainBox,
    pts: &[Point],
    fwd: &dyn Fn(&[f64]) -> Vec<f64>,
    inv: &[Expr],
    extra: Vec<Expr>,
) -> Result<DomainBox> {
    let n = fwd(&src.center()).len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in pts {
        for (k, x) in fwd(p).into_iter().enumerate() {
            lo[k] = lo[k].min(x);
            hi[k] = hi[k].max(x);
        }
    }
    let mut guards = Vec::new();
    for (k, e) in inv.iter().enumerate() {
        guards.push(e.clone() - Expr::c(src.lower[k]));
        guards.push(Expr::c(src.upper[k]) - e.clone());
    }
    guards.extend(src.guards.iter().map(|g| g.substitute(inv)));
    guards.extend(extra);
    let guards = clean_guards(guards)?;
    let trial = DomainBox {
        lower: lo.clone(),
        upper: hi.clone(),
        guards: guards.clone(),
    };
    if trial.guards_hold(&trial.center()) {
        return DomainBox::new(lo, hi, guards);
    }
    let c = fwd(&src.center());
    let half: Vec<f64> = (0..n).map(|k| (c[k] - lo[k]).min(hi[k] - c[k])).collect();
    DomainBox::new(
        (0..n).map(|k| c[k] - half[k]).collect(),
        (0..n).map(|k| c[k] + half[k]).collect(),
        guards,
    )
}

fn linear_subst(m: &DenseMatrix) -> Vec<Expr> {
    (0..m.nrows())
        .map(|i| {
            Expr::sum((0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| {
                if m[(i, j)] == 1.0 {
                    Expr::v(j)
                } else {
                    Expr::c(m[(i, j)]) * Expr::v(j)
                }
            }))
            .simplify()
        })
        .collect()
}

fn invert(q: &DenseMatrix) -> Result<DenseMatrix> {
    if !q.is_square() {
        return Err(Error::Shape("Q must be square".into()));
    }
    if linalg::rank(q, 1e-12) < q.nrows() {
        return Err(Error::Invalid("Q is singular".into()));
    }
    q.clone()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("Q is singular".into()))
}

/// `zeta^Q(z^Q) = zeta(Q^-1 z^Q)`, likewise `xi`; the potentials become `Q^-T psi`.
pub fn t_qu(sys: &SystemDef, q: &DenseMatrix) -> Result<Transformed> {
    let (zeta, xi) = zsystem_parts(sys)?;
    let n = sys.n;
    if q.nrows() != n {
        return Err(Error::Shape(format!("Q is {}x{} for n = {n}", q.nrows(), q.ncols())));
    }
    let qi = invert(q)?;
    let vals = linear_subst(&qi);
    let fwd = |z: &[f64]| -> Vec<f64> { (q * DVector::from_column_slice(z)).iter().copied().collect() };
    let mut pts = corners(&sys.domain);
    pts.push(sys.domain.center());
    let dom = image_domain(&sys.domain, &pts, &fwd, &vals, vec![])?;
    let mut record = TransformRecord::new(TransformKind::Qu, sys);
    record.q = Some(linalg::to_rows(q));
    let e_h = sys.e_h.as_ref().map(|e| fwd(e));
    rebuild(
        sys,
        "qu",
        sys.kind,
        zeta.substitute(&vals),
        xi.substitute(&vals, n)?,
        dom,
        e_h,
        &record,
    )
    .map(|system| Transformed { system, record })
}

fn map_qu(g: &Generator, q: &DenseMatrix, qi: &DenseMatrix, method: Method) -> Generator {
    let z = q * &g.z * qi;
    let x = match method {
        Method::Zsystem => -z.transpose(),
        Method::General => qi.transpose() * &g.x * q.transpose(),
    };
    Generator {
        x,
        z,
        omega: q * &g.omega,
        ..g.clone()
    }
}

/// `Z -> Q Z Q^-1`, `omega -> Q omega`, `X -> U X U^-1` with `U = Q^-T`; constants unchanged.
/// The stored residual is carried over from the source space.
pub fn map_generators_qu(space: &SymmetrySpace, q: &DenseMatrix) -> Result<SymmetrySpace> {
    if q.nrows() != space.n {
        return Err(Error::Shape("Q does not match the generator dimension".into()));
    }
    if space.method == Method::General && space.m != space.n {
        return Err(Error::Unsupported("Q-U map needs m = n".into()));
    }
    let qi = invert(q)?;
    let f = |g: &Generator| map_qu(g, q, &qi, space.method);
    Ok(SymmetrySpace {
        zero: space.zero.iter().map(f).collect(),
        zeta: space.zeta.as_ref().map(f),
        consts: space.consts.iter().map(f).collect(),
        trivial: space.trivial.iter().map(f).collect(),
        ..space.clone()
    })
}

fn reduce_field(f: &Field, vals: &[Expr], n: usize) -> Result<Field> {
    Ok(match f {
        Field::Explicit(j) => Field::explicit(j.expr.substitute(vals), n)?,
        Field::Eos(e) => Field::Eos(Box::new(reduce_eos(e, vals, n)?)),
        Field::Scaled { base, factor } => Field::Scaled {
            base: Box::new(reduce_field(base, vals, n)?),
            factor: Jet::new(factor.expr.substitute(vals), n, false)?,
        },
    })
}

fn reduce_eos(e: &Eos, vals: &[Expr], n: usize) -> Result<Eos> {
    let zeta = e.zeta.expr.substitute(vals);
    let zz = e.zzeta.as_ref().map(|j| j.expr.substitute(vals));
    match zz.as_ref().and_then(|s| s.as_const()) {
        Some(s0) => {
            let sigma = e.sigma.substitute(&[Expr::v(0), Expr::c(s0)]);
            Eos::new(zeta, sigma, None, n, e.xi_min, e.xi_max)
        }
        None => Eos::new(zeta, e.sigma.clone(), zz, n, e.xi_min, e.xi_max),
    }
}

/// Fix `z_n = c_e`. A `z_zeta` that becomes constant is folded into `sigma`.
pub fn t_reduce(sys: &SystemDef, c_e: f64) -> Result<Transformed> {
    let (zeta, xi) = zsystem_parts(sys)?;
    let n = sys.n;
    if n < 2 {
        return Err(Error::Invalid("cannot reduce a one-dimensional system".into()));
    }
    let d = &sys.domain;
    if !(c_e >= d.lower[n - 1] && c_e <= d.upper[n - 1]) {
        return Err(Error::Invalid(format!(
            "slice z{n} = {c_e} lies outside the domain [{}, {}]",
            d.lower[n - 1],
            d.upper[n - 1]
        )));
    }
    let mut vals: Vec<Expr> = (0..n - 1).map(Expr::v).collect();
    vals.push(Expr::c(c_e));
    let guards = clean_guards(d.guards.iter().map(|g| g.substitute(&vals)).collect())?;
    let dom = DomainBox::new(d.lower[..n - 1].to_vec(), d.upper[..n - 1].to_vec(), guards)?;
    let e_h = sys.e_h.as_ref().and_then(|e| {
        let nr = e[..n - 1].iter().map(|x| x * x).sum::<f64>().sqrt();
        (nr > 1e-12).then(|| e[..n - 1].to_vec())
    });
    let mut record = TransformRecord::new(TransformKind::Reduce, sys);
    record.axis = Some(n);
    record.c_e = Some(c_e);
    let xi = reduce_field(&xi, &vals, n - 1)?;
    let kind = if xi.eos().is_some() { sys.kind } else { Kind::Zsystem };
    rebuild(
        sys,
        "reduced",
        kind,
        zeta.substitute(&vals),
        xi,
        dom,
        e_h,
        &record,
    )
    .map(|system| Transformed { system, record })
}

fn combine(gens: &[Generator], c: &[f64]) -> Generator {
    let mut out = gens[0].clone();
    out.x *= c[0];
    out.z *= c[0];
    out.omega *= c[0];
    out.c_z *= c[0];
    out.c_xi *= c[0];
    out.c_zeta *= c[0];
    for (g, &w) in gens.iter().zip(c).skip(1) {
        out.x += &g.x * w;
        out.z += &g.z * w;
        out.omega += &g.omega * w;
        out.c_z += g.c_z * w;
        out.c_xi += g.c_xi * w;
        out.c_zeta += g.c_zeta * w;
    }
    out
}

/// Combinations of `gens` with `Z_{l.} = 0` and `omega_l = 0`.
fn with_zero_row(gens: &[Generator], l: usize) -> Result<Vec<Generator>> {
    if gens.is_empty() {
        return Ok(Vec::new());
    }
    let n = gens[0].n();
    if l >= n {
        return Err(Error::Arity { index: l + 1, arity: n });
    }
    let cm = DMatrix::from_fn(n + 1, gens.len(), |i, k| {
        let g = &gens[k];
        let s = g.zw_vector().amax().max(f64::MIN_POSITIVE);
        (if i < n { g.z[(l, i)] } else { g.omega[l] }) / s
    });
    if cm.amax() <= 1e-12 {
        return Ok(gens.to_vec());
    }
    let ns = linalg::nullspace(&cm, 1e-9)?;
    Ok((0..ns.dim())
        .map(|k| combine(gens, ns.vectors.column(k).as_slice()))
        .collect())
}

/// Generators of the reduced system: combinations with vanishing row `n`, then
/// `Z^ = Z[..n-1, ..n-1]`, `omega^_i = omega_i + Z_in c_e`.
pub fn map_generators_reduce(gens: &[Generator], c_e: f64) -> Result<Vec<Generator>> {
    let Some(n) = gens.first().map(Generator::n) else {
        return Ok(Vec::new());
    };
    Ok(with_zero_row(gens, n - 1)?
        .into_iter()
        .map(|g| {
            let z = g.z.view((0, 0), (n - 1, n - 1)).into_owned();
            let omega = DVector::from_fn(n - 1, |i, _| g.omega[i] + g.z[(i, n - 1)] * c_e);
            Generator {
                x: -z.transpose(),
                z,
                omega,
                ..g
            }
        })
        .collect())
}

/// `z~_l = c^2 / z_l`, `z~_j = c z_j / z_l`; its own inverse.
pub fn exchange_point(z: &[f64], l: usize, c: f64) -> Vec<f64> {
    let zl = z[l];
    z.iter()
        .enumerate()
        .map(|(j, &x)| if j == l { c * c / zl } else { c * x / zl })
        .collect()
}

/// Entropy/energy exchange on axis `l` (0-based): `zeta~ = zeta`, `xi~ = (c^2 / z_l^2) xi`.
/// An equation of state in `(xi, z_l)` or in `xi` alone is carried over as
/// `sigma~(x, s) = sigma(x c^2 / s^2, c^2 / s)` with `z~_zeta = z~_l`.
pub fn t_exchange(sys: &SystemDef, l: usize, c_e: f64) -> Result<Transformed> {
    let (zeta, xi) = zsystem_parts(sys)?;
    let n = sys.n;
    if l >= n {
        return Err(Error::Arity { index: l + 1, arity: n });
    }
    if c_e == 0.0 || !c_e.is_finite() {
        return Err(Error::Invalid("exchange needs a nonzero finite c_e".into()));
    }
    let d = &sys.domain;
    let ok_box = if c_e > 0.0 { d.lower[l] > 0.0 } else { d.upper[l] < 0.0 };
    let pts = sys.samples()?;
    if !ok_box || pts.iter().any(|p| !(p[l] * c_e > 0.0)) {
        return Err(Error::Invalid(format!(
            "domain crosses z{} = 0 or has the wrong sign for c_e = {c_e}",
            l + 1
        )));
    }
    let c2 = c_e * c_e;
    let zl = Expr::v(l);
    let vals: Vec<Expr> = (0..n)
        .map(|j| {
            if j == l {
                Expr::c(c2) / zl.clone()
            } else {
                Expr::c(c_e) * Expr::v(j) / zl.clone()
            }
        })
        .map(|e| e.simplify())
        .collect();
    let factor = (zl.clone().pow(Expr::c(2.0)) / Expr::c(c2)).simplify();
    let zeta_t = zeta.substitute(&vals);
    let eos_clean = xi.eos().filter(|e| match &e.zzeta {
        None => true,
        Some(j) => j.expr == Expr::v(l),
    });
    let (kind, field) = match (&xi, eos_clean) {
        (Field::Eos(_), Some(e)) => {
            let (x, s) = (Expr::v(0), Expr::v(1));
            let sigma = e.sigma.substitute(&[
                Expr::c(c2) * x / s.clone().pow(Expr::c(2.0)),
                Expr::c(c2) / s,
            ]);
            let eos = Eos::new(zeta_t.clone(), sigma, Some(Expr::v(l)), n, e.xi_min, e.xi_max)?;
            (Kind::ZsystemEos, Field::Eos(Box::new(eos)))
        }
        (Field::Explicit(j), _) => (
            Kind::Zsystem,
            Field::explicit((j.expr.substitute(&vals) * factor).simplify(), n)?,
        ),
        _ => (
            Kind::Zsystem,
            Field::Scaled {
                base: Box::new(xi.substitute(&vals, n)?),
                factor: Jet::new(factor, n, false)?,
            },
        ),
    };
    let fwd = |z: &[f64]| exchange_point(z, l, c_e);
    let mut img_pts = pts;
    img_pts.extend(corners(d));
    let sign = (Expr::c(c_e.signum()) * Expr::v(l)).simplify();
    let dom = image_domain(d, &img_pts, &fwd, &vals, vec![sign])?;
    let mut record = TransformRecord::new(TransformKind::Exchange, sys);
    record.axis = Some(l + 1);
    record.c_e = Some(c_e);
    rebuild(sys, "exchanged", kind, zeta_t, field, dom, sys.e_h.clone(), &record)
        .map(|system| Transformed { system, record })
}

/// Exchange map on generators: combinations with vanishing row `l`, then
/// `Z~_{jl} = omega_j / c`, `omega~_j = c Z_{jl}`, other columns unchanged.
pub fn map_generators_exchange(gens: &[Generator], l: usize, c_e: f64) -> Result<Vec<Generator>> {
    if c_e == 0.0 {
        return Err(Error::Invalid("exchange needs c_e != 0".into()));
    }
    Ok(with_zero_row(gens, l)?
        .into_iter()
        .map(|g| {
            let n = g.n();
            let mut z = g.z.clone();
            let mut omega = DVector::zeros(n);
            for j in 0..n {
                if j == l {
                    continue;
                }
                z[(j, l)] = g.omega[j] / c_e;
                omega[j] = c_e * g.z[(j, l)];
            }
            for k in 0..n {
                z[(l, k)] = 0.0;
            }
            Generator {
                x: -z.transpose(),
                z,
                omega,
                ..g
            }
        })
        .collect())
}

/// `zeta' = f(zeta)`, `xi' = xi / f'(zeta)`; `f` is an expression in `z1`. The image carries
/// `xi'` explicitly, so an equation of state is not transported.
pub fn t_zeta_f(sys: &SystemDef, f: &Expr) -> Result<Transformed> {
    let (zeta, xi) = zsystem_parts(sys)?;
    f.check_arity(1)?;
    if sys.eos().is_some_and(Eos::has_zzeta) {
        return Err(Error::Unsupported(
            "zeta reparameterization needs an equation of state in xi alone".into(),
        ));
    }
    let n = sys.n;
    let fp = f.diff(0).substitute(&[zeta.clone()]);
    let mut sign = 0.0;
    for p in sys.samples()? {
        let v = fp.eval(&p)?;
        if v == 0.0 || (sign != 0.0 && v.signum() != sign) {
            return Err(Error::Invalid(format!("f' vanishes on the zeta range near {p:?}")));
        }
        sign = v.signum();
    }
    let factor = (Expr::c(1.0) / fp).simplify();
    let field = match &xi {
        Field::Explicit(j) => Field::explicit((j.expr.clone() * factor).simplify(), n)?,
        other => Field::Scaled {
            base: Box::new(other.clone()),
            factor: Jet::new(factor, n, false)?,
        },
    };
    let mut record = TransformRecord::new(TransformKind::ZetaF, sys);
    record.f = Some(f.to_string());
    rebuild(
        sys,
        "zeta-f",
        Kind::Zsystem,
        f.substitute(&[zeta]),
        field,
        sys.domain.clone(),
        sys.e_h.clone(),
        &record,
    )
    .map(|system| Transformed { system, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::symmetry::{solve_zsystem, span_gap, zsystem_residual};

    fn iso(n: usize) -> SystemDef {
        catalog::euler_isentropic(n, 1.4).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn qu_identity() {
        let s = iso(2);
        let t = t_qu(&s, &DMatrix::identity(2, 2)).unwrap().system;
        for p in t.samples().unwrap() {
            assert!(max_diff(&t.psi_at(&p).unwrap(), &s.psi_at(&p).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn qu_flip_and_flux() {
        let s = iso(2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let t = t_qu(&s, &q).unwrap().system;
        let qi = q.clone().try_inverse().unwrap();
        let u = qi.transpose();
        for p in s.samples().unwrap().iter().take(40) {
            let pq: Vec<f64> = (&q * DVector::from_column_slice(p)).iter().copied().collect();
            let psi = s.psi_at(p).unwrap();
            let psiq = t.psi_at(&pq).unwrap();
            assert!((psiq[1] + psi[1]).abs() < 1e-13);
            let a = s.flux_at(p).unwrap();
            let aq = t.flux_at(&pq).unwrap();
            assert!((aq - &u * a * &qi).amax() < 1e-10);
            let e = s.entropy_at(p).unwrap();
            let eq = t.entropy_at(&pq).unwrap();
            let uq = &u * DVector::from_vec(e.q);
            assert!(max_diff(&eq.q, uq.as_slice()) < 1e-12);
        }
    }

    #[test]
    fn qu_group_law() {
        let s = iso(3);
        let q1 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, -0.8, 0.0, 0.8, 0.6]);
        let q2 = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let a = t_qu(&t_qu(&s, &q1).unwrap().system, &q2).unwrap().system;
        let b = t_qu(&s, &(&q2 * &q1)).unwrap().system;
        for p in b.samples().unwrap().iter().take(50) {
            assert!(max_diff(&a.psi_at(p).unwrap(), &b.psi_at(p).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn qu_generators_land() {
        let s = iso(3);
        let pts = s.samples().unwrap();
        let sp = solve_zsystem(&s, &pts, 1e-9).unwrap();
        let q = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let t = t_qu(&s, &q).unwrap().system;
        let tp = t.samples().unwrap();
        let mapped = map_generators_qu(&sp, &q).unwrap();
        for g in mapped.basis() {
            assert!(zsystem_residual(&t, g, &tp).unwrap() < 1e-8);
        }
        assert!(map_generators_qu(&sp, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn reduce_hierarchy() {
        let s = iso(3);
        let r = t_reduce(&s, 0.0).unwrap().system;
        assert_eq!(r.n, 2);
        let pts = r.samples().unwrap();
        for p in &pts {
            let mut full = p.clone();
            full.push(0.0);
            let a = s.psi_at(&full).unwrap();
            let b = r.psi_at(p).unwrap();
            assert!(max_diff(&a[..2], &b) < 1e-12);
        }
        assert!(t_reduce(&s, 5.0).is_err());
    }

    #[test]
    fn reduce_generators() {
        let s = iso(3);
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let r = t_reduce(&s, 0.3).unwrap().system;
        let rp = r.samples().unwrap();
        let mapped = map_generators_reduce(&sp.zero, 0.3).unwrap();
        assert_eq!(mapped.len(), 1);
        assert!(zsystem_residual(&r, &mapped[0], &rp).unwrap() < 1e-8);
        let direct = solve_zsystem(&r, &rp, 1e-9).unwrap();
        assert!(span_gap(&mapped, &direct.zero, 2) < 1e-8);
    }

    #[test]
    fn exchange_involution_exact() {
        let z = [3.0, -1.5, 0.5];
        for c in [-1.0, 2.0, 0.5] {
            let w = exchange_point(&exchange_point(&z, 2, c), 2, c);
            assert_eq!(w.as_slice(), &z);
        }
    }

    #[test]
    fn exchange_twice_restores_values() {
        let s = catalog::euler_entropy_conserving(3, catalog::gibbs(3.5, 1.0).unwrap()).unwrap();
        let t = t_exchange(&s, 2, -1.0).unwrap().system;
        let tt = t_exchange(&t, 2, -1.0).unwrap().system;
        for p in s.samples().unwrap().iter().take(40) {
            let a = s.zvalues(p).unwrap();
            let b = tt.zvalues(p).unwrap();
            assert!((a.zeta - b.zeta).abs() < 1e-12 && (a.xi - b.xi).abs() < 1e-10 * a.xi.abs());
        }
    }

    #[test]
    fn exchange_scales_xi() {
        let s = catalog::euler_entropy_conserving(3, catalog::gibbs(3.5, 1.0).unwrap()).unwrap();
        let t = t_exchange(&s, 2, -1.0).unwrap().system;
        for p in s.samples().unwrap().iter().take(40) {
            let pt = exchange_point(p, 2, -1.0);
            let a = s.zvalues(p).unwrap();
            let b = t.zvalues(&pt).unwrap();
            assert!((a.zeta - b.zeta).abs() < 1e-12);
            assert!((b.xi - a.xi / (p[2] * p[2])).abs() < 1e-10 * b.xi.abs());
        }
        assert!(t_exchange(&s, 2, 0.0).is_err());
        assert!(t_exchange(&s, 2, 1.0).is_err());
    }

    #[test]
    fn zeta_f_keeps_psi() {
        let s = iso(3);
        let f = Expr::parse("2*z1", 1).unwrap();
        let t = t_zeta_f(&s, &f).unwrap().system;
        for p in s.samples().unwrap() {
            let a = s.psi_at(&p).unwrap();
            assert!(max_diff(&a, &t.psi_at(&p).unwrap()) < 1e-12 * (1.0 + a[0].abs()));
        }
        let bad = Expr::parse("(z1 - 3.5)^2", 1).unwrap();
        assert!(t_zeta_f(&s, &bad).is_err());
    }

    #[test]
    fn extended_reduces_to_isentropic() {
        let g = catalog::gibbs(3.5, 1.0).unwrap();
        let ext = catalog::euler_extended(4, g.clone()).unwrap();
        let r = t_reduce(&ext, -1.0).unwrap().system;
        let sigma = g.substitute(&[Expr::v(0), Expr::c(1.0)]);
        let iso = catalog::euler_isentropic_with_eos(3, sigma, (2.0, 5.0)).unwrap();
        let pts = r.samples().unwrap();
        let mut checked = 0;
        for p in &pts {
            if let Ok(b) = iso.psi_at(p) {
                assert!(max_diff(&r.psi_at(p).unwrap(), &b) < 1e-10);
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn entropy_conserving_exchanges_to_extended() {
        let g = catalog::gibbs(3.5, 1.0).unwrap();
        let ec = catalog::euler_entropy_conserving(3, g.clone()).unwrap();
        let ext = catalog::euler_extended(3, g).unwrap();
        let t = t_exchange(&ec, 2, -1.0).unwrap().system;
        assert_eq!(t.kind, Kind::ZsystemEos);
        for p in ec.samples().unwrap().iter().take(100) {
            let pt = exchange_point(p, 2, -1.0);
            let a = t.psi_at(&pt).unwrap();
            let b = ext.psi_at(&pt).unwrap();
            assert!(max_diff(&a, &b) < 1e-9 * (1.0 + b[0].abs()));
        }
    }

    #[test]
    fn record_describes() {
        let s = iso(2);
        let r = t_reduce(&iso(3), 0.0).unwrap().record;
        assert_eq!(r.kind, TransformKind::Reduce);
        assert!(r.describe().contains("c_e=0"));
        assert!(t_qu(&s, &DMatrix::zeros(2, 2)).is_err());
    }
}
