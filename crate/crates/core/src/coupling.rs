//! Coupled systems: the block assembly, strategy A (a linear constraint on the block
//! variable followed by orthogonal reduction) and strategy B (shared `zeta`, weights mixed
//! by a matrix `B`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet};
use crate::linalg::{self, DenseMatrix};
use crate::sampling::DomainBox;
use crate::symmetry::Generator;
use crate::system::{AffineMap, Base, FieldSystem, SystemDef, Term};
use crate::transforms::{clean_guards, corners, image_domain};

fn shifted(n: usize, offset: usize, total: usize) -> Vec<Expr> {
    debug_assert!(offset + n <= total);
    (0..n).map(|j| Expr::v(offset + j)).collect()
}

fn block_domain(cs: &[SystemDef]) -> Result<DomainBox> {
    let total: usize = cs.iter().map(|c| c.n).sum();
    let (mut lo, mut hi, mut guards) = (Vec::new(), Vec::new(), Vec::new());
    let mut off = 0;
    for c in cs {
        lo.extend_from_slice(&c.domain.lower);
        hi.extend_from_slice(&c.domain.upper);
        let vals = shifted(c.n, off, total);
        guards.extend(c.domain.guards.iter().map(|g| g.substitute(&vals)));
        off += c.n;
    }
    DomainBox::new(lo, hi, guards)
}

fn block_map(cs: &[SystemDef]) -> Option<AffineMap> {
    if cs.iter().all(|c| c.map.is_none()) {
        return None;
    }
    let nb: usize = cs.iter().map(SystemDef::base_dim).sum();
    let n: usize = cs.iter().map(|c| c.n).sum();
    let mut m = DMatrix::zeros(nb, n);
    let mut b = DVector::zeros(nb);
    let (mut r, mut col) = (0, 0);
    for c in cs {
        let k = c.base_dim();
        match &c.map {
            Some(mp) => {
                m.view_mut((r, col), (k, c.n)).copy_from(&mp.matrix);
                b.rows_mut(r, k).copy_from(&mp.offset);
            }
            None => m.view_mut((r, col), (k, c.n)).fill_with_identity(),
        }
        r += k;
        col += c.n;
    }
    Some(AffineMap {
        matrix: m,
        offset: b,
    })
}

fn common_m(cs: &[SystemDef]) -> Result<usize> {
    let m = cs
        .first()
        .ok_or_else(|| Error::Invalid("no constituent systems".into()))?
        .m;
    if cs.iter().any(|c| c.m != m) {
        return Err(Error::Shape("constituents differ in m".into()));
    }
    Ok(m)
}

fn common_e_h(cs: &[SystemDef]) -> Option<Vec<f64>> {
    let e = cs.first()?.e_h.clone()?;
    cs.iter()
        .all(|c| c.e_h.as_ref().is_some_and(|f| linalg_close(f, &e)))
        .then_some(e)
}

fn linalg_close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

fn finish(
    mut s: SystemDef,
    cs: &[SystemDef],
    what: &str,
) -> Result<SystemDef> {
    if let Some(e) = common_e_h(cs) {
        s = s.with_e_h(e)?;
    }
    s.provenance = vec![format!(
        "{what} of {}",
        cs.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
    )];
    Ok(s)
}

/// Block system `psi(z^1, .., z^K) = sum_k psi^k(z^k)` in the concatenated variable.
/// A single constituent is returned unchanged.
pub fn assemble_block(cs: &[SystemDef]) -> Result<SystemDef> {
    let m = common_m(cs)?;
    if cs.len() == 1 {
        return Ok(cs[0].clone());
    }
    let nb: usize = cs.iter().map(SystemDef::base_dim).sum();
    let name = cs.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+");
    let dom = block_domain(cs)?;
    let map = block_map(cs);
    let sampling = cs[0].sampling;
    let s = if cs.iter().all(|c| matches!(c.base, Base::Fields(_))) {
        let nf: usize = cs.iter().map(|c| c.field_system().map_or(0, |f| f.fields.len())).sum();
        let mut fields = Vec::new();
        let mut terms = Vec::new();
        let (mut bo, mut fo) = (0, 0);
        for c in cs {
            let fs = c.field_system().expect("checked above");
            let vals = shifted(fs.nb, bo, nb);
            for f in &fs.fields {
                fields.push(f.substitute(&vals, nb)?);
            }
            for t in &fs.terms {
                let mut w = vec![0.0; nf];
                w[fo..fo + t.weights.len()].copy_from_slice(&t.weights);
                terms.push(Term::new(
                    t.zeta.expr.substitute(&vals),
                    nb,
                    w,
                    t.deriv.iter().map(|d| d + bo).collect(),
                )?);
            }
            bo += fs.nb;
            fo += fs.fields.len();
        }
        SystemDef::multi(&name, m, FieldSystem { nb, fields, terms }, map, dom, sampling)?
    } else if cs.iter().all(|c| matches!(c.base, Base::Explicit(_))) {
        let mut psi = vec![Expr::c(0.0); m];
        let mut bo = 0;
        for c in cs {
            let Base::Explicit(jets) = &c.base else { unreachable!() };
            let vals = shifted(c.base_dim(), bo, nb);
            for (i, j) in jets.iter().enumerate() {
                psi[i] = psi[i].clone() + j.expr.substitute(&vals);
            }
            bo += c.base_dim();
        }
        let psi: Vec<Expr> = psi.into_iter().map(|e| e.simplify()).collect();
        match map {
            None => SystemDef::explicit(&name, m, psi, dom, sampling)?,
            Some(mp) => {
                let jets = psi
                    .into_iter()
                    .map(|e| Jet::new(e, nb, false))
                    .collect::<Result<Vec<_>>>()?;
                SystemDef::explicit_mapped(&name, m, jets, mp, dom, sampling)?
            }
        }
    } else {
        return Err(Error::Unsupported(
            "block assembly of explicit and field-based systems together".into(),
        ));
    };
    finish(s, cs, "block")
}

/// Block generator `Z = diag(Z^1, .., Z^K)`, stacked `omega`, shared `X`.
pub fn block_generator(parts: &[&Generator]) -> Result<Generator> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("no generators".into()))?;
    if parts.iter().any(|g| (&g.x - &first.x).amax() > 1e-12) {
        return Err(Error::Invalid("block generators need a common X".into()));
    }
    let n: usize = parts.iter().map(|g| g.n()).sum();
    let mut z = DMatrix::zeros(n, n);
    let mut w = DVector::zeros(n);
    let mut off = 0;
    for g in parts {
        let k = g.n();
        z.view_mut((off, off), (k, k)).copy_from(&g.z);
        w.rows_mut(off, k).copy_from(&g.omega);
        off += k;
    }
    Ok(Generator {
        x: first.x.clone(),
        z,
        omega: w,
        c_z: first.c_z,
        c_xi: 0.0,
        c_zeta: 0.0,
    })
}

/// Strategy A data: `e_lambda . zbar = c_lambda`.
#[derive(Clone, Debug)]
pub struct CouplingSpecA {
    pub constituents: Vec<SystemDef>,
    pub e_lambda: Vec<f64>,
    pub c_lambda: f64,
}

#[derive(Clone, Debug)]
pub struct CoupledA {
    pub system: SystemDef,
    pub block: SystemDef,
    /// `Gamma_lambda`, `(nbar - 1) x nbar`, with `Gamma e_lambda = 0`.
    pub gamma: DenseMatrix,
    pub e_lambda: DVector<f64>,
    pub c_lambda: f64,
}

impl CoupledA {
    /// `zbar = Gamma^T z + c_lambda e_lambda`.
    pub fn lift(&self, z: &[f64]) -> Vec<f64> {
        let zb = self.gamma.transpose() * DVector::from_column_slice(z) + &self.e_lambda * self.c_lambda;
        zb.iter().copied().collect()
    }

    /// `z = Gamma zbar`.
    pub fn project(&self, zb: &[f64]) -> Vec<f64> {
        (&self.gamma * DVector::from_column_slice(zb)).iter().copied().collect()
    }
}

/// `e_lambda = (lambda_1 u, .., lambda_K u)` for identical constituents of dimension `n1`.
pub fn identical_e_lambda(lambda: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let nl = lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nl > 0.0 && nu > 0.0) {
        return Err(Error::Invalid("lambda and u must be nonzero".into()));
    }
    Ok(lambda
        .iter()
        .flat_map(|l| u.iter().map(move |x| l * x / (nl * nu)))
        .collect())
}

/// Impose `e_lambda . zbar = c_lambda` on the block system and reduce to
/// `z = Gamma_lambda zbar`.
pub fn couple_a(spec: &CouplingSpecA) -> Result<CoupledA> {
    let block = assemble_block(&spec.constituents)?;
    let nb = block.n;
    if spec.e_lambda.len() != nb {
        return Err(Error::Shape(format!(
            "e_lambda has length {} for block dimension {nb}",
            spec.e_lambda.len()
        )));
    }
    if nb < 2 {
        return Err(Error::Invalid("strategy A needs block dimension >= 2".into()));
    }
    let nr = spec.e_lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nr > 0.0) {
        return Err(Error::Invalid("e_lambda must be nonzero".into()));
    }
    let e = DVector::from_iterator(nb, spec.e_lambda.iter().map(|x| x / nr));
    let c = spec.c_lambda;
    let full = linalg::orthogonal_completion(&DMatrix::from_row_slice(1, nb, e.as_slice()))?;
    let gamma = full.rows(1, nb - 1).into_owned();
    let n = nb - 1;
    let lift_m = gamma.transpose();
    let lift_b = &e * c;
    let map = match &block.map {
        None => AffineMap {
            matrix: lift_m.clone(),
            offset: lift_b.clone(),
        },
        Some(mp) => AffineMap {
            matrix: &mp.matrix * &lift_m,
            offset: &mp.matrix * &lift_b + &mp.offset,
        },
    };
    let inv: Vec<Expr> = (0..nb)
        .map(|r| {
            let lin = Expr::sum(
                (0..n)
                    .filter(|&j| gamma[(j, r)] != 0.0)
                    .map(|j| Expr::c(gamma[(j, r)]) * Expr::v(j)),
            );
            (lin + Expr::c(c * e[r])).simplify()
        })
        .collect();
    let fwd = |zb: &[f64]| -> Vec<f64> { (&gamma * DVector::from_column_slice(zb)).iter().copied().collect() };
    let mut pts = corners(&block.domain);
    pts.push(block.domain.center());
    let dom = image_domain(&block.domain, &pts, &fwd, &inv, vec![])?;
    let dom = DomainBox::new(dom.lower, dom.upper, clean_guards(dom.guards)?)?;
    let name = format!("{}-coupled-a", block.name);
    let mut s = match &block.base {
        Base::Fields(fs) => SystemDef::multi(&name, block.m, fs.clone(), Some(map), dom, block.sampling)?,
        Base::Explicit(j) => SystemDef::explicit_mapped(&name, block.m, j.clone(), map, dom, block.sampling)?,
    };
    if let Some(eh) = &block.e_h {
        s = s.with_e_h(eh.clone())?;
    }
    s.provenance = block.provenance.clone();
    s.provenance
        .push(format!("strategy A with e_lambda={:?} c_lambda={c}", e.as_slice()));
    Ok(CoupledA {
        system: s,
        block,
        gamma,
        e_lambda: e,
        c_lambda: c,
    })
}

/// `Z = Gamma Zbar Gamma^T`, `omega = Gamma omegabar + c Gamma Zbar e`, `X = Xbar`, after
/// checking `Zbar^T e = 0` and `omegabar . e = 0`.
pub fn map_generators_a(c: &CoupledA, gens: &[Generator]) -> Result<Vec<Generator>> {
    let e = &c.e_lambda;
    gens.iter()
        .map(|g| {
            let s = g.zw_vector().amax().max(f64::MIN_POSITIVE);
            let zt = g.z.transpose() * e;
            let we = g.omega.dot(e);
            if zt.amax() > 1e-9 * s || we.abs() > 1e-9 * s {
                return Err(Error::Invalid(format!(
                    "generator violates the constraint compatibility (|Z^T e| = {:.3e}, omega.e = {we:.3e})",
                    zt.amax()
                )));
            }
            let z = &c.gamma * &g.z * c.gamma.transpose();
            let omega = &c.gamma * &g.omega + &c.gamma * (&g.z * e) * c.c_lambda;
            Ok(Generator {
                x: g.x.clone(),
                z,
                omega,
                ..g.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CoupledB {
    pub system: SystemDef,
    pub b: DenseMatrix,
    pub warnings: Vec<String>,
}

/// True if the support graph of `B` is strongly connected.
pub fn is_irreducible(b: &DenseMatrix) -> bool {
    let k = b.nrows();
    if k <= 1 {
        return true;
    }
    let reach = |forward: bool| -> bool {
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..k {
                let w = if forward { b[(i, j)] } else { b[(j, i)] };
                if w != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Strategy B: `psi_i = sum_k (sum_l B_lk xi^l(z^l)) zeta_{z_i}(z^k)` for Z-systems sharing
/// `zeta`.
pub fn couple_b(cs: &[SystemDef], b: &DenseMatrix) -> Result<CoupledB> {
    let m = common_m(cs)?;
    let k = cs.len();
    if b.shape() != (k, k) {
        return Err(Error::Shape(format!("B must be {k}x{k}")));
    }
    let zeta0 = cs[0]
        .zeta()
        .ok_or_else(|| Error::Unsupported("strategy B needs Z-systems".into()))?;
    for c in cs {
        if !c.is_zsystem() || c.map.is_some() {
            return Err(Error::Unsupported("strategy B needs plain Z-systems".into()));
        }
        if c.zeta().map(|z| &z.expr) != Some(&zeta0.expr) {
            return Err(Error::Invalid(format!(
                "`{}` does not share zeta with `{}`",
                c.name, cs[0].name
            )));
        }
    }
    let nb = k * m;
    let mut fields = Vec::with_capacity(k);
    let mut terms = Vec::with_capacity(k);
    for (kk, c) in cs.iter().enumerate() {
        let vals = shifted(m, kk * m, nb);
        fields.push(c.xi().expect("Z-system").substitute(&vals, nb)?);
        terms.push(Term::new(
            zeta0.expr.substitute(&vals),
            nb,
            (0..k).map(|l| b[(l, kk)]).collect(),
            (0..m).map(|i| kk * m + i).collect(),
        )?);
    }
    let name = format!(
        "{}-coupled-b",
        cs.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+")
    );
    let s = SystemDef::multi(
        &name,
        m,
        FieldSystem { nb, fields, terms },
        None,
        block_domain(cs)?,
        cs[0].sampling,
    )?;
    let mut s = finish(s, cs, "strategy B")?;
    s.provenance.push(format!("B={:?}", linalg::to_rows(b)));
    let mut warnings = Vec::new();
    if !is_irreducible(b) {
        warnings.push("B admits a block partitioning; the coupling separates".into());
    }
    if b.iter().any(|&x| x < 0.0) {
        warnings.push("B has negative entries; hyperbolicity is not inherited".into());
    }
    Ok(CoupledB {
        system: s,
        b: b.clone(),
        warnings,
    })
}

/// Strategy B transport: `Z = diag(Z, .., Z)`, `omega` stacked, `X` shared.
pub fn map_generators_b(g: &Generator, k: usize) -> Result<Generator> {
    block_generator(&vec![g; k])
}

/// `B = [[a b, a / b], [b / a, 1 / (a b)]]`.
pub fn two_fluid_matrix(alpha: f64, beta: f64) -> Result<DenseMatrix> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Invalid("alpha and beta must be positive".into()));
    }
    Ok(DMatrix::from_row_slice(
        2,
        2,
        &[alpha * beta, alpha / beta, beta / alpha, 1.0 / (alpha * beta)],
    ))
}

/// Two isentropic Euler fluids with `m = 3` and enthalpies `h1`, `h2` (expressions in `z1`)
/// coupled by the rank-one two-fluid matrix. Each enthalpy is sampled on `P in [0.5, 2]`.
pub fn two_fluid(alpha: f64, beta: f64, h1: &Expr, h2: &Expr) -> Result<CoupledB> {
    let b = two_fluid_matrix(alpha, beta)?;
    let fluid = |h: &Expr, k: usize| -> Result<SystemDef> {
        let lo = h.eval(&[0.5])?;
        let hi = h.eval(&[2.0])?;
        let mut s = crate::catalog::euler_isentropic_with_eos(3, h.clone(), (lo, hi))?;
        s.name = format!("fluid{k}");
        s.expect = None;
        Ok(s)
    };
    let mut c = couple_b(&[fluid(h1, 1)?, fluid(h2, 2)?], &b)?;
    c.system.name = format!("two-fluid-{alpha}-{beta}");
    Ok(c)
}

/// Normalized subsystem pressures `P~^k` read off the coupled flux: the `(2, 2)` entry of
/// subsystem `k` minus its transport part, divided by the row sum of `B`.
pub fn subsystem_pressures(c: &CoupledB, z: &[f64]) -> Result<Vec<f64>> {
    let fs = c
        .system
        .field_system()
        .ok_or_else(|| Error::Invalid("not a strategy B system".into()))?;
    let m = c.system.m;
    let k = c.b.nrows();
    if m < 2 {
        return Err(Error::Shape("pressures need m >= 2".into()));
    }
    let a = c.system.flux_at(z)?;
    (0..k)
        .map(|kk| {
            let xi = fs.fields[kk].eval(z, 1)?;
            let row: f64 = (0..k).map(|l| c.b[(kk, l)]).sum();
            let mix_u: f64 = (0..k).map(|l| c.b[(kk, l)] * z[l * m + 1]).sum();
            let col = kk * m + 1;
            Ok((a[(1, col)] - xi.g[col] * mix_u) / row)
        })
        .collect()
}

/// Velocity average `(sum_l B_kl u_l) / (sum_l B_kl)` for subsystem `k`.
pub fn velocity_average(b: &DenseMatrix, k: usize, u: &[f64]) -> f64 {
    let row: f64 = b.row(k).iter().sum();
    b.row(k).iter().zip(u).map(|(w, x)| w * x).sum::<f64>() / row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::hyperbolicity::{hessian_check, Verdict};
    use crate::symmetry::{general_residual, solve_zsystem};

    fn iso(n: usize) -> SystemDef {
        catalog::euler_isentropic(n, 1.4).unwrap()
    }

    #[test]
    fn block_of_one() {
        let s = iso(2);
        let b = assemble_block(std::slice::from_ref(&s)).unwrap();
        assert_eq!(b.name, s.name);
    }

    #[test]
    fn block_paired_generators() {
        let s = iso(3);
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let bl = assemble_block(&[s.clone(), s]).unwrap();
        assert_eq!(bl.n, 6);
        let pts = bl.samples().unwrap();
        for g in &sp.zero {
            let bg = block_generator(&[g, g]).unwrap();
            assert!(general_residual(&bl, &bg, &pts).unwrap() < 1e-8);
        }
    }

    #[test]
    fn block_entropy_concatenates() {
        let s = iso(2);
        let bl = assemble_block(&[s.clone(), s.clone()]).unwrap();
        for p in bl.samples().unwrap().iter().take(20) {
            let e = bl.entropy_at(p).unwrap();
            let e1 = s.entropy_at(&p[..2]).unwrap();
            let e2 = s.entropy_at(&p[2..]).unwrap();
            for i in 0..2 {
                assert!((e.q[i] - e1.q[i] - e2.q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strategy_a_identical() {
        let s = iso(2);
        let e = identical_e_lambda(&[1.0, -1.0], &[0.0, 1.0]).unwrap();
        let c = couple_a(&CouplingSpecA {
            constituents: vec![s.clone(), s.clone()],
            e_lambda: e,
            c_lambda: 0.0,
        })
        .unwrap();
        assert_eq!(c.system.n, 3);
        let pts = c.system.samples().unwrap();
        let r = hessian_check(&c.system, &[1.0, 0.0], &pts, 1e-9).unwrap();
        assert!(r.verdict >= Verdict::Hyperbolic);
        for p in pts.iter().take(40) {
            let zb = c.lift(p);
            let h = c.system.hess_at(p, &[1.0, 0.0]).unwrap();
            let hb = c.block.hess_at(&zb, &[1.0, 0.0]).unwrap();
            let cong = &c.gamma * hb * c.gamma.transpose();
            assert!((h - cong).amax() < 1e-8);
        }
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let bg = block_generator(&[&sp.zero[0], &sp.zero[0]]).unwrap();
        let mapped = map_generators_a(&c, &[bg.clone()]).unwrap();
        assert!((mapped[0].omega.clone() - &c.gamma * &bg.omega).amax() < 1e-15);
        assert!(general_residual(&c.system, &mapped[0], &pts).unwrap() < 1e-8);
    }

    #[test]
    fn strategy_a_rejects_incompatible() {
        let s = iso(2);
        let c = couple_a(&CouplingSpecA {
            constituents: vec![s.clone(), s.clone()],
            e_lambda: identical_e_lambda(&[1.0, 1.0], &[0.0, 1.0]).unwrap(),
            c_lambda: 0.0,
        })
        .unwrap();
        let sp = solve_zsystem(&s, &s.samples().unwrap(), 1e-9).unwrap();
        let bg = block_generator(&[&sp.zero[0], &sp.zero[0]]).unwrap();
        assert!(map_generators_a(&c, &[bg]).is_err());
    }

    #[test]
    fn strategy_b_identity_is_block() {
        let s = iso(3);
        let cb = couple_b(&[s.clone(), s.clone()], &DMatrix::identity(2, 2)).unwrap();
        let bl = assemble_block(&[s.clone(), s]).unwrap();
        for p in bl.samples().unwrap().iter().take(30) {
            assert_eq!(cb.system.psi_at(p).unwrap(), bl.psi_at(p).unwrap());
        }
        assert!(!cb.warnings.is_empty());
    }

    #[test]
    fn two_fluid_pressures() {
        let h = catalog::gamma_law(1.4).unwrap();
        let c = two_fluid(1.0, 1.0, &h, &h).unwrap();
        assert!(c.warnings.is_empty());
        assert_eq!(linalg::rank(&c.b, 1e-12), 1);
        for p in c.system.samples().unwrap().iter().take(30) {
            let fs = c.system.field_system().unwrap();
            let p1 = fs.fields[0].eval(p, 0).unwrap().v;
            let p2 = fs.fields[1].eval(p, 0).unwrap().v;
            let pt = subsystem_pressures(&c, p).unwrap();
            assert!((pt[0] - 0.5 * (p1 + p2)).abs() < 1e-12);
            assert!((pt[1] - 0.5 * (p1 + p2)).abs() < 1e-12);
        }
        let b = two_fluid_matrix(1.0, 2.0).unwrap();
        assert!((velocity_average(&b, 0, &[1.0, 3.0]) - (2.0 + 1.5) / 2.5).abs() < 1e-15);
        assert!(two_fluid_matrix(0.0, 1.0).is_err());
    }

    #[test]
    fn irreducibility() {
        assert!(!is_irreducible(&DMatrix::identity(2, 2)));
        assert!(is_irreducible(&DMatrix::from_element(2, 2, 1.0)));
    }
}
