//! Text format for systems: TOML with sections `[system]`, `[zeta]`, `[xi]`, `[sigma]`,
//! `[zzeta]`, `[psi]`, `[domain]`, `[sampling]`, `[hyperbolicity]`, plus `[[field]]`,
//! `[[term]]` and `[map]` for multi-mode systems and `[expect]` for recorded results.
//! Provenance is written as leading `#` comments.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::sampling::{DomainBox, Sampling};
use crate::system::{
    AffineMap, Base, Eos, Expected, Field, FieldSystem, Kind, SystemDef, Term, XI_MAX, XI_MIN,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc<S> {
    system: SystemSec,
    #[serde(skip_serializing_if = "Option::is_none")]
    zeta: Option<ExprSec<S>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi: Option<XiSec<S>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<SigmaSec<S>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zzeta: Option<ExprSec<S>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi: Option<BTreeMap<String, S>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<Vec<FieldSec<S>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    term: Option<Vec<TermSec<S>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    map: Option<MapSec>,
    domain: DomainSec<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampling: Option<SamplingSec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hyperbolicity: Option<HypSec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expect: Option<Expected>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSec {
    name: String,
    kind: Kind,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nb: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExprSec<S> {
    expr: S,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct XiSec<S> {
    #[serde(skip_serializing_if = "Option::is_none")]
    expr: Option<S>,
    /// Multiplies the field given by `[sigma]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    factor: Option<S>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SigmaSec<S> {
    expr: S,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSec<S> {
    #[serde(skip_serializing_if = "Option::is_none")]
    expr: Option<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zeta: Option<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zzeta: Option<S>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    factor: Option<S>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermSec<S> {
    zeta: S,
    weights: Vec<f64>,
    /// 1-based derivative indices, one per potential.
    deriv: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapSec {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSec<S> {
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default = "Vec::new", skip_serializing_if = "Vec::is_empty")]
    guards: Vec<S>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSec {
    count: usize,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypSec {
    #[serde(rename = "e_H")]
    e_h: Vec<f64>,
}

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, col)
}

pub fn spec_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        let (line, col) = line_col(self.text, offset);
        Error::Spec {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn expr(&self, s: &Spanned<String>, arity: usize, what: &str) -> Result<Expr> {
        let start = s.span().start + 1;
        Expr::parse(s.get_ref(), arity).map_err(|e| {
            let inner = match &e {
                Error::Syntax { offset, .. } | Error::UnknownVariable { offset, .. } => *offset,
                _ => 0,
            };
            self.err_at(start + inner, format!("{what}: {e}"))
        })
    }

    fn wrap<T>(&self, at: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::Spec { .. } => e,
            other => self.err_at(at, other.to_string()),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn field_from(
    cx: &Ctx,
    expr: Option<&Spanned<String>>,
    sigma: Option<(&Spanned<String>, Option<f64>, Option<f64>)>,
    zeta: Option<&Spanned<String>>,
    zzeta: Option<&Spanned<String>>,
    factor: Option<&Spanned<String>>,
    n: usize,
    at: usize,
) -> Result<Field> {
    let base = match (expr, sigma) {
        (Some(e), None) => cx.wrap(at, Field::explicit(cx.expr(e, n, "xi")?, n))?,
        (None, Some((s, lo, hi))) => {
            let zeta = zeta.ok_or_else(|| cx.err_at(at, "an equation of state needs zeta"))?;
            let zz = zzeta.map(|z| cx.expr(z, n, "zzeta")).transpose()?;
            let arity = if zz.is_some() { 2 } else { 1 };
            let eos = cx.wrap(
                s.span().start,
                Eos::new(
                    cx.expr(zeta, n, "zeta")?,
                    cx.expr(s, arity, "sigma")?,
                    zz,
                    n,
                    lo.unwrap_or(XI_MIN),
                    hi.unwrap_or(XI_MAX),
                ),
            )?;
            Field::Eos(Box::new(eos))
        }
        (Some(_), Some(_)) => return Err(cx.err_at(at, "give either expr or sigma for a field, not both")),
        (None, None) => return Err(cx.err_at(at, "field needs expr or sigma")),
    };
    Ok(match factor {
        None => base,
        Some(f) => Field::Scaled {
            base: Box::new(base),
            factor: cx.wrap(f.span().start, crate::expr::Jet::new(cx.expr(f, n, "factor")?, n, false))?,
        },
    })
}

/// Parses a spec file. All errors carry the line and column of the offending text.
pub fn parse(text: &str) -> Result<SystemDef> {
    let cx = Ctx { text };
    let doc: Doc<Spanned<String>> = toml::from_str(text).map_err(|e| {
        cx.err_at(e.span().map_or(0, |s| s.start), e.message().to_string())
    })?;
    build(&cx, doc)
}

fn need<'a, T>(cx: &Ctx, v: Option<&'a T>, what: &str) -> Result<&'a T> {
    v.ok_or_else(|| cx.err_at(0, format!("missing section [{what}]")))
}

fn build(cx: &Ctx, doc: Doc<Spanned<String>>) -> Result<SystemDef> {
    let sec = &doc.system;
    let n = sec.n;
    let start = |k: &str| cx.text.find(&format!("[{k}]")).unwrap_or(0);
    let mut guards = Vec::new();
    for g in &doc.domain.guards {
        guards.push(cx.expr(g, n, "guard")?);
    }
    let domain = cx.wrap(
        start("domain"),
        DomainBox::new(doc.domain.lower.clone(), doc.domain.upper.clone(), guards),
    )?;
    if domain.dim() != n {
        return Err(cx.err_at(start("domain"), format!("domain has dimension {} but n = {n}", domain.dim())));
    }
    let sampling = doc
        .sampling
        .as_ref()
        .map_or_else(Sampling::default, |s| Sampling {
            count: s.count,
            seed: s.seed,
        });
    let at = start("system");
    let zsys_only = |what: &str, present: bool| -> Result<()> {
        if present {
            Err(cx.err_at(start(what), format!("[{what}] is not used by kind {}", sec.kind.as_str())))
        } else {
            Ok(())
        }
    };
    let mut sys = match sec.kind {
        Kind::Zsystem | Kind::ZsystemEos => {
            zsys_only("psi", doc.psi.is_some())?;
            zsys_only("map", doc.map.is_some())?;
            if doc.field.is_some() || doc.term.is_some() {
                return Err(cx.err_at(at, "[[field]] and [[term]] belong to kind multi"));
            }
            if sec.m.is_some_and(|m| m != n) || sec.nb.is_some_and(|b| b != n) {
                return Err(cx.err_at(at, "Z-systems have m = n"));
            }
            let zeta = &need(cx, doc.zeta.as_ref(), "zeta")?.expr;
            let sigma = doc.sigma.as_ref().map(|s| (&s.expr, s.xi_min, s.xi_max));
            if sec.kind == Kind::ZsystemEos && sigma.is_none() {
                return Err(cx.err_at(at, "kind zsystem-eos needs [sigma]"));
            }
            if sigma.is_none() && doc.zzeta.is_some() {
                return Err(cx.err_at(start("zzeta"), "[zzeta] needs [sigma]"));
            }
            let xi_expr = doc.xi.as_ref().and_then(|x| x.expr.as_ref());
            let factor = doc.xi.as_ref().and_then(|x| x.factor.as_ref());
            if sec.kind == Kind::ZsystemEos && xi_expr.is_some() {
                return Err(cx.err_at(start("xi"), "kind zsystem-eos takes xi from [sigma]"));
            }
            if sigma.is_some() && factor.is_none() && sec.kind == Kind::Zsystem {
                return Err(cx.err_at(start("sigma"), "kind zsystem with [sigma] needs [xi] factor"));
            }
            let field = field_from(
                cx,
                xi_expr,
                sigma,
                Some(zeta),
                doc.zzeta.as_ref().map(|z| &z.expr),
                factor,
                n,
                start("xi"),
            )?;
            let ze = cx.expr(zeta, n, "zeta")?;
            cx.wrap(at, SystemDef::zsystem_field(&sec.name, sec.kind, ze, field, domain, sampling))?
        }
        Kind::Explicit => {
            for s in ["zeta", "xi", "sigma", "zzeta"] {
                let present = match s {
                    "zeta" => doc.zeta.is_some(),
                    "xi" => doc.xi.is_some(),
                    "sigma" => doc.sigma.is_some(),
                    _ => doc.zzeta.is_some(),
                };
                zsys_only(s, present)?;
            }
            let psi = need(cx, doc.psi.as_ref(), "psi")?;
            let m = sec.m.unwrap_or(psi.len());
            let nb = sec.nb.unwrap_or(n);
            let mut exprs = Vec::with_capacity(m);
            for i in 1..=m {
                let e = psi
                    .get(&format!("expr{i}"))
                    .ok_or_else(|| cx.err_at(start("psi"), format!("missing expr{i} in [psi]")))?;
                exprs.push(cx.expr(e, nb, &format!("psi{i}"))?);
            }
            if let Some(k) = psi.keys().find(|k| {
                k.strip_prefix("expr")
                    .and_then(|d| d.parse::<usize>().ok())
                    .is_none_or(|i| i == 0 || i > m)
            }) {
                return Err(cx.err_at(psi[k].span().start, format!("unknown key `{k}` in [psi]")));
            }
            match read_map(cx, doc.map.as_ref(), nb, n, start("map"))? {
                None => cx.wrap(at, SystemDef::explicit(&sec.name, m, exprs, domain, sampling))?,
                Some(mp) => {
                    let jets = exprs
                        .into_iter()
                        .map(|e| crate::expr::Jet::new(e, nb, false))
                        .collect::<Result<Vec<_>>>();
                    let jets = cx.wrap(at, jets)?;
                    cx.wrap(at, SystemDef::explicit_mapped(&sec.name, m, jets, mp, domain, sampling))?
                }
            }
        }
        Kind::Multi => {
            let nb = sec.nb.unwrap_or(n);
            let fields = need(cx, doc.field.as_ref(), "[field]")?;
            let terms = need(cx, doc.term.as_ref(), "[term]")?;
            let m = sec
                .m
                .or_else(|| terms.first().map(|t| t.deriv.len()))
                .ok_or_else(|| cx.err_at(at, "multi systems need m"))?;
            let fat = start("[field]");
            let mut fs = Vec::with_capacity(fields.len());
            for f in fields {
                let sigma = f.sigma.as_ref().map(|s| (s, f.xi_min, f.xi_max));
                fs.push(field_from(
                    cx,
                    f.expr.as_ref(),
                    sigma,
                    f.zeta.as_ref(),
                    f.zzeta.as_ref(),
                    f.factor.as_ref(),
                    nb,
                    fat,
                )?);
            }
            let mut ts = Vec::with_capacity(terms.len());
            for t in terms {
                let at = t.zeta.span().start;
                if t.deriv.contains(&0) {
                    return Err(cx.err_at(at, "term deriv indices are 1-based"));
                }
                ts.push(cx.wrap(
                    at,
                    Term::new(
                        cx.expr(&t.zeta, nb, "term zeta")?,
                        nb,
                        t.weights.clone(),
                        t.deriv.iter().map(|d| d - 1).collect(),
                    ),
                )?);
            }
            let map = read_map(cx, doc.map.as_ref(), nb, n, start("map"))?;
            cx.wrap(
                at,
                SystemDef::multi(
                    &sec.name,
                    m,
                    FieldSystem {
                        nb,
                        fields: fs,
                        terms: ts,
                    },
                    map,
                    domain,
                    sampling,
                ),
            )?
        }
    };
    if let Some(m) = sec.m {
        if m != sys.m {
            return Err(cx.err_at(at, format!("m = {m} does not match the system (m = {})", sys.m)));
        }
    }
    if let Some(h) = &doc.hyperbolicity {
        sys = cx.wrap(start("hyperbolicity"), sys.with_e_h(h.e_h.clone()))?;
    }
    sys.expect = doc.expect;
    sys.provenance = provenance_of(cx.text);
    Ok(sys)
}

fn read_map(cx: &Ctx, m: Option<&MapSec>, nb: usize, n: usize, at: usize) -> Result<Option<AffineMap>> {
    let Some(m) = m else {
        if nb != n {
            return Err(cx.err_at(at, format!("nb = {nb} differs from n = {n} without [map]")));
        }
        return Ok(None);
    };
    if m.matrix.len() != nb || m.matrix.iter().any(|r| r.len() != n) || m.offset.len() != nb {
        return Err(cx.err_at(at, format!("[map] must be {nb}x{n} with an offset of length {nb}")));
    }
    Ok(Some(AffineMap {
        matrix: DMatrix::from_row_iterator(nb, n, m.matrix.iter().flatten().copied()),
        offset: DVector::from_column_slice(&m.offset),
    }))
}

const PROV: &str = "# provenance: ";

fn provenance_of(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix(PROV))
        .map(str::to_string)
        .collect()
}

fn s(e: &Expr) -> String {
    e.to_string()
}

fn field_out(f: &Field) -> Result<FieldSec<String>> {
    let mut out = FieldSec {
        expr: None,
        zeta: None,
        sigma: None,
        zzeta: None,
        xi_min: None,
        xi_max: None,
        factor: None,
    };
    let mut factor: Option<Expr> = None;
    let mut cur = f;
    while let Field::Scaled { base, factor: fj } = cur {
        factor = Some(match factor {
            None => fj.expr.clone(),
            Some(p) => (p * fj.expr.clone()).simplify(),
        });
        cur = base;
    }
    match cur {
        Field::Explicit(j) => out.expr = Some(s(&j.expr)),
        Field::Eos(e) => {
            out.zeta = Some(s(&e.zeta.expr));
            out.sigma = Some(s(&e.sigma));
            out.zzeta = e.zzeta.as_ref().map(|z| s(&z.expr));
            out.xi_min = (e.xi_min != XI_MIN).then_some(e.xi_min);
            out.xi_max = (e.xi_max != XI_MAX).then_some(e.xi_max);
        }
        Field::Scaled { .. } => unreachable!(),
    }
    out.factor = factor.as_ref().map(s);
    Ok(out)
}

/// Serializes a system; parsing the result reproduces it.
pub fn emit(sys: &SystemDef) -> Result<String> {
    let mut doc: Doc<String> = Doc {
        system: SystemSec {
            name: sys.name.clone(),
            kind: sys.kind,
            n: sys.n,
            m: (sys.m != sys.n || sys.kind == Kind::Multi || sys.kind == Kind::Explicit).then_some(sys.m),
            nb: (sys.base_dim() != sys.n).then_some(sys.base_dim()),
        },
        zeta: None,
        xi: None,
        sigma: None,
        zzeta: None,
        psi: None,
        field: None,
        term: None,
        map: sys.map.as_ref().map(|mp| MapSec {
            matrix: crate::linalg::to_rows(&mp.matrix),
            offset: mp.offset.iter().copied().collect(),
        }),
        domain: DomainSec {
            lower: sys.domain.lower.clone(),
            upper: sys.domain.upper.clone(),
            guards: sys.domain.guards.iter().map(s).collect(),
        },
        sampling: Some(SamplingSec {
            count: sys.sampling.count,
            seed: sys.sampling.seed,
        }),
        hyperbolicity: sys.e_h.as_ref().map(|e| HypSec { e_h: e.clone() }),
        expect: sys.expect.clone(),
    };
    match (&sys.base, sys.kind) {
        (Base::Fields(fs), Kind::Zsystem | Kind::ZsystemEos) => {
            doc.zeta = Some(ExprSec {
                expr: s(&fs.terms[0].zeta.expr),
            });
            let f = field_out(&fs.fields[0])?;
            if let Some(sg) = f.sigma {
                doc.sigma = Some(SigmaSec {
                    expr: sg,
                    xi_min: f.xi_min,
                    xi_max: f.xi_max,
                });
                doc.zzeta = f.zzeta.map(|e| ExprSec { expr: e });
            }
            if f.expr.is_some() || f.factor.is_some() {
                doc.xi = Some(XiSec {
                    expr: f.expr,
                    factor: f.factor,
                });
            }
        }
        (Base::Fields(fs), _) => {
            doc.field = Some(fs.fields.iter().map(field_out).collect::<Result<_>>()?);
            doc.term = Some(
                fs.terms
                    .iter()
                    .map(|t| TermSec {
                        zeta: s(&t.zeta.expr),
                        weights: t.weights.clone(),
                        deriv: t.deriv.iter().map(|d| d + 1).collect(),
                    })
                    .collect(),
            );
        }
        (Base::Explicit(jets), _) => {
            doc.psi = Some(
                jets.iter()
                    .enumerate()
                    .map(|(i, j)| (format!("expr{}", i + 1), s(&j.expr)))
                    .collect(),
            );
        }
    }
    let body = toml::to_string(&doc).map_err(|e| Error::Invalid(format!("serializing spec: {e}")))?;
    let mut out = String::new();
    for p in &sys.provenance {
        for line in p.lines() {
            out.push_str(PROV);
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&body);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn same_psi(a: &SystemDef, b: &SystemDef) {
        assert_eq!(a.n, b.n);
        assert_eq!(a.m, b.m);
        assert_eq!(a.kind, b.kind);
        for p in a.samples().unwrap().iter().take(25) {
            let (x, y) = (a.psi_at(p).unwrap(), b.psi_at(p).unwrap());
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn catalog_round_trips() {
        for id in catalog::IDS {
            let s = catalog::build(id, catalog::Params::default()).unwrap();
            let text = emit(&s).unwrap();
            let back = parse(&text).unwrap_or_else(|e| panic!("{id}: {e}\n{text}"));
            same_psi(&s, &back);
            assert_eq!(back.expect, s.expect);
            assert_eq!(back.e_h, s.e_h);
            assert_eq!(emit(&back).unwrap(), text);
        }
    }

    #[test]
    fn multi_round_trips() {
        let h = catalog::gamma_law(1.4).unwrap();
        let c = crate::coupling::two_fluid(1.0, 2.0, &h, &h).unwrap();
        let text = emit(&c.system).unwrap();
        same_psi(&c.system, &parse(&text).unwrap());
        let iso = catalog::euler_isentropic(2, 1.4).unwrap();
        let a = crate::coupling::couple_a(&crate::coupling::CouplingSpecA {
            constituents: vec![iso.clone(), iso],
            e_lambda: vec![0.0, 1.0, 0.0, -1.0],
            c_lambda: 0.0,
        })
        .unwrap();
        let text = emit(&a.system).unwrap();
        same_psi(&a.system, &parse(&text).unwrap());
    }

    #[test]
    fn errors_have_positions() {
        let good = "[system]\nname = \"t\"\nkind = \"zsystem\"\nn = 2\n[zeta]\nexpr = \"z1 + z2^2\"\n[xi]\nexpr = \"1\"\n[domain]\nlower = [0.5, 0.5]\nupper = [1.0, 1.0]\n";
        assert!(parse(good).is_ok());
        let bad_key = good.replace("n = 2", "n = 2\ncolour = 3");
        match parse(&bad_key) {
            Err(Error::Spec { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let bad_expr = good.replace("z1 + z2^2", "z1 + * z2");
        match parse(&bad_expr) {
            Err(Error::Spec { line, col, .. }) => assert_eq!((line, col), (6, 14)),
            other => panic!("{other:?}"),
        }
        let bad_var = good.replace("z1 + z2^2", "z1 + z3");
        assert!(matches!(parse(&bad_var), Err(Error::Spec { line: 6, .. })));
        assert!(matches!(parse("[system"), Err(Error::Spec { line: 1, .. })));
    }

    #[test]
    fn provenance_comments() {
        let mut s = catalog::euler_isentropic(2, 1.4).unwrap();
        s.provenance = vec!["first".into(), "second".into()];
        let t = emit(&s).unwrap();
        assert!(t.starts_with("# provenance: first\n# provenance: second\n"));
        assert_eq!(parse(&t).unwrap().provenance, s.provenance);
    }

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            spec_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
