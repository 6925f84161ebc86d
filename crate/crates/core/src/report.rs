//! The analysis pipeline and its machine-readable report (`schema: 1`), plus the verification
//! suite run by `verify`.

use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Number, Value};

use crate::catalog;
use crate::error::{Error, Result};
use crate::expr::Point;
use crate::hyperbolicity::{self, Checklist, HyperbolicityReport, Verdict};
use crate::linalg::{self, SubspaceBasis};
use crate::sampling::Sampling;
use crate::specfile;
use crate::symmetry::{self, Flag, Generator, LambdaClassification, SymmetrySpace};
use crate::system::{Expected, SystemDef};

pub const SCHEMA: u32 = 1;
pub const DEFAULT_SOLVER_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Options {
    pub tol: f64,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: DEFAULT_SOLVER_TOL,
            samples: None,
            seed: None,
        }
    }
}

impl Options {
    pub fn sampling(&self, sys: &SystemDef) -> Sampling {
        Sampling {
            count: self.samples.unwrap_or(sys.sampling.count),
            seed: self.seed.unwrap_or(sys.sampling.seed),
        }
    }
}

/// Everything computed by the pipeline, before serialization.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub sampling: Sampling,
    pub points: Vec<Point>,
    pub space: SymmetrySpace,
    pub lambda: LambdaClassification,
    pub flags: Vec<Flag>,
    pub hyperbolicity: Option<HyperbolicityReport>,
    pub checklist: Option<Checklist>,
    pub closed: Option<(bool, f64)>,
    /// `(literal, corrected)` residuals of the entropy relation.
    pub entropy_relation: Option<(f64, f64)>,
    /// Worst `|z . q|`.
    pub zq_residual: Option<f64>,
}

fn zq_residual(sys: &SystemDef, pts: &[Point]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in pts {
        let e = sys.entropy_at(p)?;
        let s: f64 = p.iter().zip(&e.q).map(|(a, b)| a * b).sum();
        let scale = 1.0 + p.iter().zip(&e.q).map(|(a, b)| (a * b).abs()).sum::<f64>();
        worst = worst.max(s.abs() / scale);
    }
    Ok(worst)
}

/// system, symmetry, classification, hyperbolicity and entropy checks.
pub fn run(sys: &SystemDef, opts: &Options) -> Result<Analysis> {
    let sampling = opts.sampling(sys);
    let points = sys.samples_with(sampling)?;
    let space = symmetry::solve(sys, &points, opts.tol)?;
    let lambda = symmetry::classify_lambda(&space)?;
    let flags = symmetry::classify_subclasses(sys, &space, &lambda, &points)?;
    let hyp = if symmetry::supports_hessian(sys) {
        Some(hyperbolicity::choose_e_h(sys, Some(&space), &points, hyperbolicity::DEFAULT_TOL)?)
    } else {
        None
    };
    let checklist = match (&hyp, sys.eos()) {
        (Some(h), Some(_)) => Some(hyperbolicity::sufficient_checklist(sys, &h.e_h, &points)?),
        _ => None,
    };
    let closed = (sys.m == sys.n).then(|| sys.check_closed(&points, 1e-9)).transpose()?;
    let with_zz = sys.eos().is_some_and(|e| e.has_zzeta());
    let entropy_relation =
        with_zz.then(|| catalog::extended_entropy_residuals(sys, &points)).transpose()?;
    let zq = (sys.m == sys.n).then(|| zq_residual(sys, &points)).transpose()?;
    Ok(Analysis {
        sampling,
        points,
        space,
        lambda,
        flags,
        hyperbolicity: hyp,
        checklist,
        closed,
        entropy_relation,
        zq_residual: zq,
    })
}

fn gen_json(g: &Generator, with_x: bool) -> Value {
    let mut v = json!({
        "Z": linalg::to_rows(&g.z),
        "omega": g.omega.iter().copied().collect::<Vec<_>>(),
        "c_Z": g.c_z,
        "c_xi": g.c_xi,
        "c_zeta": g.c_zeta,
    });
    if with_x {
        v["X"] = json!(linalg::to_rows(&g.x));
    }
    v
}

fn basis_json(b: &SubspaceBasis) -> Value {
    json!({
        "dim": b.dim(),
        "basis": (0..b.dim()).map(|k| b.column(k)).collect::<Vec<_>>(),
    })
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).unwrap_or(Value::Null)
}

/// Builds the report document. `spec_text` is hashed when given; otherwise the emitted spec
/// of `sys` is.
pub fn report(sys: &SystemDef, spec_text: Option<&str>, opts: &Options, a: &Analysis) -> Result<Value> {
    let hash = match spec_text {
        Some(t) => specfile::spec_hash(t),
        None => specfile::spec_hash(&specfile::emit(sys)?),
    };
    let with_x = a.space.method == symmetry::Method::General;
    let sp = &a.space;
    let hyp = a.hyperbolicity.as_ref().map(|h| {
        let mut v = to_value(h);
        if let Some(c) = &a.checklist {
            v["checklist"] = to_value(c);
            v["checklist_passes"] = json!(c.passes());
        }
        v
    });
    let relation = a.entropy_relation.map(|(lit, cor)| {
        json!({
            "literal_residual": lit,
            "literal_holds": lit <= 1e-9,
            "corrected_residual": cor,
            "corrected_holds": cor <= 1e-9,
        })
    });
    let doc = json!({
        "schema": SCHEMA,
        "tool": { "name": "zsym", "version": env!("CARGO_PKG_VERSION") },
        "system": {
            "name": sys.name,
            "kind": sys.kind.as_str(),
            "n": sys.n,
            "m": sys.m,
            "spec_sha256": hash,
            "provenance": sys.provenance,
        },
        "sampling": { "count": a.sampling.count, "seed": a.sampling.seed, "points": a.points.len() },
        "tolerances": { "solver": opts.tol, "hyperbolicity": hyperbolicity::DEFAULT_TOL, "closed": 1e-9 },
        "symmetry": {
            "method": to_value(&sp.method),
            "total_dim": sp.total_dim(),
            "zero_dim": sp.zero.len(),
            "zeta_dim": usize::from(sp.zeta.is_some()),
            "consts_dim": sp.consts.len(),
            "trivial_dim": sp.trivial.len(),
            "residual": sp.residual,
            "zero": sp.zero.iter().map(|g| gen_json(g, with_x)).collect::<Vec<_>>(),
            "zeta": sp.zeta.as_ref().map(|g| gen_json(g, with_x)),
            "consts": sp.consts.iter().map(|g| gen_json(g, with_x)).collect::<Vec<_>>(),
        },
        "lambda": {
            "V": basis_json(&a.lambda.lambda_v),
            "I": basis_json(&a.lambda.lambda_i),
            "perp": basis_json(&a.lambda.lambda_perp),
            "L": a.lambda.l,
        },
        "flags": to_value(&a.flags),
        "hyperbolicity": hyp,
        "entropy": {
            "closed": a.closed.map(|(h, r)| json!({ "holds": h, "residual": r })),
            "relation": relation,
            "zq_residual": a.zq_residual,
        },
    });
    Ok(canonical(doc))
}

/// Rewrites every non-integer number with 17 significant digits.
pub fn canonical(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_u64() || n.is_i64() => Value::Number(n),
        Value::Number(n) => match n.as_f64() {
            Some(f) if f.is_finite() => {
                Value::Number(Number::from_str(&format!("{f:.16e}")).unwrap_or(n))
            }
            _ => Value::Null,
        },
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, canonical(v))).collect()),
        other => other,
    }
}

pub fn to_json_string(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_default();
    s.push('\n');
    s
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Array(a) if a.iter().all(|x| !x.is_array() && !x.is_object()) => {
            format!("[{}]", a.iter().map(scalar).collect::<Vec<_>>().join(", "))
        }
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let leaf = match v {
        Value::Object(o) => {
            for (k, x) in o {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
            false
        }
        Value::Array(a) if a.iter().any(|x| x.is_array() || x.is_object()) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
            false
        }
        _ => true,
    };
    if leaf {
        out.push((prefix.to_string(), scalar(v)));
    }
}

/// Two-column text view of a report document.
pub fn render_table(v: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, x)| format!("{k:<w$}  {x}\n"))
        .collect()
}

/// Outcome of one verification check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass,
        detail,
    }
}

fn expect_eq(out: &mut Vec<CheckResult>, name: &str, want: Option<usize>, got: usize) {
    if let Some(w) = want {
        out.push(check(name, w == got, format!("expected {w}, got {got}")));
    }
}

/// Runs the invariant suite and the recorded expectations.
pub fn verify(sys: &SystemDef, a: &Analysis) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let pts: Vec<Point> = a.points.iter().take(100).cloned().collect();
    let g = sys.gradient_residual(&pts, 1e-6)?;
    out.push(check("gradient-structure", g <= 1e-5, format!("max rel residual {g:.3e}")));
    if sys.m == sys.n {
        let few: Vec<Point> = a.points.iter().take(30).cloned().collect();
        let l = sys.legendre_residual(&few, 1e-5)?;
        out.push(check("legendre", l <= 1e-5, format!("max rel residual {l:.3e}")));
    }
    if sys.is_zsystem() {
        let (ok, r) = sys.check_symmetric_ahat(&pts, 1e-8)?;
        out.push(check("symmetric-a-hat", ok, format!("max asymmetry {r:.3e}")));
    }
    if sys.eos().is_some() {
        let r = sys.eos_residual(&pts)?;
        out.push(check("equation-of-state", r <= 1e-9, format!("max |sigma - zeta| {r:.3e}")));
    }
    let r = a.space.residual;
    out.push(check("generator-residual", r <= 1e-8, format!("max residual {r:.3e}")));
    if let (Some(c), Some(h)) = (&a.checklist, &a.hyperbolicity) {
        let ok = !c.passes() || h.verdict >= Verdict::Hyperbolic;
        out.push(check(
            "checklist-implies-hessian",
            ok,
            format!("checklist passes: {}, verdict {}", c.passes(), h.verdict.as_str()),
        ));
    }
    if let Some(e) = &sys.expect {
        expect_eq(&mut out, "expect-zero-dim", e.zero_dim, a.space.zero.len());
        expect_eq(&mut out, "expect-zeta-dim", e.zeta_dim, usize::from(a.space.zeta.is_some()));
        expect_eq(&mut out, "expect-lambda-v", e.lambda_v, a.lambda.lambda_v.dim());
        expect_eq(&mut out, "expect-lambda-i", e.lambda_i, a.lambda.lambda_i.dim());
        expect_eq(&mut out, "expect-lambda-perp", e.lambda_perp, a.lambda.lambda_perp.dim());
        expect_eq(&mut out, "expect-L", e.l, a.lambda.l);
        if let Some(fl) = &e.flags {
            let held = symmetry::flag_names(&a.flags);
            let missing: Vec<&String> = fl.iter().filter(|f| !held.contains(&f.as_str())).collect();
            out.push(check(
                "expect-flags",
                missing.is_empty(),
                format!("holding {held:?}, missing {missing:?}"),
            ));
        }
        if let Some(v) = &e.verdict {
            let got = a.hyperbolicity.as_ref().map(|h| h.verdict);
            out.push(check(
                "expect-verdict",
                got.is_some_and(|g| g.matches(v)),
                format!("expected {v}, got {}", got.map_or("not evaluated", Verdict::as_str)),
            ));
        }
        if let Some(c) = e.closed {
            let got = a.closed.map(|x| x.0);
            out.push(check("expect-closed", got == Some(c), format!("expected {c}, got {got:?}")));
        }
    }
    Ok(out)
}

pub fn verify_json(sys: &SystemDef, checks: &[CheckResult]) -> Value {
    canonical(json!({
        "schema": SCHEMA,
        "system": sys.name,
        "pass": checks.iter().all(|c| c.pass),
        "checks": to_value(&checks),
    }))
}

/// Records the analysed dimensions, holding flags, verdict and closedness as expectations.
pub fn record_expectations(sys: &mut SystemDef, a: &Analysis) {
    let flags = symmetry::flag_names(&a.flags).iter().map(|f| f.to_string()).collect();
    sys.expect = Some(Expected {
        zero_dim: Some(a.space.zero.len()),
        zeta_dim: Some(usize::from(a.space.zeta.is_some())),
        lambda_v: Some(a.lambda.lambda_v.dim()),
        lambda_i: Some(a.lambda.lambda_i.dim()),
        lambda_perp: Some(a.lambda.lambda_perp.dim()),
        l: Some(a.lambda.l),
        flags: Some(flags),
        verdict: a.hyperbolicity.as_ref().map(|h| h.verdict.as_str().to_string()),
        closed: a.closed.map(|c| c.0),
    });
}

/// Analysis followed by the report document.
pub fn analyze(sys: &SystemDef, spec_text: Option<&str>, opts: &Options) -> Result<Value> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    let a = run(sys, opts)?;
    report(sys, spec_text, opts, &a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isentropic_report() {
        let s = catalog::euler_isentropic(3, 1.4).unwrap();
        let v = analyze(&s, None, &Options::default()).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["lambda"]["L"], 3);
        assert_eq!(v["symmetry"]["zero_dim"], 3);
        assert_eq!(v["symmetry"]["zero"].as_array().unwrap().len(), 3);
        assert_eq!(v["hyperbolicity"]["verdict"], "uniform");
        let t = to_json_string(&v);
        assert_eq!(t, to_json_string(&analyze(&s, None, &Options::default()).unwrap()));
        assert!(render_table(&v).contains("lambda.L"));
    }

    #[test]
    fn r17_numbers() {
        let v = canonical(json!({"a": 0.1, "b": 3, "c": [1.5]}));
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.starts_with(r#"{"a":1.0000000000000001e-1,"b":3,"c":[1.5000000000000000e"#));
        assert_eq!(v["c"][0].as_f64(), Some(1.5));
    }

    #[test]
    fn catalog_verifies() {
        for id in catalog::IDS {
            let s = catalog::build(id, catalog::Params::default()).unwrap();
            let a = run(&s, &Options::default()).unwrap();
            let checks = verify(&s, &a).unwrap();
            for c in &checks {
                assert!(c.pass, "{id}: {c:?}");
            }
        }
    }
}
