//! Conservation-law systems given by potentials `psi`, with fluxes `a = psi_z`.
//!
//! A system is either an explicit list of potentials or a field system
//! `psi_i = sum_t W_t(u) * d zeta_t / d u_{d_t(i)}` with `W_t = sum_l w_tl xi_l(u)`. The
//! Z-system `psi = xi * grad zeta` is the single-field, single-term case. Field systems may
//! be composed with an affine map `u = M z + b`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Jet, JetValue, Point};
use crate::linalg::{self, DenseMatrix};
pub use crate::sampling::{DomainBox, Sampling};

pub const XI_MIN: f64 = 1e-6;
pub const XI_MAX: f64 = 1e6;
const ROOT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Explicit,
    Zsystem,
    ZsystemEos,
    Multi,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Explicit => "explicit",
            Kind::Zsystem => "zsystem",
            Kind::ZsystemEos => "zsystem-eos",
            Kind::Multi => "multi",
        }
    }
}

/// Symbolic partial derivatives of an equation of state `sigma(xi, s)`.
#[derive(Clone, Debug)]
struct SigmaParts {
    f: Expr,
    fx: Expr,
    fs: Expr,
    fxx: Expr,
    fxs: Expr,
    fss: Expr,
}

/// Values of `sigma` and its partials at `(xi, s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SigmaValue {
    pub f: f64,
    pub fx: f64,
    pub fs: f64,
    pub fxx: f64,
    pub fxs: f64,
    pub fss: f64,
}

/// `xi` defined implicitly by `sigma(xi, z_zeta(z)) = zeta(z)`.
#[derive(Clone, Debug)]
pub struct Eos {
    pub sigma: Expr,
    pub zeta: Jet,
    pub zzeta: Option<Jet>,
    pub xi_min: f64,
    pub xi_max: f64,
    parts: SigmaParts,
}

/// State recovered at one point by the equation of state.
#[derive(Clone, Debug)]
pub struct EosState {
    pub xi: f64,
    pub s: f64,
    pub sigma: SigmaValue,
    pub zeta: JetValue,
    pub zzeta: Option<JetValue>,
}

impl Eos {
    pub fn new(
        zeta: Expr,
        sigma: Expr,
        zzeta: Option<Expr>,
        n: usize,
        xi_min: f64,
        xi_max: f64,
    ) -> Result<Eos> {
        let arity = if zzeta.is_some() { 2 } else { 1 };
        sigma.check_arity(arity)?;
        if !(xi_min > 0.0 && xi_min < xi_max) {
            return Err(Error::Invalid(format!(
                "xi bracket [{xi_min}, {xi_max}] must satisfy 0 < xi_min < xi_max"
            )));
        }
        let sigma = sigma.simplify();
        let fx = sigma.diff(0);
        let fs = if arity == 2 { sigma.diff(1) } else { Expr::c(0.0) };
        let parts = SigmaParts {
            fxx: fx.diff(0),
            fxs: if arity == 2 { fx.diff(1) } else { Expr::c(0.0) },
            fss: if arity == 2 { fs.diff(1) } else { Expr::c(0.0) },
            f: sigma.clone(),
            fx,
            fs,
        };
        Ok(Eos {
            sigma,
            zeta: Jet::new(zeta, n, true)?,
            zzeta: zzeta.map(|e| Jet::new(e, n, false)).transpose()?,
            xi_min,
            xi_max,
            parts,
        })
    }

    pub fn has_zzeta(&self) -> bool {
        self.zzeta.is_some()
    }

    pub fn sigma_at(&self, xi: f64, s: f64) -> Result<SigmaValue> {
        let p = [xi, s];
        let arg: &[f64] = if self.zzeta.is_some() { &p } else { &p[..1] };
        Ok(SigmaValue {
            f: self.parts.f.eval(arg)?,
            fx: self.parts.fx.eval(arg)?,
            fs: self.parts.fs.eval(arg)?,
            fxx: self.parts.fxx.eval(arg)?,
            fxs: self.parts.fxs.eval(arg)?,
            fss: self.parts.fss.eval(arg)?,
        })
    }

    fn sigma_f(&self, xi: f64, s: f64) -> Result<(f64, f64)> {
        let p = [xi, s];
        let arg: &[f64] = if self.zzeta.is_some() { &p } else { &p[..1] };
        Ok((self.parts.f.eval(arg)?, self.parts.fx.eval(arg)?))
    }

    /// Solve `sigma(xi, s) = target` by safeguarded Newton on the bracket.
    pub fn solve_xi(&self, target: f64, s: f64) -> Result<f64> {
        let (mut lo, mut hi) = (self.xi_min, self.xi_max);
        let (flo, _) = self.sigma_f(lo, s)?;
        let (fhi, _) = self.sigma_f(hi, s)?;
        let (flo, fhi) = (flo - target, fhi - target);
        if flo > 0.0 && fhi < 0.0 {
            return Err(Error::Eos(
                "sigma decreases in xi across the bracket (sigma_xi <= 0)".into(),
            ));
        }
        if flo > 0.0 || fhi < 0.0 {
            return Err(Error::Eos(format!(
                "root of sigma(xi) = {target} not bracketed in [{lo}, {hi}]"
            )));
        }
        let scale = 1.0 + target.abs();
        let mut x = (lo * hi).sqrt();
        for _ in 0..400 {
            let (f, fx) = self.sigma_f(x, s)?;
            let r = f - target;
            if r.abs() <= ROOT_TOL * scale {
                return Ok(x);
            }
            if r < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = if fx > 0.0 { x - r / fx } else { f64::NAN };
            x = if newton > lo && newton < hi {
                newton
            } else if hi / lo > 4.0 {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-16 * x {
                return Ok(x);
            }
        }
        Ok(x)
    }

    /// Recover `xi` at `z` together with the partials of `sigma` there.
    pub fn state(&self, z: &[f64], order: usize) -> Result<EosState> {
        let zeta = self.zeta.eval(z, order.min(3))?;
        let zz = match &self.zzeta {
            Some(j) => Some(j.eval(z, order.min(2))?),
            None => None,
        };
        let s = zz.as_ref().map_or(0.0, |v| v.v);
        let xi = self.solve_xi(zeta.v, s)?;
        let sigma = self.sigma_at(xi, s)?;
        if !(sigma.fx > 0.0) {
            return Err(Error::Eos(format!(
                "sigma_xi = {} <= 0 at xi = {xi}",
                sigma.fx
            )));
        }
        Ok(EosState {
            xi,
            s,
            sigma,
            zeta,
            zzeta: zz,
        })
    }

    /// Value, gradient and Hessian of the implicit `xi(z)`.
    pub fn eval(&self, z: &[f64], order: usize) -> Result<JetValue> {
        let st = self.state(z, order)?;
        Ok(xi_jet(&st, self.zeta.n, order))
    }

    pub fn substitute(&self, vals: &[Expr], n: usize) -> Result<Eos> {
        Eos::new(
            self.zeta.expr.substitute(vals),
            self.sigma.clone(),
            self.zzeta.as_ref().map(|j| j.expr.substitute(vals)),
            n,
            self.xi_min,
            self.xi_max,
        )
    }
}

fn xi_jet(st: &EosState, n: usize, order: usize) -> JetValue {
    let mut out = JetValue {
        v: st.xi,
        ..Default::default()
    };
    if order == 0 {
        return out;
    }
    let sg = st.sigma;
    let zs = |i: usize| st.zzeta.as_ref().map_or(0.0, |v| v.g[i]);
    let g: Vec<f64> = (0..n)
        .map(|i| (st.zeta.g[i] - sg.fs * zs(i)) / sg.fx)
        .collect();
    if order >= 2 {
        let zss = |i: usize, j: usize| st.zzeta.as_ref().map_or(0.0, |v| v.h(i, j));
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = (st.zeta.h(i, j)
                    - sg.fs * zss(i, j)
                    - sg.fxx * g[i] * g[j]
                    - sg.fxs * (g[i] * zs(j) + g[j] * zs(i))
                    - sg.fss * zs(i) * zs(j))
                    / sg.fx;
                h[i * n + j] = v;
                h[j * n + i] = v;
            }
        }
        out.h = h;
    }
    out.g = g;
    out
}

/// A scalar field `xi` on the base variables.
#[derive(Clone, Debug)]
pub enum Field {
    Explicit(Jet),
    Eos(Box<Eos>),
    Scaled { base: Box<Field>, factor: Jet },
}

impl Field {
    pub fn explicit(e: Expr, n: usize) -> Result<Field> {
        Ok(Field::Explicit(Jet::new(e, n, false)?))
    }

    pub fn eval(&self, z: &[f64], order: usize) -> Result<JetValue> {
        match self {
            Field::Explicit(j) => j.eval(z, order.min(2)),
            Field::Eos(e) => e.eval(z, order.min(2)),
            Field::Scaled { base, factor } => {
                let b = base.eval(z, order)?;
                let f = factor.eval(z, order.min(2))?;
                Ok(product(&b, &f, order.min(2)))
            }
        }
    }

    /// The equation of state behind this field, looking through scalings.
    pub fn eos(&self) -> Option<&Eos> {
        match self {
            Field::Eos(e) => Some(e),
            Field::Scaled { base, .. } => base.eos(),
            Field::Explicit(_) => None,
        }
    }

    pub fn substitute(&self, vals: &[Expr], n: usize) -> Result<Field> {
        Ok(match self {
            Field::Explicit(j) => Field::explicit(j.expr.substitute(vals), n)?,
            Field::Eos(e) => Field::Eos(Box::new(e.substitute(vals, n)?)),
            Field::Scaled { base, factor } => Field::Scaled {
                base: Box::new(base.substitute(vals, n)?),
                factor: Jet::new(factor.expr.substitute(vals), n, false)?,
            },
        })
    }
}

fn product(a: &JetValue, b: &JetValue, order: usize) -> JetValue {
    let n = a.g.len().max(b.g.len());
    let mut out = JetValue {
        v: a.v * b.v,
        ..Default::default()
    };
    if order >= 1 {
        out.g = (0..n).map(|i| a.g[i] * b.v + a.v * b.g[i]).collect();
    }
    if order >= 2 {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = a.h(i, j) * b.v
                    + a.g[i] * b.g[j]
                    + a.g[j] * b.g[i]
                    + a.v * b.h(i, j);
            }
        }
        out.h = h;
    }
    out
}

/// `W_t(u) * grad zeta_t(u)` evaluated at selected derivative indices.
#[derive(Clone, Debug)]
pub struct Term {
    pub zeta: Jet,
    pub weights: Vec<f64>,
    pub deriv: Vec<usize>,
}

impl Term {
    pub fn new(zeta: Expr, n: usize, weights: Vec<f64>, deriv: Vec<usize>) -> Result<Term> {
        if deriv.iter().any(|&d| d >= n) {
            return Err(Error::Arity {
                index: deriv.iter().max().copied().unwrap_or(0) + 1,
                arity: n,
            });
        }
        Ok(Term {
            zeta: Jet::new(zeta, n, true)?,
            weights,
            deriv,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FieldSystem {
    pub nb: usize,
    pub fields: Vec<Field>,
    pub terms: Vec<Term>,
}

#[derive(Clone, Debug)]
pub enum Base {
    Explicit(Vec<Jet>),
    Fields(FieldSystem),
}

/// Affine inner map `u = M z + b` with `M` of shape `nb x n`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub matrix: DenseMatrix,
    pub offset: DVector<f64>,
}

/// Expected analysis results recorded alongside a system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_v: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_i: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_perp: Option<usize>,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct SystemDef {
    pub name: String,
    pub kind: Kind,
    pub n: usize,
    pub m: usize,
    pub base: Base,
    pub map: Option<AffineMap>,
    pub domain: DomainBox,
    pub sampling: Sampling,
    pub e_h: Option<Vec<f64>>,
    pub provenance: Vec<String>,
    pub expect: Option<Expected>,
}

/// Entropy flux and potential at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyPair {
    pub q: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Values needed by the Z-system symmetry constraints at one point.
#[derive(Clone, Debug)]
pub struct ZValues {
    pub zeta: f64,
    pub zeta_z: Vec<f64>,
    pub xi: f64,
    pub xi_z: Vec<f64>,
    pub zzeta_z: Option<Vec<f64>>,
}

struct BaseEval {
    psi: Vec<f64>,
    a: Option<DenseMatrix>,
    h: Option<DenseMatrix>,
}

impl SystemDef {
    fn assemble(
        name: &str,
        kind: Kind,
        n: usize,
        m: usize,
        base: Base,
        map: Option<AffineMap>,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        if domain.dim() != n {
            return Err(Error::Shape(format!(
                "domain has dimension {} but the system has n = {n}",
                domain.dim()
            )));
        }
        if m == 0 || n == 0 {
            return Err(Error::Invalid("system dimensions must be positive".into()));
        }
        let sys = SystemDef {
            name: name.to_string(),
            kind,
            n,
            m,
            base,
            map,
            domain,
            sampling,
            e_h: None,
            provenance: Vec::new(),
            expect: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Z-system with explicit `xi`; `xi` must not vanish at the samples.
    pub fn zsystem(
        name: &str,
        zeta: Expr,
        xi: Expr,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let n = domain.dim();
        let fs = FieldSystem {
            nb: n,
            fields: vec![Field::explicit(xi, n)?],
            terms: vec![Term::new(zeta, n, vec![1.0], (0..n).collect())?],
        };
        SystemDef::assemble(name, Kind::Zsystem, n, n, Base::Fields(fs), None, domain, sampling)
    }

    /// Z-system whose `xi` solves `sigma(xi, z_zeta) = zeta`.
    #[allow(clippy::too_many_arguments)]
    pub fn zsystem_eos(
        name: &str,
        zeta: Expr,
        sigma: Expr,
        zzeta: Option<Expr>,
        domain: DomainBox,
        sampling: Sampling,
        xi_range: (f64, f64),
    ) -> Result<SystemDef> {
        let n = domain.dim();
        let eos = Eos::new(zeta.clone(), sigma, zzeta, n, xi_range.0, xi_range.1)?;
        SystemDef::zsystem_field(name, Kind::ZsystemEos, zeta, Field::Eos(Box::new(eos)), domain, sampling)
    }

    /// Z-system from an arbitrary field.
    pub fn zsystem_field(
        name: &str,
        kind: Kind,
        zeta: Expr,
        xi: Field,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let n = domain.dim();
        let fs = FieldSystem {
            nb: n,
            fields: vec![xi],
            terms: vec![Term::new(zeta, n, vec![1.0], (0..n).collect())?],
        };
        SystemDef::assemble(name, kind, n, n, Base::Fields(fs), None, domain, sampling)
    }

    pub fn explicit(
        name: &str,
        m: usize,
        psi: Vec<Expr>,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let n = domain.dim();
        if psi.len() != m {
            return Err(Error::Shape(format!("{} potentials for m = {m}", psi.len())));
        }
        let jets = psi
            .into_iter()
            .map(|e| Jet::new(e, n, false))
            .collect::<Result<Vec<_>>>()?;
        SystemDef::assemble(name, Kind::Explicit, n, m, Base::Explicit(jets), None, domain, sampling)
    }

    /// Z-system with `zeta = Y . z + z . W z / 2` and explicit `xi`; requires `W = W^T`,
    /// `W Y = 0`.
    pub fn from_wy(
        name: &str,
        w: &DenseMatrix,
        y: &DVector<f64>,
        xi: Expr,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let zeta = crate::symmetry::wy_zeta(w, y)?;
        SystemDef::zsystem(name, zeta, xi, domain, sampling)
    }

    /// `from_wy` with `xi` given by `sigma(xi) = zeta`.
    pub fn from_wy_eos(
        name: &str,
        w: &DenseMatrix,
        y: &DVector<f64>,
        sigma: Expr,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let zeta = crate::symmetry::wy_zeta(w, y)?;
        SystemDef::zsystem_eos(name, zeta, sigma, None, domain, sampling, (XI_MIN, XI_MAX))
    }

    /// Explicit potentials in base variables `u = M z + b`.
    pub fn explicit_mapped(
        name: &str,
        m: usize,
        psi: Vec<Jet>,
        map: AffineMap,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let n = domain.dim();
        if psi.len() != m {
            return Err(Error::Shape(format!("{} potentials for m = {m}", psi.len())));
        }
        SystemDef::assemble(name, Kind::Explicit, n, m, Base::Explicit(psi), Some(map), domain, sampling)
    }

    pub fn multi(
        name: &str,
        m: usize,
        fields: FieldSystem,
        map: Option<AffineMap>,
        domain: DomainBox,
        sampling: Sampling,
    ) -> Result<SystemDef> {
        let n = domain.dim();
        SystemDef::assemble(name, Kind::Multi, n, m, Base::Fields(fields), map, domain, sampling)
    }

    pub fn with_e_h(mut self, e: Vec<f64>) -> Result<SystemDef> {
        if e.len() != self.m {
            return Err(Error::Shape(format!("e_H has length {} but m = {}", e.len(), self.m)));
        }
        let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nrm > 0.0) {
            return Err(Error::Invalid("e_H must be nonzero".into()));
        }
        self.e_h = Some(e.iter().map(|x| x / nrm).collect());
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let nb = self.base_dim();
        if let Some(mp) = &self.map {
            if mp.matrix.shape() != (nb, self.n) || mp.offset.len() != nb {
                return Err(Error::Shape("affine map does not match dimensions".into()));
            }
        } else if nb != self.n {
            return Err(Error::Shape(format!(
                "base dimension {nb} differs from n = {} without a map",
                self.n
            )));
        }
        match &self.base {
            Base::Explicit(j) => {
                if j.len() != self.m {
                    return Err(Error::Shape("potential count differs from m".into()));
                }
            }
            Base::Fields(fs) => {
                for t in &fs.terms {
                    if t.deriv.len() != self.m {
                        return Err(Error::Shape("term derivative list differs from m".into()));
                    }
                    if t.weights.len() != fs.fields.len() {
                        return Err(Error::Shape("term weights differ from field count".into()));
                    }
                }
            }
        }
        if matches!(self.kind, Kind::Zsystem | Kind::ZsystemEos) && self.m != self.n {
            return Err(Error::Invalid("Z-systems require m = n".into()));
        }
        let pts = self.samples()?;
        for p in &pts {
            if let Base::Fields(fs) = &self.base {
                let u = self.base_point(p);
                for f in &fs.fields {
                    let v = f.eval(&u, 1)?;
                    if v.v == 0.0 || !v.v.is_finite() {
                        return Err(Error::Invalid(format!(
                            "xi vanishes at sample {p:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn base_dim(&self) -> usize {
        match &self.base {
            Base::Explicit(j) => j.first().map_or(self.n, |x| x.n),
            Base::Fields(fs) => fs.nb,
        }
    }

    pub fn is_zsystem(&self) -> bool {
        matches!(self.kind, Kind::Zsystem | Kind::ZsystemEos)
    }

    pub fn field_system(&self) -> Option<&FieldSystem> {
        match &self.base {
            Base::Fields(fs) => Some(fs),
            _ => None,
        }
    }

    /// `zeta` of a Z-system.
    pub fn zeta(&self) -> Option<&Jet> {
        if !self.is_zsystem() {
            return None;
        }
        self.field_system().map(|fs| &fs.terms[0].zeta)
    }

    /// `xi` of a Z-system.
    pub fn xi(&self) -> Option<&Field> {
        if !self.is_zsystem() {
            return None;
        }
        self.field_system().map(|fs| &fs.fields[0])
    }

    pub fn eos(&self) -> Option<&Eos> {
        if self.kind != Kind::ZsystemEos {
            return None;
        }
        self.xi().and_then(|f| f.eos())
    }

    pub fn samples(&self) -> Result<Vec<Point>> {
        crate::sampling::sample_points(&self.domain, self.sampling)
    }

    pub fn samples_with(&self, s: Sampling) -> Result<Vec<Point>> {
        crate::sampling::sample_points(&self.domain, s)
    }

    pub fn base_point(&self, z: &[f64]) -> Vec<f64> {
        match &self.map {
            None => z.to_vec(),
            Some(mp) => {
                let u = &mp.matrix * DVector::from_column_slice(z) + &mp.offset;
                u.iter().copied().collect()
            }
        }
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n {
            return Err(Error::Shape(format!(
                "point of length {} for n = {}",
                z.len(),
                self.n
            )));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite point".into()));
        }
        Ok(())
    }

    fn eval_base(&self, u: &[f64], order: usize, e: Option<&[f64]>) -> Result<BaseEval> {
        let m = self.m;
        match &self.base {
            Base::Explicit(jets) => {
                let nb = u.len();
                let vals = jets
                    .iter()
                    .map(|j| j.eval(u, order.min(2)))
                    .collect::<Result<Vec<_>>>()?;
                let psi = vals.iter().map(|v| v.v).collect();
                let a = (order >= 1).then(|| DMatrix::from_fn(m, nb, |i, j| vals[i].g[j]));
                let h = match (order >= 2, e) {
                    (true, Some(e)) => Some(DMatrix::from_fn(nb, nb, |j, k| {
                        (0..m).map(|i| e[i] * vals[i].h(j, k)).sum()
                    })),
                    _ => None,
                };
                Ok(BaseEval { psi, a, h })
            }
            Base::Fields(fs) => eval_fields(fs, m, u, order, e),
        }
    }

    fn eval_at(&self, z: &[f64], order: usize, e: Option<&[f64]>) -> Result<BaseEval> {
        self.check_point(z)?;
        let u = self.base_point(z);
        let mut r = self.eval_base(&u, order, e)?;
        if let Some(mp) = &self.map {
            r.a = r.a.map(|a| a * &mp.matrix);
            r.h = r.h.map(|h| mp.matrix.transpose() * h * &mp.matrix);
        }
        Ok(r)
    }

    pub fn psi_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_at(z, 0, None)?.psi)
    }

    /// Flux matrix `a_ij = d psi_i / d z_j`, shape `m x n`.
    pub fn flux_at(&self, z: &[f64]) -> Result<DenseMatrix> {
        Ok(self.eval_at(z, 1, None)?.a.expect("order 1"))
    }

    pub fn psi_flux_at(&self, z: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        let r = self.eval_at(z, 1, None)?;
        Ok((r.psi, r.a.expect("order 1")))
    }

    /// Hessian of `e . psi` in `z`.
    pub fn hess_at(&self, z: &[f64], e: &[f64]) -> Result<DenseMatrix> {
        if e.len() != self.m {
            return Err(Error::Shape("direction length differs from m".into()));
        }
        Ok(self.eval_at(z, 2, Some(e))?.h.expect("order 2"))
    }

    pub fn entropy_at(&self, z: &[f64]) -> Result<EntropyPair> {
        let (psi, a) = self.psi_flux_at(z)?;
        let zv = DVector::from_column_slice(z);
        let az = &a * zv;
        let q = (0..self.m).map(|i| az[i] - psi[i]).collect();
        Ok(EntropyPair { q, psi })
    }

    /// Values entering the Z-system constraints at a point.
    pub fn zvalues(&self, z: &[f64]) -> Result<ZValues> {
        let (zeta, xi) = match (self.zeta(), self.xi()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Invalid("not a Z-system".into())),
        };
        self.check_point(z)?;
        let zv = zeta.eval(z, 1)?;
        let zz = match self.eos().and_then(|e| e.zzeta.as_ref()) {
            Some(j) => Some(j.eval(z, 1)?.g),
            None => None,
        };
        let xv = xi.eval(z, 1)?;
        Ok(ZValues {
            zeta: zv.v,
            zeta_z: zv.g,
            xi: xv.v,
            xi_z: xv.g,
            zzeta_z: zz,
        })
    }

    /// Largest `|sigma(xi, z_zeta) - zeta|` over the points.
    pub fn eos_residual(&self, pts: &[Point]) -> Result<f64> {
        let eos = self
            .eos()
            .ok_or_else(|| Error::Invalid("system has no equation of state".into()))?;
        let mut worst: f64 = 0.0;
        for p in pts {
            let st = eos.state(p, 0)?;
            worst = worst.max((st.sigma.f - st.zeta.v).abs());
        }
        Ok(worst)
    }

    /// `sum_j z_j psi_j = 0` at every point; returns the verdict and the worst residual.
    pub fn check_closed(&self, pts: &[Point], tol: f64) -> Result<(bool, f64)> {
        if self.m != self.n {
            return Ok((false, f64::INFINITY));
        }
        let mut worst: f64 = 0.0;
        for p in pts {
            let psi = self.psi_at(p)?;
            let s: f64 = p.iter().zip(&psi).map(|(a, b)| a * b).sum();
            let scale = 1.0 + p.iter().zip(&psi).map(|(a, b)| (a * b).abs()).sum::<f64>();
            worst = worst.max(s.abs() / scale);
        }
        Ok((worst <= tol, worst))
    }

    /// Symmetry of `a_ij - psi_i xi_j / xi` at every point.
    pub fn check_symmetric_ahat(&self, pts: &[Point], tol: f64) -> Result<(bool, f64)> {
        if !self.is_zsystem() {
            return Err(Error::Invalid("a-hat test needs a Z-system".into()));
        }
        let mut worst: f64 = 0.0;
        for p in pts {
            let (psi, a) = self.psi_flux_at(p)?;
            let zv = self.zvalues(p)?;
            if zv.xi == 0.0 {
                return Err(Error::Invalid(format!("xi vanishes at {p:?}")));
            }
            let n = self.n;
            let ah = DMatrix::from_fn(n, n, |i, j| a[(i, j)] - psi[i] * zv.xi_z[j] / zv.xi);
            let scale = ah.abs().max().max(1.0);
            worst = worst.max((&ah - ah.transpose()).abs().max() / scale);
        }
        Ok((worst <= tol, worst))
    }

    /// Minimum numerical rank of the flux matrix over the points.
    pub fn rank_flux(&self, pts: &[Point], tol: f64) -> Result<usize> {
        let mut r = usize::MAX;
        for p in pts {
            r = r.min(linalg::rank(&self.flux_at(p)?, tol));
        }
        Ok(if r == usize::MAX { 0 } else { r })
    }

    /// Worst relative deviation of `flux_at` from the central-difference Jacobian of `psi_at`.
    pub fn gradient_residual(&self, pts: &[Point], h: f64) -> Result<f64> {
        let res: Result<Vec<f64>> = pts
            .par_iter()
            .map(|p| {
                let a = self.flux_at(p)?;
                let mut worst: f64 = 0.0;
                for j in 0..self.n {
                    let (mut zp, mut zm) = (p.clone(), p.clone());
                    zp[j] += h;
                    zm[j] -= h;
                    let (fp, fm) = (self.psi_at(&zp)?, self.psi_at(&zm)?);
                    for i in 0..self.m {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        let scale = 1.0 + a[(i, j)].abs().max(fd.abs());
                        worst = worst.max((a[(i, j)] - fd).abs() / scale);
                    }
                }
                Ok(worst)
            })
            .collect();
        Ok(res?.into_iter().fold(0.0, f64::max))
    }

    /// Legendre identity `dq_i = sum_j z_j da_ij` along the coordinate directions.
    pub fn legendre_residual(&self, pts: &[Point], h: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for p in pts {
            for d in 0..self.n {
                let (mut zp, mut zm) = (p.clone(), p.clone());
                zp[d] += h;
                zm[d] -= h;
                let (qp, qm) = (self.entropy_at(&zp)?, self.entropy_at(&zm)?);
                let (ap, am) = (self.flux_at(&zp)?, self.flux_at(&zm)?);
                for i in 0..self.m {
                    let dq = (qp.q[i] - qm.q[i]) / (2.0 * h);
                    let da: f64 = (0..self.n)
                        .map(|j| p[j] * (ap[(i, j)] - am[(i, j)]) / (2.0 * h))
                        .sum();
                    let scale = 1.0 + dq.abs().max(da.abs());
                    worst = worst.max((dq - da).abs() / scale);
                }
            }
        }
        Ok(worst)
    }
}

fn eval_fields(
    fs: &FieldSystem,
    m: usize,
    u: &[f64],
    order: usize,
    e: Option<&[f64]>,
) -> Result<BaseEval> {
    let nb = fs.nb;
    let fvals = fs
        .fields
        .iter()
        .map(|f| f.eval(u, order.min(2)))
        .collect::<Result<Vec<_>>>()?;
    let mut psi = vec![0.0; m];
    let mut a = (order >= 1).then(|| DMatrix::zeros(m, nb));
    let mut h = (order >= 2 && e.is_some()).then(|| DMatrix::zeros(nb, nb));
    for t in &fs.terms {
        let zt = t.zeta.eval(u, (order + 1).min(3))?;
        let mut w = 0.0;
        let mut wg = vec![0.0; if order >= 1 { nb } else { 0 }];
        let mut wh = vec![0.0; if order >= 2 { nb * nb } else { 0 }];
        for (l, fv) in fvals.iter().enumerate() {
            let c = t.weights[l];
            if c == 0.0 {
                continue;
            }
            w += c * fv.v;
            for (k, x) in wg.iter_mut().enumerate() {
                *x += c * fv.g[k];
            }
            for (k, x) in wh.iter_mut().enumerate() {
                *x += c * fv.h[k];
            }
        }
        for i in 0..m {
            let d = t.deriv[i];
            psi[i] += w * zt.g[d];
            if let Some(a) = a.as_mut() {
                for j in 0..nb {
                    a[(i, j)] += wg[j] * zt.g[d] + w * zt.h(d, j);
                }
            }
        }
        if let (Some(h), Some(e)) = (h.as_mut(), e) {
            for i in 0..m {
                if e[i] == 0.0 {
                    continue;
                }
                let d = t.deriv[i];
                for j in 0..nb {
                    for k in 0..nb {
                        h[(j, k)] += e[i]
                            * (wh[j * nb + k] * zt.g[d]
                                + wg[j] * zt.h(d, k)
                                + wg[k] * zt.h(d, j)
                                + w * zt.t(d, j, k));
                    }
                }
            }
        }
    }
    Ok(BaseEval { psi, a, h })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(lo: &[f64], hi: &[f64]) -> DomainBox {
        DomainBox::new(lo.to_vec(), hi.to_vec(), vec![]).unwrap()
    }

    fn p(s: &str, n: usize) -> Expr {
        Expr::parse(s, n).unwrap()
    }

    #[test]
    fn wy_builder() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let d = bx(&[2.5, -0.5, -0.5], &[4.0, 0.5, 0.5]);
        let g = crate::catalog::gamma_law(1.4).unwrap();
        let s = SystemDef::from_wy_eos("wy", &w, &y, g, d.clone(), Sampling::default()).unwrap();
        let iso = crate::catalog::euler_isentropic(3, 1.4).unwrap();
        let pts = s.samples().unwrap();
        for q in pts.iter().take(20) {
            let (a, b) = (s.zeta().unwrap().expr.eval(q).unwrap(), iso.zeta().unwrap().expr.eval(q).unwrap());
            assert!((a - b).abs() < 1e-14);
        }
        let sp = crate::symmetry::solve_zsystem(&s, &pts, 1e-9).unwrap();
        let wy = crate::symmetry::wy_generators(&w, &y).unwrap();
        assert_eq!(wy.generators.len(), 3);
        assert!(crate::symmetry::span_gap(&sp.zero, &wy.generators, 3) < 1e-8);
        let lin = SystemDef::from_wy("lin", &DMatrix::zeros(2, 2), &DVector::from_vec(vec![1.0, 0.0]), p("1", 2), bx(&[0.0, 0.0], &[1.0, 1.0]), Sampling::default()).unwrap();
        assert_eq!(lin.zeta().unwrap().expr, Expr::v(0));
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0]));
        assert!(SystemDef::from_wy("bad", &bad, &DVector::from_vec(vec![1.0, 0.0]), p("1", 2), d, Sampling::default()).is_err());
    }

    #[test]
    fn zsystem_unit_xi() {
        let s = SystemDef::zsystem(
            "t",
            p("z1+0.5*z2^2", 2),
            p("1", 2),
            bx(&[0.0, -1.0], &[1.0, 1.0]),
            Sampling::default(),
        )
        .unwrap();
        let z = [0.3, 0.7];
        assert_eq!(s.psi_at(&z).unwrap(), vec![1.0, 0.7]);
        let a = s.flux_at(&z).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn zsystem_xi_equals_zeta() {
        let s = SystemDef::zsystem(
            "t",
            p("z1+0.5*z2^2", 2),
            p("z1+0.5*z2^2", 2),
            bx(&[0.5, -1.0], &[1.5, 1.0]),
            Sampling::default(),
        )
        .unwrap();
        let a = s.flux_at(&[1.0, 0.0]).unwrap();
        assert!((a - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-15);
        let pts = s.samples().unwrap();
        assert!(s.gradient_residual(&pts[..50], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn vanishing_xi_rejected() {
        let r = SystemDef::zsystem(
            "t",
            p("z1", 1),
            p("0", 1),
            bx(&[0.0], &[1.0]),
            Sampling::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn eos_identity_recovers_zeta() {
        let s = SystemDef::zsystem_eos(
            "t",
            p("z1+0.5*z2^2", 2),
            p("z1", 1),
            None,
            bx(&[0.5, -1.0], &[1.5, 1.0]),
            Sampling::default(),
            (XI_MIN, XI_MAX),
        )
        .unwrap();
        for z in s.samples().unwrap().iter().take(20) {
            let zv = s.zvalues(z).unwrap();
            assert!((zv.xi - zv.zeta).abs() < 1e-11 * (1.0 + zv.zeta.abs()));
        }
    }

    #[test]
    fn eos_gamma_law_residual() {
        let g: f64 = 1.4;
        let sigma = format!("{:?}*z1^{:?}", g / (g - 1.0), (g - 1.0) / g);
        let s = SystemDef::zsystem_eos(
            "t",
            p("z1+0.5*z2^2", 2),
            p(&sigma, 1),
            None,
            bx(&[2.5, -1.0], &[3.5, 1.0]),
            Sampling::default(),
            (XI_MIN, XI_MAX),
        )
        .unwrap();
        let pts = s.samples().unwrap();
        assert!(s.eos_residual(&pts).unwrap() <= 1e-11 * 5.0);
        assert!(s.gradient_residual(&pts[..40], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn decreasing_eos_rejected() {
        let r = SystemDef::zsystem_eos(
            "t",
            p("z1", 1),
            p("-z1", 1),
            None,
            bx(&[-2.0], &[-1.0]),
            Sampling::default(),
            (XI_MIN, XI_MAX),
        );
        assert!(matches!(r, Err(Error::Eos(_))), "{r:?}");
    }

    #[test]
    fn entropy_of_linear_zeta() {
        let s = SystemDef::zsystem(
            "t",
            p("z1", 2),
            p("1", 2),
            bx(&[0.0, 0.0], &[1.0, 1.0]),
            Sampling::default(),
        )
        .unwrap();
        let z = [0.4, 0.2];
        let ep = s.entropy_at(&z).unwrap();
        let a = s.flux_at(&z).unwrap();
        assert_eq!(ep.q[0], a[(0, 0)] * z[0] - 1.0);
        assert_eq!(s.rank_flux(&s.samples().unwrap(), 1e-9).unwrap(), 0);
        let (ok, _) = s.check_symmetric_ahat(&s.samples().unwrap(), 0.0).unwrap();
        assert!(ok);
    }

    #[test]
    fn homogeneous_zeta_is_closed() {
        let s = SystemDef::zsystem(
            "t",
            p("z2/z1", 2),
            p("z1^2 + z2", 2),
            bx(&[1.0, 0.5], &[2.0, 1.5]),
            Sampling::default(),
        )
        .unwrap();
        let pts = s.samples().unwrap();
        assert!(s.check_closed(&pts, 1e-9).unwrap().0);
    }

    #[test]
    fn non_gradient_ahat_detected() {
        // psi built from xi but paired with an unrelated flux: explicit potentials whose
        // a-hat against xi = exp(z1) is not symmetric.
        let zs = SystemDef::zsystem(
            "t",
            p("z1*z2", 2),
            p("exp(z1)", 2),
            bx(&[0.0, 0.0], &[1.0, 1.0]),
            Sampling::default(),
        )
        .unwrap();
        let pts = zs.samples().unwrap();
        assert!(zs.check_symmetric_ahat(&pts, 1e-12).unwrap().0);
        // Replace xi by a field that is not the one generating psi.
        let mut bad = zs.clone();
        if let Base::Fields(fs) = &mut bad.base {
            fs.fields[0] = Field::explicit(p("exp(z1 + z2^2)", 2), 2).unwrap();
        }
        let psi_true = zs.clone();
        let mut worst: f64 = 0.0;
        for z in &pts {
            let (psi, a) = psi_true.psi_flux_at(z).unwrap();
            let xi = bad.zvalues(z).unwrap();
            let ah = DMatrix::from_fn(2, 2, |i, j| a[(i, j)] - psi[i] * xi.xi_z[j] / xi.xi);
            worst = worst.max((ah[(0, 1)] - ah[(1, 0)]).abs());
        }
        assert!(worst > 1e-3);
    }

    #[test]
    fn multi_single_term_equals_zsystem() {
        let d = bx(&[0.5, -1.0], &[1.5, 1.0]);
        let zs = SystemDef::zsystem("t", p("z1+0.5*z2^2", 2), p("z1^2", 2), d.clone(), Sampling::default()).unwrap();
        let fs = FieldSystem {
            nb: 2,
            fields: vec![Field::explicit(p("z1^2", 2), 2).unwrap()],
            terms: vec![Term::new(p("z1+0.5*z2^2", 2), 2, vec![1.0], vec![0, 1]).unwrap()],
        };
        let ms = SystemDef::multi("m", 2, fs, None, d, Sampling::default()).unwrap();
        for z in zs.samples().unwrap().iter().take(10) {
            assert_eq!(zs.psi_at(z).unwrap(), ms.psi_at(z).unwrap());
            assert_eq!(zs.flux_at(z).unwrap(), ms.flux_at(z).unwrap());
        }
    }
}
