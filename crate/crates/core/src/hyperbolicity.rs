//! Hyperbolicity: semidefiniteness of `(e_H . psi)_zz` on the samples, admissible time-like
//! directions and the sufficient-condition checklist.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Point;
use crate::linalg::{self, DenseMatrix, SubspaceBasis};
use crate::symmetry::{Generator, SymmetrySpace};
use crate::system::SystemDef;

/// Fraction of samples that must be strictly positive for a non-uniform pass.
pub const POSITIVE_FRACTION: f64 = 0.9;
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Fails,
    Hyperbolic,
    Uniform,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Fails => "fails",
            Verdict::Hyperbolic => "hyperbolic",
            Verdict::Uniform => "uniform",
        }
    }

    /// Match against an expected label; `hyperbolic-or-better` accepts both passing verdicts.
    pub fn matches(self, label: &str) -> bool {
        match label {
            "hyperbolic-or-better" => self >= Verdict::Hyperbolic,
            s => s == self.as_str(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HyperbolicityReport {
    pub e_h: Vec<f64>,
    pub min_eig: f64,
    /// Smallest `lambda_min / max |lambda|` over the samples.
    pub min_eig_rel: f64,
    pub positive_fraction: f64,
    pub threshold: f64,
    pub samples: usize,
    pub tol: f64,
    pub verdict: Verdict,
}

/// Joint nullspace of `Z` over `{.}_0`; all of `R^n` when `{.}_0` is empty.
pub fn timelike_candidates(space: &SymmetrySpace) -> Result<SubspaceBasis> {
    let n = space.n;
    if space.zero.is_empty() {
        return Ok(SubspaceBasis::full(n, 1e-9));
    }
    let mut m = DMatrix::zeros(n * space.zero.len(), n);
    for (k, g) in space.zero.iter().enumerate() {
        let s = g.zw_vector().amax().max(f64::MIN_POSITIVE);
        m.view_mut((k * n, 0), (n, n)).copy_from(&(&g.z / s));
    }
    if m.amax() <= 1e-12 {
        return Ok(SubspaceBasis::full(n, 1e-9));
    }
    Ok(linalg::nullspace(&m, 1e-9)?.canonical())
}

fn eig_range(h: &DenseMatrix) -> Result<(f64, f64)> {
    let ev = linalg::sym_eigvals(h)?;
    let scale = ev.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    Ok((ev[0], scale))
}

/// Sample sweep of the smallest eigenvalue of `(e . psi)_zz`.
pub fn hessian_check(
    sys: &SystemDef,
    e: &[f64],
    pts: &[Point],
    tol: f64,
) -> Result<HyperbolicityReport> {
    if pts.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (nrm - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid(format!("e_H must be a unit vector (norm {nrm})")));
    }
    let res: Vec<(f64, f64)> = pts
        .par_iter()
        .map(|p| eig_range(&sys.hess_at(p, e)?))
        .collect::<Result<_>>()?;
    let mut min_eig = f64::INFINITY;
    let mut min_rel = f64::INFINITY;
    let (mut pos, mut nonneg) = (0usize, 0usize);
    for &(lmin, scale) in &res {
        min_eig = min_eig.min(lmin);
        let t = tol * scale;
        min_rel = min_rel.min(if scale > 0.0 { lmin / scale } else { 0.0 });
        if lmin > t {
            pos += 1;
        }
        if lmin >= -t {
            nonneg += 1;
        }
    }
    let k = res.len();
    let frac = pos as f64 / k as f64;
    let verdict = if pos == k {
        Verdict::Uniform
    } else if nonneg == k && frac >= POSITIVE_FRACTION {
        Verdict::Hyperbolic
    } else {
        Verdict::Fails
    };
    Ok(HyperbolicityReport {
        e_h: e.to_vec(),
        min_eig,
        min_eig_rel: min_rel,
        positive_fraction: frac,
        threshold: POSITIVE_FRACTION,
        samples: k,
        tol,
        verdict,
    })
}

/// Use the system's `e_H` if given; otherwise try `+-` each canonical candidate direction
/// and keep the best verdict, breaking ties by the relative smallest eigenvalue.
pub fn choose_e_h(
    sys: &SystemDef,
    space: Option<&SymmetrySpace>,
    pts: &[Point],
    tol: f64,
) -> Result<HyperbolicityReport> {
    if let Some(e) = &sys.e_h {
        return hessian_check(sys, e, pts, tol);
    }
    let cands = match space {
        Some(sp) if sp.n == sys.m => timelike_candidates(sp)?,
        _ => SubspaceBasis::full(sys.m, 1e-9),
    };
    let dirs: Vec<Vec<f64>> = if cands.dim() == 0 {
        (0..sys.m).map(|k| crate::catalog::unit(sys.m, k)).collect()
    } else {
        (0..cands.dim()).map(|k| cands.column(k)).collect()
    };
    let mut best: Option<HyperbolicityReport> = None;
    for d in dirs {
        for s in [1.0, -1.0] {
            let e: Vec<f64> = d.iter().map(|x| x * s).collect();
            let r = hessian_check(sys, &e, pts, tol)?;
            let better = match &best {
                None => true,
                Some(b) => (r.verdict, r.min_eig_rel) > (b.verdict, b.min_eig_rel),
            };
            if better {
                best = Some(r);
            }
        }
    }
    best.ok_or_else(|| Error::Invalid("no candidate directions".into()))
}

/// One checklist entry: `None` when the condition does not apply.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub holds: Option<bool>,
    /// Worst margin over the samples; nonnegative when the condition holds.
    pub margin: f64,
}

impl Check {
    fn na() -> Check {
        Check {
            holds: None,
            margin: f64::NAN,
        }
    }

    fn from_margin(m: f64) -> Check {
        Check {
            holds: Some(m >= 0.0),
            margin: m,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Checklist {
    pub bwc: Check,
    pub bwg: Check,
    pub bwd: Check,
    pub bwe: Check,
    pub bwf: Check,
}

impl Checklist {
    /// True when every applicable entry holds and at least one applies.
    pub fn passes(&self) -> bool {
        let all = [&self.bwc, &self.bwg, &self.bwd, &self.bwe, &self.bwf];
        all.iter().any(|c| c.holds.is_some()) && all.iter().all(|c| c.holds != Some(false))
    }
}

fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DenseMatrix {
    a * b.transpose()
}

fn psd_margin(m: &DenseMatrix) -> Result<f64> {
    let ev = linalg::sym_eigvals(m)?;
    let scale = ev.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    Ok(ev[0] + 1e-9 * (1.0 + scale))
}

/// Sufficient conditions for a Z-system with an equation of state, at every sample.
pub fn sufficient_checklist(sys: &SystemDef, e: &[f64], pts: &[Point]) -> Result<Checklist> {
    let eos = match sys.eos() {
        Some(x) => x,
        None => {
            return Ok(Checklist {
                bwc: Check::na(),
                bwg: Check::na(),
                bwd: Check::na(),
                bwe: Check::na(),
                bwf: Check::na(),
            })
        }
    };
    let n = sys.n;
    let ev = DVector::from_column_slice(e);
    let linear_s = eos.zzeta.as_ref().map(|j| {
        j.hess
            .iter()
            .flatten()
            .all(|h| h.as_const() == Some(0.0))
    });
    let (mut c, mut g, mut d, mut w, mut f) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
    );
    for p in pts {
        let st = eos.state(p, 3)?;
        let sg = st.sigma;
        let zj = &st.zeta;
        let zz = DVector::from_column_slice(&zj.g);
        let zzz = DMatrix::from_row_slice(n, n, &zj.h);
        let ze = zz.dot(&ev);
        let zez = &zzz * &ev;
        let zezz = DMatrix::from_fn(n, n, |i, j| (0..n).map(|k| zj.t(i, j, k) * e[k]).sum());
        c = c.min((-sg.fxx).min(st.xi).min(sg.fx).min(ze));
        g = g.min(psd_margin(&zezz)?);
        let es = st
            .zzeta
            .as_ref()
            .map_or(DVector::zeros(n), |v| DVector::from_column_slice(&v.g));
        let v = &zz - &es * sg.fs;
        let m = outer(&zez, &zz) + outer(&zz, &zez) + &zzz * ze
            - outer(&v, &v) * (sg.fxx / (sg.fx * sg.fx) * ze);
        d = d.min(psd_margin(&m)?);
        if linear_s == Some(true) {
            let en = es.norm();
            let par = if en > 0.0 {
                let u = &es / en;
                (&zez - &u * zez.dot(&u)).norm()
            } else {
                zez.norm()
            };
            let tol = 1e-9 * (1.0 + zez.norm());
            let sign = sg.fs * zez.dot(&es);
            w = w.min((tol - par).min(tol - sign));
            f = f.min(1e-9 * (1.0 + sg.fss.abs()) - sg.fss);
        }
    }
    let has_s = eos.has_zzeta();
    Ok(Checklist {
        bwc: Check::from_margin(c),
        bwg: Check::from_margin(g),
        bwd: Check::from_margin(d),
        bwe: if linear_s == Some(true) { Check::from_margin(w) } else { Check::na() },
        bwf: if has_s && linear_s == Some(true) { Check::from_margin(f) } else { Check::na() },
    })
}

/// `z(tau)` along `dz/dtau = Z z + omega` by `steps` RK4 steps.
pub fn flow(g: &Generator, z: &[f64], tau: f64, steps: usize) -> Vec<f64> {
    let h = tau / steps.max(1) as f64;
    let mut y = DVector::from_column_slice(z);
    let f = |y: &DVector<f64>| &g.z * y + &g.omega;
    for _ in 0..steps.max(1) {
        let k1 = f(&y);
        let k2 = f(&(&y + &k1 * (0.5 * h)));
        let k3 = f(&(&y + &k2 * (0.5 * h)));
        let k4 = f(&(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y.iter().copied().collect()
}

/// Largest relative deviation of `J^T H(phi_tau z) J` from `H(z)`, `J = exp(tau Z)`,
/// over the points whose image stays evaluable.
pub fn flow_invariance_residual(
    sys: &SystemDef,
    g: &Generator,
    e: &[f64],
    pts: &[Point],
    tau: f64,
) -> Result<f64> {
    let j = (&g.z * tau).exp();
    let mut worst: f64 = 0.0;
    for p in pts {
        let q = flow(g, p, tau, 16);
        let h1 = match sys.hess_at(&q, e) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let h0 = sys.hess_at(p, e)?;
        let lhs = j.transpose() * h1 * &j;
        worst = worst.max((lhs - &h0).amax() / (1.0 + h0.amax()));
    }
    Ok(worst)
}
