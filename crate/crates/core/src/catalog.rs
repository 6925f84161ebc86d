//! Built-in Euler-family systems and counterexamples.
//!
//! Sign conventions: the extended system uses `z_n = -1/T`. The entropy-conserving system
//! uses `z_n = -T`, so that exchange with `c_e = -1` maps it onto the extended system.

use crate::error::{Error, Result};
use crate::expr::{Expr, Point};
use crate::sampling::{DomainBox, Sampling};
use crate::system::{Expected, SystemDef, XI_MAX, XI_MIN};

pub const IDS: [&str; 6] = [
    "euler-isentropic",
    "euler-extended",
    "euler-entropy-conserving",
    "gex-counterexample",
    "gdj-exponential",
    "gdk-quadratic",
];

pub const DEFAULT_GAMMA: f64 = 1.4;
pub const DEFAULT_CP: f64 = 3.5;
pub const DEFAULT_R: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Params {
    pub n: usize,
    pub gamma: f64,
    pub cp: f64,
    pub r: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            n: 3,
            gamma: DEFAULT_GAMMA,
            cp: DEFAULT_CP,
            r: DEFAULT_R,
        }
    }
}

pub fn build(id: &str, p: Params) -> Result<SystemDef> {
    match id {
        "euler-isentropic" => euler_isentropic(p.n, p.gamma),
        "euler-extended" => euler_extended(p.n, gibbs(p.cp, p.r)?),
        "euler-entropy-conserving" => euler_entropy_conserving(p.n, gibbs(p.cp, p.r)?),
        "gex-counterexample" => gex_counterexample(p.gamma),
        "gdj-exponential" => gdj_exponential(p.gamma),
        "gdk-quadratic" => euler_isentropic(2, p.gamma),
        _ => Err(Error::Invalid(format!(
            "unknown catalog id `{id}` (known: {})",
            IDS.join(", ")
        ))),
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::Invalid(format!("gamma = {gamma} must exceed 1")));
    }
    Ok(())
}

/// Enthalpy `H(P) = gamma/(gamma-1) P^((gamma-1)/gamma)` as an expression in `z1`.
pub fn gamma_law(gamma: f64) -> Result<Expr> {
    check_gamma(gamma)?;
    Ok(Expr::c(gamma / (gamma - 1.0)) * Expr::v(0).powf((gamma - 1.0) / gamma))
}

fn gamma_law_value(gamma: f64, p: f64) -> f64 {
    gamma / (gamma - 1.0) * p.powf((gamma - 1.0) / gamma)
}

/// Ideal-gas Gibbs function `G(P, T) = c_p T (1 - log T) + R T log P` in `(z1, z2)`.
pub fn gibbs(cp: f64, r: f64) -> Result<Expr> {
    if !(r > 0.0) {
        return Err(Error::Invalid("gas constant must be positive".into()));
    }
    let (p, t) = (Expr::v(0), Expr::v(1));
    Ok((Expr::c(cp) * t.clone() * (Expr::c(1.0) - t.clone().log()) + Expr::c(r) * t * p.log())
        .simplify())
}

fn kinetic(range: std::ops::Range<usize>, scale: Option<Expr>) -> Expr {
    Expr::sum(range.map(|j| {
        let t = Expr::c(0.5) * Expr::v(j).pow(Expr::c(2.0));
        match &scale {
            Some(s) => t / s.clone(),
            None => t,
        }
    }))
}

fn isentropic_zeta(n: usize) -> Expr {
    (Expr::v(0) + kinetic(1..n, None)).simplify()
}

fn expected(zero: usize, l: usize, li: usize, lp: usize, flags: &[&str], verdict: &str) -> Expected {
    Expected {
        zero_dim: Some(zero),
        lambda_i: Some(li),
        lambda_perp: Some(lp),
        l: Some(l),
        flags: Some(flags.iter().map(|s| s.to_string()).collect()),
        verdict: Some(verdict.into()),
        ..Default::default()
    }
}

/// Isentropic Euler with the gamma-law enthalpy on the box `P in [0.5, 2]`, `|u| <= 1`.
pub fn euler_isentropic(n: usize, gamma: f64) -> Result<SystemDef> {
    check_gamma(gamma)?;
    let mut s = euler_isentropic_with_eos(
        n,
        gamma_law(gamma)?,
        (gamma_law_value(gamma, 0.5), gamma_law_value(gamma, 2.0)),
    )?;
    s.name = format!("euler-isentropic-{n}");
    s.provenance.push(format!("catalog euler-isentropic n={n} gamma={gamma}"));
    Ok(s)
}

/// Isentropic form `zeta = z1 + |z_2..z_n|^2 / 2` with `sigma(xi)` and `zeta` restricted to
/// `(lo, hi)`.
pub fn euler_isentropic_with_eos(n: usize, sigma: Expr, zeta_range: (f64, f64)) -> Result<SystemDef> {
    if n < 2 {
        return Err(Error::Invalid("isentropic Euler needs n >= 2".into()));
    }
    let (lo, hi) = zeta_range;
    let umax = 1.0 / ((n - 1) as f64).sqrt();
    let mut lower = vec![lo - 0.5];
    let mut upper = vec![hi];
    for _ in 1..n {
        lower.push(-umax);
        upper.push(umax);
    }
    let zeta = isentropic_zeta(n);
    let guards = vec![
        (zeta.clone() - Expr::c(lo)).simplify(),
        (Expr::c(hi) - zeta.clone()).simplify(),
    ];
    let dom = DomainBox::new(lower, upper, guards)?;
    let s = SystemDef::zsystem_eos(
        &format!("euler-isentropic-{n}"),
        zeta,
        sigma,
        None,
        dom,
        Sampling::default(),
        (XI_MIN, XI_MAX),
    )?;
    let mut s = s.with_e_h(unit(n, 0))?;
    let flags = if n >= 2 { vec!["W", "I*", "ω", "T*"] } else { vec![] };
    s.expect = Some(Expected {
        lambda_v: Some(n),
        ..expected(n * (n - 1) / 2, n, 0, 0, &flags, "uniform")
    });
    Ok(s)
}

pub fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

fn extended_zeta(n: usize) -> Expr {
    let zn = Expr::v(n - 1);
    (-(Expr::v(0) / zn.clone()) + kinetic(1..n - 1, Some(zn.pow(Expr::c(2.0))))).simplify()
}

/// Extended Euler in `z' = (G - |u|^2/2, u, -1)/T` with `zeta' = -z1/zn + |u'|^2/(2 zn^2)`
/// and `sigma'(xi, zn) = G(xi / zn^2, -1/zn)`; `gibbs` is `G(P, T)` in `(z1, z2)`.
pub fn euler_extended(n: usize, gibbs: Expr) -> Result<SystemDef> {
    if n < 3 {
        return Err(Error::Invalid("extended Euler needs n >= 3".into()));
    }
    gibbs.check_arity(2)?;
    let (xi, s) = (Expr::v(0), Expr::v(1));
    let sigma = gibbs
        .substitute(&[xi / s.clone().pow(Expr::c(2.0)), -(Expr::c(1.0) / s)])
        .simplify();
    let mut lower = vec![1.5];
    let mut upper = vec![4.0];
    for _ in 1..n - 1 {
        lower.push(-0.5);
        upper.push(0.5);
    }
    lower.push(-2.0);
    upper.push(-0.5);
    let guards = vec![-Expr::v(n - 1)];
    let dom = DomainBox::new(lower, upper, guards)?;
    let s = SystemDef::zsystem_eos(
        &format!("euler-extended-{n}"),
        extended_zeta(n),
        sigma,
        Some(Expr::v(n - 1)),
        dom,
        Sampling::default(),
        (XI_MIN, XI_MAX),
    )?;
    let mut s = s.with_e_h(unit(n, 0))?;
    s.provenance.push(format!("catalog euler-extended n={n} G={gibbs}"));
    s.expect = Some(Expected {
        closed: Some(true),
        ..expected(
            (n - 1) * (n - 2) / 2,
            n,
            1,
            0,
            &["C", "T", "ω*", "q", "I"],
            "hyperbolic-or-better",
        )
    });
    Ok(s)
}

/// Entropy-conserving Euler: isentropic `zeta` in `z_1..z_{n-1}`, `z_n = -T`, and
/// `sigma(xi, zn) = G(xi, -zn)`.
pub fn euler_entropy_conserving(n: usize, gibbs: Expr) -> Result<SystemDef> {
    if n < 3 {
        return Err(Error::Invalid("entropy-conserving Euler needs n >= 3".into()));
    }
    gibbs.check_arity(2)?;
    let sigma = gibbs.substitute(&[Expr::v(0), -Expr::v(1)]).simplify();
    let mut lower = vec![1.5];
    let mut upper = vec![4.0];
    for _ in 1..n - 1 {
        lower.push(-0.5);
        upper.push(0.5);
    }
    lower.push(-2.0);
    upper.push(-0.5);
    let guards = vec![-Expr::v(n - 1)];
    let dom = DomainBox::new(lower, upper, guards)?;
    let s = SystemDef::zsystem_eos(
        &format!("euler-entropy-conserving-{n}"),
        isentropic_zeta(n - 1),
        sigma,
        Some(Expr::v(n - 1)),
        dom,
        Sampling::default(),
        (XI_MIN, XI_MAX),
    )?;
    let mut s = s.with_e_h(unit(n, 0))?;
    s.provenance
        .push(format!("catalog euler-entropy-conserving n={n} G={gibbs}"));
    s.expect = Some(expected(
        (n - 1) * (n - 2) / 2,
        n - 1,
        0,
        1,
        &["W", "⊥", "T", "I*", "ω"],
        "hyperbolic-or-better",
    ));
    Ok(s)
}

/// `zeta = z1 + z2^2/2 + (z3^2 + z4^2)^2` with the gamma-law enthalpy.
pub fn gex_counterexample(gamma: f64) -> Result<SystemDef> {
    check_gamma(gamma)?;
    let (lo, hi) = (gamma_law_value(gamma, 0.5), gamma_law_value(gamma, 2.0));
    let quartic = (Expr::v(2).pow(Expr::c(2.0)) + Expr::v(3).pow(Expr::c(2.0))).pow(Expr::c(2.0));
    let zeta = (Expr::v(0) + Expr::c(0.5) * Expr::v(1).pow(Expr::c(2.0)) + quartic).simplify();
    let guards = vec![
        (zeta.clone() - Expr::c(lo)).simplify(),
        (Expr::c(hi) - zeta.clone()).simplify(),
    ];
    let dom = DomainBox::new(
        vec![lo - 0.5, -0.7, -0.5, -0.5],
        vec![hi, 0.7, 0.5, 0.5],
        guards,
    )?;
    let s = SystemDef::zsystem_eos(
        "gex-counterexample",
        zeta,
        gamma_law(gamma)?,
        None,
        dom,
        Sampling::default(),
        (XI_MIN, XI_MAX),
    )?;
    let mut s = s.with_e_h(unit(4, 0))?;
    s.provenance.push(format!("catalog gex-counterexample gamma={gamma}"));
    s.expect = Some(expected(2, 4, 0, 0, &["I*", "ω", "T*"], "hyperbolic-or-better"));
    Ok(s)
}

/// `zeta = z2 exp(-z1)` with the gamma-law enthalpy; not hyperbolic.
pub fn gdj_exponential(gamma: f64) -> Result<SystemDef> {
    check_gamma(gamma)?;
    let zeta = Expr::v(1) * (-Expr::v(0)).exp();
    let dom = DomainBox::new(vec![-0.5, 2.0], vec![0.5, 4.0], vec![])?;
    let mut s = SystemDef::zsystem_eos(
        "gdj-exponential",
        zeta,
        gamma_law(gamma)?,
        None,
        dom,
        Sampling::default(),
        (XI_MIN, XI_MAX),
    )?;
    s.provenance.push(format!("catalog gdj-exponential gamma={gamma}"));
    s.expect = Some(Expected {
        zero_dim: Some(1),
        verdict: Some("fails".into()),
        ..Default::default()
    });
    Ok(s)
}

/// Worst relative residuals of the entropy relations of a closed system with
/// `z_zeta = z_n`: `(literal, corrected)` where the literal form is
/// `q = -(sigma_s / (xi sigma_xi)) psi` and the corrected form is
/// `q = (z . xi_z / xi - 2) psi = -(sigma_s z_n / (xi sigma_xi) + 2) psi`.
pub fn extended_entropy_residuals(sys: &SystemDef, pts: &[Point]) -> Result<(f64, f64)> {
    let eos = sys
        .eos()
        .filter(|e| e.has_zzeta())
        .ok_or_else(|| Error::Invalid("entropy relation needs sigma(xi, z_zeta)".into()))?;
    let n = sys.n;
    let (mut lit, mut cor): (f64, f64) = (0.0, 0.0);
    for p in pts {
        let st = eos.state(p, 0)?;
        let ep = sys.entropy_at(p)?;
        let lam_lit = -st.sigma.fs / (st.xi * st.sigma.fx);
        let lam_cor = -(st.sigma.fs * p[n - 1] / (st.xi * st.sigma.fx) + 2.0);
        let qn = ep.q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pn = ep.psi.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = qn.max(pn).max(1e-300);
        let r = |lam: f64| -> f64 {
            ep.q.iter()
                .zip(&ep.psi)
                .map(|(q, s)| (q - lam * s).powi(2))
                .sum::<f64>()
                .sqrt()
                / scale
        };
        lit = lit.max(r(lam_lit));
        cor = cor.max(r(lam_cor));
    }
    Ok((lit, cor))
}

/// Worst residual of `a_in = -sigma_s a_i1` on the entropy-conserving system.
pub fn entropy_conserving_flux_residual(sys: &SystemDef, pts: &[Point]) -> Result<f64> {
    let eos = sys
        .eos()
        .filter(|e| e.has_zzeta())
        .ok_or_else(|| Error::Invalid("relation needs sigma(xi, z_zeta)".into()))?;
    let n = sys.n;
    let mut worst: f64 = 0.0;
    for p in pts {
        let st = eos.state(p, 0)?;
        let a = sys.flux_at(p)?;
        for i in 0..n {
            let r = a[(i, n - 1)] + st.sigma.fs * a[(i, 0)];
            worst = worst.max(r.abs() / (1.0 + a[(i, n - 1)].abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isentropic_u_zero_gives_zero_momentum_potential() {
        let s = euler_isentropic(2, 1.4).unwrap();
        let c = s.domain.center();
        let psi = s.psi_at(&c).unwrap();
        assert_eq!(psi[1], 0.0);
        assert!(psi[0] > 0.0);
    }

    #[test]
    fn isentropic_pressure_range() {
        let s = euler_isentropic(3, 1.4).unwrap();
        for p in s.samples().unwrap() {
            let xi = s.zvalues(&p).unwrap().xi;
            assert!((0.5..=2.0).contains(&xi), "{xi}");
        }
    }

    #[test]
    fn extended_zeta_is_gibbs() {
        let s = euler_extended(3, gibbs(3.5, 1.0).unwrap()).unwrap();
        let (p, t, u) = (1.3_f64, 0.8_f64, 0.2_f64);
        let g = 3.5 * t * (1.0 - t.ln()) + t * p.ln();
        let z = [(g - 0.5 * u * u) / t, u / t, -1.0 / t];
        let zv = s.zvalues(&z).unwrap();
        assert!((zv.zeta - g).abs() < 1e-12);
        assert!((zv.xi - p / (t * t)).abs() < 1e-10 * p, "{} vs {}", zv.xi, p / (t * t));
        let psi = s.psi_at(&z).unwrap();
        assert!((psi[0] - p / t).abs() < 1e-10 && (psi[1] - p * u / t).abs() < 1e-10);
        assert!((psi[2] - p / t * (g + 0.5 * u * u)).abs() < 1e-9);
    }

    #[test]
    fn bad_parameters() {
        assert!(euler_isentropic(3, 1.0).is_err());
        assert!(euler_extended(2, gibbs(3.5, 1.0).unwrap()).is_err());
        assert!(build("nope", Params::default()).is_err());
    }
}
