//! `zsym`: analyze, transform, couple and verify systems of conservation laws described by
//! spec files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use zsym::catalog::{self, Params};
use zsym::coupling::{self, CouplingSpecA};
use zsym::dissipation::{self, DiscreteField, DissipationForm};
use zsym::linalg::{self, DenseMatrix};
use zsym::report::{self, Options};
use zsym::{specfile, symmetry, transforms, Expr, SystemDef};

/// Exit code for a spec or argument error.
const EXIT_SPEC: u8 = 2;
/// Exit code for a numerical failure.
const EXIT_NUMERIC: u8 = 3;
/// Exit code when `verify` finds a failing check.
const EXIT_VERIFY: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "zsym", version, about = "Symmetry and hyperbolicity analysis of Z-systems")]
struct Cli {
    /// Solver tolerance for the sampled symmetry constraints.
    #[arg(long, global = true, default_value_t = report::DEFAULT_SOLVER_TOL)]
    tol: f64,
    /// Number of sample points (default: from the spec).
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Sampling seed (default: from the spec).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the machine-readable document instead of the table view.
    #[arg(long, global = true)]
    json: bool,
    /// Also write the output to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Op {
    Qu,
    Reduce,
    Exchange,
    ZetaF,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run symmetry, classification and hyperbolicity on a spec.
    Analyze { spec: PathBuf },
    /// Run the invariant suite and recorded expectations; exit 1 on any failure.
    Verify { spec: PathBuf },
    /// Apply a transformation and emit the image spec.
    Transform {
        spec: PathBuf,
        #[arg(long, value_enum)]
        op: Op,
        /// Matrix for `qu`, rows separated by `;`.
        #[arg(long)]
        q: Option<String>,
        /// 1-based component for `exchange` (default: n).
        #[arg(long)]
        axis: Option<usize>,
        /// Constant for `reduce` and `exchange`.
        #[arg(long, allow_hyphen_values = true)]
        c_e: Option<f64>,
        /// Function of `z1` for `zeta-f`.
        #[arg(long, allow_hyphen_values = true)]
        f: Option<String>,
        /// Skip recording the image's analysed dimensions as expectations.
        #[arg(long)]
        no_expect: bool,
    },
    /// Couple two or more specs and emit the coupled spec.
    Couple {
        #[arg(required = true, num_args = 1..)]
        specs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Constraint direction on the block variable (strategy A).
        #[arg(long, allow_hyphen_values = true)]
        e_lambda: Option<String>,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        c_lambda: f64,
        /// Mixing matrix, rows separated by `;` (strategy B).
        #[arg(long, allow_hyphen_values = true)]
        b: Option<String>,
        #[arg(long)]
        no_expect: bool,
    },
    /// Emit a catalog entry as a spec file.
    Catalog {
        /// Entry id; omit to list the ids.
        id: Option<String>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = catalog::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = catalog::DEFAULT_CP)]
        cp: f64,
        #[arg(long, default_value_t = catalog::DEFAULT_R)]
        r: f64,
    },
    /// Dissipation form: invariance under a spec's generators, or its value on grid fields.
    Dissipation {
        #[command(subcommand)]
        what: DissCmd,
    },
}

#[derive(Subcommand, Debug)]
enum DissCmd {
    /// `A~` for every `{.}_0` generator of the spec.
    Invariance {
        spec: PathBuf,
        /// Symmetric matrix `A`, rows separated by `;` (default: identity).
        #[arg(long, allow_hyphen_values = true)]
        a: Option<String>,
    },
    /// `D(z, theta)` per node and integrated, for binary grid fields.
    Value {
        field: PathBuf,
        /// Test function grid (default: the field itself).
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        a: Option<String>,
    },
}

/// An error in the command line or in an input file.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(InputError(msg.into()))
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| input(format!("bad number `{x}`: {e}")))
        })
        .collect()
}

fn parse_matrix(s: &str) -> Result<DenseMatrix> {
    let rows = s.split(';').map(parse_vector).collect::<Result<Vec<_>>>()?;
    linalg::from_rows(&rows).map_err(|e| input(e.to_string()))
}

struct Loaded {
    text: String,
    sys: SystemDef,
}

fn load(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path)
        .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let sys = specfile::parse(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(Loaded { text, sys })
}

fn options(cli: &Cli) -> Options {
    Options {
        tol: cli.tol,
        samples: cli.samples,
        seed: cli.seed,
    }
}

fn emit_text(cli: &Cli, text: &str) -> Result<()> {
    if let Some(p) = &cli.out {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn emit_doc(cli: &Cli, doc: &Value) -> Result<()> {
    let machine = report::to_json_string(doc);
    if let Some(p) = &cli.out {
        fs::write(p, &machine).with_context(|| format!("writing {}", p.display()))?;
    }
    let shown = if cli.json {
        machine
    } else {
        report::render_table(doc)
    };
    io::stdout().write_all(shown.as_bytes())?;
    Ok(())
}

fn finish_spec(cli: &Cli, mut sys: SystemDef, no_expect: bool) -> Result<()> {
    if !no_expect {
        let a = report::run(&sys, &options(cli))?;
        report::record_expectations(&mut sys, &a);
    }
    emit_text(cli, &specfile::emit(&sys)?)
}

fn analyze(cli: &Cli, spec: &Path) -> Result<u8> {
    let l = load(spec)?;
    let doc = report::analyze(&l.sys, Some(&l.text), &options(cli))?;
    emit_doc(cli, &doc)?;
    Ok(0)
}

fn verify(cli: &Cli, spec: &Path) -> Result<u8> {
    let l = load(spec)?;
    let a = report::run(&l.sys, &options(cli))?;
    let checks = report::verify(&l.sys, &a)?;
    let doc = report::verify_json(&l.sys, &checks);
    if cli.json {
        emit_doc(cli, &doc)?;
    } else {
        let mut s = String::new();
        for c in &checks {
            s.push_str(&format!(
                "{:<4} {:<28} {}\n",
                if c.pass { "ok" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        if let Some(p) = &cli.out {
            fs::write(p, report::to_json_string(&doc))?;
        }
        io::stdout().write_all(s.as_bytes())?;
    }
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { EXIT_VERIFY })
}

#[allow(clippy::too_many_arguments)]
fn transform(
    cli: &Cli,
    spec: &Path,
    op: Op,
    q: Option<&str>,
    axis: Option<usize>,
    c_e: Option<f64>,
    f: Option<&str>,
    no_expect: bool,
) -> Result<u8> {
    let l = load(spec)?;
    let sys = &l.sys;
    let need_c = || c_e.ok_or_else(|| input("--c-e is required for this operation"));
    let t = match op {
        Op::Qu => {
            let q = q.ok_or_else(|| input("--q is required for qu"))?;
            transforms::t_qu(sys, &parse_matrix(q)?)?
        }
        Op::Reduce => transforms::t_reduce(sys, need_c()?)?,
        Op::Exchange => {
            let k = axis.unwrap_or(sys.n);
            if k == 0 || k > sys.n {
                bail!(input(format!("--axis must be in 1..={}", sys.n)));
            }
            transforms::t_exchange(sys, k - 1, need_c()?)?
        }
        Op::ZetaF => {
            let f = f.ok_or_else(|| input("--f is required for zeta-f"))?;
            let e = Expr::parse(f, 1).map_err(|e| input(format!("--f: {e}")))?;
            transforms::t_zeta_f(sys, &e)?
        }
    };
    finish_spec(cli, t.system, no_expect)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn couple(
    cli: &Cli,
    specs: &[PathBuf],
    strategy: Strategy,
    e_lambda: Option<&str>,
    c_lambda: f64,
    b: Option<&str>,
    no_expect: bool,
) -> Result<u8> {
    let cs = specs
        .iter()
        .map(|p| load(p).map(|l| l.sys))
        .collect::<Result<Vec<_>>>()?;
    let sys = match strategy {
        Strategy::A => {
            let e = e_lambda.ok_or_else(|| input("--e-lambda is required for strategy A"))?;
            coupling::couple_a(&CouplingSpecA {
                constituents: cs,
                e_lambda: parse_vector(e)?,
                c_lambda,
            })?
            .system
        }
        Strategy::B => {
            let b = match b {
                Some(s) => parse_matrix(s)?,
                None => DenseMatrix::identity(cs.len(), cs.len()),
            };
            let c = coupling::couple_b(&cs, &b)?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            c.system
        }
    };
    finish_spec(cli, sys, no_expect)?;
    Ok(0)
}

fn cmd_catalog(cli: &Cli, id: Option<&str>, p: Params) -> Result<u8> {
    match id {
        None => {
            let mut s = String::new();
            for id in catalog::IDS {
                s.push_str(id);
                s.push('\n');
            }
            emit_text(cli, &s)?;
        }
        Some(id) => emit_text(cli, &specfile::emit(&catalog::build(id, p)?)?)?,
    }
    Ok(0)
}

fn form(a: Option<&str>, n: usize) -> Result<DissipationForm> {
    match a {
        None => Ok(DissipationForm::identity(n)),
        Some(s) => Ok(DissipationForm::new(parse_matrix(s)?)?),
    }
}

fn read_grid(p: &Path) -> Result<DiscreteField> {
    let bytes = fs::read(p).map_err(|e| input(format!("cannot read {}: {e}", p.display())))?;
    DiscreteField::read_from(&mut bytes.as_slice()).map_err(|e| input(format!("{}: {e}", p.display())))
}

fn dissipation_cmd(cli: &Cli, what: &DissCmd) -> Result<u8> {
    let doc = match what {
        DissCmd::Invariance { spec, a } => {
            let l = load(spec)?;
            let opts = options(cli);
            let pts = l.sys.samples_with(opts.sampling(&l.sys))?;
            let space = symmetry::solve(&l.sys, &pts, opts.tol)?;
            let f = form(a.as_deref(), l.sys.n)?;
            let r = dissipation::invariance_check(&f, &space)?;
            let zs: Vec<DenseMatrix> = space.zero.iter().map(|g| g.z.clone()).collect();
            let commuting = if zs.is_empty() {
                Vec::new()
            } else {
                dissipation::commuting_forms(&zs, 1e-10)?.0
            };
            json!({
                "schema": report::SCHEMA,
                "system": l.sys.name,
                "spec_sha256": specfile::spec_hash(&l.text),
                "A": linalg::to_rows(f.matrix()),
                "invariance": serde_json::to_value(&r)?,
                "invariant_basis": (0..r.invariant_span.dim()).map(|k| r.invariant_span.column(k)).collect::<Vec<_>>(),
                "commuting_forms": commuting.iter().map(linalg::to_rows).collect::<Vec<_>>(),
            })
        }
        DissCmd::Value { field, theta, a } => {
            let f = read_grid(field)?;
            let t = match theta {
                Some(p) => read_grid(p)?,
                None => f.clone(),
            };
            let v = dissipation::dissipation_value(&form(a.as_deref(), f.n)?, &f, &t)?;
            let min = v.nodal.iter().copied().fold(f64::INFINITY, f64::min);
            json!({
                "schema": report::SCHEMA,
                "nodes": v.nodal.len(),
                "integral": v.integral,
                "min_nodal": min,
                "nodal": v.nodal,
            })
        }
    };
    emit_doc(cli, &report::canonical(doc))?;
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    if !(cli.tol > 0.0) {
        bail!(input("--tol must be positive"));
    }
    if cli.samples == Some(0) {
        bail!(input("--samples must be positive"));
    }
    match &cli.cmd {
        Cmd::Analyze { spec } => analyze(cli, spec),
        Cmd::Verify { spec } => verify(cli, spec),
        Cmd::Transform {
            spec,
            op,
            q,
            axis,
            c_e,
            f,
            no_expect,
        } => transform(cli, spec, *op, q.as_deref(), *axis, *c_e, f.as_deref(), *no_expect),
        Cmd::Couple {
            specs,
            strategy,
            e_lambda,
            c_lambda,
            b,
            no_expect,
        } => couple(cli, specs, *strategy, e_lambda.as_deref(), *c_lambda, b.as_deref(), *no_expect),
        Cmd::Catalog { id, n, gamma, cp, r } => cmd_catalog(
            cli,
            id.as_deref(),
            Params {
                n: *n,
                gamma: *gamma,
                cp: *cp,
                r: *r,
            },
        ),
        Cmd::Dissipation { what } => dissipation_cmd(cli, what),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return EXIT_SPEC;
        }
        if let Some(z) = cause.downcast_ref::<zsym::Error>() {
            return if z.is_spec_error() { EXIT_SPEC } else { EXIT_NUMERIC };
        }
    }
    EXIT_NUMERIC
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
