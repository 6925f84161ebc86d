use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn zsym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsym"))
        .args(args)
        .output()
        .expect("run zsym")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn catalog_spec(dir: &TempDir, id: &str, n: usize) -> PathBuf {
    let p = dir.path().join(format!("{id}-{n}.spec"));
    let o = zsym(&["catalog", id, "--n", &n.to_string(), "--out", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    p
}

fn json_of(args: &[&str]) -> Value {
    let o = zsym(args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json output")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_isentropic() {
    let d = TempDir::new().unwrap();
    let p = catalog_spec(&d, "euler-isentropic", 3);
    let v = json_of(&["--json", "analyze", s(&p)]);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["lambda"]["L"], 3);
    assert_eq!(v["symmetry"]["zero_dim"], 3);
    assert_eq!(v["system"]["spec_sha256"].as_str().unwrap().len(), 64);
    let w = json_of(&["--json", "--samples", "512", "--seed", "7", "analyze", s(&p)]);
    for k in ["total_dim", "zero_dim", "zeta_dim", "consts_dim"] {
        assert_eq!(v["symmetry"][k], w["symmetry"][k], "{k}");
    }
    assert_eq!(v["lambda"]["L"], w["lambda"]["L"]);
    assert_eq!(w["sampling"]["count"], 512);
}

#[test]
fn deterministic_reports() {
    let d = TempDir::new().unwrap();
    let p = catalog_spec(&d, "euler-extended", 3);
    let (a, b) = (d.path().join("a.json"), d.path().join("b.json"));
    let o1 = zsym(&["--json", "--seed", "11", "--out", s(&a), "analyze", s(&p)]);
    let o2 = zsym(&["--json", "--seed", "11", "--out", s(&b), "analyze", s(&p)]);
    assert_eq!(code(&o1), 0);
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&a).unwrap(), o1.stdout);
}

#[test]
fn malformed_spec_is_exit_2() {
    let d = TempDir::new().unwrap();
    let p = d.path().join("bad.spec");
    fs::write(
        &p,
        "[system]\nname = \"x\"\nkind = \"zsystem\"\nn = 2\n[zeta]\nexpr = \"z1 +\"\n[xi]\nexpr = \"1\"\n\
         [domain]\nlower = [0.0, 0.0]\nupper = [1.0, 1.0]\n",
    )
    .unwrap();
    let o = zsym(&["analyze", s(&p)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 6"), "{err}");
    assert_eq!(code(&zsym(&["analyze", "/nonexistent/x.spec"])), 2);
    assert_eq!(code(&zsym(&["frobnicate"])), 2);
}

#[test]
fn numerical_failure_is_exit_3() {
    let d = TempDir::new().unwrap();
    let p = catalog_spec(&d, "euler-isentropic", 3);
    let o = zsym(&["--samples", "3", "analyze", s(&p)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("insufficient samples"));
}

#[test]
fn catalog_entries_verify() {
    let d = TempDir::new().unwrap();
    let o = zsym(&["catalog"]);
    let ids: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect();
    assert!(ids.len() >= 6);
    for id in &ids {
        let p = catalog_spec(&d, id, 3);
        let o = zsym(&["verify", s(&p)]);
        assert_eq!(code(&o), 0, "{id}: {}", String::from_utf8_lossy(&o.stdout));
    }
    assert_eq!(code(&zsym(&["catalog", "no-such-entry"])), 2);
}

#[test]
fn tampered_zeta_fails_verify() {
    let d = TempDir::new().unwrap();
    let p = catalog_spec(&d, "euler-isentropic", 3);
    let text = fs::read_to_string(&p).unwrap();
    let t = text.replace("expr = \"z1 + (0.5*z2^2 + 0.5*z3^2)\"", "expr = \"z1 + (0.5*z2^2 + 0.5*z3^4)\"");
    assert_ne!(t, text);
    let q = d.path().join("tampered.spec");
    fs::write(&q, t).unwrap();
    let o = zsym(&["--json", "verify", s(&q)]);
    assert_eq!(code(&o), 1);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"expect-zero-dim"), "{failed:?}");
}

#[test]
fn transformed_specs_reverify() {
    let d = TempDir::new().unwrap();
    let ext = catalog_spec(&d, "euler-extended", 4);
    let ec = catalog_spec(&d, "euler-entropy-conserving", 3);
    let iso = catalog_spec(&d, "euler-isentropic", 3);
    let cases: Vec<(PathBuf, Vec<&str>)> = vec![
        (ext.clone(), vec!["--op", "reduce", "--c-e", "-1"]),
        (ec.clone(), vec!["--op", "exchange", "--c-e", "-1"]),
        (iso.clone(), vec!["--op", "qu", "--q", "1,0,0;0,0,1;0,1,0"]),
        (iso.clone(), vec!["--op", "zeta-f", "--f", "2*z1 + 1"]),
    ];
    for (k, (src, args)) in cases.iter().enumerate() {
        let out = d.path().join(format!("t{k}.spec"));
        let mut a = vec!["transform", s(src)];
        a.extend(args.iter().copied());
        a.extend(["--out", s(&out)]);
        let o = zsym(&a);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("# provenance: "), "{text}");
        let o = zsym(&["verify", s(&out)]);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stdout));
    }
    let o = zsym(&["transform", s(&ext), "--op", "reduce"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn couple_both_strategies() {
    let d = TempDir::new().unwrap();
    let iso2 = catalog_spec(&d, "euler-isentropic", 2);
    let iso3 = catalog_spec(&d, "euler-isentropic", 3);
    let a = d.path().join("a.spec");
    let o = zsym(&[
        "couple", s(&iso2), s(&iso2), "--strategy", "A", "--e-lambda", "0,1,0,-1", "--out", s(&a),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&zsym(&["verify", s(&a)])), 0);
    let b = d.path().join("b.spec");
    let o = zsym(&["couple", s(&iso3), s(&iso3), "--strategy", "B", "--b", "1,1;1,1", "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&b).unwrap().contains("kind = \"multi\""));
    assert_eq!(code(&zsym(&["verify", s(&b)])), 0);
    let o = zsym(&["couple", s(&iso3), s(&iso3), "--strategy", "B"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(code(&zsym(&["couple", s(&iso2), s(&iso2), "--strategy", "A"])), 2);
}

fn write_grid(p: &Path, dims: [usize; 2], h: f64, f: impl Fn(f64, f64) -> [f64; 2]) {
    let mut b = Vec::new();
    for v in [2u64, 2, dims[0] as u64, dims[1] as u64] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for _ in 0..2 {
        b.extend_from_slice(&h.to_le_bytes());
    }
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for x in f(i as f64 * h, j as f64 * h) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(p, b).unwrap();
}

#[test]
fn dissipation_commands() {
    let d = TempDir::new().unwrap();
    let g = d.path().join("f.bin");
    write_grid(&g, [4, 5], 0.5, |x, y| [x + 2.0 * y, 3.0 * y]);
    let v = json_of(&["--json", "dissipation", "value", s(&g)]);
    let s_val = 2.0 * (1.0 + 3.0);
    let vol = 1.5 * 2.0;
    assert!((v["integral"].as_f64().unwrap() - s_val * s_val * vol).abs() < 1e-9);
    assert!(v["min_nodal"].as_f64().unwrap() >= 0.0);
    let iso = catalog_spec(&d, "euler-isentropic", 3);
    let r = json_of(&["--json", "dissipation", "invariance", s(&iso)]);
    assert_eq!(r["invariance"]["scope"], "rotation-subspan");
    let bad = d.path().join("bad.bin");
    fs::write(&bad, [0u8; 7]).unwrap();
    assert_eq!(code(&zsym(&["dissipation", "value", s(&bad)])), 2);
}
