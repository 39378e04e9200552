use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn acnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acnp")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&acnp(&[])), 1);
    assert_eq!(code(&acnp(&["no-such-command"])), 1);
    assert_eq!(code(&acnp(&["gen", "--kind", "cube", "--points", "5", "--depth", "3"])), 1);
    assert_eq!(code(&acnp(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ply");
    let o = acnp(&["quantize", s(&missing), s(&dir.path().join("o.ply")), "--depth", "4"]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.ply");
    fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 x 3\n").unwrap();
    let o = acnp(&["quantize", s(&bad), s(&dir.path().join("o.ply")), "--depth", "4"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 8"));
    let junk = dir.path().join("junk.acnp");
    fs::write(&junk, b"NOPE").unwrap();
    let o = acnp(&["decode", s(&junk), s(&dir.path().join("o.ply")), "--uniform"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn demo_prints_equal_losses() {
    let o = acnp(&["demo-ce-paradox"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.matches("1.3219280949").count(), 3, "{out}");
    assert!(out.contains("4.9000"));
}

#[test]
fn quantize_gen_encode_decode_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.ply");
    fs::write(
        &raw,
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n1 1 1\n0.5 0.25 0.75\n",
    )
    .unwrap();
    let q = dir.path().join("q.ply");
    assert_eq!(code(&acnp(&["quantize", s(&raw), s(&q), "--depth", "3"])), 0);

    let g = dir.path().join("g.ply");
    let o = acnp(&["gen", "--kind", "sphere", "--points", "400", "--depth", "6", "--seed", "3", "--out", s(&g)]);
    assert_eq!(code(&o), 0);
    let o2 = acnp(&["gen", "--kind", "sphere", "--points", "400", "--depth", "6", "--seed", "3"]);
    assert_eq!(fs::read_to_string(&g).unwrap(), String::from_utf8_lossy(&o2.stdout));

    for input in [&q, &g] {
        let c = dir.path().join("c.acnp");
        let d = dir.path().join("d.ply");
        assert_eq!(code(&acnp(&["encode", s(input), s(&c), "--uniform"])), 0);
        assert_eq!(code(&acnp(&["decode", s(&c), s(&d), "--uniform"])), 0);
        assert_eq!(fs::read_to_string(input).unwrap(), fs::read_to_string(&d).unwrap());
    }
    // raw input needs a depth
    assert_eq!(code(&acnp(&["encode", s(&raw), s(&dir.path().join("x")), "--uniform"])), 2);
}

#[test]
fn train_encode_decode_bench_with_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("train.cfg");
    fs::write(
        &cfg,
        "# small and fast\nsynthetic = plane,sphere\nclouds = 2\npoints = 300\ndepth = 5\nepochs = 1\nbatch_size = 64\nattention_dim = 8\nhidden = 16\nseed = 4\n",
    )
    .unwrap();
    let a = p("a.ckpt");
    let o = acnp(&["--config", s(&cfg), "train-acnp", "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let base = p("base.ckpt");
    let enh = p("enh.ckpt");
    let extra = ["--aggregation-hidden", "16"];
    let o = acnp(&[&["--config", s(&cfg), "train-model", "--out", s(&base)][..], &extra].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = acnp(&[&["--config", s(&cfg), "train-model", "--out", s(&enh), "--acnp", s(&a)][..], &extra].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let crossed = p("crossed.ckpt");
    let o = acnp(&[&["--config", s(&cfg), "train-model", "--out", s(&crossed), "--acnp", s(&a), "--cross-fit", "2"][..], &extra].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&acnp(&["--config", s(&cfg), "train-model", "--out", s(&crossed), "--cross-fit", "2"])), 1);

    // command-line flags override the file: same seed gives the same bytes, a new one differs
    let again = p("again.ckpt");
    let other = p("other.ckpt");
    assert_eq!(code(&acnp(&[&["--config", s(&cfg), "train-model", "--out", s(&again)][..], &extra].concat())), 0);
    assert_eq!(fs::read(&base).unwrap(), fs::read(&again).unwrap());
    assert_eq!(code(&acnp(&[&["--config", s(&cfg), "train-model", "--out", s(&other), "--seed", "5"][..], &extra].concat())), 0);
    assert_ne!(fs::read(&base).unwrap(), fs::read(&other).unwrap());

    let g = p("g.ply");
    assert_eq!(code(&acnp(&["gen", "--kind", "plane", "--points", "300", "--depth", "5", "--seed", "99", "--out", s(&g)])), 0);
    let c = p("g.acnp");
    assert_eq!(code(&acnp(&["encode", s(&g), s(&c), "--model", s(&enh), "--acnp", s(&a)])), 0);
    // the wrong model is refused
    assert_eq!(code(&acnp(&["decode", s(&c), s(&p("x.ply")), "--model", s(&base)])), 2);
    assert_eq!(code(&acnp(&["decode", s(&c), s(&p("x.ply")), "--model", s(&enh), "--acnp", s(&a)])), 0);
    assert_eq!(fs::read_to_string(&g).unwrap(), fs::read_to_string(p("x.ply")).unwrap());
    let cc = p("g2.acnp");
    assert_eq!(code(&acnp(&["encode", s(&g), s(&cc), "--model", s(&crossed), "--acnp", s(&a)])), 0);
    assert_eq!(code(&acnp(&["decode", s(&cc), s(&p("y.ply")), "--model", s(&crossed), "--acnp", s(&a)])), 0);
    assert_eq!(fs::read_to_string(&g).unwrap(), fs::read_to_string(p("y.ply")).unwrap());

    let csv = p("bench.csv");
    let o = acnp(&[
        "bench",
        s(&g),
        "--model",
        &format!("base={}", s(&base)),
        "--model",
        &format!("acnp={}+{}", s(&enh), s(&a)),
        "--model",
        "uniform",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("acnp vs base") && table.contains("average"), "{table}");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("cloud,points,base_bpip"));

    // unknown config key is a usage error
    let bad = p("bad.cfg");
    fs::write(&bad, "bogus = 1\n").unwrap();
    assert_eq!(code(&acnp(&["--config", s(&bad), "demo-ce-paradox"])), 1);
}
