use std::path::Path;
use std::process::Command;

fn dfcast(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dfcast"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn staged_pipeline_round_trips_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dfcast(&[
        "generate",
        "--system",
        "lorenz63",
        "--n",
        "400",
        "--nv",
        "30",
        "--tau",
        "0.1",
        "--seed",
        "2",
        "--obs-var",
        "1",
        "--out",
        &p(d, ""),
    ]);
    dfcast(&[
        "build-operator",
        "--in",
        &p(d, "train.dfts"),
        "--epsilon",
        "auto",
        "--knn",
        "0",
        "--out",
        &p(d, "op.dfm"),
    ]);
    dfcast(&[
        "basis",
        "--op",
        &p(d, "op.dfm"),
        "--me",
        "5",
        "--mq",
        "20",
        "--select",
        "random:1",
        "--out",
        &p(d, "basis.dfm"),
    ]);
    dfcast(&[
        "propagator",
        "--basis",
        &p(d, "basis.dfm"),
        "--train",
        &p(d, "train.dfts"),
        "--out",
        &p(d, "prop.dfm"),
    ]);
    dfcast(&[
        "filter-init",
        "--op",
        &p(d, "op.dfm"),
        "--basis",
        &p(d, "basis.dfm"),
        "--prop",
        &p(d, "prop.dfm"),
        "--obs",
        &p(d, "obs.dfts"),
        "--obs-var",
        "1",
        "--spinup",
        "10",
        "--out",
        &p(d, "states.dfm"),
    ]);
    let states = dfcast::io::read_matrix(d.join("states.dfm")).unwrap();
    assert_eq!(states.shape(), (30, 25));
    dfcast(&[
        "ensemble",
        "--system",
        "lorenz63",
        "--obs",
        &p(d, "obs.dfts"),
        "--obs-var",
        "1",
        "--members",
        "10",
        "--leads",
        "2",
        "--out",
        &p(d, "ens.csv"),
    ]);
    let csv = std::fs::read_to_string(d.join("ens.csv")).unwrap();
    assert!(csv.starts_with("n,lead,coord,mean,second\n10,0,0,"));
    // 20 scored points, 3 leads, 3 coordinates.
    assert_eq!(csv.lines().count(), 1 + 20 * 3 * 3);
}

#[test]
fn evaluate_and_bench_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = format!(
        "system = \"lorenz96\"\nn = 500\nnv = 20\ntau = 0.05\nleads = 2\nout_dir = \"{}\"\n\
         [[basis.variants]]\nme = 10\nmq = 10\n",
        p(d, "run")
    );
    std::fs::write(d.join("exp.toml"), cfg).unwrap();
    let report = dfcast(&["evaluate", "--config", &p(d, "exp.toml")]);
    assert!(report.contains("me10_mq10: lead0"));
    assert!(d.join("run/manifest.txt").exists());
    let bench = dfcast(&["bench", "--sizes", "300", "--ms", "5,10", "--trials", "1"]);
    assert_eq!(bench.lines().count(), 3);
    assert!(bench.starts_with("n,m,qr_seconds,eig_seconds\n300,5,"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let out = Command::new(env!("CARGO_BIN_EXE_dfcast"))
        .args([
            "basis",
            "--op",
            "/nonexistent/op.dfm",
            "--me",
            "3",
            "--out",
            "/tmp/x.dfm",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = Command::new(env!("CARGO_BIN_EXE_dfcast"))
        .args([
            "generate", "--system", "venus", "--n", "5", "--out", "/tmp/x",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
