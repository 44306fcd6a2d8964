use std::process::Command;

fn ktsim(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ktsim")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn lists_bundled_scenarios() {
    let (code, out, _) = ktsim(&["list-scenarios"]);
    assert_eq!(code, 0);
    assert!(out.contains("akm_c1_m10"));
    assert!(out.contains("honest_1000e"));
}

#[test]
fn predict_is_exact() {
    let (code, out, _) = ktsim(&["predict", "--defense", "akm", "--params", "c=1,m=10"]);
    assert_eq!(code, 0);
    assert!(out.contains("1023/1024"), "{out}");
    let (_, out, _) = ktsim(&["predict", "--defense", "ktca", "--params", "diameter=5,delta=1"]);
    assert!(out.contains("= 12"), "{out}");
}

#[test]
fn config_errors_exit_2() {
    let (code, _, err) = ktsim(&["run", "no_such_scenario"]);
    assert_eq!(code, 2);
    assert!(err.contains("no_such_scenario"));
    let (code, _, err) = ktsim(&["predict", "--defense", "akm", "--params", "c=1"]);
    assert_eq!(code, 2);
    assert!(err.contains("\"m\""), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "name='x'\ndefense='ktca'\nepochs=2\n[topology]\nkind='ring'\nn=4\nsize=3\n[clock]\nepoch_len=20000\ndelta=1000\nbig_delta=2000\n",
    )
    .unwrap();
    let (code, _, err) = ktsim(&["run", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("size"), "{err}");
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let (code, stdout, _) = ktsim(&[
            "run",
            "short_lived_ktca",
            "--trials",
            "10",
            "--seed",
            "3",
            "--format",
            "json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let file = std::fs::read_to_string(out.join("metrics.json")).unwrap();
        assert_eq!(stdout, file);
        assert!(out.join("trials.csv").exists() && out.join("summary.txt").exists());
        metrics.push((file, std::fs::read(out.join("trials.csv")).unwrap()));
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn violated_predictions_exit_1() {
    // An honest server never produces a hard detection, so expecting one fails.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.toml");
    std::fs::write(
        &path,
        "name='wrong'\ndefense='ktca'\nepochs=2\n[topology]\nkind='ring'\nn=4\n\
         [clock]\nepoch_len=20000\ndelta=1000\nbig_delta=2000\n\
         [[expect]]\nmetric='core_false_positives'\nvalue=1.0\n",
    )
    .unwrap();
    let (code, out, _) = ktsim(&["run", path.to_str().unwrap()]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("VIOLATED"), "{out}");
}

#[test]
fn account_reports_both_sides() {
    let (code, out, _) = ktsim(&["account", "accounting_reference"]);
    assert_eq!(code, 0);
    assert!(
        out.contains("7136") && out.contains("33952") && out.contains("33.96"),
        "{out}"
    );
    assert!(out.contains("str_exchange"), "{out}");
}
