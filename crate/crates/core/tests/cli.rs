use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_irt-trend"));
    cmd.arg("--quiet");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_cohort(dir: &Path) {
    ok(
        dir,
        &["simulate", "--seed", "5", "--n-students", "150", "--n-tests", "6", "--items-per-test", "4"],
    );
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn column(text: &str, col: usize) -> Vec<String> {
    text.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().to_owned()).collect()
}

#[test]
fn simulate_writes_cohort_and_is_repeatable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["simulate", "--seed", "42", "--n-tests", "14", "--items-per-test", "5"]);
    ok(b.path(), &["simulate", "--seed", "42", "--n-tests", "14", "--items-per-test", "5"]);
    for name in ["matrix.csv", "labels.csv", "theta_true.csv", "items_true.csv", "manifest_simulate.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let matrix = read(a.path(), "matrix.csv");
    let header = matrix.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 71);
    assert!(header.starts_with("student_id,L01-Q1,"));
    assert_eq!(matrix.lines().count(), 1128);
    assert_eq!(read(a.path(), "labels.csv").lines().next(), Some("student_id,passed"));
    let manifest = read(a.path(), "manifest_simulate.json");
    assert!(manifest.contains("\"sha256\""));
    assert!(!manifest.contains(&*a.path().to_string_lossy()));
}

#[test]
fn calibrate_logs_monotone_likelihood_and_respects_policy() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    ok(dir.path(), &["calibrate"]);
    let log = read(dir.path(), "convergence.csv");
    assert!(log.starts_with("iteration,log_likelihood,gain,standardization\n"));
    let ll: Vec<f64> = column(&log, 1).iter().map(|s| s.parse().unwrap()).collect();
    assert!(ll.len() >= 2);
    assert!(ll.windows(2).all(|w| w[1] >= w[0]), "{ll:?}");
    assert_eq!(read(dir.path(), "items.csv").lines().next(), Some("item_id,a,b,flag"));
    assert_eq!(read(dir.path(), "abilities.csv").lines().count(), 151);

    let missing = tempfile::tempdir().unwrap();
    ok(
        missing.path(),
        &["calibrate", "--matrix", dir.path().join("matrix.csv").to_str().unwrap(), "--policy", "as-missing"],
    );
    assert_ne!(read(dir.path(), "abilities.csv"), read(missing.path(), "abilities.csv"));
}

#[test]
fn trend_kinds_coincide_at_first_unit() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    ok(dir.path(), &["trend", "--kind", "cumulative", "--k-range", "1..1"]);
    ok(dir.path(), &["trend", "--kind", "per-unit", "--k-range", "1..1"]);
    let cum = read(dir.path(), "trend_cumulative.csv");
    let per = read(dir.path(), "trend_per_unit.csv");
    assert_eq!(cum, per);
    assert_eq!(cum.lines().next(), Some("student_id,theta_1,theta_2,theta_3,theta_4,theta_5,theta_6"));
    assert!(column(&cum, 2).iter().all(|v| v == "NA"));

    ok(dir.path(), &["trend", "--kind", "cumulative", "--k-range", "1..5"]);
    let cum = read(dir.path(), "trend_cumulative.csv");
    assert!(column(&cum, 5).iter().all(|v| v != "NA"));
    assert!(column(&cum, 6).iter().all(|v| v == "NA"));
}

#[test]
fn predict_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    ok(dir.path(), &["calibrate"]);
    ok(dir.path(), &["trend"]);
    ok(dir.path(), &["predict", "--k", "3,6", "--mode", "loo", "--n-neighbors", "1"]);
    let preds = read(dir.path(), "predictions_3.csv");
    assert_eq!(preds.lines().next(), Some("student_id,k,mu,p_fail,neighbor_ids"));
    assert!(column(&preds, 2).iter().all(|m| m == "0" || m == "1"));

    ok(dir.path(), &["predict", "--k", "3,6"]);
    let preds = read(dir.path(), "predictions_6.csv");
    assert!(preds.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().split(';').count() == 10));

    ok(dir.path(), &["evaluate", "--k", "3,6", "--cutoffs", "0.3,0.4,0.5", "--emit-svg"]);
    for k in [3, 6] {
        for c in ["0.3", "0.4", "0.5"] {
            let table = read(dir.path(), &format!("confusion_{k}_{c}.csv"));
            assert!(table.starts_with("observed,predicted_failed,predicted_successful,total\nfailed,"));
        }
        assert!(read(dir.path(), &format!("roc_{k}.csv")).starts_with("threshold,fpr,tpr,tp,fp,tn,fn\ninf,0,0,"));
        assert!(read(dir.path(), &format!("pr_{k}.csv")).starts_with("threshold,recall,precision,"));
        assert!(read(dir.path(), &format!("roc_{k}.svg")).starts_with("<svg"));
        let bars = read(dir.path(), &format!("bars_{k}.csv"));
        let counts: Vec<usize> = column(&bars, 1).iter().map(|s| s.parse().unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }
    assert_eq!(read(dir.path(), "summary.csv").lines().count(), 7);
    let stump = read(dir.path(), "stump.csv");
    assert!(stump.starts_with("threshold,errors,misclassification,hitting_ratio,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    ok(dir.path(), &["trend"]);

    // Usage errors.
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["trend", "--kind", "sideways"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["trend", "--k-range", "3..1"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[irt]\ntolerance = \"tight\"\n").unwrap();
    assert_eq!(
        run(dir.path(), &["--config", cfg.to_str().unwrap(), "calibrate"]).status.code(),
        Some(1)
    );

    // Data errors.
    let out = run(dir.path(), &["predict", "--k", "3", "--labels", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "student_id,L1-a,L1-b\ns1,1,2\n").unwrap();
    let out = run(dir.path(), &["calibrate", "--matrix", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2, column 3"));
    assert_eq!(run(dir.path(), &["trend", "--k-range", "1..9"]).status.code(), Some(2));
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[simulate]\nseed = 9\nn_students = 30\nn_tests = 3\nitems_per_test = 2\n").unwrap();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "simulate"]);
    assert_eq!(read(dir.path(), "matrix.csv").lines().count(), 31);
    ok(dir.path(), &["--config", c, "simulate", "--n-students", "12"]);
    assert_eq!(read(dir.path(), "matrix.csv").lines().count(), 13);
    let manifest = read(dir.path(), "manifest_simulate.json");
    assert!(manifest.contains("\"seed\": 9"));
    assert!(manifest.contains("\"n_students\": 12"));
}
