use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dyncontract::mechanism::Mechanism;
use dyncontract::model::ModelPrimitives;
use serde_json::Value;

const BASE: &str = r#"
[preferences]
family = "crra"
rho = 0.5
delta = 0.9

[types]
pi_hh = 0.8
pi_ll = 0.7
mu_l = 0.5

[income]
levels = [1.0, 4.0]
p_l = [0.4, 0.6]
p_h = [0.1, 0.9]
"#;

fn scenario(horizon: usize, extra: &str) -> String {
    format!("horizon = {horizon}\n{BASE}\n{extra}")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyncontract"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("DYNCONTRACT_THREADS")
        .output()
        .unwrap()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(k).unwrap().to_string())
        .collect()
}

fn floats(col: Vec<String>) -> Vec<f64> {
    col.iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn solve_writes_every_output() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, ""));
    let out = d.path().join("out");
    let o = run(&["solve"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "mechanism.txt",
        "dynamics.csv",
        "report.json",
        "plot_dynamics.gp",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let r = report(&out);
    assert_eq!(r["incentive_compatibility"]["pass"], true);
    assert_eq!(r["checks"]["structure"]["pass"], true);
    let m: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "solve");
    assert_eq!(m["files"].as_array().unwrap().len(), 4);
    assert!(m.get("threads").is_none());
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let d = tempfile::tempdir().unwrap();
    let text = scenario(2, "").replace("p_l = [0.4, 0.6]\n", "");
    let cfg = write_config(d.path(), &text);
    let o = run(&["solve"], &cfg, &d.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_l"));
}

#[test]
fn unknown_key_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, "[solve]\nv_hihg = 7.0\n"));
    let o = run(&["solve"], &cfg, &d.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("v_hihg"));
}

#[test]
fn infeasible_target_exits_3_with_certificate() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(2, "[solve]\nv_low = 6.0\nv_high = 30.0\n"),
    );
    let out = d.path().join("out");
    let o = run(&["solve"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    let r = report(&out);
    assert_eq!(r["status"], "infeasible");
    assert!(r["certificate"]["violation"].as_f64().unwrap() > 0.0);
}

#[test]
fn bounded_utility_premise_failure_exits_4() {
    let d = tempfile::tempdir().unwrap();
    let text = scenario(1, "").replace(
        "family = \"crra\"\nrho = 0.5",
        "family = \"cara\"\nalpha = 3.0",
    );
    let cfg = write_config(d.path(), &text);
    let o = run(&["equilibrium"], &cfg, &d.path().join("out"));
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn empty_grid_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(2, "[sweep]\nparameter = \"v_high\"\nvalues = []\n"),
    );
    let o = run(&["sweep"], &cfg, &d.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn equal_targets_give_zero_distortion() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(3, "[solve]\nv_low = 6.8\nv_high = 6.8\n"),
    );
    let out = d.path().join("out");
    assert!(run(&["solve"], &cfg, &out).status.success());
    let csv = std::fs::read_to_string(out.join("dynamics.csv")).unwrap();
    let delta = floats(csv_column(&csv, "delta"));
    assert_eq!(delta.len(), 7);
    assert!(delta.iter().all(|x| x.abs() <= 1e-12), "{delta:?}");
}

#[test]
fn realization_independent_dynamics_are_monotone() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(3, "[signals]\nmode = \"realization_independent\"\n"),
    );
    let out = d.path().join("out");
    assert!(run(&["solve"], &cfg, &out).status.success());
    let csv = std::fs::read_to_string(out.join("dynamics.csv")).unwrap();
    let nu = floats(csv_column(&csv, "nu"));
    let delta = floats(csv_column(&csv, "delta"));
    for t in 0..2 {
        assert!(nu[t + 1] - nu[t] >= 1e-6);
        assert!(delta[t] - delta[t + 1] >= 1e-6);
    }
}

fn solve_mechanism(dir: &Path, horizon: usize, extra: &str) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, &scenario(horizon, extra));
    let out = dir.join("solve");
    assert!(run(&["solve"], &cfg, &out).status.success());
    (cfg, out.join("mechanism.txt"))
}

#[test]
fn verify_accepts_solver_mechanism() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mech) = solve_mechanism(d.path(), 2, "");
    let out = d.path().join("verify");
    let o = run(
        &["verify", "--mechanism", mech.to_str().unwrap()],
        &cfg,
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["all_pass"], true);
    assert_eq!(r["ctm"]["result"], "strict");
}

#[test]
fn perturbed_low_report_contract_violates_only_the_parent_constraint() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mech) = solve_mechanism(d.path(), 2, "");
    let mut m = Mechanism::parse(&std::fs::read_to_string(&mech).unwrap()).unwrap();
    // Period 2 after signal 1, reports (h, l).
    for c in m.z_mut(2, 1, 0b10) {
        *c += 0.5;
    }
    let edited = d.path().join("edited.txt");
    std::fs::write(&edited, m.serialize()).unwrap();
    let out = d.path().join("verify");
    assert!(run(
        &["verify", "--mechanism", edited.to_str().unwrap()],
        &cfg,
        &out
    )
    .status
    .success());
    let r = report(&out);
    let violated: Vec<(u64, String)> = r["osic"]["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["violated"] == true)
        .map(|n| {
            (
                n["t"].as_u64().unwrap(),
                n["signals"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    assert_eq!(violated, vec![(1, "-".to_string())]);
    assert_eq!(r["incentive_compatibility"]["pass"], false);
    assert_eq!(r["flow_monotonicity"]["pass"], true);
}

#[test]
fn perturbed_high_report_contract_violates_its_own_node() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mech) = solve_mechanism(d.path(), 2, "");
    let mut m = Mechanism::parse(&std::fs::read_to_string(&mech).unwrap()).unwrap();
    // Last period after signal 0, reports (h, h): only the period-2 deviation sees it first-hand.
    for c in m.z_mut(2, 0, 0b11) {
        *c += 0.5;
    }
    let edited = d.path().join("edited.txt");
    std::fs::write(&edited, m.serialize()).unwrap();
    let out = d.path().join("verify");
    assert!(run(
        &["verify", "--mechanism", edited.to_str().unwrap()],
        &cfg,
        &out
    )
    .status
    .success());
    let r = report(&out);
    let nodes = r["osic"]["nodes"].as_array().unwrap();
    let at = |t: u64, s: &str| {
        nodes
            .iter()
            .find(|n| n["t"].as_u64() == Some(t) && n["signals"] == s)
            .unwrap()["violated"]
            .as_bool()
            .unwrap()
    };
    assert!(at(2, "0"));
    assert!(!at(2, "1"));
}

#[test]
fn constant_mechanism_passes_ic_but_ctm_is_not_strict() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, ""));
    let m = Mechanism::constant(&ModelPrimitives::fixture(), 2, 2.5);
    let path = d.path().join("constant.txt");
    std::fs::write(&path, m.serialize()).unwrap();
    let out = d.path().join("verify");
    assert!(run(
        &["verify", "--mechanism", path.to_str().unwrap()],
        &cfg,
        &out
    )
    .status
    .success());
    let r = report(&out);
    assert_eq!(r["incentive_compatibility"]["pass"], true);
    assert_eq!(r["ctm"]["result"], "not strict");
    assert_eq!(r["all_pass"], false);
}

#[test]
fn shape_mismatch_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let (_, mech) = solve_mechanism(d.path(), 2, "");
    let ri = d.path().join("ri");
    std::fs::create_dir(&ri).unwrap();
    let cfg = write_config(
        &ri,
        &scenario(2, "[signals]\nmode = \"realization_independent\"\n"),
    );
    let o = run(
        &["verify", "--mechanism", mech.to_str().unwrap()],
        &cfg,
        &d.path().join("verify"),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn near_total_low_share_admits_pure_equilibrium() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(2, "").replace("mu_l = 0.5", "mu_l = 0.99"),
    );
    let out = d.path().join("out");
    assert!(run(&["equilibrium"], &cfg, &out).status.success());
    let r = report(&out);
    assert_eq!(r["equilibrium"]["existence"]["exists_pure"], true);
    assert!(r["equilibrium"]["zero_profit_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn commitment_table_passes_with_absorbing_low_type() {
    let d = tempfile::tempdir().unwrap();
    let text = scenario(
        3,
        "[signals]\nmode = \"realization_independent\"\n\n[equilibrium]\ncommitment = true\n",
    )
    .replace("pi_ll = 0.7", "pi_ll = 1.0");
    let cfg = write_config(d.path(), &text);
    let out = d.path().join("out");
    assert!(run(&["equilibrium"], &cfg, &out).status.success());
    assert_eq!(report(&out)["commitment"]["all_pass"], true);
}

#[test]
fn commitment_flag_without_absorbing_type_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, "[equilibrium]\ncommitment = true\n"));
    let o = run(&["equilibrium"], &cfg, &d.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn monopoly_report_agrees_with_rent_condition() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, ""));
    let out = d.path().join("out");
    assert!(run(&["monopoly"], &cfg, &out).status.success());
    let r = report(&out);
    assert_eq!(r["rent_check_agrees"], true);
    assert!(out.join("mechanism_monopoly.txt").exists());
}

#[test]
fn high_target_sweep_has_decreasing_high_profit() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(
            2,
            "[sweep]\nparameter = \"v_high\"\nvalues = [6.6, 6.7, 6.8, 6.9, 7.0, 7.1]\n",
        ),
    );
    let out = d.path().join("out");
    assert!(run(&["sweep"], &cfg, &out).status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let ph = floats(csv_column(&csv, "profit_high"));
    assert_eq!(ph.len(), 6);
    assert!(ph.windows(2).all(|w| w[1] < w[0]), "{ph:?}");
}

#[test]
fn rho_sweep_reports_supermodularity_certificates() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(2, "[sweep]\nparameter = \"rho\"\nvalues = [0.5, 0.8]\n"),
    );
    let out = d.path().join("out");
    assert!(run(&["sweep"], &cfg, &out).status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(
        csv_column(&csv, "certificate"),
        vec!["ZeroPsi3", "PositivePsi3"]
    );
}

#[test]
fn sweep_failures_are_recorded_and_the_sweep_continues() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(
            2,
            "[sweep]\nparameter = \"v_high\"\nvalues = [6.8, 40.0, 6.9]\n",
        ),
    );
    let out = d.path().join("out");
    assert!(run(&["sweep"], &cfg, &out).status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv_column(&csv, "status"), vec!["ok", "failed", "ok"]);
    assert_eq!(csv_column(&csv, "exit_code"), vec!["0", "3", "0"]);
}

fn strip_wall_time(s: &str) -> String {
    s.lines()
        .filter(|l| !l.contains("wall_time_s"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn assert_same_outputs(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        let x = std::fs::read_to_string(a.join(&n)).unwrap();
        let y = std::fs::read_to_string(b.join(&n)).unwrap();
        if n == "manifest.json" {
            assert_eq!(strip_wall_time(&x), strip_wall_time(&y));
        } else {
            assert_eq!(x, y, "{n:?}");
        }
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        &scenario(
            2,
            "[sweep]\nparameter = \"v_high\"\nvalues = [6.6, 6.7, 6.8, 6.9, 7.0, 7.1, 7.15]\n",
        ),
    );
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert!(run(&["sweep", "--threads", "1"], &cfg, &a).status.success());
    assert!(run(&["sweep", "--threads", "4"], &cfg, &b).status.success());
    assert_same_outputs(&a, &b);
}

#[test]
fn thread_count_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &scenario(2, ""));
    let o = Command::new(env!("CARGO_BIN_EXE_dyncontract"))
        .args(["solve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("out"))
        .env("DYNCONTRACT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
