use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kftune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kftune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn lines(file: &Path) -> Vec<String> {
    fs::read_to_string(file)
        .expect("readable")
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn tune_writes_tables_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tune");
    let res = kftune(&["tune", "--set", "tuning.max_iters=4", "--out", &out.display().to_string()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let costs = lines(&out.join("costs.csv"));
    assert_eq!(costs.len(), 5);
    assert!(costs[0].starts_with("iteration,J0,J1,J2,J3,J4,J5,J6,J7,J8,reg_s1"));
    let overlay = lines(&out.join("overlay.csv"));
    assert_eq!(overlay.len(), 101);
    assert_eq!(overlay[0], "t,z_0,hd_0,hpost_0,hsmooth_0,z_1,hd_1,hpost_1,hsmooth_1");
    let trace = lines(&out.join("trace.csv"));
    assert_eq!(trace.len(), 4 * 100 + 1);
    assert_eq!(lines(&out.join("statistics.csv")).len(), 5);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["job"], "tune");
    assert_eq!(manifest["config"]["tuning"]["max_iters"], 4);
    assert_eq!(manifest["streams"][0]["noise"], 0);
    assert_eq!(manifest["streams"][0]["perturb"], 1);
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!text.contains("time"), "manifest must not carry timestamps");

    let summary = kftune(&["report", &out.display().to_string()]);
    assert!(summary.status.success());
    let summary = String::from_utf8(summary.stdout).unwrap();
    assert!(summary.contains("tune job"), "{summary}");
    assert!(summary.contains("theta_hat"), "{summary}");
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "x");
    let unknown = kftune(&["tune", "--set", "tuning.max_iter=3", "--out", &out]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("max_iter"));

    let bad_value = kftune(&["tune", "--set", "tuning.estimator.q=bogus", "--out", &out]);
    assert_eq!(bad_value.status.code(), Some(1));

    assert_eq!(kftune(&["tune"]).status.code(), Some(1));
    assert_eq!(kftune(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(kftune(&["report", &path(tmp.path(), "missing")]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two_and_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("div");
    let res = kftune(&["tune", "--set", "theta_start=[-400,-40,60]", "--out", &out.display().to_string()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
    assert_eq!(lines(&out.join("overlay.csv")).len(), 1);
    assert_eq!(lines(&out.join("costs.csv")).len(), 1);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn nr_on_a_dataset_file_and_tampering_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert!(kftune(&["simulate", "--out", &sim.display().to_string()]).status.success());
    let data = path(&sim, "dataset.json");
    let nr = tmp.path().join("nr");
    let res = kftune(&["nr", "--data", &data, "--out", &nr.display().to_string()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(nr.join("nr.json")).unwrap()).unwrap();
    let theta = result["theta_hat"].as_array().unwrap();
    assert!((theta[0].as_f64().unwrap() - 4.0).abs() < 0.2);

    let mut bytes = fs::read(&data).unwrap();
    bytes.push(b'\n');
    fs::write(&data, bytes).unwrap();
    let rerun = kftune(&["rerun", &path(&nr, "manifest.json"), "--out", &path(tmp.path(), "nr2")]);
    assert_eq!(rerun.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&rerun.stderr).contains("changed"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, threads: &str| {
        let res = Command::new(env!("CARGO_BIN_EXE_kftune"))
            .env("KFTUNE_THREADS", threads)
            .args(["montecarlo", "--set", "tuning.n_sims=4", "--out", &path(tmp.path(), dir)])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        fs::read(tmp.path().join(dir).join("aggregate.json")).unwrap()
    };
    assert_eq!(run("one", "1"), run("three", "3"));
    let per_sim = lines(&tmp.path().join("one").join("per_sim.csv"));
    assert_eq!(per_sim.len(), 5);
    assert!(tmp.path().join("one/sims/sim_003_costs.csv").exists());
}

#[test]
fn config_file_and_output_dir_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let out = path(tmp.path(), "from_cfg");
    let doc = serde_json::json!({
        "seed": 5,
        "output_dir": out,
        "tuning": {"n_sims": 2, "max_iters": 3}
    });
    fs::write(&cfg, doc.to_string()).unwrap();
    let res = kftune(&["compare", "--config", &cfg.display().to_string()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = lines(&Path::new(&out).join("comparison.csv"));
    assert_eq!(table.len(), 6);
    let methods: Vec<&str> = table[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["reference", "iim", "bavdekar", "mt", "ms"]);
}
