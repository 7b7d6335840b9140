use pipemerge_cli::run_to;
use serde_json::Value;
use std::fs;
use std::path::Path;

fn pipemerge(args: &[&str]) -> i32 {
    run_to(
        std::iter::once("pipemerge").chain(args.iter().copied()),
        &mut Vec::new(),
    )
}

fn out_arg(dir: &Path) -> String {
    dir.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn plan_writes_plan_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(pipemerge(&["plan", "-n", "4", "--out", &out]), 0);
    let plan = read_json(&tmp.path().join("plan.json"));
    assert_eq!(plan["n"], 4);
    assert!(tmp.path().join("optimizer_report.json").exists());
}

#[test]
fn schedule_writes_a_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(pipemerge(&["schedule", "-n", "2", "-Z", "2", "--out", &out]), 0);
    assert!(tmp.path().join("plan.json").exists());
    let s = fs::read_to_string(tmp.path().join("schedule.json")).unwrap();
    assert!(s.contains("order"));
}

#[test]
fn sweep_has_one_row_per_device_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    let code = pipemerge(&[
        "simulate",
        "--sweep",
        "1,2,4,8",
        "--batch",
        "8",
        "--memory-compare",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "speedup").unwrap();
    let speedups: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    assert_eq!(speedups[0], 1.0);
    assert!(speedups.windows(2).all(|w| w[1] > w[0]), "{speedups:?}");
    for n in [1, 2, 4, 8] {
        assert!(tmp.path().join(format!("gantt_n{n}.txt")).exists());
    }
}

#[test]
fn single_simulation_round_trips_its_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    assert_eq!(
        pipemerge(&["simulate", "-n", "2", "-Z", "2", "--out", &out_arg(&first)]),
        0
    );
    let plan = first.join("plan.json");
    assert_eq!(
        pipemerge(&[
            "simulate",
            "-n",
            "2",
            "--plan",
            &out_arg(&plan),
            "--out",
            &out_arg(&second)
        ]),
        0
    );
    for f in ["plan.json", "simulation.csv", "sim_report.json", "gantt.txt"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn verify_reports_every_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(pipemerge(&["verify", "--seeds", "5", "--out", &out]), 0);
    let report = read_json(&tmp.path().join("verify_report.json"));
    assert_eq!(report["seeds"], 5);
    assert_eq!(report["pass"], true);
    for p in report["properties"].as_array().unwrap() {
        assert_eq!(p["instances"], 5, "{}", p["name"]);
    }
}

#[test]
fn injected_fault_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(
        pipemerge(&["verify", "--seeds", "3", "--inject-fault", "--out", &out]),
        1
    );
    let report = read_json(&tmp.path().join("verify_report.json"));
    assert_eq!(report["pass"], false);
    assert!(report["failure"].is_string());
}

#[test]
fn demo_trains_through_the_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(
        pipemerge(&["demo", "-n", "2", "--epochs", "3", "--samples", "24", "--out", &out]),
        0
    );
    let report = read_json(&tmp.path().join("demo_report.json"));
    assert_eq!(report["epochs"], 3);
    assert_eq!(report["batch"], 6);
    assert!(report["max_rel_diff_vs_sequential"].as_f64().unwrap() < 1e-6);
    let history = fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3 * 4);
}

#[test]
fn bad_input_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    let missing = out_arg(&tmp.path().join("nope.json"));
    assert_eq!(pipemerge(&["plan", "--model", &missing, "--out", &out]), 2);
    assert_eq!(pipemerge(&["plan", "-n", "0", "--out", &out]), 2);
    assert_eq!(pipemerge(&["frobnicate"]), 2);
    assert_eq!(
        pipemerge(&["simulate", "--sweep", "8", "--batch", "4", "--out", &out]),
        2
    );

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"schema\": 1, \"name\": \"x\", \"layers\": [}").unwrap();
    assert_eq!(pipemerge(&["plan", "--model", &out_arg(&bad), "--out", &out]), 2);
    assert!(!tmp.path().join("plan.json").exists());
}
