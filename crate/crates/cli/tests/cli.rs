use std::path::{Path, PathBuf};
use std::process::Command as Process;

use phasebuck::simulator::{trace_header, Balancing, InitialState, SecondDerivativeSource};
use phasebuck_cli::output::to_json;
use phasebuck_cli::schema::parse_json;
use phasebuck_cli::{load_scenario, run, CliError, Command, RunManifest, ScenarioFile};
use proptest::prelude::*;
use serde_json::{json, Value};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn minimal() -> Value {
    json!({
        "converter": {
            "n_phases": 2,
            "inductance_uH": 10.0,
            "capacitance_uF": 100.0,
            "u_source_V": 12.0,
            "pwm_period_us": 1.0
        },
        "load": {"segments": [{"start_us": 0.0, "resistance_ohm": 1.0}]},
        "simulation": {"t_end_us": 50.0},
        "band": {"u_min_V": 0.9, "u_max_V": 1.1},
        "u_ref_V": 1.0
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn with_gains(mut v: Value) -> Value {
    v["gains"] = json!({"k_p": 1.0, "k_i": 1000.0, "k_d": 0.0, "k_dd": 0.0, "t_d": 0.00001, "t_dd": 0.00001});
    v
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn has_exponent(text: &str) -> bool {
    let b = text.as_bytes();
    (1..b.len().saturating_sub(1)).any(|i| {
        (b[i] == b'e' || b[i] == b'E') && b[i - 1].is_ascii_digit() && (b[i + 1].is_ascii_digit() || b[i + 1] == b'-' || b[i + 1] == b'+')
    })
}

#[test]
fn minimal_file_gets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = load_scenario(&write(dir.path(), "s.json", &minimal())).unwrap();
    assert_eq!(s.sim.steps_per_pwm_period, 64);
    assert_eq!(s.sim.record_decimation, 1);
    assert_eq!(s.sim.initial_state, InitialState::Zero);
    assert_eq!(s.sim.second_derivative_source, SecondDerivativeSource::ModelBased);
    assert_eq!(s.sim.balancing, Balancing::Off);
    assert_eq!(s.sim.balancer_coefficient, 0.1);
    assert_eq!(s.band.epsilon, 1e-6);
    assert_eq!(s.params.r_winding, 0.0);
    assert_eq!(s.params.r_esr, 0.0);
    assert_eq!(s.params.inductance, 10e-6);
    assert_eq!(s.params.pwm_period, 1e-6);
    assert_eq!(s.sim.t_end, 50e-6);
    assert_eq!(s.profile.r_min(), 1.0);
}

#[test]
fn zero_phases_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["converter"]["n_phases"] = json!(0);
    match load_scenario(&write(dir.path(), "s.json", &v)) {
        Err(CliError::Validation { message, .. }) => assert!(message.contains("n_phases >= 1"), "{message}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_key_is_a_parse_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["converter"]["foo"] = json!(1);
    match load_scenario(&write(dir.path(), "s.json", &v)) {
        Err(e @ CliError::Parse { .. }) => {
            assert!(e.to_string().contains("foo"), "{e}");
            if let CliError::Parse { key, line, .. } = e {
                assert!(key.starts_with("converter"), "{key}");
                assert!(line > 1);
            }
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_type_reports_key_and_line() {
    let text = "{\n  \"converter\": {\n    \"n_phases\": \"four\"\n  }\n}";
    match parse_json::<ScenarioFile>(text, Path::new("x.json")) {
        Err(CliError::Parse { key, line, .. }) => {
            assert_eq!(key, "converter.n_phases");
            assert_eq!(line, 3);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn downward_ramp_needs_a_floor() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["load"]["segments"][0]["ramp_ohm_per_us"] = json!(-0.1);
    assert!(matches!(
        load_scenario(&write(dir.path(), "s.json", &v)),
        Err(CliError::Validation { .. })
    ));
}

#[test]
fn shipped_scenarios_round_trip() {
    for name in ["reference.json", "no_derivative.json", "derivative_only.json", "tuned.json"] {
        let (file, scenario) = load_scenario(&scenarios().join(name)).unwrap();
        let text = String::from_utf8(to_json(&file)).unwrap();
        let again: ScenarioFile = parse_json(&text, Path::new(name)).unwrap();
        assert_eq!(again, file);
        assert_eq!(again.to_scenario().unwrap(), scenario);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scenarios_round_trip(
        n in 1usize..9, l in 1e-3f64..1e6, c in 1e-3f64..1e4, r_l in 0.0f64..100.0,
        u_s in 0.1f64..1e3, t in 1e-3f64..1e3, r0 in 1e-3f64..1e4, ramp in -1e3f64..0.0,
        t_end in 1.0f64..1e4, warm in any::<bool>(), eps in 1e-9f64..1e-1,
    ) {
        let mut v = minimal();
        v["converter"] = json!({
            "n_phases": n, "inductance_uH": l, "capacitance_uF": c, "r_winding_mOhm": r_l,
            "r_esr_mOhm": r_l / 2.0, "u_source_V": u_s, "pwm_period_us": t
        });
        v["load"] = json!({
            "segments": [{"start_us": 0.0, "resistance_ohm": r0}, {"start_us": 5.0, "resistance_ohm": r0, "ramp_ohm_per_us": ramp}],
            "r_min_ohm": r0 / 10.0
        });
        v["simulation"] = json!({"t_end_us": t_end, "initial_state": if warm { "warm" } else { "zero" }});
        v["band"]["epsilon_V"] = json!(eps);
        let file: ScenarioFile = serde_json::from_value(v).unwrap();
        let text = String::from_utf8(to_json(&file)).unwrap();
        prop_assert!(!has_exponent(&text), "{}", text);
        let again: ScenarioFile = parse_json(&text, Path::new("p.json")).unwrap();
        prop_assert_eq!(&again, &file);
        prop_assert_eq!(again.to_scenario().unwrap(), file.to_scenario().unwrap());
    }
}

#[test]
fn explicit_initial_state_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["simulation"]["initial_state"] = json!({"phase_currents_A": [0.4, 0.6], "capacitor_voltage_V": 1.0});
    let (_, s) = load_scenario(&write(dir.path(), "s.json", &v)).unwrap();
    match s.sim.initial_state {
        InitialState::Explicit(p) => assert_eq!(p.phase_currents, vec![0.4, 0.6]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn simulate_writes_trace_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut m = RunManifest::new(Command::Simulate, scenarios().join("tuned.json"), &out);
    m.gnuplot = true;
    assert_eq!(run(&m), 0);

    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert_eq!(header, trace_header(4).join(","));
    assert!(!has_exponent(&trace));

    let metrics = read_json(&out.join("metrics.json"));
    let keys: Vec<&str> = metrics.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["u_min", "u_max", "error_stddev", "outage", "settled", "phase_current_spread_final", "diverged"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert!(metrics.as_object().unwrap().values().all(|v| !v.is_object() && !v.is_array()));

    let manifest = read_json(&out.join("run.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["scenario"]["sha256"].as_str().unwrap().len(), 64);
    assert!(out.join("plot.gp").exists());
    assert!(!out.join("error.json").exists());
}

#[test]
fn stability_reports_both_operating_points() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest::new(Command::Stability, scenarios().join("reference.json"), dir.path());
    assert_eq!(run(&m), 0);
    let text = std::fs::read_to_string(dir.path().join("stability.json")).unwrap();
    assert!(!has_exponent(&text), "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["all_stable"], true);
    let points = v["operating_points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["r_load_ohm"], 2000.0);
    assert_eq!(points[1]["r_load_ohm"], 200.0);
}

#[test]
fn sweep_summary_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest::new(Command::Sweep, scenarios().join("tuned.json"), dir.path());
    assert_eq!(run(&m), 0);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert!(lines.next().unwrap().starts_with("kind,factor,u_min_V"));
    assert_eq!(lines.count(), 6);
    for kind in ["magnitude", "rate"] {
        for f in ["1", "0.5", "0.1"] {
            assert!(dir.path().join(format!("{kind}_{f}.json")).exists());
        }
    }
    assert_eq!(read_json(&dir.path().join("run.json"))["factors"], json!([1.0, 0.5, 0.1]));
}

#[test]
fn tune_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), "s.json", &minimal());
    let pso = write(
        dir.path(),
        "pso.json",
        &json!({
            "swarm_size": 4, "max_iterations": 3, "seed": 11,
            "bounds": {"k_p": [0.0, 2.0], "k_i": [0.0, 1000.0], "k_d": [0.0, 0.00001],
                       "k_dd": [0.0, 0.0000000001], "t_d": [0.000001, 0.0001], "t_dd": [0.000001, 0.0001]}
        }),
    );
    let tune = |name: &str, seed: Option<u64>| {
        let mut m = RunManifest::new(Command::Tune, &scenario, dir.path().join(name));
        m.pso_path = Some(pso.clone());
        m.seed_override = seed;
        assert_eq!(run(&m), 0);
        std::fs::read(dir.path().join(name).join("best_gains.json")).unwrap()
    };
    let a = tune("a", None);
    let b = tune("b", None);
    assert_eq!(a, b);
    let c = tune("c", Some(12));
    assert_ne!(a, c);
    assert_eq!(read_json(&dir.path().join("c/run.json"))["seed"], 12);

    let conv = std::fs::read_to_string(dir.path().join("a/convergence.csv")).unwrap();
    let mut lines = conv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,best_value,k_p,k_i_per_s,k_d_s,k_dd_s2,t_d_s,t_dd_s");
    assert_eq!(lines.count(), 4);
    assert!(dir.path().join("a/trace.csv").exists());
    assert!(dir.path().join("a/metrics.json").exists());
    let gains: Value = serde_json::from_slice(&a).unwrap();
    let mut keys: Vec<&str> = gains.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["k_d", "k_dd", "k_i", "k_p", "t_d", "t_dd", "u_ref"]);
}

fn binary(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_phasebuck")).args(args).output().unwrap()
}

#[test]
fn parse_failure_exits_2_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["foo"] = json!(1);
    let s = write(dir.path(), "s.json", &v);
    let out = dir.path().join("out");
    let o = binary(&["stability", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    let e = read_json(&out.join("error.json"));
    assert_eq!(e["error"], "parse");
    assert_eq!(e["exit_code"], 2);
    assert!(e["message"].as_str().unwrap().contains("foo"));
    assert!(e["line"].as_u64().is_some());
    assert_eq!(read_json(&out.join("run.json"))["exit_code"], 2);
}

#[test]
fn missing_scenario_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = binary(&[
        "simulate",
        "--scenario",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(read_json(&dir.path().join("error.json"))["error"], "io");
}

#[test]
fn simulate_without_gains_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "s.json", &minimal());
    let o = binary(&["simulate", "--scenario", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_simulation_exits_3_and_keeps_its_trace() {
    // a source far above the divergence limit drives U_C past it
    let dir = tempfile::tempdir().unwrap();
    let mut v = with_gains(minimal());
    v["converter"]["u_source_V"] = json!(1e8);
    v["u_ref_V"] = json!(5e7);
    v["band"] = json!({"u_min_V": 4.9e7, "u_max_V": 5.1e7});
    v["gains"]["k_p"] = json!(0.0);
    v["gains"]["k_i"] = json!(0.0);
    let s = write(dir.path(), "s.json", &v);
    let out = dir.path().join("out");
    let o = binary(&["simulate", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(read_json(&out.join("error.json"))["error"], "diverged");
    assert_eq!(read_json(&out.join("metrics.json"))["diverged"], true);
    assert!(out.join("trace.csv").exists());
}

#[test]
fn gains_file_overrides_scenario_gains() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "s.json", &with_gains(minimal()));
    let g = write(
        dir.path(),
        "g.json",
        &json!({"k_p": 0.0, "k_i": 0.0, "k_d": 0.0, "k_dd": 0.0, "t_d": 1.0, "t_dd": 1.0, "u_ref": 1.0}),
    );
    let out = dir.path().join("out");
    let o = binary(&[
        "simulate", "--scenario", s.to_str().unwrap(), "--gains", g.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let d0: f64 = trace.lines().nth(100).unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(d0, 1.0 / 12.0);
    assert!(read_json(&out.join("run.json"))["gains"]["sha256"].is_string());

    let bad = write(dir.path(), "bad.json", &json!({"k_p": 0.0, "k_i": 0.0, "k_d": 0.0, "k_dd": 0.0, "t_d": 1.0, "t_dd": 1.0, "u_ref": 2.0}));
    let o = binary(&[
        "simulate", "--scenario", s.to_str().unwrap(), "--gains", bad.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_accepts_custom_factors() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "s.json", &with_gains(minimal()));
    let o = binary(&[
        "sweep", "--scenario", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
        "--factors", "1,0.25", "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}
