use std::path::{Path, PathBuf};

use phasebuck::optimizer::{robustness_sweep, tune, SweepEntry, SweepKind};
use phasebuck::stability::{build_reduced_model, routh_hurwitz, RFactor, ReducedModel, StabilityReport};
use phasebuck::{ControllerGains, Scenario, SimMetrics, SimTrace};
use serde::Serialize;

use crate::error::{CliError, Result, EXIT_OK};
use crate::output::{sha256_hex, write_atomic, write_bytes, write_json};
use crate::schema::{self, GainsFile, ScenarioFile};

pub const DEFAULT_SWEEP_FACTORS: [f64; 3] = [1.0, 0.5, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Tune,
    Stability,
    Sweep,
}

/// One batch invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: Command,
    pub scenario_path: PathBuf,
    /// Required by `tune`.
    pub pso_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
    /// Overrides the `gains` section of the scenario.
    pub gains_path: Option<PathBuf>,
    /// Sweep scale factors.
    pub factors: Vec<f64>,
    pub gnuplot: bool,
    pub quiet: bool,
}

impl RunManifest {
    pub fn new(command: Command, scenario_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            command,
            scenario_path: scenario_path.into(),
            pso_path: None,
            output_dir: output_dir.into(),
            seed_override: None,
            gains_path: None,
            factors: DEFAULT_SWEEP_FACTORS.to_vec(),
            gnuplot: false,
            quiet: true,
        }
    }
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    toolkit: &'static str,
    version: &'static str,
    command: Command,
    exit_code: i32,
    scenario: Option<InputRecord>,
    pso: Option<InputRecord>,
    gains: Option<InputRecord>,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    factors: Option<&'a [f64]>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    error: &'static str,
    exit_code: i32,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    column: Option<usize>,
}

impl ErrorRecord {
    fn new(e: &CliError) -> Self {
        let mut r = ErrorRecord {
            error: e.kind(),
            exit_code: e.exit_code(),
            message: e.to_string(),
            path: None,
            key: None,
            line: None,
            column: None,
        };
        match e {
            CliError::Parse {
                path,
                key,
                line,
                column,
                ..
            } => {
                r.path = Some(path.display().to_string());
                r.key = Some(key.clone());
                r.line = Some(*line);
                r.column = Some(*column);
            }
            CliError::Validation { path, .. } | CliError::Io { path, .. } => {
                r.path = Some(path.display().to_string());
            }
            _ => {}
        }
        r
    }
}

/// Files written and inputs consumed by a run.
#[derive(Debug, Default)]
struct Session {
    scenario: Option<InputRecord>,
    pso: Option<InputRecord>,
    gains: Option<InputRecord>,
    seed: Option<u64>,
    outputs: Vec<String>,
}

impl Session {
    fn output(&mut self, dir: &Path, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        dir.join(name)
    }
}

fn read_input(path: &Path) -> Result<(String, InputRecord)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let record = InputRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    let text = String::from_utf8(bytes).map_err(|e| {
        CliError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    })?;
    Ok((text, record))
}

/// Runs the manifest, writes `run.json` and, on failure, `error.json`.
/// Returns the process exit status.
pub fn run(manifest: &RunManifest) -> i32 {
    let mut session = Session::default();
    let outcome = execute(manifest, &mut session);
    let code = match &outcome {
        Ok(()) => EXIT_OK,
        Err(e) => e.exit_code(),
    };
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    if std::fs::create_dir_all(&manifest.output_dir).is_ok() {
        let dir = &manifest.output_dir;
        if let Err(e) = &outcome {
            session.outputs.push("error.json".into());
            if let Err(w) = write_json(&dir.join("error.json"), &ErrorRecord::new(e)) {
                eprintln!("error: {w}");
            }
        }
        session.outputs.push("run.json".into());
        let record = RunRecord {
            toolkit: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: manifest.command,
            exit_code: code,
            scenario: session.scenario,
            pso: session.pso,
            gains: session.gains,
            seed: session.seed,
            factors: (manifest.command == Command::Sweep).then_some(manifest.factors.as_slice()),
            outputs: session.outputs,
        };
        if let Err(w) = write_json(&dir.join("run.json"), &record) {
            eprintln!("error: {w}");
            return if code == EXIT_OK { w.exit_code() } else { code };
        }
    }
    code
}

fn execute(m: &RunManifest, session: &mut Session) -> Result<()> {
    let (text, record) = read_input(&m.scenario_path)?;
    session.scenario = Some(record);
    let file: ScenarioFile = schema::parse_json(&text, &m.scenario_path)?;
    let scenario = file.to_scenario().map_err(|e| schema::validation(&m.scenario_path, e))?;
    std::fs::create_dir_all(&m.output_dir).map_err(|e| CliError::io(&m.output_dir, e))?;

    match m.command {
        Command::Simulate => {
            let gains = resolve_gains(m, &file, session)?;
            simulate_cmd(m, &scenario, &gains, session)
        }
        Command::Tune => tune_cmd(m, &scenario, session),
        Command::Stability => stability_cmd(m, &scenario, session),
        Command::Sweep => {
            let gains = resolve_gains(m, &file, session)?;
            sweep_cmd(m, &scenario, &gains, session)
        }
    }
}

fn resolve_gains(m: &RunManifest, file: &ScenarioFile, session: &mut Session) -> Result<ControllerGains> {
    match &m.gains_path {
        Some(path) => {
            let (text, record) = read_input(path)?;
            session.gains = Some(record);
            let g: GainsFile = schema::parse_json(&text, path)?;
            g.to_gains(file.u_ref_v).map_err(|e| schema::validation(path, e))
        }
        None => match &file.gains {
            // already validated with the scenario
            Some(g) => Ok(g.to_gains(file.u_ref_v)?),
            None => Err(CliError::Usage(format!(
                "{} has no `gains` section; pass --gains",
                m.scenario_path.display()
            ))),
        },
    }
}

fn write_trace(path: &Path, trace: &SimTrace) -> Result<()> {
    write_atomic(path, |w| Ok(trace.write_csv(w)?))
}

fn say(m: &RunManifest, line: impl AsRef<str>) {
    if !m.quiet {
        println!("{}", line.as_ref());
    }
}

fn metrics_line(metrics: &SimMetrics) -> String {
    format!(
        "u_min {:.4} V, u_max {:.4} V, outage {:.4} V, error stddev {:.4} V{}",
        metrics.u_min,
        metrics.u_max,
        metrics.outage,
        metrics.error_stddev,
        if metrics.diverged { ", diverged" } else { "" }
    )
}

fn simulate_cmd(m: &RunManifest, scenario: &Scenario, gains: &ControllerGains, session: &mut Session) -> Result<()> {
    let (trace, metrics) = scenario.run(gains)?;
    let dir = &m.output_dir;
    write_trace(&session.output(dir, "trace.csv"), &trace)?;
    write_json(&session.output(dir, "metrics.json"), &metrics)?;
    if m.gnuplot {
        let script = gnuplot_script(scenario, trace.n_phases());
        write_bytes(&session.output(dir, "plot.gp"), script.as_bytes())?;
    }
    say(m, metrics_line(&metrics));
    if metrics.diverged {
        let time_s = trace.times.last().copied().unwrap_or(0.0);
        return Err(CliError::Diverged { time_s });
    }
    Ok(())
}

fn tune_cmd(m: &RunManifest, scenario: &Scenario, session: &mut Session) -> Result<()> {
    let pso_path = m
        .pso_path
        .as_ref()
        .ok_or_else(|| CliError::Usage("tune needs --pso".into()))?;
    let (text, record) = read_input(pso_path)?;
    session.pso = Some(record);
    let pso_file: schema::PsoFile = schema::parse_json(&text, pso_path)?;
    let cfg = pso_file.to_tune_config(m.seed_override);
    cfg.pso.validate().map_err(|e| schema::validation(pso_path, e))?;
    session.seed = Some(cfg.pso.seed);

    let result = tune(scenario, &cfg)?;
    let dir = &m.output_dir;

    write_atomic(&session.output(dir, "convergence.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "iteration",
            "best_value",
            "k_p",
            "k_i_per_s",
            "k_d_s",
            "k_dd_s2",
            "t_d_s",
            "t_dd_s",
        ])
        ?;
        for (i, (value, x)) in result.history.iter().zip(&result.history_gains).enumerate() {
            // gain vector order is k_p, k_d, k_dd, k_i, t_d, t_dd
            let row = [
                i.to_string(),
                value.to_string(),
                x[0].to_string(),
                x[3].to_string(),
                x[1].to_string(),
                x[2].to_string(),
                x[4].to_string(),
                x[5].to_string(),
            ];
            csv.write_record(&row)?;
        }
        csv.flush().map_err(phasebuck::Error::from)?;
        Ok(())
    })?;
    write_json(&session.output(dir, "best_gains.json"), &GainsFile::from_gains(&result.gains))?;

    let (trace, metrics) = scenario.run(&result.gains)?;
    write_trace(&session.output(dir, "trace.csv"), &trace)?;
    write_json(&session.output(dir, "metrics.json"), &metrics)?;
    if m.gnuplot {
        let script = gnuplot_script(scenario, trace.n_phases());
        write_bytes(&session.output(dir, "plot.gp"), script.as_bytes())?;
    }
    say(m, format!("best objective {:.6}", result.best_value));
    say(m, metrics_line(&metrics));
    Ok(())
}

#[derive(Debug, Serialize)]
struct OperatingPoint {
    label: &'static str,
    r_load_ohm: f64,
    model: ReducedModel,
    report: StabilityReport,
}

#[derive(Debug, Serialize)]
struct StabilitySummary {
    all_stable: bool,
    operating_points: Vec<OperatingPoint>,
}

fn stability_cmd(m: &RunManifest, scenario: &Scenario, session: &mut Session) -> Result<()> {
    let points = [
        ("initial_load", scenario.profile.resistance(0.0)),
        ("minimum_load", scenario.profile.min_resistance(scenario.sim.t_end)),
    ];
    let operating_points: Vec<OperatingPoint> = points
        .iter()
        .map(|&(label, r_load)| {
            let model = build_reduced_model(&scenario.params, r_load, RFactor::Auto);
            OperatingPoint {
                label,
                r_load_ohm: r_load,
                model,
                report: routh_hurwitz(&model),
            }
        })
        .collect();
    let summary = StabilitySummary {
        all_stable: operating_points.iter().all(|p| p.report.routh_hurwitz_stable),
        operating_points,
    };
    write_json(&session.output(&m.output_dir, "stability.json"), &summary)?;
    for p in &summary.operating_points {
        say(
            m,
            format!(
                "{} ({} ohm): trace {:.6e}, det {:.6e}, {}",
                p.label,
                p.r_load_ohm,
                p.report.trace,
                p.report.determinant,
                if p.report.routh_hurwitz_stable { "stable" } else { "unstable" }
            ),
        );
    }
    Ok(())
}

fn kind_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::Magnitude => "magnitude",
        SweepKind::Rate => "rate",
    }
}

fn sweep_cmd(m: &RunManifest, scenario: &Scenario, gains: &ControllerGains, session: &mut Session) -> Result<()> {
    if m.factors.is_empty() {
        return Err(CliError::Usage("sweep needs at least one factor".into()));
    }
    if let Some(f) = m.factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(CliError::Usage(format!("scale factors must be positive (got {f})")));
    }
    let entries: Vec<SweepEntry> = robustness_sweep(gains, scenario, &m.factors)?;
    let dir = &m.output_dir;
    for e in &entries {
        let name = format!("{}_{}.json", kind_name(e.kind), e.factor);
        write_json(&session.output(dir, &name), e)?;
    }
    write_atomic(&session.output(dir, "summary.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "kind",
            "factor",
            "u_min_V",
            "u_max_V",
            "error_stddev_V",
            "outage_V",
            "settled",
            "phase_current_spread_final_A",
            "diverged",
        ])
        ?;
        for e in &entries {
            let r = &e.metrics;
            csv.write_record([
                kind_name(e.kind).to_string(),
                e.factor.to_string(),
                r.u_min.to_string(),
                r.u_max.to_string(),
                r.error_stddev.to_string(),
                r.outage.to_string(),
                r.settled.to_string(),
                r.phase_current_spread_final.to_string(),
                r.diverged.to_string(),
            ])
            ?;
        }
        csv.flush().map_err(phasebuck::Error::from)?;
        Ok(())
    })?;
    for e in &entries {
        say(m, format!("{} x{}: {}", kind_name(e.kind), e.factor, metrics_line(&e.metrics)));
    }
    Ok(())
}

/// Script that plots `trace.csv` from the same directory: output voltage
/// with the band, then the phase currents.
pub fn gnuplot_script(scenario: &Scenario, n_phases: usize) -> String {
    let band = &scenario.band;
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str("set multiplot layout 2,1\n");
    s.push_str("set xlabel 'time (s)'\n");
    s.push_str("set ylabel 'U_O (V)'\n");
    s.push_str(&format!(
        "plot 'trace.csv' using 1:2 with lines, {} title 'u_min' dt 2, {} title 'u_max' dt 2\n",
        band.u_min, band.u_max
    ));
    s.push_str("set ylabel 'phase current (A)'\n");
    let curves: Vec<String> = (0..n_phases)
        .map(|j| format!("'trace.csv' using 1:{} with lines", 4 + j))
        .collect();
    s.push_str(&format!("plot {}\n", curves.join(", ")));
    s.push_str("unset multiplot\n");
    s
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}
