//! On-disk JSON documents. Scenario keys carry their unit and are converted
//! to SI on load; gain and PSO files are already in SI.

use std::path::Path;

use phasebuck::optimizer::{TuneConfig, GAIN_DIM};
use phasebuck::simulator::{Balancing, InitialState, SecondDerivativeSource};
use phasebuck::{
    ControllerGains, ConverterParams, LoadProfile, LoadSegment, PlantState, PsoConfig, Scenario,
    SimConfig, VoltageBand,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const MICRO: f64 = 1e6;
const MILLI: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub converter: ConverterSection,
    pub load: LoadSection,
    pub simulation: SimulationSection,
    pub band: BandSection,
    #[serde(rename = "u_ref_V")]
    pub u_ref_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainsFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterSection {
    pub n_phases: usize,
    #[serde(rename = "inductance_uH")]
    pub inductance_uh: f64,
    #[serde(rename = "capacitance_uF")]
    pub capacitance_uf: f64,
    #[serde(rename = "r_winding_mOhm", default)]
    pub r_winding_mohm: f64,
    #[serde(rename = "r_esr_mOhm", default)]
    pub r_esr_mohm: f64,
    #[serde(rename = "u_source_V")]
    pub u_source_v: f64,
    pub pwm_period_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSection {
    pub segments: Vec<SegmentFile>,
    /// Resistance floor. Optional when no segment ramps downwards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_min_ohm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentFile {
    pub start_us: f64,
    pub resistance_ohm: f64,
    #[serde(default)]
    pub ramp_ohm_per_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub t_end_us: f64,
    #[serde(default = "default_steps")]
    pub steps_per_pwm_period: usize,
    #[serde(default = "default_one")]
    pub record_decimation: usize,
    #[serde(default)]
    pub initial_state: InitialStateFile,
    #[serde(default = "default_d2_source")]
    pub second_derivative_source: SecondDerivativeSource,
    #[serde(default = "default_balancing")]
    pub balancing: Balancing,
    #[serde(default = "default_beta")]
    pub balancer_filter_coefficient: f64,
}

fn default_steps() -> usize {
    phasebuck::simulator::DEFAULT_STEPS_PER_PWM_PERIOD
}

fn default_one() -> usize {
    1
}

fn default_d2_source() -> SecondDerivativeSource {
    SecondDerivativeSource::ModelBased
}

fn default_balancing() -> Balancing {
    Balancing::Off
}

fn default_beta() -> f64 {
    phasebuck::controller::DEFAULT_BALANCER_COEFFICIENT
}

fn default_epsilon() -> f64 {
    1e-6
}

/// `"zero"`, `"warm"` or an explicit state object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialStateFile {
    Named(NamedInitialState),
    Explicit(ExplicitState),
}

impl Default for InitialStateFile {
    fn default() -> Self {
        InitialStateFile::Named(NamedInitialState::Zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedInitialState {
    Zero,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitState {
    #[serde(rename = "phase_currents_A")]
    pub phase_currents_a: Vec<f64>,
    #[serde(rename = "capacitor_voltage_V")]
    pub capacitor_voltage_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSection {
    #[serde(rename = "u_min_V")]
    pub u_min_v: f64,
    #[serde(rename = "u_max_V")]
    pub u_max_v: f64,
    #[serde(rename = "epsilon_V", default = "default_epsilon")]
    pub epsilon_v: f64,
}

/// Controller constants in SI units, keyed like [`ControllerGains`]. The
/// same layout is used inside scenario files, as a stand-alone gain file
/// and for tune output. `u_ref` is optional; when present it must agree
/// with the scenario reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub k_dd: f64,
    pub t_d: f64,
    pub t_dd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_ref: Option<f64>,
}

impl GainsFile {
    pub fn to_gains(&self, u_ref: f64) -> phasebuck::Result<ControllerGains> {
        if let Some(own) = self.u_ref {
            if own != u_ref {
                return Err(phasebuck::Error::Config(format!(
                    "gain file u_ref {own} differs from scenario u_ref_V {u_ref}"
                )));
            }
        }
        let gains = ControllerGains {
            k_p: self.k_p,
            k_i: self.k_i,
            k_d: self.k_d,
            k_dd: self.k_dd,
            t_d: self.t_d,
            t_dd: self.t_dd,
            u_ref,
        };
        gains.validate()?;
        Ok(gains)
    }

    pub fn from_gains(g: &ControllerGains) -> Self {
        GainsFile {
            k_p: g.k_p,
            k_i: g.k_i,
            k_d: g.k_d,
            k_dd: g.k_dd,
            t_d: g.t_d,
            t_dd: g.t_dd,
            u_ref: Some(g.u_ref),
        }
    }
}

/// PSO settings and the search box, one `[min, max]` pair per gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoFile {
    #[serde(default = "default_swarm")]
    pub swarm_size: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_inertia")]
    pub inertia: f64,
    #[serde(default = "default_acceleration")]
    pub cognitive: f64,
    #[serde(default = "default_acceleration")]
    pub social: f64,
    #[serde(default = "default_clamp")]
    pub velocity_clamp_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub bounds: BoundsFile,
    /// Freezes `T_d` and removes it from the search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_t_d: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsFile {
    pub k_p: [f64; 2],
    pub k_i: [f64; 2],
    pub k_d: [f64; 2],
    pub k_dd: [f64; 2],
    pub t_d: [f64; 2],
    pub t_dd: [f64; 2],
}

fn default_swarm() -> usize {
    30
}

fn default_iterations() -> usize {
    100
}

fn default_inertia() -> f64 {
    0.729
}

fn default_acceleration() -> f64 {
    1.49445
}

fn default_clamp() -> f64 {
    0.5
}

impl PsoFile {
    pub fn to_tune_config(&self, seed_override: Option<u64>) -> TuneConfig {
        let b = &self.bounds;
        // optimizer axis order
        let axes: [[f64; 2]; GAIN_DIM] = [b.k_p, b.k_d, b.k_dd, b.k_i, b.t_d, b.t_dd];
        let pso = PsoConfig {
            swarm_size: self.swarm_size,
            max_iterations: self.max_iterations,
            inertia: self.inertia,
            cognitive: self.cognitive,
            social: self.social,
            velocity_clamp_fraction: self.velocity_clamp_fraction,
            seed: seed_override.unwrap_or(self.seed),
            x_min: axes.iter().map(|a| a[0]).collect(),
            x_max: axes.iter().map(|a| a[1]).collect(),
        };
        TuneConfig {
            pso,
            fixed_t_d: self.fixed_t_d,
        }
    }
}

impl ScenarioFile {
    /// Converts to SI core types and checks every invariant.
    pub fn to_scenario(&self) -> phasebuck::Result<Scenario> {
        let c = &self.converter;
        let params = ConverterParams {
            n_phases: c.n_phases,
            inductance: c.inductance_uh / MICRO,
            capacitance: c.capacitance_uf / MICRO,
            r_winding: c.r_winding_mohm / MILLI,
            r_esr: c.r_esr_mohm / MILLI,
            u_source: c.u_source_v,
            pwm_period: c.pwm_period_us / MICRO,
        };
        params.validate()?;

        let segments: Vec<LoadSegment> = self
            .load
            .segments
            .iter()
            .map(|s| LoadSegment {
                start_time: s.start_us / MICRO,
                resistance_start: s.resistance_ohm,
                // ohm/us -> ohm/s
                ramp_rate: s.ramp_ohm_per_us * MICRO,
            })
            .collect();
        let r_min = match self.load.r_min_ohm {
            Some(r) => r,
            None => {
                if segments.iter().any(|s| s.ramp_rate < 0.0) {
                    return Err(phasebuck::Error::Config(
                        "load.r_min_ohm is required when a segment ramps downwards".into(),
                    ));
                }
                segments
                    .iter()
                    .map(|s| s.resistance_start)
                    .fold(f64::INFINITY, f64::min)
            }
        };
        let profile = LoadProfile::new(segments, r_min)?;

        let s = &self.simulation;
        let initial_state = match &s.initial_state {
            InitialStateFile::Named(NamedInitialState::Zero) => InitialState::Zero,
            InitialStateFile::Named(NamedInitialState::Warm) => InitialState::Warm,
            InitialStateFile::Explicit(e) => InitialState::Explicit(PlantState {
                phase_currents: e.phase_currents_a.clone(),
                capacitor_voltage: e.capacitor_voltage_v,
                time: 0.0,
            }),
        };
        let sim = SimConfig {
            t_end: s.t_end_us / MICRO,
            steps_per_pwm_period: s.steps_per_pwm_period,
            record_decimation: s.record_decimation,
            initial_state,
            second_derivative_source: s.second_derivative_source,
            balancing: s.balancing,
            balancer_coefficient: s.balancer_filter_coefficient,
        };
        let band = VoltageBand {
            u_min: self.band.u_min_v,
            u_max: self.band.u_max_v,
            epsilon: self.band.epsilon_v,
        };
        let scenario = Scenario {
            params,
            profile,
            sim,
            band,
            u_ref: self.u_ref_v,
        };
        scenario.validate()?;
        if let Some(g) = &self.gains {
            g.to_gains(self.u_ref_v)?;
        }
        Ok(scenario)
    }
}

/// Parses `text` strictly, reporting the key path and position of the
/// first problem.
pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        CliError::Parse {
            path: path.to_path_buf(),
            key,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    Ok(value)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn validation(path: &Path, e: phasebuck::Error) -> CliError {
    let message = match e {
        phasebuck::Error::Config(m) => m,
        other => other.to_string(),
    };
    CliError::Validation {
        path: path.to_path_buf(),
        message,
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<(ScenarioFile, Scenario)> {
    let file: ScenarioFile = parse_json(&read_text(path)?, path)?;
    let scenario = file.to_scenario().map_err(|e| validation(path, e))?;
    Ok((file, scenario))
}

pub fn load_gains(path: &Path, u_ref: f64) -> Result<ControllerGains> {
    let file: GainsFile = parse_json(&read_text(path)?, path)?;
    file.to_gains(u_ref).map_err(|e| validation(path, e))
}

pub fn load_pso(path: &Path, seed_override: Option<u64>) -> Result<TuneConfig> {
    let file: PsoFile = parse_json(&read_text(path)?, path)?;
    let cfg = file.to_tune_config(seed_override);
    cfg.pso.validate().map_err(|e| validation(path, e))?;
    Ok(cfg)
}
