//! Closed-loop time-domain simulation.
//!
//! The plant is integrated with classical fixed-step RK4, sampling the PWM
//! switch function at every stage time. The controller and the balancer run
//! once per PWM period, at its start, and the resulting duties are held for
//! the whole period.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::{
    balance_duties, controller_step, estimate_d2uc, spread, update_balancer, BalancerState,
    ControllerGains, ControllerState, DEFAULT_BALANCER_COEFFICIENT,
};
use crate::converter::{
    derivatives_into, output_voltage_raw, positive, switch_state_fraction, ConverterParams, LoadProfile,
    PlantState,
};
use crate::error::{Error, Result};

/// Any state magnitude above this (SI units) counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const DEFAULT_STEPS_PER_PWM_PERIOD: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// All currents and the capacitor voltage at zero.
    Zero,
    /// Regulated steady state for the load at `t = 0`: `U_C = U_ref`, equal
    /// phase currents, integrator preloaded with the winding drop.
    Warm,
    Explicit(PlantState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondDerivativeSource {
    ModelBased,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    Off,
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub steps_per_pwm_period: usize,
    pub record_decimation: usize,
    pub initial_state: InitialState,
    pub second_derivative_source: SecondDerivativeSource,
    pub balancing: Balancing,
    pub balancer_coefficient: f64,
}

impl SimConfig {
    pub fn new(t_end: f64) -> Self {
        SimConfig {
            t_end,
            steps_per_pwm_period: DEFAULT_STEPS_PER_PWM_PERIOD,
            record_decimation: 1,
            initial_state: InitialState::Zero,
            second_derivative_source: SecondDerivativeSource::ModelBased,
            balancing: Balancing::Off,
            balancer_coefficient: DEFAULT_BALANCER_COEFFICIENT,
        }
    }

    pub fn validate(&self, params: &ConverterParams) -> Result<()> {
        positive("t_end", self.t_end)?;
        if self.steps_per_pwm_period < 16 {
            return Err(Error::config(format!(
                "steps_per_pwm_period must be >= 16 (got {})",
                self.steps_per_pwm_period
            )));
        }
        if self.record_decimation < 1 {
            return Err(Error::config("record_decimation must be >= 1"));
        }
        if !(self.balancer_coefficient > 0.0 && self.balancer_coefficient <= 1.0) {
            return Err(Error::config(
                "balancer filter coefficient must lie in (0, 1]",
            ));
        }
        if let InitialState::Explicit(s) = &self.initial_state {
            s.validate(params)?;
        }
        Ok(())
    }
}

/// Allowed output-voltage band with the outage margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageBand {
    pub u_min: f64,
    pub u_max: f64,
    pub epsilon: f64,
}

impl VoltageBand {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_min.is_finite() && self.u_max.is_finite() && self.u_min < self.u_max) {
            return Err(Error::config("voltage band needs u_min < u_max"));
        }
        positive("epsilon", self.epsilon)
    }

    /// Worst excursion beyond the band with margin; negative inside.
    pub fn outage(&self, u_lo: f64, u_hi: f64) -> f64 {
        (self.u_min + self.epsilon - u_lo).max(u_hi - self.u_max - self.epsilon)
    }
}

/// Recorded time series. Per-sample rows of `phase_currents` and
/// `duty_per_phase` have one entry per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub u_o: Vec<f64>,
    pub u_c: Vec<f64>,
    pub phase_currents: Vec<Vec<f64>>,
    pub duty_total: Vec<f64>,
    pub duty_per_phase: Vec<Vec<f64>>,
    pub r_load: Vec<f64>,
    pub error: Vec<f64>,
    /// Balancer filter contents at the start and at the end of the run.
    pub filtered_currents_initial: Vec<f64>,
    pub filtered_currents_final: Vec<f64>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_phases(&self) -> usize {
        self.phase_currents.first().map_or(0, Vec::len)
    }

    /// Writes the trace as CSV:
    /// `time_s,u_o_V,u_c_V,i_1_A..i_N_A,d0,d_1..d_N,r_load_ohm,error_V`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.n_phases();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(trace_header(n))?;
        let mut row: Vec<String> = Vec::with_capacity(6 + 2 * n);
        for k in 0..self.len() {
            row.clear();
            row.push(self.times[k].to_string());
            row.push(self.u_o[k].to_string());
            row.push(self.u_c[k].to_string());
            row.extend(self.phase_currents[k].iter().map(f64::to_string));
            row.push(self.duty_total[k].to_string());
            row.extend(self.duty_per_phase[k].iter().map(f64::to_string));
            row.push(self.r_load[k].to_string());
            row.push(self.error[k].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn trace_header(n_phases: usize) -> Vec<String> {
    let mut h = vec!["time_s".into(), "u_o_V".into(), "u_c_V".into()];
    h.extend((1..=n_phases).map(|j| format!("i_{j}_A")));
    h.push("d0".into());
    h.extend((1..=n_phases).map(|j| format!("d_{j}")));
    h.push("r_load_ohm".into());
    h.push("error_V".into());
    h
}

/// Transient-quality statistics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub u_min: f64,
    pub u_max: f64,
    /// Population standard deviation of the error samples (V).
    pub error_stddev: f64,
    pub outage: f64,
    /// The last tenth of the trace stays inside the band.
    pub settled: bool,
    pub phase_current_spread_final: f64,
    pub diverged: bool,
}

/// Runs the closed loop.
///
/// A run whose state leaves the finite range, or exceeds
/// [`DIVERGENCE_LIMIT`], stops early; the trace recorded so far is returned
/// with `metrics.diverged` set.
pub fn simulate(
    params: &ConverterParams,
    gains: &ControllerGains,
    profile: &LoadProfile,
    config: &SimConfig,
    band: &VoltageBand,
) -> Result<(SimTrace, SimMetrics)> {
    params.validate()?;
    gains.validate()?;
    config.validate(params)?;
    band.validate()?;

    let n = params.n_phases;
    let period = params.pwm_period;
    let steps = config.steps_per_pwm_period;
    let dt = period / steps as f64;
    let total_steps = ((config.t_end / dt).round() as usize).max(1);

    let r0 = profile.resistance(0.0);
    let (mut currents, mut u_c, mut ctrl, mut duties) = match &config.initial_state {
        InitialState::Zero => (
            vec![0.0; n],
            0.0,
            ControllerState::default(),
            vec![0.0; n],
        ),
        InitialState::Warm => {
            let i_phase = gains.u_ref / (n as f64 * r0);
            let drop = i_phase * params.r_winding;
            let ctrl = ControllerState {
                u_ai: drop,
                e_prev: 0.0,
                initialized: true,
                ..ControllerState::default()
            };
            let d = ((gains.u_ref + drop) / params.u_source).clamp(0.0, 1.0);
            (vec![i_phase; n], gains.u_ref, ctrl, vec![d; n])
        }
        InitialState::Explicit(s) => (
            s.phase_currents.clone(),
            s.capacitor_voltage,
            ControllerState::default(),
            vec![0.0; n],
        ),
    };

    let mut balancer = BalancerState::new(currents.clone(), config.balancer_coefficient)?;
    let mut trace = SimTrace {
        filtered_currents_initial: balancer.filtered_currents.clone(),
        ..SimTrace::default()
    };
    let capacity = total_steps / config.record_decimation + 2;
    trace.times.reserve(capacity);
    trace.u_o.reserve(capacity);
    trace.u_c.reserve(capacity);
    trace.phase_currents.reserve(capacity);
    trace.duty_total.reserve(capacity);
    trace.duty_per_phase.reserve(capacity);
    trace.r_load.reserve(capacity);
    trace.error.reserve(capacity);

    let mut stepper = Rk4::new(n);
    let mut period_avg = currents.clone();
    let mut before = currents.clone();
    let mut avg_acc = vec![0.0; n];
    let mut d0 = duties.iter().sum::<f64>() / n as f64;
    let mut diverged = false;

    let mut step = 0usize;
    while step < total_steps {
        let t = step as f64 * dt;
        let sub = step % steps;

        if sub == 0 {
            let r = profile.resistance(t);
            let total: f64 = currents.iter().sum();
            let u_o = output_voltage_raw(u_c, total, params.r_esr, r);
            let d2u = match config.second_derivative_source {
                SecondDerivativeSource::ModelBased => {
                    // duty-averaged rates over the cycle just finished
                    let d_sum: f64 = currents
                        .iter()
                        .zip(&duties)
                        .map(|(&i, &d)| {
                            (d * params.u_source - i * params.r_winding - u_o) / params.inductance
                        })
                        .sum();
                    let d_uc = (total - u_o / r) / params.capacitance;
                    let state = PlantState {
                        phase_currents: currents.clone(),
                        capacitor_voltage: u_c,
                        time: t,
                    };
                    Some(estimate_d2uc(&state, params, r, d_sum, d_uc))
                }
                SecondDerivativeSource::FiniteDifference => None,
            };
            let (next, d) = controller_step(&ctrl, gains, u_o, d2u, period, params.u_source);
            ctrl = next;
            d0 = d;

            if step > 0 {
                balancer = update_balancer(&balancer, &period_avg);
            }
            duties = match config.balancing {
                Balancing::Off => vec![d0; n],
                Balancing::Arithmetic => balance_duties(&balancer, d0, n),
            };
            avg_acc.iter_mut().for_each(|a| *a = 0.0);
        }

        if step % config.record_decimation == 0 {
            record(&mut trace, t, &currents, u_c, d0, &duties, profile, params, gains);
        }

        before.copy_from_slice(&currents);
        stepper.step(
            &mut currents,
            &mut u_c,
            t,
            sub,
            steps,
            dt,
            params,
            profile,
            &duties,
        );
        for ((a, &b), &c) in avg_acc.iter_mut().zip(&before).zip(&currents) {
            *a += 0.5 * (b + c) / steps as f64;
        }
        step += 1;
        if sub + 1 == steps {
            period_avg.copy_from_slice(&avg_acc);
        }

        if !state_ok(&currents, u_c) {
            diverged = true;
            break;
        }
    }

    let t_last = step as f64 * dt;
    if !diverged || state_ok(&currents, u_c) {
        record(&mut trace, t_last, &currents, u_c, d0, &duties, profile, params, gains);
    }
    trace.filtered_currents_final = balancer.filtered_currents.clone();

    let mut metrics = if trace.is_empty() {
        SimMetrics {
            u_min: f64::NAN,
            u_max: f64::NAN,
            error_stddev: f64::NAN,
            outage: f64::INFINITY,
            settled: false,
            phase_current_spread_final: f64::NAN,
            diverged: true,
        }
    } else {
        compute_metrics(&trace, band)?
    };
    metrics.diverged = diverged;
    if diverged {
        metrics.settled = false;
    }
    Ok((trace, metrics))
}

fn state_ok(currents: &[f64], u_c: f64) -> bool {
    let ok = |v: f64| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT;
    ok(u_c) && currents.iter().all(|&i| ok(i))
}

#[allow(clippy::too_many_arguments)]
fn record(
    trace: &mut SimTrace,
    t: f64,
    currents: &[f64],
    u_c: f64,
    d0: f64,
    duties: &[f64],
    profile: &LoadProfile,
    params: &ConverterParams,
    gains: &ControllerGains,
) {
    let r = profile.resistance(t);
    let u_o = output_voltage_raw(u_c, currents.iter().sum(), params.r_esr, r);
    trace.times.push(t);
    trace.u_o.push(u_o);
    trace.u_c.push(u_c);
    trace.phase_currents.push(currents.to_vec());
    trace.duty_total.push(d0);
    trace.duty_per_phase.push(duties.to_vec());
    trace.r_load.push(r);
    trace.error.push(gains.u_ref - u_o);
}

/// Classical RK4 over the state `[I_1..I_N, U_C]` with scratch buffers.
struct Rk4 {
    alpha: Vec<f64>,
    k: [Vec<f64>; 4],
    kv: [f64; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 {
            alpha: vec![0.0; n],
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            kv: [0.0; 4],
            tmp: vec![0.0; n],
        }
    }

    /// `t` is absolute time (for the load); `sub` / `steps` locate the step
    /// inside the current PWM period (for the switch function).
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        currents: &mut [f64],
        u_c: &mut f64,
        t: f64,
        sub: usize,
        steps: usize,
        dt: f64,
        params: &ConverterParams,
        profile: &LoadProfile,
        duties: &[f64],
    ) {
        const C: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
        for stage in 0..4 {
            let h = C[stage] * dt;
            for (j, a) in self.alpha.iter_mut().enumerate() {
                let x = (sub as f64 + C[stage]) / steps as f64;
                *a = if switch_state_fraction(x, j, params.n_phases, duties[j]) {
                    1.0
                } else {
                    0.0
                };
            }
            let uc_stage = if stage == 0 {
                self.tmp.copy_from_slice(currents);
                *u_c
            } else {
                let prev = &self.k[stage - 1];
                for ((x, &i), &k) in self.tmp.iter_mut().zip(currents.iter()).zip(prev) {
                    *x = i + h * k;
                }
                *u_c + h * self.kv[stage - 1]
            };
            let r = profile.resistance(t + h);
            self.kv[stage] =
                derivatives_into(&self.tmp, uc_stage, params, r, &self.alpha, &mut self.k[stage]);
        }
        let w = dt / 6.0;
        for (j, i) in currents.iter_mut().enumerate() {
            *i += w * (self.k[0][j] + 2.0 * self.k[1][j] + 2.0 * self.k[2][j] + self.k[3][j]);
        }
        *u_c += w * (self.kv[0] + 2.0 * self.kv[1] + 2.0 * self.kv[2] + self.kv[3]);
    }
}

/// Extrema, error spread and band outage of a recorded trace.
pub fn compute_metrics(trace: &SimTrace, band: &VoltageBand) -> Result<SimMetrics> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let (u_lo, u_hi) = trace
        .u_o
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| {
            (lo.min(u), hi.max(u))
        });
    let error_stddev = population_stddev(&trace.error);
    let tail_start = trace.len() - trace.len().div_ceil(10);
    let settled = trace.u_o[tail_start..]
        .iter()
        .all(|&u| u >= band.u_min && u <= band.u_max);
    let spread_final = if trace.filtered_currents_final.is_empty() {
        trace.phase_currents.last().map_or(0.0, |c| spread(c))
    } else {
        spread(&trace.filtered_currents_final)
    };
    Ok(SimMetrics {
        u_min: u_lo,
        u_max: u_hi,
        error_stddev,
        outage: band.outage(u_lo, u_hi),
        settled,
        phase_current_spread_final: spread_final,
        diverged: false,
    })
}

fn population_stddev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}
