//! Plant model of an interleaved N-phase buck converter.
//!
//! The phases are identical inductive branches (inductance `L`, winding
//! resistance `R_L`) switched between the source `U_S` and ground, all
//! feeding one equivalent output capacitor `C` with series resistance
//! `R_C` and a time-varying resistive load. Every quantity is in SI units.
//!
//! State equations:
//!
//! ```text
//! dI_j/dt = (alpha_j * U_S - I_j * R_L - U_O) / L
//! dU_C/dt = (sum(I_j) - U_O / R_load) / C
//! U_O     = U_C + R_C * (sum(I_j) - U_O / R_load)
//! ```
//!
//! The last relation is algebraic and is solved in closed form by
//! [`output_voltage`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the converter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterParams {
    pub n_phases: usize,
    /// Per-phase inductance (H), identical for all phases.
    pub inductance: f64,
    /// Equivalent output capacitance (F).
    pub capacitance: f64,
    /// Series resistance of each phase branch (ohm).
    pub r_winding: f64,
    /// Capacitor ESR (ohm).
    pub r_esr: f64,
    /// Source voltage (V).
    pub u_source: f64,
    /// PWM and control-cycle period (s).
    pub pwm_period: f64,
}

impl ConverterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_phases < 1 {
            return Err(Error::config("n_phases must satisfy n_phases >= 1"));
        }
        positive("inductance", self.inductance)?;
        positive("capacitance", self.capacitance)?;
        positive("pwm_period", self.pwm_period)?;
        positive("u_source", self.u_source)?;
        non_negative("r_winding", self.r_winding)?;
        non_negative("r_esr", self.r_esr)?;
        Ok(())
    }

    /// Switch-on delay of phase `phase_index` within the PWM period.
    pub fn phase_offset(&self, phase_index: usize) -> f64 {
        phase_index as f64 * self.pwm_period / self.n_phases as f64
    }
}

pub(crate) fn positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be finite and > 0 (got {value})")))
    }
}

pub(crate) fn non_negative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be finite and >= 0 (got {value})")))
    }
}

/// Continuous state of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub phase_currents: Vec<f64>,
    pub capacitor_voltage: f64,
    pub time: f64,
}

impl PlantState {
    pub fn zero(n_phases: usize) -> Self {
        PlantState {
            phase_currents: vec![0.0; n_phases],
            capacitor_voltage: 0.0,
            time: 0.0,
        }
    }

    pub fn total_current(&self) -> f64 {
        self.phase_currents.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.capacitor_voltage.is_finite() && self.phase_currents.iter().all(|i| i.is_finite())
    }

    pub fn validate(&self, params: &ConverterParams) -> Result<()> {
        if self.phase_currents.len() != params.n_phases {
            return Err(Error::config(format!(
                "initial state has {} phase currents, expected {}",
                self.phase_currents.len(),
                params.n_phases
            )));
        }
        if !self.is_finite() || !self.time.is_finite() {
            return Err(Error::config("initial state must be finite"));
        }
        Ok(())
    }
}

/// Derivatives of the plant state.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantDerivatives {
    pub d_currents: Vec<f64>,
    pub d_voltage: f64,
}

impl PlantDerivatives {
    pub fn total_current_rate(&self) -> f64 {
        self.d_currents.iter().sum()
    }
}

/// One piece of a [`LoadProfile`]: from `start_time` on the resistance is
/// `resistance_start + ramp_rate * (t - start_time)` until the next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSegment {
    pub start_time: f64,
    pub resistance_start: f64,
    pub ramp_rate: f64,
}

/// Piecewise-linear load resistance with a lower clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    segments: Vec<LoadSegment>,
    r_min: f64,
}

impl LoadProfile {
    pub fn new(segments: Vec<LoadSegment>, r_min: f64) -> Result<Self> {
        positive("r_min", r_min)?;
        if segments.is_empty() {
            return Err(Error::config("load profile needs at least one segment"));
        }
        for s in &segments {
            if !(s.start_time.is_finite() && s.ramp_rate.is_finite()) {
                return Err(Error::config("load segment values must be finite"));
            }
            positive("resistance_start", s.resistance_start)?;
        }
        if segments.windows(2).any(|w| w[1].start_time <= w[0].start_time) {
            return Err(Error::config(
                "load segments must be sorted strictly by start_time",
            ));
        }
        Ok(LoadProfile { segments, r_min })
    }

    /// Constant resistance for all time.
    pub fn constant(resistance: f64) -> Result<Self> {
        Self::new(
            vec![LoadSegment {
                start_time: 0.0,
                resistance_start: resistance,
                ramp_rate: 0.0,
            }],
            resistance,
        )
    }

    /// Constant `r_start` until `t_step`, then a linear ramp at `rate`
    /// (ohm/s) clamped at `r_end`.
    pub fn step(r_start: f64, t_step: f64, rate: f64, r_end: f64) -> Result<Self> {
        let mut segments = vec![LoadSegment {
            start_time: 0.0,
            resistance_start: r_start,
            ramp_rate: 0.0,
        }];
        if t_step > 0.0 {
            segments.push(LoadSegment {
                start_time: t_step,
                resistance_start: r_start,
                ramp_rate: rate,
            });
        } else {
            segments[0].ramp_rate = rate;
        }
        Self::new(segments, r_end.min(r_start))
    }

    pub fn segments(&self) -> &[LoadSegment] {
        &self.segments
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    /// Load resistance at time `t`.
    pub fn resistance(&self, t: f64) -> f64 {
        let idx = self.segments.partition_point(|s| s.start_time <= t);
        let r = if idx == 0 {
            self.segments[0].resistance_start
        } else {
            let s = &self.segments[idx - 1];
            s.resistance_start + s.ramp_rate * (t - s.start_time)
        };
        r.max(self.r_min)
    }

    /// Smallest resistance reached on `[0, t_end]`.
    pub fn min_resistance(&self, t_end: f64) -> f64 {
        let mut r = self.resistance(0.0).min(self.resistance(t_end));
        for (i, s) in self.segments.iter().enumerate() {
            if s.start_time > t_end {
                break;
            }
            let seg_end = self
                .segments
                .get(i + 1)
                .map_or(t_end, |n| n.start_time.min(t_end));
            r = r
                .min(self.resistance(s.start_time.max(0.0)))
                .min(self.resistance(seg_end));
            // the segment value just before the next segment starts
            let before_next = s.resistance_start + s.ramp_rate * (seg_end - s.start_time);
            r = r.min(before_next.max(self.r_min));
        }
        r
    }

    /// Scales the size of the load-current surge: the conductance step from
    /// the initial resistance down to the clamp is multiplied by `factor`.
    pub fn with_magnitude_scale(&self, factor: f64) -> Result<Self> {
        check_scale(factor)?;
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let r0 = self.segments[0].resistance_start;
        if self.r_min >= r0 {
            return Ok(self.clone());
        }
        let g0 = 1.0 / r0;
        let g_end = g0 + factor * (1.0 / self.r_min - g0);
        Self::new(self.segments.clone(), 1.0 / g_end)
    }

    /// Multiplies every ramp rate by `factor`.
    pub fn with_rate_scale(&self, factor: f64) -> Result<Self> {
        check_scale(factor)?;
        let segments = self
            .segments
            .iter()
            .map(|s| LoadSegment {
                ramp_rate: s.ramp_rate * factor,
                ..*s
            })
            .collect();
        Self::new(segments, self.r_min)
    }
}

fn check_scale(factor: f64) -> Result<()> {
    if factor > 0.0 && factor <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("scale factor must lie in (0, 1], got {factor}")))
    }
}

/// PWM switch function of one phase: `true` while the phase is connected to
/// the source.
///
/// The phase is on iff `(t - offset_j) mod T <= duty * T` with
/// `offset_j = j * T / N`; the remainder is taken in `[0, T)`.
pub fn switch_state(t: f64, phase_index: usize, params: &ConverterParams, duty: f64) -> bool {
    let period = params.pwm_period;
    let phase = (t - params.phase_offset(phase_index)).rem_euclid(period);
    phase <= duty * period
}

/// Same rule with time given as a fraction of the period. Phase edges that
/// fall on a substep boundary then compare exactly.
pub(crate) fn switch_state_fraction(x: f64, phase_index: usize, n_phases: usize, duty: f64) -> bool {
    let offset = phase_index as f64 / n_phases as f64;
    (x - offset).rem_euclid(1.0) <= duty
}

/// Solves the algebraic output-voltage relation for `U_O`.
pub fn output_voltage(state: &PlantState, params: &ConverterParams, r_load: f64) -> f64 {
    output_voltage_raw(
        state.capacitor_voltage,
        state.total_current(),
        params.r_esr,
        r_load,
    )
}

#[inline]
pub(crate) fn output_voltage_raw(u_c: f64, total_current: f64, r_esr: f64, r_load: f64) -> f64 {
    (u_c + r_esr * total_current) / (1.0 + r_esr / r_load)
}

/// Right-hand sides of the phase-current and capacitor-voltage equations.
///
/// `switch_states[j]` is the switch function of phase `j` (0 or 1, or a
/// duty value when evaluating the averaged model).
pub fn plant_derivatives(
    state: &PlantState,
    params: &ConverterParams,
    r_load: f64,
    switch_states: &[f64],
) -> PlantDerivatives {
    let mut d_currents = vec![0.0; params.n_phases];
    let d_voltage = derivatives_into(
        &state.phase_currents,
        state.capacitor_voltage,
        params,
        r_load,
        switch_states,
        &mut d_currents,
    );
    PlantDerivatives {
        d_currents,
        d_voltage,
    }
}

/// Allocation-free form of [`plant_derivatives`]; returns `dU_C/dt`.
#[inline]
pub(crate) fn derivatives_into(
    currents: &[f64],
    u_c: f64,
    params: &ConverterParams,
    r_load: f64,
    switch_states: &[f64],
    d_currents: &mut [f64],
) -> f64 {
    let total: f64 = currents.iter().sum();
    let u_o = output_voltage_raw(u_c, total, params.r_esr, r_load);
    let inv_l = 1.0 / params.inductance;
    for ((d, &i), &alpha) in d_currents.iter_mut().zip(currents).zip(switch_states) {
        *d = (alpha * params.u_source - i * params.r_winding - u_o) * inv_l;
    }
    (total - u_o / r_load) / params.capacitance
}
