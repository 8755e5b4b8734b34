//! Voltage controller and phase-current balancer.
//!
//! The controller is a PID law extended with a filtered second-derivative
//! term. Per control cycle of length `dt`:
//!
//! ```text
//! e     = U_ref - U_O
//! T_d  dU_ad/dt + U_ad = K_d  de/dt        (backward Euler)
//! U_ai = K_i * integral(e)                 (rectangle rule)
//! T_dd dU_dd/dt + U_dd = K_dd d2e/dt2      (backward Euler)
//! U_a  = U_ad + U_ai + K_p e + U_dd
//! D_0  = clamp((U_ref + U_a) / U_S, 0, 1)
//! ```
//!
//! The balancer redistributes `D_0` across phases from low-pass filtered
//! phase currents, without a second feedback controller.

use serde::{Deserialize, Serialize};

use crate::converter::{non_negative, positive, ConverterParams, PlantState};
use crate::error::{Error, Result};

/// Spread of filtered phase currents below which the balancer leaves all
/// phases at the common duty (A).
pub const CURRENT_EPSILON: f64 = 1e-9;

/// Default low-pass coefficient of the balancer, per control cycle.
pub const DEFAULT_BALANCER_COEFFICIENT: f64 = 0.1;

/// Tunable controller constants (SI units) and the voltage reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub k_p: f64,
    /// 1/s
    pub k_i: f64,
    /// s
    pub k_d: f64,
    /// s^2
    pub k_dd: f64,
    /// Derivative filter time constant (s).
    pub t_d: f64,
    /// Second-derivative filter time constant (s).
    pub t_dd: f64,
    /// Output voltage reference (V).
    pub u_ref: f64,
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        non_negative("k_p", self.k_p)?;
        non_negative("k_i", self.k_i)?;
        non_negative("k_d", self.k_d)?;
        non_negative("k_dd", self.k_dd)?;
        positive("t_d", self.t_d)?;
        positive("t_dd", self.t_dd)?;
        positive("u_ref", self.u_ref)?;
        Ok(())
    }

    /// All gains zero: the duty is the open-loop ratio `U_ref / U_S`.
    pub fn open_loop(u_ref: f64) -> Self {
        ControllerGains {
            k_p: 0.0,
            k_i: 0.0,
            k_d: 0.0,
            k_dd: 0.0,
            t_d: 1.0,
            t_dd: 1.0,
            u_ref,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    /// Filtered derivative correction (V).
    pub u_ad: f64,
    /// Integral correction (V).
    pub u_ai: f64,
    /// Filtered second-derivative correction (V).
    pub u_dd: f64,
    pub e_prev: f64,
    pub de_prev: f64,
    pub initialized: bool,
    /// Set when the last duty command was clamped to `[0, 1]`.
    pub saturated: bool,
}

impl ControllerState {
    /// Total correction `U_a` for error `e`.
    pub fn correction(&self, gains: &ControllerGains, e: f64) -> f64 {
        self.u_ad + self.u_ai + gains.k_p * e + self.u_dd
    }
}

/// Advances the controller by one control cycle and returns the new state
/// with the commanded common duty `D_0`.
///
/// `d2u_estimate` is the model-based second derivative of the capacitor
/// voltage; when absent, `d2e/dt2` is formed by differencing `de/dt`.
pub fn controller_step(
    state: &ControllerState,
    gains: &ControllerGains,
    u_o: f64,
    d2u_estimate: Option<f64>,
    dt: f64,
    u_source: f64,
) -> (ControllerState, f64) {
    let e = gains.u_ref - u_o;
    let (de, d2e) = if state.initialized {
        let de = (e - state.e_prev) / dt;
        let d2e = match d2u_estimate {
            Some(d2u) => -d2u,
            None => (de - state.de_prev) / dt,
        };
        (de, d2e)
    } else {
        (0.0, 0.0)
    };

    let u_ad = (gains.t_d * state.u_ad + dt * gains.k_d * de) / (gains.t_d + dt);
    let u_ai = state.u_ai + gains.k_i * e * dt;
    let u_dd = (gains.t_dd * state.u_dd + dt * gains.k_dd * d2e) / (gains.t_dd + dt);

    let u_a = u_ad + u_ai + gains.k_p * e + u_dd;
    let raw = (gains.u_ref + u_a) / u_source;
    let duty = raw.clamp(0.0, 1.0);

    let next = ControllerState {
        u_ad,
        u_ai,
        u_dd,
        e_prev: e,
        de_prev: de,
        initialized: true,
        saturated: duty != raw,
    };
    (next, duty)
}

/// Model-based second derivative of the capacitor voltage,
/// `(sum dI_j/dt - dU_C/dt / R_load) / C`.
pub fn estimate_d2uc(
    _state: &PlantState,
    params: &ConverterParams,
    r_load: f64,
    d_current_sum: f64,
    d_voltage: f64,
) -> f64 {
    (d_current_sum - d_voltage / r_load) / params.capacitance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub filtered_currents: Vec<f64>,
    pub filter_coefficient: f64,
}

impl BalancerState {
    pub fn new(initial_currents: Vec<f64>, filter_coefficient: f64) -> Result<Self> {
        if !(filter_coefficient > 0.0 && filter_coefficient <= 1.0) {
            return Err(Error::config(format!(
                "balancer filter coefficient must lie in (0, 1], got {filter_coefficient}"
            )));
        }
        Ok(BalancerState {
            filtered_currents: initial_currents,
            filter_coefficient,
        })
    }

    /// Max minus min of the filtered currents.
    pub fn spread(&self) -> f64 {
        spread(&self.filtered_currents)
    }
}

pub(crate) fn spread(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// One low-pass step of the filtered phase currents.
pub fn update_balancer(state: &BalancerState, phase_currents: &[f64]) -> BalancerState {
    let beta = state.filter_coefficient;
    let filtered_currents = state
        .filtered_currents
        .iter()
        .zip(phase_currents)
        .map(|(&f, &i)| (1.0 - beta) * f + beta * i)
        .collect();
    BalancerState {
        filtered_currents,
        filter_coefficient: beta,
    }
}

/// Per-phase duties: `D_i = (1 - Ihat_i / I_sum) * D_0 * N / (N - 1)` with
/// `Ihat_i` the filtered current above the smallest one.
pub fn balance_duties(state: &BalancerState, d0: f64, n_phases: usize) -> Vec<f64> {
    if n_phases < 2 {
        return vec![d0; n_phases];
    }
    let currents = &state.filtered_currents;
    let min = currents.iter().copied().fold(f64::INFINITY, f64::min);
    let i_sum: f64 = currents.iter().map(|&i| i - min).sum();
    if !(i_sum >= CURRENT_EPSILON) {
        return vec![d0; n_phases];
    }
    let scale = d0 * n_phases as f64 / (n_phases as f64 - 1.0);
    currents
        .iter()
        .map(|&i| ((1.0 - (i - min) / i_sum) * scale).clamp(0.0, 1.0))
        .collect()
}
