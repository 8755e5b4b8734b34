//! Simulation and controller tuning for interleaved multiphase buck
//! converters under fast, large load transients.
//!
//! * [`converter`]: plant equations, PWM switch function and load profiles.
//! * [`controller`]: PID law with filtered first and second derivative
//!   terms, plus the arithmetic phase-current balancer.
//! * [`simulator`]: fixed-step RK4 closed-loop simulation with
//!   control-cycle-synchronous duty updates.
//! * [`stability`]: reduced 2x2 model and Routh-Hurwitz screen.
//! * [`optimizer`]: particle-swarm tuning and robustness sweeps.

pub mod controller;
pub mod converter;
pub mod error;
pub mod optimizer;
pub mod simulator;
pub mod stability;

pub use controller::{ControllerGains, ControllerState};
pub use converter::{ConverterParams, LoadProfile, LoadSegment, PlantState};
pub use error::{Error, Result};
pub use optimizer::{PsoConfig, Scenario};
pub use simulator::{simulate, SimConfig, SimMetrics, SimTrace, VoltageBand};
