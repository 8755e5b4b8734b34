//! Particle-swarm tuning of the controller constants.
//!
//! The search vector is `[K_p, K_d, K_dd, K_i, T_d, T_dd]`. Candidates are
//! scored by
//!
//! ```text
//! F(X) = ln(max(o(X), 0) + eps) - ln(eps) + sigma(e(X))
//! ```
//!
//! where `o` is the band outage of the simulated output voltage and `sigma`
//! the standard deviation of the regulation error over the run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::ControllerGains;
use crate::converter::{ConverterParams, LoadProfile};
use crate::error::{Error, Result};
use crate::simulator::{simulate, SimConfig, SimMetrics, VoltageBand};

/// Objective value assigned to runs that diverge.
pub const DIVERGENCE_PENALTY: f64 = 1e9;

/// Number of tunable constants.
pub const GAIN_DIM: usize = 6;

/// Axis names of the gain vector, in order.
pub const GAIN_AXES: [&str; GAIN_DIM] = ["k_p", "k_d", "k_dd", "k_i", "t_d", "t_dd"];

/// Everything needed to simulate one operating case.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: ConverterParams,
    pub profile: LoadProfile,
    pub sim: SimConfig,
    pub band: VoltageBand,
    pub u_ref: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.sim.validate(&self.params)?;
        self.band.validate()?;
        crate::converter::positive("u_ref", self.u_ref)
    }

    pub fn run(&self, gains: &ControllerGains) -> Result<(crate::SimTrace, SimMetrics)> {
        simulate(&self.params, gains, &self.profile, &self.sim, &self.band)
    }

    pub fn with_profile(&self, profile: LoadProfile) -> Scenario {
        Scenario {
            profile,
            ..self.clone()
        }
    }
}

/// Maps `[K_p, K_d, K_dd, K_i, T_d, T_dd]` onto controller gains.
pub fn gains_from_vector(x: &[f64; GAIN_DIM], u_ref: f64) -> ControllerGains {
    ControllerGains {
        k_p: x[0],
        k_d: x[1],
        k_dd: x[2],
        k_i: x[3],
        t_d: x[4],
        t_dd: x[5],
        u_ref,
    }
}

pub fn vector_from_gains(g: &ControllerGains) -> [f64; GAIN_DIM] {
    [g.k_p, g.k_d, g.k_dd, g.k_i, g.t_d, g.t_dd]
}

/// Objective value from run metrics.
pub fn objective_from_metrics(metrics: &SimMetrics, epsilon: f64) -> f64 {
    if metrics.diverged || !metrics.outage.is_finite() || !metrics.error_stddev.is_finite() {
        return DIVERGENCE_PENALTY;
    }
    let barrier = (metrics.outage.max(0.0) + epsilon).ln() - epsilon.ln();
    barrier + metrics.error_stddev
}

/// Simulates `gains_vector` on `scenario` and scores it.
pub fn objective(gains_vector: &[f64; GAIN_DIM], scenario: &Scenario) -> Result<f64> {
    let gains = gains_from_vector(gains_vector, scenario.u_ref);
    let (_, metrics) = scenario.run(&gains)?;
    Ok(objective_from_metrics(&metrics, scenario.band.epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub max_iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub velocity_clamp_fraction: f64,
    pub seed: u64,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

impl PsoConfig {
    /// Constriction-equivalent defaults over the given box.
    pub fn new(x_min: Vec<f64>, x_max: Vec<f64>) -> Self {
        PsoConfig {
            swarm_size: 30,
            max_iterations: 100,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            velocity_clamp_fraction: 0.5,
            seed: 0,
            x_min,
            x_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.swarm_size < 2 {
            return Err(Error::config("swarm_size must be >= 2"));
        }
        self.validate_box()?;
        if !(self.velocity_clamp_fraction > 0.0 && self.velocity_clamp_fraction <= 1.0) {
            return Err(Error::config("velocity_clamp_fraction must lie in (0, 1]"));
        }
        for (name, v) in [
            ("inertia", self.inertia),
            ("cognitive", self.cognitive),
            ("social", self.social),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    fn validate_box(&self) -> Result<()> {
        if self.x_min.len() != self.x_max.len() || self.x_min.is_empty() {
            return Err(Error::config("x_min and x_max must have the same non-zero length"));
        }
        for (i, (lo, hi)) in self.x_min.iter().zip(&self.x_max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "box axis {i} needs x_min < x_max (got {lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    fn v_max(&self) -> Vec<f64> {
        self.x_min
            .iter()
            .zip(&self.x_max)
            .map(|(lo, hi)| (hi - lo) * self.velocity_clamp_fraction)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_value: f64,
    pub current_value: f64,
}

impl Particle {
    /// A particle at `position` that has not been evaluated yet.
    pub fn at(position: Vec<f64>, velocity: Vec<f64>) -> Self {
        Particle {
            best_position: position.clone(),
            position,
            velocity,
            best_value: f64::INFINITY,
            current_value: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best_position: Vec<f64>,
    pub best_value: f64,
    /// Global-best value after initialization (index 0) and after every
    /// iteration.
    pub history: Vec<f64>,
    /// Global-best position matching each `history` entry.
    pub history_positions: Vec<Vec<f64>>,
    pub evaluations: usize,
}

/// Global-best swarm with inertia weight, per-axis velocity clamp and
/// clip-to-box boundary handling.
pub struct Swarm<'a, F> {
    config: &'a PsoConfig,
    objective: F,
    particles: Vec<Particle>,
    best_position: Vec<f64>,
    best_value: f64,
    rng: ChaCha8Rng,
    v_max: Vec<f64>,
    evaluations: usize,
}

impl<'a, F> Swarm<'a, F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    /// Uniform positions in the box, uniform velocities within the clamp.
    pub fn new(config: &'a PsoConfig, objective: F) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v_max = config.v_max();
        let particles = (0..config.swarm_size)
            .map(|_| {
                let position = config
                    .x_min
                    .iter()
                    .zip(&config.x_max)
                    .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
                    .collect();
                let velocity = v_max.iter().map(|&v| rng.gen_range(-v..=v)).collect();
                Particle::at(position, velocity)
            })
            .collect();
        Ok(Self::assemble(config, objective, particles, rng, v_max))
    }

    /// Starts from caller-supplied particles; only the box is checked, so a
    /// single particle is allowed.
    pub fn from_particles(config: &'a PsoConfig, objective: F, particles: Vec<Particle>) -> Result<Self> {
        config.validate_box()?;
        if particles.is_empty() || particles.iter().any(|p| {
            p.position.len() != config.dim() || p.velocity.len() != config.dim()
        }) {
            return Err(Error::config("particles must match the box dimension"));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v_max = config.v_max();
        Ok(Self::assemble(config, objective, particles, rng, v_max))
    }

    fn assemble(
        config: &'a PsoConfig,
        objective: F,
        particles: Vec<Particle>,
        rng: ChaCha8Rng,
        v_max: Vec<f64>,
    ) -> Self {
        let mut swarm = Swarm {
            config,
            objective,
            best_position: particles[0].position.clone(),
            best_value: f64::INFINITY,
            particles,
            rng,
            v_max,
            evaluations: 0,
        };
        swarm.evaluate();
        swarm
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn best(&self) -> (&[f64], f64) {
        (&self.best_position, self.best_value)
    }

    /// Evaluates every particle in parallel, then updates the bests in
    /// particle order so the result does not depend on scheduling.
    fn evaluate(&mut self) {
        let objective = &self.objective;
        let values: Vec<f64> = self
            .particles
            .par_iter()
            .map(|p| {
                let v = objective(&p.position);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect();
        self.evaluations += values.len();
        for (p, v) in self.particles.iter_mut().zip(values) {
            p.current_value = v;
            if v < p.best_value {
                p.best_value = v;
                p.best_position.clone_from(&p.position);
            }
            if v < self.best_value {
                self.best_value = v;
                self.best_position.clone_from(&p.position);
            }
        }
    }

    /// One velocity/position update followed by evaluation.
    pub fn step(&mut self) {
        let cfg = self.config;
        for p in &mut self.particles {
            for d in 0..p.position.len() {
                let r1: f64 = self.rng.gen();
                let r2: f64 = self.rng.gen();
                let x = p.position[d];
                let mut v = cfg.inertia * p.velocity[d]
                    + cfg.cognitive * r1 * (p.best_position[d] - x)
                    + cfg.social * r2 * (self.best_position[d] - x);
                v = v.clamp(-self.v_max[d], self.v_max[d]);
                let mut next = x + v;
                if next < cfg.x_min[d] {
                    next = cfg.x_min[d];
                    v = 0.0;
                } else if next > cfg.x_max[d] {
                    next = cfg.x_max[d];
                    v = 0.0;
                }
                p.position[d] = next;
                p.velocity[d] = v;
            }
        }
        self.evaluate();
    }

    pub fn run(mut self) -> PsoResult {
        let mut history = vec![self.best_value];
        let mut history_positions = vec![self.best_position.clone()];
        for _ in 0..self.config.max_iterations {
            self.step();
            history.push(self.best_value);
            history_positions.push(self.best_position.clone());
        }
        PsoResult {
            best_position: self.best_position,
            best_value: self.best_value,
            history,
            history_positions,
            evaluations: self.evaluations,
        }
    }
}

/// Minimizes `objective` over the configured box.
pub fn pso_minimize<F>(objective: F, config: &PsoConfig) -> Result<PsoResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(Swarm::new(config, objective)?.run())
}

/// Tuning setup: the box over `[K_p, K_d, K_dd, K_i, T_d, T_dd]` and an
/// optional fixed `T_d` that removes that axis from the search.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub pso: PsoConfig,
    pub fixed_t_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub gains: ControllerGains,
    pub best_value: f64,
    pub history: Vec<f64>,
    /// Full six-component gain vectors matching `history`.
    pub history_gains: Vec<[f64; GAIN_DIM]>,
}

/// Runs PSO on the scenario objective. `tune.pso` must span all six axes;
/// when `T_d` is fixed its axis is dropped from the search.
pub fn tune(scenario: &Scenario, tune: &TuneConfig) -> Result<TuneResult> {
    scenario.validate()?;
    let pso = &tune.pso;
    if pso.dim() != GAIN_DIM {
        return Err(Error::config(format!(
            "the gain box needs {GAIN_DIM} entries [k_p, k_d, k_dd, k_i, t_d, t_dd]"
        )));
    }
    pso.validate()?;
    if pso.x_min[4] <= 0.0 || pso.x_min[5] <= 0.0 {
        return Err(Error::config("t_d and t_dd lower bounds must be > 0"));
    }
    for (i, name) in GAIN_AXES.iter().enumerate().take(4) {
        if pso.x_min[i] < 0.0 {
            return Err(Error::config(format!("{name} lower bound must be >= 0")));
        }
    }
    if let Some(t_d) = tune.fixed_t_d {
        crate::converter::positive("fixed t_d", t_d)?;
    }

    let expand = |x: &[f64]| -> [f64; GAIN_DIM] {
        match tune.fixed_t_d {
            Some(t_d) => [x[0], x[1], x[2], x[3], t_d, x[4]],
            None => [x[0], x[1], x[2], x[3], x[4], x[5]],
        }
    };
    let search = match tune.fixed_t_d {
        Some(_) => {
            let drop = |v: &[f64]| -> Vec<f64> {
                v.iter().enumerate().filter(|(i, _)| *i != 4).map(|(_, &x)| x).collect()
            };
            PsoConfig {
                x_min: drop(&pso.x_min),
                x_max: drop(&pso.x_max),
                ..pso.clone()
            }
        }
        None => pso.clone(),
    };

    let f = |x: &[f64]| match objective(&expand(x), scenario) {
        Ok(v) => v,
        Err(_) => DIVERGENCE_PENALTY,
    };
    let result = pso_minimize(f, &search)?;
    Ok(TuneResult {
        gains: gains_from_vector(&expand(&result.best_position), scenario.u_ref),
        best_value: result.best_value,
        history: result.history,
        history_gains: result.history_positions.iter().map(|x| expand(x)).collect(),
    })
}

/// Which aspect of the load disturbance a sweep variant scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Magnitude,
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub kind: SweepKind,
    pub factor: f64,
    pub metrics: SimMetrics,
}

/// Re-simulates `gains` with the load surge scaled in magnitude and,
/// separately, in ramp rate by every factor.
pub fn robustness_sweep(
    gains: &ControllerGains,
    scenario: &Scenario,
    scale_factors: &[f64],
) -> Result<Vec<SweepEntry>> {
    let mut variants = Vec::with_capacity(2 * scale_factors.len());
    for kind in [SweepKind::Magnitude, SweepKind::Rate] {
        for &factor in scale_factors {
            let profile = match kind {
                SweepKind::Magnitude => scenario.profile.with_magnitude_scale(factor)?,
                SweepKind::Rate => scenario.profile.with_rate_scale(factor)?,
            };
            variants.push((kind, factor, scenario.with_profile(profile)));
        }
    }
    variants
        .into_par_iter()
        .map(|(kind, factor, s)| {
            let (_, metrics) = s.run(gains)?;
            Ok(SweepEntry {
                kind,
                factor,
                metrics,
            })
        })
        .collect()
}
