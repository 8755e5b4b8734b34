//! Reduced two-state model and Routh-Hurwitz screen.
//!
//! Aggregating the phases into the total current `I = sum(I_j)` and using
//! the regulation error `e` as the second state gives
//!
//! ```text
//! d/dt [I, e]^T = [[B1, g1], [-c, G]] [I, e]^T + forcing
//! ```
//!
//! with `B1 = -R_L/L`, `g1 = N/L`, `c = 1/(rC) - R_C R_L/(r L)` and
//! `G = -(1/(r C R_load) + R_C N_f/(r L))`. For a 2x2 matrix the
//! Routh-Hurwitz conditions on `lambda^2 - tr lambda + det` reduce to
//! `tr < 0` and `det > 0`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::converter::ConverterParams;

/// Choice of the ESR scaling factor `r` and the phase count `N_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RFactor {
    /// `r = 1 + R_C/R_load`, `N_f = N`.
    Auto,
    Explicit { r: f64, n_f: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    /// `B1 = -R_L / L` (1/s).
    pub b1: f64,
    /// `g1 = N / L`.
    pub g1: f64,
    /// `c`; the matrix entry coupling `I` into `de/dt` is `-c`.
    pub c: f64,
    /// `G` (1/s).
    pub g_diag: f64,
    pub r_factor: f64,
    pub n_f: f64,
}

impl ReducedModel {
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.b1, self.g1], [-self.c, self.g_diag]]
    }

    pub fn trace(&self) -> f64 {
        self.b1 + self.g_diag
    }

    pub fn determinant(&self) -> f64 {
        self.b1 * self.g_diag + self.c * self.g1
    }
}

pub fn build_reduced_model(params: &ConverterParams, r_load: f64, r_factor: RFactor) -> ReducedModel {
    let l = params.inductance;
    let cap = params.capacitance;
    let (r, n_f) = match r_factor {
        RFactor::Auto => (1.0 + params.r_esr / r_load, params.n_phases as f64),
        RFactor::Explicit { r, n_f } => (r, n_f),
    };
    ReducedModel {
        b1: -params.r_winding / l,
        g1: params.n_phases as f64 / l,
        c: 1.0 / (r * cap) - params.r_esr * params.r_winding / (r * l),
        g_diag: -(1.0 / (r * cap * r_load) + params.r_esr * n_f / (r * l)),
        r_factor: r,
        n_f,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `B1 + G`, the (negated) linear coefficient of the characteristic
    /// polynomial.
    pub trace: f64,
    /// `B1 G + c g1`, the constant coefficient.
    pub determinant: f64,
    pub routh_hurwitz_stable: bool,
    pub eigenvalue_1_re: f64,
    pub eigenvalue_1_im: f64,
    pub eigenvalue_2_re: f64,
    pub eigenvalue_2_im: f64,
    pub eigen_stable: bool,
    pub agreement: bool,
}

impl StabilityReport {
    pub fn eigenvalues(&self) -> [Complex64; 2] {
        [
            Complex64::new(self.eigenvalue_1_re, self.eigenvalue_1_im),
            Complex64::new(self.eigenvalue_2_re, self.eigenvalue_2_im),
        ]
    }
}

/// Roots of `lambda^2 - trace * lambda + det`.
pub fn eigenvalues(trace: f64, det: f64) -> [Complex64; 2] {
    let half = 0.5 * trace;
    let disc = half * half - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        // avoid cancellation in the smaller-magnitude root
        let big = if half >= 0.0 { half + s } else { half - s };
        let small = if big != 0.0 { det / big } else { 0.0 };
        [Complex64::new(big, 0.0), Complex64::new(small, 0.0)]
    } else {
        let s = (-disc).sqrt();
        [Complex64::new(half, s), Complex64::new(half, -s)]
    }
}

pub fn routh_hurwitz(model: &ReducedModel) -> StabilityReport {
    let trace = model.trace();
    let det = model.determinant();
    let rh = trace < 0.0 && det > 0.0;
    let [l1, l2] = eigenvalues(trace, det);
    let eig = l1.re.max(l2.re) < 0.0;
    StabilityReport {
        trace,
        determinant: det,
        routh_hurwitz_stable: rh,
        eigenvalue_1_re: l1.re,
        eigenvalue_1_im: l1.im,
        eigenvalue_2_re: l2.re,
        eigenvalue_2_im: l2.im,
        eigen_stable: eig,
        agreement: rh == eig,
    }
}
