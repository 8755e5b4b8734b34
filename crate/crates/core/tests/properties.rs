use phasebuck::controller::controller_step;
use phasebuck::converter::{output_voltage, plant_derivatives, switch_state};
use phasebuck::optimizer::{objective_from_metrics, Swarm, DIVERGENCE_PENALTY};
use phasebuck::{ControllerGains, ControllerState, ConverterParams, LoadProfile, PlantState, PsoConfig, SimMetrics};
use proptest::prelude::*;

fn params(n: usize, period: f64) -> ConverterParams {
    ConverterParams {
        n_phases: n,
        inductance: 1e-6,
        capacitance: 1e-4,
        r_winding: 0.0,
        r_esr: 0.0,
        u_source: 12.0,
        pwm_period: period,
    }
}

fn metrics(outage: f64, stddev: f64, diverged: bool) -> SimMetrics {
    SimMetrics {
        u_min: 0.0,
        u_max: 0.0,
        error_stddev: stddev,
        outage,
        settled: false,
        phase_current_spread_final: 0.0,
        diverged,
    }
}

proptest! {
    #[test]
    fn switch_state_is_periodic(
        x in 0.0f64..20.0, duty in 0.0f64..1.0, n in 1usize..9, j in 0usize..8,
        period in 1e-7f64..1e-4,
    ) {
        let j = j % n;
        let p = params(n, period);
        let t = x * period;
        // keep away from the two edges where rounding can flip the comparison
        let ph = (t - p.phase_offset(j)).rem_euclid(period) / period;
        prop_assume!((ph - duty).abs() > 1e-9 && ph > 1e-9 && ph < 1.0 - 1e-9);
        prop_assert_eq!(switch_state(t, j, &p, duty), switch_state(t + period, j, &p, duty));
    }

    #[test]
    fn full_duty_is_always_on(x in -5.0f64..20.0, n in 1usize..9, j in 0usize..8) {
        let p = params(n, 1e-6);
        prop_assert!(switch_state(x * 1e-6, j % n, &p, 1.0));
    }

    #[test]
    fn zero_duty_is_off_between_grid_points(x in 0.0f64..20.0, n in 1usize..9, j in 0usize..8) {
        let p = params(n, 1e-6);
        let j = j % n;
        let t = x * 1e-6;
        let ph = (t - p.phase_offset(j)).rem_euclid(1e-6) / 1e-6;
        prop_assume!(ph > 1e-9);
        prop_assert!(!switch_state(t, j, &p, 0.0));
    }

    #[test]
    fn output_voltage_satisfies_its_relation(
        u_c in -50.0f64..50.0,
        currents in prop::collection::vec(-100.0f64..100.0, 1..9),
        r_c in 0.0f64..1.0, r_load in 1e-3f64..1e4,
    ) {
        let n = currents.len();
        let p = ConverterParams { r_esr: r_c, ..params(n, 1e-6) };
        let s = PlantState { phase_currents: currents, capacitor_voltage: u_c, time: 0.0 };
        let u_o = output_voltage(&s, &p, r_load);
        let total = s.total_current();
        let lhs = u_o;
        let rhs = u_c + r_c * (total - u_o / r_load);
        let scale = u_c.abs() + r_c * total.abs() + u_o.abs();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn averaged_steady_state_is_an_equilibrium(
        d in 0.01f64..1.0, r_load in 0.01f64..1e3, n in 1usize..9,
    ) {
        let p = params(n, 1e-6);
        let u = d * p.u_source;
        let s = PlantState {
            phase_currents: vec![u / (n as f64 * r_load); n],
            capacitor_voltage: u,
            time: 0.0,
        };
        let der = plant_derivatives(&s, &p, r_load, &vec![d; n]);
        for di in &der.d_currents {
            prop_assert!(di.abs() <= 1e-9 * u / p.inductance);
        }
        prop_assert!(der.d_voltage.abs() <= 1e-9 * u / (r_load * p.capacitance));
    }

    #[test]
    fn load_never_drops_below_floor(
        r0 in 1.0f64..1e3, t_step in 0.0f64..1e-3, rate in -1e9f64..1e6,
        floor_frac in 0.01f64..1.0, t in 0.0f64..1e-2,
    ) {
        let floor = r0 * floor_frac;
        let profile = LoadProfile::step(r0, t_step, rate, floor).unwrap();
        prop_assert!(profile.resistance(t) >= profile.r_min());
    }

    #[test]
    fn duty_stays_in_unit_interval(
        k_p in 0.0f64..1e3, k_i in 0.0f64..1e6, k_d in 0.0f64..1e-1, k_dd in 0.0f64..1e-3,
        outputs in prop::collection::vec(-20.0f64..20.0, 1..40),
        d2 in prop::option::of(-1e9f64..1e9),
    ) {
        let g = ControllerGains { k_p, k_i, k_d, k_dd, t_d: 1e-5, t_dd: 1e-5, u_ref: 5.0 };
        let mut s = ControllerState::default();
        for u_o in outputs {
            let (next, d) = controller_step(&s, &g, u_o, d2, 1e-6, 12.0);
            prop_assert!((0.0..=1.0).contains(&d));
            s = next;
        }
    }

    #[test]
    fn objective_is_non_negative(outage in -10.0f64..10.0, stddev in 0.0f64..10.0, eps in 1e-9f64..1e-1) {
        prop_assert!(objective_from_metrics(&metrics(outage, stddev, false), eps) >= 0.0);
    }

    #[test]
    fn divergence_penalty_dominates(outage in -10.0f64..100.0, stddev in 0.0f64..100.0, eps in 1e-9f64..1e-1) {
        let ok = objective_from_metrics(&metrics(outage, stddev, false), eps);
        let bad = objective_from_metrics(&metrics(outage, stddev, true), eps);
        prop_assert_eq!(bad, DIVERGENCE_PENALTY);
        prop_assert!(bad > ok);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_position_stays_in_box(
        seed in any::<u64>(),
        lo in prop::collection::vec(-5.0f64..0.0, 3),
        width in prop::collection::vec(0.1f64..5.0, 3),
        target in prop::collection::vec(-20.0f64..20.0, 3),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
        let cfg = PsoConfig {
            swarm_size: 8,
            max_iterations: 30,
            seed,
            ..PsoConfig::new(lo.clone(), hi.clone())
        };
        // optimum usually outside the box, so particles press on the walls
        let f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut swarm = Swarm::new(&cfg, f).unwrap();
        let mut last = swarm.best().1;
        for _ in 0..cfg.max_iterations {
            swarm.step();
            for p in swarm.particles() {
                for d in 0..3 {
                    prop_assert!(p.position[d] >= lo[d] && p.position[d] <= hi[d]);
                }
            }
            let best = swarm.best().1;
            prop_assert!(best <= last);
            last = best;
        }
    }
}
