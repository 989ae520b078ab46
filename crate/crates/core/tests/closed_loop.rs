use mrac_core::harness::{metrics_with, run_scenario, ReferenceSignal, Scenario, SimTrace};
use mrac_core::scenario::{builtin, load};
use mrac_core::trace_io::write_trace_csv;
use mrac_core::plant::{AgentDynamics, Fleet};
use mrac_core::{Error, Mat, Vector};
use proptest::prelude::*;

fn with_duration(name: &str, duration: f64) -> Scenario {
    let mut s = builtin(name).unwrap();
    s.duration = duration;
    s
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn leader_gap(trace: &SimTrace, k: usize) -> f64 {
    let xm = trace.xm(k);
    let n = xm.len();
    trace
        .x(k)
        .iter()
        .enumerate()
        .fold(0.0, |m, (j, v)| m.max((v - xm[j % n]).abs()))
}

#[test]
fn matched_gains_track_the_leader() {
    let s = with_duration("example1", 80.0).with_matched_gains().unwrap();
    let trace = run_scenario(&s).unwrap();
    for k in 0..trace.len() {
        assert!(leader_gap(&trace, k) <= 1e-6, "t={}", trace.times[k]);
    }
}

#[test]
fn matched_gains_are_a_fixed_point_of_adaptation() {
    let mut s = with_duration("example1", 80.0).with_matched_gains().unwrap();
    s.controller.adapt = true;
    let trace = run_scenario(&s).unwrap();
    let first: Vec<f64> = trace.theta(0).iter().chain(trace.phi_phi(0)).copied().collect();
    for k in 0..trace.len() {
        assert!(max_abs(trace.ea(k)) <= 1e-6, "t={}", trace.times[k]);
        assert!(max_abs(trace.phi(k)) <= 1e-6, "t={}", trace.times[k]);
        let now: Vec<f64> = trace.theta(k).iter().chain(trace.phi_phi(k)).copied().collect();
        let drift = now.iter().zip(&first).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(drift <= 1e-6, "gain drift {drift} at t={}", trace.times[k]);
    }
}

#[test]
fn balanced_ring_keeps_matched_error_at_zero() {
    let s = with_duration("example2", 80.0).with_matched_gains().unwrap();
    let trace = run_scenario(&s).unwrap();
    for k in 0..trace.len() {
        assert!(max_abs(trace.e(k)) <= 1e-6, "t={}", trace.times[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn common_initial_state_has_zero_sync_error(c in prop::collection::vec(-5.0f64..5.0, 2), ring in any::<bool>()) {
        let mut s = with_duration(if ring { "example2" } else { "example1" }, 0.0).with_matched_gains().unwrap();
        s.reference = ReferenceSignal::zero();
        s.xm0 = Vector::from_slice(&c);
        s.x0 = Vector::from(c.iter().copied().cycle().take(8).collect::<Vec<_>>());
        let trace = run_scenario(&s).unwrap();
        prop_assert!(max_abs(trace.e(0)) <= 1e-12);
    }
}

#[test]
fn zero_input_zero_state_stays_at_rest() {
    let mut s = with_duration("example2", 30.0);
    s.reference = ReferenceSignal::zero();
    let trace = run_scenario(&s).unwrap();
    for k in 0..trace.len() {
        for part in [trace.x(k), trace.xm(k), trace.xa(k), trace.e(k), trace.ea(k), trace.u(k), trace.ua(k), trace.phi(k)] {
            assert!(part.iter().all(|&v| v == 0.0), "t={}", trace.times[k]);
        }
        assert_eq!(trace.theta(k), trace.theta(0));
        assert_eq!(trace.phi_phi(k), trace.phi_phi(0));
    }
}

#[test]
fn identical_scenarios_give_identical_traces() {
    let s = with_duration("example2", 30.0);
    let (a, b) = (run_scenario(&s).unwrap(), run_scenario(&s).unwrap());
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_trace_csv(&a, &mut ca).unwrap();
    write_trace_csv(&b, &mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn predictions_match_the_realized_leader() {
    let s = with_duration("example1", 60.0);
    let trace = run_scenario(&s).unwrap();
    let ahead = (s.tau_u / s.step).round() as usize;
    let mut checked = 0;
    for k in 0..trace.len() - ahead {
        let Some(actual) = trace.leader_regressor(k + ahead, s.tau_x, s.step) else {
            continue;
        };
        let gap = actual
            .iter()
            .zip(trace.prediction(k))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(gap <= 1e-6, "t={} gap={gap}", trace.times[k]);
        checked += 1;
    }
    assert!(checked > 1000);
}

#[test]
fn lyapunov_function_descends_after_transient() {
    for name in ["example1", "example2"] {
        let trace = run_scenario(&with_duration(name, 60.0)).unwrap();
        let m = metrics_with(&trace, 6.0, 10.0).unwrap();
        assert!(m.max_vd_slope <= 1e-6, "{name}: slope {}", m.max_vd_slope);
    }
}

#[test]
fn adaptive_runs_stay_bounded() {
    for name in ["example1", "example2"] {
        let trace = run_scenario(&with_duration(name, 100.0)).unwrap();
        assert!(trace.data.iter().all(|v| v.is_finite()), "{name}");
        for k in 0..trace.len() {
            assert!(max_abs(trace.theta(k)) < 10.0 && max_abs(trace.phi_phi(k)) < 10.0);
        }
    }
}

#[test]
fn overrides_drive_the_run() {
    let s = load("example1", &["simulation.duration=1".into(), "simulation.step=0.01".into()]).unwrap();
    let trace = run_scenario(&s).unwrap();
    assert_eq!(trace.len(), 101);
}

#[test]
fn unstable_agent_is_reported_as_divergence() {
    let mut s = with_duration("example1", 200.0);
    let mut agents = s.fleet.agents().to_vec();
    agents[0] = AgentDynamics::new(
        Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
        agents[0].a_zeta.clone(),
        agents[0].b.clone(),
    )
    .unwrap();
    s.fleet = Fleet::new(agents).unwrap();
    let err = run_scenario(&s).unwrap_err();
    assert!(matches!(err.root(), Error::DivergenceDetected { .. }), "{err:?}");
    assert!(matches!(err, Error::AtTime { .. }), "{err:?}");
}
