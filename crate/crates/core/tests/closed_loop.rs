use std::sync::OnceLock;

use cellsim_core::engine::{
    run_baseline, run_closed_loop, trace_closed_loop, trace_open_loop, ScenarioSpec, PRESETS,
};
use cellsim_core::geometry::Airspace;
use cellsim_core::mission::{MissionEvent, MissionMode};
use cellsim_core::scenario::{generate_configurations, GeneratorOptions, TrafficConfiguration};
use proptest::prelude::*;

fn set() -> &'static [TrafficConfiguration] {
    static SET: OnceLock<Vec<TrafficConfiguration>> = OnceLock::new();
    SET.get_or_init(|| generate_configurations(&Airspace::default(), &GeneratorOptions::default()))
}

fn pick(i: usize) -> TrafficConfiguration {
    let s = set();
    s[i % s.len()]
}

fn spec(name: &str) -> ScenarioSpec {
    ScenarioSpec::preset(name).unwrap()
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn mode_changes_form_legal_chains(i in any::<usize>(), p in 0usize..PRESETS.len()) {
        let cfg = pick(i);
        let r = run_closed_loop(&cfg.assignments, &spec(PRESETS[p])).unwrap();
        for id in 0..4u8 {
            let mut mode = MissionMode::Cruise;
            for e in r.events.iter().filter(|e| e.aircraft_id == id) {
                if let MissionEvent::ModeChange { from, to } = e.event {
                    prop_assert_eq!(from, mode);
                    prop_assert!(from.can_transition_to(to), "{:?} -> {:?}", from, to);
                    mode = to;
                }
            }
            let arrived = r.aircraft.iter().find(|a| a.aircraft_id == id).unwrap().arrived;
            prop_assert_eq!(arrived, mode == MissionMode::Done);
        }
    }

    #[test]
    fn outcome_flags_are_consistent(i in any::<usize>(), p in 0usize..PRESETS.len()) {
        let s = spec(PRESETS[p]);
        let r = run_closed_loop(&pick(i).assignments, &s).unwrap();
        let timeout_events = r.events.iter().filter(|e| e.event == MissionEvent::Timeout).count();
        prop_assert_eq!(r.timeout, timeout_events > 0);
        prop_assert_eq!(r.timeout, r.aircraft.iter().any(|a| !a.arrived));
        prop_assert!(!r.livelock_witness || r.timeout);
        let lo = r.los(2000.0).unwrap();
        let hi = r.los(4000.0).unwrap();
        for f in [lo, hi] {
            prop_assert!(!f.gated || f.ungated);
        }
        prop_assert!(!lo.ungated || hi.ungated);
        prop_assert!(!lo.gated || hi.gated);
        let min_sep = r.min_separation.iter().map(|p| p.min_horizontal_ft).fold(f64::INFINITY, f64::min);
        for f in &r.los {
            if min_sep < f.threshold_ft - 1e-6 {
                prop_assert!(f.ungated, "min sep {} under {} not flagged", min_sep, f.threshold_ft);
            }
            if f.ungated {
                prop_assert!(min_sep < f.threshold_ft + 1e-6);
            }
        }
        for a in &r.aircraft {
            // the direct route is the shortest path up to the capture radius
            let slack = s.limits.fuel_rate_cruise * s.capture_radius / s.cruise_speed;
            prop_assert!(a.fuel >= a.baseline_fuel - slack - 1e-9, "{} < {}", a.fuel, a.baseline_fuel);
        }
    }

    #[test]
    fn without_daa_aircraft_fly_their_baseline(i in any::<usize>()) {
        let s = spec("off_2d");
        let cfg = pick(i);
        let r = run_closed_loop(&cfg.assignments, &s).unwrap();
        let b = run_baseline(&cfg.assignments, &s).unwrap();
        prop_assert!(!r.timeout);
        prop_assert!(r.maneuvers.is_empty());
        for (a, f) in r.aircraft.iter().zip(&b.flights) {
            prop_assert!((a.fuel - f.fuel).abs() <= 1e-6 * f.fuel, "{} vs {}", a.fuel, f.fuel);
            prop_assert!((a.flight_time - f.duration).abs() < 1e-6);
        }
        for (x, y) in r.los.iter().zip(&b.los) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn top_priority_aircraft_never_deviates_under_extrinsic_priorities(i in any::<usize>(), three_d in any::<bool>()) {
        let s = spec(if three_d { "ref_ep_3d_4k" } else { "ref_ep_2d_4k" });
        let cfg = pick(i);
        let b = run_baseline(&cfg.assignments, &s).unwrap();
        let (r, trace) = trace_closed_loop(&cfg.assignments, &s).unwrap();
        prop_assert_eq!(r.aircraft[0].deviation_count, 0);
        prop_assert!(r.aircraft[0].arrived);
        for step in &trace {
            let st = step[0];
            if st.mode == MissionMode::Done {
                break;
            }
            let dev = st.position.horizontal().distance(b.flights[0].position_at(st.time));
            prop_assert!(dev < 0.5, "deviation {} m at t={}", dev, st.time);
            prop_assert!((st.position.alt_ft - 500.0).abs() < 1e-9);
        }
    }

    #[test]
    fn open_loop_trace_is_a_prefix_of_closed_loop(i in any::<usize>(), p in 0usize..PRESETS.len()) {
        let s = spec(PRESETS[p]);
        let cfg = pick(i);
        let (_, closed) = trace_closed_loop(&cfg.assignments, &s).unwrap();
        let (open, prefix) = trace_open_loop(&cfg.assignments, &s).unwrap();
        prop_assert!(prefix.len() <= closed.len());
        prop_assert_eq!(&closed[..prefix.len()], &prefix[..]);
        if !open.stopped_on_coc {
            prop_assert_eq!(prefix.len(), closed.len());
        }
    }

    #[test]
    fn runs_are_deterministic(i in any::<usize>(), p in 0usize..PRESETS.len()) {
        let s = spec(PRESETS[p]);
        let cfg = pick(i);
        let a = run_closed_loop(&cfg.assignments, &s).unwrap();
        let b = run_closed_loop(&cfg.assignments, &s).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
