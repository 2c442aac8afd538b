use std::path::Path;

use counsel_core::graph::{Event, SessionStatus};
use counsel_core::harness::{load_scenarios, run_scenario, run_suite, HarnessEnv, Verdict};

fn scenarios_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/scenarios"))
}

#[test]
fn shipped_scenarios_all_pass() {
    let scenarios = load_scenarios(scenarios_dir()).unwrap();
    assert!(scenarios.len() >= 10);
    let report = run_suite(&HarnessEnv::builtin(), &scenarios).unwrap();
    for r in &report.results {
        assert_eq!(r.verdict, Verdict::Pass, "{}: {:?}", r.scenario_id, r.failures);
    }
    assert!(report.all_passed());
    assert_eq!(report.failed + report.escalated, 0);
}

#[test]
fn scenario_ids_are_unique() {
    let scenarios = load_scenarios(scenarios_dir()).unwrap();
    let mut ids: Vec<&str> = scenarios.iter().map(|s| s.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), scenarios.len());
}

#[test]
fn completed_sessions_end_with_a_recommendation_reply() {
    let scenarios = load_scenarios(scenarios_dir()).unwrap();
    let env = HarnessEnv::builtin();
    for s in scenarios.iter().filter(|s| !s.expected.escalation) {
        let r = run_scenario(&env, s).unwrap();
        assert_eq!(r.status, SessionStatus::Complete, "{}", s.id);
        let rec = r
            .transcript
            .iter()
            .rposition(|e| matches!(e.event, Event::Recommendation(_)));
        let last_reply = r
            .transcript
            .iter()
            .rposition(|e| matches!(e.event, Event::Reply { .. }));
        assert!(rec.unwrap() < last_reply.unwrap(), "{}", s.id);
    }
}

#[test]
fn a_scenario_with_a_wrong_expectation_fails() {
    let mut s = load_scenarios(scenarios_dir()).unwrap().remove(0);
    s.expected.safe = Some(vec!["ulipra-30".into()]);
    let r = run_scenario(&HarnessEnv::builtin(), &s).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    assert!(r.failures.iter().any(|f| f.contains("safe")), "{:?}", r.failures);
}

#[test]
fn missing_directory_is_an_io_error() {
    let err = load_scenarios(Path::new("/nonexistent/scenarios")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/scenarios"));
}

#[test]
fn expectations_naming_unknown_products_are_rejected() {
    let mut s = load_scenarios(scenarios_dir()).unwrap().remove(0);
    s.expected.safe = Some(vec!["no-such-pill".into()]);
    let err = run_scenario(&HarnessEnv::builtin(), &s).unwrap_err();
    assert!(err.to_string().contains("no-such-pill"), "{err}");
}

#[test]
fn empty_directory_is_an_empty_passing_suite() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = load_scenarios(dir.path()).unwrap();
    let report = run_suite(&HarnessEnv::builtin(), &scenarios).unwrap();
    assert!(report.results.is_empty());
    assert!(report.all_passed());
}
