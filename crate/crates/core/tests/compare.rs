mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::*;
use trk_core::compare::{
    align, align_snapshots, compare_states, diff_code, line_timeline, view, CompareError, Facet, FacetView, SessionWindow,
    StateRef,
};
use trk_core::demos;
use trk_core::guest::{Datum, Env, Program};
use trk_core::host::{Host, SCENE_KIND};
use trk_core::monitor::{run_monitored, Entry};
use trk_core::replay::{replay_session, CodeSource, ReplayPlan};
use trk_core::store::{SessionId, StoreHandle};

const COUNTER: &str = "\
n = 3
@monitor(granularity=\"line\")
def count(start):
    i = start
    total = 0
    while i < n:
        total = total + i
        i = i + 1
    return total
a = count(0)
b = count(1)
";

fn record_src(src: &str, store: &StoreHandle) -> SessionId {
    let program = Program::from_source(src, "t.trk").unwrap();
    run_monitored(&program, &Entry::TopLevel, &mut Host::seeded(0).env(), &config(&program), store, "t").unwrap().session
}

#[test]
fn variables_view_of_a_call() {
    let store = memory_store();
    let r = record(&demos::BINARY_SEARCH, &Host::default(), Entry::TopLevel, &store);
    let s = store.read();
    let call = s.session_calls(r.session)[0].id;
    let FacetView::Variables { locals, globals, return_value } = view(&s, StateRef::Call(call), Facet::Variables).unwrap() else {
        panic!()
    };
    assert_eq!(locals.keys().collect::<Vec<_>>(), ["arr", "target"]);
    assert!(globals.is_empty());
    assert_eq!(return_value, Some(Datum::Int(-1)));
}

#[test]
fn code_view_of_a_snapshot_reports_both_line_numbers() {
    let store = memory_store();
    let r = record(&demos::BINARY_SEARCH, &Host::default(), Entry::TopLevel, &store);
    let s = store.read();
    let call = s.session_calls(r.session)[0];
    let snap = s.call_snapshots(call.id)[2].id;
    let FacetView::Code { function, source, line, file_line, .. } = view(&s, StateRef::Snapshot(snap), Facet::Code).unwrap() else {
        panic!()
    };
    assert_eq!(function, "binary_search");
    assert_eq!(line, Some(4));
    assert_eq!(file_line, Some(6));
    assert_eq!(source.lines().nth(3).unwrap().trim(), "while left <= right:");
}

#[test]
fn events_and_hooks_views() {
    let store = memory_store();
    let r = record_flappy(&store);
    let s = store.read();
    let call = s.session_calls(r.session)[0].id;
    let FacetView::Events(events) = view(&s, StateRef::Call(call), Facet::Events).unwrap() else { panic!() };
    let names: Vec<&str> = events.iter().map(|e| e.callable.as_str()).collect();
    assert!(names.contains(&"get_events") && names.contains(&"rand_int"), "{names:?}");
    let FacetView::Hooks(hooks) = view(&s, StateRef::Call(call), Facet::Hooks).unwrap() else { panic!() };
    assert_eq!(hooks["capture_scene"].0, SCENE_KIND);
}

#[test]
fn a_state_equals_itself() {
    let store = memory_store();
    let r = record_flappy(&store);
    let s = store.read();
    for c in s.session_calls(r.session).iter().step_by(37) {
        assert!(compare_states(&s, StateRef::Call(c.id), StateRef::Call(c.id)).unwrap().is_empty());
    }
}

#[test]
fn calls_and_snapshots_do_not_compare() {
    let store = memory_store();
    let r = record(&demos::BINARY_SEARCH, &Host::default(), Entry::TopLevel, &store);
    let s = store.read();
    let call = s.session_calls(r.session)[0].id;
    let snap = s.call_snapshots(call)[0].id;
    let err = compare_states(&s, StateRef::Call(call), StateRef::Snapshot(snap)).unwrap_err();
    assert!(matches!(err, CompareError::GranularityMismatch));
}

#[test]
fn frames_of_one_run_differ_in_state_and_scene() {
    let store = memory_store();
    let r = record_flappy(&store);
    let s = store.read();
    let calls = s.session_calls(r.session);
    let d = compare_states(&s, StateRef::Call(calls[10].id), StateRef::Call(calls[11].id)).unwrap();
    assert!(d.changed_names().contains("frame"));
    assert!(!d.code.changed());
    let j = d.to_json();
    assert_eq!(j["a"]["kind"], "call");
    assert!(j["variables"]["changed"].as_array().unwrap().iter().any(|c| c["name"] == "frame"));
}

#[test]
fn faithful_replay_aligns_without_gaps() {
    let store = memory_store();
    let src = record_src(COUNTER, &store);
    let rep = replay_session(&store, src, &ReplayPlan::default(), replay_host(&mut Env::new())).unwrap();
    let s = store.read();
    let pairs = align(&s, &SessionWindow::whole(src), &SessionWindow::whole(rep.session)).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| !p.has_gap()));
    for p in &pairs {
        for q in &p.snapshots {
            let d = compare_states(&s, StateRef::Snapshot(q.a.unwrap()), StateRef::Snapshot(q.b.unwrap())).unwrap();
            assert!(d.is_empty());
        }
    }
}

#[test]
fn an_extra_loop_iteration_is_a_gap_on_the_variant_side() {
    let store = memory_store();
    let src = record_src(COUNTER, &store);
    let mut plan = ReplayPlan::default();
    plan.manual_globals.insert("n".into(), Datum::Int(4));
    let rep = replay_session(&store, src, &plan, replay_host(&mut Env::new())).unwrap();
    let s = store.read();
    let pairs = align(&s, &SessionWindow::whole(src), &SessionWindow::whole(rep.session)).unwrap();
    for p in &pairs {
        let gaps: Vec<_> = p.snapshots.iter().filter(|q| q.is_gap()).collect();
        // One more pass through the loop: a head visit and two body lines.
        assert_eq!(gaps.len(), 3);
        assert!(gaps.iter().all(|q| q.a.is_none() && q.b.is_some()));
        let na = s.call_snapshots(p.a.unwrap()).len();
        let nb = s.call_snapshots(p.b.unwrap()).len();
        assert_eq!(p.snapshots.len(), nb);
        assert_eq!(nb - na, 3);
    }
}

#[test]
fn a_code_edit_shows_in_the_mapping() {
    let store = memory_store();
    let src = record_src(COUNTER, &store);
    let variant = "def count(start):\n    i = start\n    total = 100\n    while i < n:\n        total = total + i\n        i = i + 1\n    return total\n";
    let mut plan = ReplayPlan::default();
    plan.code_override.insert("count".into(), CodeSource::Text(variant.into()));
    let rep = replay_session(&store, src, &plan, replay_host(&mut Env::new())).unwrap();
    let s = store.read();
    let (a, b) = (s.session_calls(src)[0].id, s.session_calls(rep.session)[0].id);
    let d = compare_states(&s, StateRef::Call(a), StateRef::Call(b)).unwrap();
    assert!(d.code.changed());
    assert_eq!(d.code.mapping.unmatched_a, BTreeSet::from([3]));
    assert_eq!(d.code.mapping.unmatched_b, BTreeSet::from([3]));
    // The edited line has no partner; the rest pair up one to one.
    let pairs = align_snapshots(&s, a, b).unwrap();
    let gaps = pairs.iter().filter(|p| p.is_gap()).count();
    assert_eq!(gaps, 2);
}

#[test]
fn loop_head_timeline() {
    let store = memory_store();
    let src = record_src(COUNTER, &store);
    let s = store.read();
    let call = s.session_calls(src)[0].id;
    let visits = line_timeline(&s, call, 4).unwrap();
    let is: Vec<&Datum> = visits.iter().map(|(_, v)| &v["i"]).collect();
    assert_eq!(is, [&Datum::Int(0), &Datum::Int(1), &Datum::Int(2), &Datum::Int(3)]);
    assert!(visits.iter().all(|(_, v)| v["n"] == Datum::Int(3)));
}

/// Length of a longest common subsequence, by the textbook table.
fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            t[i + 1][j + 1] = if a[i] == b[j] { t[i][j] + 1 } else { t[i][j + 1].max(t[i + 1][j]) };
        }
    }
    t[a.len()][b.len()]
}

fn lines() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a = 1", "b = 2", "return a", "    x", "", "pass"]), 0..14)
}

proptest! {
    #[test]
    fn code_diffs_are_maximal_monotone_matchings(a in lines(), b in lines()) {
        let (ta, tb) = (a.join("\n"), b.join("\n"));
        let m = diff_code(&ta, &tb);
        prop_assert!(m.pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        for (x, y) in &m.pairs {
            prop_assert_eq!(a[*x as usize - 1], b[*y as usize - 1]);
        }
        let la: Vec<&str> = ta.lines().collect();
        let lb: Vec<&str> = tb.lines().collect();
        prop_assert_eq!(m.pairs.len(), lcs_len(&la, &lb));
        prop_assert_eq!(m.pairs.len() + m.unmatched_a.len(), la.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_b.len(), lb.len());
        prop_assert_eq!(diff_code(&ta, &ta).is_identity(), true);
    }

    #[test]
    fn comparison_is_symmetric(body in common::gen::body(), s1 in 0u64..50, s2 in 0u64..50) {
        let src = common::gen::render(&body, "@monitor(granularity=\"line\", track=[rand_int])", 2);
        let program = Program::from_source(&src, "gen.trk").unwrap();
        let store = memory_store();
        let ra = run_monitored(&program, &Entry::TopLevel, &mut Host::seeded(s1).env(), &config(&program), &store, "a");
        let rb = run_monitored(&program, &Entry::TopLevel, &mut Host::seeded(s2).env(), &config(&program), &store, "b");
        let (ra, rb) = (ra.map_err(|e| TestCaseError::fail(e.to_string()))?, rb.map_err(|e| TestCaseError::fail(e.to_string()))?);
        let s = store.read();
        let pairs = align(&s, &SessionWindow::whole(ra.session), &SessionWindow::whole(rb.session)).unwrap();
        for p in pairs {
            let (Some(x), Some(y)) = (p.a, p.b) else { continue };
            let ab = compare_states(&s, StateRef::Call(x), StateRef::Call(y)).unwrap();
            let ba = compare_states(&s, StateRef::Call(y), StateRef::Call(x)).unwrap();
            prop_assert_eq!(&ab.variables.added, &ba.variables.removed);
            prop_assert_eq!(&ab.variables.removed, &ba.variables.added);
            prop_assert_eq!(ab.changed_names(), ba.changed_names());
            prop_assert_eq!(ab.is_empty(), ba.is_empty());
            prop_assert_eq!(ab.code.mapping.swapped(), ba.code.mapping.clone());
            for (k, e) in &ab.events {
                prop_assert_eq!(e.first_divergence, ba.events[k].first_divergence);
            }
        }
    }
}
