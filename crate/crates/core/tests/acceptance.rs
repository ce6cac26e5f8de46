//! One pass/fail line per acceptance criterion. Exits nonzero if any fail.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use trk_core::compare::{align, compare_states, line_timeline, SessionWindow, StateRef};
use trk_core::demos::{self, corpus_len, corpus_names, corpus_program};
use trk_core::guest::{self, Datum, Env, Granularity, NoInstrumentation, Program, Value};
use trk_core::host::Host;
use trk_core::monitor::{run_monitored, Entry, RunReport};
use trk_core::replay::{
    replay_from_snapshot, replay_function, replay_session, CodeSource, ReplayPlan, ReplayReport,
};
use trk_core::store::{export_stream, import_stream, open_store, Location, StoreHandle};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn faithful_replay() -> Outcome {
    let started = Instant::now();
    let store = memory_store();
    let rec = record_flappy(&store);
    let mut env = flappy_host().env();
    let rep = replay_session(&store, rec.session, &ReplayPlan::faithful(["rand_int", "get_events"]), replay_host(&mut env))
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let s = store.read();
    let (a, b) = (s.session_digests(rec.session).unwrap(), s.session_digests(rep.session).unwrap());
    ensure(a.len() == 400, || format!("original has {} calls, expected 400", a.len()))?;
    ensure(b.len() == a.len(), || format!("replay has {} calls, original {}", b.len(), a.len()))?;
    if let Some(i) = a.iter().zip(&b).position(|(x, y)| x != y) {
        return Err(format!("call digests diverge at ordinal {i}"));
    }
    ensure(rep.stats.fell_through == 0, || format!("{} live fall-throughs", rep.stats.fell_through))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("400/400 call digests equal, {} mocked events, {elapsed:.2?}", rep.stats.mocked))
}

/// Independent re-execution: run the first `frames` frames by walking the
/// AST, optionally set `gravity`, run one more frame and return the globals.
fn oracle_globals_after(frames: u32, gravity: Option<f64>) -> BTreeMap<String, Datum> {
    let source = demos::FLAPPY.source.replacen("FRAMES = 400", &format!("FRAMES = {frames}"), 1);
    let program = Program::from_source(&source, demos::FLAPPY.path).unwrap();
    let mut env = flappy_host().env();
    guest::run_top_level_ast(&program, &mut env, &mut NoInstrumentation).unwrap();
    if let Some(g) = gravity {
        env.globals.insert("gravity".into(), Value::Float(g));
    }
    guest::call_ast(&program, "display_game", vec![], &mut env, &mut NoInstrumentation).unwrap();
    env.globals.iter().filter_map(|(k, v)| Some((k.clone(), v.to_datum().ok()?))).collect()
}

fn branch_compare() -> Outcome {
    const FROM: u64 = 223;
    const GRAVITY: f64 = 0.5;
    let store = memory_store();
    let rec = record_flappy(&store);
    let mut plan = ReplayPlan::faithful(["rand_int", "get_events"]);
    plan.window = Some((FROM, 399));
    plan.manual_globals.insert("gravity".into(), Datum::Float(GRAVITY));
    let mut env = flappy_host().env();
    let rep = replay_session(&store, rec.session, &plan, replay_host(&mut env)).map_err(|e| e.to_string())?;
    let s = store.read();
    let pairs = align(
        &s,
        &SessionWindow { session: rec.session, start: FROM, end: None },
        &SessionWindow::whole(rep.session),
    )
    .map_err(|e| e.to_string())?;
    ensure(pairs.len() == 177, || format!("{} aligned pairs, expected 177", pairs.len()))?;
    ensure(pairs.iter().all(|p| !p.has_gap()), || "alignment has gaps".into())?;

    // The branch's first call starts from the manual override; the next
    // pair is the first whose entry state reflects a frame run under it.
    let pair = &pairs[1];
    let (a, b) = (pair.a.unwrap(), pair.b.unwrap());
    ensure(s.call(a).unwrap().ordinal == FROM + 1, || "pair 1 is not ordinal 224".into())?;
    let diff = compare_states(&s, StateRef::Call(a), StateRef::Call(b)).map_err(|e| e.to_string())?;
    let changed = diff.touched();

    let base = oracle_globals_after(FROM as u32, None);
    let variant = oracle_globals_after(FROM as u32, Some(GRAVITY));
    let expected: BTreeSet<String> = base
        .keys()
        .chain(variant.keys())
        .filter(|k| base.get(*k) != variant.get(*k))
        .cloned()
        .collect();
    ensure(changed.contains("gravity"), || format!("gravity not reported; changed = {changed:?}"))?;
    ensure(changed == expected, || format!("changed {changed:?}, oracle {expected:?}"))?;
    Ok(format!("177 gapless pairs; changed at ordinal 224 = {changed:?}"))
}

/// Reference binary search returning the result and (left, mid, right) at
/// each evaluation of the loop condition.
fn reference_search(arr: &[i64], target: i64) -> (i64, Vec<(i64, Option<i64>, i64)>) {
    let (mut left, mut right, mut mid) = (0i64, arr.len() as i64 - 1, None);
    let mut visits = vec![];
    loop {
        visits.push((left, mid, right));
        if left > right {
            return (-1, visits);
        }
        let m = (left + right) / 2;
        mid = Some(m);
        if arr[m as usize] == target {
            return (m, visits);
        } else if arr[m as usize] < target {
            left = m + 1;
        } else {
            right = m - 1;
        }
    }
}

fn list_arg() -> Datum {
    Datum::List((1..=5).map(Datum::Int).collect())
}

fn record_binary_search(store: &StoreHandle) -> RunReport {
    let entry = Entry::Function { name: "binary_search".into(), args: vec![list_arg(), Datum::Int(6)] };
    record(&demos::BINARY_SEARCH, &Host::default(), entry, store)
}

fn loop_head(program: &Program) -> u32 {
    let def = &program.function("binary_search").unwrap().def;
    def.source_text.lines().position(|l| l.trim_start().starts_with("while")).unwrap() as u32 + 1
}

fn line_completeness() -> Outcome {
    let store = memory_store();
    let rec = record_binary_search(&store);
    let program = demos::BINARY_SEARCH.program();
    let mut env = Env::new();
    let ids = env.ids().clone();
    let args = vec![list_arg().to_value(&ids).unwrap(), Value::Int(6)];
    let (oracle_value, lines) = guest::count_lines_ast(&program, "binary_search", args, &mut env).unwrap();
    let executed: Vec<u32> = lines.iter().filter(|(f, _)| f == "binary_search").map(|(_, l)| *l).collect();

    let s = store.read();
    let calls = s.session_calls(rec.session);
    ensure(calls.len() == 1, || format!("{} calls recorded", calls.len()))?;
    let snaps: Vec<u32> = s.call_snapshots(calls[0].id).iter().map(|p| p.line).collect();
    ensure(snaps == executed, || format!("snapshot lines {snaps:?}, oracle {executed:?}"))?;

    let (expected, visits) = reference_search(&[1, 2, 3, 4, 5], 6);
    let got = rec.value.ok_or("no return value")?;
    ensure(got.guest_eq(&Value::Int(expected)) && oracle_value.guest_eq(&got), || format!("returned {got}"))?;

    let timeline = line_timeline(&s, calls[0].id, loop_head(&program)).map_err(|e| e.to_string())?;
    let history: Vec<(i64, Option<i64>, i64)> = timeline
        .iter()
        .map(|(_, vars)| {
            let int = |k: &str| match vars.get(k) {
                Some(Datum::Int(i)) => Some(*i),
                _ => None,
            };
            (int("left").unwrap_or(i64::MIN), int("mid"), int("right").unwrap_or(i64::MIN))
        })
        .collect();
    ensure(history == visits, || format!("loop history {history:?}, oracle {visits:?}"))?;
    Ok(format!("{} snapshots = oracle lines, result {expected}, {} loop-head visits match", snaps.len(), visits.len()))
}

fn mock_fallthrough() -> Outcome {
    const SENTINEL: u64 = 0x5EED_0000_DEAD_BEEF;
    const ORDINAL: u64 = 75;
    let store = memory_store();
    let rec = record_flappy(&store);
    let (call, recorded, variant) = {
        let s = store.read();
        let call = s.call_by_ordinal(rec.session, ORDINAL).ok_or("no call 75")?;
        let recorded: Vec<Datum> = s
            .call_events(call.id)
            .iter()
            .filter(|e| e.callable == "rand_int")
            .map(|e| s.materialize(e.return_value).unwrap())
            .collect();
        let text = &s.code_version(call.code).unwrap().source_text;
        let variant = text.replacen("    frame = frame + 1", "    extra = rand_int(1000, 2000)\n    frame = frame + 1", 1);
        (call.id, recorded, variant)
    };
    let n = recorded.len();
    ensure(n >= 1, || "call 75 recorded no rand_int events".into())?;
    let mut plan = ReplayPlan::faithful(["rand_int", "get_events"]);
    plan.code_override.insert("display_game".into(), CodeSource::Text(variant));
    let mut env = Host::seeded(SENTINEL).env();
    let rep: ReplayReport = replay_function(&store, call, &plan, replay_host(&mut env)).map_err(|e| e.to_string())?;

    let live = ChaCha8Rng::seed_from_u64(SENTINEL).random_range(1000..=2000i64);
    let s = store.read();
    let derived = s.session_calls(rep.session)[0].id;
    let events: Vec<(Datum, bool)> = s
        .call_events(derived)
        .iter()
        .filter(|e| e.callable == "rand_int")
        .map(|e| (s.materialize(e.return_value).unwrap(), e.mocked))
        .collect();
    ensure(events.len() == n + 1, || format!("{} rand_int calls, expected {}", events.len(), n + 1))?;
    for (i, want) in recorded.iter().enumerate() {
        ensure(events[i] == (want.clone(), true), || format!("value {i} was {:?}, trace has {want}", events[i]))?;
    }
    ensure(events[n] == (Datum::Int(live), false), || format!("value {n} was {:?}, sentinel PRNG gives {live}", events[n]))?;
    ensure(rep.stats.fell_through == 1, || format!("{} fall-throughs", rep.stats.fell_through))?;
    Ok(format!("{n} value(s) from the trace, then live {live} from the sentinel generator"))
}

fn dedup() -> Outcome {
    let store = memory_store();
    record_flappy(&store);
    let first = store.read().counts();
    record_flappy(&store);
    let second = store.read().counts();
    ensure(second.payloads == first.payloads, || format!("payloads {} -> {}", first.payloads, second.payloads))?;
    ensure(second.hook_blobs == first.hook_blobs, || format!("hook blobs {} -> {}", first.hook_blobs, second.hook_blobs))?;

    let mut fresh = open_store(Location::InMemory).unwrap();
    let before = fresh.counts().payloads;
    let refs: BTreeSet<_> = (0..1000).map(|_| fresh.intern_str("the same string")).collect();
    let added = fresh.counts().payloads - before;
    ensure(added == 1 && refs.len() == 1, || format!("1000 equal strings added {added} payloads"))?;
    Ok(format!("second run added 0 of {} payloads; 1000 equal strings stored once", first.payloads))
}

fn round_trip() -> Outcome {
    let mut checked = vec![];
    for demo in demos::ALL {
        let store = memory_store();
        let host = if demo.name == "flappy" { flappy_host() } else { Host::default() };
        record(&demo, &host, Entry::TopLevel, &store);
        let s = store.read();
        let text = export_stream(&s, None);
        let back = import_stream(&text).map_err(|e| format!("{}: {e}", demo.name))?;
        let (a, b) = (s.table_digests(), back.table_digests());
        if let Some((t, _)) = a.iter().find(|(t, h)| b.get(*t) != Some(h)) {
            return Err(format!("{}: table {t} differs after import", demo.name));
        }
        ensure(export_stream(&back, None) == text, || format!("{}: re-export differs", demo.name))?;
        checked.push(demo.name);
    }
    Ok(format!("hash-equal tables for {checked:?}"))
}

fn min_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn overhead() -> Outcome {
    const REPS: usize = 9;
    let mut worst = [(0.0f64, ""); 2];
    let mut failures = vec![];
    for (i, name) in corpus_names().enumerate().take(corpus_len()) {
        let plain = corpus_program(i, None).unwrap();
        let base = min_time(REPS, || {
            let mut env = Env::new();
            guest::run_top_level(&plain, &mut env, &mut NoInstrumentation).unwrap();
        });
        for (slot, (g, budget)) in [(Granularity::Function, 10.0), (Granularity::Line, 100.0)].into_iter().enumerate() {
            let program = corpus_program(i, Some(g)).unwrap();
            let cfg = config(&program);
            let t = min_time(REPS, || {
                let store = memory_store();
                let mut env = Env::new();
                run_monitored(&program, &Entry::TopLevel, &mut env, &cfg, &store, name).unwrap();
            });
            let ratio = t.as_secs_f64() / base.as_secs_f64();
            if ratio > worst[slot].0 {
                worst[slot] = (ratio, name);
            }
            if ratio > budget {
                failures.push(format!("{name} {g:?} {ratio:.1}x > {budget}x"));
            }
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "worst function {:.1}x ({}), worst line {:.1}x ({})",
        worst[0].0, worst[0].1, worst[1].0, worst[1].1
    ))
}

fn snapshot_resume() -> Outcome {
    let store = memory_store();
    let rec = record_binary_search(&store);
    let program = demos::BINARY_SEARCH.program();
    let head = loop_head(&program);
    let (snap, text) = {
        let s = store.read();
        let call = &s.session_calls(rec.session)[0];
        let heads: Vec<_> = s.call_snapshots(call.id).into_iter().filter(|p| p.line + 1 - call.def_line == head).collect();
        ensure(heads.len() >= 2, || "fewer than two loop-head visits".into())?;
        (heads[1].id, s.code_version(call.code).unwrap().source_text.clone())
    };
    let mut env = Env::new();
    let same = replay_from_snapshot(&store, snap, &ReplayPlan::default(), replay_host(&mut env)).map_err(|e| e.to_string())?;
    let v = same.value.ok_or("no value")?;
    ensure(v.guest_eq(&Value::Int(-1)), || format!("unchanged resume returned {v}"))?;

    let edited = text.replacen("return -1", "return -7", 1);
    ensure(edited != text, || "edit did not apply".into())?;
    let mut plan = ReplayPlan::default();
    plan.code_override.insert("binary_search".into(), CodeSource::Text(edited));
    let mut env = Env::new();
    let changed = replay_from_snapshot(&store, snap, &plan, replay_host(&mut env)).map_err(|e| e.to_string())?;
    let w = changed.value.ok_or("no value")?;
    ensure(w.guest_eq(&Value::Int(-7)), || format!("edited resume returned {w}"))?;
    Ok(format!("resume at {snap} returns {v}; with edited tail returns {w}"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("faithful replay", faithful_replay),
        ("branch and compare", branch_compare),
        ("line-granularity completeness", line_completeness),
        ("mock fall-through", mock_fallthrough),
        ("dedup", dedup),
        ("round trip", round_trip),
        ("overhead budget", overhead),
        ("snapshot resume", snapshot_resume),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
