use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use trk_core::demos;
use trk_core::guest::Datum;
use trk_core::store::{open_store, Location, SessionId, Store};

fn trk(db: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trk")).env_remove("TRK_DB").arg("--db").arg(db).args(args).output().unwrap()
}

fn ok(db: &Path, args: &[&str]) -> String {
    let out = trk(db, args);
    assert!(out.status.success(), "trk {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn session_of(stdout: &str) -> SessionId {
    let word = stdout.split_whitespace().find(|w| w.starts_with('s') && w.ends_with(':')).unwrap();
    word.trim_end_matches(':').parse().unwrap()
}

fn load(db: &Path) -> Store {
    open_store(Location::Path(db)).unwrap()
}

fn scripted_frames() -> usize {
    demos::FLAPPY_EVENTS.lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn flappy_run_records_one_call_per_scripted_frame() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let out = ok(&db, &["run", "demo:flappy", "--seed", "7"]);
    let frames = scripted_frames();
    assert!(out.contains(&format!("{frames} calls")), "{out}");
    assert!(out.contains(&format!("{frames} skipped")), "{out}");
    let store = load(&db);
    let s = session_of(&out);
    assert_eq!(store.session_calls(s).len(), frames);
    assert!(store.session_calls(s).iter().all(|c| c.function == "display_game"));
}

#[test]
fn binary_search_run_has_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let out = ok(&db, &["run", "demo:binary_search", "--granularity", "line"]);
    let store = load(&db);
    let calls = store.session_calls(session_of(&out));
    assert_eq!(calls.len(), 1);
    let n = store.call_snapshots(calls[0].id).len();
    assert!(n > 0);
    assert!(out.contains(&format!("{n} snapshots")), "{out}");
}

/// (left, mid, right) after each probe of a textbook binary search.
fn probes(arr: &[i64], target: i64) -> Vec<(i64, i64, i64)> {
    let (mut left, mut right) = (0i64, arr.len() as i64 - 1);
    let mut seen = vec![];
    while left <= right {
        let mid = (left + right) / 2;
        seen.push((left, mid, right));
        if arr[mid as usize] == target {
            break;
        } else if arr[mid as usize] < target {
            left = mid + 1;
        } else {
            right = mid - 1;
        }
    }
    seen
}

#[test]
fn inspecting_snapshots_shows_the_search_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let out = ok(&db, &["run", "demo:binary_search"]);
    let store = load(&db);
    let call = store.session_calls(session_of(&out))[0].id;
    let mut observed = vec![];
    for p in store.call_snapshots(call) {
        let v: Value = serde_json::from_str(&ok(&db, &["inspect", "--snapshot", &p.id.to_string()])).unwrap();
        assert_eq!(v["kind"], "snapshot");
        assert_eq!(v["function"], "binary_search");
        let locals = &v["locals"];
        if let (Some(l), Some(m), Some(r)) = (locals["left"]["value"].as_i64(), locals["mid"]["value"].as_i64(), locals["right"]["value"].as_i64()) {
            if observed.last().map(|x: &(i64, i64, i64)| x.1) != Some(m) {
                observed.push((l, m, r));
            }
        }
    }
    assert_eq!(observed, probes(&[1, 2, 3, 4, 5], 6));
}

#[test]
fn a_missing_db_directory_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = trk(&dir.path().join("nope/t.db"), &["run", "demo:flappy"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    assert_eq!(trk(&db, &["--help"]).status.code(), Some(0));
    assert_eq!(trk(&db, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(trk(&db, &["replay", "--window", "3"]).status.code(), Some(1));
    ok(&db, &["run", "demo:move_player"]);
    assert_eq!(trk(&db, &["inspect", "--call", "c999999"]).status.code(), Some(1));
    let bad = dir.path().join("bad.db");
    std::fs::write(&bad, "not a trace\n").unwrap();
    assert_eq!(trk(&bad, &["sessions"]).status.code(), Some(2));
    let prog = dir.path().join("boom.trk");
    std::fs::write(&prog, "@monitor(granularity=\"function\")\ndef f(x):\n    return 1 // x\ny = f(0)\n").unwrap();
    let out = trk(&db, &["run", prog.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed session"));
}

#[test]
fn branch_replay_from_frame_223_with_lower_gravity() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let src = session_of(&ok(&db, &["run", "demo:flappy", "--seed", "7"]));
    let out = ok(&db, &["replay", "--session", &src.to_string(), "--from", "223", "--set", "gravity=0.5", "--mock", "rand_int,get_events"]);
    let branch = session_of(&out);
    let store = load(&db);
    let frames = scripted_frames() as u64;
    let s = store.session(branch).unwrap();
    assert_eq!((s.parent_session, s.parent_offset), (Some(src), Some(223)));
    let calls = store.session_calls(branch);
    assert_eq!(calls.len() as u64, frames - 223);
    let g = calls[0].globals["gravity"];
    assert_eq!(store.materialize(g).unwrap(), Datum::Float(0.5));
}

#[test]
fn faithful_cli_replay_reproduces_every_call() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let src = session_of(&ok(&db, &["run", "demo:flappy", "--seed", "7"]));
    let rep = session_of(&ok(&db, &["replay", "--session", &src.to_string(), "--mock", "rand_int", "--mock", "get_events"]));
    let store = load(&db);
    assert_eq!(store.session_digests(src).unwrap(), store.session_digests(rep).unwrap());
    let aligned = ok(&db, &["compare", "--align", &src.to_string(), &rep.to_string()]);
    assert_eq!(aligned.lines().count(), scripted_frames());
    assert!(aligned.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["gap"] == false));
}

#[test]
fn function_replay_under_a_variant() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let src = session_of(&ok(&db, &["run", "demo:binary_search"]));
    let call = load(&db).session_calls(src)[0].id;
    let variant = dir.path().join("variant.trk");
    std::fs::write(&variant, "def binary_search(arr, target):\n    return len(arr) * 10 + target\n").unwrap();
    let out = ok(&db, &["replay", "--call", &call.to_string(), "--code", variant.to_str().unwrap()]);
    assert!(out.contains("value 56"), "{out}");
    let store = load(&db);
    let c = store.session_calls(session_of(&out))[0];
    assert_ne!(c.code, store.call(call).unwrap().code);
}

#[test]
fn comparing_branch_and_source_frames_names_the_changed_globals() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    let src = session_of(&ok(&db, &["run", "demo:flappy", "--seed", "7"]));
    let branch = session_of(&ok(&db, &["replay", "--session", &src.to_string(), "--from", "223", "--set", "gravity=0.5", "--mock", "rand_int,get_events"]));
    let store = load(&db);
    let a = store.call_by_ordinal(src, 224).unwrap().id;
    let b = store.session_calls(branch)[224 - 223].id;
    let d: Value = serde_json::from_str(&ok(&db, &["compare", &a.to_string(), &b.to_string()])).unwrap();
    let changed: Vec<&str> = d["variables"]["changed"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(changed.contains(&"gravity"), "{changed:?}");
    let ga = store.materialize(store.call(a).unwrap().globals["gravity"]).unwrap();
    assert_ne!(ga, Datum::Float(0.5));
}

#[test]
fn export_then_import_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("t.db");
    ok(&db, &["run", "demo:flappy", "--seed", "7"]);
    ok(&db, &["run", "demo:binary_search"]);
    let stream = dir.path().join("all.jsonl");
    ok(&db, &["export", "--out", stream.to_str().unwrap()]);
    let copy = dir.path().join("copy.db");
    ok(&copy, &["import", stream.to_str().unwrap()]);
    assert_eq!(load(&db).table_digests(), load(&copy).table_digests());
    let again = trk(&copy, &["import", stream.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    ok(&copy, &["import", "--force", stream.to_str().unwrap()]);
    let piped = ok(&db, &["export"]);
    assert_eq!(piped, std::fs::read_to_string(&stream).unwrap());
}

#[test]
fn the_db_path_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("env.db");
    let out = Command::new(env!("CARGO_BIN_EXE_trk")).env("TRK_DB", &db).args(["run", "demo:move_player"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(load(&db).sessions().len(), 1);
}
