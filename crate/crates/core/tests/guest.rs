mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::gen;
use trk_core::demos;
use trk_core::guest::{
    self, ast::StmtKind, call, call_ast, count_lines_ast, parse, BuiltinKind, CallError, Datum, Env, FlatOp,
    FrameView, Granularity, Instrumentation, Line, NoInstrumentation, Program, Value,
};
use trk_core::host::{EventScript, Host, HostConfig};

fn int_list(env: &Env, xs: &[i64]) -> Value {
    Value::new_list(env.ids(), xs.iter().map(|x| Value::Int(*x)).collect())
}

#[test]
fn single_assignment_parses_at_line_one() {
    let unit = parse("x = 1", "t.trk").unwrap();
    assert!(unit.functions.is_empty());
    assert_eq!(unit.top_level.len(), 1);
    assert_eq!(unit.top_level[0].line, 1);
    assert!(matches!(unit.top_level[0].kind, StmtKind::Assign { .. }));
}

#[test]
fn move_player_has_three_params_and_seven_statements() {
    let unit = parse(demos::MOVE_PLAYER.source, "move_player.trk").unwrap();
    let f = unit.function("move_player").unwrap();
    assert_eq!(f.params, ["x", "y", "player"]);
    assert_eq!(f.statement_count(), 7);
    assert_eq!(f.pragma.as_ref().unwrap().granularity.as_deref(), Some("function"));
}

#[test]
fn malformed_def_reports_line_one() {
    let err = parse("def f(:", "t.trk").unwrap_err();
    assert_eq!(err.line, 1);
}

#[test]
fn duplicate_function_is_rejected() {
    let err = parse("def f():\n    return 1\ndef f():\n    return 2\n", "t.trk").unwrap_err();
    assert_eq!(err.line, 3);
    assert!(err.message.contains("duplicate"), "{err}");
}

#[test]
fn two_statements_on_one_line_are_rejected() {
    assert!(parse("x = 1; y = 2", "t.trk").is_err());
}

#[test]
fn straight_line_body_lowers_to_one_entry_per_statement() {
    let p = Program::from_source("def f():\n    a = 1\n    b = 2\n    c = a + b\n    d = c * 2\n    return d\n", "t.trk").unwrap();
    let flat = &p.function("f").unwrap().flat;
    assert_eq!(flat.entries.len(), 5);
    assert_eq!(flat.line_index.len(), 5);
}

#[test]
fn while_back_edge_targets_loop_head() {
    let p = Program::from_source("def f():\n    i = 0\n    while i < 3:\n        i = i + 1\n    return i\n", "t.trk").unwrap();
    let flat = &p.function("f").unwrap().flat;
    let head = flat.line_index[&3];
    let back: Vec<usize> = flat
        .entries
        .iter()
        .filter_map(|e| match e.op {
            FlatOp::Jump { target } => Some(target),
            _ => None,
        })
        .collect();
    assert!(back.contains(&head), "jumps {back:?}, head {head}");
}

#[test]
fn binary_search_line_index_contains_mid_line() {
    let p = demos::BINARY_SEARCH.program();
    let f = p.function("binary_search").unwrap();
    let mid_line = f.def.line + f.def.source_text.lines().position(|l| l.trim_start().starts_with("mid =")).unwrap() as u32;
    assert!(f.flat.line_index.contains_key(&mid_line));
}

#[test]
fn binary_search_misses_six() {
    let p = demos::BINARY_SEARCH.program();
    let mut env = Env::new();
    let args = vec![int_list(&env, &[1, 2, 3, 4, 5]), Value::Int(6)];
    let v = call(&p, "binary_search", args, &mut env, &mut NoInstrumentation, None, None).unwrap();
    assert!(v.guest_eq(&Value::Int(-1)));
}

#[test]
fn move_player_bounds() {
    let p = demos::MOVE_PLAYER.program();
    let mut env = Env::new();
    let player = Value::new_map(env.ids(), BTreeMap::new());
    let inside = call(&p, "move_player", vec![Value::Int(100), Value::Int(50), player.clone()], &mut env, &mut NoInstrumentation, None, None).unwrap();
    let outside = call(&p, "move_player", vec![Value::Int(100), Value::Int(700), player], &mut env, &mut NoInstrumentation, None, None).unwrap();
    assert!(inside.guest_eq(&Value::Bool(true)));
    assert!(outside.guest_eq(&Value::Bool(false)));
}

#[derive(Default)]
struct LineLog {
    lines: Vec<(String, Line)>,
}

impl Instrumentation for LineLog {
    fn observes(&self, _function: &str) -> Option<Granularity> {
        Some(Granularity::Line)
    }
    fn on_line(&mut self, frame: &FrameView<'_>, line: Line) -> Result<(), String> {
        self.lines.push((frame.name().to_string(), line));
        Ok(())
    }
}

#[test]
fn entry_line_jumps_straight_to_return() {
    let p = demos::MOVE_PLAYER.program();
    let f = p.function("move_player").unwrap();
    let last = *f.def.statement_lines().last().unwrap();
    let mut env = Env::new();
    let mut log = LineLog::default();
    let locals = BTreeMap::from([
        ("x".to_string(), Value::Int(1)),
        ("y".to_string(), Value::Int(1)),
        ("player".to_string(), Value::new_map(env.ids(), BTreeMap::new())),
    ]);
    let v = call(&p, "move_player", vec![], &mut env, &mut log, Some(last), Some(&locals)).unwrap();
    assert!(v.guest_eq(&Value::Bool(true)));
    assert_eq!(log.lines, [("move_player".to_string(), last)]);
}

#[test]
fn entry_line_off_a_statement_is_rejected() {
    let p = demos::MOVE_PLAYER.program();
    let mut env = Env::new();
    let err = call(&p, "move_player", vec![], &mut env, &mut NoInstrumentation, Some(1), None).unwrap_err();
    assert!(matches!(err, CallError::BadEntryLine { line: 1, .. }), "{err}");
}

#[test]
fn runtime_errors_carry_the_line() {
    let p = Program::from_source("def f():\n    a = 1\n    return a // 0\n", "t.trk").unwrap();
    let err = call(&p, "f", vec![], &mut Env::new(), &mut NoInstrumentation, None, None).unwrap_err();
    assert_eq!(err.line(), Some(3));
}

#[test]
fn integer_overflow_is_an_error() {
    let p = Program::from_source("def f():\n    return 9223372036854775807 + 1\n", "t.trk").unwrap();
    assert!(call(&p, "f", vec![], &mut Env::new(), &mut NoInstrumentation, None, None).is_err());
}

#[test]
fn arity_mismatch_is_an_error() {
    let p = demos::MOVE_PLAYER.program();
    let err = call(&p, "move_player", vec![Value::Int(1)], &mut Env::new(), &mut NoInstrumentation, None, None).unwrap_err();
    assert!(matches!(err, CallError::Arity { expected: 3, found: 1, .. }));
}

#[test]
fn seeded_rand_int_repeats() {
    let run = |seed| {
        let env = Host::seeded(seed).env();
        let ctx = guest::BuiltinCtx { ids: env.ids() };
        let f = env.builtin("rand_int").unwrap();
        assert_eq!(f.kind, BuiltinKind::External);
        (0..20)
            .map(|_| match (f.func)(&ctx, &[Value::Int(0), Value::Int(1000)]).unwrap() {
                Value::Int(i) => i,
                _ => unreachable!(),
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn get_events_follows_the_script_in_order() {
    let script = EventScript::parse(
        "{\"callable\":\"get_events\",\"return\":[{\"type\":\"flap\"}]}\n\
         {\"callable\":\"get_events\",\"return\":[]}\n\
         {\"callable\":\"get_events\",\"return\":[{\"type\":\"key\",\"key\":\"a\"}, {\"type\":\"flap\"}]}\n",
    )
    .unwrap();
    let host = Host::new(HostConfig { seed: 0, script: Some(script) });
    let p = Program::from_source("def f():\n    return get_events()\n", "t.trk").unwrap();
    let mut env = host.env();
    let got: Vec<Datum> =
        (0..3).map(|_| call(&p, "f", vec![], &mut env, &mut NoInstrumentation, None, None).unwrap().to_datum().unwrap()).collect();
    let want: Vec<Datum> = [r#"[{"type":"flap"}]"#, "[]", r#"[{"type":"key","key":"a"},{"type":"flap"}]"#]
        .iter()
        .map(|j| Datum::from_json(&serde_json::from_str(j).unwrap()).unwrap())
        .collect();
    assert_eq!(got, want);
    // Script exhausted: live input is empty.
    let fourth = call(&p, "f", vec![], &mut env, &mut NoInstrumentation, None, None).unwrap();
    assert_eq!(fourth.to_datum().unwrap(), Datum::List(vec![]));
}

#[test]
fn len_builtin_is_pure() {
    let env = Env::new();
    assert_eq!(env.builtin("len").unwrap().kind, BuiltinKind::Pure);
    let p = Program::from_source("def f():\n    return len([1, 2, 3])\n", "t.trk").unwrap();
    let v = call(&p, "f", vec![], &mut Env::new(), &mut NoInstrumentation, None, None).unwrap();
    assert!(v.guest_eq(&Value::Int(3)));
}

#[test]
fn registering_a_taken_name_fails() {
    let mut env = Host::default().env();
    assert!(env.register_builtin("rand_int", BuiltinKind::Pure, |_, _| Ok(Value::Nil)).is_err());
}

fn outcome(r: Result<Value, CallError>) -> String {
    match r {
        Ok(v) => format!("ok {v}"),
        Err(e) => format!("err {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flat_and_ast_execution_agree(body in gen::body(), p in -3i64..6) {
        let program = Program::from_source(&gen::render(&body, "", 0), "gen.trk").unwrap();
        let mut env_a = Host::seeded(5).env();
        let mut env_b = Host::seeded(5).env();
        for env in [&mut env_a, &mut env_b] {
            guest::run_top_level(&program, env, &mut NoInstrumentation).unwrap();
        }
        let flat = call(&program, "f", vec![Value::Int(p)], &mut env_a, &mut NoInstrumentation, None, None);
        let ast = call_ast(&program, "f", vec![Value::Int(p)], &mut env_b, &mut NoInstrumentation);
        prop_assert_eq!(outcome(flat), outcome(ast));
    }

    #[test]
    fn reported_lines_match_the_counting_oracle(body in gen::body(), p in -3i64..6) {
        let program = Program::from_source(&gen::render(&body, "", 0), "gen.trk").unwrap();
        let mut env_a = Host::seeded(9).env();
        let mut env_b = Host::seeded(9).env();
        for env in [&mut env_a, &mut env_b] {
            guest::run_top_level(&program, env, &mut NoInstrumentation).unwrap();
        }
        let mut log = LineLog::default();
        let observed = call(&program, "f", vec![Value::Int(p)], &mut env_a, &mut log, None, None);
        let oracle = count_lines_ast(&program, "f", vec![Value::Int(p)], &mut env_b);
        // On a runtime error the oracle's line list is unavailable; the
        // outcome must still agree.
        match (observed, oracle) {
            (Ok(a), Ok((b, lines))) => {
                prop_assert!(a.guest_eq(&b));
                prop_assert_eq!(log.lines, lines);
            }
            (a, b) => prop_assert_eq!(outcome(a), outcome(b.map(|x| x.0))),
        }
    }

    #[test]
    fn in_place_mutation_keeps_identity(ops in prop::collection::vec(0u8..3, 1..20)) {
        let env = Env::new();
        let list = int_list(&env, &[1, 2, 3]);
        let Value::List(obj) = &list else { unreachable!() };
        let id = obj.id();
        let mut epoch = obj.epoch();
        let copy = env.builtin("copy").unwrap();
        let ctx = guest::BuiltinCtx { ids: env.ids() };
        for op in ops {
            match op {
                0 => obj.items_mut().push(Value::Int(7)),
                1 => { obj.items_mut().pop(); }
                _ => {
                    let c = (copy.func)(&ctx, std::slice::from_ref(&list)).unwrap();
                    prop_assert_ne!(c.identity(), Some(id));
                    continue;
                }
            }
            prop_assert_eq!(list.identity(), Some(id));
            prop_assert!(obj.epoch() > epoch);
            epoch = obj.epoch();
        }
    }
}

#[test]
fn event_script_errors_name_the_line() {
    let text = "{\"callable\":\"rand_int\",\"return\":3}\n\n{\"return\":1}\n";
    match EventScript::parse(text) {
        Err(trk_core::host::ScriptError::Record { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("callable"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(EventScript::parse("{oops"), Err(trk_core::host::ScriptError::Record { line: 1, .. })));
    let ok = EventScript::parse(text.lines().take(2).collect::<Vec<_>>().join("\n").as_str()).unwrap();
    assert_eq!(ok.len("rand_int"), 1);
}

#[test]
fn top_level_for_loops_run_in_both_modes() {
    let src = "\
total = 0
for i in range(4):
    for j in [1, 2]:
        total = total + i * j
if total > 0:
    for k in range(2):
        total = total + 100
print(total)
";
    let program = Program::from_source(src, "t.trk").unwrap();
    let mut flat = Env::new();
    guest::run_top_level(&program, &mut flat, &mut NoInstrumentation).unwrap();
    let mut ast = Env::new();
    guest::run_top_level_ast(&program, &mut ast, &mut NoInstrumentation).unwrap();
    let expected: i64 = (0..4).map(|i| i * 3).sum::<i64>() + 200;
    assert_eq!(flat.take_output(), [expected.to_string()]);
    assert_eq!(ast.take_output(), [expected.to_string()]);
}
