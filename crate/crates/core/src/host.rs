//! Host environment for the bundled programs: seeded randomness, scripted
//! and live input, a drawable screen, and the standard hooks.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::guest::{BuiltinKind, Datum, Env, Program, Value};
use crate::monitor::{specs_from_program, HookOutput, HookRegistry, MonitorConfig, MonitorError, Serializers};

/// Type tag of the screen native.
pub const SCREEN_TAG: &str = "screen";
pub const SCENE_KIND: &str = "scene/json";
pub const METRIC_KIND: &str = "metric/json";

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("event script line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("event script: {0}")]
    Io(#[from] std::io::Error),
}

/// Recorded results of external builtins, consumed FIFO per callable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventScript {
    queues: BTreeMap<String, VecDeque<Datum>>,
}

impl EventScript {
    /// One JSON record per line: `{"callable": name, "return": value}`.
    /// Blank lines are ignored.
    pub fn parse(text: &str) -> Result<EventScript, ScriptError> {
        let mut script = EventScript::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let bad = |message: String| ScriptError::Record { line, message };
            if raw.trim().is_empty() {
                continue;
            }
            let j: Json = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            let callable = j
                .get("callable")
                .and_then(Json::as_str)
                .ok_or_else(|| bad("missing string field \"callable\"".into()))?;
            let ret = j.get("return").ok_or_else(|| bad("missing field \"return\"".into()))?;
            let value = Datum::from_json(ret).map_err(bad)?;
            script.push(callable, value);
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<EventScript, ScriptError> {
        EventScript::parse(&std::fs::read_to_string(path)?)
    }

    pub fn push(&mut self, callable: &str, value: Datum) {
        self.queues.entry(callable.to_string()).or_default().push_back(value);
    }

    pub fn len(&self, callable: &str) -> usize {
        self.queues.get(callable).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }
}

/// One drawing command on the screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Rect { x: f64, y: f64, w: f64, h: f64, style: String },
    Circle { x: f64, y: f64, r: f64, style: String },
    Text { x: f64, y: f64, text: String },
}

/// Contents of the screen native: the shapes drawn since the last clear.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<Shape>,
}

/// Live input shared with other threads (the service's input channel).
pub type InputQueue = Arc<Mutex<VecDeque<Datum>>>;

#[derive(Debug, Clone, Default)]
pub struct HostConfig {
    pub seed: u64,
    pub script: Option<EventScript>,
}

/// Builds environments, hooks and serializers for guest runs.
#[derive(Debug, Clone, Default)]
pub struct Host {
    pub config: HostConfig,
    input: InputQueue,
}

impl Host {
    pub fn new(config: HostConfig) -> Host {
        Host { config, input: InputQueue::default() }
    }

    /// A host whose live input is the given shared queue.
    pub fn with_input(config: HostConfig, input: InputQueue) -> Host {
        Host { config, input }
    }

    pub fn seeded(seed: u64) -> Host {
        Host::new(HostConfig { seed, script: None })
    }

    pub fn input(&self) -> InputQueue {
        self.input.clone()
    }

    /// Queues a live event for the next `get_events()` that finds the
    /// script exhausted.
    pub fn push_input(&self, event: Datum) {
        self.input.lock().expect("input queue").push_back(event);
    }

    /// A fresh environment: its own generator and its own copy of the
    /// script, plus a blank `screen` global.
    pub fn env(&self) -> Env {
        let mut env = Env::new();
        let script = Rc::new(RefCell::new(self.config.script.clone().unwrap_or_default()));
        let rng = Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(self.config.seed)));

        let (s, r) = (script.clone(), rng);
        register(&mut env, "rand_int", BuiltinKind::External, move |ctx, args| {
            if let Some(d) = pop(&s, "rand_int") {
                return d.to_value(ctx.ids);
            }
            let [Value::Int(lo), Value::Int(hi)] = args else {
                return Err("rand_int() expects two ints".into());
            };
            if lo > hi {
                return Err(format!("rand_int() empty range {lo}..{hi}"));
            }
            Ok(Value::Int(r.borrow_mut().random_range(*lo..=*hi)))
        });

        let (s, input) = (script, self.input.clone());
        register(&mut env, "get_events", BuiltinKind::External, move |ctx, args| {
            if !args.is_empty() {
                return Err("get_events() takes no arguments".into());
            }
            if let Some(d) = pop(&s, "get_events") {
                return d.to_value(ctx.ids);
            }
            let live: Vec<Datum> = input.lock().expect("input queue").drain(..).collect();
            Datum::List(live).to_value(ctx.ids)
        });

        register(&mut env, "clear", BuiltinKind::Pure, |_, args| {
            with_scene("clear", args, 0, |scene, _| {
                scene.shapes.clear();
                Ok(())
            })
        });
        register(&mut env, "rect", BuiltinKind::Pure, |_, args| {
            with_scene("rect", args, 5, |scene, a| {
                let style = string("rect", &a[4])?;
                let n = |i: usize| number("rect", &a[i]);
                scene.shapes.push(Shape::Rect { x: n(0)?, y: n(1)?, w: n(2)?, h: n(3)?, style });
                Ok(())
            })
        });
        register(&mut env, "circle", BuiltinKind::Pure, |_, args| {
            with_scene("circle", args, 4, |scene, a| {
                let style = string("circle", &a[3])?;
                let n = |i: usize| number("circle", &a[i]);
                scene.shapes.push(Shape::Circle { x: n(0)?, y: n(1)?, r: n(2)?, style });
                Ok(())
            })
        });
        register(&mut env, "text", BuiltinKind::Pure, |_, args| {
            with_scene("text", args, 3, |scene, a| {
                let text = string("text", &a[2])?;
                scene.shapes.push(Shape::Text { x: number("text", &a[0])?, y: number("text", &a[1])?, text });
                Ok(())
            })
        });

        let screen = Value::new_native(env.ids(), SCREEN_TAG, Box::new(Scene::default()));
        env.globals.insert("screen".into(), screen);
        env
    }

    /// `capture_scene`: the current screen as JSON. `metric`: function
    /// name and return value as JSON.
    pub fn hooks() -> HookRegistry {
        let mut hooks = HookRegistry::default();
        hooks.register("capture_scene", |input| {
            let screen = input.globals.get("screen").ok_or("no screen global")?;
            let Value::Native(n) = screen else {
                return Err(format!("screen is a {}", screen.type_name()));
            };
            let bytes = n
                .downcast::<Scene, _>(|s| serde_json::to_vec(s).expect("scenes serialize"))
                .ok_or("screen holds no scene")?;
            Ok(HookOutput { kind: SCENE_KIND.into(), bytes })
        });
        hooks.register("metric", |input| {
            let ret = input.return_value.map(Value::to_datum).transpose()?.unwrap_or(Datum::Nil);
            let j = serde_json::json!({ "function": input.function, "return": ret.to_json() });
            Ok(HookOutput { kind: METRIC_KIND.into(), bytes: j.to_string().into_bytes() })
        });
        hooks
    }

    /// The screen native is deliberately left without a codec, so it is
    /// recorded as skipped.
    pub fn serializers() -> Serializers {
        Serializers::default()
    }

    /// Monitoring config from the program's pragmas with the standard
    /// hooks.
    pub fn monitor_config(program: &Program) -> Result<MonitorConfig, MonitorError> {
        Ok(MonitorConfig {
            specs: specs_from_program(program)?,
            hooks: Rc::new(Host::hooks()),
            serializers: Rc::new(Host::serializers()),
        })
    }
}

fn register(
    env: &mut Env,
    name: &str,
    kind: BuiltinKind,
    f: impl Fn(&crate::guest::BuiltinCtx<'_>, &[Value]) -> Result<Value, String> + 'static,
) {
    env.register_builtin(name, kind, f).expect("host builtins are registered once");
}

fn pop(script: &RefCell<EventScript>, callable: &str) -> Option<Datum> {
    script.borrow_mut().queues.get_mut(callable).and_then(VecDeque::pop_front)
}

fn with_scene(
    name: &str,
    args: &[Value],
    extra: usize,
    f: impl FnOnce(&mut Scene, &[Value]) -> Result<(), String>,
) -> Result<Value, String> {
    if args.len() != extra + 1 {
        return Err(format!("{name}() takes {} argument(s), got {}", extra + 1, args.len()));
    }
    let Value::Native(n) = &args[0] else {
        return Err(format!("{name}() expects a screen, got {}", args[0].type_name()));
    };
    n.downcast_mut::<Scene, _>(|scene| f(scene, &args[1..]))
        .ok_or_else(|| format!("{name}() expects a screen, got {}", n.type_tag()))??;
    Ok(Value::Nil)
}

fn number(name: &str, v: &Value) -> Result<f64, String> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(f) => Ok(*f),
        other => Err(format!("{name}() expects a number, got {}", other.type_name())),
    }
}

fn string(name: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::Str(s) => Ok(s.to_string()),
        other => Err(format!("{name}() expects a string, got {}", other.type_name())),
    }
}

/// Reads the scene out of a `capture_scene` blob.
pub fn decode_scene(bytes: &[u8]) -> Result<Scene, serde_json::Error> {
    serde_json::from_slice(bytes)
}
