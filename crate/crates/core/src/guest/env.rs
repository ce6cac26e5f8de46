use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use super::value::{IdGen, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinKind {
    /// Same inputs always give the same result.
    Pure,
    /// Result may differ across runs (randomness, input, clocks); eligible
    /// for tracking and mocking.
    External,
}

pub struct BuiltinCtx<'a> {
    pub ids: &'a IdGen,
}

pub type BuiltinFn = Rc<dyn Fn(&BuiltinCtx<'_>, &[Value]) -> Result<Value, String>>;

#[derive(Clone)]
pub struct Builtin {
    pub kind: BuiltinKind,
    pub func: BuiltinFn,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("builtin {0} is already registered")]
pub struct DuplicateBuiltin(pub String);

/// Global bindings plus host-provided builtins for one interpreter run.
#[derive(Clone, Default)]
pub struct Env {
    pub globals: HashMap<String, Value>,
    builtins: HashMap<String, Builtin>,
    ids: IdGen,
    output: Rc<RefCell<Vec<String>>>,
}

impl fmt::Debug for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.builtins.keys().collect();
        names.sort();
        f.debug_struct("Env").field("globals", &self.globals.len()).field("builtins", &names).finish()
    }
}

impl Env {
    /// An environment with only the pure standard library registered.
    pub fn new() -> Env {
        let mut env = Env::default();
        register_std(&mut env);
        env
    }

    pub fn ids(&self) -> &IdGen {
        &self.ids
    }

    pub fn register_builtin(
        &mut self,
        name: &str,
        kind: BuiltinKind,
        func: impl Fn(&BuiltinCtx<'_>, &[Value]) -> Result<Value, String> + 'static,
    ) -> Result<(), DuplicateBuiltin> {
        if self.builtins.contains_key(name) {
            return Err(DuplicateBuiltin(name.to_string()));
        }
        self.builtins.insert(name.to_string(), Builtin { kind, func: Rc::new(func) });
        Ok(())
    }

    pub fn builtin(&self, name: &str) -> Option<&Builtin> {
        self.builtins.get(name)
    }

    pub fn builtin_names(&self) -> impl Iterator<Item = &str> {
        self.builtins.keys().map(String::as_str)
    }

    /// Lines written by `print`.
    pub fn take_output(&self) -> Vec<String> {
        std::mem::take(&mut self.output.borrow_mut())
    }
}

fn arity(name: &str, args: &[Value], n: usize) -> Result<(), String> {
    if args.len() != n {
        return Err(format!("{name}() takes {n} argument(s), got {}", args.len()));
    }
    Ok(())
}

fn as_int(name: &str, v: &Value) -> Result<i64, String> {
    match v {
        Value::Int(i) => Ok(*i),
        other => Err(format!("{name}() expects an int, got {}", other.type_name())),
    }
}

fn as_number(name: &str, v: &Value) -> Result<f64, String> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(f) => Ok(*f),
        other => Err(format!("{name}() expects a number, got {}", other.type_name())),
    }
}

fn register_std(env: &mut Env) {
    let output = env.output.clone();
    let pure: Vec<(&str, BuiltinFn)> = vec![
        (
            "len",
            Rc::new(|_, args| {
                arity("len", args, 1)?;
                Ok(Value::Int(match &args[0] {
                    Value::Str(s) => s.chars().count() as i64,
                    Value::List(l) => l.items().len() as i64,
                    Value::Map(m) => m.entries().len() as i64,
                    other => return Err(format!("len() of {}", other.type_name())),
                }))
            }),
        ),
        (
            "append",
            Rc::new(|_, args| {
                arity("append", args, 2)?;
                match &args[0] {
                    Value::List(l) => {
                        l.items_mut().push(args[1].clone());
                        Ok(Value::Nil)
                    }
                    other => Err(format!("append() to {}", other.type_name())),
                }
            }),
        ),
        (
            "pop",
            Rc::new(|_, args| {
                arity("pop", args, 1)?;
                match &args[0] {
                    Value::List(l) => {
                        if l.items().is_empty() {
                            return Err("pop() from empty list".into());
                        }
                        Ok(l.items_mut().pop().unwrap_or(Value::Nil))
                    }
                    other => Err(format!("pop() from {}", other.type_name())),
                }
            }),
        ),
        (
            "remove",
            Rc::new(|_, args| {
                arity("remove", args, 2)?;
                match (&args[0], &args[1]) {
                    (Value::Map(m), Value::Str(k)) => Ok(m.entries_mut().remove(&**k).unwrap_or(Value::Nil)),
                    (Value::List(l), Value::Int(i)) => {
                        let len = l.items().len() as i64;
                        let idx = if *i < 0 { *i + len } else { *i };
                        if idx < 0 || idx >= len {
                            return Err(format!("list index {i} out of range"));
                        }
                        Ok(l.items_mut().remove(idx as usize))
                    }
                    (a, b) => Err(format!("remove() on {} with {}", a.type_name(), b.type_name())),
                }
            }),
        ),
        (
            "copy",
            Rc::new(|ctx, args| {
                arity("copy", args, 1)?;
                Ok(match &args[0] {
                    Value::List(l) => Value::new_list(ctx.ids, l.items().clone()),
                    Value::Map(m) => Value::new_map(ctx.ids, m.entries().clone()),
                    other => other.clone(),
                })
            }),
        ),
        (
            "keys",
            Rc::new(|ctx, args| {
                arity("keys", args, 1)?;
                match &args[0] {
                    Value::Map(m) => {
                        Ok(Value::new_list(ctx.ids, m.entries().keys().map(|k| Value::str(k.as_str())).collect()))
                    }
                    other => Err(format!("keys() of {}", other.type_name())),
                }
            }),
        ),
        (
            "range",
            Rc::new(|ctx, args| {
                let (lo, hi) = match args {
                    [n] => (0, as_int("range", n)?),
                    [a, b] => (as_int("range", a)?, as_int("range", b)?),
                    _ => return Err(format!("range() takes 1 or 2 arguments, got {}", args.len())),
                };
                if hi.saturating_sub(lo) > 10_000_000 {
                    return Err("range() too large".into());
                }
                Ok(Value::new_list(ctx.ids, (lo..hi).map(Value::Int).collect()))
            }),
        ),
        (
            "str",
            Rc::new(|_, args| {
                arity("str", args, 1)?;
                Ok(match &args[0] {
                    Value::Str(s) => Value::Str(s.clone()),
                    other => Value::str(other.to_string()),
                })
            }),
        ),
        (
            "int",
            Rc::new(|_, args| {
                arity("int", args, 1)?;
                Ok(Value::Int(match &args[0] {
                    Value::Int(i) => *i,
                    Value::Bool(b) => *b as i64,
                    Value::Float(f) => {
                        if !f.is_finite() || f.abs() >= 9.2e18 {
                            return Err(format!("int() of {f} overflows"));
                        }
                        f.trunc() as i64
                    }
                    Value::Str(s) => s.trim().parse().map_err(|_| format!("int() of {:?}", &**s))?,
                    other => return Err(format!("int() of {}", other.type_name())),
                }))
            }),
        ),
        (
            "float",
            Rc::new(|_, args| {
                arity("float", args, 1)?;
                Ok(Value::Float(match &args[0] {
                    Value::Str(s) => s.trim().parse().map_err(|_| format!("float() of {:?}", &**s))?,
                    other => as_number("float", other)?,
                }))
            }),
        ),
        (
            "abs",
            Rc::new(|_, args| {
                arity("abs", args, 1)?;
                match &args[0] {
                    Value::Int(i) => i.checked_abs().map(Value::Int).ok_or_else(|| "integer overflow in abs()".into()),
                    Value::Float(f) => Ok(Value::Float(f.abs())),
                    other => Err(format!("abs() of {}", other.type_name())),
                }
            }),
        ),
        ("min", Rc::new(|_, args| extremum("min", args, |a, b| a < b))),
        ("max", Rc::new(|_, args| extremum("max", args, |a, b| a > b))),
        (
            "floor",
            Rc::new(|_, args| {
                arity("floor", args, 1)?;
                let f = as_number("floor", &args[0])?.floor();
                if !f.is_finite() || f.abs() >= 9.2e18 {
                    return Err(format!("floor() of {f} overflows"));
                }
                Ok(Value::Int(f as i64))
            }),
        ),
        (
            "sqrt",
            Rc::new(|_, args| {
                arity("sqrt", args, 1)?;
                Ok(Value::Float(as_number("sqrt", &args[0])?.sqrt()))
            }),
        ),
        (
            "type",
            Rc::new(|_, args| {
                arity("type", args, 1)?;
                Ok(Value::str(args[0].type_name()))
            }),
        ),
        (
            "print",
            Rc::new(move |_, args| {
                let line = args
                    .iter()
                    .map(|v| match v {
                        Value::Str(s) => s.to_string(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                output.borrow_mut().push(line);
                Ok(Value::Nil)
            }),
        ),
    ];
    for (name, func) in pure {
        env.builtins.insert(name.to_string(), Builtin { kind: BuiltinKind::Pure, func });
    }
}

fn extremum(name: &str, args: &[Value], better: fn(f64, f64) -> bool) -> Result<Value, String> {
    let items: Vec<Value> = match args {
        [Value::List(l)] => l.items().clone(),
        [] => return Err(format!("{name}() needs arguments")),
        _ => args.to_vec(),
    };
    let mut best: Option<(f64, Value)> = None;
    for v in items {
        let x = as_number(name, &v)?;
        if best.as_ref().is_none_or(|(b, _)| better(x, *b)) {
            best = Some((x, v));
        }
    }
    best.map(|(_, v)| v).ok_or_else(|| format!("{name}() of empty list"))
}

/// Sorted names of registered builtins with their kinds.
pub fn builtin_kinds(env: &Env) -> BTreeMap<String, BuiltinKind> {
    env.builtins.iter().map(|(k, b)| (k.clone(), b.kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut env = Env::new();
        let err = env.register_builtin("len", BuiltinKind::Pure, |_, _| Ok(Value::Nil)).unwrap_err();
        assert_eq!(err, DuplicateBuiltin("len".into()));
    }

    #[test]
    fn len_of_list() {
        let env = Env::new();
        let ctx = BuiltinCtx { ids: env.ids() };
        let l = Value::new_list(env.ids(), vec![Value::Int(1), Value::Int(2), Value::Int(3)]);
        let r = (env.builtin("len").unwrap().func)(&ctx, &[l]).unwrap();
        assert!(r.guest_eq(&Value::Int(3)));
    }
}
