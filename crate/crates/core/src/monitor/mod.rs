//! Capture of execution traces: monitor specs, global-reference analysis,
//! hooks, custom serializers and the recording instrumentation.

mod capture;
mod recorder;

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::guest::ast::{Expr, ExprKind, Stmt, StmtKind, Target};
use crate::guest::{Env, Granularity, IdGen, MonitorPragma, NativeObj, Program, Value};

pub use capture::{capture_value, CaptureError, Capturer};
pub use recorder::{run_monitored, run_monitored_observed, Entry, RecordStats, Recorder, RunError, RunReport};

/// What to record for one guest function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub function: String,
    pub granularity: Granularity,
    #[serde(default)]
    pub tracked: BTreeSet<String>,
    #[serde(default)]
    pub call_hooks: Vec<String>,
    #[serde(default)]
    pub return_hooks: Vec<String>,
    /// Empty means every visible variable.
    #[serde(default)]
    pub include: BTreeSet<String>,
    #[serde(default)]
    pub exclude: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("monitor on {function}: unknown granularity {value:?} (expected \"function\" or \"line\")")]
    BadGranularity { function: String, value: String },
    #[error("monitor on {function}: variables both included and excluded: {names:?}")]
    IncludeExcludeOverlap { function: String, names: Vec<String> },
    #[error("monitor on unknown function {0}")]
    UnknownFunction(String),
    #[error("monitor on {function}: tracked name {name} is neither a builtin nor a guest function")]
    UnknownTracked { function: String, name: String },
    #[error("monitor on {function}: unknown hook {hook}")]
    UnknownHook { function: String, hook: String },
    #[error("function {0} has more than one monitor spec")]
    DuplicateSpec(String),
}

impl MonitorSpec {
    pub fn new(function: &str, granularity: Granularity) -> MonitorSpec {
        MonitorSpec {
            function: function.to_string(),
            granularity,
            tracked: BTreeSet::new(),
            call_hooks: vec![],
            return_hooks: vec![],
            include: BTreeSet::new(),
            exclude: BTreeSet::new(),
        }
    }

    pub fn from_pragma(function: &str, p: &MonitorPragma) -> Result<MonitorSpec, MonitorError> {
        let granularity = match p.granularity.as_deref() {
            None | Some("function") => Granularity::Function,
            Some("line") => Granularity::Line,
            Some(other) => {
                return Err(MonitorError::BadGranularity { function: function.into(), value: other.into() })
            }
        };
        let spec = MonitorSpec {
            function: function.to_string(),
            granularity,
            tracked: p.track.iter().cloned().collect(),
            call_hooks: p.call_hooks.clone(),
            return_hooks: p.return_hooks.clone(),
            include: p.include.iter().cloned().collect(),
            exclude: p.exclude.iter().cloned().collect(),
        };
        spec.check_filters()?;
        Ok(spec)
    }

    fn check_filters(&self) -> Result<(), MonitorError> {
        let overlap: Vec<String> = self.include.intersection(&self.exclude).cloned().collect();
        if !overlap.is_empty() {
            return Err(MonitorError::IncludeExcludeOverlap { function: self.function.clone(), names: overlap });
        }
        Ok(())
    }

    /// Checks names against the program, builtins and hook registry.
    pub fn validate(&self, program: &Program, env: &Env, hooks: &HookRegistry) -> Result<(), MonitorError> {
        self.check_filters()?;
        if program.function(&self.function).is_none() {
            return Err(MonitorError::UnknownFunction(self.function.clone()));
        }
        for name in &self.tracked {
            if program.function(name).is_none() && env.builtin(name).is_none() {
                return Err(MonitorError::UnknownTracked { function: self.function.clone(), name: name.clone() });
            }
        }
        for hook in self.call_hooks.iter().chain(&self.return_hooks) {
            if !hooks.contains(hook) {
                return Err(MonitorError::UnknownHook { function: self.function.clone(), hook: hook.clone() });
            }
        }
        Ok(())
    }

    /// Whether a variable name passes the include/exclude filters.
    pub fn captures(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.contains(name)) && !self.exclude.contains(name)
    }
}

/// Specs declared by `@monitor` pragmas, in function-name order.
pub fn specs_from_program(program: &Program) -> Result<Vec<MonitorSpec>, MonitorError> {
    program
        .functions
        .values()
        .filter_map(|f| f.def.pragma.as_ref().map(|p| MonitorSpec::from_pragma(&f.def.name, p)))
        .collect()
}

/// Names `function`, or any guest function it transitively calls, reads
/// from the global scope. Callee names count as reads.
pub fn analyze_global_refs(program: &Program, function: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut work = vec![function.to_string()];
    while let Some(name) = work.pop() {
        if !seen.insert(name.clone()) {
            continue;
        }
        let Some(f) = program.function(&name) else { continue };
        let mut refs = BTreeSet::new();
        let locals: BTreeSet<&str> = f.scope.names.iter().map(String::as_str).collect();
        stmt_refs(&f.def.body, &locals, &mut refs);
        for r in refs {
            if program.function(&r).is_some() {
                work.push(r.clone());
            }
            out.insert(r);
        }
    }
    out
}

fn stmt_refs(stmts: &[Stmt], locals: &BTreeSet<&str>, out: &mut BTreeSet<String>) {
    for s in stmts {
        match &s.kind {
            StmtKind::Assign { target, value } => {
                target_refs(target, locals, out, false);
                expr_refs(value, locals, out);
            }
            StmtKind::AugAssign { target, value, .. } => {
                target_refs(target, locals, out, true);
                expr_refs(value, locals, out);
            }
            StmtKind::Expr(e) | StmtKind::Return(Some(e)) => expr_refs(e, locals, out),
            StmtKind::Return(None) | StmtKind::Pass => {}
            StmtKind::If { branches, else_body } => {
                for b in branches {
                    expr_refs(&b.cond, locals, out);
                    stmt_refs(&b.body, locals, out);
                }
                if let Some(e) = else_body {
                    stmt_refs(e, locals, out);
                }
            }
            StmtKind::While { cond, body } => {
                expr_refs(cond, locals, out);
                stmt_refs(body, locals, out);
            }
            StmtKind::For { iter, body, .. } => {
                expr_refs(iter, locals, out);
                stmt_refs(body, locals, out);
            }
        }
    }
}

fn target_refs(t: &Target, locals: &BTreeSet<&str>, out: &mut BTreeSet<String>, reads_name: bool) {
    match t {
        Target::Name(n) => {
            if reads_name && !locals.contains(n.as_str()) {
                out.insert(n.clone());
            }
        }
        Target::Index { base, index } => {
            expr_refs(base, locals, out);
            expr_refs(index, locals, out);
        }
    }
}

fn expr_refs(e: &Expr, locals: &BTreeSet<&str>, out: &mut BTreeSet<String>) {
    match &e.kind {
        ExprKind::Name(n) => {
            if !locals.contains(n.as_str()) {
                out.insert(n.clone());
            }
        }
        ExprKind::List(items) => items.iter().for_each(|x| expr_refs(x, locals, out)),
        ExprKind::Map(entries) => entries.iter().for_each(|(_, x)| expr_refs(x, locals, out)),
        ExprKind::Index { base, index } => {
            expr_refs(base, locals, out);
            expr_refs(index, locals, out);
        }
        ExprKind::Call { callee, args } => {
            out.insert(callee.clone());
            args.iter().for_each(|x| expr_refs(x, locals, out));
        }
        ExprKind::Unary { operand, .. } => expr_refs(operand, locals, out),
        ExprKind::Binary { lhs, rhs, .. } | ExprKind::And(lhs, rhs) | ExprKind::Or(lhs, rhs) => {
            expr_refs(lhs, locals, out);
            expr_refs(rhs, locals, out);
        }
        ExprKind::Int(_) | ExprKind::Float(_) | ExprKind::Str(_) | ExprKind::Bool(_) | ExprKind::Nil => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    Call,
    Return,
}

/// Read-only view handed to a hook.
pub struct HookInput<'a> {
    pub function: &'a str,
    pub point: HookPoint,
    /// Call arguments (bound locals at entry) for call hooks.
    pub args: Vec<(&'a str, &'a Value)>,
    pub return_value: Option<&'a Value>,
    pub globals: &'a HashMap<String, Value>,
}

/// Kind-tagged metadata produced by a hook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookOutput {
    pub kind: String,
    pub bytes: Vec<u8>,
}

pub type HookFn = Box<dyn Fn(&HookInput<'_>) -> Result<HookOutput, String>>;

#[derive(Default)]
pub struct HookRegistry {
    hooks: HashMap<String, HookFn>,
}

impl HookRegistry {
    pub fn register(&mut self, name: &str, hook: impl Fn(&HookInput<'_>) -> Result<HookOutput, String> + 'static) {
        self.hooks.insert(name.to_string(), Box::new(hook));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.hooks.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&HookFn> {
        self.hooks.get(name)
    }
}

pub type EncodeFn = Box<dyn Fn(&NativeObj) -> Result<Vec<u8>, String>>;
pub type DecodeFn = Box<dyn Fn(&[u8], &IdGen) -> Result<Value, String>>;

/// Custom serialization for one native type tag.
pub struct NativeCodec {
    pub encode: EncodeFn,
    pub decode: Option<DecodeFn>,
}

/// Native type tag to codec. Natives without a codec are skipped.
#[derive(Default)]
pub struct Serializers {
    codecs: HashMap<String, NativeCodec>,
}

impl Serializers {
    pub fn register(&mut self, type_tag: &str, codec: NativeCodec) {
        self.codecs.insert(type_tag.to_string(), codec);
    }

    pub fn get(&self, type_tag: &str) -> Option<&NativeCodec> {
        self.codecs.get(type_tag)
    }
}

/// Everything a recording needs besides the program and environment.
#[derive(Clone, Default)]
pub struct MonitorConfig {
    pub specs: Vec<MonitorSpec>,
    pub hooks: Rc<HookRegistry>,
    pub serializers: Rc<Serializers>,
}

impl MonitorConfig {
    pub fn validate(&self, program: &Program, env: &Env) -> Result<(), MonitorError> {
        let mut seen = BTreeSet::new();
        for s in &self.specs {
            if !seen.insert(&s.function) {
                return Err(MonitorError::DuplicateSpec(s.function.clone()));
            }
            s.validate(program, env, &self.hooks)?;
        }
        Ok(())
    }
}
