//! Instrumentable interpreter.
//!
//! Function bodies normally run from their flat lowering ([`FlatBody`]),
//! which is what makes resuming at an arbitrary statement line possible.
//! A structured AST walker with the same observable behavior is kept
//! alongside; it doubles as an independent line-counting oracle.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::ast::*;
use super::env::{BuiltinCtx, Env};
use super::lower::{CompiledFunction, FlatBody, FlatOp, Program};
use super::ops;
use super::value::{IdGen, Value};

/// Capture resolution of an observed function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Function,
    Line,
}

/// Read-only view of an executing guest frame.
pub struct FrameView<'a> {
    pub function: &'a CompiledFunction,
    locals: &'a [Option<Value>],
    pub globals: &'a HashMap<String, Value>,
    pub ids: &'a IdGen,
}

impl<'a> FrameView<'a> {
    /// Bound locals in slot order (parameters first).
    pub fn locals(&self) -> impl Iterator<Item = (&'a str, &'a Value)> + 'a {
        let names = &self.function.scope.names;
        self.locals.iter().enumerate().filter_map(move |(i, v)| v.as_ref().map(|v| (names[i].as_str(), v)))
    }

    pub fn local(&self, name: &str) -> Option<&'a Value> {
        self.function.scope.slot(name).and_then(|s| self.locals[s].as_ref())
    }

    pub fn name(&self) -> &'a str {
        &self.function.def.name
    }
}

/// Callbacks fired by the interpreter. Every method has a no-op default.
pub trait Instrumentation {
    /// Whether calls to `function` are observed, and at what granularity.
    fn observes(&self, _function: &str) -> Option<Granularity> {
        None
    }
    fn on_call(&mut self, _frame: &FrameView<'_>) -> Result<(), String> {
        Ok(())
    }
    /// Fired before a statement line of a line-granularity function runs.
    fn on_line(&mut self, _frame: &FrameView<'_>, _line: Line) -> Result<(), String> {
        Ok(())
    }
    fn on_return(&mut self, _frame: &FrameView<'_>, _value: &Value) -> Result<(), String> {
        Ok(())
    }
    /// An observed call is being left because of an error.
    fn on_unwind(&mut self, _function: &str, _error: &CallError) {}
    /// Whether invocations of `callable` are reported through
    /// [`Instrumentation::intercept`] and [`Instrumentation::on_external`].
    fn intercepts(&self, _callable: &str) -> bool {
        false
    }
    /// May supply a result instead of running the callable.
    fn intercept(&mut self, _callable: &str, _args: &[Value], _ids: &IdGen) -> Result<Option<Value>, String> {
        Ok(None)
    }
    fn on_external(&mut self, _callable: &str, _args: &[Value], _result: &Value) -> Result<(), String> {
        Ok(())
    }
    fn on_global_read(&mut self, _name: &str) {}
}

/// Instrumentation that observes nothing.
pub struct NoInstrumentation;

impl Instrumentation for NoInstrumentation {}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("{function}() takes {expected} argument(s), got {found}")]
    Arity { function: String, expected: usize, found: usize },
    #[error("line {line} is not a statement boundary of {function}")]
    BadEntryLine { function: String, line: Line },
    #[error("{}line {line}: {message}", fn_prefix(.function))]
    Runtime { function: Option<String>, line: Line, message: String },
    #[error("instrumentation failed in {function} at line {line}: {message}")]
    Instrumentation { function: String, line: Line, message: String },
}

fn fn_prefix(f: &Option<String>) -> String {
    f.as_ref().map(|f| format!("in {f}, ")).unwrap_or_default()
}

impl CallError {
    pub fn line(&self) -> Option<Line> {
        match self {
            CallError::Runtime { line, .. } | CallError::Instrumentation { line, .. } => Some(*line),
            CallError::BadEntryLine { line, .. } => Some(*line),
            _ => None,
        }
    }
}

const MAX_CALL_DEPTH: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Flat,
    Ast,
}

/// Calls `function` in `program`.
///
/// With `entry_line`, execution starts at that statement line instead of the
/// top of the body and `preset_locals` seeds the frame; `args` must then be
/// empty.
pub fn call(
    program: &Program,
    function: &str,
    args: Vec<Value>,
    env: &mut Env,
    instr: &mut dyn Instrumentation,
    entry_line: Option<Line>,
    preset_locals: Option<&BTreeMap<String, Value>>,
) -> Result<Value, CallError> {
    let mut it = Interp { program, env, sink: instr, mode: Mode::Flat, depth: 0, lines: None };
    let func = program.function(function).ok_or_else(|| CallError::UnknownFunction(function.to_string()))?;
    match entry_line {
        None => it.invoke(func, args),
        Some(line) => {
            if !args.is_empty() {
                return Err(CallError::Arity { function: function.to_string(), expected: 0, found: args.len() });
            }
            let start = *func
                .flat
                .line_index
                .get(&line)
                .ok_or_else(|| CallError::BadEntryLine { function: function.to_string(), line })?;
            let mut locals = vec![None; func.scope.names.len()];
            for (name, v) in preset_locals.into_iter().flatten() {
                let slot = func.scope.slot(name).ok_or_else(|| CallError::Runtime {
                    function: Some(function.to_string()),
                    line,
                    message: format!("{name} is not a local of {function}"),
                })?;
                locals[slot] = Some(v.clone());
            }
            it.run_frame(func, locals, start)
        }
    }
}

/// Same as [`call`] without an entry line, executed by walking the AST.
pub fn call_ast(
    program: &Program,
    function: &str,
    args: Vec<Value>,
    env: &mut Env,
    instr: &mut dyn Instrumentation,
) -> Result<Value, CallError> {
    let mut it = Interp { program, env, sink: instr, mode: Mode::Ast, depth: 0, lines: None };
    let func = program.function(function).ok_or_else(|| CallError::UnknownFunction(function.to_string()))?;
    it.invoke(func, args)
}

/// Runs every unit's top-level statements in order.
pub fn run_top_level(program: &Program, env: &mut Env, instr: &mut dyn Instrumentation) -> Result<(), CallError> {
    let mut it = Interp { program, env, sink: instr, mode: Mode::Flat, depth: 0, lines: None };
    for body in &program.top_level {
        let mut frame = Frame::top(body.for_slots);
        it.exec_flat(body, &mut frame, 0)?;
    }
    Ok(())
}

/// Runs the top level by walking the AST, and returns every executed
/// statement as `(function, line)` in execution order. Top-level statements
/// are reported with an empty function name.
pub fn run_top_level_ast(
    program: &Program,
    env: &mut Env,
    instr: &mut dyn Instrumentation,
) -> Result<Vec<(String, Line)>, CallError> {
    let mut it = Interp { program, env, sink: instr, mode: Mode::Ast, depth: 0, lines: Some(Vec::new()) };
    for unit in &program.units {
        let mut frame = Frame::top(0);
        it.exec_block(&unit.top_level, &mut frame)?;
    }
    Ok(it.lines.unwrap_or_default())
}

/// [`call_ast`] that also returns every executed statement line.
pub fn count_lines_ast(
    program: &Program,
    function: &str,
    args: Vec<Value>,
    env: &mut Env,
) -> Result<(Value, Vec<(String, Line)>), CallError> {
    let mut sink = NoInstrumentation;
    let mut it = Interp { program, env, sink: &mut sink, mode: Mode::Ast, depth: 0, lines: Some(Vec::new()) };
    let func = program.function(function).ok_or_else(|| CallError::UnknownFunction(function.to_string()))?;
    let v = it.invoke(func, args)?;
    Ok((v, it.lines.unwrap_or_default()))
}

struct Frame<'f> {
    func: Option<&'f CompiledFunction>,
    locals: Vec<Option<Value>>,
    observed: Option<Granularity>,
    iters: Vec<Option<(Vec<Value>, usize)>>,
}

impl<'f> Frame<'f> {
    fn top(for_slots: usize) -> Frame<'f> {
        Frame { func: None, locals: Vec::new(), observed: None, iters: vec![None; for_slots] }
    }
    fn fn_name(&self) -> Option<String> {
        self.func.map(|f| f.def.name.clone())
    }
}

enum Flow {
    Normal,
    Return(Value),
}

struct Interp<'a> {
    program: &'a Program,
    env: &'a mut Env,
    sink: &'a mut dyn Instrumentation,
    mode: Mode,
    depth: usize,
    lines: Option<Vec<(String, Line)>>,
}

impl<'a> Interp<'a> {
    fn rt(&self, frame: &Frame<'_>, line: Line, message: impl Into<String>) -> CallError {
        CallError::Runtime { function: frame.fn_name(), line, message: message.into() }
    }

    fn invoke(&mut self, func: &'a CompiledFunction, args: Vec<Value>) -> Result<Value, CallError> {
        let def = &func.def;
        if args.len() != def.params.len() {
            return Err(CallError::Arity { function: def.name.clone(), expected: def.params.len(), found: args.len() });
        }
        let mut locals = vec![None; func.scope.names.len()];
        for (i, a) in args.into_iter().enumerate() {
            locals[i] = Some(a);
        }
        self.run_frame(func, locals, 0)
    }

    fn run_frame(
        &mut self,
        func: &'a CompiledFunction,
        locals: Vec<Option<Value>>,
        start: usize,
    ) -> Result<Value, CallError> {
        if self.depth >= MAX_CALL_DEPTH {
            return Err(CallError::Runtime {
                function: Some(func.def.name.clone()),
                line: func.def.line,
                message: "maximum call depth exceeded".into(),
            });
        }
        let observed = self.sink.observes(&func.def.name);
        let mut frame = Frame { func: Some(func), locals, observed, iters: vec![None; func.flat.for_slots] };
        if observed.is_some() {
            let view = FrameView { function: func, locals: &frame.locals, globals: &self.env.globals, ids: self.env.ids() };
            self.sink.on_call(&view).map_err(|message| CallError::Instrumentation {
                function: func.def.name.clone(),
                line: func.def.line,
                message,
            })?;
        }
        self.depth += 1;
        let result = match self.mode {
            Mode::Flat => self.exec_flat(&func.flat, &mut frame, start),
            Mode::Ast => self.exec_block(&func.def.body, &mut frame).map(|flow| match flow {
                Flow::Return(v) => v,
                Flow::Normal => Value::Nil,
            }),
        };
        self.depth -= 1;
        match result {
            Ok(v) => {
                if observed.is_some() {
                    let view =
                        FrameView { function: func, locals: &frame.locals, globals: &self.env.globals, ids: self.env.ids() };
                    let last = func.def.body.last().map_or(func.def.line, |s| s.line);
                    self.sink.on_return(&view, &v).map_err(|message| CallError::Instrumentation {
                        function: func.def.name.clone(),
                        line: last,
                        message,
                    })?;
                }
                Ok(v)
            }
            Err(e) => {
                if observed.is_some() {
                    self.sink.on_unwind(&func.def.name, &e);
                }
                Err(e)
            }
        }
    }

    fn line_event(&mut self, frame: &Frame<'_>, line: Line) -> Result<(), CallError> {
        if let Some(lines) = &mut self.lines {
            lines.push((frame.func.map_or_else(String::new, |f| f.def.name.clone()), line));
        }
        if frame.observed == Some(Granularity::Line) {
            let func = frame.func.expect("observed frames belong to functions");
            let view = FrameView { function: func, locals: &frame.locals, globals: &self.env.globals, ids: self.env.ids() };
            self.sink.on_line(&view, line).map_err(|message| CallError::Instrumentation {
                function: func.def.name.clone(),
                line,
                message,
            })?;
        }
        Ok(())
    }

    fn exec_flat(&mut self, body: &'a FlatBody, frame: &mut Frame<'a>, start: usize) -> Result<Value, CallError> {
        let mut pc = start;
        // The header's first visit is reported by ForInit, before the
        // iterable is evaluated; later visits come through the back edge.
        let mut from_init = false;
        while let Some(entry) = body.entries.get(pc) {
            match &entry.op {
                FlatOp::Exec(stmt) => {
                    self.line_event(frame, entry.line)?;
                    if let Flow::Return(v) = self.exec_simple(stmt, frame)? {
                        return Ok(v);
                    }
                    pc += 1;
                }
                FlatOp::Branch { cond, else_target } => {
                    self.line_event(frame, entry.line)?;
                    pc = if self.eval(cond, frame)?.truthy() { pc + 1 } else { *else_target };
                }
                FlatOp::Jump { target } => pc = *target,
                FlatOp::ForInit { iter, slot } => {
                    self.line_event(frame, entry.line)?;
                    let v = self.eval(iter, frame)?;
                    let items = ops::iterate(&v).map_err(|m| self.rt(frame, entry.line, m))?;
                    frame.iters[*slot] = Some((items, 0));
                    from_init = true;
                    pc += 1;
                }
                FlatOp::ForNext { var, slot, exit_target } => {
                    if !std::mem::take(&mut from_init) {
                        self.line_event(frame, entry.line)?;
                    }
                    let next = match &mut frame.iters[*slot] {
                        Some((items, pos)) => {
                            let item = items.get(*pos).cloned();
                            *pos += 1;
                            item
                        }
                        None => {
                            return Err(self.rt(frame, entry.line, "loop iterator state is unavailable (resumed inside a for loop)"));
                        }
                    };
                    match next {
                        Some(item) => {
                            self.assign_name(var, item, frame);
                            pc += 1;
                        }
                        None => {
                            frame.iters[*slot] = None;
                            pc = *exit_target;
                        }
                    }
                }
            }
        }
        Ok(Value::Nil)
    }

    fn exec_block(&mut self, stmts: &'a [Stmt], frame: &mut Frame<'a>) -> Result<Flow, CallError> {
        for s in stmts {
            match &s.kind {
                StmtKind::If { branches, else_body } => {
                    let mut taken = false;
                    for b in branches {
                        self.line_event(frame, b.line)?;
                        if self.eval(&b.cond, frame)?.truthy() {
                            taken = true;
                            if let Flow::Return(v) = self.exec_block(&b.body, frame)? {
                                return Ok(Flow::Return(v));
                            }
                            break;
                        }
                    }
                    if !taken {
                        if let Some(e) = else_body {
                            if let Flow::Return(v) = self.exec_block(e, frame)? {
                                return Ok(Flow::Return(v));
                            }
                        }
                    }
                }
                StmtKind::While { cond, body } => loop {
                    self.line_event(frame, s.line)?;
                    if !self.eval(cond, frame)?.truthy() {
                        break;
                    }
                    if let Flow::Return(v) = self.exec_block(body, frame)? {
                        return Ok(Flow::Return(v));
                    }
                },
                StmtKind::For { var, iter, body } => {
                    self.line_event(frame, s.line)?;
                    let v = self.eval(iter, frame)?;
                    let items = ops::iterate(&v).map_err(|m| self.rt(frame, s.line, m))?;
                    for item in items {
                        self.assign_name(var, item, frame);
                        if let Flow::Return(v) = self.exec_block(body, frame)? {
                            return Ok(Flow::Return(v));
                        }
                        self.line_event(frame, s.line)?;
                    }
                }
                _ => {
                    self.line_event(frame, s.line)?;
                    if let Flow::Return(v) = self.exec_simple(s, frame)? {
                        return Ok(Flow::Return(v));
                    }
                }
            }
        }
        Ok(Flow::Normal)
    }

    fn exec_simple(&mut self, stmt: &Stmt, frame: &mut Frame<'a>) -> Result<Flow, CallError> {
        match &stmt.kind {
            StmtKind::Assign { target, value } => {
                let v = self.eval(value, frame)?;
                self.assign(target, v, frame, stmt.line)?;
            }
            StmtKind::AugAssign { target, op, value } => match target {
                Target::Name(n) => {
                    let cur = self.read_name(n, frame, stmt.line)?;
                    let rhs = self.eval(value, frame)?;
                    let v = ops::binary(*op, &cur, &rhs, self.env.ids()).map_err(|m| self.rt(frame, stmt.line, m))?;
                    self.assign_name(n, v, frame);
                }
                Target::Index { base, index } => {
                    let b = self.eval(base, frame)?;
                    let i = self.eval(index, frame)?;
                    let cur = ops::index(&b, &i).map_err(|m| self.rt(frame, stmt.line, m))?;
                    let rhs = self.eval(value, frame)?;
                    let v = ops::binary(*op, &cur, &rhs, self.env.ids()).map_err(|m| self.rt(frame, stmt.line, m))?;
                    ops::set_index(&b, &i, v).map_err(|m| self.rt(frame, stmt.line, m))?;
                }
            },
            StmtKind::Expr(e) => {
                self.eval(e, frame)?;
            }
            StmtKind::Return(e) => {
                let v = match e {
                    Some(e) => self.eval(e, frame)?,
                    None => Value::Nil,
                };
                return Ok(Flow::Return(v));
            }
            StmtKind::Pass => {}
            StmtKind::If { .. } | StmtKind::While { .. } | StmtKind::For { .. } => {
                unreachable!("compound statements are lowered")
            }
        }
        Ok(Flow::Normal)
    }

    fn assign(&mut self, target: &Target, v: Value, frame: &mut Frame<'a>, line: Line) -> Result<(), CallError> {
        match target {
            Target::Name(n) => {
                self.assign_name(n, v, frame);
                Ok(())
            }
            Target::Index { base, index } => {
                let b = self.eval(base, frame)?;
                let i = self.eval(index, frame)?;
                ops::set_index(&b, &i, v).map_err(|m| self.rt(frame, line, m))
            }
        }
    }

    fn assign_name(&mut self, name: &str, v: Value, frame: &mut Frame<'a>) {
        if let Some(slot) = frame.func.and_then(|f| f.scope.slot(name)) {
            frame.locals[slot] = Some(v);
        } else if let Some(g) = self.env.globals.get_mut(name) {
            *g = v;
        } else {
            self.env.globals.insert(name.to_string(), v);
        }
    }

    fn read_name(&mut self, name: &str, frame: &Frame<'_>, line: Line) -> Result<Value, CallError> {
        if let Some(func) = frame.func {
            if let Some(slot) = func.scope.slot(name) {
                return frame.locals[slot]
                    .clone()
                    .ok_or_else(|| self.rt(frame, line, format!("local {name} referenced before assignment")));
            }
        }
        self.sink.on_global_read(name);
        self.env.globals.get(name).cloned().ok_or_else(|| self.rt(frame, line, format!("undefined name {name}")))
    }

    fn eval(&mut self, e: &Expr, frame: &mut Frame<'a>) -> Result<Value, CallError> {
        Ok(match &e.kind {
            ExprKind::Int(i) => Value::Int(*i),
            ExprKind::Float(f) => Value::Float(*f),
            ExprKind::Str(s) => Value::str(s.as_str()),
            ExprKind::Bool(b) => Value::Bool(*b),
            ExprKind::Nil => Value::Nil,
            ExprKind::Name(n) => self.read_name(n, frame, e.line)?,
            ExprKind::List(items) => {
                let mut vs = Vec::with_capacity(items.len());
                for item in items {
                    vs.push(self.eval(item, frame)?);
                }
                Value::new_list(self.env.ids(), vs)
            }
            ExprKind::Map(entries) => {
                let mut m = BTreeMap::new();
                for (k, item) in entries {
                    let v = self.eval(item, frame)?;
                    m.insert(k.clone(), v);
                }
                Value::new_map(self.env.ids(), m)
            }
            ExprKind::Index { base, index } => {
                let b = self.eval(base, frame)?;
                let i = self.eval(index, frame)?;
                ops::index(&b, &i).map_err(|m| self.rt(frame, e.line, m))?
            }
            ExprKind::Call { callee, args } => {
                let mut vs = Vec::with_capacity(args.len());
                for a in args {
                    vs.push(self.eval(a, frame)?);
                }
                self.call_named(callee, vs, frame, e.line)?
            }
            ExprKind::Unary { op, operand } => {
                let v = self.eval(operand, frame)?;
                ops::unary(*op, &v).map_err(|m| self.rt(frame, e.line, m))?
            }
            ExprKind::Binary { op, lhs, rhs } => {
                let a = self.eval(lhs, frame)?;
                let b = self.eval(rhs, frame)?;
                ops::binary(*op, &a, &b, self.env.ids()).map_err(|m| self.rt(frame, e.line, m))?
            }
            ExprKind::And(lhs, rhs) => {
                let a = self.eval(lhs, frame)?;
                if !a.truthy() {
                    a
                } else {
                    self.eval(rhs, frame)?
                }
            }
            ExprKind::Or(lhs, rhs) => {
                let a = self.eval(lhs, frame)?;
                if a.truthy() {
                    a
                } else {
                    self.eval(rhs, frame)?
                }
            }
        })
    }

    fn call_named(&mut self, name: &str, mut args: Vec<Value>, frame: &Frame<'_>, line: Line) -> Result<Value, CallError> {
        let tracked = self.sink.intercepts(name);
        let instr_err = |message: String| CallError::Instrumentation {
            function: frame.fn_name().unwrap_or_else(|| "<top level>".into()),
            line,
            message,
        };
        if tracked {
            if let Some(v) = self.sink.intercept(name, &args, self.env.ids()).map_err(instr_err)? {
                self.sink.on_external(name, &args, &v).map_err(instr_err)?;
                return Ok(v);
            }
        }
        let result = if let Some(func) = self.program.function(name) {
            let func: &'a CompiledFunction = Rc::as_ref(func);
            if args.len() != func.def.params.len() {
                return Err(self.rt(
                    frame,
                    line,
                    format!("{name}() takes {} argument(s), got {}", func.def.params.len(), args.len()),
                ));
            }
            let call_args = if tracked { args.clone() } else { std::mem::take(&mut args) };
            self.invoke(func, call_args)?
        } else if let Some(b) = self.env.builtin(name) {
            let f = b.func.clone();
            let ctx = BuiltinCtx { ids: self.env.ids() };
            f(&ctx, &args).map_err(|m| self.rt(frame, line, m))?
        } else {
            return Err(self.rt(frame, line, format!("undefined function {name}")));
        };
        if tracked {
            self.sink.on_external(name, &args, &result).map_err(instr_err)?;
        }
        Ok(result)
    }
}
