//! Lowers structured function bodies into flat entry lists with explicit
//! jump targets, so execution can start at any statement line.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::ast::*;
use super::{parse, parse_function_text, ParseError};

#[derive(Debug, Clone, PartialEq)]
pub struct FlatEntry {
    pub line: Line,
    pub op: FlatOp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlatOp {
    /// Assignment, expression, `return` or `pass`.
    Exec(Stmt),
    /// `if`/`elif`/`while` test; falls through when true.
    Branch { cond: Expr, else_target: usize },
    /// Unconditional jump; emits no line event.
    Jump { target: usize },
    /// Evaluates a `for` iterable into hidden iterator slot `slot`.
    ForInit { iter: Expr, slot: usize },
    /// Advances iterator `slot`, binding `var`, or leaves the loop.
    ForNext { var: String, slot: usize, exit_target: usize },
}

impl FlatOp {
    pub fn jump_targets(&self) -> Vec<usize> {
        match self {
            FlatOp::Branch { else_target, .. } => vec![*else_target],
            FlatOp::Jump { target } => vec![*target],
            FlatOp::ForNext { exit_target, .. } => vec![*exit_target],
            _ => vec![],
        }
    }

}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatBody {
    pub entries: Vec<FlatEntry>,
    /// Statement line -> first entry index for that line.
    pub line_index: BTreeMap<Line, usize>,
    pub for_slots: usize,
}

/// Local-variable layout of a function: params first, then every other
/// assigned name that is not declared `global`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scope {
    pub names: Vec<String>,
    pub slots: HashMap<String, usize>,
}

impl Scope {
    pub fn slot(&self, name: &str) -> Option<usize> {
        self.slots.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledFunction {
    pub def: FunctionDef,
    pub flat: FlatBody,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub units: Vec<SourceUnit>,
    pub functions: BTreeMap<String, Rc<CompiledFunction>>,
    pub top_level: Vec<Rc<FlatBody>>,
    /// Replacement texts applied with [`Program::with_override`].
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProgramError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("function {0} is defined in more than one unit")]
    DuplicateFunction(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("override of {name} changes arity from {expected} to {found}")]
    ArityChange { name: String, expected: usize, found: usize },
    #[error("override text defines {found}, expected {expected}")]
    NameMismatch { expected: String, found: String },
}

impl Program {
    pub fn from_source(source: &str, path: &str) -> Result<Program, ProgramError> {
        lower_units(vec![parse(source, path)?])
    }

    pub fn function(&self, name: &str) -> Option<&Rc<CompiledFunction>> {
        self.functions.get(name)
    }

    /// Map of function name to flat body.
    pub fn flat(&self) -> BTreeMap<&str, &FlatBody> {
        self.functions.iter().map(|(k, f)| (k.as_str(), &f.flat)).collect()
    }

    /// Replaces one function's definition with `text`, keeping its pragma,
    /// its position in the file, and its arity.
    pub fn with_override(&self, name: &str, text: &str) -> Result<Program, ProgramError> {
        let old = self.function(name).ok_or_else(|| ProgramError::UnknownFunction(name.to_string()))?;
        let mut def = parse_function_text(text, old.def.line)?;
        if def.name != name {
            return Err(ProgramError::NameMismatch { expected: name.to_string(), found: def.name });
        }
        if def.params.len() != old.def.params.len() {
            return Err(ProgramError::ArityChange {
                name: name.to_string(),
                expected: old.def.params.len(),
                found: def.params.len(),
            });
        }
        if def.pragma.is_none() {
            def.pragma = old.def.pragma.clone();
        }
        let mut units = self.units.clone();
        for unit in &mut units {
            for f in &mut unit.functions {
                if f.name == name {
                    *f = def.clone();
                }
            }
        }
        let mut program = self.clone();
        program.units = units;
        program.functions.insert(name.to_string(), Rc::new(compile_function(def)));
        program.overrides.insert(name.to_string(), text.to_string());
        Ok(program)
    }
}

/// Lowers a single parsed unit.
pub fn lower(unit: SourceUnit) -> Program {
    lower_units(vec![unit]).expect("a single unit has unique function names")
}

pub fn lower_units(units: Vec<SourceUnit>) -> Result<Program, ProgramError> {
    let mut functions = BTreeMap::new();
    let mut top_level = Vec::new();
    for unit in &units {
        for def in &unit.functions {
            if functions.insert(def.name.clone(), Rc::new(compile_function(def.clone()))).is_some() {
                return Err(ProgramError::DuplicateFunction(def.name.clone()));
            }
        }
        top_level.push(Rc::new(flatten(&unit.top_level)));
    }
    Ok(Program { units, functions, top_level, overrides: BTreeMap::new() })
}

pub fn compile_function(def: FunctionDef) -> CompiledFunction {
    let flat = flatten(&def.body);
    let scope = analyze_scope(&def);
    CompiledFunction { def, flat, scope }
}

fn analyze_scope(def: &FunctionDef) -> Scope {
    fn assigned(stmts: &[Stmt], out: &mut Vec<String>) {
        for s in stmts {
            match &s.kind {
                StmtKind::Assign { target: Target::Name(n), .. }
                | StmtKind::AugAssign { target: Target::Name(n), .. } => out.push(n.clone()),
                StmtKind::If { branches, else_body } => {
                    for b in branches {
                        assigned(&b.body, out);
                    }
                    if let Some(e) = else_body {
                        assigned(e, out);
                    }
                }
                StmtKind::While { body, .. } => assigned(body, out),
                StmtKind::For { var, body, .. } => {
                    out.push(var.clone());
                    assigned(body, out);
                }
                _ => {}
            }
        }
    }
    let mut candidates = def.params.clone();
    assigned(&def.body, &mut candidates);
    let mut scope = Scope::default();
    for name in candidates {
        if def.globals.contains(&name) && !def.params.contains(&name) {
            continue;
        }
        if !scope.slots.contains_key(&name) {
            scope.slots.insert(name.clone(), scope.names.len());
            scope.names.push(name);
        }
    }
    scope
}

fn flatten(stmts: &[Stmt]) -> FlatBody {
    let mut body = FlatBody::default();
    emit_block(stmts, &mut body);
    for (i, e) in body.entries.iter().enumerate() {
        body.line_index.entry(e.line).or_insert(i);
    }
    body
}

fn emit_block(stmts: &[Stmt], body: &mut FlatBody) {
    for s in stmts {
        emit_stmt(s, body);
    }
}

fn emit_stmt(s: &Stmt, body: &mut FlatBody) {
    match &s.kind {
        StmtKind::If { branches, else_body } => {
            let mut exit_jumps = Vec::new();
            for (i, b) in branches.iter().enumerate() {
                let test = body.entries.len();
                body.entries.push(FlatEntry { line: b.line, op: FlatOp::Branch { cond: b.cond.clone(), else_target: 0 } });
                emit_block(&b.body, body);
                let more = i + 1 < branches.len() || else_body.is_some();
                if more {
                    exit_jumps.push(body.entries.len());
                    body.entries.push(FlatEntry { line: b.line, op: FlatOp::Jump { target: 0 } });
                }
                let next = body.entries.len();
                if let FlatOp::Branch { else_target, .. } = &mut body.entries[test].op {
                    *else_target = next;
                }
            }
            if let Some(e) = else_body {
                emit_block(e, body);
            }
            let end = body.entries.len();
            for j in exit_jumps {
                body.entries[j].op = FlatOp::Jump { target: end };
            }
        }
        StmtKind::While { cond, body: inner } => {
            let head = body.entries.len();
            body.entries.push(FlatEntry { line: s.line, op: FlatOp::Branch { cond: cond.clone(), else_target: 0 } });
            emit_block(inner, body);
            body.entries.push(FlatEntry { line: s.line, op: FlatOp::Jump { target: head } });
            let end = body.entries.len();
            if let FlatOp::Branch { else_target, .. } = &mut body.entries[head].op {
                *else_target = end;
            }
        }
        StmtKind::For { var, iter, body: inner } => {
            let slot = body.for_slots;
            body.for_slots += 1;
            body.entries.push(FlatEntry { line: s.line, op: FlatOp::ForInit { iter: iter.clone(), slot } });
            let head = body.entries.len();
            body.entries.push(FlatEntry {
                line: s.line,
                op: FlatOp::ForNext { var: var.clone(), slot, exit_target: 0 },
            });
            emit_block(inner, body);
            body.entries.push(FlatEntry { line: s.line, op: FlatOp::Jump { target: head } });
            let end = body.entries.len();
            if let FlatOp::ForNext { exit_target, .. } = &mut body.entries[head].op {
                *exit_target = end;
            }
        }
        _ => body.entries.push(FlatEntry { line: s.line, op: FlatOp::Exec(s.clone()) }),
    }
}
