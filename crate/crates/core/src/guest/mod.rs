//! The Trk guest language: parser, lowering pass and instrumentable
//! interpreter.

pub mod ast;
mod env;
mod interp;
mod lexer;
mod lower;
mod ops;
mod parser;
mod value;

pub use ast::{FunctionDef, Line, MonitorPragma, SourceUnit};
pub use env::{builtin_kinds, Builtin, BuiltinCtx, BuiltinFn, BuiltinKind, DuplicateBuiltin, Env};
pub use interp::{
    call, call_ast, count_lines_ast, run_top_level, run_top_level_ast, CallError, FrameView, Granularity,
    Instrumentation, NoInstrumentation,
};
pub use lower::{
    compile_function, lower, lower_units, CompiledFunction, FlatBody, FlatEntry, FlatOp, Program, ProgramError, Scope,
};
pub use parser::{parse, parse_expression, parse_function_text};
pub use value::{format_float, Datum, HeapId, IdGen, ListObj, MapObj, NativeObj, Value};

/// Syntax error with its 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: Line,
    pub column: u32,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(line: Line, column: u32, message: impl Into<String>) -> ParseError {
        ParseError { line, column, message: message.into() }
    }

    pub(crate) fn duplicate(name: &str, line: Line) -> ParseError {
        ParseError::new(line, 1, format!("duplicate function {name}"))
    }
}

/// Evaluates a constant expression (literals, lists, maps, arithmetic on
/// constants) such as a `--set name=value` argument.
pub fn parse_literal(text: &str) -> Result<Datum, String> {
    let expr = parse_expression(text).map_err(|e| e.to_string())?;
    let mut env = Env::default();
    let unit = SourceUnit {
        path: "<literal>".into(),
        source: String::new(),
        functions: vec![],
        top_level: vec![ast::Stmt {
            line: 1,
            kind: ast::StmtKind::Assign { target: ast::Target::Name("__literal".into()), value: expr },
        }],
    };
    let program = lower(unit);
    run_top_level(&program, &mut env, &mut NoInstrumentation).map_err(|e| e.to_string())?;
    env.globals.get("__literal").ok_or("literal produced no value")?.to_datum()
}
