//! Syntax tree for Trk source units.
//!
//! Every statement occupies exactly one source line, so a statement's `line`
//! doubles as its location for line-level tracing.

use std::fmt;

pub type Line = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceUnit {
    pub path: String,
    pub source: String,
    pub functions: Vec<FunctionDef>,
    pub top_level: Vec<Stmt>,
}

impl SourceUnit {
    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
    /// Names declared with `global` anywhere in the body.
    pub globals: Vec<String>,
    pub pragma: Option<MonitorPragma>,
    /// Line of the `def` header.
    pub line: Line,
    /// Exact source slice from the `def` line to the last body line.
    pub source_text: String,
}

impl FunctionDef {
    /// Total number of statements, nested blocks included.
    pub fn statement_count(&self) -> usize {
        fn count(stmts: &[Stmt]) -> usize {
            stmts
                .iter()
                .map(|s| {
                    1 + match &s.kind {
                        StmtKind::If { branches, else_body } => {
                            branches.iter().map(|b| count(&b.body)).sum::<usize>()
                                + else_body.as_ref().map_or(0, |b| count(b))
                        }
                        StmtKind::While { body, .. } | StmtKind::For { body, .. } => count(body),
                        _ => 0,
                    }
                })
                .sum()
        }
        count(&self.body)
    }

    /// Lines holding a statement, sorted.
    pub fn statement_lines(&self) -> Vec<Line> {
        fn walk(stmts: &[Stmt], out: &mut Vec<Line>) {
            for s in stmts {
                match &s.kind {
                    StmtKind::If { branches, else_body } => {
                        for b in branches {
                            out.push(b.line);
                            walk(&b.body, out);
                        }
                        if let Some(e) = else_body {
                            walk(e, out);
                        }
                    }
                    StmtKind::While { body, .. } | StmtKind::For { body, .. } => {
                        out.push(s.line);
                        walk(body, out);
                    }
                    _ => out.push(s.line),
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Options of a `@monitor(...)` pragma, as written.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitorPragma {
    pub line: Line,
    pub granularity: Option<String>,
    pub track: Vec<String>,
    pub call_hooks: Vec<String>,
    pub return_hooks: Vec<String>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub line: Line,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub line: Line,
    pub cond: Expr,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Assign { target: Target, value: Expr },
    AugAssign { target: Target, op: BinOp, value: Expr },
    Expr(Expr),
    Return(Option<Expr>),
    Pass,
    /// `if` followed by any `elif`s; each branch keeps its own header line.
    If { branches: Vec<Branch>, else_body: Option<Vec<Stmt>> },
    While { cond: Expr, body: Vec<Stmt> },
    For { var: String, iter: Expr, body: Vec<Stmt> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Name(String),
    Index { base: Expr, index: Expr },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub line: Line,
    pub kind: ExprKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Nil,
    Name(String),
    List(Vec<Expr>),
    Map(Vec<(String, Expr)>),
    Index { base: Box<Expr>, index: Box<Expr> },
    Call { callee: String, args: Vec<Expr> },
    Unary { op: UnaryOp, operand: Box<Expr> },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::FloorDiv => "//",
            BinOp::Mod => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::In => "in",
        })
    }
}
