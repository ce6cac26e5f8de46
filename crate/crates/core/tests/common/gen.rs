//! Random deterministic Trk programs for property tests.

use proptest::prelude::*;

pub const VARS: [&str; 4] = ["v0", "v1", "v2", "v3"];
const BOUND: i64 = 100_003;

#[derive(Debug, Clone)]
pub enum E {
    Var(usize),
    Lit(i64),
    Global,
    Len,
    Rand,
    Helper(Box<E>),
    Bin(&'static str, Box<E>, Box<E>),
}

#[derive(Debug, Clone)]
pub enum S {
    Assign(usize, E),
    Append(E),
    SetGlobal(E),
    If(E, &'static str, E, Vec<S>, Vec<S>),
    While(u8, Vec<S>),
    For(u8, Vec<S>),
}

fn expr() -> impl Strategy<Value = E> {
    let leaf = prop_oneof![
        4 => (0..VARS.len()).prop_map(E::Var),
        3 => (-5i64..10).prop_map(E::Lit),
        1 => Just(E::Global),
        1 => Just(E::Len),
        1 => Just(E::Rand),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            4 => (prop::sample::select(vec!["+", "-", "*", "//", "%"]), inner.clone(), inner.clone())
                .prop_map(|(op, a, b)| E::Bin(op, Box::new(a), Box::new(b))),
            1 => inner.prop_map(|e| E::Helper(Box::new(e))),
        ]
    })
}

fn stmt() -> impl Strategy<Value = S> {
    let leaf = prop_oneof![
        4 => (0..VARS.len(), expr()).prop_map(|(v, e)| S::Assign(v, e)),
        1 => expr().prop_map(S::Append),
        1 => expr().prop_map(S::SetGlobal),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        let block = prop::collection::vec(inner, 1..4);
        prop_oneof![
            2 => (expr(), prop::sample::select(vec!["<", "<=", "==", "!=", ">"]), expr(), block.clone(), prop::collection::vec(stmt_leaf(), 0..3))
                .prop_map(|(a, op, b, t, e)| S::If(a, op, b, t, e)),
            1 => (0u8..4, block.clone()).prop_map(|(n, b)| S::While(n, b)),
            1 => (0u8..4, block).prop_map(|(n, b)| S::For(n, b)),
        ]
    })
}

fn stmt_leaf() -> impl Strategy<Value = S> {
    (0..VARS.len(), expr()).prop_map(|(v, e)| S::Assign(v, e))
}

/// Body of the generated function `f(p)`.
pub fn body() -> impl Strategy<Value = Vec<S>> {
    prop::collection::vec(stmt(), 1..8)
}

fn render_expr(e: &E) -> String {
    match e {
        E::Var(i) => VARS[*i].to_string(),
        E::Lit(n) if *n < 0 => format!("({n})"),
        E::Lit(n) => n.to_string(),
        E::Global => "g".into(),
        E::Len => "len(xs)".into(),
        E::Rand => "rand_int(0, 9)".into(),
        E::Helper(a) => format!("h({})", render_expr(a)),
        // Divisors are kept nonzero and factors small so every program
        // runs to completion.
        E::Bin(op @ ("//" | "%"), a, b) => format!("({} {op} (abs({}) + 1))", render_expr(a), render_expr(b)),
        E::Bin("*", a, b) => format!("(({} % 1000) * ({} % 1000))", render_expr(a), render_expr(b)),
        E::Bin(op, a, b) => format!("({} {op} {})", render_expr(a), render_expr(b)),
    }
}

struct Renderer {
    out: Vec<String>,
    counter: usize,
}

impl Renderer {
    fn line(&mut self, depth: usize, text: String) {
        self.out.push(format!("{}{text}", "    ".repeat(depth)));
    }

    fn block(&mut self, depth: usize, stmts: &[S]) {
        for s in stmts {
            self.stmt(depth, s);
        }
    }

    fn stmt(&mut self, depth: usize, s: &S) {
        match s {
            S::Assign(v, e) => self.line(depth, format!("{} = {} % {BOUND}", VARS[*v], render_expr(e))),
            S::Append(e) => self.line(depth, format!("append(xs, {})", render_expr(e))),
            S::SetGlobal(e) => self.line(depth, format!("g = {} % {BOUND}", render_expr(e))),
            S::If(a, op, b, then, els) => {
                self.line(depth, format!("if {} {op} {}:", render_expr(a), render_expr(b)));
                self.block(depth + 1, then);
                if !els.is_empty() {
                    self.line(depth, "else:".into());
                    self.block(depth + 1, els);
                }
            }
            S::While(n, body) => {
                self.counter += 1;
                let c = format!("c{}", self.counter);
                self.line(depth, format!("{c} = 0"));
                self.line(depth, format!("while {c} < {n}:"));
                self.line(depth + 1, format!("{c} = {c} + 1"));
                self.block(depth + 1, body);
            }
            S::For(n, body) => {
                self.counter += 1;
                self.line(depth, format!("for i{} in range({n}):", self.counter));
                self.block(depth + 1, body);
            }
        }
    }
}

/// Full program: globals, a helper, and `f(p)` preceded by `pragma` (may
/// be empty). The top level calls `f` `calls` times.
pub fn render(body: &[S], pragma: &str, calls: usize) -> String {
    let mut r = Renderer { out: vec![], counter: 0 };
    r.line(0, "g = 3".into());
    r.line(0, "def h(a):".into());
    r.line(1, "return a * 2 + g".into());
    r.line(0, pragma.to_string());
    r.line(0, "def f(p):".into());
    r.line(1, "global g".into());
    for (i, v) in VARS.iter().enumerate() {
        r.line(1, format!("{v} = p + {i}"));
    }
    r.line(1, "xs = []".into());
    r.block(1, body);
    r.line(1, format!("return [{}, xs, g]", VARS.join(", ")));
    r.line(0, "k = 0".into());
    r.line(0, format!("while k < {calls}:"));
    r.line(1, "f(k)".into());
    r.line(1, "k = k + 1".into());
    r.out.join("\n") + "\n"
}
