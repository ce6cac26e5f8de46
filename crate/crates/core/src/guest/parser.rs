use std::collections::HashSet;

use super::ast::*;
use super::lexer::{split_lines, Keyword, LogicalLine, Tok, Token};
use super::ParseError;

/// Parses a `.trk` source unit.
pub fn parse(source: &str, path: &str) -> Result<SourceUnit, ParseError> {
    let lines = split_lines(source, 1)?;
    let mut p = Parser { lines: &lines, pos: 0, source };
    let mut functions: Vec<FunctionDef> = Vec::new();
    let mut top_level = Vec::new();
    let mut seen = HashSet::new();
    while p.pos < lines.len() {
        let ll = &lines[p.pos];
        if ll.indent != 0 {
            return Err(ParseError::new(ll.line, 1, "unexpected indent"));
        }
        match &ll.tokens[0].tok {
            Tok::At => {
                let pragma = parse_pragma(ll)?;
                p.pos += 1;
                let Some(next) = lines.get(p.pos) else {
                    return Err(ParseError::new(ll.line, 1, "monitor pragma must precede a function definition"));
                };
                if next.indent != 0 || next.tokens[0].tok != Tok::Kw(Keyword::Def) {
                    return Err(ParseError::new(next.line, 1, "monitor pragma must precede a function definition"));
                }
                let mut f = p.parse_function()?;
                f.pragma = Some(pragma);
                if !seen.insert(f.name.clone()) {
                    return Err(ParseError::duplicate(&f.name, f.line));
                }
                functions.push(f);
            }
            Tok::Kw(Keyword::Def) => {
                let f = p.parse_function()?;
                if !seen.insert(f.name.clone()) {
                    return Err(ParseError::duplicate(&f.name, f.line));
                }
                functions.push(f);
            }
            _ => top_level.push(p.parse_statement(0, false, &mut Vec::new())?),
        }
    }
    Ok(SourceUnit { path: path.to_string(), source: source.to_string(), functions, top_level })
}

/// Parses the text of a single function definition whose `def` line sits at
/// `first_line` of its enclosing file. A leading pragma is accepted.
pub fn parse_function_text(text: &str, first_line: Line) -> Result<FunctionDef, ParseError> {
    let lines = split_lines(text, first_line)?;
    let mut p = Parser { lines: &lines, pos: 0, source: text };
    let Some(first) = lines.first() else {
        return Err(ParseError::new(first_line, 1, "expected a function definition"));
    };
    let pragma = if first.tokens[0].tok == Tok::At {
        p.pos += 1;
        Some(parse_pragma(first)?)
    } else {
        None
    };
    match lines.get(p.pos) {
        Some(ll) if ll.indent == 0 && ll.tokens[0].tok == Tok::Kw(Keyword::Def) => {}
        Some(ll) => return Err(ParseError::new(ll.line, 1, "expected a function definition")),
        None => return Err(ParseError::new(first_line, 1, "expected a function definition")),
    }
    let mut f = p.parse_function()?;
    f.pragma = pragma;
    if let Some(extra) = lines.get(p.pos) {
        return Err(ParseError::new(extra.line, 1, "unexpected content after function definition"));
    }
    Ok(f)
}

/// Parses a single expression, e.g. a literal passed on a command line.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let lines = split_lines(text, 1)?;
    match lines.as_slice() {
        [ll] => {
            let mut ep = ExprParser { toks: &ll.tokens, pos: 0, line: ll.line };
            let e = ep.expr()?;
            ep.expect_end()?;
            Ok(e)
        }
        _ => Err(ParseError::new(1, 1, "expected a single-line expression")),
    }
}

struct Parser<'a> {
    lines: &'a [LogicalLine],
    pos: usize,
    source: &'a str,
}

impl<'a> Parser<'a> {
    fn parse_function(&mut self) -> Result<FunctionDef, ParseError> {
        let ll = &self.lines[self.pos];
        let mut ep = ExprParser { toks: &ll.tokens, pos: 1, line: ll.line };
        let name = ep.ident("function name")?;
        ep.expect(&Tok::LParen, "'('")?;
        let mut params = Vec::new();
        if !ep.eat(&Tok::RParen) {
            loop {
                let p = ep.ident("parameter name")?;
                if params.contains(&p) {
                    return Err(ep.error(format!("duplicate parameter {p}")));
                }
                params.push(p);
                if ep.eat(&Tok::RParen) {
                    break;
                }
                ep.expect(&Tok::Comma, "',' or ')'")?;
            }
        }
        ep.expect(&Tok::Colon, "':'")?;
        ep.expect_end()?;
        let def_line = ll.line;
        let start = ll.start;
        self.pos += 1;
        let mut globals = Vec::new();
        let body = self.parse_body(ll, true, &mut globals)?;
        let end = self.lines[self.pos - 1].end;
        Ok(FunctionDef {
            name,
            params,
            body,
            globals,
            pragma: None,
            line: def_line,
            source_text: self.source[start..end].to_string(),
        })
    }

    /// Parses the indented block following `header`.
    fn parse_body(
        &mut self,
        header: &LogicalLine,
        in_function: bool,
        globals: &mut Vec<String>,
    ) -> Result<Vec<Stmt>, ParseError> {
        let Some(first) = self.lines.get(self.pos) else {
            return Err(ParseError::new(header.line, 1, "expected an indented block"));
        };
        if first.indent <= header.indent {
            return Err(ParseError::new(first.line, 1, "expected an indented block"));
        }
        let level = first.indent;
        let mut body = Vec::new();
        while let Some(ll) = self.lines.get(self.pos) {
            if ll.indent < level {
                if ll.indent > header.indent {
                    return Err(ParseError::new(ll.line, 1, "inconsistent dedent"));
                }
                break;
            }
            if ll.indent > level {
                return Err(ParseError::new(ll.line, 1, "unexpected indent"));
            }
            if let Tok::Kw(Keyword::Global) = ll.tokens[0].tok {
                if !in_function {
                    return Err(ParseError::new(ll.line, 1, "global declaration outside a function"));
                }
                let mut ep = ExprParser { toks: &ll.tokens, pos: 1, line: ll.line };
                loop {
                    let n = ep.ident("global name")?;
                    if !globals.contains(&n) {
                        globals.push(n);
                    }
                    if ep.at_end() {
                        break;
                    }
                    ep.expect(&Tok::Comma, "','")?;
                }
                self.pos += 1;
                continue;
            }
            body.push(self.parse_statement(level, in_function, globals)?);
        }
        if body.is_empty() {
            return Err(ParseError::new(header.line, 1, "block has no statements"));
        }
        Ok(body)
    }

    fn parse_statement(
        &mut self,
        level: usize,
        in_function: bool,
        globals: &mut Vec<String>,
    ) -> Result<Stmt, ParseError> {
        let ll = &self.lines[self.pos];
        let line = ll.line;
        let first = &ll.tokens[0];
        match &first.tok {
            Tok::Kw(Keyword::Def) => Err(ParseError::new(line, first.col, "function definitions must be at top level")),
            Tok::At => Err(ParseError::new(line, first.col, "monitor pragma must precede a top-level function")),
            Tok::Kw(Keyword::Global) => {
                Err(ParseError::new(line, first.col, "global declaration outside a function"))
            }
            Tok::Kw(Keyword::Elif) | Tok::Kw(Keyword::Else) => {
                Err(ParseError::new(line, first.col, "elif/else without a matching if"))
            }
            Tok::Kw(Keyword::If) => {
                let mut branches = Vec::new();
                let cond = header_expr(ll, 1)?;
                self.pos += 1;
                let body = self.parse_body(ll, in_function, globals)?;
                branches.push(Branch { line, cond, body });
                let mut else_body = None;
                while let Some(next) = self.lines.get(self.pos) {
                    if next.indent != level {
                        break;
                    }
                    match next.tokens[0].tok {
                        Tok::Kw(Keyword::Elif) => {
                            let cond = header_expr(next, 1)?;
                            self.pos += 1;
                            let body = self.parse_body(next, in_function, globals)?;
                            branches.push(Branch { line: next.line, cond, body });
                        }
                        Tok::Kw(Keyword::Else) => {
                            let mut ep = ExprParser { toks: &next.tokens, pos: 1, line: next.line };
                            ep.expect(&Tok::Colon, "':'")?;
                            ep.expect_end()?;
                            self.pos += 1;
                            else_body = Some(self.parse_body(next, in_function, globals)?);
                            break;
                        }
                        _ => break,
                    }
                }
                Ok(Stmt { line, kind: StmtKind::If { branches, else_body } })
            }
            Tok::Kw(Keyword::While) => {
                let cond = header_expr(ll, 1)?;
                self.pos += 1;
                let body = self.parse_body(ll, in_function, globals)?;
                Ok(Stmt { line, kind: StmtKind::While { cond, body } })
            }
            Tok::Kw(Keyword::For) => {
                let mut ep = ExprParser { toks: &ll.tokens, pos: 1, line };
                let var = ep.ident("loop variable")?;
                ep.expect(&Tok::Kw(Keyword::In), "'in'")?;
                let end = ll.tokens.len() - 1;
                if ll.tokens[end].tok != Tok::Colon {
                    return Err(ParseError::new(line, ll.tokens[end].col, "expected ':' at end of line"));
                }
                let mut ip = ExprParser { toks: &ll.tokens[..end], pos: ep.pos, line };
                let iter = ip.expr()?;
                ip.expect_end()?;
                self.pos += 1;
                let body = self.parse_body(ll, in_function, globals)?;
                Ok(Stmt { line, kind: StmtKind::For { var, iter, body } })
            }
            _ => {
                let stmt = simple_statement(ll)?;
                if !in_function && matches!(stmt.kind, StmtKind::Return(_)) {
                    return Err(ParseError::new(line, first.col, "return outside a function"));
                }
                self.pos += 1;
                Ok(stmt)
            }
        }
    }
}

fn header_expr(ll: &LogicalLine, start: usize) -> Result<Expr, ParseError> {
    let end = ll.tokens.len() - 1;
    if end < start || ll.tokens[end].tok != Tok::Colon {
        let col = ll.tokens.last().map_or(1, |t| t.col);
        return Err(ParseError::new(ll.line, col, "expected ':' at end of line"));
    }
    let mut ep = ExprParser { toks: &ll.tokens[..end], pos: start, line: ll.line };
    let e = ep.expr()?;
    ep.expect_end()?;
    Ok(e)
}

fn simple_statement(ll: &LogicalLine) -> Result<Stmt, ParseError> {
    let line = ll.line;
    let toks = &ll.tokens;
    match toks[0].tok {
        Tok::Kw(Keyword::Return) => {
            let value = if toks.len() == 1 {
                None
            } else {
                let mut ep = ExprParser { toks, pos: 1, line };
                let e = ep.expr()?;
                ep.expect_end()?;
                Some(e)
            };
            return Ok(Stmt { line, kind: StmtKind::Return(value) });
        }
        Tok::Kw(Keyword::Pass) => {
            let ep = ExprParser { toks, pos: 1, line };
            ep.expect_end()?;
            return Ok(Stmt { line, kind: StmtKind::Pass });
        }
        _ => {}
    }
    // Locate an assignment operator outside brackets.
    let mut depth = 0i32;
    let mut assign_at = None;
    for (i, t) in toks.iter().enumerate() {
        match t.tok {
            Tok::LParen | Tok::LBracket | Tok::LBrace => depth += 1,
            Tok::RParen | Tok::RBracket | Tok::RBrace => depth -= 1,
            Tok::Assign | Tok::PlusAssign | Tok::MinusAssign | Tok::StarAssign | Tok::SlashAssign
                if depth == 0 =>
            {
                assign_at = Some(i);
                break;
            }
            _ => {}
        }
    }
    let Some(at) = assign_at else {
        let mut ep = ExprParser { toks, pos: 0, line };
        let e = ep.expr()?;
        ep.expect_end()?;
        return Ok(Stmt { line, kind: StmtKind::Expr(e) });
    };
    let mut tp = ExprParser { toks: &toks[..at], pos: 0, line };
    let target_expr = tp.expr()?;
    tp.expect_end()?;
    let target = match target_expr.kind {
        ExprKind::Name(n) => Target::Name(n),
        ExprKind::Index { base, index } => Target::Index { base: *base, index: *index },
        _ => return Err(ParseError::new(line, toks[0].col, "invalid assignment target")),
    };
    let mut vp = ExprParser { toks, pos: at + 1, line };
    let value = vp.expr()?;
    vp.expect_end()?;
    let kind = match toks[at].tok {
        Tok::Assign => StmtKind::Assign { target, value },
        Tok::PlusAssign => StmtKind::AugAssign { target, op: BinOp::Add, value },
        Tok::MinusAssign => StmtKind::AugAssign { target, op: BinOp::Sub, value },
        Tok::StarAssign => StmtKind::AugAssign { target, op: BinOp::Mul, value },
        _ => StmtKind::AugAssign { target, op: BinOp::Div, value },
    };
    Ok(Stmt { line, kind })
}

fn parse_pragma(ll: &LogicalLine) -> Result<MonitorPragma, ParseError> {
    let mut ep = ExprParser { toks: &ll.tokens, pos: 1, line: ll.line };
    let name = ep.ident("pragma name")?;
    if name != "monitor" {
        return Err(ep.error(format!("unknown pragma @{name}")));
    }
    let mut pragma = MonitorPragma { line: ll.line, ..Default::default() };
    if ep.at_end() {
        return Ok(pragma);
    }
    ep.expect(&Tok::LParen, "'('")?;
    if !ep.eat(&Tok::RParen) {
        loop {
            let key = ep.ident("option name")?;
            ep.expect(&Tok::Assign, "'='")?;
            match key.as_str() {
                "granularity" => {
                    let g = ep.string_or_ident()?;
                    if g != "function" && g != "line" {
                        return Err(ep.error(format!("granularity must be \"function\" or \"line\", got {g:?}")));
                    }
                    pragma.granularity = Some(g);
                }
                "track" => pragma.track = ep.name_list()?,
                "include" => pragma.include = ep.name_list()?,
                "exclude" => pragma.exclude = ep.name_list()?,
                "call_hook" | "call_hooks" => pragma.call_hooks = ep.name_list()?,
                "return_hook" | "return_hooks" => pragma.return_hooks = ep.name_list()?,
                other => return Err(ep.error(format!("unknown monitor option {other}"))),
            }
            if ep.eat(&Tok::RParen) {
                break;
            }
            ep.expect(&Tok::Comma, "',' or ')'")?;
        }
    }
    ep.expect_end()?;
    Ok(pragma)
}

struct ExprParser<'t> {
    toks: &'t [Token],
    pos: usize,
    line: Line,
}

impl<'t> ExprParser<'t> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> u32 {
        match self.toks.get(self.pos) {
            Some(t) => t.col,
            None => self.toks.last().map_or(1, |t| t.col + 1),
        }
    }

    fn error(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.col(), msg)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error(format!("unexpected {}", describe(&self.toks[self.pos].tok))))
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok, what: &str) -> Result<(), ParseError> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.unexpected(what))
        }
    }

    fn unexpected(&self, what: &str) -> ParseError {
        match self.peek() {
            Some(t) => self.error(format!("expected {what}, found {}", describe(t))),
            None => self.error(format!("expected {what}, found end of line")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn string_or_ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) | Some(Tok::Str(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected("a name or string")),
        }
    }

    /// `name`, `"name"`, or a bracketed list of either.
    fn name_list(&mut self) -> Result<Vec<String>, ParseError> {
        if !self.eat(&Tok::LBracket) {
            return Ok(vec![self.string_or_ident()?]);
        }
        let mut out = Vec::new();
        if self.eat(&Tok::RBracket) {
            return Ok(out);
        }
        loop {
            out.push(self.string_or_ident()?);
            if self.eat(&Tok::RBracket) {
                return Ok(out);
            }
            self.expect(&Tok::Comma, "',' or ']'")?;
        }
    }

    fn mk(&self, kind: ExprKind) -> Expr {
        Expr { line: self.line, kind }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.eat(&Tok::Kw(Keyword::Or)) {
            let rhs = self.and_expr()?;
            lhs = self.mk(ExprKind::Or(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.not_expr()?;
        while self.eat(&Tok::Kw(Keyword::And)) {
            let rhs = self.not_expr()?;
            lhs = self.mk(ExprKind::And(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Kw(Keyword::Not)) {
            let operand = self.not_expr()?;
            return Ok(self.mk(ExprKind::Unary { op: UnaryOp::Not, operand: Box::new(operand) }));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(Tok::EqEq) => BinOp::Eq,
            Some(Tok::NotEq) => BinOp::Ne,
            Some(Tok::Lt) => BinOp::Lt,
            Some(Tok::Le) => BinOp::Le,
            Some(Tok::Gt) => BinOp::Gt,
            Some(Tok::Ge) => BinOp::Ge,
            Some(Tok::Kw(Keyword::In)) => BinOp::In,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        if matches!(
            self.peek(),
            Some(Tok::EqEq | Tok::NotEq | Tok::Lt | Tok::Le | Tok::Gt | Tok::Ge | Tok::Kw(Keyword::In))
        ) {
            return Err(self.error("chained comparisons are not supported"));
        }
        Ok(self.mk(ExprKind::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }))
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.multiplicative()?;
            lhs = self.mk(ExprKind::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) });
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                Some(Tok::DoubleSlash) => BinOp::FloorDiv,
                Some(Tok::Percent) => BinOp::Mod,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = self.mk(ExprKind::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) });
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            // Fold negative literals so i64::MIN-adjacent values stay exact.
            return Ok(match self.unary()? {
                Expr { kind: ExprKind::Int(i), line } => Expr { line, kind: ExprKind::Int(-i) },
                Expr { kind: ExprKind::Float(f), line } => Expr { line, kind: ExprKind::Float(-f) },
                operand => self.mk(ExprKind::Unary { op: UnaryOp::Neg, operand: Box::new(operand) }),
            });
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.atom()?;
        loop {
            match self.peek() {
                Some(Tok::LParen) => {
                    let ExprKind::Name(callee) = &e.kind else {
                        return Err(self.error("only named functions can be called"));
                    };
                    let callee = callee.clone();
                    self.pos += 1;
                    let args = self.comma_list(&Tok::RParen)?;
                    e = self.mk(ExprKind::Call { callee, args });
                }
                Some(Tok::LBracket) => {
                    self.pos += 1;
                    let index = self.expr()?;
                    self.expect(&Tok::RBracket, "']'")?;
                    e = self.mk(ExprKind::Index { base: Box::new(e), index: Box::new(index) });
                }
                Some(Tok::Dot) => {
                    self.pos += 1;
                    let field = self.ident("field name")?;
                    let key = self.mk(ExprKind::Str(field));
                    e = self.mk(ExprKind::Index { base: Box::new(e), index: Box::new(key) });
                }
                _ => return Ok(e),
            }
        }
    }

    fn comma_list(&mut self, close: &Tok) -> Result<Vec<Expr>, ParseError> {
        let mut items = Vec::new();
        if self.eat(close) {
            return Ok(items);
        }
        loop {
            items.push(self.expr()?);
            if self.eat(close) {
                return Ok(items);
            }
            self.expect(&Tok::Comma, "','")?;
            if self.eat(close) {
                return Ok(items);
            }
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error("expected an expression, found end of line"));
        };
        self.pos += 1;
        let kind = match tok {
            Tok::Int(i) => ExprKind::Int(i),
            Tok::Float(f) => ExprKind::Float(f),
            Tok::Str(s) => ExprKind::Str(s),
            Tok::Kw(Keyword::True) => ExprKind::Bool(true),
            Tok::Kw(Keyword::False) => ExprKind::Bool(false),
            Tok::Kw(Keyword::Nil) => ExprKind::Nil,
            Tok::Ident(n) => ExprKind::Name(n),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "')'")?;
                return Ok(e);
            }
            Tok::LBracket => ExprKind::List(self.comma_list(&Tok::RBracket)?),
            Tok::LBrace => {
                let mut entries: Vec<(String, Expr)> = Vec::new();
                if !self.eat(&Tok::RBrace) {
                    loop {
                        let key = match self.peek() {
                            Some(Tok::Str(s)) => s.clone(),
                            _ => return Err(self.unexpected("a string key")),
                        };
                        self.pos += 1;
                        self.expect(&Tok::Colon, "':'")?;
                        let v = self.expr()?;
                        entries.retain(|(k, _)| *k != key);
                        entries.push((key, v));
                        if self.eat(&Tok::RBrace) {
                            break;
                        }
                        self.expect(&Tok::Comma, "','")?;
                        if self.eat(&Tok::RBrace) {
                            break;
                        }
                    }
                }
                ExprKind::Map(entries)
            }
            other => {
                self.pos -= 1;
                return Err(self.error(format!("expected an expression, found {}", describe(&other))));
            }
        };
        Ok(self.mk(kind))
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Int(i) => format!("integer {i}"),
        Tok::Float(f) => format!("float {f}"),
        Tok::Str(_) => "string literal".into(),
        Tok::Ident(n) => format!("name {n}"),
        Tok::Kw(k) => format!("keyword {}", format!("{k:?}").to_lowercase()),
        Tok::Colon => "':'".into(),
        Tok::Comma => "','".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Assign => "'='".into(),
        other => format!("{other:?}"),
    }
}
