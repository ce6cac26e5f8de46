use super::ast::Line;
use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    Kw(Keyword),
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Dot,
    At,
    Assign,
    PlusAssign,
    MinusAssign,
    StarAssign,
    SlashAssign,
    Plus,
    Minus,
    Star,
    Slash,
    DoubleSlash,
    Percent,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keyword {
    Def,
    If,
    Elif,
    Else,
    While,
    For,
    In,
    Return,
    Global,
    Pass,
    And,
    Or,
    Not,
    True,
    False,
    Nil,
}

impl Keyword {
    fn from_ident(s: &str) -> Option<Keyword> {
        Some(match s {
            "def" => Keyword::Def,
            "if" => Keyword::If,
            "elif" => Keyword::Elif,
            "else" => Keyword::Else,
            "while" => Keyword::While,
            "for" => Keyword::For,
            "in" => Keyword::In,
            "return" => Keyword::Return,
            "global" => Keyword::Global,
            "pass" => Keyword::Pass,
            "and" => Keyword::And,
            "or" => Keyword::Or,
            "not" => Keyword::Not,
            "true" => Keyword::True,
            "false" => Keyword::False,
            "nil" => Keyword::Nil,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    /// 1-based column.
    pub col: u32,
}

/// One non-blank, non-comment physical line.
#[derive(Debug, Clone)]
pub struct LogicalLine {
    pub line: Line,
    pub indent: usize,
    pub tokens: Vec<Token>,
    /// Byte range of the whole physical line in the source (newline excluded).
    pub start: usize,
    pub end: usize,
}

pub fn split_lines(source: &str, first_line: Line) -> Result<Vec<LogicalLine>, ParseError> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (idx, raw) in source.split('\n').enumerate() {
        let line = first_line + idx as Line;
        let start = offset;
        offset += raw.len() + 1;
        let text = raw.strip_suffix('\r').unwrap_or(raw);
        let indent = text.len() - text.trim_start_matches(' ').len();
        let rest = &text[indent..];
        if rest.starts_with('\t') {
            return Err(ParseError::new(line, indent as u32 + 1, "tabs are not allowed in indentation"));
        }
        let tokens = tokenize(rest, line, indent as u32)?;
        if tokens.is_empty() {
            continue;
        }
        out.push(LogicalLine { line, indent, tokens, start, end: start + raw.len() });
    }
    Ok(out)
}

fn tokenize(text: &str, line: Line, col_base: u32) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = col_base + i as u32 + 1;
        let err = |msg: String| ParseError::new(line, col, msg);
        match c {
            ' ' => {
                i += 1;
                continue;
            }
            '#' => break,
            ';' => return Err(err("multiple statements on one line are not allowed".into())),
            '0'..='9' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '_') {
                    i += 1;
                }
                let mut is_float = false;
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    is_float = true;
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        is_float = true;
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit: String = chars[start..i].iter().filter(|c| **c != '_').collect();
                let tok = if is_float {
                    Tok::Float(lit.parse().map_err(|_| err(format!("invalid float literal {lit}")))?)
                } else {
                    Tok::Int(lit.parse().map_err(|_| err(format!("integer literal {lit} out of range")))?)
                };
                tokens.push(Token { tok, col });
                continue;
            }
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&ch) = chars.get(i) else {
                        return Err(err("unterminated string literal".into()));
                    };
                    i += 1;
                    if ch == quote {
                        break;
                    }
                    if ch == '\\' {
                        let Some(&esc) = chars.get(i) else {
                            return Err(err("unterminated string literal".into()));
                        };
                        i += 1;
                        s.push(match esc {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            '0' => '\0',
                            '\\' => '\\',
                            '"' => '"',
                            '\'' => '\'',
                            other => return Err(err(format!("unknown escape \\{other}"))),
                        });
                    } else {
                        s.push(ch);
                    }
                }
                tokens.push(Token { tok: Tok::Str(s), col });
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let tok = match Keyword::from_ident(&word) {
                    Some(kw) => Tok::Kw(kw),
                    None => Tok::Ident(word),
                };
                tokens.push(Token { tok, col });
                continue;
            }
            _ => {}
        }
        let next = chars.get(i + 1).copied();
        let (tok, width) = match (c, next) {
            ('/', Some('/')) => (Tok::DoubleSlash, 2),
            ('=', Some('=')) => (Tok::EqEq, 2),
            ('!', Some('=')) => (Tok::NotEq, 2),
            ('<', Some('=')) => (Tok::Le, 2),
            ('>', Some('=')) => (Tok::Ge, 2),
            ('+', Some('=')) => (Tok::PlusAssign, 2),
            ('-', Some('=')) => (Tok::MinusAssign, 2),
            ('*', Some('=')) => (Tok::StarAssign, 2),
            ('/', Some('=')) => (Tok::SlashAssign, 2),
            ('(', _) => (Tok::LParen, 1),
            (')', _) => (Tok::RParen, 1),
            ('[', _) => (Tok::LBracket, 1),
            (']', _) => (Tok::RBracket, 1),
            ('{', _) => (Tok::LBrace, 1),
            ('}', _) => (Tok::RBrace, 1),
            (',', _) => (Tok::Comma, 1),
            (':', _) => (Tok::Colon, 1),
            ('.', _) => (Tok::Dot, 1),
            ('@', _) => (Tok::At, 1),
            ('=', _) => (Tok::Assign, 1),
            ('+', _) => (Tok::Plus, 1),
            ('-', _) => (Tok::Minus, 1),
            ('*', _) => (Tok::Star, 1),
            ('/', _) => (Tok::Slash, 1),
            ('%', _) => (Tok::Percent, 1),
            ('<', _) => (Tok::Lt, 1),
            ('>', _) => (Tok::Gt, 1),
            _ => return Err(err(format!("unexpected character {c:?}"))),
        };
        tokens.push(Token { tok, col });
        i += width;
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_blank_and_comment_lines() {
        let lines = split_lines("x = 1\n\n   # note\ny = 2.5e3\n", 1).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].line, 4);
        assert_eq!(lines[1].tokens[2].tok, Tok::Float(2500.0));
    }

    #[test]
    fn rejects_semicolons() {
        let e = split_lines("x = 1; y = 2", 1).unwrap_err();
        assert_eq!((e.line, e.column), (1, 6));
    }

    #[test]
    fn string_escapes() {
        let lines = split_lines(r#"s = "a\"b\n""#, 1).unwrap();
        assert_eq!(lines[0].tokens[2].tok, Tok::Str("a\"b\n".into()));
    }
}
