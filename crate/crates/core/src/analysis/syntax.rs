//! Python-subset grammar for locating the syntactic context of a byte offset.
//!
//! The tokenizer handles indentation, brackets, strings, comments and line
//! continuations. The recursive-descent parser covers the statement forms of
//! typical benchmark solutions (assignments, control flow, definitions,
//! imports, try/with) and the full expression precedence ladder, recording
//! byte spans for statements, compound-statement headers and selected
//! expression nodes. Unsupported syntax is a parse error, which callers map
//! to [`Category::Other`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Assign,
    AugAssign,
    Return,
    If,
    While,
    For,
    FunctionDef,
    ClassDef,
    Expr,
    Raise,
    Assert,
    Import,
    Try,
    With,
    Delete,
    Pass,
    Break,
    Continue,
    Global,
    BinOp,
    BoolOp,
    Compare,
    Call,
    Lambda,
    Other,
}

impl Category {
    pub const ALL: [Category; 25] = [
        Category::Assign,
        Category::AugAssign,
        Category::Return,
        Category::If,
        Category::While,
        Category::For,
        Category::FunctionDef,
        Category::ClassDef,
        Category::Expr,
        Category::Raise,
        Category::Assert,
        Category::Import,
        Category::Try,
        Category::With,
        Category::Delete,
        Category::Pass,
        Category::Break,
        Category::Continue,
        Category::Global,
        Category::BinOp,
        Category::BoolOp,
        Category::Compare,
        Category::Call,
        Category::Lambda,
        Category::Other,
    ];

    pub fn is_expression(self) -> bool {
        matches!(self, Category::BinOp | Category::BoolOp | Category::Compare | Category::Call | Category::Lambda)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: {message}")]
pub struct SyntaxError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Name,
    Number,
    Str,
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    start: usize,
    end: usize,
}

const OPERATORS: [&str; 49] = [
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "<<", ">>", "<=", ">=", "==", "!=", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "@=", "+", "-", "*", "/", "%", "@", "&", "|", "^", "~", "<", ">", "(", ")", "[", "]",
    "{", "}", ",", ":", ".", ";", "=", "!", "\\",
];

fn tokenize(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let bytes = src.as_bytes();
    let err = |offset: usize, message: &str| SyntaxError { offset, message: message.to_string() };
    let mut toks: Vec<Token> = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;
    let mut pos = 0;
    let mut at_line_start = true;

    while pos < bytes.len() {
        if at_line_start && depth == 0 {
            let mut col = 0;
            let mut p = pos;
            while p < bytes.len() && matches!(bytes[p], b' ' | b'\t' | b'\x0c') {
                col = if bytes[p] == b'\t' { (col / 8 + 1) * 8 } else { col + 1 };
                p += 1;
            }
            // Blank and comment-only lines do not affect indentation.
            if p >= bytes.len() || matches!(bytes[p], b'\n' | b'\r' | b'#') {
                while p < bytes.len() && bytes[p] != b'\n' {
                    p += 1;
                }
                pos = p + 1;
                continue;
            }
            let top = *indents.last().unwrap_or(&0);
            if col > top {
                indents.push(col);
                toks.push(Token { tok: Tok::Indent, start: p, end: p });
            } else {
                while col < *indents.last().unwrap_or(&0) {
                    indents.pop();
                    toks.push(Token { tok: Tok::Dedent, start: p, end: p });
                }
                if col != *indents.last().unwrap_or(&0) {
                    return Err(err(p, "inconsistent dedent"));
                }
            }
            pos = p;
            at_line_start = false;
        }
        let c = bytes[pos];
        match c {
            b' ' | b'\t' | b'\x0c' | b'\r' => pos += 1,
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b'\n' => {
                if depth == 0 && !matches!(toks.last().map(|t| &t.tok), Some(Tok::Newline) | None) {
                    toks.push(Token { tok: Tok::Newline, start: pos, end: pos });
                }
                pos += 1;
                at_line_start = true;
            }
            b'\\' if bytes.get(pos + 1) == Some(&b'\n') => pos += 2,
            b'\\' if bytes.get(pos + 1) == Some(&b'\r') && bytes.get(pos + 2) == Some(&b'\n') => pos += 3,
            _ if c.is_ascii_digit() || (c == b'.' && bytes.get(pos + 1).is_some_and(u8::is_ascii_digit)) => {
                let start = pos;
                while pos < bytes.len() {
                    let b = bytes[pos];
                    if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
                        pos += 1;
                        if matches!(b, b'e' | b'E')
                            && !src[start..pos].starts_with("0x")
                            && !src[start..pos].starts_with("0X")
                            && matches!(bytes.get(pos), Some(b'+' | b'-'))
                        {
                            pos += 1;
                        }
                    } else {
                        break;
                    }
                }
                toks.push(Token { tok: Tok::Number, start, end: pos });
            }
            _ if is_name_start(src, pos) => {
                let start = pos;
                while pos < bytes.len() && is_name_continue(src, pos) {
                    pos += src[pos..].chars().next().map_or(1, char::len_utf8);
                }
                if matches!(bytes.get(pos), Some(b'\'' | b'"')) && is_string_prefix(&src[start..pos]) {
                    pos = scan_string(src, pos).ok_or_else(|| err(start, "unterminated string"))?;
                    toks.push(Token { tok: Tok::Str, start, end: pos });
                } else {
                    toks.push(Token { tok: Tok::Name, start, end: pos });
                }
            }
            b'\'' | b'"' => {
                let start = pos;
                pos = scan_string(src, pos).ok_or_else(|| err(start, "unterminated string"))?;
                toks.push(Token { tok: Tok::Str, start, end: pos });
            }
            _ => {
                let op = OPERATORS
                    .iter()
                    .find(|op| src[pos..].starts_with(**op))
                    .ok_or_else(|| err(pos, "unexpected character"))?;
                if *op == "\\" || *op == "!" {
                    return Err(err(pos, "unexpected character"));
                }
                match *op {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => {
                        depth = depth.checked_sub(1).ok_or_else(|| err(pos, "unbalanced bracket"))?;
                    }
                    _ => {}
                }
                toks.push(Token { tok: Tok::Op(op), start: pos, end: pos + op.len() });
                pos += op.len();
            }
        }
    }
    if depth != 0 {
        return Err(err(bytes.len(), "unclosed bracket"));
    }
    if !matches!(toks.last().map(|t| &t.tok), Some(Tok::Newline) | None) {
        toks.push(Token { tok: Tok::Newline, start: bytes.len(), end: bytes.len() });
    }
    for _ in 1..indents.len() {
        toks.push(Token { tok: Tok::Dedent, start: bytes.len(), end: bytes.len() });
    }
    toks.push(Token { tok: Tok::End, start: bytes.len(), end: bytes.len() });
    Ok(toks)
}

fn is_name_start(src: &str, pos: usize) -> bool {
    src[pos..].chars().next().is_some_and(|c| c == '_' || c.is_alphabetic())
}

fn is_name_continue(src: &str, pos: usize) -> bool {
    src[pos..].chars().next().is_some_and(|c| c == '_' || c.is_alphanumeric())
}

fn is_string_prefix(p: &str) -> bool {
    p.len() <= 2 && p.chars().all(|c| matches!(c.to_ascii_lowercase(), 'r' | 'b' | 'u' | 'f'))
}

/// Returns the end offset of the string literal whose quote starts at `pos`.
fn scan_string(src: &str, pos: usize) -> Option<usize> {
    let bytes = src.as_bytes();
    let q = bytes[pos];
    let triple = bytes.get(pos + 1) == Some(&q) && bytes.get(pos + 2) == Some(&q);
    let mut p = if triple { pos + 3 } else { pos + 1 };
    while p < bytes.len() {
        match bytes[p] {
            b'\\' => p += 2,
            b'\n' if !triple => return None,
            b if b == q => {
                if !triple {
                    return Some(p + 1);
                }
                if bytes.get(p + 1) == Some(&q) && bytes.get(p + 2) == Some(&q) {
                    return Some(p + 3);
                }
                p += 1;
            }
            _ => p += 1,
        }
    }
    None
}

/// Statement-level region that can enclose an offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StmtRegion {
    pub category: Category,
    /// Inclusive-end byte ranges owned by the statement: the whole statement
    /// for simple statements, the header lines for compound ones.
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExprNode {
    pub category: Category,
    pub start: usize,
    pub end: usize,
    /// Index into [`SyntaxTree::statements`] of the owning statement.
    pub stmt: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyntaxTree {
    pub statements: Vec<StmtRegion>,
    pub exprs: Vec<ExprNode>,
}

impl SyntaxTree {
    /// Innermost statement region containing `offset` (end inclusive).
    pub fn statement_at(&self, offset: usize) -> Option<usize> {
        self.statements
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.spans.iter().map(move |sp| (i, *sp)))
            .filter(|(_, (s, e))| *s <= offset && offset <= *e)
            .min_by_key(|(i, (s, e))| (e - s, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
    }

    /// Category at `offset`: the innermost reported expression strictly
    /// containing it within the enclosing statement, else the statement's
    /// own category, else `Other`.
    pub fn classify(&self, offset: usize, reported: &[Category]) -> Category {
        let Some(stmt) = self.statement_at(offset) else {
            return Category::Other;
        };
        self.exprs
            .iter()
            .filter(|e| e.stmt == stmt && reported.contains(&e.category) && e.start < offset && offset < e.end)
            .min_by_key(|e| e.end - e.start)
            .map_or(self.statements[stmt].category, |e| e.category)
    }
}

pub fn parse_module(src: &str) -> Result<SyntaxTree, SyntaxError> {
    let toks = tokenize(src)?;
    let mut p = Parser { src, toks, pos: 0, tree: SyntaxTree::default(), stmt: usize::MAX };
    while !p.at(&Tok::End) {
        if p.at(&Tok::Newline) {
            p.pos += 1;
            continue;
        }
        p.statement()?;
    }
    Ok(p.tree)
}

type Span = (usize, usize);
type PResult<T> = Result<T, SyntaxError>;

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Token>,
    pos: usize,
    tree: SyntaxTree,
    /// Statement currently being parsed; owns recorded expressions.
    stmt: usize,
}

const KEYWORDS: [&str; 35] = [
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn peek_at(&self, n: usize) -> &Token {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)]
    }

    fn text(&self, t: &Token) -> &'a str {
        &self.src[t.start..t.end]
    }

    fn at(&self, tok: &Tok) -> bool {
        &self.peek().tok == tok
    }

    fn at_op(&self, op: &str) -> bool {
        matches!(self.peek().tok, Tok::Op(o) if o == op)
    }

    fn at_kw(&self, kw: &str) -> bool {
        self.peek().tok == Tok::Name && self.text(self.peek()) == kw
    }

    fn kw_at(&self, n: usize, kw: &str) -> bool {
        let t = self.peek_at(n);
        t.tok == Tok::Name && self.text(t) == kw
    }

    fn error<T>(&self, message: &str) -> PResult<T> {
        Err(SyntaxError { offset: self.peek().start, message: message.to_string() })
    }

    fn bump(&mut self) -> Token {
        let t = self.peek().clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn expect_op(&mut self, op: &str) -> PResult<Token> {
        if self.at_op(op) {
            Ok(self.bump())
        } else {
            self.error(&format!("expected {op:?}"))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<Token> {
        if self.at_kw(kw) {
            Ok(self.bump())
        } else {
            self.error(&format!("expected {kw:?}"))
        }
    }

    fn prev_end(&self) -> usize {
        self.toks[self.pos.saturating_sub(1)].end
    }

    fn record(&mut self, category: Category, span: Span) {
        if self.stmt != usize::MAX {
            self.tree.exprs.push(ExprNode { category, start: span.0, end: span.1, stmt: self.stmt });
        }
    }

    fn open_stmt(&mut self, category: Category) -> usize {
        self.tree.statements.push(StmtRegion { category, spans: Vec::new() });
        self.stmt = self.tree.statements.len() - 1;
        self.stmt
    }

    fn add_span(&mut self, stmt: usize, span: Span) {
        self.tree.statements[stmt].spans.push(span);
    }

    // ---- statements ----

    fn statement(&mut self) -> PResult<()> {
        let t = self.peek().clone();
        if t.tok == Tok::Name {
            match self.text(&t) {
                "if" => return self.if_stmt(),
                "while" => return self.loop_stmt(Category::While),
                "for" => return self.loop_stmt(Category::For),
                "def" => return self.def_stmt(None),
                "class" => return self.class_stmt(None),
                "try" => return self.try_stmt(),
                "with" => return self.with_stmt(None),
                "async" => {
                    let start = t.start;
                    if self.kw_at(1, "def") {
                        self.bump();
                        return self.def_stmt(Some(start));
                    }
                    if self.kw_at(1, "for") {
                        self.bump();
                        return self.loop_stmt(Category::For);
                    }
                    if self.kw_at(1, "with") {
                        self.bump();
                        return self.with_stmt(Some(start));
                    }
                    return self.error("unexpected async");
                }
                _ => {}
            }
        }
        if self.at_op("@") {
            return self.decorated();
        }
        self.simple_stmts()
    }

    fn simple_stmts(&mut self) -> PResult<()> {
        loop {
            self.small_stmt()?;
            if self.at_op(";") {
                self.bump();
                if self.at(&Tok::Newline) {
                    break;
                }
                continue;
            }
            break;
        }
        if self.at(&Tok::Newline) {
            self.bump();
            Ok(())
        } else if self.at(&Tok::End) {
            Ok(())
        } else {
            self.error("expected end of statement")
        }
    }

    fn small_stmt(&mut self) -> PResult<()> {
        let start = self.peek().start;
        let kw = if self.peek().tok == Tok::Name { self.text(self.peek()) } else { "" };
        let category = match kw {
            "return" => {
                let s = self.open_stmt(Category::Return);
                self.bump();
                if !self.at_stmt_end() {
                    self.testlist_star()?;
                }
                return self.close_simple(s, start);
            }
            "pass" | "break" | "continue" => {
                let cat = match kw {
                    "pass" => Category::Pass,
                    "break" => Category::Break,
                    _ => Category::Continue,
                };
                let s = self.open_stmt(cat);
                self.bump();
                return self.close_simple(s, start);
            }
            "raise" => {
                let s = self.open_stmt(Category::Raise);
                self.bump();
                if !self.at_stmt_end() {
                    self.test()?;
                    if self.at_kw("from") {
                        self.bump();
                        self.test()?;
                    }
                }
                return self.close_simple(s, start);
            }
            "assert" => {
                let s = self.open_stmt(Category::Assert);
                self.bump();
                self.test()?;
                if self.at_op(",") {
                    self.bump();
                    self.test()?;
                }
                return self.close_simple(s, start);
            }
            "del" => {
                let s = self.open_stmt(Category::Delete);
                self.bump();
                self.exprlist()?;
                return self.close_simple(s, start);
            }
            "import" | "from" => Category::Import,
            "global" | "nonlocal" => Category::Global,
            _ => Category::Expr,
        };
        if category != Category::Expr {
            let s = self.open_stmt(category);
            while !self.at_stmt_end() {
                self.bump();
            }
            return self.close_simple(s, start);
        }
        let s = self.open_stmt(Category::Expr);
        if self.at_kw("yield") {
            self.yield_expr()?;
            return self.close_simple(s, start);
        }
        self.testlist_star()?;
        if self.at_op("=") {
            self.tree.statements[s].category = Category::Assign;
            while self.at_op("=") {
                self.bump();
                if self.at_kw("yield") {
                    self.yield_expr()?;
                } else {
                    self.testlist_star()?;
                }
            }
        } else if matches!(self.peek().tok, Tok::Op(o) if o.len() >= 2 && o.ends_with('=') && !matches!(o, "==" | "<=" | ">=" | "!=" | ":="))
        {
            self.tree.statements[s].category = Category::AugAssign;
            self.bump();
            if self.at_kw("yield") {
                self.yield_expr()?;
            } else {
                self.testlist_star()?;
            }
        } else if self.at_op(":") {
            // Annotated assignment.
            self.tree.statements[s].category = Category::Assign;
            self.bump();
            self.test()?;
            if self.at_op("=") {
                self.bump();
                self.testlist_star()?;
            }
        }
        self.close_simple(s, start)
    }

    fn at_stmt_end(&self) -> bool {
        matches!(self.peek().tok, Tok::Newline | Tok::End) || self.at_op(";")
    }

    fn close_simple(&mut self, s: usize, start: usize) -> PResult<()> {
        let end = self.prev_end();
        self.add_span(s, (start, end));
        if !self.at_stmt_end() {
            return self.error("unexpected token in statement");
        }
        Ok(())
    }

    /// `:` followed by an indented block or simple statements on the same line.
    fn suite(&mut self) -> PResult<()> {
        if self.at(&Tok::Newline) {
            self.bump();
            if !self.at(&Tok::Indent) {
                return self.error("expected indented block");
            }
            self.bump();
            while !self.at(&Tok::Dedent) && !self.at(&Tok::End) {
                if self.at(&Tok::Newline) {
                    self.bump();
                    continue;
                }
                self.statement()?;
            }
            if self.at(&Tok::Dedent) {
                self.bump();
            }
            Ok(())
        } else {
            self.simple_stmts()
        }
    }

    fn header_end(&mut self, s: usize, start: usize) -> PResult<()> {
        let colon = self.expect_op(":")?;
        self.add_span(s, (start, colon.end));
        Ok(())
    }

    fn if_stmt(&mut self) -> PResult<()> {
        let s = self.open_stmt(Category::If);
        let start = self.bump().start;
        self.named_test()?;
        self.header_end(s, start)?;
        self.suite()?;
        loop {
            if self.at_kw("elif") {
                self.stmt = s;
                let start = self.bump().start;
                self.named_test()?;
                self.header_end(s, start)?;
                self.suite()?;
            } else if self.at_kw("else") {
                let start = self.bump().start;
                self.header_end(s, start)?;
                self.suite()?;
                break;
            } else {
                break;
            }
        }
        Ok(())
    }

    fn loop_stmt(&mut self, category: Category) -> PResult<()> {
        let s = self.open_stmt(category);
        let start = if self.toks[self.pos.saturating_sub(1)].tok == Tok::Name
            && self.text(&self.toks[self.pos.saturating_sub(1)]) == "async"
            && self.pos > 0
        {
            self.toks[self.pos - 1].start
        } else {
            self.peek().start
        };
        self.bump();
        if category == Category::For {
            self.exprlist()?;
            self.expect_kw("in")?;
            self.testlist_star()?;
        } else {
            self.named_test()?;
        }
        self.header_end(s, start)?;
        self.suite()?;
        if self.at_kw("else") {
            let start = self.bump().start;
            self.header_end(s, start)?;
            self.suite()?;
        }
        Ok(())
    }

    fn decorated(&mut self) -> PResult<()> {
        let start = self.peek().start;
        while self.at_op("@") {
            self.bump();
            let saved = self.stmt;
            self.stmt = usize::MAX;
            self.named_test()?;
            self.stmt = saved;
            if !self.at(&Tok::Newline) {
                return self.error("expected newline after decorator");
            }
            self.bump();
        }
        if self.at_kw("def") {
            self.def_stmt(Some(start))
        } else if self.at_kw("class") {
            self.class_stmt(Some(start))
        } else if self.at_kw("async") && self.kw_at(1, "def") {
            self.bump();
            self.def_stmt(Some(start))
        } else {
            self.error("expected def or class after decorator")
        }
    }

    fn def_stmt(&mut self, start: Option<usize>) -> PResult<()> {
        let s = self.open_stmt(Category::FunctionDef);
        let kw = self.expect_kw("def")?;
        let start = start.unwrap_or(kw.start);
        if self.peek().tok != Tok::Name {
            return self.error("expected function name");
        }
        self.bump();
        self.expect_op("(")?;
        self.skip_balanced(")")?;
        if self.at_op("->") {
            self.bump();
            self.test()?;
        }
        self.header_end(s, start)?;
        self.suite()
    }

    fn class_stmt(&mut self, start: Option<usize>) -> PResult<()> {
        let s = self.open_stmt(Category::ClassDef);
        let kw = self.expect_kw("class")?;
        let start = start.unwrap_or(kw.start);
        if self.peek().tok != Tok::Name {
            return self.error("expected class name");
        }
        self.bump();
        if self.at_op("(") {
            self.bump();
            self.call_args()?;
        }
        self.header_end(s, start)?;
        self.suite()
    }

    fn try_stmt(&mut self) -> PResult<()> {
        let s = self.open_stmt(Category::Try);
        let start = self.bump().start;
        self.header_end(s, start)?;
        self.suite()?;
        let mut handlers = 0;
        while self.at_kw("except") {
            handlers += 1;
            self.stmt = s;
            let start = self.bump().start;
            if self.at_op("*") {
                self.bump();
            }
            if !self.at_op(":") {
                self.test()?;
                if self.at_kw("as") {
                    self.bump();
                    self.bump();
                }
            }
            self.header_end(s, start)?;
            self.suite()?;
        }
        if self.at_kw("else") {
            let start = self.bump().start;
            self.header_end(s, start)?;
            self.suite()?;
        }
        if self.at_kw("finally") {
            handlers += 1;
            let start = self.bump().start;
            self.header_end(s, start)?;
            self.suite()?;
        }
        if handlers == 0 {
            return self.error("try without except or finally");
        }
        Ok(())
    }

    fn with_stmt(&mut self, start: Option<usize>) -> PResult<()> {
        let s = self.open_stmt(Category::With);
        let kw = self.expect_kw("with")?;
        let start = start.unwrap_or(kw.start);
        loop {
            self.test()?;
            if self.at_kw("as") {
                self.bump();
                self.expr()?;
            }
            if self.at_op(",") {
                self.bump();
                continue;
            }
            break;
        }
        self.header_end(s, start)?;
        self.suite()
    }

    fn skip_balanced(&mut self, close: &str) -> PResult<()> {
        let mut depth = 1;
        loop {
            match self.peek().tok {
                Tok::End => return self.error("unbalanced brackets"),
                Tok::Op("(" | "[" | "{") => depth += 1,
                Tok::Op(")" | "]" | "}") => {
                    depth -= 1;
                    if depth == 0 {
                        if !self.at_op(close) {
                            return self.error("mismatched bracket");
                        }
                        self.bump();
                        return Ok(());
                    }
                }
                _ => {}
            }
            self.bump();
        }
    }

    // ---- expressions ----

    fn testlist_star(&mut self) -> PResult<Span> {
        let first = self.star_or_test()?;
        let mut end = first.1;
        while self.at_op(",") {
            self.bump();
            end = self.prev_end();
            if self.at_expr_end() {
                break;
            }
            end = self.star_or_test()?.1;
        }
        Ok((first.0, end))
    }

    fn at_expr_end(&self) -> bool {
        matches!(self.peek().tok, Tok::Newline | Tok::End)
            || matches!(self.peek().tok, Tok::Op(o) if matches!(o, ")" | "]" | "}" | "=" | ":" | ";") || (o.len() >= 2 && o.ends_with('=') && !matches!(o, "==" | "<=" | ">=" | "!=")))
            || self.at_kw("in")
    }

    fn star_or_test(&mut self) -> PResult<Span> {
        if self.at_op("*") {
            let start = self.bump().start;
            let e = self.expr()?;
            return Ok((start, e.1));
        }
        self.named_test()
    }

    fn exprlist(&mut self) -> PResult<Span> {
        let first = if self.at_op("*") {
            let start = self.bump().start;
            (start, self.expr()?.1)
        } else {
            self.expr()?
        };
        let mut end = first.1;
        while self.at_op(",") {
            self.bump();
            end = self.prev_end();
            if self.at_kw("in") || self.at_expr_end() {
                break;
            }
            end = if self.at_op("*") {
                self.bump();
                self.expr()?.1
            } else {
                self.expr()?.1
            };
        }
        Ok((first.0, end))
    }

    fn named_test(&mut self) -> PResult<Span> {
        if self.peek().tok == Tok::Name && matches!(self.peek_at(1).tok, Tok::Op(":=")) {
            let start = self.bump().start;
            self.bump();
            let v = self.test()?;
            return Ok((start, v.1));
        }
        self.test()
    }

    fn test(&mut self) -> PResult<Span> {
        if self.at_kw("lambda") {
            let start = self.bump().start;
            let mut depth = 0usize;
            while !(depth == 0 && self.at_op(":")) {
                match self.peek().tok {
                    Tok::End | Tok::Newline => return self.error("unterminated lambda"),
                    Tok::Op("(" | "[" | "{") => depth += 1,
                    Tok::Op(")" | "]" | "}") => depth = depth.saturating_sub(1),
                    _ => {}
                }
                self.bump();
            }
            self.bump();
            let body = self.test()?;
            self.record(Category::Lambda, (start, body.1));
            return Ok((start, body.1));
        }
        let cond = self.or_test()?;
        if self.at_kw("if") {
            self.bump();
            self.or_test()?;
            self.expect_kw("else")?;
            let alt = self.test()?;
            return Ok((cond.0, alt.1));
        }
        Ok(cond)
    }

    fn or_test(&mut self) -> PResult<Span> {
        let mut left = self.and_test()?;
        let mut any = false;
        while self.at_kw("or") {
            self.bump();
            left = (left.0, self.and_test()?.1);
            any = true;
        }
        if any {
            self.record(Category::BoolOp, left);
        }
        Ok(left)
    }

    fn and_test(&mut self) -> PResult<Span> {
        let mut left = self.not_test()?;
        let mut any = false;
        while self.at_kw("and") {
            self.bump();
            left = (left.0, self.not_test()?.1);
            any = true;
        }
        if any {
            self.record(Category::BoolOp, left);
        }
        Ok(left)
    }

    fn not_test(&mut self) -> PResult<Span> {
        if self.at_kw("not") {
            let start = self.bump().start;
            let e = self.not_test()?;
            return Ok((start, e.1));
        }
        self.comparison()
    }

    fn comp_op(&mut self) -> bool {
        let op = matches!(self.peek().tok, Tok::Op("<" | ">" | "==" | ">=" | "<=" | "!="));
        if op || self.at_kw("in") {
            self.bump();
            return true;
        }
        if self.at_kw("not") && self.kw_at(1, "in") {
            self.bump();
            self.bump();
            return true;
        }
        if self.at_kw("is") {
            self.bump();
            if self.at_kw("not") {
                self.bump();
            }
            return true;
        }
        false
    }

    fn comparison(&mut self) -> PResult<Span> {
        let mut left = self.expr()?;
        let mut any = false;
        while self.comp_op() {
            left = (left.0, self.expr()?.1);
            any = true;
        }
        if any {
            self.record(Category::Compare, left);
        }
        Ok(left)
    }

    fn binop_prec(&self) -> Option<u8> {
        match self.peek().tok {
            Tok::Op("|") => Some(1),
            Tok::Op("^") => Some(2),
            Tok::Op("&") => Some(3),
            Tok::Op("<<" | ">>") => Some(4),
            Tok::Op("+" | "-") => Some(5),
            Tok::Op("*" | "/" | "//" | "%" | "@") => Some(6),
            _ => None,
        }
    }

    /// Bitwise-or level expression.
    fn expr(&mut self) -> PResult<Span> {
        self.binary(1)
    }

    fn binary(&mut self, min_prec: u8) -> PResult<Span> {
        let mut left = self.factor()?;
        while let Some(prec) = self.binop_prec() {
            if prec < min_prec {
                break;
            }
            self.bump();
            let right = self.binary(prec + 1)?;
            left = (left.0, right.1);
            self.record(Category::BinOp, left);
        }
        Ok(left)
    }

    fn factor(&mut self) -> PResult<Span> {
        if matches!(self.peek().tok, Tok::Op("+" | "-" | "~")) {
            let start = self.bump().start;
            let e = self.factor()?;
            return Ok((start, e.1));
        }
        self.power()
    }

    fn power(&mut self) -> PResult<Span> {
        let start = if self.at_kw("await") { Some(self.bump().start) } else { None };
        let base = self.atom_expr()?;
        let base = (start.unwrap_or(base.0), base.1);
        if self.at_op("**") {
            self.bump();
            let exp = self.factor()?;
            let span = (base.0, exp.1);
            self.record(Category::BinOp, span);
            return Ok(span);
        }
        Ok(base)
    }

    fn atom_expr(&mut self) -> PResult<Span> {
        let mut span = self.atom()?;
        loop {
            if self.at_op("(") {
                self.bump();
                self.call_args()?;
                span = (span.0, self.prev_end());
                self.record(Category::Call, span);
            } else if self.at_op("[") {
                self.bump();
                self.subscripts()?;
                span = (span.0, self.expect_op("]")?.end);
            } else if self.at_op(".") {
                self.bump();
                if self.peek().tok != Tok::Name {
                    return self.error("expected attribute name");
                }
                span = (span.0, self.bump().end);
            } else {
                return Ok(span);
            }
        }
    }

    fn call_args(&mut self) -> PResult<()> {
        while !self.at_op(")") {
            if self.at_op("*") || self.at_op("**") {
                self.bump();
                self.test()?;
            } else if self.peek().tok == Tok::Name && matches!(self.peek_at(1).tok, Tok::Op("=")) {
                self.bump();
                self.bump();
                self.test()?;
            } else {
                self.named_test()?;
                if self.at_kw("for") || self.at_kw("async") {
                    self.comp_for()?;
                }
            }
            if self.at_op(",") {
                self.bump();
            } else {
                break;
            }
        }
        self.expect_op(")")?;
        Ok(())
    }

    fn subscripts(&mut self) -> PResult<()> {
        loop {
            if !self.at_op(":") {
                self.named_test()?;
            }
            if self.at_op(":") {
                self.bump();
                if !self.at_op(":") && !self.at_op("]") && !self.at_op(",") {
                    self.test()?;
                }
                if self.at_op(":") {
                    self.bump();
                    if !self.at_op("]") && !self.at_op(",") {
                        self.test()?;
                    }
                }
            }
            if self.at_op(",") {
                self.bump();
                if self.at_op("]") {
                    break;
                }
            } else {
                break;
            }
        }
        Ok(())
    }

    fn comp_for(&mut self) -> PResult<()> {
        while self.at_kw("for") || (self.at_kw("async") && self.kw_at(1, "for")) {
            if self.at_kw("async") {
                self.bump();
            }
            self.bump();
            self.exprlist()?;
            self.expect_kw("in")?;
            self.or_test()?;
            while self.at_kw("if") {
                self.bump();
                self.or_test()?;
            }
        }
        Ok(())
    }

    fn yield_expr(&mut self) -> PResult<Span> {
        let start = self.expect_kw("yield")?.start;
        if self.at_kw("from") {
            self.bump();
            let e = self.test()?;
            return Ok((start, e.1));
        }
        if self.at_expr_end() || self.at_op(",") {
            return Ok((start, self.prev_end()));
        }
        let e = self.testlist_star()?;
        Ok((start, e.1))
    }

    /// Elements of a bracketed display, including a trailing comprehension.
    fn display_items(&mut self, close: &str, dict_ok: bool) -> PResult<()> {
        let mut first = true;
        while !self.at_op(close) {
            if dict_ok && self.at_op("**") {
                self.bump();
                self.expr()?;
            } else {
                self.star_or_test()?;
                if dict_ok && self.at_op(":") {
                    self.bump();
                    self.test()?;
                }
            }
            if first && (self.at_kw("for") || self.at_kw("async")) {
                self.comp_for()?;
                break;
            }
            first = false;
            if self.at_op(",") {
                self.bump();
            } else {
                break;
            }
        }
        Ok(())
    }

    fn atom(&mut self) -> PResult<Span> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Name => {
                let name = self.text(&t);
                if KEYWORDS.contains(&name) && !matches!(name, "True" | "False" | "None") {
                    return self.error("unexpected keyword");
                }
                self.bump();
                Ok((t.start, t.end))
            }
            Tok::Number => {
                self.bump();
                Ok((t.start, t.end))
            }
            Tok::Str => {
                self.bump();
                let mut end = t.end;
                while self.peek().tok == Tok::Str {
                    end = self.bump().end;
                }
                Ok((t.start, end))
            }
            Tok::Op("...") => {
                self.bump();
                Ok((t.start, t.end))
            }
            Tok::Op("(") => {
                self.bump();
                if self.at_kw("yield") {
                    self.yield_expr()?;
                } else {
                    self.display_items(")", false)?;
                }
                let end = self.expect_op(")")?.end;
                Ok((t.start, end))
            }
            Tok::Op("[") => {
                self.bump();
                self.display_items("]", false)?;
                let end = self.expect_op("]")?.end;
                Ok((t.start, end))
            }
            Tok::Op("{") => {
                self.bump();
                self.display_items("}", true)?;
                let end = self.expect_op("}")?.end;
                Ok((t.start, end))
            }
            _ => self.error("expected expression"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classify(code: &str, offset: usize) -> Category {
        match parse_module(code) {
            Ok(tree) => tree.classify(offset, &[Category::BinOp]),
            Err(_) => Category::Other,
        }
    }

    fn at(code: &str, marker: &str) -> usize {
        code.find(marker).unwrap()
    }

    #[test]
    fn assignment_after_equals() {
        let code = "x = a + b\n";
        assert_eq!(classify(code, 3), Category::Assign);
        assert_eq!(classify(code, 5), Category::BinOp);
        assert_eq!(classify(code, 4), Category::Assign);
    }

    #[test]
    fn return_statement() {
        let code = "def f(a, b):\n    return a+b\n";
        assert_eq!(classify(code, at(code, "return") + 7), Category::Return);
        assert_eq!(classify(code, at(code, "return")), Category::Return);
        assert_eq!(classify(code, at(code, "+")), Category::BinOp);
    }

    #[test]
    fn between_definitions_is_other() {
        let code = "def f():\n    pass\n\ndef g():\n    pass\n";
        assert_eq!(classify(code, at(code, "pass\n\n") + 4), Category::Pass);
        assert_eq!(classify(code, at(code, "\n\ndef") + 1), Category::Other);
        assert_eq!(classify(code, at(code, "def g")), Category::FunctionDef);
    }

    #[test]
    fn compound_headers() {
        let code = "while i < n:\n    if x[i] > 0 and y:\n        i += 1\n    else:\n        break\n";
        assert_eq!(classify(code, at(code, "i < n")), Category::While);
        assert_eq!(classify(code, at(code, "x[i]")), Category::If);
        assert_eq!(classify(code, at(code, "else") + 2), Category::If);
        assert_eq!(classify(code, at(code, "+= 1") + 3), Category::AugAssign);
        assert_eq!(classify(code, at(code, "break")), Category::Break);
        // Indentation inside a body belongs to no statement.
        assert_eq!(classify(code, at(code, "    if") + 1), Category::Other);
    }

    #[test]
    fn broad_syntax_parses() {
        let code = r#"
import sys
from collections import defaultdict as dd

@decorator(arg=1)
class Solution(Base, metaclass=M):
    """Doc."""
    def solve(self, nums: list[int], *args, k: int = 3, **kw) -> int:
        seen = {n: i for i, n in enumerate(nums) if n % 2 == 0}
        pairs = [(a, b) for a in nums for b in nums if a < b]
        total, *rest = 0, 1, 2
        mask = (1 << k) - 1 ^ 0xFF & ~3
        s = nums[1:-1:2] + nums[::2] + [x ** 2 for x in nums]
        f = lambda x, y=2: x * y
        val = a if cond else b
        try:
            v = int(sys.stdin.readline().strip())
        except (ValueError, KeyError) as exc:
            raise RuntimeError("bad") from exc
        finally:
            pass
        with open("f") as fh, ctx():
            data = fh.read()
        for i, (a, b) in enumerate(pairs):
            if (n := len(a)) > 10: continue
        while not done: done = True
        assert total >= 0, "neg"
        del seen[0]
        global counter
        text = f"{x}" 'y' r'\d'
        return -total // 2 % 7 @ m

async def main():
    await asyncio.sleep(1.5e-3)
    async for x in gen():
        yield x
"#;
        parse_module(code).unwrap();
    }

    #[test]
    fn syntax_errors() {
        assert!(parse_module("x = (1,\n").is_err());
        assert!(parse_module("def f(:\n").is_err());
        assert!(parse_module("if x\n    y = 1\n").is_err());
        assert!(parse_module("x = 'abc\n").is_err());
        assert!(parse_module("  x = 1\n y = 2\n").is_err());
        assert_eq!(classify("x = = 1", 2), Category::Other);
    }
}
