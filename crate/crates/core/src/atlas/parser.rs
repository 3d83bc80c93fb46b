use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::region::RegionId;

use super::ast::{Direction, Expr, Reference, RegionRule, RuleSet, Side, MAX_DEPTH};
use super::RuleError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Str(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Semi,
    Eq,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Eof => "end of file".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> RuleError {
    RuleError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Spanned>, RuleError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let single = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            ';' => Some(Tok::Semi),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned { tok, line: tl, column: tc });
            i += 1;
            col += 1;
            continue;
        }
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
        } else if c.is_whitespace() {
            i += 1;
            col += 1;
        } else if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Spanned {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
        } else if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            let n: f64 = s
                .parse()
                .map_err(|_| syntax(tl, tc, format!("malformed number `{s}`")))?;
            if !n.is_finite() {
                return Err(syntax(tl, tc, format!("number `{s}` is not finite")));
            }
            out.push(Spanned {
                tok: Tok::Number(n),
                line: tl,
                column: tc,
            });
        } else if c == '"' {
            i += 1;
            col += 1;
            let start = i;
            while i < chars.len() && chars[i] != '"' && chars[i] != '\n' {
                i += 1;
                col += 1;
            }
            if i >= chars.len() || chars[i] != '"' {
                return Err(syntax(tl, tc, "unterminated string"));
            }
            out.push(Spanned {
                tok: Tok::Str(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
            i += 1;
            col += 1;
        } else {
            return Err(syntax(tl, tc, format!("unexpected character {c:?}")));
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

const OPERATORS: &[&str] = &[
    "landmark",
    "union",
    "intersect",
    "subtract",
    "dilate",
    "bbox",
    "centroid",
    "slab",
    "split_left",
    "split_right",
    "anterior_of",
    "posterior_of",
    "left_of",
    "right_of",
    "superior_of",
    "inferior_of",
];

const RESERVED: &[&str] = &["empty", "define", "region", "landmarks", "priority", "expr"];

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    defines: BTreeMap<String, Arc<Expr>>,
    inventory: Option<BTreeSet<String>>,
}

/// Argument of an operator call: a set expression, a number, or a
/// half-space reference (`bbox(..)` / `centroid(..)`).
enum Arg {
    Expr(Expr, usize, usize),
    Number(f64, usize, usize),
    Centroid(Expr, usize, usize),
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn next(&mut self) -> Spanned {
        let t = self.peek().clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, message: impl Into<String>) -> RuleError {
        let t = self.peek();
        syntax(t.line, t.column, message)
    }

    fn expect(&mut self, want: Tok, context: &str) -> Result<Spanned, RuleError> {
        let t = self.peek();
        if std::mem::discriminant(&t.tok) == std::mem::discriminant(&want) {
            Ok(self.next())
        } else {
            Err(self.err_here(format!(
                "expected {} {context}, found {}",
                want.describe(),
                t.tok.describe()
            )))
        }
    }

    fn ident(&mut self, context: &str) -> Result<(String, usize, usize), RuleError> {
        let t = self.next();
        match t.tok {
            Tok::Ident(s) => Ok((s, t.line, t.column)),
            other => Err(syntax(
                t.line,
                t.column,
                format!("expected identifier {context}, found {}", other.describe()),
            )),
        }
    }

    fn file(&mut self) -> Result<(Option<Vec<String>>, Vec<(String, Arc<Expr>)>, BTreeMap<RegionId, RegionRule>), RuleError> {
        let mut defines_in_order = Vec::new();
        let mut rules = BTreeMap::new();
        let mut inventory_list = None;
        loop {
            let t = self.next();
            match &t.tok {
                Tok::Eof => break,
                Tok::Ident(kw) if kw == "landmarks" => {
                    if self.inventory.is_some() {
                        return Err(syntax(t.line, t.column, "landmark inventory declared twice"));
                    }
                    if !rules.is_empty() || !defines_in_order.is_empty() {
                        return Err(syntax(
                            t.line,
                            t.column,
                            "landmark inventory must precede defines and regions",
                        ));
                    }
                    let names = self.inventory_block()?;
                    self.inventory = Some(names.iter().cloned().collect());
                    inventory_list = Some(names);
                }
                Tok::Ident(kw) if kw == "define" => {
                    let (name, l, c) = self.ident("after `define`")?;
                    if OPERATORS.contains(&name.as_str()) || RESERVED.contains(&name.as_str()) {
                        return Err(syntax(l, c, format!("`{name}` is reserved and cannot be defined")));
                    }
                    if self.defines.contains_key(&name) {
                        return Err(syntax(l, c, format!("`{name}` is already defined")));
                    }
                    self.expect(Tok::Eq, "after define name")?;
                    let body = self.expr(0)?;
                    self.expect(Tok::Semi, "after define")?;
                    let body = Arc::new(body);
                    self.defines.insert(name.clone(), body.clone());
                    defines_in_order.push((name, body));
                }
                Tok::Ident(kw) if kw == "region" => {
                    let (name, l, c) = self.ident("after `region`")?;
                    let region: RegionId = name
                        .parse()
                        .map_err(|_| syntax(l, c, format!("unknown region `{name}`")))?;
                    if rules.contains_key(&region) {
                        return Err(syntax(l, c, format!("duplicate region `{name}`")));
                    }
                    let rule = self.region_body(region, l, c)?;
                    rules.insert(region, rule);
                }
                other => {
                    return Err(syntax(
                        t.line,
                        t.column,
                        format!(
                            "expected `landmarks`, `define` or `region`, found {}",
                            other.describe()
                        ),
                    ))
                }
            }
        }
        Ok((inventory_list, defines_in_order, rules))
    }

    fn inventory_block(&mut self) -> Result<Vec<String>, RuleError> {
        self.expect(Tok::LBrace, "after `landmarks`")?;
        let mut names = Vec::new();
        loop {
            if self.peek().tok == Tok::RBrace {
                self.next();
                break;
            }
            let t = self.next();
            let name = match t.tok {
                Tok::Ident(s) | Tok::Str(s) => s,
                other => {
                    return Err(syntax(
                        t.line,
                        t.column,
                        format!("expected landmark name, found {}", other.describe()),
                    ))
                }
            };
            names.push(name);
            match self.peek().tok {
                Tok::Comma => {
                    self.next();
                }
                Tok::RBrace => {}
                _ => return Err(self.err_here("expected `,` or `}` in landmark inventory")),
            }
        }
        Ok(names)
    }

    fn region_body(&mut self, region: RegionId, line: usize, column: usize) -> Result<RegionRule, RuleError> {
        self.expect(Tok::LBrace, "after region name")?;
        let mut priority = None;
        let mut expr = None;
        loop {
            let t = self.next();
            match &t.tok {
                Tok::RBrace => break,
                Tok::Ident(f) if f == "priority" => {
                    if priority.is_some() {
                        return Err(syntax(t.line, t.column, "priority given twice"));
                    }
                    self.expect(Tok::Eq, "after `priority`")?;
                    let n = self.next();
                    match n.tok {
                        Tok::Number(v) if v.fract() == 0.0 && v.abs() < 1e9 => priority = Some(v as i64),
                        other => {
                            return Err(syntax(
                                n.line,
                                n.column,
                                format!("priority must be an integer, found {}", other.describe()),
                            ))
                        }
                    }
                    self.expect(Tok::Semi, "after priority")?;
                }
                Tok::Ident(f) if f == "expr" => {
                    if expr.is_some() {
                        return Err(syntax(t.line, t.column, "expr given twice"));
                    }
                    self.expect(Tok::Eq, "after `expr`")?;
                    expr = Some(self.expr(0)?);
                    self.expect(Tok::Semi, "after expr")?;
                }
                other => {
                    return Err(syntax(
                        t.line,
                        t.column,
                        format!("expected `priority`, `expr` or `}}`, found {}", other.describe()),
                    ))
                }
            }
        }
        let name = region.name();
        let priority = priority.ok_or_else(|| syntax(line, column, format!("region `{name}` has no priority")))?;
        let expr = expr.ok_or_else(|| syntax(line, column, format!("region `{name}` has no expr")))?;
        if expr.depth() > MAX_DEPTH {
            return Err(syntax(
                line,
                column,
                format!("region `{name}` expression deeper than {MAX_DEPTH}"),
            ));
        }
        Ok(RegionRule { region, priority, expr })
    }

    fn resolve_landmark(&self, name: String, line: usize, column: usize) -> Result<Expr, RuleError> {
        if let Some(inv) = &self.inventory {
            if !inv.contains(&name) {
                return Err(syntax(line, column, format!("unresolved landmark `{name}`")));
            }
        }
        Ok(Expr::Landmark(name))
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, RuleError> {
        match self.arg(depth)? {
            Arg::Expr(e, ..) => Ok(e),
            Arg::Number(_, l, c) => Err(syntax(l, c, "expected a set expression, found a number")),
            Arg::Centroid(_, l, c) => Err(syntax(l, c, "centroid() is only valid as a half-space reference")),
        }
    }

    fn arg(&mut self, depth: usize) -> Result<Arg, RuleError> {
        if depth > MAX_DEPTH {
            return Err(self.err_here(format!("expression nested deeper than {MAX_DEPTH}")));
        }
        let t = self.next();
        let (line, column) = (t.line, t.column);
        let name = match t.tok {
            Tok::Number(n) => return Ok(Arg::Number(n, line, column)),
            Tok::Ident(s) => s,
            other => {
                return Err(syntax(
                    line,
                    column,
                    format!("expected an expression, found {}", other.describe()),
                ))
            }
        };
        if self.peek().tok != Tok::LParen {
            if name == "empty" {
                return Ok(Arg::Expr(Expr::Empty, line, column));
            }
            if let Some(body) = self.defines.get(&name) {
                let e = Expr::Define {
                    name,
                    body: body.clone(),
                };
                return Ok(Arg::Expr(e, line, column));
            }
            if OPERATORS.contains(&name.as_str()) {
                return Err(syntax(line, column, format!("operator `{name}` needs arguments")));
            }
            if RESERVED.contains(&name.as_str()) {
                return Err(syntax(line, column, format!("unexpected keyword `{name}`")));
            }
            return Ok(Arg::Expr(self.resolve_landmark(name, line, column)?, line, column));
        }
        if !OPERATORS.contains(&name.as_str()) {
            return Err(syntax(line, column, format!("unknown operator `{name}`")));
        }
        self.next(); // (
        if name == "landmark" {
            let t = self.next();
            let lm = match t.tok {
                Tok::Ident(s) | Tok::Str(s) => s,
                other => {
                    return Err(syntax(
                        t.line,
                        t.column,
                        format!("landmark() takes a name, found {}", other.describe()),
                    ))
                }
            };
            self.expect(Tok::RParen, "to close landmark(")?;
            return Ok(Arg::Expr(self.resolve_landmark(lm, t.line, t.column)?, line, column));
        }
        let mut args = Vec::new();
        if self.peek().tok != Tok::RParen {
            loop {
                args.push(self.arg(depth + 1)?);
                match self.peek().tok {
                    Tok::Comma => {
                        self.next();
                    }
                    Tok::RParen => break,
                    _ => {
                        let d = self.peek().tok.describe();
                        return Err(self.err_here(format!("expected `,` or `)` in {name}(...), found {d}")));
                    }
                }
            }
        }
        self.next(); // )
        build_call(&name, args, line, column)
    }
}

fn arity(name: &str, args: &[Arg], ok: bool, want: &str, line: usize, column: usize) -> Result<(), RuleError> {
    if ok {
        Ok(())
    } else {
        Err(syntax(
            line,
            column,
            format!("{name}() takes {want}, got {} argument(s)", args.len()),
        ))
    }
}

fn set_arg(name: &str, a: Arg) -> Result<Expr, RuleError> {
    match a {
        Arg::Expr(e, ..) => Ok(e),
        Arg::Number(_, l, c) => Err(syntax(l, c, format!("{name}() expects a set expression here, found a number"))),
        Arg::Centroid(_, l, c) => Err(syntax(l, c, "centroid() is only valid as a half-space reference")),
    }
}

fn number_arg(name: &str, a: Arg) -> Result<f64, RuleError> {
    match a {
        Arg::Number(n, ..) => Ok(n),
        Arg::Expr(_, l, c) | Arg::Centroid(_, l, c) => {
            Err(syntax(l, c, format!("{name}() expects a number (mm) here")))
        }
    }
}

fn build_call(name: &str, args: Vec<Arg>, line: usize, column: usize) -> Result<Arg, RuleError> {
    let n = args.len();
    let expr = |e: Expr| Ok(Arg::Expr(e, line, column));
    match name {
        "union" | "intersect" | "subtract" => {
            arity(name, &args, n >= 1, "at least one argument", line, column)?;
            let es = args
                .into_iter()
                .map(|a| set_arg(name, a))
                .collect::<Result<Vec<_>, _>>()?;
            expr(match name {
                "union" => Expr::Union(es),
                "intersect" => Expr::Intersect(es),
                _ => Expr::Subtract(es),
            })
        }
        "dilate" => {
            arity(name, &args, n == 2, "an expression and a radius", line, column)?;
            let mut it = args.into_iter();
            let e = set_arg(name, it.next().expect("arity"))?;
            let r = number_arg(name, it.next().expect("arity"))?;
            if r < 0.0 {
                return Err(syntax(line, column, "dilate() radius must be >= 0"));
            }
            expr(Expr::Dilate(Box::new(e), r))
        }
        "bbox" => {
            arity(name, &args, n == 1, "one argument", line, column)?;
            let e = set_arg(name, args.into_iter().next().expect("arity"))?;
            expr(Expr::BBox(Box::new(e)))
        }
        "centroid" => {
            arity(name, &args, n == 1, "one argument", line, column)?;
            let e = set_arg(name, args.into_iter().next().expect("arity"))?;
            Ok(Arg::Centroid(e, line, column))
        }
        "slab" => {
            arity(name, &args, n >= 1, "at least one reference", line, column)?;
            let mut args = args;
            let margin_mm = match args.last() {
                Some(Arg::Number(..)) => number_arg(name, args.pop().expect("nonempty"))?,
                _ => 0.0,
            };
            if args.is_empty() {
                return Err(syntax(line, column, "slab() needs at least one reference expression"));
            }
            let refs = args
                .into_iter()
                .map(|a| set_arg(name, a))
                .collect::<Result<Vec<_>, _>>()?;
            expr(Expr::Slab { refs, margin_mm })
        }
        "split_left" | "split_right" => {
            arity(name, &args, n == 2, "an expression and a midline reference", line, column)?;
            let mut it = args.into_iter();
            let e = set_arg(name, it.next().expect("arity"))?;
            let m = set_arg(name, it.next().expect("arity"))?;
            expr(Expr::Split {
                side: if name == "split_left" { Side::Left } else { Side::Right },
                expr: Box::new(e),
                midline: Box::new(m),
            })
        }
        _ => {
            let direction = Direction::from_keyword(name).expect("operator table covers half-spaces");
            arity(name, &args, n == 1 || n == 2, "a reference and an optional offset", line, column)?;
            let mut it = args.into_iter();
            let reference = match it.next().expect("arity") {
                Arg::Expr(Expr::BBox(e), ..) => Reference::BBox(e),
                Arg::Centroid(e, ..) => Reference::Centroid(Box::new(e)),
                Arg::Expr(_, l, c) | Arg::Number(_, l, c) => {
                    return Err(syntax(l, c, format!("{name}() reference must be bbox(...) or centroid(...)")))
                }
            };
            let offset_mm = match it.next() {
                Some(a) => number_arg(name, a)?,
                None => 0.0,
            };
            expr(Expr::HalfSpace {
                direction,
                reference,
                offset_mm,
            })
        }
    }
}

/// Parses a rule file. The result has exactly one rule per region.
pub fn parse_rules(text: &str) -> Result<RuleSet, RuleError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        defines: BTreeMap::new(),
        inventory: None,
    };
    let (landmarks, defines, rules) = p.file()?;
    let missing: Vec<String> = RegionId::ALL
        .iter()
        .filter(|r| !rules.contains_key(r))
        .map(|r| r.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(RuleError::MissingRegions(missing));
    }
    let source_hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok(RuleSet {
        landmarks,
        defines,
        rules,
        source_hash,
    })
}
