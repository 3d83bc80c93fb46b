use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::region::RegionId;

pub const MAX_DEPTH: usize = 32;

/// Direction of a half-space, in patient terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Anterior,
    Posterior,
    Left,
    Right,
    Superior,
    Inferior,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Anterior,
        Direction::Posterior,
        Direction::Left,
        Direction::Right,
        Direction::Superior,
        Direction::Inferior,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Direction::Anterior => "anterior_of",
            Direction::Posterior => "posterior_of",
            Direction::Left => "left_of",
            Direction::Right => "right_of",
            Direction::Superior => "superior_of",
            Direction::Inferior => "inferior_of",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.keyword() == s)
    }

    /// World (RAS+) axis and whether the direction points toward +axis.
    pub fn world_axis(self) -> (usize, bool) {
        match self {
            Direction::Right => (0, true),
            Direction::Left => (0, false),
            Direction::Anterior => (1, true),
            Direction::Posterior => (1, false),
            Direction::Superior => (2, true),
            Direction::Inferior => (2, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Outer face of the bounding box in the half-space direction.
    BBox(Box<Expr>),
    Centroid(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Empty,
    Landmark(String),
    /// Named subexpression from a `define`; evaluated once per atlas build.
    Define { name: String, body: Arc<Expr> },
    Union(Vec<Expr>),
    Intersect(Vec<Expr>),
    /// First operand minus all later ones.
    Subtract(Vec<Expr>),
    Dilate(Box<Expr>, f64),
    BBox(Box<Expr>),
    HalfSpace {
        direction: Direction,
        reference: Reference,
        offset_mm: f64,
    },
    Slab { refs: Vec<Expr>, margin_mm: f64 },
    Split { side: Side, expr: Box<Expr>, midline: Box<Expr> },
}

impl Expr {
    /// Depth of the tree with `define` bodies expanded.
    pub fn depth(&self) -> usize {
        let max = |es: &[Expr]| es.iter().map(Expr::depth).max().unwrap_or(0);
        1 + match self {
            Expr::Empty | Expr::Landmark(_) => 0,
            Expr::Define { body, .. } => body.depth(),
            Expr::Union(es) | Expr::Intersect(es) | Expr::Subtract(es) => max(es),
            Expr::Dilate(e, _) | Expr::BBox(e) => e.depth(),
            Expr::HalfSpace { reference, .. } => match reference {
                Reference::BBox(e) | Reference::Centroid(e) => 1 + e.depth(),
            },
            Expr::Slab { refs, .. } => max(refs),
            Expr::Split { expr, midline, .. } => expr.depth().max(midline.depth()),
        }
    }

    /// Landmark names referenced anywhere in the tree, sorted.
    pub fn landmarks(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_landmarks(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_landmarks(&self, out: &mut Vec<String>) {
        match self {
            Expr::Empty => {}
            Expr::Landmark(n) => out.push(n.clone()),
            Expr::Define { body, .. } => body.collect_landmarks(out),
            Expr::Union(es) | Expr::Intersect(es) | Expr::Subtract(es) | Expr::Slab { refs: es, .. } => {
                es.iter().for_each(|e| e.collect_landmarks(out))
            }
            Expr::Dilate(e, _) | Expr::BBox(e) => e.collect_landmarks(out),
            Expr::HalfSpace { reference, .. } => match reference {
                Reference::BBox(e) | Reference::Centroid(e) => e.collect_landmarks(out),
            },
            Expr::Split { expr, midline, .. } => {
                expr.collect_landmarks(out);
                midline.collect_landmarks(out);
            }
        }
    }
}

fn write_list(f: &mut fmt::Formatter<'_>, op: &str, es: &[Expr]) -> fmt::Result {
    write!(f, "{op}(")?;
    for (i, e) in es.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{e}")?;
    }
    write!(f, ")")
}

/// Prints the expression back in rule-file syntax.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Empty => write!(f, "empty"),
            Expr::Landmark(n) => write!(f, "landmark({n:?})"),
            Expr::Define { name, .. } => write!(f, "{name}"),
            Expr::Union(es) => write_list(f, "union", es),
            Expr::Intersect(es) => write_list(f, "intersect", es),
            Expr::Subtract(es) => write_list(f, "subtract", es),
            Expr::Dilate(e, r) => write!(f, "dilate({e}, {r:?})"),
            Expr::BBox(e) => write!(f, "bbox({e})"),
            Expr::HalfSpace {
                direction,
                reference,
                offset_mm,
            } => {
                let (kw, e) = match reference {
                    Reference::BBox(e) => ("bbox", e),
                    Reference::Centroid(e) => ("centroid", e),
                };
                write!(f, "{}({kw}({e}), {offset_mm:?})", direction.keyword())
            }
            Expr::Slab { refs, margin_mm } => {
                write!(f, "slab(")?;
                for e in refs {
                    write!(f, "{e}, ")?;
                }
                write!(f, "{margin_mm:?})")
            }
            Expr::Split { side, expr, midline } => {
                let op = match side {
                    Side::Left => "split_left",
                    Side::Right => "split_right",
                };
                write!(f, "{op}({expr}, {midline})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRule {
    pub region: RegionId,
    /// Lower wins when regions overlap.
    pub priority: i64,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    /// Declared landmark inventory, if the file has one.
    pub landmarks: Option<Vec<String>>,
    /// `define`s in declaration order.
    pub defines: Vec<(String, Arc<Expr>)>,
    pub rules: BTreeMap<RegionId, RegionRule>,
    /// sha256 of the source text.
    pub source_hash: String,
}

impl RuleSet {
    pub fn rule(&self, region: RegionId) -> &RegionRule {
        &self.rules[&region]
    }

    /// Landmarks referenced by any region rule.
    pub fn referenced_landmarks(&self) -> Vec<String> {
        let mut all: Vec<String> = self.rules.values().flat_map(|r| r.expr.landmarks()).collect();
        all.sort();
        all.dedup();
        all
    }
}
