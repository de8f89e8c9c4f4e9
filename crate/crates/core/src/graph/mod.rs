//! Tree-structured loss functions over base dialogue metrics.
//!
//! Internal nodes are operators, leaves are metric identifiers, and the root
//! emits the loss. Every operator is total on finite inputs and every node
//! output is saturated to `±OUTPUT_LIMIT`, so evaluation never yields NaN or
//! infinity. Graphs print as nested lists, e.g.
//! `(add (sigmoid distinct-1) embedding-diversity)`.

mod evolve;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use evolve::{
    init_graph, init_graph_with, mutate, mutate_with, select_parent, spawn_offspring,
    spawn_offspring_with, GraphConfig, Member, MutationKind, Population, Strategy, StrategyWeights,
};

use crate::hashing::{hex64, stable_hash64};

pub const OUTPUT_LIMIT: f64 = 1e12;
pub const SAFE_DIV_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("leaf {0} has no value in the context")]
    UnresolvedLeaf(LeafId),
    #[error("population member {0} has no fitness")]
    UnsetFitness(usize),
    #[error("empty population")]
    EmptyPopulation,
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeafId {
    Distinct1,
    Distinct2,
    TfidfDiversity,
    EmbeddingDiversity,
    LengthPenalty,
}

impl LeafId {
    pub const ALL: [LeafId; 5] = [
        LeafId::Distinct1,
        LeafId::Distinct2,
        LeafId::TfidfDiversity,
        LeafId::EmbeddingDiversity,
        LeafId::LengthPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LeafId::Distinct1 => "distinct-1",
            LeafId::Distinct2 => "distinct-2",
            LeafId::TfidfDiversity => "tfidf-diversity",
            LeafId::EmbeddingDiversity => "embedding-diversity",
            LeafId::LengthPenalty => "length-penalty",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl fmt::Display for LeafId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    Negate,
    Log1pAbs,
    SqrtAbs,
    Sigmoid,
    Add,
    Subtract,
    Multiply,
    SafeDiv,
    Min,
    Max,
    Mean,
}

impl Operator {
    pub const ALL: [Operator; 11] = [
        Operator::Negate,
        Operator::Log1pAbs,
        Operator::SqrtAbs,
        Operator::Sigmoid,
        Operator::Add,
        Operator::Subtract,
        Operator::Multiply,
        Operator::SafeDiv,
        Operator::Min,
        Operator::Max,
        Operator::Mean,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Negate | Operator::Log1pAbs | Operator::SqrtAbs | Operator::Sigmoid => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Negate => "negate",
            Operator::Log1pAbs => "log1p-abs",
            Operator::SqrtAbs => "sqrt-abs",
            Operator::Sigmoid => "sigmoid",
            Operator::Add => "add",
            Operator::Subtract => "sub",
            Operator::Multiply => "mul",
            Operator::SafeDiv => "safe-div",
            Operator::Min => "min",
            Operator::Max => "max",
            Operator::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }

    fn apply(self, args: &[f64]) -> f64 {
        let out = match (self, args) {
            (Operator::Negate, [x]) => -x,
            (Operator::Log1pAbs, [x]) => x.abs().ln_1p(),
            (Operator::SqrtAbs, [x]) => x.abs().sqrt(),
            (Operator::Sigmoid, [x]) => 1.0 / (1.0 + (-x).exp()),
            (Operator::Add, [a, b]) => a + b,
            (Operator::Subtract, [a, b]) => a - b,
            (Operator::Multiply, [a, b]) => a * b,
            (Operator::SafeDiv, [a, b]) => {
                if b.abs() < SAFE_DIV_EPS {
                    0.0
                } else {
                    a / b
                }
            }
            (Operator::Min, [a, b]) => a.min(*b),
            (Operator::Max, [a, b]) => a.max(*b),
            (Operator::Mean, [a, b]) => 0.5 * (a + b),
            _ => unreachable!("arity checked at construction"),
        };
        saturate(out)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn saturate(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-OUTPUT_LIMIT, OUTPUT_LIMIT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Node {
    Leaf(LeafId),
    Op { op: Operator, children: Vec<Node> },
}

impl Node {
    pub fn leaf(id: LeafId) -> Self {
        Node::Leaf(id)
    }

    pub fn op(op: Operator, children: Vec<Node>) -> Self {
        Node::Op { op, children }
    }

    pub fn size(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Op { children, .. } => 1 + children.iter().map(Node::size).sum::<usize>(),
        }
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Op { children, .. } => 1 + children.iter().map(Node::depth).max().unwrap_or(0),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf(_))
    }

    fn eval(&self, ctx: &MetricContext) -> Result<f64, GraphError> {
        match self {
            Node::Leaf(id) => Ok(saturate(ctx.get(*id)?)),
            Node::Op { op, children } => {
                let mut args = [0.0; 2];
                for (slot, child) in args.iter_mut().zip(children) {
                    *slot = child.eval(ctx)?;
                }
                Ok(op.apply(&args[..children.len()]))
            }
        }
    }

    fn check(&self) -> Result<(), GraphError> {
        match self {
            Node::Leaf(_) => Ok(()),
            Node::Op { op, children } => {
                if children.len() != op.arity() {
                    return Err(GraphError::Malformed(format!(
                        "{op} has {} children, arity {}",
                        children.len(),
                        op.arity()
                    )));
                }
                children.iter().try_for_each(Node::check)
            }
        }
    }

    fn leaves_into(&self, out: &mut Vec<LeafId>) {
        match self {
            Node::Leaf(id) => out.push(*id),
            Node::Op { children, .. } => children.iter().for_each(|c| c.leaves_into(out)),
        }
    }

    /// Pre-order child-index paths of every node.
    pub(crate) fn paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![(self, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Node::Op { children, .. } = node {
                for (i, c) in children.iter().enumerate().rev() {
                    let mut p = path.clone();
                    p.push(i);
                    stack.push((c, p));
                }
            }
            out.push(path);
        }
        out
    }

    pub(crate) fn at(&self, path: &[usize]) -> &Node {
        path.iter().fold(self, |n, &i| match n {
            Node::Op { children, .. } => &children[i],
            Node::Leaf(_) => panic!("path descends through a leaf"),
        })
    }

    pub(crate) fn at_mut(&mut self, path: &[usize]) -> &mut Node {
        path.iter().fold(self, |n, &i| match n {
            Node::Op { children, .. } => &mut children[i],
            Node::Leaf(_) => panic!("path descends through a leaf"),
        })
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Leaf(id) => write!(f, "{id}"),
            Node::Op { op, children } => {
                write!(f, "({op}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Leaf values for one evaluation of a graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricContext {
    values: BTreeMap<String, f64>,
}

impl MetricContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, leaf: LeafId, value: f64) -> Self {
        self.insert(leaf, value);
        self
    }

    pub fn insert(&mut self, leaf: LeafId, value: f64) {
        self.values.insert(leaf.name().to_string(), value);
    }

    pub fn get(&self, leaf: LeafId) -> Result<f64, GraphError> {
        self.values
            .get(leaf.name())
            .copied()
            .ok_or(GraphError::UnresolvedLeaf(leaf))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.values().copied()
    }

    /// Element-wise mean over contexts that share the same leaves.
    pub fn mean(contexts: &[MetricContext]) -> Option<MetricContext> {
        let first = contexts.first()?;
        let mut out = MetricContext::new();
        for key in first.values.keys() {
            let sum: f64 = contexts.iter().filter_map(|c| c.values.get(key)).sum();
            out.values.insert(key.clone(), sum / contexts.len() as f64);
        }
        Some(out)
    }
}

/// A well-formed metric graph. Construct through [`MetricGraph::new`] or
/// parsing; both enforce arity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetricGraph {
    root: Node,
}

impl MetricGraph {
    pub fn new(root: Node) -> Result<Self, GraphError> {
        root.check()?;
        Ok(Self { root })
    }

    pub fn leaf(id: LeafId) -> Self {
        Self { root: Node::Leaf(id) }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub(crate) fn root_mut(&mut self) -> &mut Node {
        &mut self.root
    }

    pub fn size(&self) -> usize {
        self.root.size()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaves(&self) -> Vec<LeafId> {
        let mut out = Vec::new();
        self.root.leaves_into(&mut out);
        out
    }

    pub fn internal_count(&self) -> usize {
        self.size() - self.leaves().len()
    }

    pub fn is_well_formed(&self) -> bool {
        self.root.check().is_ok() && !self.leaves().is_empty()
    }

    /// Stable structural id: hash of the canonical text form.
    pub fn id(&self) -> String {
        hex64(stable_hash64(self.to_string().as_bytes()))
    }

    pub fn evaluate(&self, ctx: &MetricContext) -> Result<f64, GraphError> {
        self.root.eval(ctx)
    }
}

impl fmt::Display for MetricGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> GraphError {
        GraphError::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.src[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
    }

    fn atom(&mut self) -> &'a str {
        let rest = &self.src[self.pos..];
        let len = rest
            .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
            .unwrap_or(rest.len());
        self.pos += len;
        &rest[..len]
    }

    fn node(&mut self) -> Result<Node, GraphError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with('(') {
            self.pos += 1;
            self.skip_ws();
            let name = self.atom();
            let op = Operator::from_name(name)
                .ok_or_else(|| self.err(format!("unknown operator {name:?}")))?;
            let mut children = Vec::new();
            loop {
                self.skip_ws();
                if self.src[self.pos..].starts_with(')') {
                    self.pos += 1;
                    break;
                }
                if self.pos >= self.src.len() {
                    return Err(self.err("unterminated list"));
                }
                children.push(self.node()?);
            }
            if children.len() != op.arity() {
                return Err(self.err(format!(
                    "{op} expects {} children, got {}",
                    op.arity(),
                    children.len()
                )));
            }
            Ok(Node::Op { op, children })
        } else {
            let name = self.atom();
            if name.is_empty() {
                return Err(self.err("expected a leaf or a list"));
            }
            LeafId::from_name(name)
                .map(Node::Leaf)
                .ok_or_else(|| self.err(format!("unknown leaf {name:?}")))
        }
    }
}

impl FromStr for MetricGraph {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { src: s, pos: 0 };
        let root = p.node()?;
        p.skip_ws();
        if p.pos != s.len() {
            return Err(p.err("trailing input"));
        }
        MetricGraph::new(root)
    }
}

impl Serialize for MetricGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MetricGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(pairs: &[(LeafId, f64)]) -> MetricContext {
        pairs.iter().fold(MetricContext::new(), |c, &(l, v)| c.with(l, v))
    }

    #[test]
    fn identity_graph() {
        let g = MetricGraph::leaf(LeafId::Distinct1);
        assert_eq!(g.evaluate(&ctx(&[(LeafId::Distinct1, 0.5)])).unwrap(), 0.5);
    }

    #[test]
    fn add_graph() {
        let g: MetricGraph = "(add distinct-1 distinct-1)".parse().unwrap();
        assert_eq!(g.evaluate(&ctx(&[(LeafId::Distinct1, 0.5)])).unwrap(), 1.0);
    }

    #[test]
    fn safe_div_fallback() {
        let g: MetricGraph = "(safe-div distinct-1 distinct-2)".parse().unwrap();
        let c = ctx(&[(LeafId::Distinct1, 1.0), (LeafId::Distinct2, 0.0)]);
        assert_eq!(g.evaluate(&c).unwrap(), 0.0);
        let c = ctx(&[(LeafId::Distinct1, 1.0), (LeafId::Distinct2, 1e-10)]);
        assert_eq!(g.evaluate(&c).unwrap(), 0.0);
    }

    #[test]
    fn unresolved_leaf() {
        let g = MetricGraph::leaf(LeafId::LengthPenalty);
        assert_eq!(
            g.evaluate(&MetricContext::new()),
            Err(GraphError::UnresolvedLeaf(LeafId::LengthPenalty))
        );
    }

    #[test]
    fn saturation_keeps_results_finite() {
        let g: MetricGraph = "(mul (mul distinct-1 distinct-1) (sub distinct-1 (negate distinct-1)))"
            .parse()
            .unwrap();
        let v = g.evaluate(&ctx(&[(LeafId::Distinct1, 1e300)])).unwrap();
        assert!(v.is_finite());
        assert_eq!(v, OUTPUT_LIMIT);
    }

    #[test]
    fn text_round_trip_preserves_id() {
        let text = "(add (sigmoid distinct-1) embedding-diversity)";
        let g: MetricGraph = text.parse().unwrap();
        assert_eq!(g.to_string(), text);
        let json = serde_json::to_string(&g).unwrap();
        let back: MetricGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id(), g.id());
        assert_eq!(g.depth(), 3);
        assert_eq!(g.size(), 4);
    }

    #[test]
    fn parse_rejects_bad_arity_and_names() {
        assert!("(add distinct-1)".parse::<MetricGraph>().is_err());
        assert!("(sigmoid distinct-1 distinct-2)".parse::<MetricGraph>().is_err());
        assert!("(frob distinct-1)".parse::<MetricGraph>().is_err());
        assert!("bleu".parse::<MetricGraph>().is_err());
        assert!("(add distinct-1 distinct-2".parse::<MetricGraph>().is_err());
        assert!("distinct-1 x".parse::<MetricGraph>().is_err());
    }

    #[test]
    fn paths_are_preorder() {
        let g: MetricGraph = "(add (sigmoid distinct-1) distinct-2)".parse().unwrap();
        let paths = g.root().paths();
        assert_eq!(paths, vec![vec![], vec![0], vec![0, 0], vec![1]]);
        assert_eq!(g.root().at(&[0, 0]), &Node::Leaf(LeafId::Distinct1));
    }
}
