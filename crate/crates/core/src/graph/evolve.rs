use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, LeafId, MetricGraph, Node, Operator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Some root-to-leaf path of a fresh graph has at least this many nodes.
    pub min_depth: usize,
    pub max_nodes: usize,
    /// Chance that a node off the forced path becomes an operator.
    pub expand_prob: f64,
    #[serde(with = "op_names")]
    pub operators: Vec<Operator>,
    #[serde(with = "leaf_names")]
    pub leaves: Vec<LeafId>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            min_depth: 3,
            max_nodes: 31,
            expand_prob: 0.5,
            operators: Operator::ALL.to_vec(),
            leaves: LeafId::ALL.to_vec(),
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.min_depth == 0 {
            return Err(GraphError::InvalidParameter("min_depth must be at least 1".into()));
        }
        if self.leaves.is_empty() {
            return Err(GraphError::InvalidParameter("leaf catalog is empty".into()));
        }
        if self.operators.is_empty() && self.min_depth > 1 {
            return Err(GraphError::InvalidParameter(
                "operator catalog is empty but min_depth > 1".into(),
            ));
        }
        if self.max_nodes < 3 {
            return Err(GraphError::InvalidParameter("max_nodes must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.expand_prob) {
            return Err(GraphError::InvalidParameter("expand_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn random_leaf<R: Rng>(&self, rng: &mut R) -> Node {
        Node::Leaf(self.leaves[rng.random_range(0..self.leaves.len())])
    }

    fn random_op<R: Rng>(&self, rng: &mut R, unary_only: bool) -> Option<Operator> {
        let pool: Vec<Operator> = self
            .operators
            .iter()
            .copied()
            .filter(|o| !unary_only || o.arity() == 1)
            .collect();
        (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
    }
}

mod op_names {
    use super::Operator;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ops: &[Operator], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ops.iter().map(|o| o.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Operator>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|n| Operator::from_name(n).ok_or_else(|| D::Error::custom(format!("unknown operator {n}"))))
            .collect()
    }
}

mod leaf_names {
    use super::LeafId;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(leaves: &[LeafId], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(leaves.iter().map(|l| l.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<LeafId>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|n| LeafId::from_name(n).ok_or_else(|| D::Error::custom(format!("unknown leaf {n}"))))
            .collect()
    }
}

fn grow<R: Rng>(
    cfg: &GraphConfig,
    rng: &mut R,
    level: usize,
    on_spine: bool,
    prob: f64,
    unary_only: bool,
) -> Node {
    let below_target = level < cfg.min_depth;
    let expand = if on_spine {
        below_target
    } else {
        below_target && prob > 0.0 && rng.random_bool(prob)
    };
    match expand.then(|| cfg.random_op(rng, unary_only)).flatten() {
        Some(op) => {
            let spine_child = if on_spine { rng.random_range(0..op.arity()) } else { usize::MAX };
            let children = (0..op.arity())
                .map(|i| grow(cfg, rng, level + 1, i == spine_child, prob, unary_only))
                .collect();
            Node::Op { op, children }
        }
        None => cfg.random_leaf(rng),
    }
}

/// Grows a graph from the root, forcing one path down to `min_depth` and
/// expanding other branches at random. Oversized draws are retried with a
/// lower expansion probability, then with unary operators only.
pub fn init_graph_with<R: Rng>(cfg: &GraphConfig, rng: &mut R) -> Result<MetricGraph, GraphError> {
    cfg.validate()?;
    let mut prob = cfg.expand_prob;
    for _ in 0..4 {
        let root = grow(cfg, rng, 1, true, prob, false);
        if root.size() <= cfg.max_nodes {
            return MetricGraph::new(root);
        }
        prob /= 2.0;
    }
    let root = grow(cfg, rng, 1, true, 0.0, false);
    if root.size() <= cfg.max_nodes {
        return MetricGraph::new(root);
    }
    if cfg.operators.iter().any(|o| o.arity() == 1) {
        let root = grow(cfg, rng, 1, true, 0.0, true);
        if root.size() <= cfg.max_nodes {
            return MetricGraph::new(root);
        }
    }
    Err(GraphError::InvalidParameter(format!(
        "min_depth {} cannot fit in {} nodes",
        cfg.min_depth, cfg.max_nodes
    )))
}

pub fn init_graph(cfg: &GraphConfig, seed: u64) -> Result<MetricGraph, GraphError> {
    init_graph_with(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationKind {
    Insertion,
    Deletion,
    Replacement,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [
        MutationKind::Insertion,
        MutationKind::Deletion,
        MutationKind::Replacement,
    ];
}

/// Applies one mutation and reports the kind actually applied.
///
/// Fallbacks: deletion or replacement on a graph without operators becomes
/// an insertion; an insertion or replacement that would exceed `max_nodes`
/// becomes a deletion; a replacement with no alternative operator becomes an
/// insertion. A single-leaf graph gets its insertion above the root.
pub fn mutate_with<R: Rng>(
    g: &MetricGraph,
    kind: MutationKind,
    cfg: &GraphConfig,
    rng: &mut R,
) -> Result<(MetricGraph, MutationKind), GraphError> {
    cfg.validate()?;
    if !g.is_well_formed() {
        return Err(GraphError::Malformed(g.to_string()));
    }
    let has_internal = !g.root().is_leaf();
    let out = match kind {
        MutationKind::Deletion if !has_internal => insert(g, cfg, rng)?,
        MutationKind::Deletion => (delete(g, rng), MutationKind::Deletion),
        MutationKind::Insertion => insert(g, cfg, rng)?,
        MutationKind::Replacement if !has_internal => insert(g, cfg, rng)?,
        MutationKind::Replacement => replace(g, cfg, rng)?,
    };
    debug_assert!(out.0.is_well_formed());
    Ok(out)
}

pub fn mutate(
    g: &MetricGraph,
    kind: MutationKind,
    cfg: &GraphConfig,
    seed: u64,
) -> Result<(MetricGraph, MutationKind), GraphError> {
    mutate_with(g, kind, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn internal_paths(g: &MetricGraph) -> Vec<Vec<usize>> {
    g.root()
        .paths()
        .into_iter()
        .filter(|p| !g.root().at(p).is_leaf())
        .collect()
}

fn delete<R: Rng>(g: &MetricGraph, rng: &mut R) -> MetricGraph {
    let candidates = internal_paths(g);
    let path = &candidates[rng.random_range(0..candidates.len())];
    let mut out = g.clone();
    let target = out.root_mut().at_mut(path);
    let promoted = match target {
        Node::Op { children, .. } => {
            let i = rng.random_range(0..children.len());
            children.swap_remove(i)
        }
        Node::Leaf(_) => unreachable!("internal path"),
    };
    *target = promoted;
    out
}

fn insert<R: Rng>(
    g: &MetricGraph,
    cfg: &GraphConfig,
    rng: &mut R,
) -> Result<(MetricGraph, MutationKind), GraphError> {
    let room = cfg.max_nodes.saturating_sub(g.size());
    let op = match cfg.random_op(rng, false) {
        Some(op) if op.arity() <= room => Some(op),
        _ if room >= 1 => cfg.random_op(rng, true),
        _ => None,
    };
    let Some(op) = op else {
        return if g.root().is_leaf() {
            Ok((g.clone(), MutationKind::Insertion))
        } else {
            Ok((delete(g, rng), MutationKind::Deletion))
        };
    };
    let paths = g.root().paths();
    // Non-root nodes; a bare leaf can only be wrapped at the root.
    let path = if paths.len() > 1 {
        paths[1 + rng.random_range(0..paths.len() - 1)].clone()
    } else {
        Vec::new()
    };
    let mut out = g.clone();
    let target = out.root_mut().at_mut(&path);
    let original = std::mem::replace(target, Node::Leaf(LeafId::Distinct1));
    let keep_at = rng.random_range(0..op.arity());
    let mut original = Some(original);
    let children = (0..op.arity())
        .map(|i| {
            if i == keep_at {
                original.take().expect("placed once")
            } else {
                cfg.random_leaf(rng)
            }
        })
        .collect();
    *target = Node::Op { op, children };
    Ok((MetricGraph::new(out.root().clone())?, MutationKind::Insertion))
}

fn replace<R: Rng>(
    g: &MetricGraph,
    cfg: &GraphConfig,
    rng: &mut R,
) -> Result<(MetricGraph, MutationKind), GraphError> {
    let candidates = internal_paths(g);
    let path = candidates[rng.random_range(0..candidates.len())].clone();
    let (current, arity) = match g.root().at(&path) {
        Node::Op { op, children } => (*op, children.len()),
        Node::Leaf(_) => unreachable!("internal path"),
    };
    let others: Vec<Operator> = cfg.operators.iter().copied().filter(|o| *o != current).collect();
    if others.is_empty() {
        return insert(g, cfg, rng);
    }
    let room = cfg.max_nodes - g.size();
    let fitting: Vec<Operator> = others
        .iter()
        .copied()
        .filter(|o| o.arity() <= arity + room)
        .collect();
    if fitting.is_empty() {
        return Ok((delete(g, rng), MutationKind::Deletion));
    }
    let op = fitting[rng.random_range(0..fitting.len())];
    let mut out = g.clone();
    if let Node::Op { op: slot, children } = out.root_mut().at_mut(&path) {
        *slot = op;
        children.truncate(op.arity());
        while children.len() < op.arity() {
            children.push(cfg.random_leaf(rng));
        }
    }
    Ok((MetricGraph::new(out.root().clone())?, MutationKind::Replacement))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyWeights {
    pub copy: f64,
    pub reinit: f64,
    pub mutation: f64,
}

impl Default for StrategyWeights {
    fn default() -> Self {
        Self {
            copy: 0.2,
            reinit: 0.3,
            mutation: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "strategy", content = "mutation")]
pub enum Strategy {
    Initial,
    Copy,
    Reinit,
    Mutation(MutationKind),
}

pub fn spawn_offspring_with<R: Rng>(
    parent: &MetricGraph,
    weights: StrategyWeights,
    cfg: &GraphConfig,
    rng: &mut R,
) -> Result<(MetricGraph, Strategy), GraphError> {
    let w = [weights.copy, weights.reinit, weights.mutation];
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
        return Err(GraphError::InvalidParameter(format!(
            "strategy weights {w:?} must be non-negative and not all zero"
        )));
    }
    let pick = WeightedIndex::new(w)
        .map_err(|e| GraphError::InvalidParameter(e.to_string()))?
        .sample(rng);
    match pick {
        0 => Ok((parent.clone(), Strategy::Copy)),
        1 => Ok((init_graph_with(cfg, rng)?, Strategy::Reinit)),
        _ => {
            let kind = MutationKind::ALL[rng.random_range(0..3)];
            let (g, applied) = mutate_with(parent, kind, cfg, rng)?;
            Ok((g, Strategy::Mutation(applied)))
        }
    }
}

pub fn spawn_offspring(
    parent: &MetricGraph,
    weights: StrategyWeights,
    cfg: &GraphConfig,
    seed: u64,
) -> Result<(MetricGraph, Strategy), GraphError> {
    spawn_offspring_with(parent, weights, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub graph: MetricGraph,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Member>,
    pub generation: usize,
}

impl Population {
    pub fn push(&mut self, graph: MetricGraph, fitness: Option<f64>) {
        self.members.push(Member { graph, fitness });
    }
}

/// Index of the member with the highest fitness; ties go to the lowest index.
pub fn select_parent(pop: &Population) -> Result<usize, GraphError> {
    if pop.members.is_empty() {
        return Err(GraphError::EmptyPopulation);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in pop.members.iter().enumerate() {
        let f = m.fitness.ok_or(GraphError::UnsetFitness(i))?;
        if f.is_nan() {
            return Err(GraphError::UnsetFitness(i));
        }
        if best.is_none_or(|(_, b)| f > b) {
            best = Some((i, f));
        }
    }
    Ok(best.expect("non-empty").0)
}
