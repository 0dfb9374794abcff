//! Discrete path space: increment-labeled paths, non-recombining event trees,
//! path concatenation and stopping rules.
//!
//! Paths are stored as increment sequences, not value sequences, so
//! concatenation is appending plus an implicit offset and the splice
//! identities hold bit-exactly. Trees never recombine: a node *is* its path
//! prefix, which makes adaptedness structural for everything built on top.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("grid must have at least one step")]
    EmptyGrid,
    #[error("dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("prefix has {len} increments, splice point is {at}")]
    PrefixTooShort { len: usize, at: usize },
    #[error("spliced path would have {len} increments, grid allows {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("node {0:?} out of range")]
    UnknownNode(NodeId),
    #[error("non-terminal node at step {step} has {count} distinct child labels, need >= 2")]
    TooFewChildren { step: usize, count: usize },
    #[error("tree would exceed {cap} nodes")]
    TreeTooLarge { cap: usize },
    #[error("stopping map covers {got} nodes, tree has {want}")]
    PartialStoppingMap { got: usize, want: usize },
    #[error("step-{step} node {node:?} must be mapped to stop")]
    LeafNotStopped { node: NodeId, step: usize },
}

/// Uniform time grid with `steps` steps of width `dt`; the horizon is
/// `steps * dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, dt: f64) -> Result<Self, LatticeError> {
        if steps == 0 {
            return Err(LatticeError::EmptyGrid);
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(LatticeError::BadDt(dt));
        }
        Ok(TimeGrid { steps, dt })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// A path of the canonical process, stored as its increments. The value at
/// step `k` is the partial sum of the first `k` increments; every path starts
/// at zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscretePath {
    increments: Vec<f64>,
}

impl DiscretePath {
    pub fn empty() -> Self {
        DiscretePath::default()
    }

    pub fn from_increments(increments: Vec<f64>) -> Self {
        DiscretePath { increments }
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Path value after `k` increments; `value_at(0) == 0.0` always.
    pub fn value_at(&self, k: usize) -> f64 {
        self.increments[..k].iter().sum()
    }

    pub fn terminal_value(&self) -> f64 {
        self.value_at(self.len())
    }

    /// The first `k` increments as a path.
    pub fn prefix(&self, k: usize) -> DiscretePath {
        DiscretePath::from_increments(self.increments[..k].to_vec())
    }

    /// Increments from step `k` onward, re-based to start at zero.
    pub fn tail_from(&self, k: usize) -> DiscretePath {
        DiscretePath::from_increments(self.increments[k..].to_vec())
    }
}

/// Splices `tail` onto the first `at` increments of `prefix`. In value terms
/// the result follows `prefix` up to step `at` and then moves by `tail`'s
/// increments, offset by the prefix value at the splice point; on increments
/// this is plain concatenation, which is why it is exact.
pub fn concat(
    prefix: &DiscretePath,
    at: usize,
    tail: &DiscretePath,
    max_len: usize,
) -> Result<DiscretePath, LatticeError> {
    if prefix.len() < at {
        return Err(LatticeError::PrefixTooShort {
            len: prefix.len(),
            at,
        });
    }
    let len = at + tail.len();
    if len > max_len {
        return Err(LatticeError::LengthOverflow { len, max: max_len });
    }
    let mut increments = Vec::with_capacity(len);
    increments.extend_from_slice(&prefix.increments[..at]);
    increments.extend_from_slice(&tail.increments);
    Ok(DiscretePath::from_increments(increments))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct TreeNode {
    step: usize,
    parent: Option<NodeId>,
    prefix: DiscretePath,
    value: f64,
    /// Child edges as `(increment label, child id)`, ascending by label.
    children: Vec<(f64, NodeId)>,
}

impl TreeNode {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn prefix(&self) -> &DiscretePath {
        &self.prefix
    }

    /// Path value at this node (terminal value of the prefix).
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn children(&self) -> &[(f64, NodeId)] {
        &self.children
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Finite non-recombining event tree over a [`TimeGrid`]. There is exactly
/// one root at step 0 with an empty prefix, every non-terminal node has at
/// least two children with distinct increment labels, and leaves sit exactly
/// at the final step.
///
/// Nodes are stored in breadth-first order, so a parent id is always smaller
/// than its children's ids and a reverse scan visits children before parents.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    nodes: Vec<TreeNode>,
    leaves: Vec<NodeId>,
}

pub const DEFAULT_NODE_CAP: usize = 4_000_000;

impl ScenarioTree {
    /// Grows the tree breadth-first. `labels` returns the child increment
    /// labels for a non-terminal node given its step, prefix and path value;
    /// labels must be distinct (they are sorted here).
    pub fn grow<F>(grid: TimeGrid, mut labels: F) -> Result<Self, LatticeError>
    where
        F: FnMut(usize, &DiscretePath, f64) -> Vec<f64>,
    {
        Self::grow_capped(grid, DEFAULT_NODE_CAP, &mut labels)
    }

    pub fn grow_capped<F>(grid: TimeGrid, cap: usize, labels: &mut F) -> Result<Self, LatticeError>
    where
        F: FnMut(usize, &DiscretePath, f64) -> Vec<f64>,
    {
        let mut nodes = vec![TreeNode {
            step: 0,
            parent: None,
            prefix: DiscretePath::empty(),
            value: 0.0,
            children: Vec::new(),
        }];
        let mut leaves = Vec::new();
        let mut cursor = 0usize;
        while cursor < nodes.len() {
            let id = NodeId(cursor);
            let step = nodes[cursor].step;
            if step == grid.steps() {
                leaves.push(id);
                cursor += 1;
                continue;
            }
            let mut edge_labels = labels(step, &nodes[cursor].prefix, nodes[cursor].value);
            edge_labels.sort_by(|a, b| a.partial_cmp(b).expect("labels must not be NaN"));
            edge_labels.dedup();
            if edge_labels.len() < 2 {
                return Err(LatticeError::TooFewChildren {
                    step,
                    count: edge_labels.len(),
                });
            }
            if nodes.len() + edge_labels.len() > cap {
                return Err(LatticeError::TreeTooLarge { cap });
            }
            for label in edge_labels {
                let child = NodeId(nodes.len());
                let mut prefix = nodes[cursor].prefix.clone();
                prefix.increments.push(label);
                let value = nodes[cursor].value + label;
                nodes[cursor].children.push((label, child));
                nodes.push(TreeNode {
                    step: step + 1,
                    parent: Some(id),
                    prefix,
                    value,
                    children: Vec::new(),
                });
            }
            cursor += 1;
        }
        Ok(ScenarioTree {
            grid,
            nodes,
            leaves,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Follows increment labels down from `from`; labels must match edge
    /// labels bit-exactly.
    pub fn descend(&self, from: NodeId, increments: &[f64]) -> Option<NodeId> {
        let mut at = from;
        for &x in increments {
            let node = self.node(at);
            at = node
                .children
                .iter()
                .find(|(label, _)| *label == x)
                .map(|(_, child)| *child)?;
        }
        Some(at)
    }

    pub fn node_at(&self, path: &DiscretePath) -> Option<NodeId> {
        self.descend(self.root(), path.increments())
    }

    /// True when `id` lies in the subtree rooted at `root` (inclusive).
    pub fn is_under(&self, id: NodeId, root: NodeId) -> bool {
        let mut at = id;
        loop {
            if at == root {
                return true;
            }
            match self.node(at).parent {
                Some(p) => at = p,
                None => return false,
            }
        }
    }

    /// Node ids of the subtree rooted at `root`, in breadth-first order.
    pub fn subtree(&self, root: NodeId) -> Vec<NodeId> {
        let mut out = vec![root];
        let mut cursor = 0;
        while cursor < out.len() {
            for &(_, child) in self.node(out[cursor]).children() {
                out.push(child);
            }
            cursor += 1;
        }
        out
    }

    pub fn leaves_under(&self, root: NodeId) -> Vec<NodeId> {
        self.subtree(root)
            .into_iter()
            .filter(|&id| self.node(id).is_leaf())
            .collect()
    }
}

/// A stop/continue decision for every node, with all final-step nodes
/// stopping. On a tree the decision is automatically a function of the path
/// prefix (a node is its prefix), so any such map induces a stopping step.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    stops: Vec<bool>,
}

impl StoppingRule {
    pub fn new(tree: &ScenarioTree, stops: Vec<bool>) -> Result<Self, LatticeError> {
        let check = is_stopping_rule(tree, &stops)?;
        match check.counterexample {
            None => Ok(StoppingRule { stops }),
            Some(RuleCounterexample::LeafNotStopped(node)) => Err(LatticeError::LeafNotStopped {
                node,
                step: tree.node(node).step(),
            }),
            Some(RuleCounterexample::PrefixMismatch { .. }) => {
                unreachable!("node maps cannot fail the prefix test on a tree")
            }
        }
    }

    /// Deterministic rule stopping at step `k` (and at the horizon).
    pub fn at_step(tree: &ScenarioTree, k: usize) -> Self {
        let stops = tree
            .ids()
            .map(|id| {
                let step = tree.node(id).step();
                step >= k || step == tree.grid().steps()
            })
            .collect();
        StoppingRule { stops }
    }

    pub fn stops(&self, id: NodeId) -> bool {
        self.stops[id.0]
    }

    /// Nodes where the induced stopping time actually stops: marked stop with
    /// no stopping proper ancestor.
    pub fn first_stop_nodes(&self, tree: &ScenarioTree) -> Vec<NodeId> {
        let mut reached = vec![false; tree.len()];
        reached[tree.root().0] = true;
        let mut out = Vec::new();
        for id in tree.ids() {
            if !reached[id.0] {
                continue;
            }
            if self.stops(id) {
                out.push(id);
            } else {
                for &(_, child) in tree.node(id).children() {
                    reached[child.0] = true;
                }
            }
        }
        out
    }

    /// Stopping step along the root-to-`leaf` path.
    pub fn stop_step(&self, tree: &ScenarioTree, leaf: NodeId) -> usize {
        let prefix = tree.node(leaf).prefix().clone();
        let mut at = tree.root();
        loop {
            if self.stops(at) {
                return tree.node(at).step();
            }
            let step = tree.node(at).step();
            let label = prefix.increments()[step];
            at = tree
                .descend(at, &[label])
                .expect("leaf path must exist in tree");
        }
    }

    /// True when this rule stops no later than `other` on every path.
    pub fn precedes(&self, other: &StoppingRule, tree: &ScenarioTree) -> bool {
        tree.leaves()
            .iter()
            .all(|&leaf| self.stop_step(tree, leaf) <= other.stop_step(tree, leaf))
    }
}

/// Stops at the first node whose path value has absolute value `>= level`,
/// and at the horizon otherwise. `level = +inf` never triggers early.
pub fn hitting_rule(level: f64, tree: &ScenarioTree) -> StoppingRule {
    let stops = tree
        .ids()
        .map(|id| {
            let node = tree.node(id);
            node.value.abs() >= level || node.step == tree.grid().steps()
        })
        .collect();
    StoppingRule { stops }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleCounterexample {
    /// A final-step node not mapped to stop.
    LeafNotStopped(NodeId),
    /// Two paths agreeing up to the claimed stopping step with different
    /// stopping steps.
    PrefixMismatch {
        leaf_a: NodeId,
        leaf_b: NodeId,
        step_a: usize,
        step_b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleCheck {
    pub ok: bool,
    pub counterexample: Option<RuleCounterexample>,
}

/// Checks a node map `candidate` for the stopping-rule contract. On a tree
/// the prefix-consistency half is vacuous (distinct nodes have distinct
/// prefixes), so only totality and stopping at the horizon can fail.
pub fn is_stopping_rule(tree: &ScenarioTree, candidate: &[bool]) -> Result<RuleCheck, LatticeError> {
    if candidate.len() != tree.len() {
        return Err(LatticeError::PartialStoppingMap {
            got: candidate.len(),
            want: tree.len(),
        });
    }
    for &leaf in tree.leaves() {
        if !candidate[leaf.0] {
            return Ok(RuleCheck {
                ok: false,
                counterexample: Some(RuleCounterexample::LeafNotStopped(leaf)),
            });
        }
    }
    Ok(RuleCheck {
        ok: true,
        counterexample: None,
    })
}

/// Checks whether a step-valued function of the whole path is a stopping
/// time, by enumeration: whenever two paths agree up to the claimed stopping
/// step of one, both must stop at that same step.
pub fn is_path_stopping_time<F>(tree: &ScenarioTree, tau: F) -> RuleCheck
where
    F: Fn(&DiscretePath) -> usize,
{
    let leaves = tree.leaves();
    let steps: Vec<usize> = leaves
        .iter()
        .map(|&leaf| tau(tree.node(leaf).prefix()))
        .collect();
    for (i, &a) in leaves.iter().enumerate() {
        let ka = steps[i].min(tree.grid().steps());
        let pa = tree.node(a).prefix();
        for (j, &b) in leaves.iter().enumerate() {
            if i == j {
                continue;
            }
            let pb = tree.node(b).prefix();
            let agree = pa.increments()[..ka] == pb.increments()[..ka];
            if agree && steps[j] != steps[i] {
                return RuleCheck {
                    ok: false,
                    counterexample: Some(RuleCounterexample::PrefixMismatch {
                        leaf_a: a,
                        leaf_b: b,
                        step_a: steps[i],
                        step_b: steps[j],
                    }),
                };
            }
        }
    }
    RuleCheck {
        ok: true,
        counterexample: None,
    }
}
