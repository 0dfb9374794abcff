//! The scenario set: path-dependent volatility bands, zero-mean one-step
//! kernels, adapted policies, and the closure operations (conditioning,
//! pasting at stopping rules, event mixing) together with their exhaustive
//! verification.
//!
//! Two kernel families are supported and deliberately kept apart:
//!
//! * [`KernelFamily::TwoPointSymmetric`] — each node picks one variance `v`
//!   from its band and moves by `+-sqrt(v*dt)` with probability 1/2 each.
//!   Every one-step market is complete, so value surfaces admit an exact
//!   martingale/compensator split with a pathwise integrand.
//! * [`KernelFamily::MartingalePolytope`] — all zero-mean kernels supported
//!   on the node's increment set. This convexified family is the one whose
//!   worst-case price matches the minimal superhedging capital with zero gap
//!   (linear-programming duality); its extreme kernels have at most two
//!   atoms, which keeps enumeration exact.
//!
//! The gap between the two families is a reported quantity, not an error.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{Claim, ClaimError};
use crate::lattice::{
    LatticeError, NodeId, ScenarioTree, StoppingRule, TimeGrid, DEFAULT_NODE_CAP,
};
use crate::EXACT_TOL;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("variance band needs 0 < lo <= hi, got [{lo}, {hi}]")]
    BadBand { lo: f64, hi: f64 },
    #[error("m = 1 is ambiguous for a non-degenerate band [{lo}, {hi}]")]
    AmbiguousSingleBand { lo: f64, hi: f64 },
    #[error("band discretization count must be >= 1")]
    BadBandCount,
    #[error("kernel needs at least one atom")]
    EmptyKernel,
    #[error("kernel increments must be strictly ascending")]
    KernelAtomOrder,
    #[error("kernel probabilities must be positive and sum to 1, sum = {sum}")]
    KernelProbs { sum: f64 },
    #[error("kernel mean must vanish, got {mean}")]
    KernelMean { mean: f64 },
    #[error("two-atom kernel needs a < 0 < b, got ({a}, {b})")]
    BadPairSigns { a: f64, b: f64 },
    #[error("policy has no kernel at node {0:?}")]
    PolicyIncomplete(NodeId),
    #[error("kernel at node {node:?} puts mass on increment {increment} outside the node support")]
    AtomOffSupport { node: NodeId, increment: f64 },
    #[error("{count} policies exceed the configured cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },
    #[error("pasting kernel missing a policy at stop node {0:?}")]
    PastingIncomplete(NodeId),
    #[error("pasting policy at stop node {node:?} is rooted at {root:?}")]
    PastingWrongRoot { node: NodeId, root: NodeId },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Claim(#[from] ClaimError),
}

/// Band of admissible one-step variances per unit time; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct VolBand {
    lo: f64,
    hi: f64,
}

impl VolBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ModelError> {
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || lo > hi {
            return Err(ModelError::BadBand { lo, hi });
        }
        Ok(VolBand { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl TryFrom<[f64; 2]> for VolBand {
    type Error = ModelError;
    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        VolBand::new(v[0], v[1])
    }
}

impl From<VolBand> for [f64; 2] {
    fn from(b: VolBand) -> [f64; 2] {
        [b.lo, b.hi]
    }
}

/// Adapted band-valued volatility rule. Adaptedness is structural: the band
/// at a node depends only on the node's path value, and a node *is* its path
/// prefix.
///
/// The wire form matches the config file: `{"constant":[lo,hi]}` or
/// `{"level_scaled":{"threshold":t,"inner":[..],"outer":[..]}}`, where
/// `inner` applies while `|path value| <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolRule {
    Constant(VolBand),
    LevelScaled {
        threshold: f64,
        inner: VolBand,
        outer: VolBand,
    },
}

impl VolRule {
    pub fn band_at(&self, path_value: f64) -> VolBand {
        match self {
            VolRule::Constant(band) => *band,
            VolRule::LevelScaled {
                threshold,
                inner,
                outer,
            } => {
                if path_value.abs() <= *threshold {
                    *inner
                } else {
                    *outer
                }
            }
        }
    }

    /// The bands a rule can ever produce; used for up-front validation.
    pub fn constituent_bands(&self) -> Vec<VolBand> {
        match self {
            VolRule::Constant(band) => vec![*band],
            VolRule::LevelScaled { inner, outer, .. } => vec![*inner, *outer],
        }
    }
}

/// `m` equally spaced variances spanning the band, endpoints exact,
/// bitwise duplicates removed (a degenerate band collapses to one point).
pub fn band_variances(band: &VolBand, m: usize) -> Result<Vec<f64>, ModelError> {
    if m == 0 {
        return Err(ModelError::BadBandCount);
    }
    if m == 1 {
        if band.lo != band.hi {
            return Err(ModelError::AmbiguousSingleBand {
                lo: band.lo,
                hi: band.hi,
            });
        }
        return Ok(vec![band.lo]);
    }
    let mut vs = Vec::with_capacity(m);
    let width = band.hi - band.lo;
    for i in 0..m {
        let v = if i == m - 1 {
            band.hi
        } else {
            band.lo + width * (i as f64) / ((m - 1) as f64)
        };
        vs.push(v);
    }
    vs.dedup();
    Ok(vs)
}

/// Increment support `{ +-sqrt(v_i * dt) }`, ascending. Each root is computed
/// once per variance so equal bands yield bit-identical labels, which is what
/// makes node-identity comparisons exact downstream.
pub fn support_points(band: &VolBand, dt: f64, m: usize) -> Result<Vec<f64>, ModelError> {
    let us: Vec<f64> = band_variances(band, m)?
        .into_iter()
        .map(|v| (v * dt).sqrt())
        .collect();
    let mut support = Vec::with_capacity(2 * us.len());
    for &u in us.iter().rev() {
        support.push(-u);
    }
    support.extend_from_slice(&us);
    Ok(support)
}

/// A one-step transition law: finitely many `(increment, probability)` atoms
/// with positive weights summing to one and zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    atoms: Vec<(f64, f64)>,
}

impl Kernel {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        if atoms.is_empty() {
            return Err(ModelError::EmptyKernel);
        }
        if atoms.windows(2).any(|w| w[0].0.partial_cmp(&w[1].0) != Some(std::cmp::Ordering::Less)) {
            return Err(ModelError::KernelAtomOrder);
        }
        let sum: f64 = atoms.iter().map(|(_, p)| p).sum();
        if atoms.iter().any(|&(_, p)| p.is_nan() || p <= 0.0) || (sum - 1.0).abs() > EXACT_TOL {
            return Err(ModelError::KernelProbs { sum });
        }
        let mean: f64 = atoms.iter().map(|(x, p)| x * p).sum();
        if mean.abs() > EXACT_TOL {
            return Err(ModelError::KernelMean { mean });
        }
        Ok(Kernel { atoms })
    }

    /// `+-u` with probability 1/2 each.
    pub fn symmetric(u: f64) -> Self {
        Kernel {
            atoms: vec![(-u, 0.5), (u, 0.5)],
        }
    }

    /// The unique zero-mean law on `{a, b}` with `a < 0 < b`: weights
    /// `b/(b-a)` and `-a/(b-a)`.
    pub fn two_atom(a: f64, b: f64) -> Result<Self, ModelError> {
        if a.is_nan() || b.is_nan() || a >= 0.0 || b <= 0.0 {
            return Err(ModelError::BadPairSigns { a, b });
        }
        let span = b - a;
        Ok(Kernel {
            atoms: vec![(a, b / span), (b, -a / span)],
        })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * x * p).sum()
    }

    /// Probability of a bit-exact increment, zero off the atoms.
    pub fn prob_of(&self, increment: f64) -> f64 {
        self.atoms
            .iter()
            .find(|(x, _)| *x == increment)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|(x, p)| p * f(*x)).sum()
    }

    /// `Some(u)` when this is `+-u` with equal weights (within tolerance).
    pub fn is_symmetric_pair(&self) -> Option<f64> {
        if self.atoms.len() != 2 {
            return None;
        }
        let (a, pa) = self.atoms[0];
        let (b, pb) = self.atoms[1];
        if (a + b).abs() <= EXACT_TOL && (pa - 0.5).abs() <= EXACT_TOL && (pb - 0.5).abs() <= EXACT_TOL
        {
            Some(b)
        } else {
            None
        }
    }
}

/// Which one-step kernels a node may use; `m` is the band discretization
/// count shared by both families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    TwoPointSymmetric { m: usize },
    MartingalePolytope { m: usize },
}

impl KernelFamily {
    pub fn m(&self) -> usize {
        match self {
            KernelFamily::TwoPointSymmetric { m } | KernelFamily::MartingalePolytope { m } => *m,
        }
    }

    pub fn is_two_point(&self) -> bool {
        matches!(self, KernelFamily::TwoPointSymmetric { .. })
    }
}

/// The scenario universe: a tree whose child labels at every node equal the
/// support points of the node's band, plus the rule and family that generated
/// it.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    tree: ScenarioTree,
    rule: VolRule,
    family: KernelFamily,
}

impl ScenarioSet {
    pub fn build(grid: TimeGrid, rule: VolRule, family: KernelFamily) -> Result<Self, ModelError> {
        Self::build_capped(grid, rule, family, DEFAULT_NODE_CAP)
    }

    pub fn build_capped(
        grid: TimeGrid,
        rule: VolRule,
        family: KernelFamily,
        node_cap: usize,
    ) -> Result<Self, ModelError> {
        let m = family.m();
        for band in rule.constituent_bands() {
            band_variances(&band, m)?;
        }
        let tree = ScenarioTree::grow_capped(grid, node_cap, &mut |_, _, value| {
            support_points(&rule.band_at(value), grid.dt(), m)
                .expect("bands validated before growth")
        })?;
        Ok(ScenarioSet { tree, rule, family })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn rule(&self) -> &VolRule {
        &self.rule
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn grid(&self) -> &TimeGrid {
        self.tree.grid()
    }

    pub fn band_at(&self, node: NodeId) -> VolBand {
        self.rule.band_at(self.tree.node(node).value())
    }

    /// Variances available at a node, ascending.
    pub fn variances_at(&self, node: NodeId) -> Vec<f64> {
        band_variances(&self.band_at(node), self.family.m()).expect("validated at build")
    }

    /// Increment support at a node; equals the child labels bit-exactly.
    pub fn support_at(&self, node: NodeId) -> Vec<f64> {
        support_points(&self.band_at(node), self.grid().dt(), self.family.m())
            .expect("validated at build")
    }

    /// The admissible kernels at a node, in the canonical deterministic
    /// order: ascending variance for the symmetric family, lexicographic
    /// `(|a|, b)` over sign-split pairs for the polytope's extreme kernels.
    pub fn kernels_at(&self, node: NodeId) -> Vec<Kernel> {
        let support = self.support_at(node);
        let k = support.len() / 2;
        match self.family {
            KernelFamily::TwoPointSymmetric { .. } => (0..k)
                .map(|i| Kernel::symmetric(support[k + i]))
                .collect(),
            KernelFamily::MartingalePolytope { .. } => {
                let mut out = Vec::with_capacity(k * k);
                for i in 0..k {
                    let a = support[k - 1 - i];
                    for &b in &support[k..] {
                        out.push(Kernel::two_atom(a, b).expect("support is sign-split"));
                    }
                }
                out
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn corrupt_rule_for_test(&mut self, rule: VolRule) {
        self.rule = rule;
    }
}

/// An adapted scenario: one kernel per non-terminal node of the subtree it is
/// rooted at.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    root: NodeId,
    kernels: BTreeMap<NodeId, Kernel>,
}

impl Policy {
    pub fn new(root: NodeId, kernels: BTreeMap<NodeId, Kernel>) -> Self {
        Policy { root, kernels }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn kernel(&self, node: NodeId) -> Option<&Kernel> {
        self.kernels.get(&node)
    }

    pub fn kernels(&self) -> &BTreeMap<NodeId, Kernel> {
        &self.kernels
    }
}

/// The symmetric policy using the variance of the given rank (clamped) at
/// every node of the subtree; rank 0 is the minimum variance.
pub fn symmetric_policy_at(set: &ScenarioSet, root: NodeId, rank: usize) -> Policy {
    let mut kernels = BTreeMap::new();
    for id in set.tree().subtree(root) {
        if set.tree().node(id).is_leaf() {
            continue;
        }
        let support = set.support_at(id);
        let k = support.len() / 2;
        let u = support[k + rank.min(k - 1)];
        kernels.insert(id, Kernel::symmetric(u));
    }
    Policy::new(root, kernels)
}

pub fn symmetric_policy(set: &ScenarioSet, rank: usize) -> Policy {
    symmetric_policy_at(set, set.tree().root(), rank)
}

/// Number of distinct policies on the subtree (product of per-node kernel
/// counts), saturating at `u128::MAX`.
pub fn policy_count_at(set: &ScenarioSet, root: NodeId) -> u128 {
    let mut count: u128 = 1;
    for id in set.tree().subtree(root) {
        if set.tree().node(id).is_leaf() {
            continue;
        }
        let choices = per_node_choices(set, id) as u128;
        count = count.saturating_mul(choices);
    }
    count
}

pub fn policy_count(set: &ScenarioSet) -> u128 {
    policy_count_at(set, set.tree().root())
}

fn per_node_choices(set: &ScenarioSet, node: NodeId) -> usize {
    let k = set.support_at(node).len() / 2;
    match set.family {
        KernelFamily::TwoPointSymmetric { .. } => k,
        KernelFamily::MartingalePolytope { .. } => k * k,
    }
}

/// Exhaustive policy enumeration in odometer order over the subtree's
/// non-terminal nodes (node id order, first node most significant).
#[derive(Debug)]
pub struct PolicyIter {
    root: NodeId,
    nodes: Vec<NodeId>,
    choices: Vec<Vec<Kernel>>,
    counters: Vec<usize>,
    done: bool,
}

impl PolicyIter {
    pub fn len(&self) -> u128 {
        self.choices
            .iter()
            .map(|c| c.len() as u128)
            .try_fold(1u128, u128::checked_mul)
            .unwrap_or(u128::MAX)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Iterator for PolicyIter {
    type Item = Policy;

    fn next(&mut self) -> Option<Policy> {
        if self.done {
            return None;
        }
        let mut kernels = BTreeMap::new();
        for (i, &node) in self.nodes.iter().enumerate() {
            kernels.insert(node, self.choices[i][self.counters[i]].clone());
        }
        // odometer increment, least significant digit last
        let mut i = self.nodes.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.counters[i] += 1;
            if self.counters[i] < self.choices[i].len() {
                break;
            }
            self.counters[i] = 0;
        }
        Some(Policy::new(self.root, kernels))
    }
}

/// All policies on the subtree at `root`; refuses when the count exceeds
/// `cap`.
pub fn enumerate_policies_at(
    set: &ScenarioSet,
    root: NodeId,
    cap: u128,
) -> Result<PolicyIter, ModelError> {
    let count = policy_count_at(set, root);
    if count > cap {
        return Err(ModelError::CapExceeded { count, cap });
    }
    let nodes: Vec<NodeId> = set
        .tree()
        .subtree(root)
        .into_iter()
        .filter(|&id| !set.tree().node(id).is_leaf())
        .collect();
    let choices: Vec<Vec<Kernel>> = nodes.iter().map(|&id| set.kernels_at(id)).collect();
    let counters = vec![0; nodes.len()];
    Ok(PolicyIter {
        root,
        nodes,
        choices,
        counters,
        done: false,
    })
}

pub const DEFAULT_POLICY_CAP: u128 = 1_000_000;

pub fn enumerate_policies(set: &ScenarioSet, cap: u128) -> Result<PolicyIter, ModelError> {
    enumerate_policies_at(set, set.tree().root(), cap)
}

/// Decodes the policy with the given odometer index; index order matches
/// [`PolicyIter`].
pub fn policy_by_index(set: &ScenarioSet, root: NodeId, index: u128) -> Policy {
    let nodes: Vec<NodeId> = set
        .tree()
        .subtree(root)
        .into_iter()
        .filter(|&id| !set.tree().node(id).is_leaf())
        .collect();
    let mut kernels = BTreeMap::new();
    let mut rem = index;
    for &node in nodes.iter().rev() {
        let choices = set.kernels_at(node);
        let pick = (rem % choices.len() as u128) as usize;
        rem /= choices.len() as u128;
        kernels.insert(node, choices[pick].clone());
    }
    Policy::new(root, kernels)
}

/// A uniformly random kernel assignment on the subtree (for sampled closure
/// checks); deterministic given the generator state.
pub fn random_policy_at(set: &ScenarioSet, root: NodeId, rng: &mut ChaCha8Rng) -> Policy {
    let mut kernels = BTreeMap::new();
    for id in set.tree().subtree(root) {
        if set.tree().node(id).is_leaf() {
            continue;
        }
        let choices = set.kernels_at(id);
        let pick = rng.random_range(0..choices.len());
        kernels.insert(id, choices[pick].clone());
    }
    Policy::new(root, kernels)
}

/// Restriction of a policy to the subtree rooted at `node`. The restriction
/// of a member policy is again a member of the subtree's scenario set.
pub fn condition_policy(set: &ScenarioSet, policy: &Policy, node: NodeId) -> Policy {
    let mut kernels = BTreeMap::new();
    for id in set.tree().subtree(node) {
        if let Some(kernel) = policy.kernel(id) {
            kernels.insert(id, kernel.clone());
        }
    }
    Policy::new(node, kernels)
}

/// Continuation policies keyed by the stop nodes of a stopping rule.
#[derive(Debug, Clone, Default)]
pub struct PastingKernel {
    policies: BTreeMap<NodeId, Policy>,
}

impl PastingKernel {
    pub fn new() -> Self {
        PastingKernel::default()
    }

    pub fn insert(&mut self, node: NodeId, policy: Policy) {
        self.policies.insert(node, policy);
    }

    pub fn get(&self, node: NodeId) -> Option<&Policy> {
        self.policies.get(&node)
    }

    /// The identity pasting: every stop node continues with the restriction
    /// of `policy` itself.
    pub fn conditioned_from(
        set: &ScenarioSet,
        policy: &Policy,
        rule: &StoppingRule,
    ) -> PastingKernel {
        let mut nu = PastingKernel::new();
        for node in rule.first_stop_nodes(set.tree()) {
            nu.insert(node, condition_policy(set, policy, node));
        }
        nu
    }
}

/// Replaces `policy` beyond the stopping rule: the result follows `policy`
/// strictly before stopping and the pasted continuation on each post-stop
/// subtree. The induced path measure satisfies
/// `P(leaf) = P(prefix to stop node) * nu(stop node)(tail)` exactly.
pub fn paste(
    set: &ScenarioSet,
    policy: &Policy,
    rule: &StoppingRule,
    nu: &PastingKernel,
) -> Result<Policy, ModelError> {
    let tree = set.tree();
    let mut kernels = BTreeMap::new();
    let mut stack = vec![policy.root()];
    while let Some(id) = stack.pop() {
        let node = tree.node(id);
        let stopped = rule.stops(id);
        if stopped {
            let continuation = nu.get(id).ok_or(ModelError::PastingIncomplete(id))?;
            if continuation.root() != id {
                return Err(ModelError::PastingWrongRoot {
                    node: id,
                    root: continuation.root(),
                });
            }
            for sub in tree.subtree(id) {
                if tree.node(sub).is_leaf() {
                    continue;
                }
                let kernel = continuation
                    .kernel(sub)
                    .ok_or(ModelError::PolicyIncomplete(sub))?;
                check_atoms_on_support(set, sub, kernel)?;
                kernels.insert(sub, kernel.clone());
            }
            continue;
        }
        if !node.is_leaf() {
            let kernel = policy.kernel(id).ok_or(ModelError::PolicyIncomplete(id))?;
            kernels.insert(id, kernel.clone());
            for &(_, child) in node.children() {
                stack.push(child);
            }
        }
    }
    Ok(Policy::new(policy.root(), kernels))
}

fn check_atoms_on_support(set: &ScenarioSet, node: NodeId, kernel: &Kernel) -> Result<(), ModelError> {
    let children = set.tree().node(node).children();
    for &(x, _) in kernel.atoms() {
        if !children.iter().any(|&(label, _)| label == x) {
            return Err(ModelError::AtomOffSupport { node, increment: x });
        }
    }
    Ok(())
}

/// Probability of reaching `target` from the policy root: the product of
/// one-step kernel weights along the connecting path (zero when `target`
/// is not below the root or the kernel never charges an edge).
pub fn measure_to(set: &ScenarioSet, policy: &Policy, target: NodeId) -> f64 {
    let tree = set.tree();
    if !tree.is_under(target, policy.root()) {
        return 0.0;
    }
    // collect the edge labels from root to target
    let mut labels = Vec::new();
    let mut at = target;
    while at != policy.root() {
        let node = tree.node(at);
        let parent = node.parent().expect("is_under guarantees a path");
        let step = tree.node(parent).step();
        labels.push(node.prefix().increments()[step]);
        at = parent;
    }
    labels.reverse();
    let mut prob = 1.0;
    let mut here = policy.root();
    for label in labels {
        let kernel = match policy.kernel(here) {
            Some(k) => k,
            None => return 0.0,
        };
        let p = kernel.prob_of(label);
        if p == 0.0 {
            return 0.0;
        }
        prob *= p;
        here = tree
            .descend(here, &[label])
            .expect("labels came from the tree");
    }
    prob
}

/// Probability of a leaf event (a set of leaves) under the policy.
pub fn measure_of_event(set: &ScenarioSet, policy: &Policy, leaves: &[NodeId]) -> f64 {
    leaves
        .iter()
        .map(|&leaf| measure_to(set, policy, leaf))
        .sum()
}

/// Expectation of a leaf functional under the policy's path measure,
/// accumulated in ascending-child order for determinism.
pub fn expect_under<F: FnMut(NodeId) -> f64>(set: &ScenarioSet, policy: &Policy, mut f: F) -> f64 {
    fn walk<F: FnMut(NodeId) -> f64>(
        set: &ScenarioSet,
        policy: &Policy,
        id: NodeId,
        prob: f64,
        f: &mut F,
        acc: &mut f64,
    ) {
        let node = set.tree().node(id);
        if node.is_leaf() {
            *acc += prob * f(id);
            return;
        }
        let kernel = match policy.kernel(id) {
            Some(k) => k,
            None => return,
        };
        for &(label, child) in node.children() {
            let p = kernel.prob_of(label);
            if p > 0.0 {
                walk(set, policy, child, prob * p, f, acc);
            }
        }
    }
    let mut acc = 0.0;
    walk(set, policy, policy.root(), 1.0, &mut f, &mut acc);
    acc
}

/// Expected claim payoff under a root policy.
pub fn expect_claim(set: &ScenarioSet, policy: &Policy, xi: &Claim) -> Result<f64, ModelError> {
    assert_eq!(
        policy.root(),
        set.tree().root(),
        "full-path claims need a root policy; shift the claim for subtrees"
    );
    // surface evaluation errors once, then accumulate
    if let Some(&leaf) = set.tree().leaves().first() {
        xi.eval(set.tree().node(leaf).prefix())?;
    }
    Ok(expect_under(set, policy, |leaf| {
        xi.eval_raw(set.tree().node(leaf).prefix())
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipViolation {
    pub node: NodeId,
    pub reason: String,
}

/// Checks that a policy is a member of the scenario set on its subtree:
/// total, atoms on the node supports, zero mean, variance inside the band
/// scaled by `dt`, and (symmetric family) a symmetric pair with equal
/// weights.
pub fn membership_check(set: &ScenarioSet, policy: &Policy) -> Option<MembershipViolation> {
    let tree = set.tree();
    let dt = set.grid().dt();
    for id in tree.subtree(policy.root()) {
        if tree.node(id).is_leaf() {
            continue;
        }
        let kernel = match policy.kernel(id) {
            Some(k) => k,
            None => {
                return Some(MembershipViolation {
                    node: id,
                    reason: "no kernel assigned".into(),
                })
            }
        };
        if let Err(e) = check_atoms_on_support(set, id, kernel) {
            return Some(MembershipViolation {
                node: id,
                reason: e.to_string(),
            });
        }
        let mean = kernel.mean();
        if mean.abs() > EXACT_TOL {
            return Some(MembershipViolation {
                node: id,
                reason: format!("kernel mean {mean} exceeds tolerance"),
            });
        }
        let band = set.band_at(id);
        let variance = kernel.variance();
        if variance < band.lo() * dt - EXACT_TOL || variance > band.hi() * dt + EXACT_TOL {
            return Some(MembershipViolation {
                node: id,
                reason: format!(
                    "kernel variance {variance} outside [{}, {}]",
                    band.lo() * dt,
                    band.hi() * dt
                ),
            });
        }
        if set.family().is_two_point() && kernel.is_symmetric_pair().is_none() {
            return Some(MembershipViolation {
                node: id,
                reason: "kernel is not a symmetric two-point pair".into(),
            });
        }
    }
    None
}

pub fn membership(set: &ScenarioSet, policy: &Policy) -> bool {
    membership_check(set, policy).is_none()
}

/// Knobs for [`check_closure`]; everything is seeded, so reports are
/// reproducible.
#[derive(Debug, Clone)]
pub struct ClosureOptions {
    /// Refuse enumeration beyond this many policies.
    pub policy_cap: u128,
    /// Run checks over every policy when the count is at most this;
    /// otherwise fall back to a stratified sample of the same size.
    pub exhaustive_limit: u128,
    /// Base policies drawn per pasting/mixing check.
    pub base_samples: usize,
    /// Random continuation kernels per (policy, rule) pair.
    pub nu_samples: usize,
    /// Random leaf events per pasted measure identity, on top of all
    /// singletons and the full space.
    pub event_samples: usize,
    /// (policy pair, event) triples per mixing step.
    pub mixing_samples: usize,
    pub seed: u64,
}

impl Default for ClosureOptions {
    fn default() -> Self {
        ClosureOptions {
            policy_cap: DEFAULT_POLICY_CAP,
            exhaustive_limit: 4096,
            base_samples: 12,
            nu_samples: 12,
            event_samples: 6,
            mixing_samples: 12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ClosureViolation {
    /// A restricted member left the subtree scenario set.
    Conditioning {
        policy: usize,
        node: NodeId,
        reason: String,
    },
    /// A pasted policy left the set, or identity pasting failed to
    /// reproduce the base policy.
    Pasting {
        policy: usize,
        rule: String,
        sample: usize,
        reason: String,
    },
    /// An event-mixed policy left the set.
    Mixing {
        step: usize,
        sample: usize,
        reason: String,
    },
    /// The pasted path measure disagreed with the two-stage sum.
    MeasureIdentity {
        rule: String,
        sample: usize,
        error: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ClosureReport {
    pub conditioning_checks: usize,
    pub pasting_checks: usize,
    pub mixing_checks: usize,
    pub max_measure_error: f64,
    pub violations: Vec<ClosureViolation>,
}

impl ClosureReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn base_policy_indices(count: u128, want: usize, rng: &mut ChaCha8Rng) -> Vec<u128> {
    if count <= want as u128 {
        return (0..count).collect();
    }
    let mut out = vec![0u128, count - 1];
    while out.len() < want {
        out.push(rng.random_range(0..count.min(u64::MAX as u128) as u64) as u128 % count);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn stopping_rules_for(set: &ScenarioSet) -> Vec<(String, StoppingRule)> {
    let tree = set.tree();
    let mut rules = Vec::new();
    for k in 0..=set.grid().steps() {
        rules.push((format!("step({k})"), StoppingRule::at_step(tree, k)));
    }
    let mut levels: Vec<f64> = tree
        .ids()
        .map(|id| tree.node(id).value().abs())
        .filter(|v| *v > 0.0)
        .collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    for idx in [levels.len() / 3, 2 * levels.len() / 3] {
        if let Some(&level) = levels.get(idx) {
            rules.push((format!("hit({level})"), crate::lattice::hitting_rule(level, tree)));
        }
    }
    rules
}

/// Verifies, by enumeration and seeded sampling, that the scenario set is
/// closed under its three stability operations: restriction to subtrees,
/// pasting of member continuations at stopping rules, and mixing two member
/// continuations over an event at a fixed step. Also checks the pasted
/// measure identity to `EXACT_TOL`.
pub fn check_closure(set: &ScenarioSet, opts: &ClosureOptions) -> Result<ClosureReport, ModelError> {
    let count = policy_count(set);
    if count > opts.policy_cap {
        return Err(ModelError::CapExceeded {
            count,
            cap: opts.policy_cap,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = ClosureReport::default();
    let tree = set.tree();
    let root = tree.root();

    // (a) conditioning stability, exhaustive when feasible
    let conditioning_indices = if count <= opts.exhaustive_limit {
        (0..count).collect::<Vec<_>>()
    } else {
        base_policy_indices(count, opts.exhaustive_limit as usize, &mut rng)
    };
    for &index in &conditioning_indices {
        let policy = policy_by_index(set, root, index);
        for node in tree.ids() {
            if tree.node(node).is_leaf() {
                continue;
            }
            let restricted = condition_policy(set, &policy, node);
            report.conditioning_checks += 1;
            if let Some(v) = membership_check(set, &restricted) {
                report.violations.push(ClosureViolation::Conditioning {
                    policy: index as usize,
                    node: v.node,
                    reason: v.reason,
                });
            }
        }
    }

    // (b) pasting stability and the measure identity
    let rules = stopping_rules_for(set);
    let bases = base_policy_indices(count, opts.base_samples, &mut rng);
    let leaves = tree.leaves().to_vec();
    for (rule_name, rule) in &rules {
        let stop_nodes = rule.first_stop_nodes(tree);
        for &base_index in &bases {
            let policy = policy_by_index(set, root, base_index);
            // identity pasting must reproduce the policy bit for bit
            let identity = PastingKernel::conditioned_from(set, &policy, rule);
            match paste(set, &policy, rule, &identity) {
                Ok(pasted) if pasted == policy => {}
                Ok(_) => report.violations.push(ClosureViolation::Pasting {
                    policy: base_index as usize,
                    rule: rule_name.clone(),
                    sample: 0,
                    reason: "identity pasting did not reproduce the policy".into(),
                }),
                Err(e) => report.violations.push(ClosureViolation::Pasting {
                    policy: base_index as usize,
                    rule: rule_name.clone(),
                    sample: 0,
                    reason: e.to_string(),
                }),
            }
            for sample in 0..opts.nu_samples {
                let mut nu = PastingKernel::new();
                for &node in &stop_nodes {
                    nu.insert(node, random_policy_at(set, node, &mut rng));
                }
                report.pasting_checks += 1;
                let pasted = match paste(set, &policy, rule, &nu) {
                    Ok(p) => p,
                    Err(e) => {
                        report.violations.push(ClosureViolation::Pasting {
                            policy: base_index as usize,
                            rule: rule_name.clone(),
                            sample,
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
                if let Some(v) = membership_check(set, &pasted) {
                    report.violations.push(ClosureViolation::Pasting {
                        policy: base_index as usize,
                        rule: rule_name.clone(),
                        sample,
                        reason: format!("pasted policy left the set at {:?}: {}", v.node, v.reason),
                    });
                }
                let mut events: Vec<Vec<NodeId>> =
                    leaves.iter().map(|&leaf| vec![leaf]).collect();
                events.push(leaves.clone());
                for _ in 0..opts.event_samples {
                    let event: Vec<NodeId> = leaves
                        .iter()
                        .copied()
                        .filter(|_| rng.random_bool(0.5))
                        .collect();
                    events.push(event);
                }
                for event in &events {
                    let direct = measure_of_event(set, &pasted, event);
                    let mut two_stage = 0.0;
                    for &node in &stop_nodes {
                        let head = measure_to(set, &policy, node);
                        if head == 0.0 {
                            continue;
                        }
                        let continuation = nu.get(node).expect("inserted above");
                        let tail: f64 = event
                            .iter()
                            .filter(|&&leaf| tree.is_under(leaf, node))
                            .map(|&leaf| measure_to(set, continuation, leaf))
                            .sum();
                        two_stage += head * tail;
                    }
                    let error = (direct - two_stage).abs();
                    report.max_measure_error = report.max_measure_error.max(error);
                    if error > EXACT_TOL {
                        report.violations.push(ClosureViolation::MeasureIdentity {
                            rule: rule_name.clone(),
                            sample,
                            error,
                        });
                    }
                }
            }
        }
    }

    // (c) event mixing at each interior step (and trivially at step 0)
    for t in 0..set.grid().steps() {
        let rule = StoppingRule::at_step(tree, t);
        let step_nodes = rule.first_stop_nodes(tree);
        for sample in 0..opts.mixing_samples {
            let p = policy_by_index(set, root, rng.random_range(0..count.min(u64::MAX as u128) as u64) as u128 % count);
            let p1 = policy_by_index(set, root, rng.random_range(0..count.min(u64::MAX as u128) as u64) as u128 % count);
            let p2 = policy_by_index(set, root, rng.random_range(0..count.min(u64::MAX as u128) as u64) as u128 % count);
            let mut nu = PastingKernel::new();
            for &node in &step_nodes {
                let pick = if rng.random_bool(0.5) { &p1 } else { &p2 };
                nu.insert(node, condition_policy(set, pick, node));
            }
            report.mixing_checks += 1;
            match paste(set, &p, &rule, &nu) {
                Ok(mixed) => {
                    if let Some(v) = membership_check(set, &mixed) {
                        report.violations.push(ClosureViolation::Mixing {
                            step: t,
                            sample,
                            reason: format!("{:?}: {}", v.node, v.reason),
                        });
                    }
                }
                Err(e) => report.violations.push(ClosureViolation::Mixing {
                    step: t,
                    sample,
                    reason: e.to_string(),
                }),
            }
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{build_claim, shift_claim, ClaimSpec};

    /// The canonical desk instance: one step, dt = 1, band [1,4], m = 2,
    /// supports {-2,-1,1,2}.
    pub(crate) fn unit2(family: KernelFamily) -> ScenarioSet {
        let grid = TimeGrid::new(1, 1.0).unwrap();
        let rule = VolRule::Constant(VolBand::new(1.0, 4.0).unwrap());
        ScenarioSet::build(grid, rule, family).unwrap()
    }

    fn unit2_n2(family: KernelFamily) -> ScenarioSet {
        let grid = TimeGrid::new(2, 1.0).unwrap();
        let rule = VolRule::Constant(VolBand::new(1.0, 4.0).unwrap());
        ScenarioSet::build(grid, rule, family).unwrap()
    }

    #[test]
    fn support_point_examples() {
        let degenerate = VolBand::new(4.0, 4.0).unwrap();
        assert_eq!(support_points(&degenerate, 1.0, 1).unwrap(), vec![-2.0, 2.0]);

        let band = VolBand::new(1.0, 4.0).unwrap();
        assert_eq!(
            support_points(&band, 1.0, 2).unwrap(),
            vec![-2.0, -1.0, 1.0, 2.0]
        );
        assert_eq!(
            support_points(&band, 0.25, 2).unwrap(),
            vec![-1.0, -0.5, 0.5, 1.0]
        );
        assert_eq!(
            band_variances(&band, 4).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn support_rejects_ambiguous_singleton() {
        let band = VolBand::new(1.0, 4.0).unwrap();
        assert_eq!(
            support_points(&band, 1.0, 1).unwrap_err(),
            ModelError::AmbiguousSingleBand { lo: 1.0, hi: 4.0 }
        );
        assert!(VolBand::new(0.0, 1.0).is_err());
        assert!(VolBand::new(4.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_band_collapses_duplicates() {
        let band = VolBand::new(2.0, 2.0).unwrap();
        assert_eq!(band_variances(&band, 3).unwrap(), vec![2.0]);
        assert_eq!(
            support_points(&band, 0.5, 3).unwrap(),
            vec![-1.0, 1.0]
        );
    }

    #[test]
    fn kernel_constructors() {
        let k = Kernel::symmetric(2.0);
        assert_eq!(k.mean(), 0.0);
        assert_eq!(k.variance(), 4.0);
        assert_eq!(k.is_symmetric_pair(), Some(2.0));

        let k = Kernel::two_atom(-2.0, 1.0).unwrap();
        assert!((k.prob_of(-2.0) - 1.0 / 3.0).abs() <= EXACT_TOL);
        assert!((k.prob_of(1.0) - 2.0 / 3.0).abs() <= EXACT_TOL);
        assert!(k.mean().abs() <= EXACT_TOL);
        assert!((k.variance() - 2.0).abs() <= EXACT_TOL);
        assert_eq!(k.is_symmetric_pair(), None);

        assert!(Kernel::two_atom(1.0, 2.0).is_err());
        assert!(Kernel::new(vec![(1.0, 1.0)]).is_err()); // nonzero mean
        assert!(Kernel::new(vec![(-1.0, 0.5), (1.0, 0.6)]).is_err());
    }

    #[test]
    fn level_scaled_rule_switches_band() {
        let inner = VolBand::new(1.0, 4.0).unwrap();
        let outer = VolBand::new(2.0, 3.0).unwrap();
        let rule = VolRule::LevelScaled {
            threshold: 1.0,
            inner,
            outer,
        };
        assert_eq!(rule.band_at(0.0), inner);
        assert_eq!(rule.band_at(-1.0), inner);
        assert_eq!(rule.band_at(1.5), outer);
    }

    #[test]
    fn tree_labels_equal_supports() {
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        for id in set.tree().ids() {
            let node = set.tree().node(id);
            if node.is_leaf() {
                continue;
            }
            let labels: Vec<f64> = node.children().iter().map(|&(l, _)| l).collect();
            assert_eq!(labels, set.support_at(id));
        }
    }

    #[test]
    fn policy_count_examples() {
        assert_eq!(
            policy_count(&unit2(KernelFamily::TwoPointSymmetric { m: 2 })),
            2
        );
        assert_eq!(
            policy_count(&unit2(KernelFamily::MartingalePolytope { m: 2 })),
            4
        );
        assert_eq!(
            policy_count(&unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 })),
            32
        );
    }

    #[test]
    fn enumeration_respects_cap() {
        let set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        let policies: Vec<Policy> = enumerate_policies(&set, 1_000).unwrap().collect();
        assert_eq!(policies.len(), 32);
        for p in &policies {
            assert!(membership(&set, p));
        }
        // all distinct
        for i in 0..policies.len() {
            for j in i + 1..policies.len() {
                assert_ne!(policies[i], policies[j]);
            }
        }
        assert_eq!(
            enumerate_policies(&set, 8).unwrap_err(),
            ModelError::CapExceeded { count: 32, cap: 8 }
        );
    }

    #[test]
    fn polytope_vertices_are_sign_split_pairs() {
        let set = unit2(KernelFamily::MartingalePolytope { m: 2 });
        let kernels = set.kernels_at(set.tree().root());
        let pairs: Vec<(f64, f64)> = kernels
            .iter()
            .map(|k| (k.atoms()[0].0, k.atoms()[1].0))
            .collect();
        assert_eq!(
            pairs,
            vec![(-1.0, 1.0), (-1.0, 2.0), (-2.0, 1.0), (-2.0, 2.0)]
        );
    }

    #[test]
    fn policy_by_index_matches_iteration() {
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        let policies: Vec<Policy> = enumerate_policies(&set, 2_000).unwrap().collect();
        for (i, p) in policies.iter().enumerate() {
            assert_eq!(&policy_by_index(&set, set.tree().root(), i as u128), p);
        }
    }

    #[test]
    fn conditioning_is_identity_at_root_and_restriction_below() {
        let set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        let p = symmetric_policy(&set, 1);
        assert_eq!(condition_policy(&set, &p, set.tree().root()), p);

        let (_, child) = set.tree().node(set.tree().root()).children()[0];
        let restricted = condition_policy(&set, &p, child);
        assert_eq!(restricted.root(), child);
        assert_eq!(restricted.kernels().len(), 1);
        assert!(membership(&set, &restricted));
    }

    #[test]
    fn measure_examples() {
        let set = unit2(KernelFamily::TwoPointSymmetric { m: 2 });
        let p = symmetric_policy(&set, 0);
        // symmetric +-1 kernel: the two charged children weigh 1/2 each
        let probs: Vec<f64> = set
            .tree()
            .leaves()
            .iter()
            .map(|&leaf| measure_to(&set, &p, leaf))
            .collect();
        let charged: Vec<f64> = probs.iter().copied().filter(|&p| p > 0.0).collect();
        assert_eq!(charged, vec![0.5, 0.5]);

        // N=2 constant-variance two-point policy: each charged path has
        // probability 1/4
        let set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        let p = symmetric_policy(&set, 0);
        let total: f64 = measure_of_event(&set, &p, set.tree().leaves());
        assert!((total - 1.0).abs() <= EXACT_TOL);
        for &leaf in set.tree().leaves() {
            let m = measure_to(&set, &p, leaf);
            assert!(m == 0.0 || (m - 0.25).abs() <= EXACT_TOL);
        }
    }

    #[test]
    fn conditional_measure_identity() {
        // E_p[xi | node] == E_{condition(p,node)}[shift_claim(xi)] exactly.
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        let xi = build_claim(&ClaimSpec::RealizedVariance, set.grid()).unwrap();
        let policies: Vec<Policy> = enumerate_policies(&set, 2_000).unwrap().collect();
        for p in policies.iter().step_by(97) {
            for &(_, node) in set.tree().node(set.tree().root()).children() {
                let node_obj = set.tree().node(node);
                let shifted = shift_claim(&xi, node_obj.step(), node_obj.prefix()).unwrap();
                let conditioned = condition_policy(&set, p, node);
                let lhs = {
                    // conditional expectation: renormalized sum below `node`
                    let weight = measure_to(&set, p, node);
                    let mut sum = 0.0;
                    for &leaf in &set.tree().leaves_under(node) {
                        sum += measure_to(&set, p, leaf)
                            * xi.eval_raw(set.tree().node(leaf).prefix());
                    }
                    if weight == 0.0 {
                        continue;
                    }
                    sum / weight
                };
                let rhs = expect_under(&set, &conditioned, |leaf| {
                    let tail = set.tree().node(leaf).prefix().tail_from(node_obj.step());
                    shifted.eval_raw(&tail)
                });
                assert!((lhs - rhs).abs() <= EXACT_TOL, "lhs {lhs} rhs {rhs}");
            }
        }
    }

    #[test]
    fn paste_identity_reproduces_policy() {
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        let p = policy_by_index(&set, set.tree().root(), 123);
        for rule in [
            StoppingRule::at_step(set.tree(), 0),
            StoppingRule::at_step(set.tree(), 1),
            crate::lattice::hitting_rule(2.0, set.tree()),
        ] {
            let nu = PastingKernel::conditioned_from(&set, &p, &rule);
            assert_eq!(paste(&set, &p, &rule, &nu).unwrap(), p);
        }
    }

    #[test]
    fn paste_low_then_high_variance() {
        // p uses variance 1 everywhere; nu switches to variance 4 after step
        // 1. The pasted measure charges the four (+-1, +-2) paths with 1/4.
        let set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        let p = symmetric_policy(&set, 0);
        let rule = StoppingRule::at_step(set.tree(), 1);
        let mut nu = PastingKernel::new();
        for node in rule.first_stop_nodes(set.tree()) {
            nu.insert(node, symmetric_policy_at(&set, node, 1));
        }
        let pasted = paste(&set, &p, &rule, &nu).unwrap();
        assert!(membership(&set, &pasted));
        for &leaf in set.tree().leaves() {
            let incs = set.tree().node(leaf).prefix().increments().to_vec();
            let expected = if incs[0].abs() == 1.0 && incs[1].abs() == 2.0 {
                0.25
            } else {
                0.0
            };
            assert_eq!(measure_to(&set, &pasted, leaf), expected, "{incs:?}");
        }
    }

    #[test]
    fn paste_rejects_missing_continuation() {
        let set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        let p = symmetric_policy(&set, 0);
        let rule = StoppingRule::at_step(set.tree(), 1);
        let nu = PastingKernel::new();
        assert!(matches!(
            paste(&set, &p, &rule, &nu),
            Err(ModelError::PastingIncomplete(_))
        ));
    }

    #[test]
    fn membership_examples() {
        let set = unit2(KernelFamily::MartingalePolytope { m: 2 });
        let root = set.tree().root();

        let mut kernels = BTreeMap::new();
        kernels.insert(root, Kernel::symmetric(1.0));
        assert!(membership(&set, &Policy::new(root, kernels)));

        // variance 2 kernel on (-2, 1) sits inside [1, 4]
        let mut kernels = BTreeMap::new();
        kernels.insert(root, Kernel::two_atom(-2.0, 1.0).unwrap());
        assert!(membership(&set, &Policy::new(root, kernels)));

        // +-3 is off the support (and would have variance 9 > 4)
        let mut kernels = BTreeMap::new();
        kernels.insert(root, Kernel::symmetric(3.0));
        let violation =
            membership_check(&set, &Policy::new(root, kernels)).expect("must be rejected");
        assert_eq!(violation.node, root);

        // the symmetric family refuses asymmetric kernels
        let set = unit2(KernelFamily::TwoPointSymmetric { m: 2 });
        let mut kernels = BTreeMap::new();
        kernels.insert(root, Kernel::two_atom(-2.0, 1.0).unwrap());
        assert!(!membership(&set, &Policy::new(root, kernels)));
    }

    #[test]
    fn membership_stable_under_condition_and_paste() {
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..12 {
            let p = random_policy_at(&set, set.tree().root(), &mut rng);
            assert!(membership(&set, &p));
            for node in set.tree().ids() {
                if !set.tree().node(node).is_leaf() {
                    assert!(membership(&set, &condition_policy(&set, &p, node)));
                }
            }
            let rule = crate::lattice::hitting_rule(1.0, set.tree());
            let mut nu = PastingKernel::new();
            for node in rule.first_stop_nodes(set.tree()) {
                nu.insert(node, random_policy_at(&set, node, &mut rng));
            }
            assert!(membership(&set, &paste(&set, &p, &rule, &nu).unwrap()));
        }
    }

    #[test]
    fn closure_passes_on_unit2_both_families() {
        for family in [
            KernelFamily::TwoPointSymmetric { m: 2 },
            KernelFamily::MartingalePolytope { m: 2 },
        ] {
            let set = unit2(family);
            let report = check_closure(&set, &ClosureOptions::default()).unwrap();
            assert!(report.ok(), "{:?}", report.violations);
            assert!(report.max_measure_error <= EXACT_TOL);
            assert!(report.conditioning_checks > 0);
            assert!(report.pasting_checks > 0);
            assert!(report.mixing_checks > 0);
        }
    }

    #[test]
    fn closure_passes_on_level_scaled_n2() {
        let grid = TimeGrid::new(2, 1.0).unwrap();
        let rule = VolRule::LevelScaled {
            threshold: 1.0,
            inner: VolBand::new(1.0, 4.0).unwrap(),
            outer: VolBand::new(2.0, 3.0).unwrap(),
        };
        for family in [
            KernelFamily::TwoPointSymmetric { m: 2 },
            KernelFamily::MartingalePolytope { m: 2 },
        ] {
            let set = ScenarioSet::build(grid, rule.clone(), family).unwrap();
            let report = check_closure(&set, &ClosureOptions::default()).unwrap();
            assert!(report.ok(), "{:?}", report.violations);
        }
    }

    #[test]
    fn closure_flags_corrupted_set() {
        // shrink the band after construction: kernels built from the old
        // support now violate membership, and the report names a witness
        let mut set = unit2_n2(KernelFamily::TwoPointSymmetric { m: 2 });
        set.corrupt_rule_for_test(VolRule::Constant(VolBand::new(1.0, 2.0).unwrap()));
        let report = check_closure(&set, &ClosureOptions::default()).unwrap();
        assert!(!report.ok());
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, ClosureViolation::Pasting { .. } | ClosureViolation::Conditioning { .. })));
    }

    #[test]
    fn closure_refuses_oversized_enumeration() {
        let set = unit2_n2(KernelFamily::MartingalePolytope { m: 2 });
        let opts = ClosureOptions {
            policy_cap: 16,
            ..ClosureOptions::default()
        };
        assert!(matches!(
            check_closure(&set, &opts),
            Err(ModelError::CapExceeded { count: 1024, cap: 16 })
        ));
    }

    #[test]
    fn rule_serde_wire_form() {
        let rule = VolRule::LevelScaled {
            threshold: 1.0,
            inner: VolBand::new(1.0, 4.0).unwrap(),
            outer: VolBand::new(2.0, 3.0).unwrap(),
        };
        let text = serde_json::to_string(&rule).unwrap();
        assert_eq!(
            text,
            r#"{"level_scaled":{"threshold":1.0,"inner":[1.0,4.0],"outer":[2.0,3.0]}}"#
        );
        let back: VolRule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rule);
        let constant: VolRule = serde_json::from_str(r#"{"constant":[1.0,4.0]}"#).unwrap();
        assert_eq!(
            constant,
            VolRule::Constant(VolBand::new(1.0, 4.0).unwrap())
        );
        // invalid bands are rejected during deserialization
        assert!(serde_json::from_str::<VolRule>(r#"{"constant":[4.0,1.0]}"#).is_err());
    }
}
