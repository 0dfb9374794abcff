//! Minimal superreplication: the minimax backward recursion, hedge
//! extraction from one-step concave envelopes, duality-gap reporting, the
//! martingale/compensator split of value surfaces, covariation-based hedge
//! recovery and admissibility diagnostics.
//!
//! The hedger always faces the full union support of a node, whatever kernel
//! family prices the claim: a superreplicating strategy must dominate the
//! payoff on every reachable path, and every support point is charged by
//! some member scenario. For the polytope family the resulting capital
//! equals the worst-case price exactly (finite LP duality); for the
//! symmetric family the difference is an honest, reported gap.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::claims::{Claim, ClaimError};
use crate::dp::{sublinear_expectation, sup_polytope, ArgMax, DpError, ValueSurface};
use crate::lattice::{DiscretePath, NodeId, ScenarioTree};
use crate::scenario::{Kernel, ModelError, Policy, ScenarioSet};
use crate::{EXACT_TOL, SLACK_TOL};

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("hedge has no position at node {0:?}")]
    MissingPosition(NodeId),
    #[error("kernel at node {0:?} is not a symmetric two-point pair")]
    NonTwoPointKernel(NodeId),
    #[error("policy kernel charges increment {increment} with no matching child at {node:?}")]
    DanglingEdge { node: NodeId, increment: f64 },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Claim(#[from] ClaimError),
}

/// Adapted trading positions, one per non-terminal node (shares).
#[derive(Debug, Clone, PartialEq)]
pub struct Hedge {
    positions: BTreeMap<NodeId, f64>,
}

impl Hedge {
    pub fn new(positions: BTreeMap<NodeId, f64>) -> Self {
        Hedge { positions }
    }

    pub fn position(&self, node: NodeId) -> Option<f64> {
        self.positions.get(&node).copied()
    }

    pub fn positions(&self) -> &BTreeMap<NodeId, f64> {
        &self.positions
    }
}

#[derive(Debug, Clone)]
pub struct SuperhedgeResult {
    /// Minimal initial capital.
    pub capital: f64,
    pub hedge: Hedge,
    /// Node-wise capital requirement (the minimax surface); its root value is
    /// `capital`.
    pub requirement: ValueSurface,
}

/// Cheapest superreplication by backward minimax: at each node the
/// requirement is `min_h max_u (X(child_u) - h*u)`, which is the value at
/// zero of the upper concave envelope of the child requirements over the
/// support, and the optimal position is the slope of the supporting segment.
/// Ties pick the lexicographically smallest pair, matching the pricing
/// recursion's argmax.
pub fn minimal_superhedge(xi: &Claim, set: &ScenarioSet) -> Result<SuperhedgeResult, HedgeError> {
    let tree = set.tree();
    let mut values = vec![f64::NAN; tree.len()];
    let mut positions = BTreeMap::new();
    let mut child_values = Vec::new();
    for raw in (0..tree.len()).rev() {
        let id = NodeId(raw);
        let node = tree.node(id);
        if node.is_leaf() {
            values[raw] = xi.eval(node.prefix())?;
            continue;
        }
        let support = set.support_at(id);
        child_values.clear();
        child_values.extend(node.children().iter().map(|&(_, c)| values[c.0]));
        let (value, arg) = sup_polytope(&support, &child_values);
        let (neg, pos) = match arg {
            ArgMax::Pair { neg, pos } => (neg, pos),
            ArgMax::Variance { .. } => unreachable!("envelope recursion yields pairs"),
        };
        let f_at = |u: f64| {
            let i = support.iter().position(|&s| s == u).expect("support point");
            child_values[i]
        };
        values[raw] = value;
        positions.insert(id, (f_at(pos) - f_at(neg)) / (pos - neg));
    }
    let capital = values[tree.root().0];
    Ok(SuperhedgeResult {
        capital,
        hedge: Hedge::new(positions),
        requirement: ValueSurface::from_values(values),
    })
}

#[derive(Debug, Clone)]
pub struct SlackReport {
    /// Worst terminal slack `x + sum H dB - xi` over all leaf paths.
    pub min_slack: f64,
    pub worst_path: DiscretePath,
    /// Paths with slack at most [`SLACK_TOL`] (complementary slackness
    /// witnesses).
    pub tight_count: usize,
    pub tight_paths: Vec<DiscretePath>,
}

const TIGHT_SAMPLE_CAP: usize = 8;

/// Replays the self-financing wealth `x + sum_k H(node_k) dB_k` along every
/// leaf path and compares with the payoff.
pub fn verify_superhedge(
    capital: f64,
    hedge: &Hedge,
    xi: &Claim,
    tree: &ScenarioTree,
) -> Result<SlackReport, HedgeError> {
    let mut min_slack = f64::INFINITY;
    let mut worst_path = DiscretePath::empty();
    let mut tight_count = 0;
    let mut tight_paths = Vec::new();
    for &leaf in tree.leaves() {
        let prefix = tree.node(leaf).prefix();
        let mut gains = 0.0;
        let mut at = tree.root();
        for &dx in prefix.increments() {
            let h = hedge
                .position(at)
                .ok_or(HedgeError::MissingPosition(at))?;
            gains += h * dx;
            at = tree.descend(at, &[dx]).expect("leaf path exists");
        }
        let slack = capital + gains - xi.eval(prefix)?;
        if slack < min_slack {
            min_slack = slack;
            worst_path = prefix.clone();
        }
        if slack <= SLACK_TOL {
            tight_count += 1;
            if tight_paths.len() < TIGHT_SAMPLE_CAP {
                tight_paths.push(prefix.clone());
            }
        }
    }
    Ok(SlackReport {
        min_slack,
        worst_path,
        tight_count,
        tight_paths,
    })
}

#[derive(Debug, Clone)]
pub struct DualityReport {
    /// Worst-case price under the set's family.
    pub primal: f64,
    /// Minimal superhedging capital (union support).
    pub dual: f64,
    /// `dual - primal`; zero (to tolerance) for the polytope family,
    /// nonnegative and reported for the symmetric family.
    pub gap: f64,
    pub worst_path: DiscretePath,
    pub tight_count: usize,
    pub tight_paths: Vec<DiscretePath>,
}

pub fn duality_report(xi: &Claim, set: &ScenarioSet) -> Result<DualityReport, HedgeError> {
    let (surface, _) = sublinear_expectation(xi, set)?;
    let primal = surface.value(set.tree().root());
    let sh = minimal_superhedge(xi, set)?;
    let slack = verify_superhedge(sh.capital, &sh.hedge, xi, set.tree())?;
    Ok(DualityReport {
        primal,
        dual: sh.capital,
        gap: sh.capital - primal,
        worst_path: slack.worst_path,
        tight_count: slack.tight_count,
        tight_paths: slack.tight_paths,
    })
}

/// Per-node martingale/compensator split of a value surface under a
/// symmetric two-point scenario: integrand `H = (Y(+u) - Y(-u)) / 2u` and
/// compensator increment `dK = Y(node) - E[Y(children)]`, so that
/// `dY = H dB - dK` holds along both charged edges.
#[derive(Debug, Clone)]
pub struct DoobMeyerParts {
    integrand: BTreeMap<NodeId, f64>,
    compensator: BTreeMap<NodeId, f64>,
}

impl DoobMeyerParts {
    pub fn integrand(&self, node: NodeId) -> Option<f64> {
        self.integrand.get(&node).copied()
    }

    pub fn compensator(&self, node: NodeId) -> Option<f64> {
        self.compensator.get(&node).copied()
    }

    pub fn integrands(&self) -> &BTreeMap<NodeId, f64> {
        &self.integrand
    }

    pub fn compensators(&self) -> &BTreeMap<NodeId, f64> {
        &self.compensator
    }

    pub fn max_compensator(&self) -> f64 {
        self.compensator
            .values()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn min_compensator(&self) -> f64 {
        self.compensator
            .values()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

fn symmetric_children(
    set: &ScenarioSet,
    node: NodeId,
    kernel: &Kernel,
) -> Result<(f64, NodeId, NodeId), HedgeError> {
    let u = kernel
        .is_symmetric_pair()
        .ok_or(HedgeError::NonTwoPointKernel(node))?;
    let (down_label, up_label) = (kernel.atoms()[0].0, kernel.atoms()[1].0);
    let down = set
        .tree()
        .descend(node, &[down_label])
        .ok_or(HedgeError::DanglingEdge {
            node,
            increment: down_label,
        })?;
    let up = set
        .tree()
        .descend(node, &[up_label])
        .ok_or(HedgeError::DanglingEdge {
            node,
            increment: up_label,
        })?;
    Ok((u, down, up))
}

/// Splits the surface under a two-point policy. Rejects any kernel that is
/// not a symmetric pair: without one-step completeness the integrand is not
/// determined by the two charged edges.
pub fn doob_meyer(
    surface: &ValueSurface,
    policy: &Policy,
    set: &ScenarioSet,
) -> Result<DoobMeyerParts, HedgeError> {
    let mut integrand = BTreeMap::new();
    let mut compensator = BTreeMap::new();
    for (&node, kernel) in policy.kernels() {
        let (u, down, up) = symmetric_children(set, node, kernel)?;
        let y_up = surface.value(up);
        let y_down = surface.value(down);
        integrand.insert(node, (y_up - y_down) / (2.0 * u));
        compensator.insert(node, surface.value(node) - 0.5 * (y_up + y_down));
    }
    Ok(DoobMeyerParts {
        integrand,
        compensator,
    })
}

/// Recovers the integrand from one-step covariations,
/// `H = E[dY dB] / E[(dB)^2]`; for symmetric two-point kernels this equals
/// the finite-difference slope of [`doob_meyer`] identically.
pub fn covariation_hedge(
    surface: &ValueSurface,
    policy: &Policy,
    set: &ScenarioSet,
) -> Result<Hedge, HedgeError> {
    let mut positions = BTreeMap::new();
    for (&node, kernel) in policy.kernels() {
        // same completeness requirement as the direct split
        let _ = symmetric_children(set, node, kernel)?;
        let y_here = surface.value(node);
        let mut num = 0.0;
        let mut den = 0.0;
        for &(x, p) in kernel.atoms() {
            let child = set
                .tree()
                .descend(node, &[x])
                .ok_or(HedgeError::DanglingEdge { node, increment: x })?;
            num += p * (surface.value(child) - y_here) * x;
            den += p * x * x;
        }
        positions.insert(node, num / den);
    }
    Ok(Hedge::new(positions))
}

#[derive(Debug, Clone)]
pub struct GainsBreach {
    pub path: DiscretePath,
    pub step: usize,
    pub gains: f64,
}

#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    /// Kernels inspected for the zero conditional-mean property (every
    /// member scenario factors through these node-wise choices).
    pub kernels_checked: usize,
    /// Worst `|H * kernel mean|`; martingale kernels force this to zero.
    pub max_conditional_mean: f64,
    /// Running minimum of the gains process over all reachable paths.
    pub min_gains: f64,
    pub floor: f64,
    pub breach: Option<GainsBreach>,
}

impl AdmissibilityReport {
    pub fn ok(&self) -> bool {
        self.max_conditional_mean <= EXACT_TOL && self.breach.is_none()
    }
}

/// Checks the two admissibility halves for a strategy: (a) the gains process
/// has zero one-step conditional mean under every member kernel choice (so
/// it is a martingale, in particular a supermartingale, under every member
/// scenario), and (b) the gains never fall below `floor` on any reachable
/// path. Violations come with witnesses.
pub fn admissibility_check(
    hedge: &Hedge,
    set: &ScenarioSet,
    floor: f64,
) -> Result<AdmissibilityReport, HedgeError> {
    let tree = set.tree();
    let mut kernels_checked = 0;
    let mut max_conditional_mean: f64 = 0.0;
    for id in tree.ids() {
        if tree.node(id).is_leaf() {
            continue;
        }
        let h = hedge.position(id).ok_or(HedgeError::MissingPosition(id))?;
        for kernel in set.kernels_at(id) {
            kernels_checked += 1;
            max_conditional_mean = max_conditional_mean.max((h * kernel.mean()).abs());
        }
    }

    let mut min_gains = f64::INFINITY;
    let mut breach: Option<GainsBreach> = None;
    for &leaf in tree.leaves() {
        let prefix = tree.node(leaf).prefix();
        let mut gains = 0.0;
        let mut at = tree.root();
        for (k, &dx) in prefix.increments().iter().enumerate() {
            let h = hedge.position(at).ok_or(HedgeError::MissingPosition(at))?;
            gains += h * dx;
            min_gains = min_gains.min(gains);
            if gains < floor - EXACT_TOL && breach.is_none() {
                breach = Some(GainsBreach {
                    path: prefix.clone(),
                    step: k + 1,
                    gains,
                });
            }
            at = tree.descend(at, &[dx]).expect("leaf path exists");
        }
    }
    Ok(AdmissibilityReport {
        kernels_checked,
        max_conditional_mean,
        min_gains,
        floor,
        breach,
    })
}

/// Node-wise comparison of the universal minimax hedge with the per-scenario
/// integrand of the symmetric family's surface under its argmax policy.
///
/// Where the argmax pair coincides with the envelope's supporting pair *and*
/// the two recursions agree on the children (within tolerance), the two
/// slopes are the same difference quotient and must match; elsewhere the gap
/// is reported, not asserted, because the surfaces themselves differ.
#[derive(Debug, Clone, Default)]
pub struct AggregationReport {
    pub matched_nodes: usize,
    pub max_matched_diff: f64,
    pub other_nodes: usize,
    pub max_other_diff: f64,
}

pub fn hedge_aggregation_report(
    xi: &Claim,
    set: &ScenarioSet,
) -> Result<AggregationReport, HedgeError> {
    assert!(
        set.family().is_two_point(),
        "aggregation compares against the symmetric family's integrand"
    );
    let tree = set.tree();
    let (surface, argmax) = sublinear_expectation(xi, set)?;
    let sh = minimal_superhedge(xi, set)?;
    let dm = doob_meyer(&surface, &argmax, set)?;
    let mut report = AggregationReport::default();
    for (&node, kernel) in argmax.kernels() {
        let u = kernel.is_symmetric_pair().expect("argmax kernels are symmetric");
        let h = sh.hedge.position(node).expect("hedge is total");
        let hp = dm.integrand(node).expect("split is total");
        let diff = (h - hp).abs();
        // recover the envelope's supporting pair from the requirement surface
        let support = set.support_at(node);
        let child_req: Vec<f64> = tree
            .node(node)
            .children()
            .iter()
            .map(|&(_, c)| sh.requirement.value(c))
            .collect();
        let (_, arg) = sup_polytope(&support, &child_req);
        let pair_matches = matches!(arg, ArgMax::Pair { neg, pos } if neg == -u && pos == u);
        let children_agree = tree
            .node(node)
            .children()
            .iter()
            .all(|&(_, c)| (sh.requirement.value(c) - surface.value(c)).abs() <= EXACT_TOL);
        if pair_matches && children_agree {
            report.matched_nodes += 1;
            report.max_matched_diff = report.max_matched_diff.max(diff);
        } else {
            report.other_nodes += 1;
            report.max_other_diff = report.max_other_diff.max(diff);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{build_claim, ClaimSpec};
    use crate::dp::supermartingale_check;
    use crate::lattice::TimeGrid;
    use crate::scenario::{enumerate_policies, symmetric_policy, KernelFamily, VolBand, VolRule};

    const TWO_POINT: KernelFamily = KernelFamily::TwoPointSymmetric { m: 2 };
    const POLYTOPE: KernelFamily = KernelFamily::MartingalePolytope { m: 2 };

    fn unit2(family: KernelFamily) -> ScenarioSet {
        let grid = TimeGrid::new(1, 1.0).unwrap();
        let rule = VolRule::Constant(VolBand::new(1.0, 4.0).unwrap());
        ScenarioSet::build(grid, rule, family).unwrap()
    }

    fn constant_set(steps: usize, family: KernelFamily) -> ScenarioSet {
        let grid = TimeGrid::new(steps, 1.0).unwrap();
        let rule = VolRule::Constant(VolBand::new(1.0, 4.0).unwrap());
        ScenarioSet::build(grid, rule, family).unwrap()
    }

    #[test]
    fn unit2_digital_hedge() {
        let set = unit2(POLYTOPE);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let sh = minimal_superhedge(&xi, &set).unwrap();
        assert!((sh.capital - 2.0 / 3.0).abs() <= EXACT_TOL);
        let h = sh.hedge.position(set.tree().root()).unwrap();
        assert!((h - 1.0 / 3.0).abs() <= EXACT_TOL);
        // domination with equality exactly at -2 and +1
        for (u, payoff) in [(-2.0, 0.0), (-1.0, 0.0), (1.0, 1.0), (2.0, 1.0)] {
            let wealth = sh.capital + h * u;
            assert!(wealth + EXACT_TOL >= payoff);
            if u == -2.0 || u == 1.0 {
                assert!((wealth - payoff).abs() <= EXACT_TOL);
            }
        }
    }

    #[test]
    fn replication_of_underlying_and_cash() {
        let set = unit2(TWO_POINT);
        let xi = build_claim(&ClaimSpec::Identity, set.grid()).unwrap();
        let sh = minimal_superhedge(&xi, &set).unwrap();
        assert!(sh.capital.abs() <= EXACT_TOL);
        assert!((sh.hedge.position(set.tree().root()).unwrap() - 1.0).abs() <= EXACT_TOL);

        let cash = build_claim(&ClaimSpec::Constant { value: 5.0 }, set.grid()).unwrap();
        let sh = minimal_superhedge(&cash, &set).unwrap();
        assert!((sh.capital - 5.0).abs() <= EXACT_TOL);
        assert!(sh.hedge.position(set.tree().root()).unwrap().abs() <= EXACT_TOL);
    }

    #[test]
    fn verify_flags_smaller_capital() {
        let set = unit2(POLYTOPE);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let sh = minimal_superhedge(&xi, &set).unwrap();
        let report = verify_superhedge(sh.capital, &sh.hedge, &xi, set.tree()).unwrap();
        assert!(report.min_slack >= -SLACK_TOL);
        assert!(report.tight_count >= 1);

        let short = verify_superhedge(sh.capital - 0.01, &sh.hedge, &xi, set.tree()).unwrap();
        assert!((short.min_slack + 0.01).abs() <= EXACT_TOL);
    }

    #[test]
    fn telescoping_slack_for_underlying() {
        let set = constant_set(2, TWO_POINT);
        let xi = build_claim(&ClaimSpec::Identity, set.grid()).unwrap();
        let mut positions = BTreeMap::new();
        for id in set.tree().ids() {
            if !set.tree().node(id).is_leaf() {
                positions.insert(id, 1.0);
            }
        }
        let report = verify_superhedge(0.0, &Hedge::new(positions), &xi, set.tree()).unwrap();
        assert!(report.min_slack.abs() <= EXACT_TOL);
        assert_eq!(report.tight_count, set.tree().leaves().len());
    }

    #[test]
    fn duality_examples() {
        let xi_spec = ClaimSpec::Digital { strike: 0.0 };
        let set = unit2(POLYTOPE);
        let xi = build_claim(&xi_spec, set.grid()).unwrap();
        let report = duality_report(&xi, &set).unwrap();
        assert!((report.primal - 2.0 / 3.0).abs() <= EXACT_TOL);
        assert!(report.gap.abs() <= SLACK_TOL);

        let set = unit2(TWO_POINT);
        let xi = build_claim(&xi_spec, set.grid()).unwrap();
        let report = duality_report(&xi, &set).unwrap();
        assert!((report.primal - 0.5).abs() <= EXACT_TOL);
        assert!((report.dual - 2.0 / 3.0).abs() <= EXACT_TOL);
        assert!((report.gap - 1.0 / 6.0).abs() <= EXACT_TOL);

        for family in [TWO_POINT, POLYTOPE] {
            let set = unit2(family);
            let call = build_claim(&ClaimSpec::Call { strike: 0.0 }, set.grid()).unwrap();
            let report = duality_report(&call, &set).unwrap();
            assert!((report.primal - 1.0).abs() <= EXACT_TOL);
            assert!(report.gap.abs() <= SLACK_TOL);
        }
    }

    #[test]
    fn doob_meyer_examples() {
        // argmax policy: compensator vanishes
        let set = constant_set(2, TWO_POINT);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let (surface, argmax) = sublinear_expectation(&xi, &set).unwrap();
        let dm = doob_meyer(&surface, &argmax, &set).unwrap();
        assert!(dm.max_compensator() <= SLACK_TOL);
        assert!(dm.min_compensator() >= -EXACT_TOL);

        // min-variance policy on the UNIT2 call: H = 1/2, dK = 1/2 at the root
        let set = unit2(TWO_POINT);
        let xi = build_claim(&ClaimSpec::Call { strike: 0.0 }, set.grid()).unwrap();
        let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
        let p = symmetric_policy(&set, 0);
        let dm = doob_meyer(&surface, &p, &set).unwrap();
        let root = set.tree().root();
        assert!((dm.integrand(root).unwrap() - 0.5).abs() <= EXACT_TOL);
        assert!((dm.compensator(root).unwrap() - 0.5).abs() <= EXACT_TOL);

        // linear claim: H = 1 and dK = 0 under any symmetric policy
        let set = constant_set(2, TWO_POINT);
        let xi = build_claim(&ClaimSpec::Identity, set.grid()).unwrap();
        let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
        for rank in [0, 1] {
            let dm = doob_meyer(&surface, &symmetric_policy(&set, rank), &set).unwrap();
            for (&node, &h) in dm.integrands() {
                assert!((h - 1.0).abs() <= EXACT_TOL);
                assert!(dm.compensator(node).unwrap().abs() <= EXACT_TOL);
            }
        }
    }

    #[test]
    fn doob_meyer_identity_on_both_edges() {
        let set = constant_set(2, TWO_POINT);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
        let p = symmetric_policy(&set, 1);
        let dm = doob_meyer(&surface, &p, &set).unwrap();
        for (&node, kernel) in p.kernels() {
            let h = dm.integrand(node).unwrap();
            let dk = dm.compensator(node).unwrap();
            for &(x, _) in kernel.atoms() {
                let child = set.tree().descend(node, &[x]).unwrap();
                let dy = surface.value(child) - surface.value(node);
                assert!((dy - (h * x - dk)).abs() <= EXACT_TOL);
            }
        }
    }

    #[test]
    fn doob_meyer_rejects_asymmetric_kernels() {
        let set = unit2(POLYTOPE);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let (surface, argmax) = sublinear_expectation(&xi, &set).unwrap();
        // the digital's argmax vertex kernel is the asymmetric (-2, 1) pair
        assert!(matches!(
            doob_meyer(&surface, &argmax, &set),
            Err(HedgeError::NonTwoPointKernel(_))
        ));
    }

    #[test]
    fn covariation_matches_direct_split() {
        let set = constant_set(2, TWO_POINT);
        for spec in [
            ClaimSpec::Digital { strike: 0.0 },
            ClaimSpec::Call { strike: 0.5 },
            ClaimSpec::RealizedVariance,
            ClaimSpec::Identity,
        ] {
            let xi = build_claim(&spec, set.grid()).unwrap();
            let (surface, argmax) = sublinear_expectation(&xi, &set).unwrap();
            for policy in [argmax, symmetric_policy(&set, 0), symmetric_policy(&set, 1)] {
                let dm = doob_meyer(&surface, &policy, &set).unwrap();
                let cov = covariation_hedge(&surface, &policy, &set).unwrap();
                for (&node, &h) in cov.positions() {
                    assert!(
                        (h - dm.integrand(node).unwrap()).abs() <= EXACT_TOL,
                        "{spec:?} at {node:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn covariation_unit2_value() {
        // UNIT2 digital under the min-variance policy: H = 1/2.
        let set = unit2(TWO_POINT);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
        let cov = covariation_hedge(&surface, &symmetric_policy(&set, 0), &set).unwrap();
        assert!((cov.position(set.tree().root()).unwrap() - 0.5).abs() <= EXACT_TOL);

        let xi = build_claim(&ClaimSpec::Identity, set.grid()).unwrap();
        let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
        let cov = covariation_hedge(&surface, &symmetric_policy(&set, 1), &set).unwrap();
        assert!((cov.position(set.tree().root()).unwrap() - 1.0).abs() <= EXACT_TOL);
    }

    #[test]
    fn admissibility_of_minimal_hedge() {
        let set = constant_set(2, POLYTOPE);
        let xi = build_claim(&ClaimSpec::Digital { strike: -0.5 }, set.grid()).unwrap();
        let sh = minimal_superhedge(&xi, &set).unwrap();
        let max_abs_payoff = 1.0;
        let floor = -(sh.capital + max_abs_payoff);
        let report = admissibility_check(&sh.hedge, &set, floor).unwrap();
        assert!(report.ok(), "{report:?}");
        assert!(report.max_conditional_mean <= EXACT_TOL);
    }

    #[test]
    fn doubling_strategy_breaches_tight_floor() {
        // Position doubles after every down-move on a binomial tree: still a
        // conditional martingale, but the gains dive below a tight floor.
        let grid = TimeGrid::new(3, 1.0).unwrap();
        let rule = VolRule::Constant(VolBand::new(1.0, 1.0).unwrap());
        let set = ScenarioSet::build(grid, rule, KernelFamily::TwoPointSymmetric { m: 1 }).unwrap();
        let mut positions = BTreeMap::new();
        for id in set.tree().ids() {
            let node = set.tree().node(id);
            if node.is_leaf() {
                continue;
            }
            let downs = node
                .prefix()
                .increments()
                .iter()
                .filter(|&&dx| dx < 0.0)
                .count();
            positions.insert(id, (1u32 << downs) as f64);
        }
        let hedge = Hedge::new(positions);
        let report = admissibility_check(&hedge, &set, -5.0).unwrap();
        assert!(report.max_conditional_mean <= EXACT_TOL, "half (a) passes");
        let breach = report.breach.expect("tight floor must be breached");
        assert_eq!(breach.path.increments()[..3], [-1.0, -1.0, -1.0]);
        assert_eq!(breach.step, 3);
        assert!((breach.gains + 7.0).abs() <= EXACT_TOL);
        assert!((report.min_gains + 7.0).abs() <= EXACT_TOL);

        // a generous floor passes
        assert!(admissibility_check(&hedge, &set, -8.0).unwrap().ok());
    }

    #[test]
    fn minimal_hedge_passes_against_all_member_scenarios() {
        // ordering: symmetric primal <= dual capital, and the hedge
        // superreplicates pathwise whatever the member scenario
        for family in [TWO_POINT, POLYTOPE] {
            let set = constant_set(2, family);
            for spec in [
                ClaimSpec::Digital { strike: 0.0 },
                ClaimSpec::NegAbs,
                ClaimSpec::RealizedVariance,
            ] {
                let xi = build_claim(&spec, set.grid()).unwrap();
                let (surface, _) = sublinear_expectation(&xi, &set).unwrap();
                let sh = minimal_superhedge(&xi, &set).unwrap();
                assert!(surface.value(set.tree().root()) <= sh.capital + EXACT_TOL);
                let report = verify_superhedge(sh.capital, &sh.hedge, &xi, set.tree()).unwrap();
                assert!(report.min_slack >= -SLACK_TOL);
                assert!(report.tight_count >= 1);
                // capital requirement itself is a supermartingale under the
                // enumerated member scenarios
                for policy in enumerate_policies(&set, 1 << 12).unwrap() {
                    let stats = supermartingale_check(&sh.requirement, &policy, &set).unwrap();
                    assert!(stats.min_slack >= -EXACT_TOL);
                }
            }
        }
    }

    #[test]
    fn aggregation_exact_for_strictly_convex_and_concave_claims() {
        let set = constant_set(2, TWO_POINT);
        for spec in [ClaimSpec::Power { exponent: 2 }, ClaimSpec::NegAbs] {
            let xi = build_claim(&spec, set.grid()).unwrap();
            let report = hedge_aggregation_report(&xi, &set).unwrap();
            assert_eq!(report.other_nodes, 0, "{spec:?}: {report:?}");
            assert!(report.max_matched_diff <= EXACT_TOL);
        }
    }

    #[test]
    fn aggregation_reports_divergence_for_digitals() {
        // where the two recursions part ways the slopes genuinely differ;
        // that is reported, not asserted away
        let set = constant_set(2, TWO_POINT);
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, set.grid()).unwrap();
        let report = hedge_aggregation_report(&xi, &set).unwrap();
        assert!(report.matched_nodes + report.other_nodes == 5);
        assert!(report.max_matched_diff <= EXACT_TOL);
        assert!(report.other_nodes > 0);
    }
}
