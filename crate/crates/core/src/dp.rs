//! Conditional worst-case expectation by backward recursion, plus the
//! independent oracles: brute-force enumeration over scenarios, a recombining
//! fine lattice for terminal payoffs, and an explicit finite-difference
//! solver for the worst-case heat equation.
//!
//! The one-step optimization [`node_sup`] is shared by everything: the
//! symmetric family maximizes `(f(+u) + f(-u))/2` over the band's variances,
//! the polytope family evaluates the upper concave envelope of the child
//! values at zero, which is the sup over all zero-mean kernels on the
//! support. Tie-breaking is deterministic (smallest variance, lexicographic
//! pair) so argmax descriptors are reproducible.

use thiserror::Error;

use crate::claims::{shift_claim, Claim, ClaimError};
use crate::lattice::{NodeId, StoppingRule, TimeGrid};
use crate::scenario::{
    band_variances, enumerate_policies, enumerate_policies_at, expect_under, measure_to,
    support_points, Kernel, KernelFamily, ModelError, Policy, ScenarioSet, VolBand,
};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("children keys do not match the node support")]
    KeyMismatch,
    #[error("sigma must stop no later than tau on every path")]
    StoppingOrder,
    #[error("explicit scheme unstable: dt * hi / h^2 = {ratio}, needs <= 1")]
    UnstableScheme { ratio: f64 },
    #[error("pde grid needs positive steps and a radius of at least two space steps")]
    BadPdeGrid,
    #[error("state lattice needs {entries} entries, cap is {cap}")]
    LatticeTooLarge { entries: u128, cap: u128 },
    #[error("policy kernel charges increment {increment} with no matching child at {node:?}")]
    DanglingEdge { node: NodeId, increment: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Claim(#[from] ClaimError),
}

/// Which one-step kernel attains the node supremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArgMax {
    /// Symmetric family: the chosen variance and the matching increment.
    Variance { variance: f64, up: f64 },
    /// Polytope family: the supporting sign-split pair.
    Pair { neg: f64, pos: f64 },
}

impl ArgMax {
    pub fn kernel(&self) -> Kernel {
        match self {
            ArgMax::Variance { up, .. } => Kernel::symmetric(*up),
            ArgMax::Pair { neg, pos } => {
                Kernel::two_atom(*neg, *pos).expect("argmax pairs are sign-split")
            }
        }
    }
}

#[inline]
pub(crate) fn sup_two_point(support: &[f64], values: &[f64], variances: &[f64]) -> (f64, ArgMax) {
    let k = support.len() / 2;
    let mut best = f64::NEG_INFINITY;
    let mut arg = ArgMax::Variance {
        variance: variances[0],
        up: support[k],
    };
    for i in 0..k {
        let cand = 0.5 * (values[k - 1 - i] + values[k + i]);
        if cand > best {
            best = cand;
            arg = ArgMax::Variance {
                variance: variances[i],
                up: support[k + i],
            };
        }
    }
    (best, arg)
}

#[inline]
pub(crate) fn sup_polytope(support: &[f64], values: &[f64]) -> (f64, ArgMax) {
    let k = support.len() / 2;
    let mut best = f64::NEG_INFINITY;
    let mut arg = ArgMax::Pair {
        neg: support[k - 1],
        pos: support[k],
    };
    for i in 0..k {
        let a = support[k - 1 - i];
        let fa = values[k - 1 - i];
        for j in 0..k {
            let b = support[k + j];
            let fb = values[k + j];
            let cand = (b * fa - a * fb) / (b - a);
            if cand > best {
                best = cand;
                arg = ArgMax::Pair { neg: a, pos: b };
            }
        }
    }
    (best, arg)
}

/// One-step worst-case value over the node's kernels, given the child values
/// keyed by the support (ascending). Returns the value and which kernel
/// attains it; ties go to the smallest variance, respectively the
/// lexicographically smallest `(|a|, b)` pair.
pub fn node_sup(
    support: &[f64],
    values: &[f64],
    family: KernelFamily,
    band: &VolBand,
    dt: f64,
) -> Result<(f64, ArgMax), DpError> {
    let expected = support_points(band, dt, family.m())?;
    if support != expected.as_slice() || values.len() != support.len() {
        return Err(DpError::KeyMismatch);
    }
    Ok(match family {
        KernelFamily::TwoPointSymmetric { m } => {
            let variances = band_variances(band, m)?;
            sup_two_point(support, values, &variances)
        }
        KernelFamily::MartingalePolytope { .. } => sup_polytope(support, values),
    })
}

/// Node-indexed values of the conditional worst-case expectation.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    values: Vec<f64>,
}

impl ValueSurface {
    pub(crate) fn from_values(values: Vec<f64>) -> Self {
        ValueSurface { values }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Backward recursion for the chosen family: leaves carry the payoff,
/// interior nodes the one-step supremum of their children. Returns the full
/// surface (its root value is the price) and the argmax policy assembled
/// from the per-node maximizing kernels.
pub fn sublinear_expectation(
    xi: &Claim,
    set: &ScenarioSet,
) -> Result<(ValueSurface, Policy), DpError> {
    let tree = set.tree();
    let family = set.family();
    let mut values = vec![f64::NAN; tree.len()];
    let mut kernels = std::collections::BTreeMap::new();
    let mut child_values = Vec::new();
    for raw in (0..tree.len()).rev() {
        let id = NodeId(raw);
        let node = tree.node(id);
        if node.is_leaf() {
            values[raw] = xi.eval(node.prefix())?;
            continue;
        }
        let support = set.support_at(id);
        if node.children().len() != support.len() {
            return Err(DpError::KeyMismatch);
        }
        child_values.clear();
        child_values.extend(node.children().iter().map(|&(_, c)| values[c.0]));
        let (value, arg) = match family {
            KernelFamily::TwoPointSymmetric { .. } => {
                let variances = band_variances(&set.band_at(id), family.m())?;
                sup_two_point(&support, &child_values, &variances)
            }
            KernelFamily::MartingalePolytope { .. } => sup_polytope(&support, &child_values),
        };
        values[raw] = value;
        kernels.insert(id, arg.kernel());
    }
    Ok((
        ValueSurface { values },
        Policy::new(tree.root(), kernels),
    ))
}

/// Independent price oracle: maximizes the expected payoff over every
/// enumerated policy. For the polytope family the enumerated vertex policies
/// suffice, because the objective is affine in each node's kernel and a
/// multilinear function on a product of polytopes peaks at a vertex profile.
pub fn brute_force_price(
    xi: &Claim,
    set: &ScenarioSet,
    cap: u128,
) -> Result<(f64, Policy), DpError> {
    let tree = set.tree();
    let mut payoffs = vec![f64::NAN; tree.len()];
    for &leaf in tree.leaves() {
        payoffs[leaf.0] = xi.eval(tree.node(leaf).prefix())?;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_policy = None;
    for policy in enumerate_policies(set, cap)? {
        let value = expect_under(set, &policy, |leaf| payoffs[leaf.0]);
        if value > best {
            best = value;
            best_policy = Some(policy);
        }
    }
    Ok((best, best_policy.expect("at least one policy exists")))
}

/// Re-runs the backward recursion treating the tau-stop nodes as leaves
/// carrying their surface values, then reports the worst absolute
/// disagreement with the direct surface at the sigma-stop nodes. This is the
/// two-stage dynamic-programming composition; it must vanish.
pub fn check_tower(
    xi: &Claim,
    set: &ScenarioSet,
    sigma: &StoppingRule,
    tau: &StoppingRule,
) -> Result<f64, DpError> {
    let tree = set.tree();
    if !sigma.precedes(tau, tree) {
        return Err(DpError::StoppingOrder);
    }
    let (surface, _) = sublinear_expectation(xi, set)?;
    let family = set.family();

    let mut relevant = vec![false; tree.len()];
    relevant[tree.root().0] = true;
    for raw in 0..tree.len() {
        let id = NodeId(raw);
        if relevant[raw] && !tau.stops(id) {
            for &(_, child) in tree.node(id).children() {
                relevant[child.0] = true;
            }
        }
    }
    let mut restarted = vec![f64::NAN; tree.len()];
    let mut child_values = Vec::new();
    for raw in (0..tree.len()).rev() {
        if !relevant[raw] {
            continue;
        }
        let id = NodeId(raw);
        if tau.stops(id) {
            restarted[raw] = surface.value(id);
            continue;
        }
        let node = tree.node(id);
        let support = set.support_at(id);
        child_values.clear();
        child_values.extend(node.children().iter().map(|&(_, c)| restarted[c.0]));
        let (value, _) = match family {
            KernelFamily::TwoPointSymmetric { .. } => {
                let variances = band_variances(&set.band_at(id), family.m())?;
                sup_two_point(&support, &child_values, &variances)
            }
            KernelFamily::MartingalePolytope { .. } => sup_polytope(&support, &child_values),
        };
        restarted[raw] = value;
    }

    let mut worst: f64 = 0.0;
    for node in sigma.first_stop_nodes(tree) {
        worst = worst.max((restarted[node.0] - surface.value(node)).abs());
    }
    Ok(worst)
}

/// At every sigma-stop node charged by `policy`, compares the surface value
/// against the supremum, over all scenarios agreeing with `policy` before
/// sigma, of the conditional expected payoff. The continuation scenarios
/// range over the whole subtree, so the supremum is a brute-force sweep of
/// the shifted claim; it is attained because the set is finite.
pub fn esssup_form(
    xi: &Claim,
    set: &ScenarioSet,
    policy: &Policy,
    sigma: &StoppingRule,
    cap: u128,
) -> Result<f64, DpError> {
    let tree = set.tree();
    let (surface, _) = sublinear_expectation(xi, set)?;
    let mut worst: f64 = 0.0;
    for node in sigma.first_stop_nodes(tree) {
        if measure_to(set, policy, node) == 0.0 {
            continue;
        }
        let here = tree.node(node);
        let shifted = shift_claim(xi, here.step(), here.prefix())?;
        let cut = here.step();
        let mut best = f64::NEG_INFINITY;
        for continuation in enumerate_policies_at(set, node, cap)? {
            let value = expect_under(set, &continuation, |leaf| {
                shifted.eval_raw(&tree.node(leaf).prefix().tail_from(cut))
            });
            best = best.max(value);
        }
        worst = worst.max((surface.value(node) - best).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy)]
pub struct SlackStats {
    pub min_slack: f64,
    pub min_node: NodeId,
    pub max_slack: f64,
    pub max_node: NodeId,
}

/// One-step supermartingale slacks `Y(node) - E_p[Y(children)]` of a surface
/// under a policy. Nonnegative slack everywhere (to tolerance) is the
/// supermartingale property; vanishing slack means the policy attains the
/// supremum at that node.
pub fn supermartingale_check(
    surface: &ValueSurface,
    policy: &Policy,
    set: &ScenarioSet,
) -> Result<SlackStats, DpError> {
    let tree = set.tree();
    let mut stats = SlackStats {
        min_slack: f64::INFINITY,
        min_node: policy.root(),
        max_slack: f64::NEG_INFINITY,
        max_node: policy.root(),
    };
    let mut any = false;
    for (&node, kernel) in policy.kernels() {
        let mut expected = 0.0;
        for &(x, p) in kernel.atoms() {
            let child = tree
                .descend(node, &[x])
                .ok_or(DpError::DanglingEdge { node, increment: x })?;
            expected += p * surface.value(child);
        }
        let slack = surface.value(node) - expected;
        any = true;
        if slack < stats.min_slack {
            stats.min_slack = slack;
            stats.min_node = node;
        }
        if slack > stats.max_slack {
            stats.max_slack = slack;
            stats.max_node = node;
        }
    }
    if !any {
        stats.min_slack = 0.0;
        stats.max_slack = 0.0;
    }
    Ok(stats)
}

const LATTICE_ENTRY_CAP: u128 = 50_000_000;

/// Worst-case price of a terminal-value payoff under a constant band, on the
/// recombining state lattice. States after `k` steps are integer combinations
/// of the support increments with l1-norm at most `k`; values depend on the
/// state only, so horizons far beyond what the path tree can hold (hundreds
/// of steps) stay tractable. Same one-step supremum as the tree recursion.
pub fn lattice_price<F: Fn(f64) -> f64>(
    payoff: F,
    band: &VolBand,
    family: KernelFamily,
    grid: &TimeGrid,
) -> Result<f64, DpError> {
    let m = family.m();
    let variances = band_variances(band, m)?;
    let support = support_points(band, grid.dt(), m)?;
    let k = variances.len();
    let n = grid.steps();
    let dim = 2 * n + 1;
    let entries = (dim as u128).saturating_pow(k as u32);
    if entries > LATTICE_ENTRY_CAP {
        return Err(DpError::LatticeTooLarge {
            entries,
            cap: LATTICE_ENTRY_CAP,
        });
    }
    let total = entries as usize;
    let mut strides = vec![1usize; k];
    for i in (0..k.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dim;
    }
    let us: Vec<f64> = support[k..].to_vec();

    // visits every state with l1-norm <= radius, passing its flat index and
    // its value x = sum_i c_i * u_i
    #[allow(clippy::too_many_arguments)]
    fn visit<F: FnMut(usize, f64)>(
        axis: usize,
        rem: i64,
        idx: usize,
        x: f64,
        n: i64,
        us: &[f64],
        strides: &[usize],
        f: &mut F,
    ) {
        if axis == us.len() {
            f(idx, x);
            return;
        }
        for c in -rem..=rem {
            visit(
                axis + 1,
                rem - c.abs(),
                idx + (c + n) as usize * strides[axis],
                x + c as f64 * us[axis],
                n,
                us,
                strides,
                f,
            );
        }
    }

    let mut next = vec![0.0f64; total];
    visit(0, n as i64, 0, 0.0, n as i64, &us, &strides, &mut |idx, x| {
        next[idx] = payoff(x);
    });
    let mut cur = vec![0.0f64; total];
    let mut child_values = vec![0.0f64; 2 * k];
    for step in (0..n).rev() {
        visit(
            0,
            step as i64,
            0,
            0.0,
            n as i64,
            &us,
            &strides,
            &mut |idx, _| {
                for i in 0..k {
                    child_values[i] = next[idx - strides[k - 1 - i]];
                    child_values[k + i] = next[idx + strides[i]];
                }
                // child_values[..k] is ordered by descending |a| to match the
                // ascending support layout
                let (value, _) = match family {
                    KernelFamily::TwoPointSymmetric { .. } => {
                        sup_two_point(&support, &child_values, &variances)
                    }
                    KernelFamily::MartingalePolytope { .. } => {
                        sup_polytope(&support, &child_values)
                    }
                };
                cur[idx] = value;
            },
        );
        std::mem::swap(&mut cur, &mut next);
    }
    let origin: usize = strides.iter().map(|s| s * n).sum();
    Ok(next[origin])
}

/// Explicit finite-difference grid for the worst-case heat equation; the
/// scheme is monotone iff `time_step * hi / space_step^2 <= 1`.
#[derive(Debug, Clone, Copy)]
pub struct PdeGrid {
    space_step: f64,
    radius: f64,
    time_step: f64,
    band: VolBand,
}

impl PdeGrid {
    pub fn new(
        space_step: f64,
        radius: f64,
        time_step: f64,
        band: VolBand,
    ) -> Result<Self, DpError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(space_step) || !positive(time_step) || radius < 2.0 * space_step {
            return Err(DpError::BadPdeGrid);
        }
        let ratio = time_step * band.hi() / (space_step * space_step);
        if ratio > 1.0 {
            return Err(DpError::UnstableScheme { ratio });
        }
        Ok(PdeGrid {
            space_step,
            radius,
            time_step,
            band,
        })
    }

    pub fn band(&self) -> &VolBand {
        &self.band
    }
}

/// Value at the space-time origin of the backward equation
/// `u_t + sup_{v in band} (v/2) u_xx = 0` with terminal data `payoff`,
/// by the explicit monotone scheme with constant extrapolation at the space
/// boundary. The sup over the band of `v*q` sits at an endpoint for every
/// real `q`, so only the two endpoints enter the scheme.
pub fn barenblatt_fd<F: Fn(f64) -> f64>(
    payoff: F,
    horizon: f64,
    grid: &PdeGrid,
) -> Result<f64, DpError> {
    let h = grid.space_step;
    let half = (grid.radius / h).floor() as usize;
    if half < 2 {
        return Err(DpError::BadPdeGrid);
    }
    let points = 2 * half + 1;
    let mut u: Vec<f64> = (0..points)
        .map(|j| payoff((j as f64 - half as f64) * h))
        .collect();
    if horizon <= 0.0 {
        return Ok(u[half]);
    }
    let steps = (horizon / grid.time_step).ceil() as usize;
    let dt = horizon / steps as f64;
    let (lo, hi) = (grid.band.lo(), grid.band.hi());
    let inv_h2 = 1.0 / (h * h);
    let mut next = vec![0.0f64; points];
    for _ in 0..steps {
        for j in 0..points {
            let left = u[j.saturating_sub(1)];
            let right = u[(j + 1).min(points - 1)];
            let q = (right - 2.0 * u[j] + left) * inv_h2;
            let gen = 0.5 * if q >= 0.0 { hi * q } else { lo * q };
            next[j] = u[j] + dt * gen;
        }
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u[half])
}
