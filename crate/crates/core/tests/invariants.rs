//! Cross-module structural properties of the worst-case pricing functional:
//! the sublinear-expectation axioms at the root, the ordering between the
//! two kernel families with equality on convex and concave terminal
//! payoffs, and argmax variance selection for strictly convex claims.

use volsup_core::claims::{build_claim, Claim, ClaimSpec};
use volsup_core::dp::sublinear_expectation;
use volsup_core::lattice::TimeGrid;
use volsup_core::scenario::{KernelFamily, ScenarioSet, VolBand, VolRule};
use volsup_core::EXACT_TOL;

fn instances(family_m: impl Fn(usize) -> KernelFamily) -> Vec<ScenarioSet> {
    let mut out = Vec::new();
    let constant = VolRule::Constant(VolBand::new(1.0, 4.0).unwrap());
    let skewed = VolRule::Constant(VolBand::new(0.5, 2.5).unwrap());
    let level = VolRule::LevelScaled {
        threshold: 1.0,
        inner: VolBand::new(1.0, 4.0).unwrap(),
        outer: VolBand::new(2.0, 3.0).unwrap(),
    };
    for (steps, dt) in [(1usize, 1.0), (2, 0.5), (3, 0.25)] {
        let grid = TimeGrid::new(steps, dt).unwrap();
        for (rule, m) in [(&constant, 2), (&skewed, 3), (&level, 2)] {
            out.push(ScenarioSet::build(grid, rule.clone(), family_m(m)).unwrap());
        }
    }
    out
}

fn probe_specs() -> Vec<ClaimSpec> {
    vec![
        ClaimSpec::Digital { strike: 0.3 },
        ClaimSpec::Call { strike: -0.5 },
        ClaimSpec::Put { strike: 0.5 },
        ClaimSpec::Power { exponent: 2 },
        ClaimSpec::RealizedVariance,
        ClaimSpec::NegAbs,
        ClaimSpec::Affine {
            scale: -1.5,
            inner: Box::new(ClaimSpec::Call { strike: 0.0 }),
            shift: 0.5,
        },
        ClaimSpec::Min {
            left: Box::new(ClaimSpec::Call { strike: 0.0 }),
            right: Box::new(ClaimSpec::Constant { value: 1.0 }),
        },
    ]
}

fn price(xi: &Claim, set: &ScenarioSet) -> f64 {
    let (surface, _) = sublinear_expectation(xi, set).unwrap();
    surface.value(set.tree().root())
}

#[test]
fn root_functional_satisfies_sublinearity_axioms() {
    for set in instances(|m| KernelFamily::MartingalePolytope { m })
        .into_iter()
        .chain(instances(|m| KernelFamily::TwoPointSymmetric { m }))
    {
        let specs = probe_specs();
        for (i, spec) in specs.iter().enumerate() {
            let xi = build_claim(spec, set.grid()).unwrap();
            let p_xi = price(&xi, &set);

            // monotonicity: eta = max(xi, other) dominates xi pointwise
            let other = &specs[(i + 3) % specs.len()];
            let eta_spec = ClaimSpec::Max {
                left: Box::new(spec.clone()),
                right: Box::new(other.clone()),
            };
            let eta = build_claim(&eta_spec, set.grid()).unwrap();
            assert!(price(&eta, &set) >= p_xi - EXACT_TOL);

            // cash invariance
            for c in [-2.0, 0.75] {
                let shifted_spec = ClaimSpec::Affine {
                    scale: 1.0,
                    inner: Box::new(spec.clone()),
                    shift: c,
                };
                let shifted = build_claim(&shifted_spec, set.grid()).unwrap();
                assert!((price(&shifted, &set) - (p_xi + c)).abs() <= EXACT_TOL);
            }

            // positive homogeneity
            for lambda in [0.0, 0.5, 3.0] {
                let scaled_spec = ClaimSpec::Affine {
                    scale: lambda,
                    inner: Box::new(spec.clone()),
                    shift: 0.0,
                };
                let scaled = build_claim(&scaled_spec, set.grid()).unwrap();
                assert!((price(&scaled, &set) - lambda * p_xi).abs() <= EXACT_TOL);
            }

            // subadditivity against every other probe
            let xi2 = build_claim(other, set.grid()).unwrap();
            let (a, b) = (xi.clone(), xi2.clone());
            let sum = Claim::from_fn(xi.steps(), false, move |path| {
                a.eval(path).unwrap() + b.eval(path).unwrap()
            });
            assert!(price(&sum, &set) <= p_xi + price(&xi2, &set) + EXACT_TOL);
        }
    }
}

#[test]
fn polytope_dominates_two_point_with_equality_on_convex_and_concave() {
    // Symmetric pairs are polytope vertices, so the convexified price
    // dominates node by node, whatever the rule. Equality for one-sided
    // curvature needs the backward recursion to preserve that curvature,
    // which holds when the support is the same at every level (constant
    // bands): both families then reduce to the widest symmetric chord.
    let polytope_sets = instances(|m| KernelFamily::MartingalePolytope { m });
    let two_point_sets = instances(|m| KernelFamily::TwoPointSymmetric { m });
    let convex = [
        ClaimSpec::Call { strike: 0.25 },
        ClaimSpec::Put { strike: -0.25 },
        ClaimSpec::Power { exponent: 2 },
        ClaimSpec::Power { exponent: 4 },
    ];
    let concave = [
        ClaimSpec::NegAbs,
        ClaimSpec::Affine {
            scale: -1.0,
            inner: Box::new(ClaimSpec::Call { strike: 0.0 }),
            shift: 2.0,
        },
        ClaimSpec::Min {
            left: Box::new(ClaimSpec::Identity),
            right: Box::new(ClaimSpec::Constant { value: 0.5 }),
        },
    ];
    for (poly, two) in polytope_sets.iter().zip(&two_point_sets) {
        for spec in probe_specs() {
            let xi_p = build_claim(&spec, poly.grid()).unwrap();
            let xi_t = build_claim(&spec, two.grid()).unwrap();
            assert!(
                price(&xi_t, two) <= price(&xi_p, poly) + EXACT_TOL,
                "{spec:?}: symmetric family exceeded the convexified one"
            );
        }
        if !matches!(poly.rule(), VolRule::Constant(_)) {
            continue;
        }
        for spec in convex.iter().chain(&concave) {
            let xi_p = build_claim(spec, poly.grid()).unwrap();
            let xi_t = build_claim(spec, two.grid()).unwrap();
            assert!(
                (price(&xi_t, two) - price(&xi_p, poly)).abs() <= EXACT_TOL,
                "{spec:?}: families must agree on one-sided curvature"
            );
        }
    }
}

#[test]
fn level_scaled_bands_genuinely_separate_the_families() {
    // With a level-dependent band the continuation value is not convex in
    // the level even for a convex payoff, and the best symmetric pair falls
    // strictly short of the concave envelope. Pinning a concrete instance
    // documents that the constant-band restriction above is necessary.
    let grid = TimeGrid::new(2, 0.5).unwrap();
    let rule = VolRule::LevelScaled {
        threshold: 1.0,
        inner: VolBand::new(1.0, 4.0).unwrap(),
        outer: VolBand::new(2.0, 3.0).unwrap(),
    };
    let two = ScenarioSet::build(grid, rule.clone(), KernelFamily::TwoPointSymmetric { m: 2 })
        .unwrap();
    let poly = ScenarioSet::build(grid, rule, KernelFamily::MartingalePolytope { m: 2 }).unwrap();
    let spec = ClaimSpec::Call { strike: 0.25 };
    let gap = price(&build_claim(&spec, poly.grid()).unwrap(), &poly)
        - price(&build_claim(&spec, two.grid()).unwrap(), &two);
    assert!(gap > 1e-4, "expected a real gap, got {gap}");
}

#[test]
fn strictly_convex_claims_select_the_top_variance_everywhere() {
    // For strictly convex terminal payoffs the symmetric-family argmax picks
    // the largest variance at every node; weakly convex claims can tie on
    // flat regions, where the deterministic tie rule prefers the smallest.
    let strictly_convex = [
        ClaimSpec::Power { exponent: 2 },
        ClaimSpec::Affine {
            scale: 0.5,
            inner: Box::new(ClaimSpec::Power { exponent: 2 }),
            shift: -1.0,
        },
    ];
    for set in instances(|m| KernelFamily::TwoPointSymmetric { m }) {
        for spec in &strictly_convex {
            let xi = build_claim(spec, set.grid()).unwrap();
            let (_, argmax) = sublinear_expectation(&xi, &set).unwrap();
            for (&node, kernel) in argmax.kernels() {
                let support = set.support_at(node);
                let top = *support.last().unwrap();
                assert_eq!(
                    kernel.is_symmetric_pair(),
                    Some(top),
                    "{spec:?} at {node:?}"
                );
            }
        }
    }
}
