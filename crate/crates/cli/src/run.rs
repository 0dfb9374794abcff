//! Mode dispatch: builds the scenario set from the validated config, runs
//! the requested computation and assembles the report. Cap refusals are kept
//! apart from invariant failures so the process can exit with the documented
//! code for each.

use std::fs;
use std::io::Write;
use std::time::Instant;

use serde_json::json;

use volsup_core::claims::{build_claim, Claim};
use volsup_core::dp::{
    barenblatt_fd, brute_force_price, lattice_price, sublinear_expectation,
    supermartingale_check, DpError, PdeGrid,
};
use volsup_core::lattice::{DiscretePath, NodeId, TimeGrid};
use volsup_core::montecarlo::{
    lower_bound_report, simulate_price, MatrixPolicy, McPath, VolMatrix,
};
use volsup_core::scenario::{
    check_closure, policy_count, ClosureOptions, KernelFamily, ModelError, ScenarioSet, VolBand,
    VolRule,
};
use volsup_core::superhedge::{doob_meyer, duality_report, minimal_superhedge, verify_superhedge};
use volsup_core::{EXACT_TOL, SLACK_TOL};

use crate::config::{FamilyTag, McPolicyConfig, Mode, RunConfig};
use crate::report::RunReport;

#[derive(Debug)]
pub enum RunError {
    /// An enumeration or lattice cap was exceeded; exit code 2.
    Cap(String),
    /// Anything else that prevented producing a report; exit code 3.
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Cap(msg) => write!(f, "cap refusal: {msg}"),
            RunError::Failed(msg) => write!(f, "run failed: {msg}"),
        }
    }
}

fn classify_model(e: ModelError) -> RunError {
    match e {
        ModelError::CapExceeded { .. } => RunError::Cap(e.to_string()),
        ModelError::Lattice(volsup_core::lattice::LatticeError::TreeTooLarge { .. }) => {
            RunError::Cap(e.to_string())
        }
        other => RunError::Failed(other.to_string()),
    }
}

fn classify_dp(e: DpError) -> RunError {
    match e {
        DpError::Model(m) => classify_model(m),
        DpError::LatticeTooLarge { .. } => RunError::Cap(e.to_string()),
        other => RunError::Failed(other.to_string()),
    }
}

fn family_of(config: &RunConfig) -> KernelFamily {
    match config.family.tag {
        FamilyTag::TwoPoint => KernelFamily::TwoPointSymmetric { m: config.family.m },
        FamilyTag::Polytope => KernelFamily::MartingalePolytope { m: config.family.m },
    }
}

fn build_set(config: &RunConfig) -> Result<(ScenarioSet, Claim), RunError> {
    let grid = TimeGrid::new(config.grid.steps, config.grid.dt)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let set = ScenarioSet::build(grid, config.band.clone(), family_of(config))
        .map_err(classify_model)?;
    let claim =
        build_claim(&config.claim, set.grid()).map_err(|e| RunError::Failed(e.to_string()))?;
    Ok((set, claim))
}

fn constant_band(config: &RunConfig) -> VolBand {
    match &config.band {
        VolRule::Constant(band) => *band,
        VolRule::LevelScaled { .. } => unreachable!("validation requires a constant band here"),
    }
}

fn write_file(path: &str, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents)
        .map_err(|e| RunError::Failed(format!("cannot write {path}: {e}")))
}

fn surface_csv(set: &ScenarioSet, surface: &volsup_core::dp::ValueSurface) -> String {
    let mut out = String::from("node,step,value,y\n");
    for id in set.tree().ids() {
        let node = set.tree().node(id);
        out.push_str(&format!(
            "{},{},{},{}\n",
            id.0,
            node.step(),
            node.value(),
            surface.value(id)
        ));
    }
    out
}

fn hedge_csv(
    set: &ScenarioSet,
    hedge: &volsup_core::superhedge::Hedge,
    compensator: Option<&std::collections::BTreeMap<NodeId, f64>>,
) -> String {
    let mut out = String::from("node,step,h,delta_k\n");
    for (&id, &h) in hedge.positions() {
        let node = set.tree().node(id);
        let dk = compensator
            .and_then(|c| c.get(&id))
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", id.0, node.step(), h, dk));
    }
    out
}

fn path_json(path: &DiscretePath) -> serde_json::Value {
    json!(path.increments())
}

pub fn execute(config: &RunConfig) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let inputs = serde_json::to_value(config).expect("config serializes");
    let mut report = RunReport::new(config.mode.as_str(), inputs);

    match config.mode {
        Mode::Price => run_price(config, &mut report)?,
        Mode::Hedge => run_hedge(config, &mut report)?,
        Mode::VerifyDuality => run_verify_duality(config, &mut report)?,
        Mode::CheckConditions => run_check_conditions(config, &mut report)?,
        Mode::Simulate => run_simulate(config, &mut report)?,
        Mode::PdeCrosscheck => run_pde_crosscheck(config, &mut report)?,
    }

    report.wall_time_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

fn run_price(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let (set, claim) = build_set(config)?;
    let (surface, argmax) = sublinear_expectation(&claim, &set).map_err(classify_dp)?;
    let price = surface.value(set.tree().root());
    report.put("price", price);
    report.put("nodes", set.tree().len());
    let count = policy_count(&set);
    report.put("policy_count", count.min(u64::MAX as u128) as u64);

    let stats = supermartingale_check(&surface, &argmax, &set).map_err(classify_dp)?;
    report.check_at_least("argmax_supermartingale_min_slack", stats.min_slack, -EXACT_TOL);
    report.check_at_most("argmax_martingale_max_slack", stats.max_slack, SLACK_TOL);

    if count <= config.caps.policies as u128 {
        let (oracle, _) =
            brute_force_price(&claim, &set, config.caps.policies as u128).map_err(classify_dp)?;
        report.put("brute_force_price", oracle);
        report.check_at_most("oracle_equivalence", (price - oracle).abs(), EXACT_TOL);
    } else {
        report.put("brute_force_skipped", format!("{count} policies exceed cap"));
    }

    if let Some(path) = &config.out.surface_csv {
        write_file(path, &surface_csv(&set, &surface))?;
        report.artifacts.push(path.clone());
    }
    Ok(())
}

fn run_hedge(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let (set, claim) = build_set(config)?;
    let sh = minimal_superhedge(&claim, &set).map_err(|e| RunError::Failed(e.to_string()))?;
    let slack = verify_superhedge(sh.capital, &sh.hedge, &claim, set.tree())
        .map_err(|e| RunError::Failed(e.to_string()))?;
    report.put("capital", sh.capital);
    report.put("tight_paths", slack.tight_count);
    report.put("worst_path", path_json(&slack.worst_path));
    report.check_at_least("superhedge_min_slack", slack.min_slack, -SLACK_TOL);
    report.check_at_least("superhedge_tight_paths", slack.tight_count as f64, 1.0);

    // the compensator column is only defined for complete one-step markets
    let compensator = if set.family().is_two_point() {
        let (surface, argmax) = sublinear_expectation(&claim, &set).map_err(classify_dp)?;
        let dm = doob_meyer(&surface, &argmax, &set)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        report.check_at_least("argmax_compensator_min", dm.min_compensator(), -EXACT_TOL);
        report.check_at_most("argmax_compensator_max", dm.max_compensator(), SLACK_TOL);
        Some(dm.compensators().clone())
    } else {
        None
    };

    if let Some(path) = &config.out.hedge_csv {
        write_file(path, &hedge_csv(&set, &sh.hedge, compensator.as_ref()))?;
        report.artifacts.push(path.clone());
    }
    Ok(())
}

fn run_verify_duality(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let (set, claim) = build_set(config)?;
    let duality = duality_report(&claim, &set).map_err(|e| RunError::Failed(e.to_string()))?;
    report.put("primal", duality.primal);
    report.put("dual", duality.dual);
    report.put("gap", duality.gap);
    report.put("tight_paths", duality.tight_count);
    report.put("worst_path", path_json(&duality.worst_path));
    match config.family.tag {
        FamilyTag::Polytope => {
            report.check_at_most("duality_gap_abs", duality.gap.abs(), SLACK_TOL);
        }
        FamilyTag::TwoPoint => {
            // the symmetric family's gap is a model property, reported but
            // only required to be nonnegative
            report.check_at_least("duality_gap_nonnegative", duality.gap, -EXACT_TOL);
        }
    }
    report.check_at_least("superhedge_tight_paths", duality.tight_count as f64, 1.0);
    Ok(())
}

fn run_check_conditions(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let (set, _) = build_set(config)?;
    let opts = ClosureOptions {
        policy_cap: config.caps.policies as u128,
        seed: config.seed,
        ..ClosureOptions::default()
    };
    let closure = check_closure(&set, &opts).map_err(classify_model)?;
    report.put("conditioning_checks", closure.conditioning_checks);
    report.put("pasting_checks", closure.pasting_checks);
    report.put("mixing_checks", closure.mixing_checks);
    let witnesses: Vec<String> = closure
        .violations
        .iter()
        .take(8)
        .map(|v| format!("{v:?}"))
        .collect();
    report.put("violation_witnesses", witnesses);
    report.check_at_most("closure_violations", closure.violations.len() as f64, 0.0);
    report.check_at_most(
        "pasting_measure_identity",
        closure.max_measure_error,
        EXACT_TOL,
    );
    Ok(())
}

fn run_simulate(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let sim = config.simulate.as_ref().expect("validated");
    let band = constant_band(config);
    let horizon = config.grid.steps as f64 * config.grid.dt;
    let grid = TimeGrid::new(sim.steps, horizon / sim.steps as f64)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let claim =
        build_claim(&config.claim, &grid).map_err(|e| RunError::Failed(e.to_string()))?;

    let mut policies = Vec::new();
    for p in &sim.policies {
        let policy = match *p {
            McPolicyConfig::Constant(v) => MatrixPolicy::constant(
                VolMatrix::scalar(v).map_err(|e| RunError::Failed(e.to_string()))?,
                &band,
            ),
            McPolicyConfig::Threshold { at, below, above } => MatrixPolicy::threshold_switch(
                at,
                VolMatrix::scalar(below).map_err(|e| RunError::Failed(e.to_string()))?,
                VolMatrix::scalar(above).map_err(|e| RunError::Failed(e.to_string()))?,
                &band,
            ),
        }
        .map_err(|e| RunError::Failed(e.to_string()))?;
        policies.push(policy);
    }

    let payoff = move |path: &McPath| {
        let increments: Vec<f64> = path
            .states
            .windows(2)
            .map(|w| w[1][0] - w[0][0])
            .collect();
        claim
            .eval(&DiscretePath::from_increments(increments))
            .expect("simulated path length matches the claim")
    };

    match sim.reference_lattice_steps {
        Some(n) => {
            let f = config
                .claim
                .terminal_payoff()
                .expect("validated terminal form");
            let ref_grid = TimeGrid::new(n, horizon / n as f64)
                .map_err(|e| RunError::Failed(e.to_string()))?;
            let reference = lattice_price(|x| f(x), &band, family_of(config), &ref_grid)
                .map_err(classify_dp)?;
            let lb = lower_bound_report(
                payoff,
                &policies,
                &grid,
                sim.paths,
                config.seed,
                reference,
            );
            report.put("reference", reference);
            report.put("entries", &lb.entries);
            report.put("best_policy", &lb.best_entry().policy);
            for entry in &lb.entries {
                report.check_at_most(
                    &format!("lower_bound[{}]", entry.policy),
                    entry.estimate.mean,
                    reference + 3.0 * entry.estimate.std_err,
                );
            }
        }
        None => {
            let mut entries = Vec::new();
            for (i, policy) in policies.iter().enumerate() {
                let est = simulate_price(
                    &payoff,
                    policy,
                    &grid,
                    sim.paths,
                    config
                        .seed
                        .wrapping_add(i as u64)
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15_u64 | 1),
                );
                entries.push(json!({
                    "policy": policy.describe(),
                    "mean": est.mean,
                    "stderr": est.std_err,
                    "paths": est.paths,
                    "seed": est.seed,
                }));
            }
            report.put("entries", entries);
        }
    }
    Ok(())
}

fn run_pde_crosscheck(config: &RunConfig, report: &mut RunReport) -> Result<(), RunError> {
    let pde_cfg = config.pde.as_ref().expect("validated");
    let band = constant_band(config);
    let horizon = config.grid.steps as f64 * config.grid.dt;
    let f = config
        .claim
        .terminal_payoff()
        .expect("validated terminal form");
    let grid = PdeGrid::new(
        pde_cfg.space_step,
        pde_cfg.radius,
        pde_cfg.time_step,
        band,
    )
    .map_err(classify_dp)?;
    let pde_value = barenblatt_fd(|x| f(x), horizon, &grid).map_err(classify_dp)?;
    report.put("pde_value", pde_value);

    let mut steps = pde_cfg.lattice_steps.clone();
    steps.sort_unstable();
    let family = family_of(config);
    let mut diffs = Vec::new();
    let mut lattice_values = serde_json::Map::new();
    for &n in &steps {
        let lattice_grid = TimeGrid::new(n, horizon / n as f64)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        let value = lattice_price(|x| f(x), &band, family, &lattice_grid).map_err(classify_dp)?;
        lattice_values.insert(n.to_string(), json!(value));
        diffs.push((value - pde_value).abs());
    }
    report.put("lattice_values", lattice_values);
    report.put("diffs", &diffs);
    report.check_at_most(
        "final_lattice_pde_diff",
        *diffs.last().expect("nonempty validated"),
        pde_cfg.tolerance,
    );
    let max_increase = diffs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    report.check_at_most("diff_non_increasing", max_increase, EXACT_TOL);
    Ok(())
}

pub fn render_report(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn emit(report: &RunReport, out_path: Option<&str>) -> Result<(), RunError> {
    let text = render_report(report);
    match out_path {
        Some(path) => {
            write_file(path, &text)?;
            let status = if report.passed() { "pass" } else { "FAIL" };
            println!("{} {}: report written to {path}", report.mode, status);
        }
        None => println!("{text}"),
    }
    std::io::stdout()
        .flush()
        .map_err(|e| RunError::Failed(e.to_string()))
}
