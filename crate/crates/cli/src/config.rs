//! Strict JSON run configuration. Unknown keys are rejected and validation
//! reports *every* problem it finds, not just the first: silent
//! misconfiguration is the dominant failure mode for numeric batch tools.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use volsup_core::claims::ClaimSpec;
use volsup_core::scenario::VolRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Price,
    Hedge,
    VerifyDuality,
    CheckConditions,
    Simulate,
    PdeCrosscheck,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Price => "price",
            Mode::Hedge => "hedge",
            Mode::VerifyDuality => "verify-duality",
            Mode::CheckConditions => "check-conditions",
            Mode::Simulate => "simulate",
            Mode::PdeCrosscheck => "pde-crosscheck",
        }
    }

    fn from_str(s: &str) -> Option<Mode> {
        Some(match s {
            "price" => Mode::Price,
            "hedge" => Mode::Hedge,
            "verify-duality" => Mode::VerifyDuality,
            "check-conditions" => Mode::CheckConditions,
            "simulate" => Mode::Simulate,
            "pde-crosscheck" => Mode::PdeCrosscheck,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyTag {
    TwoPoint,
    Polytope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub steps: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub tag: FamilyTag,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutConfig {
    pub report: Option<String>,
    pub surface_csv: Option<String>,
    pub hedge_csv: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsConfig {
    pub policies: u64,
}

impl Default for CapsConfig {
    fn default() -> Self {
        CapsConfig {
            policies: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPolicyConfig {
    /// Constant variance per unit time.
    Constant(f64),
    /// High variance while `|X| <= at`, low beyond (or vice versa).
    Threshold { at: f64, below: f64, above: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub steps: usize,
    pub paths: usize,
    pub policies: Vec<McPolicyConfig>,
    pub reference_lattice_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub space_step: f64,
    pub radius: f64,
    pub time_step: f64,
    pub lattice_steps: Vec<usize>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub band: VolRule,
    pub family: FamilyConfig,
    pub claim: ClaimSpec,
    pub mode: Mode,
    pub seed: u64,
    pub out: OutConfig,
    pub caps: CapsConfig,
    pub simulate: Option<SimulateConfig>,
    pub pde: Option<PdeConfig>,
}

pub const DEFAULT_PDE_TOLERANCE: f64 = 5e-3;

struct Ctx {
    errors: Vec<String>,
}

impl Ctx {
    fn err(&mut self, path: &str, msg: impl AsRef<str>) {
        self.errors.push(format!("{path}: {}", msg.as_ref()));
    }

    fn object<'a>(&mut self, v: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        match v.as_object() {
            Some(m) => Some(m),
            None => {
                self.err(path, "expected an object");
                None
            }
        }
    }

    fn check_keys(&mut self, obj: &Map<String, Value>, allowed: &[&str], path: &str) {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(path, format!("unknown key \"{key}\""));
            }
        }
    }

    fn number(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<f64> {
        match obj.get(key) {
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Some(x),
                _ => {
                    self.err(path, format!("\"{key}\" must be a finite number"));
                    None
                }
            },
            None => {
                self.err(path, format!("missing required key \"{key}\""));
                None
            }
        }
    }

    fn integer(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<u64> {
        match obj.get(key) {
            Some(v) => match v.as_u64() {
                Some(x) => Some(x),
                None => {
                    self.err(path, format!("\"{key}\" must be a nonnegative integer"));
                    None
                }
            },
            None => {
                self.err(path, format!("missing required key \"{key}\""));
                None
            }
        }
    }

    fn opt_string(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<String> {
        match obj.get(key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.err(path, format!("\"{key}\" must be a string"));
                None
            }
        }
    }
}

fn validate_band_pair(ctx: &mut Ctx, v: &Value, path: &str) -> Option<[f64; 2]> {
    let arr = match v.as_array() {
        Some(a) if a.len() == 2 => a,
        _ => {
            ctx.err(path, "expected [lo, hi]");
            return None;
        }
    };
    let lo = arr[0].as_f64();
    let hi = arr[1].as_f64();
    match (lo, hi) {
        (Some(lo), Some(hi)) if lo.is_finite() && hi.is_finite() => {
            if lo <= 0.0 {
                ctx.err(path, format!("lo must be > 0, got {lo}"));
                None
            } else if lo > hi {
                ctx.err(path, format!("lo > hi ({lo} > {hi})"));
                None
            } else {
                Some([lo, hi])
            }
        }
        _ => {
            ctx.err(path, "band entries must be finite numbers");
            None
        }
    }
}

/// Validates the band rule and returns its constituent `[lo, hi]` pairs.
fn validate_band(ctx: &mut Ctx, v: &Value, path: &str) -> Vec<[f64; 2]> {
    let Some(obj) = ctx.object(v, path) else {
        return vec![];
    };
    ctx.check_keys(obj, &["constant", "level_scaled"], path);
    match (obj.get("constant"), obj.get("level_scaled")) {
        (Some(c), None) => validate_band_pair(ctx, c, &format!("{path}.constant"))
            .into_iter()
            .collect(),
        (None, Some(ls)) => {
            let Some(inner_obj) = ctx.object(ls, &format!("{path}.level_scaled")) else {
                return vec![];
            };
            ctx.check_keys(
                inner_obj,
                &["threshold", "inner", "outer"],
                &format!("{path}.level_scaled"),
            );
            if let Some(t) = ctx.number(inner_obj, "threshold", &format!("{path}.level_scaled")) {
                if t < 0.0 {
                    ctx.err(&format!("{path}.level_scaled"), "threshold must be >= 0");
                }
            }
            let mut bands = vec![];
            for key in ["inner", "outer"] {
                match inner_obj.get(key) {
                    Some(b) => {
                        if let Some(pair) =
                            validate_band_pair(ctx, b, &format!("{path}.level_scaled.{key}"))
                        {
                            bands.push(pair);
                        }
                    }
                    None => ctx.err(
                        &format!("{path}.level_scaled"),
                        format!("missing required key \"{key}\""),
                    ),
                }
            }
            bands
        }
        _ => {
            ctx.err(path, "expected exactly one of \"constant\" or \"level_scaled\"");
            vec![]
        }
    }
}

fn validate_claim(ctx: &mut Ctx, v: &Value, path: &str) -> bool {
    let Some(obj) = ctx.object(v, path) else {
        return false;
    };
    let Some(tag) = obj.get("type").and_then(Value::as_str) else {
        ctx.err(path, "missing claim \"type\"");
        return false;
    };
    let mut ok = true;
    let expect_keys = |ctx: &mut Ctx, keys: &[&str]| {
        let mut allowed = vec!["type"];
        allowed.extend_from_slice(keys);
        ctx.check_keys(obj, &allowed, path);
    };
    match tag {
        "digital" | "call" | "put" => {
            expect_keys(ctx, &["strike"]);
            ok &= ctx.number(obj, "strike", path).is_some();
        }
        "power" => {
            expect_keys(ctx, &["exponent"]);
            match ctx.integer(obj, "exponent", path) {
                Some(p) if p % 2 == 0 => {}
                Some(p) => {
                    ctx.err(path, format!("exponent must be even, got {p}"));
                    ok = false;
                }
                None => ok = false,
            }
        }
        "identity" | "realized_variance" | "neg_abs" => expect_keys(ctx, &[]),
        "constant" => {
            expect_keys(ctx, &["value"]);
            ok &= ctx.number(obj, "value", path).is_some();
        }
        "affine" => {
            expect_keys(ctx, &["scale", "inner", "shift"]);
            ok &= ctx.number(obj, "scale", path).is_some();
            ok &= ctx.number(obj, "shift", path).is_some();
            match obj.get("inner") {
                Some(inner) => ok &= validate_claim(ctx, inner, &format!("{path}.inner")),
                None => {
                    ctx.err(path, "missing required key \"inner\"");
                    ok = false;
                }
            }
        }
        "max" | "min" => {
            expect_keys(ctx, &["left", "right"]);
            for key in ["left", "right"] {
                match obj.get(key) {
                    Some(side) => ok &= validate_claim(ctx, side, &format!("{path}.{key}")),
                    None => {
                        ctx.err(path, format!("missing required key \"{key}\""));
                        ok = false;
                    }
                }
            }
        }
        other => {
            ctx.err(path, format!("unknown claim type \"{other}\""));
            ok = false;
        }
    }
    ok
}

fn validate_simulate(
    ctx: &mut Ctx,
    v: &Value,
    bands: &[[f64; 2]],
    claim_terminal: bool,
) -> Option<SimulateConfig> {
    let obj = ctx.object(v, "simulate")?;
    ctx.check_keys(
        obj,
        &["steps", "paths", "policies", "reference_lattice_steps"],
        "simulate",
    );
    let steps = ctx.integer(obj, "steps", "simulate").unwrap_or(0);
    if steps == 0 {
        ctx.err("simulate", "steps must be >= 1");
    }
    let paths = ctx.integer(obj, "paths", "simulate").unwrap_or(0);
    if paths == 0 {
        ctx.err("simulate", "paths must be >= 1");
    }
    let (lo, hi) = match bands {
        [[lo, hi]] => (*lo, *hi),
        _ => {
            ctx.err("simulate", "simulate mode requires a constant band");
            (0.0, f64::INFINITY)
        }
    };
    let check_variance = |ctx: &mut Ctx, v: f64, what: &str| {
        if v < lo || v > hi {
            ctx.err(
                "simulate.policies",
                format!("{what} variance {v} escapes the band [{lo}, {hi}]"),
            );
        }
    };
    let mut policies = Vec::new();
    match obj.get("policies").and_then(Value::as_array) {
        Some(list) if !list.is_empty() => {
            for (i, p) in list.iter().enumerate() {
                let path = format!("simulate.policies[{i}]");
                let Some(pobj) = ctx.object(p, &path) else {
                    continue;
                };
                ctx.check_keys(pobj, &["constant", "threshold"], &path);
                match (pobj.get("constant"), pobj.get("threshold")) {
                    (Some(c), None) => match c.as_f64() {
                        Some(v) if v > 0.0 && v.is_finite() => {
                            check_variance(ctx, v, "constant");
                            policies.push(McPolicyConfig::Constant(v));
                        }
                        _ => ctx.err(&path, "constant variance must be a positive number"),
                    },
                    (None, Some(t)) => {
                        let Some(tobj) = ctx.object(t, &path) else {
                            continue;
                        };
                        ctx.check_keys(tobj, &["at", "below", "above"], &path);
                        let at = ctx.number(tobj, "at", &path).unwrap_or(-1.0);
                        if at < 0.0 {
                            ctx.err(&path, "threshold \"at\" must be >= 0");
                        }
                        let below = ctx.number(tobj, "below", &path).unwrap_or(f64::NAN);
                        let above = ctx.number(tobj, "above", &path).unwrap_or(f64::NAN);
                        if below.is_finite() && above.is_finite() {
                            check_variance(ctx, below, "threshold below");
                            check_variance(ctx, above, "threshold above");
                            policies.push(McPolicyConfig::Threshold { at, below, above });
                        }
                    }
                    _ => ctx.err(&path, "expected exactly one of \"constant\" or \"threshold\""),
                }
            }
        }
        _ => ctx.err("simulate", "policies must be a nonempty array"),
    }
    let reference_lattice_steps = match obj.get("reference_lattice_steps") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(n) if n >= 1 => {
                if !claim_terminal {
                    ctx.err(
                        "simulate",
                        "the lattice reference needs a claim with a terminal form",
                    );
                }
                Some(n as usize)
            }
            _ => {
                ctx.err("simulate", "reference_lattice_steps must be >= 1");
                None
            }
        },
    };
    Some(SimulateConfig {
        steps: steps as usize,
        paths: paths as usize,
        policies,
        reference_lattice_steps,
    })
}

fn validate_pde(
    ctx: &mut Ctx,
    v: &Value,
    bands: &[[f64; 2]],
    claim_terminal: bool,
) -> Option<PdeConfig> {
    let obj = ctx.object(v, "pde")?;
    ctx.check_keys(
        obj,
        &["space_step", "radius", "time_step", "lattice_steps", "tolerance"],
        "pde",
    );
    let space_step = ctx.number(obj, "space_step", "pde").unwrap_or(f64::NAN);
    let radius = ctx.number(obj, "radius", "pde").unwrap_or(f64::NAN);
    let time_step = ctx.number(obj, "time_step", "pde").unwrap_or(f64::NAN);
    if space_step.is_finite() && space_step <= 0.0 {
        ctx.err("pde", "space_step must be > 0");
    }
    if radius.is_finite() && space_step.is_finite() && radius < 2.0 * space_step {
        ctx.err("pde", "radius must be at least two space steps");
    }
    if time_step.is_finite() && time_step <= 0.0 {
        ctx.err("pde", "time_step must be > 0");
    }
    match bands {
        [[_, hi]] => {
            if time_step.is_finite() && space_step.is_finite() {
                let ratio = time_step * hi / (space_step * space_step);
                if ratio > 1.0 {
                    ctx.err(
                        "pde",
                        format!("unstable scheme: time_step * hi / space_step^2 = {ratio} > 1"),
                    );
                }
            }
        }
        _ => ctx.err("pde", "pde-crosscheck mode requires a constant band"),
    }
    if !claim_terminal {
        ctx.err("pde", "pde-crosscheck needs a claim with a terminal form");
    }
    let mut lattice_steps = Vec::new();
    match obj.get("lattice_steps").and_then(Value::as_array) {
        Some(list) if !list.is_empty() => {
            for (i, n) in list.iter().enumerate() {
                match n.as_u64() {
                    Some(n) if n >= 1 => lattice_steps.push(n as usize),
                    _ => ctx.err("pde", format!("lattice_steps[{i}] must be >= 1")),
                }
            }
        }
        _ => ctx.err("pde", "lattice_steps must be a nonempty array"),
    }
    let tolerance = match obj.get("tolerance") {
        None => DEFAULT_PDE_TOLERANCE,
        Some(v) => match v.as_f64() {
            Some(t) if t > 0.0 => t,
            _ => {
                ctx.err("pde", "tolerance must be > 0");
                DEFAULT_PDE_TOLERANCE
            }
        },
    };
    Some(PdeConfig {
        space_step,
        radius,
        time_step,
        lattice_steps,
        tolerance,
    })
}

/// Parses and validates a config, returning either the config or the full
/// list of validation errors.
pub fn parse_config(text: &str) -> Result<RunConfig, Vec<String>> {
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("config is not well-formed JSON: {e}")]),
    };
    let mut ctx = Ctx { errors: Vec::new() };
    let Some(top) = value.as_object() else {
        return Err(vec!["config must be a JSON object".into()]);
    };
    ctx.check_keys(
        top,
        &[
            "grid", "band", "family", "claim", "mode", "seed", "out", "caps", "simulate", "pde",
        ],
        "config",
    );

    // grid
    let mut grid = GridConfig { steps: 0, dt: 0.0 };
    match top.get("grid") {
        Some(g) => {
            if let Some(gobj) = ctx.object(g, "grid") {
                ctx.check_keys(gobj, &["steps", "dt"], "grid");
                match ctx.integer(gobj, "steps", "grid") {
                    Some(s) if s >= 1 => grid.steps = s as usize,
                    Some(_) => ctx.err("grid", "steps must be >= 1"),
                    None => {}
                }
                match ctx.number(gobj, "dt", "grid") {
                    Some(dt) if dt > 0.0 => grid.dt = dt,
                    Some(dt) => ctx.err("grid", format!("dt must be > 0, got {dt}")),
                    None => {}
                }
            }
        }
        None => ctx.err("config", "missing required key \"grid\""),
    }

    // band
    let bands = match top.get("band") {
        Some(b) => validate_band(&mut ctx, b, "band"),
        None => {
            ctx.err("config", "missing required key \"band\"");
            vec![]
        }
    };

    // family
    let mut family = FamilyConfig {
        tag: FamilyTag::Polytope,
        m: 0,
    };
    match top.get("family") {
        Some(f) => {
            if let Some(fobj) = ctx.object(f, "family") {
                ctx.check_keys(fobj, &["tag", "m"], "family");
                match fobj.get("tag").and_then(Value::as_str) {
                    Some("two-point") => family.tag = FamilyTag::TwoPoint,
                    Some("polytope") => family.tag = FamilyTag::Polytope,
                    Some(other) => ctx.err(
                        "family",
                        format!("tag must be \"two-point\" or \"polytope\", got \"{other}\""),
                    ),
                    None => ctx.err("family", "missing required key \"tag\""),
                }
                match ctx.integer(fobj, "m", "family") {
                    Some(m) if m >= 1 => family.m = m as usize,
                    Some(_) => ctx.err("family", "m must be >= 1"),
                    None => {}
                }
            }
        }
        None => ctx.err("config", "missing required key \"family\""),
    }
    if family.m == 1 {
        for [lo, hi] in &bands {
            if lo != hi {
                ctx.err(
                    "family",
                    format!("m = 1 is ambiguous for the non-degenerate band [{lo}, {hi}]"),
                );
            }
        }
    }

    // claim
    let claim_ok = match top.get("claim") {
        Some(c) => validate_claim(&mut ctx, c, "claim"),
        None => {
            ctx.err("config", "missing required key \"claim\"");
            false
        }
    };

    // mode
    let mode = match top.get("mode").and_then(Value::as_str) {
        Some(s) => match Mode::from_str(s) {
            Some(m) => Some(m),
            None => {
                ctx.err("mode", format!("unknown mode \"{s}\""));
                None
            }
        },
        None => {
            ctx.err("config", "missing required key \"mode\" (a string)");
            None
        }
    };

    // seed
    let seed = match top.get("seed") {
        None | Some(Value::Null) => 0,
        Some(v) => match v.as_u64() {
            Some(s) => s,
            None => {
                ctx.err("seed", "must be a nonnegative integer");
                0
            }
        },
    };

    // out
    let mut out = OutConfig::default();
    if let Some(o) = top.get("out") {
        if let Some(oobj) = ctx.object(o, "out") {
            ctx.check_keys(oobj, &["report", "surface_csv", "hedge_csv"], "out");
            out.report = ctx.opt_string(oobj, "report", "out");
            out.surface_csv = ctx.opt_string(oobj, "surface_csv", "out");
            out.hedge_csv = ctx.opt_string(oobj, "hedge_csv", "out");
        }
    }

    // caps
    let mut caps = CapsConfig::default();
    if let Some(c) = top.get("caps") {
        if let Some(cobj) = ctx.object(c, "caps") {
            ctx.check_keys(cobj, &["policies"], "caps");
            match ctx.integer(cobj, "policies", "caps") {
                Some(p) if p >= 1 => caps.policies = p,
                Some(_) => ctx.err("caps", "policies must be >= 1"),
                None => {}
            }
        }
    }

    // the sections are tied to their modes
    let claim_terminal = top
        .get("claim")
        .and_then(|c| serde_json::from_value::<ClaimSpec>(c.clone()).ok())
        .map(|c| c.terminal_payoff().is_some())
        .unwrap_or(false);
    let simulate_value = top.get("simulate").filter(|v| !v.is_null());
    let pde_value = top.get("pde").filter(|v| !v.is_null());
    let simulate = match (mode, simulate_value) {
        (Some(Mode::Simulate), Some(s)) => validate_simulate(&mut ctx, s, &bands, claim_terminal),
        (Some(Mode::Simulate), None) => {
            ctx.err("config", "simulate mode needs a \"simulate\" section");
            None
        }
        (_, Some(_)) => {
            ctx.err("simulate", "section is only valid in simulate mode");
            None
        }
        _ => None,
    };
    let pde = match (mode, pde_value) {
        (Some(Mode::PdeCrosscheck), Some(p)) => validate_pde(&mut ctx, p, &bands, claim_terminal),
        (Some(Mode::PdeCrosscheck), None) => {
            ctx.err("config", "pde-crosscheck mode needs a \"pde\" section");
            None
        }
        (_, Some(_)) => {
            ctx.err("pde", "section is only valid in pde-crosscheck mode");
            None
        }
        _ => None,
    };

    if !ctx.errors.is_empty() {
        return Err(ctx.errors);
    }

    // structure is valid; the typed decode cannot fail now
    let band: VolRule = serde_json::from_value(top.get("band").unwrap().clone())
        .expect("band validated above");
    assert!(claim_ok);
    let claim: ClaimSpec = serde_json::from_value(top.get("claim").unwrap().clone())
        .expect("claim validated above");
    Ok(RunConfig {
        grid,
        band,
        family,
        claim,
        mode: mode.expect("mode validated above"),
        seed,
        out,
        caps,
        simulate,
        pde,
    })
}
