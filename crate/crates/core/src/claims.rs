//! Payoff library: declarative claim specifications and their evaluation on
//! discrete paths.
//!
//! All claims are total and bounded on a finite tree, so worst-case
//! integrability is automatic. There is deliberately no expression language,
//! only a fixed set of combinators, which keeps config files auditable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{concat, DiscretePath, LatticeError, TimeGrid};

#[derive(Debug, Error, PartialEq)]
pub enum ClaimError {
    #[error("power payoff needs an even exponent, got {0}")]
    OddPower(u32),
    #[error("claim expects paths of length {want}, got {got}")]
    WrongLength { got: usize, want: usize },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// A payoff: a total map from full-length paths to a cash amount, plus a flag
/// recording whether it depends on the terminal value only.
#[derive(Clone)]
pub struct Claim {
    steps: usize,
    terminal_only: bool,
    eval: Arc<dyn Fn(&DiscretePath) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for Claim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Claim")
            .field("steps", &self.steps)
            .field("terminal_only", &self.terminal_only)
            .finish()
    }
}

impl Claim {
    pub fn from_fn<F>(steps: usize, terminal_only: bool, eval: F) -> Self
    where
        F: Fn(&DiscretePath) -> f64 + Send + Sync + 'static,
    {
        Claim {
            steps,
            terminal_only,
            eval: Arc::new(eval),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn terminal_only(&self) -> bool {
        self.terminal_only
    }

    pub fn eval(&self, path: &DiscretePath) -> Result<f64, ClaimError> {
        if path.len() != self.steps {
            return Err(ClaimError::WrongLength {
                got: path.len(),
                want: self.steps,
            });
        }
        Ok((self.eval)(path))
    }

    /// Evaluation without the length check, for hot paths that enumerate tree
    /// leaves of known depth.
    pub(crate) fn eval_raw(&self, path: &DiscretePath) -> f64 {
        (self.eval)(path)
    }
}

/// The claim seen from a node: evaluates `xi` on the splice of the node's
/// prefix (cut at `at`) with the remaining path. The result expects tails of
/// length `xi.steps() - at`.
pub fn shift_claim(xi: &Claim, at: usize, prefix: &DiscretePath) -> Result<Claim, ClaimError> {
    if prefix.len() < at {
        return Err(LatticeError::PrefixTooShort {
            len: prefix.len(),
            at,
        }
        .into());
    }
    if at > xi.steps() {
        return Err(LatticeError::LengthOverflow {
            len: at,
            max: xi.steps(),
        }
        .into());
    }
    let head = prefix.prefix(at);
    let steps = xi.steps();
    let inner = xi.clone();
    Ok(Claim::from_fn(steps - at, xi.terminal_only(), move |tail| {
        let full = concat(&head, at, tail, steps).expect("tail length matches by construction");
        inner.eval_raw(&full)
    }))
}

/// Declarative payoff description; the JSON wire form is a tagged object,
/// e.g. `{"type":"digital","strike":0.0}`, with combinators nesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClaimSpec {
    /// `1` if the terminal value is at or above the strike, else `0`.
    Digital { strike: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
    /// Terminal value raised to an even power.
    Power { exponent: u32 },
    /// The terminal value itself.
    Identity,
    Constant { value: f64 },
    /// Sum of squared increments along the whole path.
    RealizedVariance,
    /// Negative absolute terminal value (concave probe).
    NegAbs,
    /// `scale * inner + shift`, pointwise.
    Affine {
        scale: f64,
        inner: Box<ClaimSpec>,
        shift: f64,
    },
    Max {
        left: Box<ClaimSpec>,
        right: Box<ClaimSpec>,
    },
    Min {
        left: Box<ClaimSpec>,
        right: Box<ClaimSpec>,
    },
}

impl ClaimSpec {
    /// Lowers the spec to a function of the terminal value alone, when it has
    /// one (everything except specs involving realized variance).
    pub fn terminal_payoff(&self) -> Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>> {
        match self {
            ClaimSpec::Digital { strike } => {
                let k = *strike;
                Some(Arc::new(move |x| if x >= k { 1.0 } else { 0.0 }))
            }
            ClaimSpec::Call { strike } => {
                let k = *strike;
                Some(Arc::new(move |x| (x - k).max(0.0)))
            }
            ClaimSpec::Put { strike } => {
                let k = *strike;
                Some(Arc::new(move |x| (k - x).max(0.0)))
            }
            ClaimSpec::Power { exponent } => {
                let p = *exponent as i32;
                Some(Arc::new(move |x| x.powi(p)))
            }
            ClaimSpec::Identity => Some(Arc::new(|x| x)),
            ClaimSpec::Constant { value } => {
                let c = *value;
                Some(Arc::new(move |_| c))
            }
            ClaimSpec::RealizedVariance => None,
            ClaimSpec::NegAbs => Some(Arc::new(|x| -x.abs())),
            ClaimSpec::Affine {
                scale,
                inner,
                shift,
            } => {
                let (a, b) = (*scale, *shift);
                let f = inner.terminal_payoff()?;
                Some(Arc::new(move |x| a * f(x) + b))
            }
            ClaimSpec::Max { left, right } => {
                let f = left.terminal_payoff()?;
                let g = right.terminal_payoff()?;
                Some(Arc::new(move |x| f(x).max(g(x))))
            }
            ClaimSpec::Min { left, right } => {
                let f = left.terminal_payoff()?;
                let g = right.terminal_payoff()?;
                Some(Arc::new(move |x| f(x).min(g(x))))
            }
        }
    }
}

/// Builds the evaluatable claim for a grid. Rejects odd power exponents; the
/// payoff `x^p` with odd `p` is unbounded below in spirit and excluded from
/// the library.
pub fn build_claim(spec: &ClaimSpec, grid: &TimeGrid) -> Result<Claim, ClaimError> {
    let steps = grid.steps();
    let claim = match spec {
        ClaimSpec::Power { exponent } if exponent % 2 == 1 => {
            return Err(ClaimError::OddPower(*exponent));
        }
        ClaimSpec::RealizedVariance => Claim::from_fn(steps, false, |path| {
            path.increments().iter().map(|dx| dx * dx).sum()
        }),
        ClaimSpec::Affine {
            scale,
            inner,
            shift,
        } => {
            let (a, b) = (*scale, *shift);
            let f = build_claim(inner, grid)?;
            Claim::from_fn(steps, f.terminal_only(), move |path| {
                a * f.eval_raw(path) + b
            })
        }
        ClaimSpec::Max { left, right } => {
            let f = build_claim(left, grid)?;
            let g = build_claim(right, grid)?;
            Claim::from_fn(steps, f.terminal_only() && g.terminal_only(), move |path| {
                f.eval_raw(path).max(g.eval_raw(path))
            })
        }
        ClaimSpec::Min { left, right } => {
            let f = build_claim(left, grid)?;
            let g = build_claim(right, grid)?;
            Claim::from_fn(steps, f.terminal_only() && g.terminal_only(), move |path| {
                f.eval_raw(path).min(g.eval_raw(path))
            })
        }
        terminal => {
            let f = terminal
                .terminal_payoff()
                .expect("non-combinator specs have terminal form");
            Claim::from_fn(steps, true, move |path| f(path.terminal_value()))
        }
    };
    Ok(claim)
}

pub fn eval_claim(xi: &Claim, path: &DiscretePath) -> Result<f64, ClaimError> {
    xi.eval(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(steps, 1.0).unwrap()
    }

    fn path(incs: &[f64]) -> DiscretePath {
        DiscretePath::from_increments(incs.to_vec())
    }

    #[test]
    fn digital_indicator() {
        let xi = build_claim(&ClaimSpec::Digital { strike: 0.0 }, &grid(1)).unwrap();
        assert_eq!(xi.eval(&path(&[1.0])).unwrap(), 1.0);
        assert_eq!(xi.eval(&path(&[-1.0])).unwrap(), 0.0);
        assert!(xi.terminal_only());
    }

    #[test]
    fn realized_variance_sums_squares() {
        let xi = build_claim(&ClaimSpec::RealizedVariance, &grid(2)).unwrap();
        assert_eq!(xi.eval(&path(&[1.0, -2.0])).unwrap(), 5.0);
        assert!(!xi.terminal_only());
    }

    #[test]
    fn affine_composes() {
        let spec = ClaimSpec::Affine {
            scale: 2.0,
            inner: Box::new(ClaimSpec::Call { strike: 0.0 }),
            shift: 1.0,
        };
        let xi = build_claim(&spec, &grid(1)).unwrap();
        assert_eq!(xi.eval(&path(&[2.0])).unwrap(), 5.0);
    }

    #[test]
    fn eval_examples() {
        let c = build_claim(&ClaimSpec::Constant { value: 5.0 }, &grid(3)).unwrap();
        assert_eq!(c.eval(&path(&[1.0, 1.0, -1.0])).unwrap(), 5.0);

        let call = build_claim(&ClaimSpec::Call { strike: 0.0 }, &grid(2)).unwrap();
        assert_eq!(call.eval(&path(&[-1.0, 3.0])).unwrap(), 2.0);

        let capped = ClaimSpec::Min {
            left: Box::new(ClaimSpec::Call { strike: 0.0 }),
            right: Box::new(ClaimSpec::Constant { value: 1.0 }),
        };
        let xi = build_claim(&capped, &grid(1)).unwrap();
        assert_eq!(xi.eval(&path(&[2.0])).unwrap(), 1.0);
    }

    #[test]
    fn wrong_length_and_odd_power_rejected() {
        let xi = build_claim(&ClaimSpec::Identity, &grid(2)).unwrap();
        assert_eq!(
            xi.eval(&path(&[1.0])),
            Err(ClaimError::WrongLength { got: 1, want: 2 })
        );
        assert_eq!(
            build_claim(&ClaimSpec::Power { exponent: 3 }, &grid(1)).unwrap_err(),
            ClaimError::OddPower(3)
        );
    }

    #[test]
    fn shift_examples() {
        // Terminal value claim shifted past a +1 prefix adds 1 to the tail value.
        let xi = build_claim(&ClaimSpec::Identity, &grid(3)).unwrap();
        let shifted = shift_claim(&xi, 1, &path(&[1.0])).unwrap();
        assert_eq!(shifted.steps(), 2);
        assert_eq!(shifted.eval(&path(&[0.5, 0.25])).unwrap(), 1.75);

        // Constants are shift-invariant.
        let c = build_claim(&ClaimSpec::Constant { value: 5.0 }, &grid(3)).unwrap();
        let shifted = shift_claim(&c, 2, &path(&[1.0, -1.0])).unwrap();
        assert_eq!(shifted.eval(&path(&[9.0])).unwrap(), 5.0);

        // Digital on B_2 seen from (-2): tail +1 lands at -1, below strike 0.
        let digital = build_claim(&ClaimSpec::Digital { strike: 0.0 }, &grid(2)).unwrap();
        let shifted = shift_claim(&digital, 1, &path(&[-2.0])).unwrap();
        assert_eq!(shifted.eval(&path(&[1.0])).unwrap(), 0.0);
    }

    #[test]
    fn shift_at_root_is_identity() {
        let spec = ClaimSpec::Max {
            left: Box::new(ClaimSpec::Put { strike: 1.0 }),
            right: Box::new(ClaimSpec::RealizedVariance),
        };
        let xi = build_claim(&spec, &grid(2)).unwrap();
        let shifted = shift_claim(&xi, 0, &DiscretePath::empty()).unwrap();
        for incs in [[1.0, 1.0], [-1.0, 2.0], [-2.0, -2.0]] {
            let p = path(&incs);
            assert_eq!(shifted.eval(&p).unwrap(), xi.eval(&p).unwrap());
        }
    }

    #[test]
    fn shift_rejects_short_prefix() {
        let xi = build_claim(&ClaimSpec::Identity, &grid(2)).unwrap();
        assert!(matches!(
            shift_claim(&xi, 1, &DiscretePath::empty()),
            Err(ClaimError::Lattice(LatticeError::PrefixTooShort { .. }))
        ));
    }

    #[test]
    fn terminal_only_claims_agree_on_equal_terminal_values() {
        let specs = [
            ClaimSpec::Digital { strike: 0.5 },
            ClaimSpec::Call { strike: -1.0 },
            ClaimSpec::Power { exponent: 2 },
            ClaimSpec::NegAbs,
        ];
        // Two length-2 paths with the same terminal value 0.
        let a = path(&[1.0, -1.0]);
        let b = path(&[2.0, -2.0]);
        for spec in specs {
            let xi = build_claim(&spec, &grid(2)).unwrap();
            assert!(xi.terminal_only());
            assert_eq!(xi.eval(&a).unwrap(), xi.eval(&b).unwrap());
            let f = spec.terminal_payoff().unwrap();
            assert_eq!(xi.eval(&a).unwrap(), f(0.0));
        }
        assert!(ClaimSpec::RealizedVariance.terminal_payoff().is_none());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ClaimSpec::Affine {
            scale: -1.5,
            inner: Box::new(ClaimSpec::Max {
                left: Box::new(ClaimSpec::Digital { strike: 0.25 }),
                right: Box::new(ClaimSpec::RealizedVariance),
            }),
            shift: 0.5,
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: ClaimSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let wire: ClaimSpec = serde_json::from_str(r#"{"type":"digital","strike":0.0}"#).unwrap();
        assert_eq!(wire, ClaimSpec::Digital { strike: 0.0 });
    }
}
