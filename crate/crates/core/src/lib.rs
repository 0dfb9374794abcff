//! Pricing and superhedging engine for markets with uncertain volatility.
//!
//! The market is a finite, non-recombining event tree for a single driftless
//! asset. Uncertainty is expressed as a set of scenarios: every node carries a
//! band of admissible one-step variances, and a scenario (a [`scenario::Policy`])
//! adaptively picks a zero-mean transition kernel inside that band at each
//! node. The engine computes
//!
//! * the worst-case price `sup_P E^P[xi]` by backward induction
//!   ([`dp::sublinear_expectation`]) and by brute-force enumeration of
//!   scenarios ([`dp::brute_force_price`]),
//! * the cheapest superreplicating strategy via one-step concave envelopes
//!   ([`superhedge::minimal_superhedge`]), together with duality-gap,
//!   supermartingale and compensator diagnostics,
//! * closure diagnostics for the scenario set under conditioning, pasting at
//!   stopping rules and event mixing ([`scenario::check_closure`]),
//! * continuum cross-checks: a recombining fine lattice for terminal payoffs
//!   ([`dp::lattice_price`]), an explicit finite-difference solver for the
//!   worst-case heat equation ([`dp::barenblatt_fd`]) and Monte Carlo
//!   simulation of diffusion scenarios in arbitrary dimension
//!   ([`montecarlo::simulate_price`]).
//!
//! All tree data is immutable after construction and every operation is a
//! pure function, so values can be shared freely across worker threads.

pub mod claims;
pub mod dp;
pub mod lattice;
pub mod montecarlo;
pub mod scenario;
pub mod superhedge;

/// Absolute tolerance for algebraic identities (kernel means, measure
/// identities, oracle agreement). Quantities are O(1) at desk scale.
pub const EXACT_TOL: f64 = 1e-12;

/// Absolute tolerance for superhedge slacks and duality gaps, where values
/// accumulate over a few backward sweeps.
pub const SLACK_TOL: f64 = 1e-9;
