//! Scenario files, run directories and verification for `mfsc`.

pub mod checks;
pub mod config;
pub mod output;
pub mod run;
pub mod scenario;

pub use run::{run_scenario, verify_run, Overrides, RunOutcome};
pub use scenario::Kind;

/// Reference config emitted by `mfsc demo <kind>`.
pub fn demo_config(kind: Kind) -> &'static str {
    match kind {
        Kind::Harvesting => include_str!("../configs/harvesting.conf"),
        Kind::QuadraticCost => include_str!("../configs/quadratic-cost.conf"),
        Kind::PowerCost => include_str!("../configs/power-cost.conf"),
        Kind::Game => include_str!("../configs/game.conf"),
        Kind::Uncertainty => include_str!("../configs/uncertainty.conf"),
        Kind::CustomReflected => include_str!("../configs/custom-reflected.conf"),
    }
}
