//! Gradient inversion: restore labels from the head gradient, then optimise
//! a candidate batch so its victim gradients match the captured ones, under
//! image priors, a loss schedule and multi-seed consensus.

pub mod capture;
pub mod config;
pub mod losses;
pub mod run;

pub use capture::{
    apply_defense, capture_gradients, restore_labels, Defense, DefenseTarget, GradientCapture,
    LabelRule,
};
pub use config::{scheduler, AttackConfig, LossToggles, Weights, DESK_PRIOR_SCALE};
pub use losses::{
    consensus, gradient_matching_loss, image_prior_loss, l2_tv_loss, patch_prior_loss, registration_loss,
};
pub use run::{ledger_csv, run_attack, AttackContext, LedgerRow, ReconstructionResult, SeedResult, LEDGER_HEADER};
