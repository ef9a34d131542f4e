//! Leakage tracing by masking gradient entries, and sweeps over masks, loss
//! terms, batch sizes and defense strength.

pub mod mask;
pub mod sweep;

pub use mask::{resolve_mask, resolve_mask_names, third, BlockPart, MaskSpec};
pub use sweep::{
    draw_batch, run_sweep, variants, Moments, SweepAxis, SweepConfig, SweepInputs, SweepReport, SweepRow, Variant,
    VariantSummary, SWEEP_HEADER,
};
