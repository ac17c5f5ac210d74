//! Needle-in-a-haystack evaluation and ablation drivers.

mod ablation;
mod niah;

pub use ablation::{
    ablation_run, ablation_table, evaluate_variant, standard_variants, AblationRow, AblationTable, Variant, TOPK_SET,
};
pub use niah::{needle_index, niah_build, niah_eval, Heatmap, NiahInstance, NiahSpec, Scorer};
