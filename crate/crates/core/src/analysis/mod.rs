//! Interpretation of pooling-head attention: stemming, trigger-word weight
//! tables and heatmaps.

mod heatmap;
mod porter;
mod triggers;

pub use heatmap::{render_heatmap_ansi, render_heatmap_html, render_report};
pub use porter::porter_stem;
pub use triggers::{
    global_trigger_weights, pos_neg_trigger_compare, window_occurrences, write_comparison, write_stem_weights,
    StemComparison, StemWeight, DEFAULT_WINDOW,
};
