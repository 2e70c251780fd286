//! Experiment orchestration: resolved configuration, the resumable artifact
//! pipeline, ablation grids, reports, and optional SVG plots.
//!
//! The flow mirrors the CLI one-to-one. A [`RunConfig`] (JSON file or
//! defaults) plus an output [`Workspace`] defines everything; each pipeline
//! step writes its artifacts under the workspace and is skipped when they
//! already exist, so later steps — and every ablation grid — reuse earlier
//! checkpoints instead of recomputing them. Same config + seed always
//! produces byte-identical files.

mod ablate;
mod config;
mod report;
mod runs;
mod svg;

pub use ablate::{run_ablate, AblateGrid};
pub use config::{load_run_config, AdaptSection, BoostSection, DomainSection, EncoderSection,
                 ModelSection, PretrainSection, RunConfig};
pub use report::{mean_std, run_report, write_text};
pub use runs::{adapt_label, Pipeline, Workspace};
pub use svg::{heatmap_svg, line_chart_svg};
