//! Ranking metrics, downstream probing, sliding-window inference, and heatmaps.

mod finetune;
mod heatmap;
mod metrics;
mod ranking;

pub use finetune::{
    average_probabilities, finetune, sliding_window_predict, ClassAccuracy, FinetuneMode,
    FinetuneOptions, Prediction, ProbeReport, WindowClassifier,
};
pub use heatmap::{
    argmax_cell, cell_of, export_heatmap, frame_heatmap, heatmap_grid, heatmap_pgm, FrameHeatmap,
};
pub use metrics::{kendall_tau, pairwise_ranking_accuracy};
pub use ranking::{
    evaluate_ranking, CentroidOracle, RankedExample, RankingEncoder, RankingReport, TrainedModel,
};
