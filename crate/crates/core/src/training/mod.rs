//! Optimisation, the cross-validated ablation harness, significance testing
//! and the participant sweep.

mod ablation;
mod report;
mod stats;
mod sweep;
mod train;

pub use ablation::{run_ablation, summarize, worker_threads, AblationReport, AblationRow, RunFailure, SIGNIFICANCE_LEVEL};
pub use report::{
    read_ablation_csv, read_curves_csv, read_predictions_csv, read_runs_csv, read_sweep_csv, run_rows,
    write_ablation_csv, write_curves_csv, write_predictions_csv, write_runs_csv, write_sweep_csv, CurveRow, RunRow,
};
pub use stats::{bonferroni, kruskal_wallis_bonferroni, KruskalWallis};
pub use sweep::{participant_sweep, sweep_svg, unit_grid, write_sweep_svg, SweepPoint};
pub use train::{
    evaluate, participant_means, predict, silent_gammas, train, CurvePoint, Evaluation, PredictionRow, RunResult,
    TrainConfig,
};
