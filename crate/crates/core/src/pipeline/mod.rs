//! End-to-end experiment commands driven by a JSON configuration.

mod commands;
mod config;
mod interpolate;

pub use commands::{
    cmd_distill, cmd_evaluate, cmd_run, cmd_train_classifier, cmd_train_teacher, configure_threads,
    control_id, student_id, teacher_id, CellSummary, ClassifierSummary, TeacherSummary, THREADS_ENV,
};
pub use config::{
    ClassifierSettings, DatasetSource, EvalSettings, ExperimentConfig, OptimizerBlock,
    StudentSettings, TeacherSettings,
};
pub use interpolate::{cmd_interpolate, interpolate, lerp, Interpolation};
