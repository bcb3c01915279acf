//! Online spherical SGD on the perturbation direction.

mod gradient;

pub use gradient::{
    sample_gradient, sample_loss, sample_spherical_gradient, spherical_projection, SampleGradient, StudentForm,
};

mod schedule;
mod sgd;

pub use schedule::{theorem_schedule, Schedule, ScheduleConstants, ScheduleInputs, Setting};
pub use sgd::{
    initial_state, read_trajectory_csv, run_from, run_joint_sgd, run_linearized, run_online_sgd, sgd_step, SgdConfig,
    StepInfo, TrainingMode, TrajectoryRecord, TrajectoryRow, TrajectorySummary, DEGENERATE_NORM, TRAJECTORY_COLUMNS,
};

mod condition;

pub use condition::{
    condition_suite, condition_suite_at, population_gradient_bound, variance_bound, ConditionReport, DirectionMoments,
    MIN_CONDITION_SAMPLES,
};
