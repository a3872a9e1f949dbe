//! MicroFlow: a seeded three-source toy environment with a speed metric, and
//! the trainer that turns a design vector into a [`SignalSet`].
//!
//! [`SignalSet`]: crate::signals::SignalSet

mod env;
mod trainer;

pub use env::{
    oracle_action, Action, EnvState, MicroFlow, Observation, JAM_FACTOR, JAM_STEPS, PERIOD,
    REPEAT_PENALTY, REPEAT_RUN, SPEED_NOISE, SPEED_STEP, TRAFFIC_FEATURES, WINDOW,
};
pub use trainer::{
    autocorrelation_peak, encoder_inputs, microflow_shapes, train_and_evaluate, Evaluation,
    OptimizerKind, TrainError, TrainEvalBudget, TrainerConfig, SEQUENCE_SOURCE, TIME_SOURCE,
    TRAFFIC_SOURCE,
};
