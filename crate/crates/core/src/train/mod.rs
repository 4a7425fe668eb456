//! Gradient tape, anchor matching, detector loss and the progressive QAT trainer.

pub mod loss;
pub mod matching;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod trainer;

pub use loss::{detector_loss, detector_loss_values, smooth_l1, LossParts};
pub use matching::{match_anchors, Label, MatchConfig, MatchResult};
pub use optim::{Optimizer, Sgd};
pub use params::{flat_grads, tape_forward, BnStats, ParamEntry, ParamKind, ParamLayout, TapeForward};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use trainer::{
    clip_grad_norm, default_bit_schedule, epoch_order, loss_and_grad, make_batch, train_qat, train_stage,
    write_log_csv, Batch, BitStage, LogRow, StageCheckpoint, TrainConfig, TrainOutcome,
};
