//! Joint text + mask training.

mod gradcheck;
mod loss;
mod objective;
mod optim;
mod train;

pub use gradcheck::{
    finite_difference_gradcheck, gradcheck_against, perturb_parameters, CoordCheck,
    GradCheckOptions, GradCheckReport,
};
pub use loss::{
    bce_loss, bce_loss_grad, dice_loss, dice_loss_grad, dice_on_probabilities, sigmoid, text_loss,
    text_loss_grad, BCE_CLAMP, DICE_SMOOTHING,
};
pub use objective::{loss_and_grad, next_token_response, sample_layout, total_loss, LossReport, SampleLayout};
pub use optim::{clip_global_norm, global_norm, learning_rate_at, Adam};
pub use train::{train, write_loss_csv, CurvePoint, TrainConfig, TrainOutcome};
