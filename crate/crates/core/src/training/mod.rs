//! Label assignment, losses, clip synthesis and the optimization loop.

pub mod augment;
pub mod labels;
pub mod losses;
pub mod trainer;

pub use augment::{synthesize_clip, AffineRanges, AffineTransform, TrainClip};
pub use labels::{assign_labels, sim_target, InstanceAnnotation, LabelAssignment};
pub use losses::{dice_loss, focal_loss, LossReport};
pub use trainer::{clip_loss, prepare_clip, train, LossConfig, PreparedClip, TrainConfig, TrainOutcome};
