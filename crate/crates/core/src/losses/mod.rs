//! Target assignment and the training loss stack.

pub mod clip;
pub mod functions;
pub mod hungarian;
pub mod matching;
pub mod targets;
pub mod total;

pub use clip::{align_clip_targets, clip_segmentation_losses};
pub use functions::{ce_mask_loss, dice_loss, focal_loss, track_aux_loss, track_contrastive_loss, FocalParams};
pub use hungarian::{min_cost_assignment, CostMatrix};
pub use matching::{
    assign_track_pairs, hungarian_match, matching_costs, CostWeights, MatchResult, PairThresholds, SamplingMode,
    ThingPredictions, TrackPairLabels,
};
pub use targets::{mask_iou, FrameTargets, ThingTarget};
pub use total::{
    full_resolution_masks, segmentation_losses, total_loss, LossBundle, LossConfig, LossWeights, SegmentationLosses,
    TotalLoss,
};
