//! Weakly-supervised temporal action localization with local-global
//! background modeling.
//!
//! The pipeline: snippet features ([`feature_store`]) feed a two-branch
//! network ([`model`]) trained from video-level labels ([`training`]); the
//! attention-suppressed branch's class activation sequence is turned into
//! temporal detections ([`localization`]), fused across models
//! ([`ensemble`]), and scored by mAP over tIoU thresholds ([`evaluation`]).

pub mod ensemble;
pub mod evaluation;
pub mod feature_store;
pub mod localization;
pub mod model;
pub mod tensor_file;
pub mod training;
