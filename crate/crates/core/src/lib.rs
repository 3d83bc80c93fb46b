pub mod atlas;
pub mod error;
pub mod evaluation;
pub mod localization;
pub mod normalization;
pub mod phantom;
pub mod pipeline;
pub mod region;
pub mod segmentation;
pub mod staging;
pub mod volume;
