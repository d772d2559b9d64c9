//! Modular low-rank adaptation with task-common and task-specific skills.
//!
//! The crate trains small banks of LoRA modules on top of a frozen
//! transformer. Each adapted projection owns a [`adapters::SkillInventory`]
//! of shared and per-task modules plus an [`routing::AllocationMatrix`] that
//! decides, per task, how strongly each module contributes. The baselines
//! (single LoRA, task-agnostic mixture, task-indexed mixture) are special
//! cases of the same composition.

pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod composer;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod routing;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
