//! Desk-scale fine-tuning engine for vision transformers.
//!
//! The crate is organized around a small dense-tensor reverse-mode autodiff
//! substrate (`tensor`, `graph`), a ViT model built on it (`vit`), the input
//! augmentation pipeline (`augment`), an AdamW optimizer with layer-wise
//! learning-rate decay and EMA shadow weights (`optim`), and an epoch-driven
//! training loop (`trainer`). `data` and `archive` provide dataset ingestion
//! and a binary named-tensor format for weights and checkpoints.

pub mod archive;
pub mod augment;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod img;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use tensor::{DType, Scalar, Tensor};
