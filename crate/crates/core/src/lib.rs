pub mod augmentation;
pub mod depth_io;
pub mod distillation;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod normalization;
pub mod par;
pub mod seed;
pub mod ssl;
pub mod tensor;
