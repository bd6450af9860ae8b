//! Multimodal facial-activity recognition from a sensor cap: pressure and
//! piezo mechanomyography, an IMU and a stereo microphone pair.
//!
//! The pipeline runs ingest → per-sensor preprocessing → four sensor
//! networks fused late by a small ensemble head, or a single hybrid network
//! with per-modality inception blocks, evaluated leave-one-session-out.

pub mod domain;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod models;
pub mod nnet;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
