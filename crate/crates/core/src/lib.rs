//! Cluster-path analysis of feed-forward classifiers and the tiered selective
//! ensemble built on top of it.
//!
//! The pipeline: train small networks per partition ([`nn`]), cluster every
//! layer's activations ([`clustering`]), follow each point's path of clusters
//! and filter confident ("good") points ([`path_analysis`]), combine the
//! networks into a three-tier ensemble ([`ensemble`]), render features
//! ([`features`]) and check the accompanying counting and coverage bounds
//! ([`bounds`]). [`io`], [`config`] and [`pipeline`] wire it together.

pub mod bounds;
pub mod clustering;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod io;
pub mod nn;
pub mod path_analysis;
pub mod pipeline;
pub mod synthetic;

pub use data::Dataset;
pub use error::{Error, Result};
