//! Run configuration: one struct covering data generation, architecture,
//! optimization, loss weighting, pool parameters, and ablation switches.
//!
//! Defaults are the desk-scale toy profile; [`RunConfig::paper_profile`]
//! switches the consistency-module sizes to the full-scale values
//! (`c' = 64`, `j = 256`, `i = 12800`, 15000 iterations).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::SimilarityKind;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    // Dataset.
    pub count: usize,
    pub size: usize,
    pub difficulty: f64,
    pub labeled_fraction: f64,
    pub crop: usize,

    // Architecture.
    pub hidden: usize,
    pub classes: usize,
    /// Projection width c'.
    pub proj_dim: usize,

    // Optimizer and schedule.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Total iterations t_max.
    pub iters: usize,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub beta: f64,

    // Feature pool.
    /// Slots per labeled instance (split evenly across classes).
    pub pool_slots: usize,
    /// Fusion weight for slot updates.
    pub alpha: f64,
    /// Anchors drawn per class (j).
    pub anchors_per_class: usize,
    /// Unlabeled features kept per class (i).
    pub top_per_class: usize,
    pub low_conf_fraction: f64,

    // Ablation switches.
    pub ccm_on: bool,
    pub dfp_on: bool,
    pub similarity: SimilarityKind,
    /// Labeled fractions swept by the ablation grid.
    pub ablate_fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            count: 100,
            size: 32,
            difficulty: 0.5,
            labeled_fraction: 0.05,
            crop: 16,
            hidden: 8,
            classes: 2,
            proj_dim: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iters: 3000,
            lambda_c: 0.1,
            lambda_d: 0.1,
            beta: 1.0,
            pool_slots: 4,
            alpha: 0.9,
            anchors_per_class: 8,
            top_per_class: 64,
            low_conf_fraction: 0.1,
            ccm_on: true,
            dfp_on: true,
            similarity: SimilarityKind::Coral,
            ablate_fractions: vec![0.05],
        }
    }
}

impl RunConfig {
    /// Full-scale consistency-module sizes; everything else keeps the shared
    /// optimizer and loss settings.
    pub fn paper_profile(mut self) -> Self {
        self.proj_dim = 64;
        self.anchors_per_class = 256;
        self.top_per_class = 12800;
        self.iters = 15000;
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}
