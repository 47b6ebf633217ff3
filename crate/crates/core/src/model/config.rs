use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex;

/// Shape of the tree network and its fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of branch levels below the shallow extractor.
    pub tree_depth: usize,
    /// Children per branch node.
    pub branching: usize,
    pub residual_groups: usize,
    pub blocks_per_group: usize,
    /// Feature width.
    pub channels: usize,
    /// Upscaling factor, one of 2, 3, 4, 8.
    pub scale: usize,
    /// Channel-attention squeeze ratio.
    pub reduction: usize,
    /// Node-level and shallow-to-leaf skips; off for the ablation.
    pub deep_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tree_depth: 2,
            branching: 2,
            residual_groups: 2,
            blocks_per_group: 4,
            channels: 64,
            scale: 4,
            reduction: 16,
            deep_residual: true,
        }
    }
}

pub const SUPPORTED_SCALES: [usize; 4] = [2, 3, 4, 8];

/// Largest number of leaves a config may request.
const MAX_LEAVES: usize = 4096;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tree_depth", self.tree_depth),
            ("branching", self.branching),
            ("residual_groups", self.residual_groups),
            ("blocks_per_group", self.blocks_per_group),
            ("channels", self.channels),
            ("reduction", self.reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return Err(Error::Config(format!(
                "model.scale must be one of {SUPPORTED_SCALES:?}, got {}",
                self.scale
            )));
        }
        if !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "model.channels ({}) must be divisible by model.reduction ({})",
                self.channels, self.reduction
            )));
        }
        match self.branching.checked_pow(self.tree_depth as u32) {
            Some(p) if p <= MAX_LEAVES => Ok(()),
            _ => Err(Error::Config(format!(
                "branching^tree_depth exceeds {MAX_LEAVES} leaves"
            ))),
        }
    }

    /// Number of predictions, `branching^tree_depth`.
    pub fn leaves(&self) -> usize {
        self.branching.pow(self.tree_depth as u32)
    }

    /// Total branch nodes across all levels.
    pub fn branch_nodes(&self) -> usize {
        (1..=self.tree_depth)
            .map(|l| self.branching.pow(l as u32))
            .sum()
    }

    pub fn canonical(&self) -> String {
        format!(
            "tree_depth={};branching={};residual_groups={};blocks_per_group={};channels={};scale={};reduction={};deep_residual={}",
            self.tree_depth,
            self.branching,
            self.residual_groups,
            self.blocks_per_group,
            self.channels,
            self.scale,
            self.reduction,
            self.deep_residual
        )
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Sub-pixel stages: one `scale^2` stage, or three x2 stages for x8.
    pub(crate) fn upsample_stages(&self) -> Vec<usize> {
        if self.scale == 8 {
            vec![2, 2, 2]
        } else {
            vec![self.scale]
        }
    }
}

/// All leaf paths of a tree, in lexicographic order.
pub fn leaf_paths(depth: usize, branching: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..depth {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..branching).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

/// `0.1` style path label; digits are concatenated when every index is a
/// single digit.
pub fn path_label(path: &[usize]) -> String {
    if path.iter().all(|&c| c < 10) {
        path.iter().map(|c| c.to_string()).collect()
    } else {
        path.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")
    }
}
