use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::RegionId;

/// Number of separable blocks kept in the shared trunk.
pub const TRUNK_BLOCKS: usize = 2;
pub const FULL_INPUT: usize = 288;
pub const DESK_INPUT: usize = 96;
pub const DESK_WIDTH_DIVISOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
    Fc,
    Ensemble,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" | "avg" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "fc" => Ok(Aggregation::Fc),
            "ensemble" => Ok(Aggregation::Ensemble),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Fc => "fc",
            Aggregation::Ensemble => "ensemble",
        })
    }
}

/// Architecture description. Widths follow the reference entry flow
/// (32/64 stem, 128, 256) divided by `width_divisor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub parts: Vec<RegionId>,
    pub extra_blocks_per_branch: usize,
    pub aggregation: Aggregation,
    pub input_size: usize,
    pub width_divisor: usize,
}

impl ModelConfig {
    pub fn full(parts: &[RegionId], extra_blocks: usize, aggregation: Aggregation) -> Self {
        Self {
            parts: parts.to_vec(),
            extra_blocks_per_branch: extra_blocks,
            aggregation,
            input_size: FULL_INPUT,
            width_divisor: 1,
        }
    }

    /// Reduced profile for desk-scale runs and tests: 96 px input, widths / 4.
    pub fn desk(parts: &[RegionId], extra_blocks: usize, aggregation: Aggregation) -> Self {
        Self {
            input_size: DESK_INPUT,
            width_divisor: DESK_WIDTH_DIVISOR,
            ..Self::full(parts, extra_blocks, aggregation)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() || self.parts.len() > 4 {
            return Err(Error::Config("parts must contain 1 to 4 regions".into()));
        }
        if self.parts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "parts must be unique and in nose, mouth, eyes, chin order".into(),
            ));
        }
        if self.extra_blocks_per_branch > 2 {
            return Err(Error::Config("extra_blocks_per_branch must be 0, 1 or 2".into()));
        }
        if self.width_divisor == 0 || 32 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width_divisor {} must divide 32",
                self.width_divisor
            )));
        }
        if self.input_size < (8 << self.extra_blocks_per_branch) {
            return Err(Error::Config(format!(
                "input_size {} too small for {} extra blocks",
                self.input_size, self.extra_blocks_per_branch
            )));
        }
        Ok(())
    }

    pub fn stem_widths(&self) -> (usize, usize) {
        (32 / self.width_divisor, 64 / self.width_divisor)
    }

    pub fn block_widths(&self) -> [usize; TRUNK_BLOCKS] {
        [128 / self.width_divisor, 256 / self.width_divisor]
    }

    pub fn branch_width(&self) -> usize {
        256 / self.width_divisor
    }

    /// Side length of every part map: one stride-2 stem conv, two pooled
    /// trunk blocks, then one more halving per extra branch block.
    pub fn map_size(&self) -> usize {
        let halvings = 1 + TRUNK_BLOCKS + self.extra_blocks_per_branch;
        (0..halvings).fold(self.input_size, |n, _| (n - 1) / 2 + 1)
    }

    pub fn map_resolution(&self) -> (usize, usize) {
        (self.map_size(), self.map_size())
    }

    pub fn is_ensemble(&self) -> bool {
        self.aggregation == Aggregation::Ensemble
    }

    /// Report label: a single region title, `Combined` for all four, otherwise titles joined by `+`.
    pub fn model_name(&self) -> String {
        if self.parts.len() == 4 {
            return "Combined".into();
        }
        self.parts.iter().map(|r| r.title()).collect::<Vec<_>>().join("+")
    }
}
