//! Overlapping stage windows over a block-structured backbone.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// 1-based.
    pub index: usize,
    pub name: String,
    pub output_resolution: usize,
    pub channels: usize,
    pub param_group_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// 1-based.
    pub index: usize,
    /// 1-based block indices, contiguous and ascending.
    pub blocks: Vec<usize>,
    pub head_id: String,
}

impl Stage {
    pub fn first_block(&self) -> usize {
        self.blocks[0]
    }

    pub fn last_block(&self) -> usize {
        self.blocks[self.blocks.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    blocks: Vec<BlockSpec>,
    stages: Vec<Stage>,
    width: usize,
}

/// Which layers a stage loss may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradientScope {
    /// Only the stage window (PSL, SL).
    Local,
    /// Every block (PSL_f).
    Full,
}

impl FromStr for GradientScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psl" | "sl" | "local" => Ok(GradientScope::Local),
            "psl_f" | "pslf" | "full" | "e2e" => Ok(GradientScope::Full),
            other => Err(Error::invalid(format!("unknown gradient mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSelector {
    pub included_param_groups: BTreeSet<String>,
}

impl ParamSelector {
    pub fn contains(&self, group: &str) -> bool {
        self.included_param_groups.contains(group)
    }

    pub fn is_subset_of(&self, other: &ParamSelector) -> bool {
        self.included_param_groups.is_subset(&other.included_param_groups)
    }
}

pub fn make_stages(blocks: &[BlockSpec], width: usize) -> Result<StagePartition> {
    if width < 1 || width > blocks.len() {
        return Err(Error::invalid(format!(
            "stage width {width} must lie in 1..={}",
            blocks.len()
        )));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.index != i + 1 {
            return Err(Error::invalid(format!(
                "block `{}` has index {}, expected {}",
                b.name,
                b.index,
                i + 1
            )));
        }
        if i > 0 && b.output_resolution > blocks[i - 1].output_resolution {
            return Err(Error::invalid(format!(
                "block `{}` increases resolution ({} > {})",
                b.name,
                b.output_resolution,
                blocks[i - 1].output_resolution
            )));
        }
    }
    let stages = (1..=blocks.len() - width + 1)
        .map(|i| Stage {
            index: i,
            blocks: (i..i + width).collect(),
            head_id: format!("g{i}"),
        })
        .collect();
    Ok(StagePartition {
        blocks: blocks.to_vec(),
        stages,
        width,
    })
}

impl StagePartition {
    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, index: usize) -> Result<&Stage> {
        index
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| Error::invalid(format!("stage {index} out of range 1..={}", self.stages.len())))
    }

    pub fn block_by_name(&self, name: &str) -> Result<&BlockSpec> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown block `{name}`")))
    }

    /// Stage indices whose window contains the block.
    pub fn stages_containing(&self, block_index: usize) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|s| s.blocks.contains(&block_index))
            .map(|s| s.index)
            .collect()
    }

    /// Text table: block, resolution, channels, stages containing it.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>10} {:>9}  stages", "block", "resolution", "channels");
        for b in &self.blocks {
            let stages: Vec<String> = self.stages_containing(b.index).iter().map(|s| format!("S{s}")).collect();
            let _ = writeln!(
                out,
                "{:<6} {:>10} {:>9}  {}",
                b.name,
                format!("{0}x{0}", b.output_resolution),
                b.channels,
                stages.join(",")
            );
        }
        out
    }
}

impl fmt::Display for StagePartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary_table())
    }
}

pub fn trainable_set(partition: &StagePartition, stage_index: usize, scope: GradientScope) -> Result<ParamSelector> {
    let stage = partition.stage(stage_index)?;
    let mut groups: BTreeSet<String> = match scope {
        GradientScope::Local => stage
            .blocks
            .iter()
            .map(|&b| partition.blocks[b - 1].param_group_id.clone())
            .collect(),
        GradientScope::Full => partition.blocks.iter().map(|b| b.param_group_id.clone()).collect(),
    };
    groups.insert(stage.head_id.clone());
    Ok(ParamSelector {
        included_param_groups: groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn specs(n: usize) -> Vec<BlockSpec> {
        (1..=n)
            .map(|i| BlockSpec {
                index: i,
                name: format!("B{i}"),
                output_resolution: 64 >> i.min(5),
                channels: 8 * i,
                param_group_id: format!("B{i}"),
            })
            .collect()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn five_blocks_width_three() {
        let p = make_stages(&specs(5), 3).unwrap();
        let windows: Vec<_> = p.stages().iter().map(|s| s.blocks.clone()).collect();
        assert_eq!(windows, vec![vec![1, 2, 3], vec![2, 3, 4], vec![3, 4, 5]]);
        assert_eq!(
            trainable_set(&p, 2, GradientScope::Local).unwrap().included_param_groups,
            set(&["B2", "B3", "B4", "g2"])
        );
        assert_eq!(
            trainable_set(&p, 3, GradientScope::Full).unwrap().included_param_groups,
            set(&["B1", "B2", "B3", "B4", "B5", "g3"])
        );
        assert_eq!(
            trainable_set(&p, 1, GradientScope::Local).unwrap(),
            ParamSelector {
                included_param_groups: set(&["B1", "B2", "B3", "g1"])
            }
        );
    }

    #[test]
    fn width_bounds() {
        assert!(make_stages(&specs(3), 0).is_err());
        assert!(make_stages(&specs(3), 4).is_err());
        assert_eq!(make_stages(&specs(3), 3).unwrap().num_stages(), 1);
        let p = make_stages(&specs(3), 1).unwrap();
        assert!(trainable_set(&p, 4, GradientScope::Local).is_err());
        assert!(trainable_set(&p, 0, GradientScope::Local).is_err());
    }

    #[test]
    fn increasing_resolution_is_rejected() {
        let mut s = specs(3);
        s[2].output_resolution = 100;
        assert!(make_stages(&s, 2).is_err());
    }

    #[test]
    fn mode_strings() {
        assert_eq!("PSL_f".parse::<GradientScope>().unwrap(), GradientScope::Full);
        assert_eq!("psl".parse::<GradientScope>().unwrap(), GradientScope::Local);
        assert!("other".parse::<GradientScope>().is_err());
    }

    #[test]
    fn summary_lists_stage_membership() {
        let table = make_stages(&specs(5), 3).unwrap().summary_table();
        assert!(table.contains("B3"));
        assert!(table.lines().any(|l| l.starts_with("B3") && l.ends_with("S1,S2,S3")));
    }
}
