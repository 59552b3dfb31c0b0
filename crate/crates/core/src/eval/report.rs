use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::FinetuneResult;
use crate::error::{Error, Result};
use crate::partition::StagePartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    FrozenLinear,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSummary {
    pub fraction: f64,
    pub pretrained: FinetuneResult,
    pub random_init: Option<FinetuneResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub protocol: Protocol,
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub config_hash: String,
    /// Block name to held-out top-1 accuracy.
    pub block_accuracies: BTreeMap<String, f64>,
    /// Same probes on a randomly initialized backbone.
    pub baseline_accuracies: BTreeMap<String, f64>,
    pub train_samples: usize,
    pub test_samples: usize,
    /// One entry per labeled fraction.
    #[serde(default)]
    pub finetune: Vec<FinetuneSummary>,
}

impl ProbeReport {
    pub fn from_json(text: &str) -> Result<Self> {
        let report: ProbeReport = serde_json::from_str(text).map_err(|e| Error::format("probe report", e.to_string()))?;
        report.check_ranges()?;
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn check_ranges(&self) -> Result<()> {
        let bad = self
            .block_accuracies
            .iter()
            .chain(&self.baseline_accuracies)
            .find(|(_, &a)| !(0.0..=1.0).contains(&a));
        if let Some((b, a)) = bad {
            return Err(Error::format("probe report", format!("accuracy {a} for {b} outside [0, 1]")));
        }
        for ft in &self.finetune {
            let scores = std::iter::once(&ft.pretrained).chain(&ft.random_init);
            if !(ft.fraction > 0.0 && ft.fraction <= 1.0)
                || scores.into_iter().any(|r| !(0.0..=1.0).contains(&r.top1) || !(0.0..=1.0).contains(&r.top5))
            {
                return Err(Error::format("probe report", format!("finetune entry for fraction {} out of range", ft.fraction)));
            }
        }
        Ok(())
    }

    /// Ranges plus block membership in `partition`.
    pub fn validate(&self, partition: &StagePartition) -> Result<()> {
        self.check_ranges()?;
        for b in self.block_accuracies.keys().chain(self.baseline_accuracies.keys()) {
            partition.block_by_name(b)?;
        }
        Ok(())
    }

    /// Block with the highest pretrained accuracy.
    pub fn best_block(&self) -> Option<(&str, f64)> {
        self.block_accuracies
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, &v)| (k.as_str(), v))
    }

    /// Block names in numeric order (B2 before B10).
    fn ordered_blocks(&self) -> Vec<&String> {
        let mut names: Vec<&String> = self.block_accuracies.keys().chain(self.baseline_accuracies.keys()).collect();
        names.sort_by_key(|n| (n.trim_start_matches(|c: char| !c.is_ascii_digit()).parse::<usize>().unwrap_or(usize::MAX), n.to_string()));
        names.dedup();
        names
    }

    /// Per-block table: one row per model, one column per block, top-1 in %.
    pub fn render_table(&self) -> String {
        let blocks = self.ordered_blocks();
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}  checkpoint: {}  protocol: {:?}", self.dataset_id, self.checkpoint_id, self.protocol);
        let _ = write!(out, "{:<12}", "Method");
        for b in &blocks {
            let _ = write!(out, "{b:>8}");
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, map: &BTreeMap<String, f64>| {
            let _ = write!(out, "{name:<12}");
            for b in &blocks {
                match map.get(*b) {
                    Some(a) => {
                        let _ = write!(out, "{:>8.1}", 100.0 * a);
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            out.push('\n');
        };
        row(&mut out, "pretrained", &self.block_accuracies);
        if !self.baseline_accuracies.is_empty() {
            row(&mut out, "random-init", &self.baseline_accuracies);
            let delta: BTreeMap<String, f64> = self
                .block_accuracies
                .iter()
                .filter_map(|(k, v)| self.baseline_accuracies.get(k).map(|b| (k.clone(), v - b)))
                .collect();
            let _ = write!(out, "{:<12}", "delta");
            for b in &blocks {
                match delta.get(*b) {
                    Some(d) => {
                        let _ = write!(out, "{:>+8.1}", 100.0 * d);
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for ft in &self.finetune {
            let _ = writeln!(
                out,
                "finetune {:.0}%: top-1 {:.1} top-5 {:.1}",
                100.0 * ft.fraction,
                100.0 * ft.pretrained.top1,
                100.0 * ft.pretrained.top5
            );
            if let Some(r) = &ft.random_init {
                let _ = writeln!(out, "  random-init: top-1 {:.1} top-5 {:.1}", 100.0 * r.top1, 100.0 * r.top5);
            }
        }
        out
    }
}
