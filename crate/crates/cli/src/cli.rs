use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::{parse_value, ModeName, Sources};

#[derive(Debug, Parser)]
#[command(name = "psl", version, about = "Stage-wise self-supervised pretraining")]
pub struct Cli {
    /// More log output; repeat for trace level.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate nested maximal-Hamming permutation sets as CSV.
    Permset(PermsetArgs),
    /// Pretrain a backbone stage by stage.
    Train(TrainArgs),
    /// Linear probes and finetuning on a trained checkpoint.
    Eval(EvalArgs),
    /// Summarize reports, training logs, checkpoints or a configured partition.
    Report(ReportArgs),
    /// Download and unpack a dataset after checking its MD5.
    Fetch(FetchArgs),
    /// Print the resolved configuration and its hash.
    Config(ConfigArgs),
    /// Print the JSON schema of the configuration file.
    Schema,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigSource {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in configuration applied beneath the file.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Override any key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Seeds both the backbone initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModeName>,
    /// Epochs per stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ModeName, String> {
    s.parse::<psl_core::engine::TrainMode>().map(ModeName::from).map_err(|e| e.to_string())
}

impl ConfigSource {
    pub fn is_empty(&self) -> bool {
        self.config.is_none() && self.preset.is_none()
    }

    pub fn sources(&self) -> anyhow::Result<Sources> {
        let mut s = Sources {
            preset: self.preset.clone(),
            file: self.config.clone(),
            env: true,
            overrides: Vec::new(),
        };
        for pair in &self.set {
            let Some((key, value)) = pair.split_once('=') else {
                anyhow::bail!("--set expects KEY=VALUE, got `{pair}`");
            };
            s.set(key.trim(), parse_value(value.trim()));
        }
        if let Some(v) = &self.run_id {
            s.set("run_id", v.as_str());
        }
        if let Some(v) = &self.output_dir {
            s.set("output_dir", v.to_string_lossy().as_ref());
        }
        if let Some(v) = self.seed {
            s.set("train.seed", v as i64);
            s.set("backbone.seed", v as i64);
        }
        if let Some(v) = self.mode {
            s.set("train.mode", psl_core::engine::TrainMode::from(v).as_str());
        }
        if let Some(v) = self.epochs {
            s.set("train.epochs", v as i64);
        }
        if let Some(v) = self.steps_per_epoch {
            s.set("train.steps_per_epoch", v as i64);
        }
        if let Some(v) = self.batch_size {
            s.set("train.batch_size", v as i64);
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct PermsetArgs {
    /// Number of permuted elements (tiles).
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    /// Nested set sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smallest pairwise Hamming distance allowed; defaults to min(3, n).
    #[arg(long)]
    pub min_hamming: Option<usize>,
    /// Output directory for `perm_n<N>_c<SIZE>.csv` files and `stats.json`.
    #[arg(long, value_name = "DIR", default_value = "permsets")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Continue from a stage checkpoint of this run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Replace an existing run in the same directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Defaults to `final.ckpt` in the run directory.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Blocks to probe, comma separated; overrides `eval.blocks`.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<String>,
    /// Defaults to `eval/` in the run directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json`, `trainlog.jsonl` or `.ckpt` files.
    pub paths: Vec<PathBuf>,
    #[command(flatten)]
    pub source: ConfigSource,
    /// Recount report totals and refit probes from the feature tables here.
    #[arg(long, value_name = "DIR")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// `cifar10` or `stl10`.
    pub dataset: String,
    #[arg(long, value_name = "DIR", default_value = "data")]
    pub dest: PathBuf,
    /// Mirror to download from.
    #[arg(long)]
    pub url: Option<String>,
    /// Use an already downloaded archive.
    #[arg(long, value_name = "FILE")]
    pub archive: Option<PathBuf>,
    /// Expected MD5 of the archive.
    #[arg(long)]
    pub md5: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Print JSON instead of TOML.
    #[arg(long)]
    pub json: bool,
}
