use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

use psl_core::checkpoint::{is_head_group, Checkpoint};
use psl_core::data::Dataset;
use psl_core::engine::{read_log, run_plan, LogRecord, RunOptions, LOG_FILE};
use psl_core::eval::{
    class_balanced_subset, extract_block_features, linear_probe, semi_supervised_finetune, FeatureTable,
    FinetuneSummary, ProbeReport, ProbeSchedule, Protocol,
};
use psl_core::model::backbone::Backbone;
use psl_core::tasks::permutation::hamming_stats;
use psl_core::tasks::{generate_permutation_set, nest_levels};

use crate::cli::{Command, ConfigArgs, ConfigSource, EvalArgs, FetchArgs, PermsetArgs, ReportArgs, TrainArgs};
use crate::config::{self, ExperimentConfig, ProtocolName};
use crate::experiment::Experiment;
use crate::lock::RunLock;
use crate::{fetch, Classify, Failure};

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_FILE: &str = "report.json";

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Permset(a) => permset(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
        Command::Fetch(a) => fetch_cmd(&a),
        Command::Config(a) => print_config(&a),
        Command::Schema => {
            print!("{}", config::json_schema());
            Ok(())
        }
    }
}

pub fn resolve(source: &ConfigSource) -> Result<ExperimentConfig, Failure> {
    let sources = source.sources().config_err()?;
    config::resolve(&sources).config_err()
}

pub fn experiment(source: &ConfigSource) -> Result<Experiment, Failure> {
    Experiment::build(resolve(source)?).config_err()
}

#[derive(Debug, Serialize)]
struct LevelStats {
    cardinality: usize,
    file: String,
    mean_hamming: f64,
    min_hamming: usize,
    max_hamming: usize,
}

#[derive(Debug, Serialize)]
struct PermsetStats {
    n: usize,
    seed: u64,
    min_hamming: usize,
    levels: Vec<LevelStats>,
}

pub fn permset_file_name(n: usize, cardinality: usize) -> String {
    format!("perm_n{n}_c{cardinality}.csv")
}

fn permset(args: &PermsetArgs) -> Result<(), Failure> {
    let min_hamming = args.min_hamming.unwrap_or(args.n.min(3));
    let mut levels = args.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let largest = *levels.last().ok_or_else(|| Failure::Config(anyhow!("--levels is empty")))?;
    let started = Instant::now();
    let base = generate_permutation_set(args.n, largest, args.seed, min_hamming).config_err()?;
    let sets = nest_levels(&base, &levels).config_err()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .runtime_err()?;
    let mut stats = Vec::new();
    for set in &sets {
        let file = permset_file_name(args.n, set.len());
        let path = args.out.join(&file);
        std::fs::write(&path, set.to_csv())
            .with_context(|| format!("writing {}", path.display()))
            .runtime_err()?;
        let h = hamming_stats(set.members());
        println!(
            "{file}: {} permutations, Hamming mean {:.3} min {} max {}",
            set.len(),
            h.mean,
            h.min,
            h.max
        );
        stats.push(LevelStats {
            cardinality: set.len(),
            file,
            mean_hamming: h.mean,
            min_hamming: h.min,
            max_hamming: h.max,
        });
    }
    let summary = PermsetStats {
        n: args.n,
        seed: args.seed,
        min_hamming,
        levels: stats,
    };
    let text = serde_json::to_string_pretty(&summary).expect("stats serialize") + "\n";
    std::fs::write(args.out.join("stats.json"), text).runtime_err()?;
    println!("generated in {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let exp = experiment(&args.source)?;
    exp.config.dataset_root().config_err()?;
    let run_dir = exp.config.run_dir();
    let _lock = RunLock::acquire(&run_dir).runtime_err()?;
    let log_path = run_dir.join(LOG_FILE);
    let resume = args.resume.as_ref().map(|p| {
        if p.exists() {
            p.clone()
        } else {
            run_dir.join(p)
        }
    });
    if let Some(path) = &resume {
        let ckpt = Checkpoint::load(path).runtime_err()?;
        if ckpt.header.config_hash != exp.hash {
            return Err(Failure::Runtime(anyhow!(
                "{} was written under config {}, this run resolves to {}",
                path.display(),
                ckpt.header.config_hash,
                exp.hash
            )));
        }
    }
    if resume.is_none() && log_path.exists() {
        if !args.overwrite {
            return Err(Failure::Config(anyhow!(
                "{} already holds a run; pass --resume CKPT or --overwrite",
                run_dir.display()
            )));
        }
        clear_run(&run_dir).runtime_err()?;
    }
    let mut text = format!("# config_hash = \"{}\"\n", exp.hash);
    text.push_str(&exp.config.to_toml());
    std::fs::write(run_dir.join(CONFIG_FILE), text).runtime_err()?;

    let (data, _) = exp.load_data().runtime_err()?;
    log::info!(
        "{} {} on {} ({} images), {} stage(s)",
        exp.plan.mode,
        exp.plan.family,
        data.id(),
        data.len(),
        exp.plan.num_stages()
    );
    let opts = RunOptions {
        run_id: exp.config.run_id.clone(),
        config_hash: exp.hash.clone(),
        run_dir: Some(run_dir.clone()),
        resume,
    };
    let out = run_plan(&exp.plan, &exp.backbone, &data, &opts).runtime_err()?;
    print!("{}", summarize_log(&out.log));
    for c in &out.checkpoints {
        println!("wrote {}", c.display());
    }
    Ok(())
}

fn clear_run(dir: &Path) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name == LOG_FILE || name.ends_with(".ckpt") {
            std::fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn file_id(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(format!("{name}@{}", &hex::encode(Sha256::digest(&bytes))[..12]))
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let mut exp = experiment(&args.source)?;
    exp.config.dataset_root().config_err()?;
    if !args.blocks.is_empty() {
        exp.config.eval.blocks = args.blocks.clone();
    }
    for b in &exp.config.eval.blocks {
        exp.plan.partition.block_by_name(b).config_err()?;
    }
    let run_dir = exp.config.run_dir();
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| run_dir.join(FINAL_CHECKPOINT));
    let ckpt = Checkpoint::load(&ckpt_path).runtime_err()?;
    let mut backbone = Backbone::new(&exp.backbone).config_err()?;
    ckpt.restore_into(&mut backbone)
        .with_context(|| format!("{} does not fit the configured backbone", ckpt_path.display()))
        .config_err()?;
    if ckpt.header.config_hash != exp.hash {
        log::warn!("{} was trained under config {}, evaluating under {}", ckpt_path.display(), ckpt.header.config_hash, exp.hash);
    }
    let out_dir = args.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    let _lock = RunLock::acquire(&out_dir).runtime_err()?;
    let (train, test) = exp.load_data().runtime_err()?;
    let id = file_id(&ckpt_path).runtime_err()?;
    let report = evaluate(&exp, &backbone, &id, &train, &test, Some(&out_dir.join("features"))).runtime_err()?;
    std::fs::write(out_dir.join(REPORT_FILE), report.to_json() + "\n").runtime_err()?;
    print!("{}", report.render_table());
    println!("wrote {}", out_dir.join(REPORT_FILE).display());
    Ok(())
}

pub fn feature_file(dir: &Path, prefix: &str, block: &str, split: &str) -> PathBuf {
    dir.join(format!("{prefix}{block}.{split}.feat"))
}

/// Runs the configured protocol on `backbone` and, when `feature_dir` is set,
/// writes every extracted feature table there.
pub fn evaluate(
    exp: &Experiment,
    backbone: &Backbone,
    checkpoint_id: &str,
    train: &Dataset,
    test: &Dataset,
    feature_dir: Option<&Path>,
) -> anyhow::Result<ProbeReport> {
    let eval = &exp.config.eval;
    let partition = &exp.plan.partition;
    let mut report = ProbeReport {
        protocol: match eval.protocol {
            ProtocolName::FrozenLinear => Protocol::FrozenLinear,
            ProtocolName::Finetune => Protocol::Finetune,
        },
        dataset_id: train.id().to_string(),
        checkpoint_id: checkpoint_id.to_string(),
        config_hash: exp.hash.clone(),
        block_accuracies: BTreeMap::new(),
        baseline_accuracies: BTreeMap::new(),
        train_samples: train.len(),
        test_samples: test.len(),
        finetune: Vec::new(),
    };
    let random = Backbone::new(&exp.backbone)?;
    match eval.protocol {
        ProtocolName::FrozenLinear => {
            let blocks: Vec<String> = if eval.blocks.is_empty() {
                partition.blocks().iter().map(|b| b.name.clone()).collect()
            } else {
                eval.blocks.clone()
            };
            if let Some(dir) = feature_dir {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let schedule = exp.probe_schedule();
            let mut nets = vec![("", backbone.clone(), &mut report.block_accuracies)];
            if eval.baseline {
                nets.push(("baseline.", random, &mut report.baseline_accuracies));
            }
            for (prefix, mut net, accuracies) in nets {
                for block in &blocks {
                    let tr = extract_block_features(&mut net, partition, block, train)?;
                    let te = extract_block_features(&mut net, partition, block, test)?;
                    if let Some(dir) = feature_dir {
                        std::fs::write(feature_file(dir, prefix, block, "train"), tr.to_bytes())?;
                        std::fs::write(feature_file(dir, prefix, block, "test"), te.to_bytes())?;
                    }
                    let r = linear_probe(&tr, &te, &schedule)?;
                    log::info!("{prefix}{block}: probe top-1 {:.2}%", 100.0 * r.test_accuracy);
                    accuracies.insert(block.clone(), r.test_accuracy);
                }
            }
        }
        ProtocolName::Finetune => {
            let schedule = exp.finetune_schedule();
            for &fraction in &eval.finetune.fractions {
                let (_, indices) = class_balanced_subset(train.labels(), fraction, eval.finetune.seed)?;
                let subset = train.subset(&indices)?;
                let pretrained = semi_supervised_finetune(backbone, &subset, test, &schedule)?;
                log::info!("finetune {:.0}% pretrained: top-1 {:.2}%", 100.0 * fraction, 100.0 * pretrained.top1);
                let random_init = if eval.finetune.random_init_baseline {
                    let r = semi_supervised_finetune(&random, &subset, test, &schedule)?;
                    log::info!("finetune {:.0}% random-init: top-1 {:.2}%", 100.0 * fraction, 100.0 * r.top1);
                    Some(r)
                } else {
                    None
                };
                report.finetune.push(FinetuneSummary {
                    fraction,
                    pretrained,
                    random_init,
                });
            }
        }
    }
    Ok(report)
}

/// Per-stage summary of a training log.
pub fn summarize_log(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        match r {
            LogRecord::Header {
                run_id,
                config_hash,
                mode,
                family,
                seed,
                ..
            } => out.push_str(&format!(
                "run {run_id}: {mode} {family}, seed {seed}, config {}\n",
                &config_hash[..config_hash.len().min(12)]
            )),
            LogRecord::StageSummary {
                stage,
                level,
                steps,
                first_epoch_loss,
                last_epoch_loss,
                checkpoint,
            } => out.push_str(&format!(
                "stage {stage}: level {level}, {steps} steps, loss {first_epoch_loss:.4} -> {last_epoch_loss:.4}{}\n",
                checkpoint.as_deref().map(|c| format!(", {c}")).unwrap_or_default()
            )),
            LogRecord::Step { .. } => {}
        }
    }
    out
}

pub fn summarize_checkpoint(ckpt: &Checkpoint) -> String {
    let h = &ckpt.header;
    let heads = ckpt.groups().iter().filter(|g| is_head_group(g)).count();
    format!(
        "checkpoint of run {}: stage {} complete at step {}, config {}\n{} blocks, {} parameters, {} head groups\n{}",
        h.run_id,
        h.stage_completed,
        h.step,
        &h.config_hash[..h.config_hash.len().min(12)],
        h.backbone.blocks.len(),
        ckpt.param_count(),
        heads,
        h.partition_summary
    )
}

/// Rechecks report totals against stored feature tables and refits every
/// probe. Returns the discrepancies found.
pub fn verify_report(report: &ProbeReport, dir: &Path, schedule: &ProbeSchedule) -> anyhow::Result<Vec<String>> {
    let mut problems = Vec::new();
    let maps = [("", &report.block_accuracies), ("baseline.", &report.baseline_accuracies)];
    for (prefix, map) in maps {
        for (block, &reported) in map {
            let load = |split: &str| -> anyhow::Result<FeatureTable> {
                let path = feature_file(dir, prefix, block, split);
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                Ok(FeatureTable::from_bytes(&bytes)?)
            };
            let (tr, te) = (load("train")?, load("test")?);
            if tr.len() != report.train_samples || te.len() != report.test_samples {
                problems.push(format!(
                    "{prefix}{block}: tables hold {}/{} rows, report says {}/{}",
                    tr.len(),
                    te.len(),
                    report.train_samples,
                    report.test_samples
                ));
                continue;
            }
            let refit = linear_probe(&tr, &te, schedule)?;
            if refit.test_accuracy != reported {
                problems.push(format!(
                    "{prefix}{block}: refit gives {:.4}, report says {reported:.4}",
                    refit.test_accuracy
                ));
            }
        }
    }
    Ok(problems)
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let exp = if args.source.is_empty() {
        None
    } else {
        Some(experiment(&args.source)?)
    };
    if args.paths.is_empty() {
        let Some(exp) = &exp else {
            return Err(Failure::Config(anyhow!("nothing to report: give files or a configuration")));
        };
        println!("{} {} with stage width {}", exp.plan.mode, exp.plan.family, exp.plan.partition.width());
        print!("{}", exp.plan.effective_partition().config_err()?.summary_table());
        for i in 1..=exp.plan.num_stages() {
            let stage = exp.plan.stage(i).config_err()?;
            let level = exp.plan.level_for(i).config_err()?;
            let names: Vec<String> = stage.blocks.iter().map(|b| format!("B{b}")).collect();
            println!("S{i}: {} -> {}", names.join(","), level.describe());
        }
        return Ok(());
    }
    for path in &args.paths {
        let name = path.to_string_lossy();
        if name.ends_with(".jsonl") {
            let records = read_log(path).runtime_err()?;
            print!("{}", summarize_log(&records));
        } else if name.ends_with(".ckpt") {
            let ckpt = Checkpoint::load(path).runtime_err()?;
            print!("{}", summarize_checkpoint(&ckpt));
        } else {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .runtime_err()?;
            let report = ProbeReport::from_json(&text).runtime_err()?;
            if let Some(exp) = &exp {
                report.validate(&exp.plan.partition).runtime_err()?;
            }
            print!("{}", report.render_table());
            if let Some(dir) = &args.features {
                let schedule = exp.as_ref().map(Experiment::probe_schedule).unwrap_or_default();
                let problems = verify_report(&report, dir, &schedule).runtime_err()?;
                if !problems.is_empty() {
                    return Err(Failure::Runtime(anyhow!("report does not match its features:\n{}", problems.join("\n"))));
                }
                println!("feature tables agree with the report");
            }
        }
    }
    Ok(())
}

fn fetch_cmd(args: &FetchArgs) -> Result<(), Failure> {
    let source = fetch::source(&args.dataset).config_err()?;
    let dir = fetch::fetch(&source, &args.dest, args.url.as_deref(), args.archive.as_deref(), args.md5.as_deref())
        .runtime_err()?;
    println!("{} ready in {}", source.name, dir.display());
    Ok(())
}

fn print_config(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.source)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
    } else {
        println!("# config_hash = \"{}\"", cfg.hash());
        print!("{}", cfg.to_toml());
    }
    Ok(())
}

