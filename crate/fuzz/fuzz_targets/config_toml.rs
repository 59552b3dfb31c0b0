#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_cli::config::ExperimentConfig;
use psl_cli::Experiment;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = ExperimentConfig::from_toml(data) {
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).expect("own output parses");
        assert_eq!(again.hash(), cfg.hash());
        // Oversized backbones or permutation sets are legal but slow.
        if cfg.backbone.widths.iter().all(|&w| w <= 64) && cfg.train.jigsaw.levels.iter().all(|&c| c <= 64) {
            let _ = Experiment::build(cfg);
        }
    }
});
