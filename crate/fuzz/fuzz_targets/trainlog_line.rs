#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::engine::{check_stage_order, LogRecord};

fuzz_target!(|data: &str| {
    let records: Vec<LogRecord> = data.lines().filter_map(|l| LogRecord::parse_line(l).ok()).collect();
    let _ = check_stage_order(&records);
    for r in &records {
        let line = serde_json::to_string(r).expect("records serialize");
        assert_eq!(&LogRecord::parse_line(&line).expect("own output parses"), r);
    }
});
