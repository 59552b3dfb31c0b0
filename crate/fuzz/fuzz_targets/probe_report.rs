#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::eval::ProbeReport;

fuzz_target!(|data: &str| {
    if let Ok(report) = ProbeReport::from_json(data) {
        let _ = report.render_table();
        assert_eq!(ProbeReport::from_json(&report.to_json()).expect("own output parses"), report);
    }
});
