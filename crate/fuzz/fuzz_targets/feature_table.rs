#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::eval::FeatureTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = FeatureTable::from_bytes(data) {
        assert_eq!(table.features.len(), table.len() * table.dim);
        let bytes = table.to_bytes();
        assert_eq!(FeatureTable::from_bytes(&bytes).expect("own output parses").to_bytes(), bytes);
    }
});
