#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::tasks::PermutationSet;

fuzz_target!(|data: &str| {
    if let Ok(set) = PermutationSet::from_csv(data) {
        let again = PermutationSet::from_csv(&set.to_csv()).expect("own output parses");
        assert_eq!(again.members(), set.members());
    }
});
