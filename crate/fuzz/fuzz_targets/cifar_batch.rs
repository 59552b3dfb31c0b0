#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::data::parse_cifar10_batch;

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, labels)) = parse_cifar10_batch(data) {
        assert_eq!(pixels.len(), labels.len() * 3072);
        assert!(labels.iter().all(|&l| l < 10));
    }
});
