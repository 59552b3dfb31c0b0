#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // A header that parses must describe a backbone we can rebuild or
        // reject cleanly.
        let _ = ckpt.to_backbone();
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes).is_ok());
    }
});
