#![no_main]

use libfuzzer_sys::fuzz_target;
use psl_core::data::parse_stl10;

const IMAGE: usize = 3 * 96 * 96;

fuzz_target!(|data: &[u8]| {
    let _ = parse_stl10(data, None);
    // Trailing bytes beyond the whole images are read as labels.
    let images = data.len() / (IMAGE + 1);
    let (x, y) = data.split_at(images * IMAGE);
    if let Ok((pixels, labels)) = parse_stl10(x, Some(y)) {
        assert_eq!(pixels.len(), labels.len() * IMAGE);
    }
});
