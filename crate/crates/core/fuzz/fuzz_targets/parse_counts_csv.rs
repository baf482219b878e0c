#![no_main]

use libfuzzer_sys::fuzz_target;
use codamed::io::parse_counts_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = parse_counts_csv(text) {
        assert_eq!(t.counts.nrows(), t.sample_ids.len());
        assert_eq!(t.counts.ncols(), t.part_labels.len());
        assert!(t.counts.iter().all(|c| c.is_finite() && *c >= 0.0));
    }
});
