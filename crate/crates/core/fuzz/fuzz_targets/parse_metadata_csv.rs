#![no_main]

use libfuzzer_sys::fuzz_target;
use codamed::io::parse_metadata_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_metadata_csv(text) {
        assert_eq!(m.stratum_labels().len(), m.sample_ids.len());
    }
});
