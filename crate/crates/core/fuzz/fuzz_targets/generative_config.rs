#![no_main]

use libfuzzer_sys::fuzz_target;
use codamed::simgen::GenerativeConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = GenerativeConfig::from_json(text) {
        let back = GenerativeConfig::from_json(&cfg.to_json()).expect("round trip");
        assert_eq!(cfg.num_parts(), back.num_parts());
        let _ = cfg.basis();
    }
});
