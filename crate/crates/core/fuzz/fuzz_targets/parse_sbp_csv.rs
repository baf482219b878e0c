#![no_main]

use libfuzzer_sys::fuzz_target;
use codamed::coda::basis_from_sbp;
use codamed::io::{parse_sbp_csv, write_sbp_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sbp) = parse_sbp_csv(text) {
        // accepted matrices must survive a write/read cycle and yield a basis
        let again = parse_sbp_csv(&write_sbp_csv(&sbp)).expect("round trip");
        assert_eq!(sbp, again);
        let basis = basis_from_sbp(&sbp);
        assert_eq!(basis.num_balances() + 1, basis.num_parts());
    }
});
