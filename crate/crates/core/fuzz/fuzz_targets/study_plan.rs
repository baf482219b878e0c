#![no_main]

use libfuzzer_sys::fuzz_target;
use codamed::experiment::StudyPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = StudyPlan::from_json(text) {
        for cell in &plan.cells {
            let _ = plan.resolve(cell);
        }
    }
});
