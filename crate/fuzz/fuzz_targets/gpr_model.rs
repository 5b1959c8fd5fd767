#![no_main]
use hdpgp::gp::ConflictRegressors;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = ConflictRegressors::from_json(text);
});
