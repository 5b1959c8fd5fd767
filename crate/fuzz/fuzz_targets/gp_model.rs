#![no_main]
use hdpgp::gp::GpMulticlass;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = GpMulticlass::from_json(text);
});
