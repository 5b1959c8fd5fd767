#![no_main]
use hdpgp::representation::read_features;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_features(data, "fuzz");
});
