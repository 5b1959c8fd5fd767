#![no_main]
use hdpgp::codebook::{decode_flo, encode_flo};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(field) = decode_flo(data) {
        let bytes = encode_flo(&field);
        assert_eq!(bytes, data);
    }
});
