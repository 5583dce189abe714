#![no_main]
use conesrecon::io::{decode_kspace, encode_kspace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(y) = decode_kspace(data) {
        let bytes = encode_kspace(&y);
        assert_eq!(encode_kspace(&decode_kspace(&bytes).unwrap()), bytes);
    }
});
