#![no_main]
use conesrecon::io::{decode_cvl, decode_labels, decode_mask, decode_volume, encode_volume};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_cvl(data);
    let _ = decode_mask(data);
    let _ = decode_labels(data);
    if let Ok(v) = decode_volume(data) {
        let bytes = encode_volume(&v);
        assert_eq!(encode_volume(&decode_volume(&bytes).unwrap()), bytes);
    }
});
