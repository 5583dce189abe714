#![no_main]
use conesrecon::io::{decode_trajectory, encode_trajectory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_trajectory(data) {
        let again = decode_trajectory(&encode_trajectory(&t)).expect("re-encoded trajectory decodes");
        assert_eq!(again.coords.len(), t.coords.len());
    }
});
