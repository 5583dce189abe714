#![no_main]
use conesrecon::unrolled::UnrolledWeights;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = UnrolledWeights::from_bytes(data) {
        assert_eq!(UnrolledWeights::from_bytes(&w.to_bytes()).unwrap(), w);
    }
});
