#![no_main]
use conesrecon::sim::MotionTruth;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = MotionTruth::from_csv(s);
    }
});
