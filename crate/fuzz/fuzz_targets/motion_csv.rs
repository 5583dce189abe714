#![no_main]
use conesrecon::motion::MotionEstimates;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = MotionEstimates::from_csv(s, [8, 8, 8]);
    }
});
