#![no_main]
use conesrecon::sim::PhantomScene;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(scene) = PhantomScene::from_json(s) {
            PhantomScene::from_json(&scene.to_json()).expect("scene round trip");
        }
    }
});
