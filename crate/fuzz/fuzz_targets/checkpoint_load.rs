#![no_main]

use libfuzzer_sys::fuzz_target;
use physode::io::ArrayContainer;
use physode::models::ModelBundle;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ArrayContainer::from_bytes(data) {
        let _ = ModelBundle::from_container(&c);
    }
});
