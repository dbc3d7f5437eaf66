#![no_main]

use libfuzzer_sys::fuzz_target;
use physode::datasets::Dataset;
use physode::io::ArrayContainer;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ArrayContainer::from_bytes(data) {
        let _ = Dataset::from_container(c);
    }
});
