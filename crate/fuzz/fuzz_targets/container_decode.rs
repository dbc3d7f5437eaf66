#![no_main]

use libfuzzer_sys::fuzz_target;
use physode::io::ArrayContainer;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ArrayContainer::from_bytes(data) {
        // anything that decodes must encode and decode to the same value
        let bytes = c.to_bytes().expect("re-encode");
        assert_eq!(ArrayContainer::from_bytes(&bytes).expect("decode again"), c);
    }
});
