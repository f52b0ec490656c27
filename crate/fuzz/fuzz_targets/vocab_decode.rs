#![no_main]

use libfuzzer_sys::fuzz_target;
use quest_core::vocab::{decode_vocabulary, encode_vocabulary};

fuzz_target!(|data: &[u8]| {
    if let Ok(vocab) = decode_vocabulary(data) {
        assert_eq!(encode_vocabulary(&vocab), data);
    }
});
