#![no_main]

use libfuzzer_sys::fuzz_target;
use quest_core::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(encode_checkpoint(&ckpt), data);
    }
});
