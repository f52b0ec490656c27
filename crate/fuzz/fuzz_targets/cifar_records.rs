#![no_main]

use libfuzzer_sys::fuzz_target;
use quest_core::data::{encode_cifar_binary, parse_cifar_binary, Normalization, Split};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_cifar_binary(data, &Normalization::IDENTITY, Split::Train) {
        if !ds.is_empty() {
            assert_eq!(encode_cifar_binary(&ds).unwrap(), data);
        }
    }
});
