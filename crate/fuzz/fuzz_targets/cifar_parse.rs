#![no_main]

use hcl_core::data::{encode_cifar, parse_cifar};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_cifar(data) {
        assert_eq!(encode_cifar(&records).unwrap(), data);
    }
});
