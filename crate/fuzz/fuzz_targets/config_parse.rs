#![no_main]

use hcl_core::config::parse_config_str;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config_str(text) {
            assert_eq!(parse_config_str(&cfg.to_json().unwrap()).unwrap(), cfg);
        }
    }
});
