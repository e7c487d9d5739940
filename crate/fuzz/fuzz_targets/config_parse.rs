#![no_main]

use cyclewalk::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        // resolution may reject the values but must not panic
        let _ = cfg.resolve();
    }
});
