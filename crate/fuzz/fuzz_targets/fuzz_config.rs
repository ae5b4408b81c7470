#![no_main]

use farnet::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::parse(text) else {
        return;
    };
    let back = RunConfig::parse(&cfg.to_text()).expect("canonical text must parse");
    assert_eq!(back.to_text(), cfg.to_text());
});
