#![no_main]

use libfuzzer_sys::fuzz_target;
use mote::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_toml(s) {
        // Anything accepted must survive a round trip.
        let again = RunConfig::from_toml(&c.to_toml()).expect("re-parse of serialized config");
        assert_eq!(c, again);
    }
});
