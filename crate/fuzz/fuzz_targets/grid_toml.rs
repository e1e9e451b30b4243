#![no_main]

use libfuzzer_sys::fuzz_target;
use mote::harness::{expand_grid, GridSpec, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(g) = GridSpec::from_toml(s) {
        // Cap the product so a wide grid cannot stall the fuzzer.
        let points: usize = g.axes.values().map(Vec::len).product();
        if points <= 64 {
            let _ = expand_grid(&RunConfig::default(), &g);
        }
    }
});
