#![no_main]

use libfuzzer_sys::fuzz_target;
use mote::harness::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::from_json(s) {
        // A validated checkpoint must be usable for inference.
        let _ = ckpt.deployed();
    }
});
