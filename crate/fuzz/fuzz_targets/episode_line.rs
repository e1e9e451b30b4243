#![no_main]

use libfuzzer_sys::fuzz_target;
use mote::synthdata::Episode;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ep) = Episode::from_json_line(s) {
        let t = ep.frames_tensor().expect("validated episode converts");
        assert_eq!(t.shape()[0], ep.frames.len());
    }
});
