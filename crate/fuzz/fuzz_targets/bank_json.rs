#![no_main]

use libfuzzer_sys::fuzz_target;
use mote::backbone::EmbeddingBank;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(bank) = EmbeddingBank::from_json(s) {
        for i in 0..bank.len() {
            assert_eq!(bank.vector(i).len(), bank.dim());
        }
        let _ = bank.matrix_t();
    }
});
