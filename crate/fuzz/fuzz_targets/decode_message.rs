#![no_main]

use compressed_soba::CompressedMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = CompressedMessage::from_bytes(data) {
        // anything that decodes must re-encode to the same bytes
        assert_eq!(m.to_bytes(), data);
        let _ = m.bit_cost();
        let _ = m.materialize();
    }
});
