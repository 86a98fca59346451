#![no_main]

use compressed_soba::simnet::MessageLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = MessageLog::from_bytes(data) {
        let _ = log.replay_uplink_bits();
        assert_eq!(MessageLog::from_bytes(&log.to_bytes()).ok(), Some(log));
    }
});
