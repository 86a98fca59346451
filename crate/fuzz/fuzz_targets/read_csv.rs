#![no_main]

use compressed_soba::RunTrace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = RunTrace::from_csv_str(text) {
        let again = RunTrace::from_csv_str(&t.to_csv_string()).expect("written traces parse");
        assert_eq!(again, t);
    }
});
