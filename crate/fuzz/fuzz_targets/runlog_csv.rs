#![no_main]

use dfm_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = io::parse_runlog_csv(text, "fuzz", 0) {
        let csv = io::runlog_to_csv(&log);
        let again = io::parse_runlog_csv(&csv, "fuzz", 0).expect("written log reparses");
        assert_eq!(io::runlog_to_csv(&again), csv);
    }
});
