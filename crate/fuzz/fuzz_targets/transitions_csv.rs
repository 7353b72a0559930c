#![no_main]

use dfm_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(batch) = io::parse_transitions_csv(text, 12) {
        assert!(batch.iter().all(|t| t.a < 12));
        let csv = io::transitions_to_csv(&batch);
        let again = io::parse_transitions_csv(&csv, 12).expect("written batch reparses");
        assert_eq!(io::transitions_to_csv(&again), csv);
    }
});
