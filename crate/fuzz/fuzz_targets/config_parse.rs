#![no_main]

use dfm_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        let json = config.to_json();
        let again = ExperimentConfig::from_json(&json).expect("serialized config reparses");
        assert_eq!(again.to_json(), json);
    }
});
