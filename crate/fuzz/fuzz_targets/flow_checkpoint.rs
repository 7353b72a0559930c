#![no_main]

use dfm_core::flow::FlowModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = FlowModel::from_json(text) {
        let json = model.to_json();
        assert_eq!(FlowModel::from_json(&json).expect("reparses").to_json(), json);
    }
});
