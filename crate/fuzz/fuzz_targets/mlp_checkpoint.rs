#![no_main]

use dfm_core::nn::Mlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(net) = Mlp::from_json(text) {
        // A loaded net must be internally consistent enough to run.
        let out = net.forward(&vec![0.5; net.input_dim()]).expect("forward on a loaded net");
        assert_eq!(out.len(), net.output_dim());
        let json = net.to_json();
        assert_eq!(Mlp::from_json(&json).expect("reparses").to_json(), json);
    }
});
