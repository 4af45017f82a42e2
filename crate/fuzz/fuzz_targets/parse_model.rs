#![no_main]
use anchorstream::model::{model_from_json, model_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = model_from_json(s) {
        let again = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }
});
