#![no_main]
use anchorstream::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(v) = serde_json::from_slice::<serde_json::Value>(data) else { return };
    if let Ok(cfg) = ExperimentConfig::resolve(None, None, Some(&v)) {
        cfg.validate().unwrap();
    }
});
