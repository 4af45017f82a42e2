#![no_main]
use anchorstream::continual::BufferSnapshot;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(b) = BufferSnapshot::from_json(s) {
        assert_eq!(BufferSnapshot::from_json(&b.to_json().unwrap()).unwrap(), b);
    }
});
