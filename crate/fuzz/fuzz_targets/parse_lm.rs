#![no_main]
use anchorstream::ctc::CharNgramLM;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(lm) = CharNgramLM::from_json(s) {
        assert!(lm.log_prob(&[0, 1, 2], Some(0)) <= 1e-12);
        assert!(lm.log_prob(&[], None) <= 1e-12);
        let again = CharNgramLM::from_json(&lm.to_json().unwrap()).unwrap();
        assert_eq!(again.to_json().unwrap(), lm.to_json().unwrap());
    }
});
