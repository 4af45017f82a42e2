#![no_main]
use anchorstream::ctc::{beam_decode, greedy_decode, train_lm, BeamConfig, LabelSeq};
use anchorstream::Tensor;
use libfuzzer_sys::fuzz_target;

// [frames, symbols, beam, lm weight, logits...]
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let t = 1 + data[0] as usize % 12;
    let v = 1 + data[1] as usize % 6;
    let raw: Vec<f64> = data[4..].iter().cycle().take(t * (v + 1)).map(|&b| (b as i8) as f64 / 16.0).collect();
    if raw.len() < t * (v + 1) {
        return;
    }
    let lp = Tensor::from_vec(vec![t, v + 1], raw).unwrap().log_softmax_rows().unwrap();
    let g = greedy_decode(&lp);
    assert!(g.tokens().iter().all(|&k| k < v));
    let lm = train_lm(&[LabelSeq((0..v).collect())], 3, 0.1, v).unwrap();
    let cfg = BeamConfig {
        beam_width: 1 + data[2] as usize % 8,
        lm_weight: data[3] as f64 / 64.0,
        word_bonus: 0.0,
    };
    let b = beam_decode(&lp, &cfg, Some(&lm)).unwrap();
    assert!(b.tokens().iter().all(|&k| k < v));
});
