#![no_main]
use anchorstream::ctc::{ctc_loss, LabelSeq};
use anchorstream::Tensor;
use libfuzzer_sys::fuzz_target;

// [frames, symbols, label count, labels..., logits...]
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let t = 1 + data[0] as usize % 10;
    let v = 1 + data[1] as usize % 5;
    let n = data[2] as usize % 6;
    let Some(labels) = data.get(3..3 + n) else { return };
    let y = LabelSeq(labels.iter().map(|&b| b as usize % v).collect());
    let rest = &data[3 + n..];
    if rest.is_empty() {
        return;
    }
    let raw: Vec<f64> = rest.iter().cycle().take(t * (v + 1)).map(|&b| (b as i8) as f64 / 8.0).collect();
    let lp = Tensor::from_vec(vec![t, v + 1], raw).unwrap().log_softmax_rows().unwrap();
    if let Ok((nll, grad)) = ctc_loss(&lp, &y) {
        assert!(nll.is_finite() && nll >= -1e-9);
        // rows of softmax − occupancy sum to zero
        for r in 0..t {
            let s: f64 = grad.row(r).iter().sum();
            assert!(s.abs() < 1e-8, "row {r} sums to {s}");
        }
    }
});
