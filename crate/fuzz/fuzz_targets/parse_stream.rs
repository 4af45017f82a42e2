#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = anchorstream::stream::read_jsonl(data) {
        // anything accepted must survive a round trip
        let all = ds.general_train.iter().chain(&ds.general_dev).chain(ds.target_train()).chain(&ds.target_dev);
        let vocab = all.flat_map(|u| u.reference.tokens()).max().map_or(1, |m| m + 1);
        let mut out = Vec::new();
        anchorstream::stream::write_jsonl(&ds, vocab, &mut out).unwrap();
        assert_eq!(anchorstream::stream::read_jsonl(out.as_slice()).unwrap(), ds);
    }
});
