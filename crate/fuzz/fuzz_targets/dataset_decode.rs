#![no_main]

use cyclewalk::synth_data::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((seq, gt)) = decode_dataset(data) {
        let again = encode_dataset(&seq, &gt).expect("decoded datasets re-encode");
        assert_eq!(again, data, "accepted input must be canonical");
    }
});
