#![no_main]

use farnet::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("encoded checkpoint must decode");
        assert_eq!(again.encode(), bytes);
    }
    for trim in 1..data.len().min(16) {
        let _ = Checkpoint::decode(&data[..data.len() - trim]);
    }
});
