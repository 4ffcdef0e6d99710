//! Checkpoints are binary files read back across runs (and from the teacher
//! cache); the decoder must be total over arbitrary bytes, and whatever it
//! accepts must re-encode to the identical buffer.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorelab::nets::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok((spec_hash, params)) = decode_checkpoint(data) else { return };
    let encoded = encode_checkpoint(spec_hash, &params);
    assert_eq!(encoded, data, "decode followed by encode must reproduce the bytes");
});
