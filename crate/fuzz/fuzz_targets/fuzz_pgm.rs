//! PGM images are the on-disk patch format; decoding arbitrary bytes must
//! never panic, and anything that decodes must round-trip through the
//! encoder (8-bit grayscale is exact in both directions).

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorelab::patch::Patch;

fuzz_target!(|data: &[u8]| {
    let Ok(p) = Patch::from_pgm_bytes(data) else { return };
    assert!(p.height() >= 1 && p.width() >= 1);
    assert!(p.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    let encoded = p.to_pgm_bytes();
    let again = Patch::from_pgm_bytes(&encoded).expect("re-encoded PGM must decode");
    assert_eq!(p.height(), again.height());
    assert_eq!(p.width(), again.width());
    assert_eq!(p.pixels(), again.pixels());
});
