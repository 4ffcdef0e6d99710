//! Corpus manifests are read from disk and may come from untrusted corpora;
//! the parser must reject malformed input without panicking, and every
//! accepted manifest must satisfy the invariants the loader relies on
//! (bounded side, in-range labels, safe file names).

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorelab::trainer::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = parse_manifest(data) else { return };
    assert!(m.side >= 1 && m.side <= 4096);
    assert!(m.num_classes >= 1);
    for entry in &m.entries {
        assert!((entry.label as usize) < m.num_classes);
        assert!(!entry.file.is_empty() && !entry.file.starts_with('.'));
        assert!(entry
            .file
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-'));
    }
});
