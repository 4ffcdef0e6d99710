//! Experiment configs arrive as user-written TOML; parsing plus validation
//! must be total, and a config that validates must survive the
//! canonicalize → reparse round trip with a stable hash.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorelab::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_toml_str(text) else { return };
    // A validated config must canonicalize, reparse to an equally valid
    // config, and fingerprint identically.
    let canon = cfg.canonical();
    let again = ExperimentConfig::from_toml_str(&canon)
        .expect("canonical form of a valid config must parse and validate");
    assert_eq!(cfg.hash16(), again.hash16());
});
