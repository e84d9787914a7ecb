//! Arbitrary text against the `key = value` grammar and both consumers of
//! it: the training/network configuration and the dataset generation spec.
//! Parsing and application must never panic, whatever the values hold.

#![no_main]

use libfuzzer_sys::fuzz_target;
use varda::config::parse_kv;
use varda::data::{apply_spec, SynthSpec};
use varda::nets::NetConfig;
use varda::train::{apply_config, TrainConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(entries) = parse_kv(text) else { return };
    let mut train = TrainConfig::default();
    let mut net = NetConfig::default();
    if apply_config(&entries, &mut train, &mut net).is_ok() {
        // Applied values may still be semantically invalid; validation has
        // to catch them instead of the trainer panicking later.
        let _ = train.validate();
        let _ = net.validate();
    }
    let mut spec = SynthSpec::default();
    if apply_spec(&entries, &mut spec).is_ok() {
        let _ = spec.validate();
    }
});
