//! Arbitrary text against the dataset manifest parser: header count, record
//! ids, domain tags, and label flags are untrusted. Parsing must never panic,
//! and accepted manifests obey the declared record count.

#![no_main]

use libfuzzer_sys::fuzz_target;
use varda::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), ids.len(), "parser admitted duplicate ids");
    }
});
