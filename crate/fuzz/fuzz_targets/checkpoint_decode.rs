//! Arbitrary bytes against the checkpoint decoder: header lengths, the
//! embedded manifest, record names, and nested tensor payloads are all
//! attacker-controlled. Accepted checkpoints must survive a re-encode and
//! re-decode with the same metadata.

#![no_main]

use libfuzzer_sys::fuzz_target;
use varda::config::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt.meta, &ckpt.params, ckpt.adam.as_ref());
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(again.meta, ckpt.meta);
        assert_eq!(again.params.len(), ckpt.params.len());
        assert_eq!(again.adam.is_some(), ckpt.adam.is_some());
    }
});
