//! Arbitrary bytes against the tensor-file decoder. Decoding must never
//! panic or over-allocate, and anything it accepts must re-encode to bytes
//! it accepts again with identical contents.

#![no_main]

use libfuzzer_sys::fuzz_target;
use varda::tensor::vten;

fuzz_target!(|data: &[u8]| {
    if let Ok((tensor, used)) = vten::decode_prefix(data) {
        assert!(used <= data.len());
        let bytes = vten::encode(&tensor);
        let again = vten::decode(&bytes).expect("re-encoded tensor must decode");
        assert_eq!(again.shape(), tensor.shape());
        let (a, b) = (tensor.data(), again.data());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // Strict whole-buffer decode additionally rejects trailing bytes; it must
    // agree with the prefix decoder wherever both succeed.
    let _ = vten::decode(data);
});
