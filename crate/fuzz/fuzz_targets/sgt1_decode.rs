#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::sgt1;

fuzz_target!(|data: &[u8]| {
    // decoding must never panic or over-allocate on arbitrary bytes
    if let Ok((tensor, dtype)) = sgt1::decode_with_dtype(data) {
        // a successful decode must re-encode to the identical bytes
        let encoded = sgt1::encode(&tensor, dtype).expect("decoded tensor re-encodes");
        assert_eq!(encoded, data, "decode/encode round trip changed bytes");
        let expected: usize = tensor.shape().iter().product();
        assert_eq!(expected, tensor.len());
    }
});
