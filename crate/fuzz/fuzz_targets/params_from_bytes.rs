#![no_main]

use hticl::EncoderParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = EncoderParams::from_bytes(data) {
        assert_eq!(EncoderParams::from_bytes(&p.to_bytes()).expect("re-decodes"), p);
    }
});
