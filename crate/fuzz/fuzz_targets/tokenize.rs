#![no_main]

use hticl::corpus::{tokenize, VOCAB_SIZE};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let tokens = tokenize(data);
    assert!(tokens.iter().all(|&t| (t as usize) < VOCAB_SIZE));
    assert_eq!(tokenize(data), tokens);
});
