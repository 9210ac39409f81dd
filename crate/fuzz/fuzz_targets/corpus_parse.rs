#![no_main]

use hticl::corpus::{parse_corpus, write_corpus};
use hticl::synthetic::SyntheticSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let tax = SyntheticSpec { branching: vec![2, 2], ..Default::default() }.taxonomy();
    if let Ok(docs) = parse_corpus(data, &tax) {
        let back = parse_corpus(&write_corpus(&docs, &tax), &tax).expect("written corpus re-parses");
        assert_eq!(back, docs);
    }
});
