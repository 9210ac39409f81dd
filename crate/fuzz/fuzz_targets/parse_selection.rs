#![no_main]

use hticl::inference::policy::parse_selection;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: (u8, &str)| {
    let (count, reply) = input;
    if let Some(i) = parse_selection(reply, count as usize) {
        assert!(i < count as usize);
    }
});
