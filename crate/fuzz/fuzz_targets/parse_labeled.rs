#![no_main]

use hticl::evaluation::parse_labeled;
use hticl::synthetic::SyntheticSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let tax = SyntheticSpec { branching: vec![2, 2], ..Default::default() }.taxonomy();
    if let Ok(records) = parse_labeled(data, &tax) {
        for r in records {
            tax.validate_path(&r.path).expect("parsed paths are valid");
        }
    }
});
