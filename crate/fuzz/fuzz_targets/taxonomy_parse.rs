#![no_main]

use hticl::Taxonomy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(tax) = Taxonomy::parse(data) {
        let again = Taxonomy::parse(&tax.to_text()).expect("serialized taxonomy re-parses");
        assert_eq!(again.to_text(), tax.to_text());
        for &leaf in tax.leaves() {
            let path = tax.path_to(leaf).expect("leaf has a path");
            tax.validate_path(&path).expect("leaf path is valid");
        }
    }
});
