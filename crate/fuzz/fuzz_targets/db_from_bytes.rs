#![no_main]

use hticl::RetrievalDatabase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = RetrievalDatabase::from_bytes(data) {
        let bytes = db.to_bytes();
        assert_eq!(RetrievalDatabase::from_bytes(&bytes).expect("re-decodes"), db);
    }
});
