#![no_main]

use hticl::inference::policy::{parse_llm_label, ParseOutcome};
use libfuzzer_sys::fuzz_target;

// First line is the reply; the remaining lines are the candidates.
fuzz_target!(|data: &str| {
    let mut lines = data.lines();
    let reply = lines.next().unwrap_or_default();
    let candidates: Vec<String> = lines.map(str::to_string).collect();
    if let ParseOutcome::Matched(i, _) = parse_llm_label(reply, &candidates) {
        assert!(i < candidates.len());
    }
});
