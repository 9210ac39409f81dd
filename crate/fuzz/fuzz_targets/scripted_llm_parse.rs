#![no_main]

use hticl::inference::llm::ScriptedLlm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = ScriptedLlm::parse(data);
});
