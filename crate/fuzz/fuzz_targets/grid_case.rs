#![no_main]

use libfuzzer_sys::fuzz_target;
use resobs::grid::{CaseFile, GridCase};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = CaseFile::from_json(text) else { return };
    if file.buses > 256 || file.generators.len() > 64 {
        return;
    }
    let _ = GridCase::from_case_file(&file);
});
