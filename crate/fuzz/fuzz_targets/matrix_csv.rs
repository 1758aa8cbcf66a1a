#![no_main]

use libfuzzer_sys::fuzz_target;
use resobs::io::read_matrix_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = read_matrix_csv(text) {
        assert!(m.iter().all(|v| v.is_finite()));
    }
});
