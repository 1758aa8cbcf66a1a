#![no_main]

use libfuzzer_sys::fuzz_target;
use resobs::io::read_measurements_csv;

fuzz_target!(|data: &[u8]| {
    let Some((&dims, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let (m, l) = ((dims & 0x0f) as usize, (dims >> 4) as usize);
    if let Ok(meas) = read_measurements_csv(text, m, l) {
        assert_eq!(meas.y_stack.len(), meas.window * m);
        assert_eq!(meas.u_stack.len(), meas.window * l);
    }
});
