#![no_main]

use libfuzzer_sys::fuzz_target;
use resobs::model::{build_horizon_operators, DiscreteLinearSystem};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(sys) = DiscreteLinearSystem::from_json(text) else { return };
    if sys.n() <= 8 && sys.m() <= 8 && sys.l() <= 8 {
        let _ = build_horizon_operators(&sys, sys.n() + 1);
    }
});
