#![no_main]

use libfuzzer_sys::fuzz_target;
use nalgebra::DVector;
use resobs::prior::AuxiliaryPrior;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(prior) = AuxiliaryPrior::from_json(text) {
        let y = prior.mu().clone();
        assert!(prior.mahalanobis_sq(&y).unwrap() < 1e-6);
        let _ = prior.is_feasible(&DVector::zeros(prior.dim()));
    }
});
