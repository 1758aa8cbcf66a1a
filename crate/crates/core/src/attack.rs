//! False-data injection on measurement channels and the residue-based bad
//! data detector.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::DiscreteLinearSystem;

pub const DEFAULT_THRESHOLD: f64 = 0.05;
/// Floor on `||y||` in the normalised residue.
pub const RESIDUE_FLOOR: f64 = 1e-9;
/// Fraction of the detection threshold a stealthy attack may use.
pub const STEALTH_MARGIN: f64 = 0.9;

/// Per-channel attack waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MagnitudeLaw {
    Constant { value: f64 },
    /// Linear ramp from the onset to `value` over `samples` samples.
    Ramp { value: f64, samples: usize },
    /// `fraction` of the clean channel value, ramped in over `samples`.
    Relative { fraction: f64, samples: usize },
    /// Independent uniform draws in `[low, high]` per channel and sample.
    Random { low: f64, high: f64 },
}

impl Default for MagnitudeLaw {
    fn default() -> Self {
        MagnitudeLaw::Relative {
            fraction: 0.2,
            samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    /// Attacked output channels (0-based).
    pub support: Vec<usize>,
    #[serde(default = "default_onset")]
    pub onset: usize,
    #[serde(default)]
    pub magnitude_law: MagnitudeLaw,
    #[serde(default = "default_true")]
    pub stealth: bool,
}

fn default_onset() -> usize {
    200
}

fn default_true() -> bool {
    true
}

impl AttackPlan {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.support.len() > m {
            return Err(Error::config("attack.support", format!("{} channels for {m} outputs", self.support.len())));
        }
        let mut s = self.support.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.support.len() {
            return Err(Error::config("attack.support", "duplicate channels"));
        }
        if let Some(&c) = s.last() {
            if c >= m {
                return Err(Error::config("attack.support", format!("channel {c} is outside 0..{m}")));
            }
        }
        match &self.magnitude_law {
            MagnitudeLaw::Constant { value } | MagnitudeLaw::Ramp { value, .. } if !value.is_finite() => {
                Err(Error::config("attack.magnitude_law", "value must be finite"))
            }
            MagnitudeLaw::Relative { fraction, .. } if !fraction.is_finite() => {
                Err(Error::config("attack.magnitude_law", "fraction must be finite"))
            }
            MagnitudeLaw::Random { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                Err(Error::config("attack.magnitude_law", "need finite low <= high"))
            }
            _ => Ok(()),
        }
    }

    pub fn attacked_fraction(&self, m: usize) -> f64 {
        if m == 0 {
            0.0
        } else {
            self.support.len() as f64 / m as f64
        }
    }

    fn sorted_support(&self) -> Vec<usize> {
        let mut s = self.support.clone();
        s.sort_unstable();
        s
    }
}

/// Attack vector for one sample and the factor it was shrunk by to stay
/// below the detector (1 when untouched).
#[derive(Debug, Clone, PartialEq)]
pub struct FdiaSample {
    pub e: DVector<f64>,
    pub scale: f64,
}

fn ramp(k: usize, onset: usize, samples: usize) -> f64 {
    if samples == 0 {
        1.0
    } else {
        ((k - onset + 1) as f64 / samples as f64).min(1.0)
    }
}

/// Corruption `e_k` for sample `k` of a run.
///
/// Stealthy attacks are fitted in `range(C)` on the support by least squares,
/// zeroed elsewhere, and shrunk by bisection if the corrupted measurement's
/// residue would exceed `STEALTH_MARGIN * threshold`.
pub fn generate_fdia(
    plan: &AttackPlan,
    sys: &DiscreteLinearSystem,
    y_true: &DVector<f64>,
    u: &DVector<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
    threshold: f64,
) -> Result<FdiaSample> {
    let m = sys.m();
    plan.validate(m)?;
    if y_true.len() != m {
        return Err(Error::DimensionMismatch(format!("clean measurement has length {}, expected {m}", y_true.len())));
    }
    let mut e = DVector::zeros(m);
    if k < plan.onset || plan.support.is_empty() {
        return Ok(FdiaSample { e, scale: 1.0 });
    }
    let support = plan.sorted_support();
    for &j in &support {
        e[j] = match &plan.magnitude_law {
            MagnitudeLaw::Constant { value } => *value,
            MagnitudeLaw::Ramp { value, samples } => value * ramp(k, plan.onset, *samples),
            MagnitudeLaw::Relative { fraction, samples } => fraction * y_true[j].abs() * ramp(k, plan.onset, *samples),
            MagnitudeLaw::Random { low, high } => {
                if low == high {
                    *low
                } else {
                    rng.random_range(*low..=*high)
                }
            }
        };
    }
    if !plan.stealth {
        return Ok(FdiaSample { e, scale: 1.0 });
    }

    let c_s = linalg::select_rows(&sys.c, &support);
    let target = linalg::select_entries(&e, &support);
    let coef = linalg::lstsq(&c_s, &target);
    let fitted = &c_s * coef;
    let mut stealthy = DVector::zeros(m);
    for (i, &j) in support.iter().enumerate() {
        stealthy[j] = fitted[i];
    }
    let limit = STEALTH_MARGIN * threshold;
    let residue_at = |s: f64| -> Result<f64> {
        Ok(bdd_residue_test(&(y_true + &stealthy * s), u, sys, threshold)?.residue)
    };
    if residue_at(1.0)? <= limit {
        return Ok(FdiaSample { e: stealthy, scale: 1.0 });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    if residue_at(0.0)? > limit {
        log::warn!("sample {k}: clean residue already exceeds the stealth margin; attack suppressed");
        return Ok(FdiaSample {
            e: DVector::zeros(m),
            scale: 0.0,
        });
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if residue_at(mid)? <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    log::warn!("sample {k}: stealthy attack scaled by {lo:.6} to stay below the detector");
    Ok(FdiaSample {
        e: stealthy * lo,
        scale: lo,
    })
}

/// One detector evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidueReport {
    pub residue: f64,
    pub threshold: f64,
    pub alarm: bool,
}

/// `||y - C x_ls - D u|| / max(||y||, floor)` with `x_ls` the least-squares
/// state fit; alarms above `threshold`.
pub fn bdd_residue_test(
    y: &DVector<f64>,
    u: &DVector<f64>,
    sys: &DiscreteLinearSystem,
    threshold: f64,
) -> Result<ResidueReport> {
    if !(threshold > 0.0) {
        return Err(Error::config("bdd_threshold", "must be positive"));
    }
    if y.len() != sys.m() || u.len() != sys.l() {
        return Err(Error::DimensionMismatch("measurement or input has the wrong length".into()));
    }
    let z = y - &sys.d * u;
    let x_ls = linalg::lstsq(&sys.c, &z);
    let residue = (z - &sys.c * x_ls).norm() / y.norm().max(RESIDUE_FLOOR);
    Ok(ResidueReport {
        residue,
        threshold,
        alarm: residue > threshold,
    })
}
