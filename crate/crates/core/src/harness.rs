//! Scenario configuration, orchestration of the three-observer comparison,
//! error metrics and result files.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackPlan, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::grid::{
    build_reduced_model, closed_loop_spectral_radius, equilibrium, simulate_closed_loop, AttackRun, CaseFile,
    GridCase, PiController, SensorNoise, Simulation,
};
use crate::model::{build_horizon_operators, discretize, DiscreteLinearSystem};
use crate::observer::{L1Observer, LuenbergerObserver, MultiModelObserver, Observer, SolverSettings};
use crate::prior::{PriorConfig, PriorSynthesizer, DEFAULT_TAU};
use crate::trace::EstimateTrace;

/// Environment variable overriding the scenario seed.
pub const SEED_ENV: &str = "RESOBS_SEED";

pub const IEEE14_ATTACK_SCENARIO: &str = include_str!("../data/ieee14_attack.json");
pub const IEEE14_CLEAN_SCENARIO: &str = include_str!("../data/ieee14_clean.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    Lo,
    L1o,
    Mmo,
}

impl ObserverKind {
    pub fn label(self) -> &'static str {
        match self {
            ObserverKind::Lo => "lo",
            ObserverKind::L1o => "l1o",
            ObserverKind::Mmo => "mmo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricsWindow {
    #[default]
    Full,
    PostOnset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    /// Explicit per-channel standard deviations; derived from the nominal
    /// output when absent.
    pub sigma_scale: Option<Vec<f64>>,
    /// Standard deviation as a fraction of each channel's nominal magnitude.
    pub relative_sigma: f64,
    /// Lower bound on each derived standard deviation.
    pub sigma_floor: f64,
    pub offset_fraction: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            sigma_scale: None,
            relative_sigma: 0.05,
            sigma_floor: 0.01,
            offset_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    pub kp: f64,
    pub ki: f64,
    pub integral_limit: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            kp: 2.0,
            ki: 5.0,
            integral_limit: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Grid case file; the bundled IEEE 14-bus case when absent. Relative
    /// paths resolve against the config file's directory.
    pub case: Option<PathBuf>,
    /// Uniform inertia override for every generator.
    pub inertia: Option<f64>,
    /// Uniform damping override for every generator.
    pub damping: Option<f64>,
    pub dt: f64,
    /// Moving-horizon window `T`.
    pub window: usize,
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    /// Relative amplitude of the i.i.d. uniform demand fluctuation.
    pub demand_fluctuation: f64,
    /// Standard deviation of the Gaussian noise on every sensor channel.
    pub measurement_noise: f64,
    pub prior: PriorSettings,
    pub attack: Option<AttackPlan>,
    pub controller: ControllerSettings,
    pub bdd_threshold: f64,
    pub observers: Vec<ObserverKind>,
    pub solver: SolverSettings,
    pub metrics_window: MetricsWindow,
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            case: None,
            inertia: None,
            damping: None,
            dt: 0.01,
            window: 20,
            tau: DEFAULT_TAU,
            samples: 1000,
            seed: 0,
            demand_fluctuation: 0.01,
            measurement_noise: 0.0,
            prior: PriorSettings::default(),
            attack: None,
            controller: ControllerSettings::default(),
            bdd_threshold: DEFAULT_THRESHOLD,
            observers: vec![ObserverKind::Lo, ObserverKind::L1o, ObserverKind::Mmo],
            solver: SolverSettings::default(),
            metrics_window: MetricsWindow::Full,
            output_dir: None,
        }
    }
}

/// Seed from `RESOBS_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::config(SEED_ENV, e.to_string())),
    }
}

impl ScenarioConfig {
    /// Parse without consulting the environment.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Read, resolve relative paths, apply `RESOBS_SEED` and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        if let (Some(case), Some(dir)) = (&cfg.case, path.parent()) {
            if case.is_relative() {
                cfg.case = Some(dir.join(case));
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ieee14_attack() -> Self {
        Self::from_json(IEEE14_ATTACK_SCENARIO).expect("bundled scenario parses")
    }

    pub fn ieee14_clean() -> Self {
        Self::from_json(IEEE14_CLEAN_SCENARIO).expect("bundled scenario parses")
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_override()? {
            self.seed = seed;
        }
        Ok(())
    }

    /// Checks that need no model; [`prepare`] performs the model-dependent ones.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1)"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be positive"));
        }
        if let Some(a) = &self.attack {
            if self.samples <= a.onset + self.window {
                return Err(Error::config(
                    "samples",
                    format!("run length {} must exceed onset + window = {}", self.samples, a.onset + self.window),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.demand_fluctuation) {
            return Err(Error::config("demand_fluctuation", "must lie in [0, 1)"));
        }
        if !(self.measurement_noise >= 0.0 && self.measurement_noise.is_finite()) {
            return Err(Error::config("measurement_noise", "must be non-negative"));
        }
        if !(self.bdd_threshold > 0.0) {
            return Err(Error::config("bdd_threshold", "must be positive"));
        }
        if self.observers.is_empty() {
            return Err(Error::config("observers", "list at least one observer"));
        }
        let p = &self.prior;
        if !(p.relative_sigma > 0.0 && p.sigma_floor > 0.0) {
            return Err(Error::config("prior", "relative_sigma and sigma_floor must be positive"));
        }
        if !(0.0..=1.0).contains(&p.offset_fraction) {
            return Err(Error::config("prior.offset_fraction", "must lie in [0, 1]"));
        }
        if let Some(v) = self.inertia {
            if !(v > 0.0) {
                return Err(Error::config("inertia", "must be positive"));
            }
        }
        if let Some(v) = self.damping {
            if !(v > 0.0) {
                return Err(Error::config("damping", "must be positive"));
            }
        }
        let c = &self.controller;
        if !(c.kp >= 0.0 && c.ki >= 0.0 && c.integral_limit > 0.0) {
            return Err(Error::config("controller", "gains must be non-negative and the limit positive"));
        }
        self.solver.validate()
    }

    pub fn grid_case(&self) -> Result<GridCase> {
        let mut file = match &self.case {
            Some(p) => CaseFile::load(p)?,
            None => CaseFile::ieee14(),
        };
        for g in &mut file.generators {
            if let Some(m) = self.inertia {
                g.inertia = m;
            }
            if let Some(d) = self.damping {
                g.damping = d;
            }
        }
        GridCase::from_case_file(&file)
    }
}

/// Model objects derived from a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub case: GridCase,
    pub sys: DiscreteLinearSystem,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub sigma_scale: Vec<f64>,
}

/// Build the grid model and check the model-dependent parts of `cfg`.
pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    cfg.validate()?;
    let case = cfg.grid_case()?;
    let sys = discretize(&build_reduced_model(&case)?, cfg.dt)?;
    let n = sys.n();
    if cfg.window < n {
        return Err(Error::config("window", format!("window {} is shorter than the state dimension {n}", cfg.window)));
    }
    if let Some(a) = &cfg.attack {
        a.validate(sys.m())?;
    }
    let x0 = equilibrium(&case, &case.nominal_dispatch, &case.nominal_demand)?;
    let mut u0 = DVector::zeros(sys.l());
    u0.rows_mut(0, case.n_g).copy_from(&case.nominal_dispatch);
    u0.rows_mut(case.n_g, case.n_b).copy_from(&case.nominal_demand);
    let y0 = sys.output(&x0, &u0);
    let sigma_scale = match &cfg.prior.sigma_scale {
        Some(s) if s.len() == sys.m() => s.clone(),
        Some(s) => {
            return Err(Error::config(
                "prior.sigma_scale",
                format!("{} entries for {} channels", s.len(), sys.m()),
            ))
        }
        None => y0
            .iter()
            .map(|v| (cfg.prior.relative_sigma * v.abs()).max(cfg.prior.sigma_floor))
            .collect(),
    };
    Ok(Prepared {
        case,
        sys,
        x0,
        u0,
        sigma_scale,
    })
}

/// RMS and max-abs rotor-angle error of every observer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub observers: Vec<String>,
    pub window: (usize, usize),
    /// `rms[i][o]` for rotor angle `i` and observer `o`.
    pub rms: Vec<Vec<f64>>,
    pub max_abs: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn rms_of(&self, observer: &str) -> Option<Vec<f64>> {
        let o = self.observers.iter().position(|n| n == observer)?;
        Some(self.rms.iter().map(|r| r[o]).collect())
    }

    pub fn max_abs_of(&self, observer: &str) -> Option<Vec<f64>> {
        let o = self.observers.iter().position(|n| n == observer)?;
        Some(self.max_abs.iter().map(|r| r[o]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["state".to_string()];
        for o in &self.observers {
            header.push(format!("{o}_rms"));
            header.push(format!("{o}_max_abs"));
        }
        w.write_record(&header)?;
        for (i, (rms, mx)) in self.rms.iter().zip(&self.max_abs).enumerate() {
            let mut row = vec![format!("delta{}", i + 1)];
            for o in 0..self.observers.len() {
                row.push(rms[o].to_string());
                row.push(mx[o].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compute_metrics(trace: &EstimateTrace, window: Range<usize>) -> Result<MetricsTable> {
    if window.is_empty() || window.end > trace.len() {
        return Err(Error::config(
            "metrics_window",
            format!("window {window:?} is empty or outside the {}-sample trace", trace.len()),
        ));
    }
    let count = window.len() as f64;
    let no = trace.observers.len();
    let mut rms = vec![vec![0.0; no]; trace.angles];
    let mut max_abs = vec![vec![0.0_f64; no]; trace.angles];
    for o in 0..no {
        for k in window.clone() {
            let err = trace.angle_error(o, k);
            for i in 0..trace.angles {
                rms[i][o] += err[i] * err[i];
                max_abs[i][o] = max_abs[i][o].max(err[i].abs());
            }
        }
        for row in rms.iter_mut() {
            row[o] = (row[o] / count).sqrt();
        }
    }
    Ok(MetricsTable {
        observers: trace.observers.clone(),
        window: (window.start, window.end),
        rms,
        max_abs,
    })
}

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub trace: EstimateTrace,
    pub metrics: MetricsTable,
    /// Closed-loop spectral radius excluding the equilibrium-manifold modes.
    pub closed_loop_radius: f64,
}

impl ScenarioRun {
    pub fn onset(&self) -> Option<usize> {
        self.config.attack.as_ref().map(|a| a.onset)
    }
}

fn demand_profile(case: &GridCase, samples: usize, fluct: f64, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..samples)
        .map(|_| {
            DVector::from_fn(case.n_b, |i, _| {
                let base = case.nominal_demand[i];
                if fluct > 0.0 && base != 0.0 {
                    base * (1.0 + rng.random_range(-fluct..=fluct))
                } else {
                    base
                }
            })
        })
        .collect()
}

/// Build the model, run every configured observer through the closed loop and
/// compute the metrics.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let prep = prepare(cfg)?;
    let Prepared {
        case,
        sys,
        x0,
        sigma_scale,
        ..
    } = prep;

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let demand_seed = master.next_u64();
    let prior_seed = master.next_u64();
    let attack_seed = master.next_u64();
    let noise_seed = master.next_u64();

    let demand = demand_profile(
        &case,
        cfg.samples,
        cfg.demand_fluctuation,
        &mut ChaCha8Rng::seed_from_u64(demand_seed),
    );
    let controller = PiController::uniform(
        cfg.controller.kp,
        cfg.controller.ki,
        &case.nominal_dispatch,
        cfg.controller.integral_limit,
    )?;
    let radius = closed_loop_spectral_radius(&sys, &controller);
    if radius.is_nan() {
        return Err(Error::config(
            "controller",
            "closed-loop eigenvalues did not converge".to_string(),
        ));
    }
    if radius >= 1.0 {
        return Err(Error::config(
            "controller",
            format!("closed loop is unstable (spectral radius {radius:.6})"),
        ));
    }

    let needs_prior = cfg.observers.contains(&ObserverKind::Mmo);
    let priors = if needs_prior {
        Some(PriorSynthesizer::new(
            PriorConfig {
                sigma_scale,
                offset_fraction: cfg.prior.offset_fraction,
                seed: prior_seed,
            },
            cfg.tau,
        )?)
    } else {
        None
    };

    let ops = if cfg
        .observers
        .iter()
        .any(|o| matches!(o, ObserverKind::L1o | ObserverKind::Mmo))
    {
        Some(build_horizon_operators(&sys, cfg.window)?)
    } else {
        None
    };
    let mut observers: Vec<Box<dyn Observer>> = Vec::new();
    for kind in &cfg.observers {
        let obs: Box<dyn Observer> = match kind {
            ObserverKind::Lo => Box::new(LuenbergerObserver::with_riccati_gain(sys.clone(), x0.clone())?),
            ObserverKind::L1o => Box::new(L1Observer::new(
                sys.clone(),
                ops.clone().expect("operators built for windowed observers"),
                cfg.solver.clone(),
                x0.clone(),
            )?),
            ObserverKind::Mmo => Box::new(MultiModelObserver::new(
                sys.clone(),
                ops.clone().expect("operators built for windowed observers"),
                cfg.solver.clone(),
                x0.clone(),
            )?),
        };
        observers.push(obs);
    }

    let attack = cfg.attack.as_ref().map(|plan| AttackRun {
        plan,
        rng: ChaCha8Rng::seed_from_u64(attack_seed),
    });
    let trace = simulate_closed_loop(
        Simulation {
            case: &case,
            sys: &sys,
            controller,
            demand: &demand,
            samples: cfg.samples,
            x0,
            attack,
            priors,
            noise: (cfg.measurement_noise > 0.0).then(|| SensorNoise {
                std_dev: cfg.measurement_noise,
                rng: ChaCha8Rng::seed_from_u64(noise_seed),
            }),
            bdd_threshold: cfg.bdd_threshold,
        },
        &mut observers,
    )?;
    for (o, f) in trace.failures.iter().enumerate() {
        if let Some((k, msg)) = f.first() {
            log::warn!(
                "observer {} fell back to prediction at {} samples, first at {k}: {msg}",
                trace.observers[o],
                f.len()
            );
        }
    }
    let window = match (cfg.metrics_window, &cfg.attack) {
        (MetricsWindow::PostOnset, Some(a)) => a.onset..cfg.samples,
        _ => 0..cfg.samples,
    };
    let metrics = compute_metrics(&trace, window)?;
    Ok(ScenarioRun {
        config: cfg.clone(),
        trace,
        metrics,
        closed_loop_radius: radius,
    })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    name: &'a str,
    package: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a ScenarioConfig,
    samples: usize,
    observers: &'a [String],
    failures: Vec<usize>,
    alarms: usize,
    max_flow_residual: f64,
    closed_loop_radius: f64,
    files: [&'static str; 2],
}

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `trace.csv`, `metrics.csv` and `manifest.json` into `dir`.
pub fn write_outputs(run: &ScenarioRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.trace.write_csv(fs::File::create(dir.join(TRACE_FILE))?)?;
    run.metrics.write_csv(fs::File::create(dir.join(METRICS_FILE))?)?;
    let manifest = Manifest {
        name: &run.config.name,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: run.config.seed,
        config: &run.config,
        samples: run.trace.len(),
        observers: &run.trace.observers,
        failures: run.trace.failures.iter().map(Vec::len).collect(),
        alarms: run.trace.alarm.iter().filter(|a| **a).count(),
        max_flow_residual: run.trace.max_flow_residual,
        closed_loop_radius: run.closed_loop_radius,
        files: [TRACE_FILE, METRICS_FILE],
    };
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::ResidueReport;
    use crate::observer::Estimate;

    fn trace_with(errors: &[[f64; 1]]) -> EstimateTrace {
        let mut t = EstimateTrace::new(vec!["a".into()], 1, errors.len());
        for (k, e) in errors.iter().enumerate() {
            let truth = DVector::from_vec(vec![1.0, 0.0]);
            let est = Estimate {
                x: DVector::from_vec(vec![1.0 + e[0], 0.0]),
                failure: None,
                iterations: 0,
            };
            let report = ResidueReport {
                residue: 0.0,
                threshold: 0.05,
                alarm: false,
            };
            t.push(k, &truth, vec![est], report, &DVector::zeros(1), 1.0, 0.0);
        }
        t
    }

    #[test]
    fn metric_examples() {
        let exact = trace_with(&[[0.0], [0.0]]);
        let m = compute_metrics(&exact, 0..2).unwrap();
        assert_eq!(m.rms[0][0], 0.0);
        assert_eq!(m.max_abs[0][0], 0.0);

        let constant = trace_with(&[[-0.5], [-0.5], [-0.5]]);
        let m = compute_metrics(&constant, 0..3).unwrap();
        assert!((m.rms[0][0] - 0.5).abs() < 1e-15);
        assert_eq!(m.max_abs[0][0], 0.5);

        let t = trace_with(&[[3.0], [4.0]]);
        let m = compute_metrics(&t, 0..2).unwrap();
        assert!((m.rms[0][0] - 3.5355339059327378).abs() < 1e-12);
        assert_eq!(m.max_abs[0][0], 4.0);

        assert!(compute_metrics(&t, 1..1).is_err());
        assert!(compute_metrics(&t, 0..3).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ScenarioConfig::default();
        assert!(ok.validate().is_ok());
        let bad_tau = ScenarioConfig {
            tau: 1.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(bad_tau.validate(), Err(Error::Config { field, .. }) if field == "tau"));
        let short = ScenarioConfig {
            samples: 210,
            attack: Some(serde_json::from_str(r#"{"support": [5]}"#).unwrap()),
            ..ScenarioConfig::default()
        };
        assert!(matches!(short.validate(), Err(Error::Config { field, .. }) if field == "samples"));
        let narrow = ScenarioConfig {
            window: 4,
            ..ScenarioConfig::default()
        };
        assert!(matches!(prepare(&narrow), Err(Error::Config { field, .. }) if field == "window"));
        assert!(ScenarioConfig::from_json(r#"{"windw": 3}"#).is_err());
    }

    #[test]
    fn bundled_scenarios_parse() {
        let attack = ScenarioConfig::ieee14_attack();
        assert!(attack.validate().is_ok());
        let plan = attack.attack.as_ref().unwrap();
        assert_eq!(plan.onset, 200);
        assert_eq!(plan.support.len(), 6);
        assert!(ScenarioConfig::ieee14_clean().validate().is_ok());
    }
}
