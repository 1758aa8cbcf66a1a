//! Linearised swing dynamics of a lossless transmission grid with DC power
//! flow, reduced to generator angles and frequencies, and its closed-loop
//! simulation under PI frequency control.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{bdd_residue_test, generate_fdia, AttackPlan};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ContinuousLinearSystem, DiscreteLinearSystem};
use crate::observer::{Observer, Sample};
use crate::prior::PriorSynthesizer;
use crate::trace::EstimateTrace;

/// Bundled IEEE 14-bus case (reactances in per unit, powers in MW).
pub const IEEE14_JSON: &str = include_str!("../data/ieee14.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    /// Series reactance (p.u.).
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub bus: usize,
    /// Transient reactance between the internal node and its bus (p.u.).
    pub xd: f64,
    /// Inertia constant `M` (s^2).
    pub inertia: f64,
    pub damping: f64,
    /// Scheduled output (MW); rescaled to balance the load.
    #[serde(default)]
    pub p_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    pub bus: usize,
    pub p_mw: f64,
}

/// JSON case description; bus numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_base")]
    pub base_mva: f64,
    pub buses: usize,
    #[serde(default)]
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorRecord>,
    #[serde(default)]
    pub loads: Vec<LoadRecord>,
}

fn default_base() -> f64 {
    100.0
}

impl CaseFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn ieee14() -> Self {
        Self::from_json(IEEE14_JSON).expect("bundled case parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Network data in the generator-first node ordering.
#[derive(Debug, Clone)]
pub struct GridCase {
    pub name: String,
    pub n_g: usize,
    pub n_b: usize,
    /// `(n_g + n_b)` square susceptance-weighted Laplacian.
    pub laplacian: DMatrix<f64>,
    pub inertia: DVector<f64>,
    pub damping: DVector<f64>,
    /// Linearised bus injection map `P_net = p_node * theta`.
    pub p_node: DMatrix<f64>,
    /// Bus of each generator, 0-based.
    pub gen_bus: Vec<usize>,
    /// Nominal bus demand in injection convention (loads negative, p.u.).
    pub nominal_demand: DVector<f64>,
    /// Generator dispatch balancing `nominal_demand` (p.u.).
    pub nominal_dispatch: DVector<f64>,
}

impl GridCase {
    pub fn from_case_file(file: &CaseFile) -> Result<Self> {
        let n_b = file.buses;
        let n_g = file.generators.len();
        if n_b == 0 || n_g == 0 {
            return Err(Error::config("case", "needs at least one bus and one generator"));
        }
        if !(file.base_mva > 0.0) {
            return Err(Error::config("base_mva", "must be positive"));
        }
        let bus_index = |field: &str, bus: usize| -> Result<usize> {
            if bus == 0 || bus > n_b {
                Err(Error::config(field, format!("bus {bus} is outside 1..={n_b}")))
            } else {
                Ok(bus - 1)
            }
        };
        let n = n_g + n_b;
        let mut lap = DMatrix::zeros(n, n);
        let mut add_edge = |i: usize, j: usize, b: f64| {
            lap[(i, i)] += b;
            lap[(j, j)] += b;
            lap[(i, j)] -= b;
            lap[(j, i)] -= b;
        };
        for br in &file.branches {
            let f = bus_index("branches.from", br.from)?;
            let t = bus_index("branches.to", br.to)?;
            if f == t {
                return Err(Error::config("branches", format!("branch {} -> {} is a self loop", br.from, br.to)));
            }
            if !(br.x > 0.0 && br.x.is_finite()) {
                return Err(Error::config("branches.x", "reactances must be positive"));
            }
            add_edge(n_g + f, n_g + t, 1.0 / br.x);
        }
        let mut gen_bus = Vec::with_capacity(n_g);
        for (i, g) in file.generators.iter().enumerate() {
            let b = bus_index("generators.bus", g.bus)?;
            if !(g.xd > 0.0 && g.xd.is_finite()) {
                return Err(Error::config("generators.xd", "must be positive"));
            }
            if !(g.inertia > 0.0 && g.inertia.is_finite()) {
                return Err(Error::config("generators.inertia", "must be positive"));
            }
            if !(g.damping > 0.0 && g.damping.is_finite()) {
                return Err(Error::config("generators.damping", "must be positive"));
            }
            add_edge(i, n_g + b, 1.0 / g.xd);
            gen_bus.push(b);
        }
        let mut demand = DVector::<f64>::zeros(n_b);
        for ld in &file.loads {
            let b = bus_index("loads.bus", ld.bus)?;
            if !ld.p_mw.is_finite() {
                return Err(Error::config("loads.p_mw", "must be finite"));
            }
            demand[b] -= ld.p_mw / file.base_mva;
        }
        let sched: Vec<f64> = file.generators.iter().map(|g| g.p_mw.max(0.0)).collect();
        let total_load = -demand.sum();
        let total_sched: f64 = sched.iter().sum();
        let dispatch = if total_sched > 0.0 {
            DVector::from_iterator(n_g, sched.iter().map(|p| p / total_sched * total_load))
        } else {
            DVector::from_element(n_g, total_load / n_g as f64)
        };
        let laplacian = lap;
        let p_node = laplacian.view((n_g, n_g), (n_b, n_b)).into_owned();
        Ok(Self {
            name: file.name.clone(),
            n_g,
            n_b,
            laplacian,
            inertia: DVector::from_iterator(n_g, file.generators.iter().map(|g| g.inertia)),
            damping: DVector::from_iterator(n_g, file.generators.iter().map(|g| g.damping)),
            p_node,
            gen_bus,
            nominal_demand: demand,
            nominal_dispatch: dispatch,
        })
    }

    pub fn ieee14() -> Self {
        Self::from_case_file(&CaseFile::ieee14()).expect("bundled case is valid")
    }

    /// Build from an explicit Laplacian; `p_node` defaults to the bus block.
    pub fn from_parts(
        laplacian: DMatrix<f64>,
        n_g: usize,
        inertia: DVector<f64>,
        damping: DVector<f64>,
        p_node: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = laplacian.nrows();
        if laplacian.ncols() != n || n_g == 0 || n_g >= n {
            return Err(Error::DimensionMismatch("Laplacian must be square with buses after generators".into()));
        }
        if inertia.len() != n_g || damping.len() != n_g {
            return Err(Error::DimensionMismatch("one inertia and damping value per generator".into()));
        }
        if !inertia.iter().chain(damping.iter()).all(|v| *v > 0.0) {
            return Err(Error::config("inertia/damping", "must be positive"));
        }
        let n_b = n - n_g;
        let p_node = p_node.unwrap_or_else(|| laplacian.view((n_g, n_g), (n_b, n_b)).into_owned());
        if p_node.shape() != (n_b, n_b) {
            return Err(Error::DimensionMismatch("p_node must be n_b x n_b".into()));
        }
        Ok(Self {
            name: String::new(),
            n_g,
            n_b,
            laplacian,
            inertia,
            damping,
            p_node,
            gen_bus: Vec::new(),
            nominal_demand: DVector::zeros(n_b),
            nominal_dispatch: DVector::zeros(n_g),
        })
    }

    pub fn l_gg(&self) -> DMatrix<f64> {
        self.laplacian.view((0, 0), (self.n_g, self.n_g)).into_owned()
    }

    /// Generator rows, bus columns.
    pub fn l_gl(&self) -> DMatrix<f64> {
        self.laplacian.view((0, self.n_g), (self.n_g, self.n_b)).into_owned()
    }

    /// Bus rows, generator columns.
    pub fn l_lg(&self) -> DMatrix<f64> {
        self.laplacian.view((self.n_g, 0), (self.n_b, self.n_g)).into_owned()
    }

    pub fn l_ll(&self) -> DMatrix<f64> {
        self.laplacian.view((self.n_g, self.n_g), (self.n_b, self.n_b)).into_owned()
    }

    fn l_ll_inv(&self) -> Result<DMatrix<f64>> {
        let l_ll = self.l_ll();
        let sv = l_ll.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > linalg::RANK_RTOL * smax) {
            return Err(Error::Reduction("bus block of the Laplacian is singular".into()));
        }
        log::debug!("bus Laplacian condition number {:.3e}", smax / smin);
        l_ll
            .try_inverse()
            .ok_or_else(|| Error::Reduction("bus block of the Laplacian is singular".into()))
    }

    /// Kron reduction `L_gg - L_gl L_ll^-1 L_lg`.
    pub fn kron_reduced(&self) -> Result<DMatrix<f64>> {
        Ok(self.l_gg() - self.l_gl() * self.l_ll_inv()? * self.l_lg())
    }

    /// Number of outputs `[omega; P_net]`.
    pub fn output_len(&self) -> usize {
        self.n_g + self.n_b
    }

    /// Output index of the net injection at 0-based bus `bus`.
    pub fn p_net_channel(&self, bus: usize) -> usize {
        self.n_g + bus
    }
}

/// Reduced model with state `[delta; omega]`, input `[P_g; P_d]` and output
/// `[omega; P_net]`.
pub fn build_reduced_model(case: &GridCase) -> Result<ContinuousLinearSystem> {
    let (ng, nb) = (case.n_g, case.n_b);
    let l_inv = case.l_ll_inv()?;
    let kron = case.l_gg() - case.l_gl() * &l_inv * case.l_lg();
    let m_inv = DMatrix::from_diagonal(&case.inertia.map(|v| 1.0 / v));
    let mut a = DMatrix::zeros(2 * ng, 2 * ng);
    a.view_mut((0, ng), (ng, ng)).copy_from(&DMatrix::identity(ng, ng));
    a.view_mut((ng, 0), (ng, ng)).copy_from(&(-&m_inv * &kron));
    a.view_mut((ng, ng), (ng, ng))
        .copy_from(&(-&m_inv * DMatrix::from_diagonal(&case.damping)));

    let mut b = DMatrix::zeros(2 * ng, ng + nb);
    b.view_mut((ng, 0), (ng, ng)).copy_from(&m_inv);
    b.view_mut((ng, ng), (ng, nb)).copy_from(&(-&m_inv * case.l_gl() * &l_inv));

    let pl = &case.p_node * &l_inv;
    let mut c = DMatrix::zeros(ng + nb, 2 * ng);
    c.view_mut((0, ng), (ng, ng)).copy_from(&DMatrix::identity(ng, ng));
    c.view_mut((ng, 0), (nb, ng)).copy_from(&(-&pl * case.l_lg()));

    let mut d = DMatrix::zeros(ng + nb, ng + nb);
    d.view_mut((ng, ng), (nb, nb)).copy_from(&pl);
    ContinuousLinearSystem::new(a, b, c, d)
}

/// `theta = -L_ll^-1 (L_lg delta - P_d)`.
pub fn recover_bus_angles(case: &GridCase, delta: &DVector<f64>, p_d: &DVector<f64>) -> Result<DVector<f64>> {
    if delta.len() != case.n_g || p_d.len() != case.n_b {
        return Err(Error::DimensionMismatch("rotor angle or demand vector has the wrong length".into()));
    }
    let rhs = case.l_lg() * delta - p_d;
    let lu = case.l_ll().lu();
    let theta = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Reduction("bus block of the Laplacian is singular".into()))?;
    Ok(-theta)
}

/// Residual of `L_lg delta + L_ll theta = P_d`.
pub fn power_flow_residual(case: &GridCase, delta: &DVector<f64>, theta: &DVector<f64>, p_d: &DVector<f64>) -> f64 {
    (case.l_lg() * delta + case.l_ll() * theta - p_d).amax()
}

/// Steady state `[delta; 0]` for balanced dispatch `p_g` and demand `p_d`; the
/// rotor angles are the minimum-norm solution.
pub fn equilibrium(case: &GridCase, p_g: &DVector<f64>, p_d: &DVector<f64>) -> Result<DVector<f64>> {
    if p_g.len() != case.n_g || p_d.len() != case.n_b {
        return Err(Error::DimensionMismatch("dispatch or demand vector has the wrong length".into()));
    }
    let l_inv = case.l_ll_inv()?;
    let kron = case.l_gg() - case.l_gl() * &l_inv * case.l_lg();
    let rhs = p_g - case.l_gl() * &l_inv * p_d;
    let delta = linalg::lstsq(&kron, &rhs);
    let resid = (&kron * &delta - &rhs).amax();
    if resid > 1e-9 * rhs.amax().max(1.0) {
        return Err(Error::config(
            "dispatch",
            format!("generation and demand do not balance (residual {resid:.3e})"),
        ));
    }
    let mut x = DVector::zeros(2 * case.n_g);
    x.rows_mut(0, case.n_g).copy_from(&delta);
    Ok(x)
}

/// Per-generator PI frequency regulator around a reference dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiController {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub integral_state: Vec<f64>,
    pub setpoint: f64,
    /// Symmetric clamp on each integral state.
    pub integral_limit: f64,
    pub p_ref: Vec<f64>,
}

impl PiController {
    pub fn new(kp: Vec<f64>, ki: Vec<f64>, p_ref: Vec<f64>, integral_limit: f64) -> Result<Self> {
        let n = p_ref.len();
        if kp.len() != n || ki.len() != n {
            return Err(Error::config("controller", "one kp and ki per generator"));
        }
        if !kp.iter().chain(ki.iter()).all(|g| *g >= 0.0 && g.is_finite()) {
            return Err(Error::config("controller", "gains must be non-negative"));
        }
        if !(integral_limit > 0.0) {
            return Err(Error::config("controller.integral_limit", "must be positive"));
        }
        Ok(Self {
            kp,
            ki,
            integral_state: vec![0.0; n],
            setpoint: 0.0,
            integral_limit,
            p_ref,
        })
    }

    pub fn uniform(kp: f64, ki: f64, p_ref: &DVector<f64>, integral_limit: f64) -> Result<Self> {
        let n = p_ref.len();
        Self::new(vec![kp; n], vec![ki; n], p_ref.iter().copied().collect(), integral_limit)
    }

    /// Advance the integrators and return the mechanical power command.
    pub fn step(&mut self, omega: &DVector<f64>, dt: f64) -> DVector<f64> {
        debug_assert!(dt > 0.0);
        DVector::from_fn(self.p_ref.len(), |i, _| {
            let err = self.setpoint - omega[i];
            let acc = (self.integral_state[i] + err * dt).clamp(-self.integral_limit, self.integral_limit);
            self.integral_state[i] = acc;
            self.p_ref[i] + self.kp[i] * err + self.ki[i] * acc
        })
    }
}

pub fn pi_control_step(ctrl: &mut PiController, omega: &DVector<f64>, dt: f64) -> DVector<f64> {
    ctrl.step(omega, dt)
}

/// Largest closed-loop eigenvalue modulus of the sampled plant with the
/// controller, excluding eigenvalues at 1. Those belong to the manifold of
/// equilibria: a common rotor-angle shift and any redistribution of the
/// integral states between generators. NaN if the eigenvalues did not converge.
pub fn closed_loop_spectral_radius(sys: &DiscreteLinearSystem, ctrl: &PiController) -> f64 {
    let ng = ctrl.p_ref.len();
    let n = sys.n();
    let dt = sys.dt;
    // Augmented state [x; integral]; frequencies are the first ng outputs.
    let c_w = sys.c.rows(0, ng).into_owned();
    let kp = DMatrix::from_diagonal(&DVector::from_vec(ctrl.kp.clone()));
    let ki = DMatrix::from_diagonal(&DVector::from_vec(ctrl.ki.clone()));
    let b_g = sys.b.columns(0, ng).into_owned();
    let mut a = DMatrix::zeros(n + ng, n + ng);
    // integral+ = integral - dt C_w x; P_g = -kp C_w x + ki integral+.
    let gain_x = -(&kp * &c_w) - &ki * &c_w * dt;
    a.view_mut((0, 0), (n, n)).copy_from(&(&sys.a + &b_g * &gain_x));
    a.view_mut((0, n), (n, ng)).copy_from(&(&b_g * &ki));
    a.view_mut((n, 0), (ng, n)).copy_from(&(-&c_w * dt));
    a.view_mut((n, n), (ng, ng)).copy_from(&DMatrix::identity(ng, ng));

    match linalg::eigenvalues(&a) {
        Some(ev) => ev
            .iter()
            .filter(|z| (z.re - 1.0).hypot(z.im) > 1e-9)
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        None => f64::NAN,
    }
}

/// Seeded attack generator attached to one run.
pub struct AttackRun<'a> {
    pub plan: &'a AttackPlan,
    pub rng: ChaCha8Rng,
}

/// Everything a closed-loop run needs besides the observers.
pub struct Simulation<'a> {
    pub case: &'a GridCase,
    pub sys: &'a DiscreteLinearSystem,
    pub controller: PiController,
    /// Bus demand per sample (injection convention).
    pub demand: &'a [DVector<f64>],
    pub samples: usize,
    pub x0: DVector<f64>,
    pub attack: Option<AttackRun<'a>>,
    pub priors: Option<PriorSynthesizer>,
    pub noise: Option<SensorNoise>,
    pub bdd_threshold: f64,
}

/// I.i.d. Gaussian sensor noise added to every channel.
#[derive(Debug, Clone)]
pub struct SensorNoise {
    pub std_dev: f64,
    pub rng: ChaCha8Rng,
}

impl SensorNoise {
    fn draw(&mut self, m: usize) -> DVector<f64> {
        let std_dev = self.std_dev;
        let rng = &mut self.rng;
        DVector::from_fn(m, |_, _| std_dev * rng.sample::<f64, _>(StandardNormal))
    }
}

/// Run the plant, attack, detector and observers sample by sample.
///
/// At sample `k`: the attack is formed from the clean output, the controller
/// reads the (possibly corrupted) frequency channels, the measurement
/// `y_k = C x_k + D u_k + v_k + e_k` is scored by the detector and handed to every
/// observer, and the plant advances.
pub fn simulate_closed_loop(sim: Simulation<'_>, observers: &mut [Box<dyn Observer>]) -> Result<EstimateTrace> {
    let Simulation {
        case,
        sys,
        mut controller,
        demand,
        samples,
        x0,
        mut attack,
        mut priors,
        mut noise,
        bdd_threshold,
    } = sim;
    let (ng, nb) = (case.n_g, case.n_b);
    if sys.n() != 2 * ng || sys.m() != ng + nb || sys.l() != ng + nb {
        return Err(Error::DimensionMismatch("system does not match the grid case".into()));
    }
    if demand.len() < samples {
        return Err(Error::config("demand", format!("{} demand samples for a {samples}-sample run", demand.len())));
    }
    if x0.len() != sys.n() {
        return Err(Error::DimensionMismatch("initial state has the wrong length".into()));
    }
    let names = observers.iter().map(|o| o.name().to_string()).collect();
    let mut trace = EstimateTrace::new(names, ng, samples);
    let mut x = x0;
    let mut p_g = DVector::from_vec(controller.p_ref.clone());
    let zero_e = DVector::zeros(sys.m());
    for k in 0..samples {
        let p_d = &demand[k];
        if p_d.len() != nb {
            return Err(Error::DimensionMismatch(format!("demand sample {k} has the wrong length")));
        }
        let mut u = DVector::zeros(ng + nb);
        u.rows_mut(0, ng).copy_from(&p_g);
        u.rows_mut(ng, nb).copy_from(p_d);
        let y_pre = sys.output(&x, &u);
        let (e, scale) = match attack.as_mut() {
            Some(run) => {
                let out = generate_fdia(run.plan, sys, &y_pre, &u, k, &mut run.rng, bdd_threshold)?;
                (out.e, out.scale)
            }
            None => (zero_e.clone(), 1.0),
        };
        let v = match noise.as_mut() {
            Some(n) => n.draw(sys.m()),
            None => zero_e.clone(),
        };
        let omega_meas = (&y_pre + &v + &e).rows(0, ng).into_owned();
        p_g = controller.step(&omega_meas, sys.dt);
        u.rows_mut(0, ng).copy_from(&p_g);
        let y_clean = sys.output(&x, &u);
        let y = &y_clean + &v + &e;

        let report = bdd_residue_test(&y, &u, sys, bdd_threshold)?;
        let prior = match priors.as_mut() {
            Some(p) => Some(p.next_prior(&y_clean)?),
            None => None,
        };
        let sample = Sample {
            k,
            y: &y,
            u: &u,
            prior: prior.as_ref(),
        };
        let delta = x.rows(0, ng).into_owned();
        let theta = recover_bus_angles(case, &delta, p_d)?;
        let flow_resid = power_flow_residual(case, &delta, &theta, p_d);
        let estimates: Vec<_> = observers.iter_mut().map(|o| o.observe(&sample)).collect();
        trace.push(k, &x, estimates, report, &e, scale, flow_resid);
        x = sys.step(&x, &u);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::discretize;

    #[test]
    fn toy_reduction_by_hand() {
        // One generator node tied to one bus with unit reactance.
        let lap = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let case = GridCase::from_parts(lap, 1, DVector::from_element(1, 1.0), DVector::from_element(1, 1.0), None)
            .unwrap();
        let sys = build_reduced_model(&case).unwrap();
        assert_eq!(sys.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]));
        assert_eq!(sys.b, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        assert_eq!(sys.c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(sys.d, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn decoupled_network() {
        // Two generators joined to each other, one isolated bus pair.
        let mut lap = DMatrix::zeros(4, 4);
        lap.view_mut((0, 0), (2, 2))
            .copy_from(&DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
        lap.view_mut((2, 2), (2, 2))
            .copy_from(&DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
        let m = DVector::from_vec(vec![0.5, 0.25]);
        let case = GridCase::from_parts(lap.clone(), 2, m.clone(), DVector::from_element(2, 0.1), None).unwrap();
        let sys = build_reduced_model(&case).unwrap();
        let m_inv = DMatrix::from_diagonal(&m.map(|v| 1.0 / v));
        let lower_left = sys.a.view((2, 0), (2, 2)).into_owned();
        assert!(linalg::max_abs(&(lower_left + &m_inv * case.l_gg())) < 1e-15);
        assert!(linalg::max_abs(&sys.b.view((0, 2), (4, 2)).into_owned()) == 0.0);
    }

    #[test]
    fn ieee14_laplacian_and_kron() {
        let case = GridCase::ieee14();
        assert_eq!((case.n_g, case.n_b), (5, 14));
        let lap = &case.laplacian;
        assert!(linalg::max_abs(&(lap - lap.transpose())) < 1e-15);
        for i in 0..19 {
            assert!(lap.row(i).sum().abs() < 1e-12);
        }
        let k = case.kron_reduced().unwrap();
        assert!(linalg::max_abs(&(&k - k.transpose())) < 1e-12);
        for i in 0..5 {
            assert!(k.row(i).sum().abs() < 1e-10);
        }
        let eig = k.symmetric_eigen().eigenvalues;
        assert!(eig.min() > -1e-10);
        assert_eq!(eig.iter().filter(|v| v.abs() < 1e-9).count(), 1);
        assert!((case.nominal_dispatch.sum() + case.nominal_demand.sum()).abs() < 1e-12);
    }

    #[test]
    fn ieee14_model_is_observable_with_unit_rotational_mode() {
        let case = GridCase::ieee14();
        let sys = discretize(&build_reduced_model(&case).unwrap(), 0.01).unwrap();
        assert!(crate::model::is_observable(&sys));
        let rho = linalg::spectral_radius(&sys.a);
        assert!((rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bus_angle_examples() {
        let case = GridCase::ieee14();
        let zero = recover_bus_angles(&case, &DVector::zeros(5), &DVector::zeros(14)).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let delta = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.3, 0.0]);
        let p_d = case.l_lg() * &delta;
        assert!(recover_bus_angles(&case, &delta, &p_d).unwrap().amax() < 1e-14);

        let x = equilibrium(&case, &case.nominal_dispatch, &case.nominal_demand).unwrap();
        let d = x.rows(0, 5).into_owned();
        let theta = recover_bus_angles(&case, &d, &case.nominal_demand).unwrap();
        assert!(power_flow_residual(&case, &d, &theta, &case.nominal_demand) < 1e-10);
        // Reduced dynamics are stationary there.
        let cont = build_reduced_model(&case).unwrap();
        let mut u = DVector::zeros(19);
        u.rows_mut(0, 5).copy_from(&case.nominal_dispatch);
        u.rows_mut(5, 14).copy_from(&case.nominal_demand);
        assert!((&cont.a * &x + &cont.b * &u).amax() < 1e-10);
        // Net injections equal p_node * theta.
        let y = &cont.c * &x + &cont.d * &u;
        let p_net = &case.p_node * &theta;
        assert!((y.rows(5, 14) - p_net).amax() < 1e-10);
    }

    #[test]
    fn pi_examples() {
        let mut pi = PiController::new(vec![2.0], vec![0.0], vec![0.0], 10.0).unwrap();
        let w = DVector::from_element(1, -0.1);
        for _ in 0..3 {
            assert!((pi.step(&w, 0.01)[0] - 0.2).abs() < 1e-15);
        }
        let mut pi = PiController::new(vec![2.0], vec![1.0], vec![0.0], 10.0).unwrap();
        pi.step(&w, 0.5);
        let p = pi.step(&DVector::zeros(1), 0.5);
        assert!((p[0] - 0.05).abs() < 1e-15);
        let mut clamp = PiController::new(vec![0.0], vec![1.0], vec![0.0], 0.01).unwrap();
        for _ in 0..100 {
            clamp.step(&w, 1.0);
        }
        assert_eq!(clamp.integral_state[0], 0.01);
    }

    #[test]
    fn step_load_is_regulated() {
        let case = GridCase::ieee14();
        let sys = discretize(&build_reduced_model(&case).unwrap(), 0.01).unwrap();
        let mut ctrl = PiController::uniform(2.0, 5.0, &case.nominal_dispatch, 100.0).unwrap();
        assert!(closed_loop_spectral_radius(&sys, &ctrl) < 1.0);
        let mut x = equilibrium(&case, &case.nominal_dispatch, &case.nominal_demand).unwrap();
        let mut p_d = case.nominal_demand.clone();
        p_d[3] -= 0.1;
        let mut u = DVector::zeros(19);
        for _ in 0..6000 {
            let p_g = ctrl.step(&x.rows(5, 5).into_owned(), sys.dt);
            u.rows_mut(0, 5).copy_from(&p_g);
            u.rows_mut(5, 14).copy_from(&p_d);
            x = sys.step(&x, &u);
        }
        assert!(x.rows(5, 5).amax() < 1e-3);
    }
}
