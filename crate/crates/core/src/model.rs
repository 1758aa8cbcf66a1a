//! Linear physics model: continuous and discrete state-space systems, horizon
//! stacking, the annihilator of the stacked observability map, and forward
//! propagation of window estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!("A is {}x{}, expected square", n, a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!("B has {} rows, A has {}", b.nrows(), n)));
    }
    if c.ncols() != n {
        return Err(Error::DimensionMismatch(format!("C has {} columns, A has {}", c.ncols(), n)));
    }
    if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "D is {}x{}, expected {}x{}",
            d.nrows(),
            d.ncols(),
            c.nrows(),
            b.ncols()
        )));
    }
    for (name, m) in [("A", a), ("B", b), ("C", c), ("D", d)] {
        if !linalg::all_finite(m) {
            return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
        }
    }
    Ok(())
}

/// `dx/dt = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl ContinuousLinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// `x[k+1] = A x[k] + B u[k]`, `y[k] = C x[k] + D u[k]` sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemDocument", into = "SystemDocument")]
pub struct DiscreteLinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub dt: f64,
}

impl DiscreteLinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, dt: f64) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidModel(format!("sample period must be positive, got {dt}")));
        }
        Ok(Self { a, b, c, d, dt })
    }

    /// System without inputs or feedthrough (`l = 0`).
    pub fn autonomous(a: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        Self::new(a, DMatrix::zeros(n, 0), c, DMatrix::zeros(m, 0), dt)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn l(&self) -> usize {
        self.b.ncols()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Row-major JSON form of a discrete system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    0.01
}

pub(crate) fn matrix_from_rows(name: &str, rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, ncols_if_empty));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("matrix `{name}` has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

impl TryFrom<SystemDocument> for DiscreteLinearSystem {
    type Error = Error;

    fn try_from(doc: SystemDocument) -> Result<Self> {
        let a = matrix_from_rows("a", &doc.a, 0)?;
        let n = a.nrows();
        let c = matrix_from_rows("c", &doc.c, n)?;
        let b = match &doc.b {
            Some(rows) => matrix_from_rows("b", rows, 0)?,
            None => DMatrix::zeros(n, 0),
        };
        let d = match &doc.d {
            Some(rows) => matrix_from_rows("d", rows, b.ncols())?,
            None => DMatrix::zeros(c.nrows(), b.ncols()),
        };
        DiscreteLinearSystem::new(a, b, c, d, doc.dt)
    }
}

impl From<DiscreteLinearSystem> for SystemDocument {
    fn from(s: DiscreteLinearSystem) -> Self {
        SystemDocument {
            a: matrix_to_rows(&s.a),
            b: Some(matrix_to_rows(&s.b)),
            c: matrix_to_rows(&s.c),
            d: Some(matrix_to_rows(&s.d)),
            dt: s.dt,
        }
    }
}

/// Zero-order-hold discretization via the exponential of the augmented matrix
/// `[[A, B], [0, 0]] * dt`.
pub fn discretize(sys: &ContinuousLinearSystem, dt: f64) -> Result<DiscreteLinearSystem> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidModel(format!("sample period must be positive, got {dt}")));
    }
    check_dims(&sys.a, &sys.b, &sys.c, &sys.d)?;
    let n = sys.n();
    let l = sys.b.ncols();
    let mut aug = DMatrix::zeros(n + l, n + l);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
    aug.view_mut((0, n), (n, l)).copy_from(&(&sys.b * dt));
    let e = aug.exp();
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, l)).into_owned();
    if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
        return Err(Error::InvalidModel("matrix exponential overflowed".into()));
    }
    DiscreteLinearSystem::new(a, b, sys.c.clone(), sys.d.clone(), dt)
}

/// `[C; CA; ...; CA^(k-1)]` built by repeated multiplication.
pub fn observability_stack(a: &DMatrix<f64>, c: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let m = c.nrows();
    let n = a.nrows();
    let mut out = DMatrix::zeros(m * k, n);
    let mut block = c.clone();
    for i in 0..k {
        out.view_mut((i * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

pub fn is_observable(sys: &DiscreteLinearSystem) -> bool {
    let n = sys.n();
    if n == 0 {
        return true;
    }
    linalg::rank(&observability_stack(&sys.a, &sys.c, n)) == n
}

/// Stacked maps for a moving window of `window` samples `k-T+1 ..= k`.
///
/// The stacked input vector holds all `T` inputs of the window, oldest first.
/// Block `(i, j)` of `h` is `C A^(i-j-1) B` below the diagonal and `D` on it, so
/// `y_stack = phi * x[k-T+1] + h * u_stack + e_stack` holds exactly with
/// feedthrough. The propagator only uses the first `T-1` inputs.
#[derive(Debug, Clone)]
pub struct HorizonOperators {
    pub window: usize,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    /// `mT x n` stacked observability map.
    pub phi: DMatrix<f64>,
    /// `mT x lT` input convolution map.
    pub h: DMatrix<f64>,
    /// `(mT - rank) x mT`, orthonormal rows, `annihilator * phi = 0`.
    pub annihilator: Option<DMatrix<f64>>,
    /// Orthonormal basis of `range(phi)`.
    pub range_basis: Option<DMatrix<f64>>,
    /// `[A^(T-2) B, ..., B]`.
    pub propagator: DMatrix<f64>,
    /// `A^(T-1)`.
    pub state_transition: DMatrix<f64>,
    /// Last `m` rows of `phi`, equal to `C A^(T-1)`.
    pub phi_last: DMatrix<f64>,
    /// Last `m` rows of `h`.
    pub h_last: DMatrix<f64>,
}

impl HorizonOperators {
    pub fn has_annihilator(&self) -> bool {
        self.annihilator.is_some()
    }

    pub fn annihilator(&self) -> Result<&DMatrix<f64>> {
        self.annihilator
            .as_ref()
            .ok_or_else(|| Error::AnnihilatorUnavailable("operators were built without an annihilator".into()))
    }

    pub fn stacked_len(&self) -> usize {
        self.m * self.window
    }

    pub fn input_len(&self) -> usize {
        self.l * self.window
    }

    /// `y_stack - h * u_stack` after checking both lengths.
    pub fn input_free(&self, y_stack: &DVector<f64>, u_stack: &DVector<f64>) -> Result<DVector<f64>> {
        if y_stack.len() != self.stacked_len() {
            return Err(Error::DimensionMismatch(format!(
                "measurement stack has {} entries, expected {}",
                y_stack.len(),
                self.stacked_len()
            )));
        }
        if u_stack.len() != self.input_len() {
            return Err(Error::DimensionMismatch(format!(
                "input stack has {} entries, expected {}",
                u_stack.len(),
                self.input_len()
            )));
        }
        Ok(y_stack - &self.h * u_stack)
    }
}

fn build_stacks(sys: &DiscreteLinearSystem, window: usize) -> Result<HorizonOperators> {
    if window == 0 {
        return Err(Error::DimensionMismatch("window length must be at least 1".into()));
    }
    let (n, m, l) = (sys.n(), sys.m(), sys.l());
    let phi = observability_stack(&sys.a, &sys.c, window);

    // Markov parameters C A^j B for j = 0..T-2.
    let mut markov = Vec::with_capacity(window.saturating_sub(1));
    let mut ca = sys.c.clone();
    for _ in 0..window.saturating_sub(1) {
        markov.push(&ca * &sys.b);
        ca = &ca * &sys.a;
    }
    let mut h = DMatrix::zeros(m * window, l * window);
    for i in 0..window {
        h.view_mut((i * m, i * l), (m, l)).copy_from(&sys.d);
        for j in 0..i {
            h.view_mut((i * m, j * l), (m, l)).copy_from(&markov[i - j - 1]);
        }
    }

    // Powers A^0 .. A^(T-1).
    let mut powers = Vec::with_capacity(window);
    powers.push(DMatrix::identity(n, n));
    for k in 1..window {
        let next = &powers[k - 1] * &sys.a;
        powers.push(next);
    }
    let mut propagator = DMatrix::zeros(n, l * window.saturating_sub(1));
    for j in 0..window.saturating_sub(1) {
        let blk = &powers[window - 2 - j] * &sys.b;
        propagator.view_mut((0, j * l), (n, l)).copy_from(&blk);
    }
    let phi_last = phi.rows((window - 1) * m, m).into_owned();
    let h_last = h.rows((window - 1) * m, m).into_owned();

    Ok(HorizonOperators {
        window,
        n,
        m,
        l,
        phi,
        h,
        annihilator: None,
        range_basis: None,
        propagator,
        state_transition: powers.pop().unwrap_or_else(|| DMatrix::identity(n, n)),
        phi_last,
        h_last,
    })
}

/// Stacked operators without the annihilator; valid for any `T >= 1`.
pub fn build_stacked_operators(sys: &DiscreteLinearSystem, window: usize) -> Result<HorizonOperators> {
    build_stacks(sys, window)
}

/// Stacked operators plus the annihilator `U2^T` from the SVD of `phi`.
///
/// Fails when `T < n` or when `phi` loses rank (unobservable pair).
pub fn build_horizon_operators(sys: &DiscreteLinearSystem, window: usize) -> Result<HorizonOperators> {
    let mut ops = build_stacks(sys, window)?;
    let n = sys.n();
    if window < n {
        return Err(Error::AnnihilatorUnavailable(format!(
            "window {window} is shorter than the state dimension {n}"
        )));
    }
    let (u1, u2) = linalg::range_and_complement(&ops.phi);
    if u1.ncols() != n {
        return Err(Error::AnnihilatorUnavailable(format!(
            "stacked observability map has rank {} < {n}; the pair (A, C) is not observable",
            u1.ncols()
        )));
    }
    ops.annihilator = Some(u2.transpose());
    ops.range_basis = Some(u1);
    Ok(ops)
}

/// `x[k] = A^(T-1) x[k-T+1] + G u_(T-1)` with the `T-1` inputs oldest first.
pub fn propagate_estimate(
    x_first: &DVector<f64>,
    inputs: &DVector<f64>,
    ops: &HorizonOperators,
) -> Result<DVector<f64>> {
    if x_first.len() != ops.n {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries, expected {}",
            x_first.len(),
            ops.n
        )));
    }
    let need = ops.l * ops.window.saturating_sub(1);
    if inputs.len() != need {
        return Err(Error::DimensionMismatch(format!(
            "propagation needs {need} input entries, got {}",
            inputs.len()
        )));
    }
    Ok(&ops.state_transition * x_first + &ops.propagator * inputs)
}
