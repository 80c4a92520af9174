//! Adaptive Dormand-Prince 5(4) integration over tensor-valued states.
//!
//! The solver runs directly on a gradient [`Tape`]: every accepted stage is a
//! recorded op, so backpropagation unrolls the exact step sequence the
//! forward pass took. Rejected trial steps leave orphaned ops that no
//! gradient flows through. Step-size control is never differentiated; step
//! sizes are data-dependent constants of the trajectory.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Vid};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// Integrator selection and step-controller constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolveConfig {
    pub method: OdeMethod,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
    pub safety: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Uniform step count when `method` is `Rk4Fixed`.
    pub rk4_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Dopri5,
    Rk4Fixed,
}

impl Default for OdeSolveConfig {
    fn default() -> Self {
        OdeSolveConfig {
            method: OdeMethod::Dopri5,
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1000,
            initial_step: 0.1,
            safety: 0.9,
            min_scale: 0.2,
            max_scale: 10.0,
            rk4_steps: 8,
        }
    }
}

impl OdeSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rtol <= 0.0 || self.atol <= 0.0 {
            return Err(Error::Config(format!(
                "tolerances must be positive (rtol={}, atol={})",
                self.rtol, self.atol
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.initial_step <= 0.0 || self.safety <= 0.0 {
            return Err(Error::Config(
                "initial_step and safety must be positive".into(),
            ));
        }
        if self.min_scale <= 0.0 || self.max_scale < self.min_scale {
            return Err(Error::Config("need 0 < min_scale <= max_scale".into()));
        }
        if self.rk4_steps < 1 {
            return Err(Error::Config("rk4_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Right-hand side of dz/dt = f(z, t), evaluated as tape ops.
pub trait Dynamics {
    fn eval(&self, tape: &mut Tape, z: Vid, t: f64) -> Result<Vid>;
}

/// Learned vector field: a two-layer perceptron with relu, hidden width
/// equal to the state width.
///
/// The time argument of [`Dynamics::eval`] is accepted but unused while
/// `autonomous` is true (the default); a time-dependent variant would hook
/// in behind that flag.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub autonomous: bool,
}

impl VectorField {
    /// Zero-initialized field of width `dim`: f(z) = 0 for all z.
    pub fn zeros(dim: usize) -> Self {
        VectorField {
            w1: Tensor::zeros(&[dim, dim]),
            b1: Tensor::zeros(&[dim]),
            w2: Tensor::zeros(&[dim, dim]),
            b2: Tensor::zeros(&[dim]),
            autonomous: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w1.shape() != [d, d]
            || self.w2.shape() != [d, d]
            || self.b1.shape() != [d]
            || self.b2.shape() != [d]
        {
            return Err(Error::Config(format!(
                "vector field hidden width must equal state width {d}"
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundVectorField {
        BoundVectorField {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
            dim: self.dim(),
            autonomous: self.autonomous,
        }
    }
}

/// A vector field whose parameters are already registered on some tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundVectorField {
    pub w1: Vid,
    pub b1: Vid,
    pub w2: Vid,
    pub b2: Vid,
    pub dim: usize,
    pub autonomous: bool,
}

impl BoundVectorField {
    /// Binds store-held parameters (shared leaves across repeated evals).
    pub fn from_store(
        tape: &mut Tape,
        store: &ParamStore,
        ids: (ParamId, ParamId, ParamId, ParamId),
        dim: usize,
    ) -> Self {
        BoundVectorField {
            w1: tape.param(store, ids.0),
            b1: tape.param(store, ids.1),
            w2: tape.param(store, ids.2),
            b2: tape.param(store, ids.3),
            dim,
            autonomous: true,
        }
    }
}

impl Dynamics for BoundVectorField {
    fn eval(&self, tape: &mut Tape, z: Vid, _t: f64) -> Result<Vid> {
        if !self.autonomous {
            return Err(Error::Config(
                "time-dependent vector field is not implemented; set autonomous = true".into(),
            ));
        }
        let shape = tape.shape(z).to_vec();
        let n = tape.data(z).len();
        if !n.is_multiple_of(self.dim) {
            return Err(Error::shape(
                "vector_field",
                format!("state {shape:?} not divisible by width {}", self.dim),
            ));
        }
        let rows = n / self.dim;
        let flat = tape.reshape(z, &[rows, self.dim])?;
        let h1 = tape.matmul(flat, self.w1)?;
        let h1 = tape.add_bcast(h1, self.b1)?;
        let a = tape.relu(h1);
        let h2 = tape.matmul(a, self.w2)?;
        let h2 = tape.add_bcast(h2, self.b2)?;
        tape.reshape(h2, &shape)
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights; the seventh stage (FSAL) has weight zero.
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
// b5 - b4: scaled by h this is the embedded error estimate z5 - z4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Linear combination z + sum(coeff_i * h * k_i) built from tape ops,
/// skipping zero coefficients.
fn combine(tape: &mut Tape, z: Vid, ks: &[Vid], coeffs: &[f64], h: f64) -> Result<Vid> {
    let mut acc = z;
    for (&k, &c) in ks.iter().zip(coeffs) {
        if c != 0.0 {
            let term = tape.scale(k, c * h);
            acc = tape.add(acc, term)?;
        }
    }
    Ok(acc)
}

struct StageResult {
    z5: Vid,
    /// f(t + h, z5), reusable as the next step's first stage.
    k_last: Vid,
    /// Per-component |z5 - z4|.
    err: Vec<f64>,
}

fn dopri5_stages<D: Dynamics>(
    tape: &mut Tape,
    field: &D,
    z: Vid,
    t: f64,
    h: f64,
    k1: Vid,
) -> Result<StageResult> {
    let mut ks: Vec<Vid> = Vec::with_capacity(7);
    ks.push(k1);
    for stage in 1..6 {
        let zi = combine(tape, z, &ks, &A[stage][..stage], h)?;
        let ki = field.eval(tape, zi, t + C[stage] * h)?;
        check_finite(tape, ki, t)?;
        ks.push(ki);
    }
    debug_assert_eq!(A[6][..], B5[..6], "fsal row equals the fifth-order weights");
    let z5 = combine(tape, z, &ks, &A[6], h)?;
    let k_last = field.eval(tape, z5, t + h)?;
    check_finite(tape, k_last, t)?;
    ks.push(k_last);

    let n = tape.data(z).len();
    let mut err = vec![0.0; n];
    for (&k, &e) in ks.iter().zip(&E) {
        if e != 0.0 {
            let kd = tape.data(k);
            for (ei, &kv) in err.iter_mut().zip(kd) {
                *ei += e * kv;
            }
        }
    }
    for ei in err.iter_mut() {
        *ei = (*ei * h).abs();
    }
    Ok(StageResult { z5, k_last, err })
}

fn check_finite(tape: &Tape, v: Vid, t: f64) -> Result<()> {
    if tape.data(v).iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "vector field produced a non-finite value near t = {t}"
        )));
    }
    Ok(())
}

/// One explicit Dormand-Prince step of size `h` from `(z, t)`.
///
/// Returns the fifth-order solution and the per-component embedded error
/// estimate |z5 - z4|.
pub fn dopri5_step<D: Dynamics>(
    tape: &mut Tape,
    field: &D,
    z: Vid,
    t: f64,
    h: f64,
) -> Result<(Vid, Vec<f64>)> {
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "step size must be positive, got {h}"
        )));
    }
    let k1 = field.eval(tape, z, t)?;
    check_finite(tape, k1, t)?;
    let result = dopri5_stages(tape, field, z, t, h, k1)?;
    Ok((result.z5, result.err))
}

/// Step-size multiplier from the scaled error ratio, clamped to
/// `[min_scale, max_scale]` (elementary controller, exponent 1/5).
pub fn step_scale(err_ratio: f64, cfg: &OdeSolveConfig) -> f64 {
    if err_ratio == 0.0 {
        return cfg.max_scale;
    }
    (cfg.safety * err_ratio.powf(-0.2)).clamp(cfg.min_scale, cfg.max_scale)
}

/// Worst per-component ratio of the error estimate to its tolerance
/// rtol * |z| + atol.
fn error_ratio(tape: &Tape, z: Vid, z5: Vid, err: &[f64], cfg: &OdeSolveConfig) -> f64 {
    let zd = tape.data(z);
    let z5d = tape.data(z5);
    let mut ratio: f64 = 0.0;
    for i in 0..err.len() {
        let sk = cfg.atol + cfg.rtol * zd[i].abs().max(z5d[i].abs());
        ratio = ratio.max(err[i] / sk);
    }
    ratio
}

/// Integrates dz/dt = f(z, t) from `t0` to `t1` starting at `z0`.
///
/// With `OdeMethod::Dopri5`, the step size adapts so each component's local
/// error estimate stays within rtol * |z| + atol; accepted steps reuse the
/// last stage as the next first stage (FSAL). With `OdeMethod::Rk4Fixed`
/// this delegates to [`rk4_solve`] with `cfg.rk4_steps` uniform steps.
pub fn ode_solve<D: Dynamics>(
    tape: &mut Tape,
    field: &D,
    z0: Vid,
    t0: f64,
    t1: f64,
    cfg: &OdeSolveConfig,
) -> Result<Vid> {
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::Config(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    if tape.data(z0).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("initial state is not finite".into()));
    }
    if let OdeMethod::Rk4Fixed = cfg.method {
        return rk4_solve(tape, field, z0, t0, t1, cfg.rk4_steps);
    }

    let span = t1 - t0;
    let eps = 1e-12 * span.max(1.0);
    let mut t = t0;
    let mut z = z0;
    let mut h = cfg.initial_step.min(span);
    let mut k1 = field.eval(tape, z, t)?;
    check_finite(tape, k1, t)?;
    let mut attempts = 0usize;

    while t1 - t > eps {
        if attempts >= cfg.max_steps {
            return Err(Error::Integration {
                t_reached: t,
                steps: attempts,
                detail: "max_steps exceeded".into(),
            });
        }
        let h_eff = h.min(t1 - t);
        let stage = dopri5_stages(tape, field, z, t, h_eff, k1)?;
        attempts += 1;
        let ratio = error_ratio(tape, z, stage.z5, &stage.err, cfg);
        if !ratio.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite error estimate near t = {t}"
            )));
        }
        if ratio <= 1.0 {
            t += h_eff;
            z = stage.z5;
            k1 = stage.k_last;
        }
        h = h_eff * step_scale(ratio, cfg);
    }
    Ok(z)
}

/// Classical fixed-step fourth-order Runge-Kutta, unrolled on the tape.
pub fn rk4_solve<D: Dynamics>(
    tape: &mut Tape,
    field: &D,
    z0: Vid,
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<Vid> {
    if n_steps < 1 {
        return Err(Error::Config("rk4 needs n_steps >= 1".into()));
    }
    if !(t1 > t0) {
        return Err(Error::Config(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut z = z0;
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        let k1 = field.eval(tape, z, t)?;
        let z2 = combine(tape, z, &[k1], &[0.5], h)?;
        let k2 = field.eval(tape, z2, t + 0.5 * h)?;
        let z3 = combine(tape, z, &[k2], &[0.5], h)?;
        let k3 = field.eval(tape, z3, t + 0.5 * h)?;
        let z4 = combine(tape, z, &[k3], &[1.0], h)?;
        let k4 = field.eval(tape, z4, t + h)?;
        check_finite(tape, k4, t)?;
        z = combine(
            tape,
            z,
            &[k1, k2, k3, k4],
            &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            h,
        )?;
    }
    Ok(z)
}
