//! Latitude-weighted training losses with physics penalties, and the
//! verification metrics (latitude-weighted RMSE, anomaly correlation).
//!
//! The losses exist in two forms: tape ops (suffix `_t`) used during
//! training, and plain value wrappers over GridFields that run the same ops
//! on a scratch tape. Metrics are plain functions; their contracts are
//! checked against independent brute-force reimplementations in the tests.

use serde::{Deserialize, Serialize};

use crate::data::{GridField, VAR_T2M, VAR_U10, VAR_V10};
use crate::diffcore::{Tape, Vid};
use crate::{Error, Result};

/// Per-row latitude weights L(i) = cos(lat_i) / mean_j cos(lat_j); unit mean
/// by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    weights: Vec<f64>,
}

impl LatWeights {
    pub fn from_degrees(lats: &[f64]) -> Result<Self> {
        if lats.is_empty() {
            return Err(Error::Config("empty latitude vector".into()));
        }
        let cosines: Vec<f64> = lats.iter().map(|l| l.to_radians().cos()).collect();
        if cosines.iter().any(|c| *c <= 0.0) {
            return Err(Error::Config(
                "latitude weights need |lat| < 90 degrees".into(),
            ));
        }
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        Ok(LatWeights {
            weights: cosines.into_iter().map(|c| c / mean).collect(),
        })
    }

    pub fn uniform(h: usize) -> Self {
        LatWeights { weights: vec![1.0; h] }
    }

    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Scaling of the kinetic and thermodynamic penalties in the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.3, beta: 0.8 }
    }
}

impl LossWeights {
    pub fn mse_only() -> Self {
        LossWeights { alpha: 0.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Locations of the wind and temperature variables plus the tendency
/// denominator (lead time in model-time units, hours).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsVarMap {
    pub t_idx: usize,
    pub u_idx: usize,
    pub v_idx: usize,
    pub dt: f64,
}

impl PhysicsVarMap {
    pub fn new(t_idx: usize, u_idx: usize, v_idx: usize, dt: f64) -> Result<Self> {
        if t_idx == u_idx || t_idx == v_idx || u_idx == v_idx {
            return Err(Error::Config("physics variable indices must be distinct".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("tendency denominator must be positive, got {dt}")));
        }
        Ok(PhysicsVarMap { t_idx, u_idx, v_idx, dt })
    }

    /// Looks up the surface-variable names in a field's variable list.
    pub fn from_names(names: &[String], dt: f64) -> Result<Self> {
        let find = |name: &str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("variable {name:?} missing from {names:?}")))
        };
        PhysicsVarMap::new(find(VAR_T2M)?, find(VAR_U10)?, find(VAR_V10)?, dt)
    }
}

fn check_field_shape(op: &'static str, tape: &Tape, a: Vid, b: Vid) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    if tape.shape(a).len() != 4 {
        return Err(Error::shape(op, format!("want (B, V, H, W), got {:?}", tape.shape(a))));
    }
    Ok(())
}

/// Latitude-weighted mean squared error over batch, variables, and grid.
pub fn lat_weighted_mse_t(tape: &mut Tape, pred: Vid, truth: Vid, w: &LatWeights) -> Result<Vid> {
    check_field_shape("lat_weighted_mse", tape, pred, truth)?;
    let shape = tape.shape(pred).to_vec();
    let (h, wd) = (shape[2], shape[3]);
    if w.len() != h {
        return Err(Error::shape(
            "lat_weighted_mse",
            format!("{} weights vs {h} rows", w.len()),
        ));
    }
    let mut weight_rows = Vec::with_capacity(h * wd);
    for i in 0..h {
        weight_rows.extend(std::iter::repeat_n(w.values()[i], wd));
    }
    let weights = tape.constant(weight_rows, &[h, wd])?;
    let err = tape.sub(pred, truth)?;
    let sq = tape.square(err);
    let weighted = mul_rows(tape, sq, weights)?;
    Ok(tape.mean(weighted))
}

/// Multiplies x of shape (..., H, W) by a constant (H, W) plane.
fn mul_rows(tape: &mut Tape, x: Vid, plane: Vid) -> Result<Vid> {
    let shape = tape.shape(x).to_vec();
    let plane_len = tape.data(plane).len();
    let reps = tape.data(x).len() / plane_len;
    let mut tiled = Vec::with_capacity(reps * plane_len);
    for _ in 0..reps {
        tiled.extend_from_slice(tape.data(plane));
    }
    let tiled = tape.constant(tiled, &shape)?;
    tape.mul(x, tiled)
}

/// Kinetic-energy penalty: mean |0.5 (u_p^2 + v_p^2) - 0.5 (u_t^2 + v_t^2)|.
pub fn kinetic_loss_t(tape: &mut Tape, pred: Vid, truth: Vid, map: &PhysicsVarMap) -> Result<Vid> {
    check_field_shape("kinetic_loss", tape, pred, truth)?;
    let nv = tape.shape(pred)[1];
    if map.u_idx >= nv || map.v_idx >= nv {
        return Err(Error::Config(format!(
            "wind variables ({}, {}) out of range for {nv} variables",
            map.u_idx, map.v_idx
        )));
    }
    let ke = |tape: &mut Tape, field: Vid| -> Result<Vid> {
        let u = tape.slice(field, 1, map.u_idx, 1)?;
        let v = tape.slice(field, 1, map.v_idx, 1)?;
        let u2 = tape.square(u);
        let v2 = tape.square(v);
        let sum = tape.add(u2, v2)?;
        Ok(tape.scale(sum, 0.5))
    };
    let ke_p = ke(tape, pred)?;
    let ke_t = ke(tape, truth)?;
    let diff = tape.sub(ke_p, ke_t)?;
    let mag = tape.abs(diff);
    Ok(tape.mean(mag))
}

/// Forward difference along `axis` with a backward difference at the
/// trailing edge, preserving shape. No wraparound.
fn finite_diff(tape: &mut Tape, x: Vid, axis: usize) -> Result<Vid> {
    let d = tape.shape(x)[axis];
    if d < 2 {
        return Err(Error::shape(
            "finite_diff",
            format!("axis {axis} of {:?} too short", tape.shape(x)),
        ));
    }
    let upper = tape.slice(x, axis, 1, d - 1)?;
    let lower = tape.slice(x, axis, 0, d - 1)?;
    let fwd = tape.sub(upper, lower)?;
    let last = tape.slice(fwd, axis, d - 2, 1)?;
    tape.concat(fwd, last, axis)
}

/// Advection-balance residual penalty: mean over batch and grid of
/// ((T_pred - T_input) / dt + u_pred dT/dx + v_pred dT/dy)^2, with
/// first-order differences of T_pred on the native grid (dx = dy = 1 grid
/// index; no metric scaling).
pub fn thermo_loss_t(tape: &mut Tape, pred: Vid, input: Vid, map: &PhysicsVarMap) -> Result<Vid> {
    check_field_shape("thermo_loss", tape, pred, input)?;
    let shape = tape.shape(pred).to_vec();
    let (b, nv, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if map.t_idx >= nv || map.u_idx >= nv || map.v_idx >= nv {
        return Err(Error::Config(format!(
            "physics variables {map:?} out of range for {nv} variables"
        )));
    }
    let grab = |tape: &mut Tape, field: Vid, idx: usize| -> Result<Vid> {
        let s = tape.slice(field, 1, idx, 1)?;
        tape.reshape(s, &[b, h, w])
    };
    let t_pred = grab(tape, pred, map.t_idx)?;
    let t_input = grab(tape, input, map.t_idx)?;
    let u_pred = grab(tape, pred, map.u_idx)?;
    let v_pred = grab(tape, pred, map.v_idx)?;

    let diff = tape.sub(t_pred, t_input)?;
    let tendency = tape.scale(diff, 1.0 / map.dt);
    let dt_dx = finite_diff(tape, t_pred, 2)?;
    let dt_dy = finite_diff(tape, t_pred, 1)?;
    let adv_x = tape.mul(u_pred, dt_dx)?;
    let adv_y = tape.mul(v_pred, dt_dy)?;
    let sum = tape.add(tendency, adv_x)?;
    let residual = tape.add(sum, adv_y)?;
    let sq = tape.square(residual);
    Ok(tape.mean(sq))
}

/// All four loss values on the tape: (total, lat, kinetic, thermo).
///
/// The physics terms see `pred_phys`/`truth_phys`/`input_phys` (physical
/// units), while the data term sees `pred`/`truth` (whatever space training
/// runs in); pass the same handles for both when no normalization is used.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_t(
    tape: &mut Tape,
    pred: Vid,
    truth: Vid,
    pred_phys: Vid,
    truth_phys: Vid,
    input_phys: Vid,
    w: &LatWeights,
    lw: &LossWeights,
    map: &PhysicsVarMap,
) -> Result<(Vid, Vid, Vid, Vid)> {
    lw.validate()?;
    let lat = lat_weighted_mse_t(tape, pred, truth, w)?;
    let kinetic = kinetic_loss_t(tape, pred_phys, truth_phys, map)?;
    let thermo = thermo_loss_t(tape, pred_phys, input_phys, map)?;
    let a = tape.scale(kinetic, lw.alpha);
    let partial = tape.add(lat, a)?;
    let b = tape.scale(thermo, lw.beta);
    let total = tape.add(partial, b)?;
    Ok((total, lat, kinetic, thermo))
}

fn scratch(field: &GridField, tape: &mut Tape) -> Vid {
    let t = field.to_tensor();
    tape.leaf(&t)
}

/// Value-level latitude-weighted MSE over GridFields.
pub fn lat_weighted_mse(pred: &GridField, truth: &GridField, w: &LatWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let p = scratch(pred, &mut tape);
    let t = scratch(truth, &mut tape);
    let l = lat_weighted_mse_t(&mut tape, p, t, w)?;
    Ok(tape.scalar_value(l))
}

pub fn kinetic_loss(pred: &GridField, truth: &GridField, map: &PhysicsVarMap) -> Result<f64> {
    let mut tape = Tape::new();
    let p = scratch(pred, &mut tape);
    let t = scratch(truth, &mut tape);
    let l = kinetic_loss_t(&mut tape, p, t, map)?;
    Ok(tape.scalar_value(l))
}

pub fn thermo_loss(pred: &GridField, input: &GridField, map: &PhysicsVarMap) -> Result<f64> {
    let mut tape = Tape::new();
    let p = scratch(pred, &mut tape);
    let i = scratch(input, &mut tape);
    let l = thermo_loss_t(&mut tape, p, i, map)?;
    Ok(tape.scalar_value(l))
}

/// Combined loss components in value form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub lat: f64,
    pub kinetic: f64,
    pub thermo: f64,
}

pub fn combined_loss(
    pred: &GridField,
    truth: &GridField,
    input: &GridField,
    w: &LatWeights,
    lw: &LossWeights,
    map: &PhysicsVarMap,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let p = scratch(pred, &mut tape);
    let t = scratch(truth, &mut tape);
    let i = scratch(input, &mut tape);
    let (total, lat, kin, thermo) = combined_loss_t(&mut tape, p, t, p, t, i, w, lw, map)?;
    Ok(LossParts {
        total: tape.scalar_value(total),
        lat: tape.scalar_value(lat),
        kinetic: tape.scalar_value(kin),
        thermo: tape.scalar_value(thermo),
    })
}

/// Per-variable latitude-weighted RMSE: per-sample spatially weighted root
/// mean square error, averaged over samples.
pub fn rmse(pred: &GridField, truth: &GridField, w: &LatWeights) -> Result<Vec<f64>> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "rmse",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    let (b, nv, h, wd) = pred.dims();
    if w.len() != h {
        return Err(Error::shape("rmse", format!("{} weights vs {h} rows", w.len())));
    }
    let mut out = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut acc = 0.0;
        for s in 0..b {
            let mut sq = 0.0;
            for i in 0..h {
                let li = w.values()[i];
                for j in 0..wd {
                    let e = pred.get(s, v, i, j) - truth.get(s, v, i, j);
                    sq += li * e * e;
                }
            }
            acc += (sq / (h * wd) as f64).sqrt();
        }
        out.push(acc / b as f64);
    }
    Ok(out)
}

/// Weight placement in the anomaly correlation numerator.
///
/// `Weighted` carries L(i) through numerator and denominator, so identical
/// anomalies score exactly 1 on any grid. `DenominatorOnly` leaves the
/// numerator unweighted; on a non-uniform grid it is not bounded by 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccWeighting {
    Weighted,
    DenominatorOnly,
}

/// Per-variable anomaly correlation against a per-gridpoint climatology
/// (shape (1, V, H, W)). Returns NaN for a variable whose anomaly variance
/// vanishes.
pub fn acc(
    pred: &GridField,
    truth: &GridField,
    climatology: &GridField,
    w: &LatWeights,
    weighting: AccWeighting,
) -> Result<Vec<f64>> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "acc",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    let (b, nv, h, wd) = pred.dims();
    let cd = climatology.dims();
    if cd != (1, nv, h, wd) {
        return Err(Error::shape(
            "acc",
            format!("climatology {cd:?} vs (1, {nv}, {h}, {wd})"),
        ));
    }
    let mut out = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut num = 0.0;
        let mut den_p = 0.0;
        let mut den_t = 0.0;
        for s in 0..b {
            for i in 0..h {
                let li = w.values()[i];
                for j in 0..wd {
                    let c = climatology.get(0, v, i, j);
                    let pa = pred.get(s, v, i, j) - c;
                    let ta = truth.get(s, v, i, j) - c;
                    let num_w = match weighting {
                        AccWeighting::Weighted => li,
                        AccWeighting::DenominatorOnly => 1.0,
                    };
                    num += num_w * pa * ta;
                    den_p += li * pa * pa;
                    den_t += li * ta * ta;
                }
            }
        }
        let den = (den_p * den_t).sqrt();
        out.push(if den > 0.0 { num / den } else { f64::NAN });
    }
    Ok(out)
}
