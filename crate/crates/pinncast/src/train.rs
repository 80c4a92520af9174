//! Training loop: decoupled-weight-decay Adam on the combined loss, seeded
//! batch order and dropout, early stopping on validation loss, per-epoch
//! CSV logging, and post-hoc evaluation.
//!
//! Everything is a pure function of (config, dataset, seed): rerunning a
//! command with the same inputs produces byte-identical logs, checkpoints,
//! and metrics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::checkpoint;
use crate::data::{denormalize, normalize, Dataset, GridField, Split, VarStats};
use crate::diffcore::{Tape, Vid};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::physics::{
    acc, combined_loss_t, kinetic_loss, lat_weighted_mse, rmse, AccWeighting, LatWeights,
    LossWeights, PhysicsVarMap,
};
use crate::{Error, Result};

/// How the training loop chooses a lead time per step when the dataset
/// carries several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadSampling {
    /// Always the first lead in the dataset.
    Fixed,
    /// Uniform over the dataset's leads, one draw per step.
    Uniform,
}

/// Full training configuration; defaults follow the reference setup
/// (AdamW lr 5e-5, betas 0.9/0.999, batch 12, 50 epochs, early stopping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lead_sampling: LeadSampling,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            loss: LossWeights::default(),
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            batch_size: 12,
            epochs: 50,
            patience: 5,
            seed: 0,
            lead_sampling: LeadSampling::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(run: &RunConfig, store: &ParamStore) -> Self {
        AdamW {
            lr: run.lr,
            beta1: run.beta1,
            beta2: run.beta2,
            eps: 1e-8,
            weight_decay: run.weight_decay,
            t: 0,
            m: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let id = crate::params::ParamId::from_index(idx);
            let tensor = store.tensor_mut(id);
            let data = tensor.data_mut();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                data[i] -= self.lr * self.weight_decay * data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-variable affine map from normalized model space back to physical
/// units, as tape ops.
fn denormalize_t(tape: &mut Tape, x: Vid, stats: &[VarStats], var_names: &[String]) -> Result<Vid> {
    let shape = tape.shape(x).to_vec();
    let (b, v, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut sigma = Vec::with_capacity(b * v * hw);
    let mut mu = Vec::with_capacity(b * v * hw);
    for _ in 0..b {
        for name in var_names {
            let s = stats
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::Config(format!("no stats for {name:?}")))?;
            sigma.extend(std::iter::repeat_n(s.std, hw));
            mu.extend(std::iter::repeat_n(s.mean, hw));
        }
    }
    let sigma = tape.constant(sigma, &shape)?;
    let mu = tape.constant(mu, &shape)?;
    let scaled = tape.mul(x, sigma)?;
    tape.add(scaled, mu)
}

/// Loss components from one forward pass, as tape values.
pub(crate) struct StepLoss {
    pub(crate) total: Vid,
    pub(crate) lat: f64,
    pub(crate) kinetic: f64,
    pub(crate) thermo: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_loss(
    model: &Model,
    tape: &mut Tape,
    stats: &[VarStats],
    input_phys: &GridField,
    truth_phys: &GridField,
    lead_hours: f64,
    latw: &LatWeights,
    lw: &LossWeights,
    dropout: Option<&mut Dropout>,
) -> Result<StepLoss> {
    let x_norm = normalize(input_phys, stats)?;
    let y_norm = normalize(truth_phys, stats)?;
    let x = tape.leaf(&x_norm.to_tensor());
    let y = tape.leaf(&y_norm.to_tensor());
    let pred_norm = model.forward(tape, x, lead_hours, dropout)?;
    let pred_phys = denormalize_t(tape, pred_norm, stats, &input_phys.var_names)?;
    let truth_c = tape.leaf(&truth_phys.to_tensor());
    let input_c = tape.leaf(&input_phys.to_tensor());
    let map = PhysicsVarMap::from_names(&input_phys.var_names, lead_hours)?;
    let (total, lat, kin, thermo) =
        combined_loss_t(tape, pred_norm, y, pred_phys, truth_c, input_c, latw, lw, &map)?;
    Ok(StepLoss {
        total,
        lat: tape.scalar_value(lat),
        kinetic: tape.scalar_value(kin),
        thermo: tape.scalar_value(thermo),
    })
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub final_train: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains a fresh model on the dataset's train split, writing
/// `config.json`, `train_log.csv`, and `checkpoint.ckpt` (best validation
/// loss) into `out_dir`.
pub fn train(run: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    run.validate()?;
    if run.model.grid_h != ds.manifest.grid_h
        || run.model.grid_w != ds.manifest.grid_w
        || run.model.var_names != ds.manifest.variables
    {
        return Err(Error::Config(format!(
            "model grid/variables {:?} {}x{} do not match the dataset",
            run.model.var_names, run.model.grid_h, run.model.grid_w
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let config_json = serde_json::to_string_pretty(run)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    crate::write_file(&out_dir.join("config.json"), config_json)?;

    let mut model = Model::new(run.model.clone(), run.seed)?;
    let latw = LatWeights::from_degrees(&ds.manifest.lats)?;
    let mut adam = AdamW::new(run, &model.store);
    let mut dropout = Dropout::new(run.model.dropout, run.seed.wrapping_add(0x517c_c1b7));
    let mut lead_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x2545_f491));
    let n_leads = ds.manifest.lead_hours.len();

    let mut log = String::from("epoch,L_total,L_lat,L_kinetic,L_thermo,val_L_total\n");
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut final_train = f64::NAN;

    for epoch in 0..run.epochs {
        let batches = ds.iterate_batches(Split::Train, run.batch_size, run.seed.wrapping_add(epoch as u64 * 7919 + 1));
        let mut sums = [0.0f64; 4];
        for (step, batch) in batches.iter().enumerate() {
            let lead_idx = match run.lead_sampling {
                LeadSampling::Fixed => 0,
                LeadSampling::Uniform => lead_rng.gen_range(0..n_leads),
            };
            let lead_hours = ds.manifest.lead_hours[lead_idx];
            let input = ds.input_batch(batch)?;
            let truth = ds.target_batch(batch, lead_idx)?;
            let mut tape = Tape::new();
            let loss = forward_loss(
                &model,
                &mut tape,
                &ds.manifest.stats,
                &input,
                &truth,
                lead_hours,
                &latw,
                &run.loss,
                Some(&mut dropout),
            )?;
            let total = tape.scalar_value(loss.total);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            tape.backward(loss.total)?;
            let grads = tape.param_grads(&model.store);
            adam.step(&mut model.store, &grads);
            sums[0] += total;
            sums[1] += loss.lat;
            sums[2] += loss.kinetic;
            sums[3] += loss.thermo;
        }
        let n = batches.len().max(1) as f64;
        let train_total = sums[0] / n;
        final_train = train_total;

        let val_total = if ds.split(Split::Val).count > 0 {
            validation_loss(&model, ds, run, &latw)?
        } else {
            train_total
        };

        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            epoch,
            train_total,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            val_total
        ));
        log::info!(
            "epoch {epoch}: train {train_total:.6e}, val {val_total:.6e}"
        );
        epochs_run = epoch + 1;

        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            since_best = 0;
            best_params = Some(model.store.iter().map(|(_, _, t)| t.data().to_vec()).collect());
        } else {
            since_best += 1;
            if since_best > run.patience {
                log::info!("early stop at epoch {epoch} (best {best_epoch})");
                break;
            }
        }
    }

    if let Some(best) = best_params {
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (name, values) in names.iter().zip(best) {
            model.store.set_by_name(name, &values)?;
        }
    }

    let ckpt = out_dir.join("checkpoint.ckpt");
    checkpoint::save(&ckpt, &model)?;
    let log_path = out_dir.join("train_log.csv");
    crate::write_file(&log_path, log)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch,
        best_val,
        final_train,
        checkpoint: ckpt,
        log: log_path,
    })
}

/// Combined loss over the validation split, eval mode, first lead, fixed
/// batch order.
fn validation_loss(model: &Model, ds: &Dataset, run: &RunConfig, latw: &LatWeights) -> Result<f64> {
    let indices = ds.split_indices(Split::Val);
    let lead_hours = ds.manifest.lead_hours[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in indices.chunks(run.batch_size) {
        let input = ds.input_batch(batch)?;
        let truth = ds.target_batch(batch, 0)?;
        let mut tape = Tape::new();
        let loss = forward_loss(
            model,
            &mut tape,
            &ds.manifest.stats,
            &input,
            &truth,
            lead_hours,
            latw,
            &run.loss,
            None,
        )?;
        total += tape.scalar_value(loss.total) * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Forecast quality of a model over one split at one lead time, in
/// physical units.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub variables: Vec<String>,
    pub rmse: Vec<f64>,
    pub acc: Vec<f64>,
    pub lat_mse: f64,
    pub kinetic: f64,
}

/// Runs the model over a split in fixed batch order and scores the
/// denormalized forecasts against truth: per-variable latitude-weighted
/// RMSE and anomaly correlation (climatology = per-gridpoint split mean of
/// truth), plus aggregate lat-weighted MSE and kinetic-energy error.
/// Normalization uses the dataset's train-split statistics.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: Split,
    lead_idx: usize,
    batch_size: usize,
    weighting: AccWeighting,
    truth_as_prediction: bool,
) -> Result<EvalMetrics> {
    let stats = &ds.manifest.stats;
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let lead_hours = *ds
        .manifest
        .lead_hours
        .get(lead_idx)
        .ok_or_else(|| Error::Config(format!("lead index {lead_idx} out of range")))?;

    let mut pred_data = Vec::new();
    let mut truth_data = Vec::new();
    for batch in indices.chunks(batch_size.max(1)) {
        let input = ds.input_batch(batch)?;
        let truth = ds.target_batch(batch, lead_idx)?;
        if truth_as_prediction {
            pred_data.extend_from_slice(truth.data());
        } else {
            let x_norm = normalize(&input, stats)?;
            let pred_norm = model.forecast(&x_norm, lead_hours)?;
            let pred = denormalize(&pred_norm, stats)?;
            pred_data.extend_from_slice(pred.data());
        }
        truth_data.extend_from_slice(truth.data());
    }
    let template = ds.input_batch(&indices[..1])?;
    let pred = template.with_data(pred_data, indices.len())?;
    let truth = template.with_data(truth_data, indices.len())?;

    let latw = LatWeights::from_degrees(&ds.manifest.lats)?;
    let clim = ds.climatology(split, 1 + lead_idx)?;
    let map = PhysicsVarMap::from_names(&ds.manifest.variables, lead_hours)?;
    Ok(EvalMetrics {
        variables: ds.manifest.variables.clone(),
        rmse: rmse(&pred, &truth, &latw)?,
        acc: acc(&pred, &truth, &clim, &latw, weighting)?,
        lat_mse: lat_weighted_mse(&pred, &truth, &latw)?,
        kinetic: kinetic_loss(&pred, &truth, &map)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;
    use crate::diffcore::Tensor;
    use crate::odesolve::OdeMethod;
    use crate::physics::lat_weighted_mse_t;

    fn tiny_run(ds: &Dataset, seed: u64) -> RunConfig {
        let mut cfg = ModelConfig::new(ds.manifest.variables.clone(), 8, 16);
        cfg.embed_dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.patch_size = 4;
        cfg.ode.method = OdeMethod::Rk4Fixed;
        cfg.ode.rk4_steps = 2;
        let mut run = RunConfig::new(cfg);
        run.lr = 1e-3;
        run.batch_size = 4;
        run.epochs = 3;
        run.seed = seed;
        run
    }

    fn tiny_dataset() -> Dataset {
        Dataset::generate(&GeneratorConfig {
            seed: 40,
            h: 8,
            w: 16,
            n_samples: 12,
            n_blobs: 2,
            wind_scale: 0.04,
            lead_hours: vec![6.0],
            split_counts: (8, 2, 2),
        })
        .unwrap()
    }

    #[test]
    fn adamw_first_step_magnitude() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut cfg = ModelConfig::new(vec!["t2m".into()], 8, 8);
        cfg.embed_dim = 8;
        cfg.heads = 2;
        let mut run = RunConfig::new(cfg);
        run.lr = 0.1;
        run.weight_decay = 0.0;
        let mut adam = AdamW::new(&run, &store);
        adam.step(&mut store, &[vec![1.0, -1.0]]);
        let w = store.tensor(crate::params::ParamId::from_index(0)).data();
        assert!((w[0] + 0.1).abs() < 1e-6, "w {w:?}");
        assert!((w[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_loss_weights_leave_gradients_untouched() {
        let ds = tiny_dataset();
        let run = tiny_run(&ds, 1);
        let model = Model::new(run.model.clone(), 1).unwrap();
        let latw = LatWeights::from_degrees(&ds.manifest.lats).unwrap();
        let batch = ds.split_indices(Split::Train)[..4].to_vec();
        let input = ds.input_batch(&batch).unwrap();
        let truth = ds.target_batch(&batch, 0).unwrap();

        // Combined loss with alpha = beta = 0.
        let mut tape = Tape::new();
        let loss = forward_loss(
            &model,
            &mut tape,
            &ds.manifest.stats,
            &input,
            &truth,
            6.0,
            &latw,
            &LossWeights::mse_only(),
            None,
        )
        .unwrap();
        assert!(loss.kinetic > 0.0 && loss.thermo > 0.0, "components still reported");
        tape.backward(loss.total).unwrap();
        let with_physics_path = tape.param_grads(&model.store);

        // Pure data term.
        let mut tape = Tape::new();
        let stats = &ds.manifest.stats;
        let x = tape.leaf(&normalize(&input, stats).unwrap().to_tensor());
        let y = tape.leaf(&normalize(&truth, stats).unwrap().to_tensor());
        let pred = model.forward(&mut tape, x, 6.0, None).unwrap();
        let lat = lat_weighted_mse_t(&mut tape, pred, y, &latw).unwrap();
        tape.backward(lat).unwrap();
        let data_only = tape.param_grads(&model.store);

        for (a, b) in with_physics_path.iter().zip(&data_only) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_runs_and_is_reproducible() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let summary_a = train(&tiny_run(&ds, 3), &ds, &out_a).unwrap();
        let summary_b = train(&tiny_run(&ds, 3), &ds, &out_b).unwrap();
        assert_eq!(summary_a.epochs_run, summary_b.epochs_run);
        assert_eq!(
            std::fs::read(&summary_a.log).unwrap(),
            std::fs::read(&summary_b.log).unwrap()
        );
        assert_eq!(
            std::fs::read(&summary_a.checkpoint).unwrap(),
            std::fs::read(&summary_b.checkpoint).unwrap()
        );

        // The persisted config reloads into an equal RunConfig.
        let raw = std::fs::read(out_a.join("config.json")).unwrap();
        let back: RunConfig = serde_json::from_slice(&raw).unwrap();
        assert_eq!(back, tiny_run(&ds, 3));

        // A different seed diverges.
        let out_c = dir.path().join("c");
        let _ = train(&tiny_run(&ds, 4), &ds, &out_c).unwrap();
        assert_ne!(
            std::fs::read(&summary_a.log).unwrap(),
            std::fs::read(out_c.join("train_log.csv")).unwrap()
        );
    }

    #[test]
    fn truth_as_prediction_scores_perfectly() {
        let ds = tiny_dataset();
        let run = tiny_run(&ds, 5);
        let model = Model::new(run.model, 5).unwrap();
        let m = evaluate(&model, &ds, Split::Test, 0, 4, AccWeighting::Weighted, true).unwrap();
        assert!(m.rmse.iter().all(|&r| r == 0.0), "rmse {:?}", m.rmse);
        assert!(m.acc.iter().all(|&a| (a - 1.0).abs() < 1e-12), "acc {:?}", m.acc);
        assert_eq!(m.kinetic, 0.0);
    }
}
