//! Gridded-field container, synthetic advection dataset, normalization, and
//! a bit-exact on-disk format.
//!
//! A dataset is a pair of files: `<name>.manifest` (JSON: shapes, variables,
//! splits, normalization stats, generator parameters, checksum) and
//! `<name>.bin` (raw little-endian f32, C-order over (sample, time-slot,
//! variable, lat, lon)). Slot 0 is the input time; slot 1 + k is the target
//! at `lead_hours[k]`.
//!
//! The generator produces physically consistent (T, u, v) triples: per
//! sample, a constant wind (u, v) advects a sum of Gaussian blobs, and every
//! target slot samples the closed-form advected field on the grid. The
//! advection residual of a truth pair is therefore pure discretization
//! error, which is what makes the thermodynamic-loss oracle sharp.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// A batch of physical fields shaped (batch, variables, lat, lon) with named
/// variables and latitude/longitude vectors in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    data: Vec<f64>,
    batch: usize,
    pub var_names: Vec<String>,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
}

impl GridField {
    pub fn new(
        data: Vec<f64>,
        batch: usize,
        var_names: Vec<String>,
        lats: Vec<f64>,
        lons: Vec<f64>,
    ) -> Result<Self> {
        let (v, h, w) = (var_names.len(), lats.len(), lons.len());
        if batch * v * h * w != data.len() || batch == 0 || v == 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "grid_field",
                format!(
                    "({batch}, {v}, {h}, {w}) wants {} values, got {}",
                    batch * v * h * w,
                    data.len()
                ),
            ));
        }
        if lats.iter().any(|l| l.abs() > 90.0) {
            return Err(Error::Config("latitudes must lie in [-90, 90]".into()));
        }
        let ascending = lats.windows(2).all(|p| p[0] < p[1]);
        let descending = lats.windows(2).all(|p| p[0] > p[1]);
        if !(ascending || descending) {
            return Err(Error::Config("latitude vector must be monotone".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("grid field contains non-finite values".into()));
        }
        Ok(GridField { data, batch, var_names, lats, lons })
    }

    /// (batch, variables, lat rows, lon columns).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.var_names.len(), self.lats.len(), self.lons.len())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, v: usize, i: usize, j: usize) -> f64 {
        let (_, nv, h, w) = self.dims();
        self.data[((b * nv + v) * h + i) * w + j]
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.var_names.iter().position(|n| n == name)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (b, v, h, w) = self.dims();
        Tensor::new(self.data.clone(), &[b, v, h, w]).expect("consistent dims")
    }

    /// Rewraps raw values with this field's variable names and coordinates.
    pub fn with_data(&self, data: Vec<f64>, batch: usize) -> Result<GridField> {
        GridField::new(data, batch, self.var_names.clone(), self.lats.clone(), self.lons.clone())
    }
}

/// Per-variable z-score statistics, computed on the train split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub start: usize,
    pub count: usize,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitInfo,
    pub val: SplitInfo,
    pub test: SplitInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Parameters of the synthetic advection generator, kept in the manifest so
/// a dataset can be regenerated bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub n_blobs: usize,
    /// Bound on |u|, |v| in grid cells per hour.
    pub wind_scale: f64,
    /// Blob width range as a fraction of min(H, W).
    pub sigma_frac: (f64, f64),
    pub amp_range: (f64, f64),
    pub base_temp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub variables: Vec<String>,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub n_samples: usize,
    pub lead_hours: Vec<f64>,
    pub splits: Splits,
    pub stats: Vec<VarStats>,
    pub generator: Option<GeneratorParams>,
    pub bin_len: u64,
    pub sha256: String,
}

impl DatasetManifest {
    pub fn n_slots(&self) -> usize {
        1 + self.lead_hours.len()
    }

    fn slot_values(&self) -> usize {
        self.variables.len() * self.grid_h * self.grid_w
    }

    fn sample_values(&self) -> usize {
        self.n_slots() * self.slot_values()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Format(format!("unsupported manifest version {}", self.version)));
        }
        if self.variables.is_empty() || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Format("empty grid or variable list".into()));
        }
        if self.lats.len() != self.grid_h || self.lons.len() != self.grid_w {
            return Err(Error::Format(format!(
                "coordinate lengths ({}, {}) vs grid ({}, {})",
                self.lats.len(),
                self.lons.len(),
                self.grid_h,
                self.grid_w
            )));
        }
        if self.lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::Format("latitudes must lie in [-90, 90]".into()));
        }
        if self.lead_hours.is_empty() || self.lead_hours.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Format("lead_hours must be positive".into()));
        }
        if self.stats.len() != self.variables.len() {
            return Err(Error::Format("stats must cover every variable".into()));
        }
        for s in &self.stats {
            if !(s.std > 0.0) || !s.mean.is_finite() {
                return Err(Error::Config(format!(
                    "variable {} has invalid stats (mean {}, std {})",
                    s.name, s.mean, s.std
                )));
            }
        }
        let sample_bytes = self.sample_values() as u64 * 4;
        let mut expected_start = 0usize;
        for (name, info) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            if info.start != expected_start {
                return Err(Error::Format(format!("{name} split must start at {expected_start}")));
            }
            if info.byte_offset != info.start as u64 * sample_bytes {
                return Err(Error::Format(format!("{name} split byte offset mismatch")));
            }
            expected_start = expected_start
                .checked_add(info.count)
                .ok_or_else(|| Error::Format("split counts overflow".into()))?;
        }
        if expected_start != self.n_samples {
            return Err(Error::Format(format!(
                "splits cover {expected_start} samples, dataset has {}",
                self.n_samples
            )));
        }
        let expected_len = (self.n_samples as u64)
            .checked_mul(sample_bytes)
            .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        if self.bin_len != expected_len {
            return Err(Error::Length(format!(
                "manifest declares {} bytes, layout wants {expected_len}",
                self.bin_len
            )));
        }
        Ok(())
    }
}

/// Parses and validates a manifest from raw bytes.
pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Decodes the binary blob against a validated manifest: length, checksum,
/// and finiteness checks.
pub fn decode_values(manifest: &DatasetManifest, bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() as u64 != manifest.bin_len {
        return Err(Error::Length(format!(
            "blob has {} bytes, manifest declares {}",
            bytes.len(),
            manifest.bin_len
        )));
    }
    let digest = hex::encode(Sha256::digest(bytes));
    if digest != manifest.sha256 {
        return Err(Error::Format(format!(
            "checksum mismatch: blob {digest}, manifest {}",
            manifest.sha256
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("blob contains non-finite values".into()));
    }
    Ok(values)
}

fn encode_values(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// One Gaussian blob of the synthetic temperature field.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub amp: f64,
    pub sigma: f64,
}

/// Closed-form description of one synthetic sample: blobs advected by a
/// constant wind. Used both to build the dataset and, in oracle code, to
/// evaluate the analytic field at full f64 precision.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub u: f64,
    pub v: f64,
    pub blobs: Vec<Blob>,
    pub base_temp: f64,
}

impl SampleSpec {
    /// Temperature at grid position (x = lon index, y = lat index) after
    /// `t_hours` of advection: blobs drift with the wind.
    pub fn temperature(&self, x: f64, y: f64, t_hours: f64) -> f64 {
        let mut t = self.base_temp;
        for b in &self.blobs {
            let dx = x - (b.cx + self.u * t_hours);
            let dy = y - (b.cy + self.v * t_hours);
            t += b.amp * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
        }
        t
    }
}

/// Generation request for [`Dataset::generate`].
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub n_samples: usize,
    pub n_blobs: usize,
    pub wind_scale: f64,
    pub lead_hours: Vec<f64>,
    /// (train, val, test) sample counts; must sum to `n_samples`.
    pub split_counts: (usize, usize, usize),
}

impl GeneratorConfig {
    pub fn new(seed: u64, h: usize, w: usize, n_samples: usize) -> Self {
        let train = n_samples * 8 / 10;
        let val = (n_samples - train) / 2;
        let test = n_samples - train - val;
        GeneratorConfig {
            seed,
            h,
            w,
            n_samples,
            n_blobs: 3,
            wind_scale: 0.04,
            lead_hours: vec![6.0],
            split_counts: (train, val, test),
        }
    }
}

const SIGMA_FRAC: (f64, f64) = (0.28, 0.40);
const AMP_RANGE: (f64, f64) = (0.8, 1.2);
const BASE_TEMP: f64 = 280.0;

/// Latitude cell centers spanning the globe for `h` rows: -90 + (i + 0.5)
/// * 180 / h degrees.
pub fn default_lats(h: usize) -> Vec<f64> {
    (0..h).map(|i| -90.0 + (i as f64 + 0.5) * 180.0 / h as f64).collect()
}

pub fn default_lons(w: usize) -> Vec<f64> {
    (0..w).map(|j| j as f64 * 360.0 / w as f64).collect()
}

/// Deterministic per-sample closed-form specs for a generator config.
pub fn sample_specs(cfg: &GeneratorConfig) -> Vec<SampleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.h.min(cfg.w) as f64;
    (0..cfg.n_samples)
        .map(|_| {
            let u = rng.gen_range(-1.0..=1.0) * cfg.wind_scale;
            let v = rng.gen_range(-1.0..=1.0) * cfg.wind_scale;
            let blobs = (0..cfg.n_blobs)
                .map(|_| Blob {
                    cx: rng.gen_range(0.0..cfg.w as f64),
                    cy: rng.gen_range(0.0..cfg.h as f64),
                    amp: rng.gen_range(AMP_RANGE.0..AMP_RANGE.1),
                    sigma: rng.gen_range(SIGMA_FRAC.0 * m..SIGMA_FRAC.1 * m),
                })
                .collect();
            SampleSpec { u, v, blobs, base_temp: BASE_TEMP }
        })
        .collect()
}

pub const VAR_T2M: &str = "t2m";
pub const VAR_U10: &str = "u10";
pub const VAR_V10: &str = "v10";

/// In-memory dataset: validated manifest plus the raw 32-bit values.
pub struct Dataset {
    pub manifest: DatasetManifest,
    values: Vec<f32>,
}

impl Dataset {
    /// Builds the synthetic advection dataset. Each sample holds slot 0 at
    /// time t and one slot per lead hour with the analytically advected
    /// temperature; wind fields are constant in time.
    pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
        if cfg.h < 8 || cfg.w < 8 {
            return Err(Error::Config("grid must be at least 8 x 8".into()));
        }
        let (tr, va, te) = cfg.split_counts;
        if tr + va + te != cfg.n_samples || tr == 0 {
            return Err(Error::Config(format!(
                "split counts {:?} must sum to {} with a nonempty train split",
                cfg.split_counts, cfg.n_samples
            )));
        }
        if cfg.lead_hours.is_empty() || cfg.lead_hours.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("lead hours must be positive".into()));
        }
        let specs = sample_specs(cfg);
        let variables = vec![VAR_T2M.to_string(), VAR_U10.to_string(), VAR_V10.to_string()];
        let n_slots = 1 + cfg.lead_hours.len();
        let slot_values = variables.len() * cfg.h * cfg.w;
        let mut values = Vec::with_capacity(cfg.n_samples * n_slots * slot_values);
        for spec in &specs {
            for slot in 0..n_slots {
                let t_hours = if slot == 0 { 0.0 } else { cfg.lead_hours[slot - 1] };
                for i in 0..cfg.h {
                    for j in 0..cfg.w {
                        values.push(spec.temperature(j as f64, i as f64, t_hours) as f32);
                    }
                }
                for _ in 0..(cfg.h * cfg.w) {
                    values.push(spec.u as f32);
                }
                for _ in 0..(cfg.h * cfg.w) {
                    values.push(spec.v as f32);
                }
            }
        }

        // z-score stats over the train split, all slots.
        let train_values = tr * n_slots * slot_values;
        let hw = cfg.h * cfg.w;
        let mut stats = Vec::new();
        for (vi, name) in variables.iter().enumerate() {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for chunk_start in (0..train_values).step_by(slot_values) {
                let var_block = &values[chunk_start + vi * hw..chunk_start + (vi + 1) * hw];
                sum += var_block.iter().map(|&x| x as f64).sum::<f64>();
                count += hw;
            }
            let mean = sum / count as f64;
            let mut ss = 0.0f64;
            for chunk_start in (0..train_values).step_by(slot_values) {
                let var_block = &values[chunk_start + vi * hw..chunk_start + (vi + 1) * hw];
                ss += var_block.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>();
            }
            // A degenerate variable (e.g. zero wind everywhere) normalizes
            // to zero under unit std.
            let var = ss / count as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            stats.push(VarStats { name: clone_name(name), mean, std });
        }

        let bytes = encode_values(&values);
        let sample_bytes = (n_slots * slot_values * 4) as u64;
        let manifest = DatasetManifest {
            version: 1,
            grid_h: cfg.h,
            grid_w: cfg.w,
            variables,
            lats: default_lats(cfg.h),
            lons: default_lons(cfg.w),
            n_samples: cfg.n_samples,
            lead_hours: cfg.lead_hours.clone(),
            splits: Splits {
                train: SplitInfo { start: 0, count: tr, byte_offset: 0 },
                val: SplitInfo { start: tr, count: va, byte_offset: tr as u64 * sample_bytes },
                test: SplitInfo {
                    start: tr + va,
                    count: te,
                    byte_offset: (tr + va) as u64 * sample_bytes,
                },
            },
            stats,
            generator: Some(GeneratorParams {
                seed: cfg.seed,
                n_blobs: cfg.n_blobs,
                wind_scale: cfg.wind_scale,
                sigma_frac: SIGMA_FRAC,
                amp_range: AMP_RANGE,
                base_temp: BASE_TEMP,
            }),
            bin_len: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        manifest.validate()?;
        Ok(Dataset { manifest, values })
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let bytes = encode_values(&self.values);
        let manifest_json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        crate::write_file(&base.with_extension("manifest"), manifest_json)?;
        crate::write_file(&base.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Dataset> {
        let manifest_bytes = crate::read_file(&base.with_extension("manifest"))?;
        let manifest = parse_manifest(&manifest_bytes)?;
        let blob = crate::read_file(&base.with_extension("bin"))?;
        let values = decode_values(&manifest, &blob)?;
        Ok(Dataset { manifest, values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn split(&self, split: Split) -> SplitInfo {
        match split {
            Split::Train => self.manifest.splits.train,
            Split::Val => self.manifest.splits.val,
            Split::Test => self.manifest.splits.test,
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let info = self.split(split);
        (info.start..info.start + info.count).collect()
    }

    /// Seeded permutation of the split, chunked into batches; the final
    /// partial batch is retained.
    pub fn iterate_batches(&self, split: Split, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut indices = self.split_indices(split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        indices.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    fn slot_data(&self, sample: usize, slot: usize) -> &[f32] {
        let sv = self.manifest.slot_values();
        let base = (sample * self.manifest.n_slots() + slot) * sv;
        &self.values[base..base + sv]
    }

    /// Gathers samples at a time slot into one (B, V, H, W) field.
    pub fn gather(&self, indices: &[usize], slot: usize) -> Result<GridField> {
        if slot >= self.manifest.n_slots() {
            return Err(Error::Config(format!(
                "slot {slot} out of range ({} slots)",
                self.manifest.n_slots()
            )));
        }
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.manifest.slot_values());
        for &s in indices {
            if s >= self.manifest.n_samples {
                return Err(Error::Config(format!("sample {s} out of range")));
            }
            data.extend(self.slot_data(s, slot).iter().map(|&x| x as f64));
        }
        GridField::new(
            data,
            indices.len(),
            self.manifest.variables.clone(),
            self.manifest.lats.clone(),
            self.manifest.lons.clone(),
        )
    }

    pub fn input_batch(&self, indices: &[usize]) -> Result<GridField> {
        self.gather(indices, 0)
    }

    pub fn target_batch(&self, indices: &[usize], lead_idx: usize) -> Result<GridField> {
        self.gather(indices, 1 + lead_idx)
    }

    pub fn lead_index(&self, lead_hours: f64) -> Option<usize> {
        self.manifest.lead_hours.iter().position(|&d| d == lead_hours)
    }

    /// Per-gridpoint temporal mean of a split at one slot (the climatology
    /// used by the anomaly correlation).
    pub fn climatology(&self, split: Split, slot: usize) -> Result<GridField> {
        let indices = self.split_indices(split);
        if indices.is_empty() {
            return Err(Error::Config("empty split for climatology".into()));
        }
        let sv = self.manifest.slot_values();
        let mut mean = vec![0.0f64; sv];
        for &s in &indices {
            for (m, &x) in mean.iter_mut().zip(self.slot_data(s, slot)) {
                *m += x as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= indices.len() as f64;
        }
        GridField::new(
            mean,
            1,
            self.manifest.variables.clone(),
            self.manifest.lats.clone(),
            self.manifest.lons.clone(),
        )
    }
}

fn clone_name(name: &str) -> String {
    name.to_string()
}

fn stats_for<'a>(stats: &'a [VarStats], name: &str) -> Result<&'a VarStats> {
    stats
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("no stats for variable {name:?}")))
}

/// Per-variable z-score normalization (x - mean) / std.
pub fn normalize(field: &GridField, stats: &[VarStats]) -> Result<GridField> {
    affine(field, stats, |x, s| (x - s.mean) / s.std)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(field: &GridField, stats: &[VarStats]) -> Result<GridField> {
    affine(field, stats, |x, s| x * s.std + s.mean)
}

fn affine(field: &GridField, stats: &[VarStats], f: impl Fn(f64, &VarStats) -> f64) -> Result<GridField> {
    let (b, v, h, w) = field.dims();
    let mut out = field.data().to_vec();
    for (vi, name) in field.var_names.iter().enumerate() {
        let s = stats_for(stats, name)?;
        if !(s.std > 0.0) {
            return Err(Error::Config(format!("variable {name} has zero std")));
        }
        for bi in 0..b {
            let base = (bi * v + vi) * h * w;
            for x in out[base..base + h * w].iter_mut() {
                *x = f(*x, s);
            }
        }
    }
    field.with_data(out, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            seed: 7,
            h: 8,
            w: 16,
            n_samples: 10,
            n_blobs: 2,
            wind_scale: 0.04,
            lead_hours: vec![6.0, 12.0],
            split_counts: (6, 2, 2),
        }
    }

    #[test]
    fn zero_wind_freezes_the_field() {
        let cfg = GeneratorConfig { wind_scale: 0.0, ..small_cfg() };
        let ds = Dataset::generate(&cfg).unwrap();
        let sv = ds.manifest.variables.len() * 8 * 16;
        for s in 0..cfg.n_samples {
            let t0 = &ds.values()[s * 3 * sv..s * 3 * sv + sv];
            let t1 = &ds.values()[s * 3 * sv + sv..s * 3 * sv + 2 * sv];
            assert_eq!(t0, t1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(&small_cfg()).unwrap();
        let b = Dataset::generate(&small_cfg()).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.manifest.sha256, b.manifest.sha256);
    }

    #[test]
    fn winds_bounded_and_temperature_within_amplitude() {
        let cfg = small_cfg();
        let ds = Dataset::generate(&cfg).unwrap();
        let specs = sample_specs(&cfg);
        let max_amp: f64 = cfg.n_blobs as f64 * AMP_RANGE.1;
        for spec in &specs {
            assert!(spec.u.abs() <= cfg.wind_scale && spec.v.abs() <= cfg.wind_scale);
        }
        let batch = ds.gather(&ds.split_indices(Split::Train), 0).unwrap();
        let iu = batch.var_index(VAR_U10).unwrap();
        let it = batch.var_index(VAR_T2M).unwrap();
        let (b, _, h, w) = batch.dims();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    assert!(batch.get(bi, iu, i, j).abs() <= cfg.wind_scale + 1e-6);
                    let t = batch.get(bi, it, i, j);
                    assert!(t >= BASE_TEMP - 1e-6 && t <= BASE_TEMP + max_amp + 1e-6);
                }
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("advect");
        let ds = Dataset::generate(&small_cfg()).unwrap();
        ds.save(&base).unwrap();
        let loaded = Dataset::load(&base).unwrap();
        assert_eq!(ds.values(), loaded.values());
        assert_eq!(ds.manifest, loaded.manifest);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("advect");
        let ds = Dataset::generate(&small_cfg()).unwrap();
        ds.save(&base).unwrap();

        // Garbage manifest.
        std::fs::write(base.with_extension("manifest"), b"not json").unwrap();
        assert!(matches!(Dataset::load(&base), Err(Error::Format(_))));
        ds.save(&base).unwrap();

        // Truncated blob.
        let blob = std::fs::read(base.with_extension("bin")).unwrap();
        std::fs::write(base.with_extension("bin"), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(Dataset::load(&base), Err(Error::Length(_))));

        // Flipped byte fails the checksum.
        let mut bad = blob.clone();
        bad[0] ^= 0xff;
        std::fs::write(base.with_extension("bin"), &bad).unwrap();
        assert!(matches!(Dataset::load(&base), Err(Error::Format(_))));
    }

    #[test]
    fn batch_iteration_is_seeded_and_complete() {
        let ds = Dataset::generate(&small_cfg()).unwrap();
        let a = ds.iterate_batches(Split::Train, 4, 3);
        let b = ds.iterate_batches(Split::Train, 4, 3);
        assert_eq!(a, b);
        let c = ds.iterate_batches(Split::Train, 4, 4);
        assert_ne!(a, c);
        // ceil(6 / 4) = 2 batches, final partial batch retained.
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].len(), 4);
        assert_eq!(a[1].len(), 2);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, ds.split_indices(Split::Train));
    }

    #[test]
    fn batches_carry_the_manifest_coordinates() {
        let ds = Dataset::generate(&small_cfg()).unwrap();
        let batch = ds.input_batch(&[0, 3]).unwrap();
        assert_eq!(batch.lats, ds.manifest.lats);
        assert_eq!(batch.lons, ds.manifest.lons);
        assert_eq!(batch.lats[0], -90.0 + 0.5 * 180.0 / 8.0);
    }

    #[test]
    fn normalized_train_mean_vanishes() {
        let ds = Dataset::generate(&small_cfg()).unwrap();
        let train = ds.split_indices(Split::Train);
        let mut sums = vec![0.0f64; 3];
        let mut count = 0usize;
        for slot in 0..ds.manifest.n_slots() {
            let batch = ds.gather(&train, slot).unwrap();
            let norm = normalize(&batch, &ds.manifest.stats).unwrap();
            let (b, v, h, w) = norm.dims();
            count += b * h * w;
            for bi in 0..b {
                for vi in 0..v {
                    for i in 0..h {
                        for j in 0..w {
                            sums[vi] += norm.get(bi, vi, i, j);
                        }
                    }
                }
            }
        }
        for s in sums {
            assert!((s / count as f64).abs() < 1e-10, "normalized mean {s}");
        }
    }

    #[test]
    fn constant_field_at_mean_normalizes_to_zero() {
        let stats = vec![VarStats { name: "t2m".into(), mean: 280.0, std: 3.0 }];
        let field = GridField::new(
            vec![280.0; 8 * 8],
            1,
            vec!["t2m".into()],
            default_lats(8),
            default_lons(8),
        )
        .unwrap();
        let norm = normalize(&field, &stats).unwrap();
        assert!(norm.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_std_is_a_configuration_error() {
        let stats = vec![VarStats { name: "t2m".into(), mean: 0.0, std: 0.0 }];
        let field = GridField::new(
            vec![1.0; 64],
            1,
            vec!["t2m".into()],
            default_lats(8),
            default_lons(8),
        )
        .unwrap();
        assert!(matches!(normalize(&field, &stats), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(values in proptest::collection::vec(-50.0f64..50.0, 64),
                               mean in -10.0f64..10.0,
                               std in 0.1f64..10.0) {
            let stats = vec![VarStats { name: "t2m".into(), mean, std }];
            let field = GridField::new(values, 1, vec!["t2m".into()], default_lats(8), default_lons(8)).unwrap();
            let back = denormalize(&normalize(&field, &stats).unwrap(), &stats).unwrap();
            for (a, b) in field.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
