//! Data ingestion and synthetic generation.
//!
//! Four sources cover the experiments: the IDX image container (big-endian
//! magic-plus-dimensions header, bytes scaled to [0,1]), a planar harmonic
//! oscillator embedded in a higher-dimensional space by a seeded random
//! linear map (with exact ground-truth latents for oracle tests), a
//! reaction–diffusion system on a periodic square that forms a spiral wave,
//! and a labeled Gaussian-mixture toy. Splitting is a seeded permutation
//! followed by contiguous slices, with a sequential variant for
//! time-ordered data.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::error::EaeError;
use crate::tensor::Tensor;
use crate::training::TrainSet;
use crate::Result;

/// Stability gate for the explicit reaction–diffusion integrator:
/// `dt * d / h^2` must stay at or below this.
pub const DIFFUSION_STABILITY_LIMIT: f64 = 0.25;

/// A batch of rows with optional aligned labels, time derivatives, and
/// generator-truth latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub time_derivatives: Option<Tensor>,
    /// Latent trajectory the generator integrated, when one exists.
    pub true_latents: Option<Tensor>,
    /// Analytic time derivative of the true latents.
    pub true_latent_derivatives: Option<Tensor>,
    /// Generator call or file digest this data came from.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        time_derivatives: Option<Tensor>,
        true_latents: Option<Tensor>,
        true_latent_derivatives: Option<Tensor>,
        provenance: String,
    ) -> Result<Dataset> {
        let n = inputs.rows();
        if !inputs.data().iter().all(|v| v.is_finite()) {
            return Err(EaeError::Domain("dataset inputs must be finite".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(EaeError::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    n
                )));
            }
        }
        if let Some(d) = &time_derivatives {
            if d.shape() != inputs.shape() {
                return Err(EaeError::Shape(format!(
                    "derivative shape {:?} does not match inputs {:?}",
                    d.shape(),
                    inputs.shape()
                )));
            }
        }
        match (&true_latents, &true_latent_derivatives) {
            (Some(z), Some(dz)) => {
                if z.rows() != n || dz.shape() != z.shape() {
                    return Err(EaeError::Shape(
                        "latent trajectory fields must align with the inputs".into(),
                    ));
                }
            }
            (None, None) => {}
            _ => {
                return Err(EaeError::Shape(
                    "latent trajectories and their derivatives come as a pair".into(),
                ))
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            time_derivatives,
            true_latents,
            true_latent_derivatives,
            provenance,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.inputs.rows()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.width()
    }

    /// Borrow the inputs (and paired derivatives when present) as a
    /// training view.
    pub fn train_set(&self) -> Result<TrainSet<'_>> {
        match &self.time_derivatives {
            Some(d) => TrainSet::with_derivatives(&self.inputs, d),
            None => Ok(TrainSet::inputs_only(&self.inputs)),
        }
    }

    /// New dataset holding the given rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_rows()) {
            return Err(EaeError::Shape(format!(
                "row {bad} out of range ({} rows)",
                self.n_rows()
            )));
        }
        let gather = |t: &Tensor| -> Tensor {
            let w = t.width();
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), w], data).expect("selected rows keep their shape")
        };
        Ok(Dataset {
            inputs: gather(&self.inputs),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            time_derivatives: self.time_derivatives.as_ref().map(&gather),
            true_latents: self.true_latents.as_ref().map(&gather),
            true_latent_derivatives: self.true_latent_derivatives.as_ref().map(&gather),
            provenance: self.provenance.clone(),
        })
    }

    /// Persist as a JSON header plus one little-endian float payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let latent_dim = self.true_latents.as_ref().map_or(0, Tensor::width);
        let header = serde_json::json!({
            "format": "dataset",
            "version": 1,
            "rows": self.n_rows(),
            "width": self.n_features(),
            "provenance": self.provenance,
            "has_labels": self.labels.is_some(),
            "has_derivatives": self.time_derivatives.is_some(),
            "latent_dim": latent_dim,
        });
        let mut payload = Vec::new();
        payload.extend_from_slice(self.inputs.data());
        if let Some(d) = &self.time_derivatives {
            payload.extend_from_slice(d.data());
        }
        if let Some(z) = &self.true_latents {
            payload.extend_from_slice(z.data());
        }
        if let Some(dz) = &self.true_latent_derivatives {
            payload.extend_from_slice(dz.data());
        }
        if let Some(l) = &self.labels {
            payload.extend(l.iter().map(|&v| v as f64));
        }
        crate::io::write_container(path, &header.to_string(), &payload)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let (header, payload) = crate::io::read_container(path)?;
        let h: serde_json::Value = serde_json::from_str(&header)?;
        let bad = |reason: String| EaeError::Format {
            path: path.display().to_string(),
            offset: 4,
            reason,
        };
        if h["format"] != "dataset" {
            return Err(bad("not a dataset container".into()));
        }
        let rows = h["rows"].as_u64().ok_or_else(|| bad("missing row count".into()))? as usize;
        let width = h["width"].as_u64().ok_or_else(|| bad("missing width".into()))? as usize;
        let has_labels = h["has_labels"].as_bool().unwrap_or(false);
        let has_derivs = h["has_derivatives"].as_bool().unwrap_or(false);
        let latent_dim = h["latent_dim"].as_u64().unwrap_or(0) as usize;
        let provenance = h["provenance"].as_str().unwrap_or("").to_string();
        let main = rows * width;
        let expected = main
            + if has_derivs { main } else { 0 }
            + 2 * rows * latent_dim
            + if has_labels { rows } else { 0 };
        if payload.len() != expected {
            return Err(bad(format!(
                "payload holds {} values, header implies {expected}",
                payload.len()
            )));
        }
        let mut cursor = 0;
        let mut take = |count: usize| -> Vec<f64> {
            let slice = payload[cursor..cursor + count].to_vec();
            cursor += count;
            slice
        };
        let inputs = Tensor::new(vec![rows, width], take(main))?;
        let time_derivatives = if has_derivs {
            Some(Tensor::new(vec![rows, width], take(main))?)
        } else {
            None
        };
        let (true_latents, true_latent_derivatives) = if latent_dim > 0 {
            (
                Some(Tensor::new(vec![rows, latent_dim], take(rows * latent_dim))?),
                Some(Tensor::new(vec![rows, latent_dim], take(rows * latent_dim))?),
            )
        } else {
            (None, None)
        };
        let labels = if has_labels {
            let raw = take(rows);
            let mut out = Vec::with_capacity(rows);
            for v in raw {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(bad(format!("label {v} is not a non-negative integer")));
                }
                out.push(v as usize);
            }
            Some(out)
        } else {
            None
        };
        Dataset::new(
            inputs,
            labels,
            time_derivatives,
            true_latents,
            true_latent_derivatives,
            provenance,
        )
    }
}

// ---------------------------------------------------------------------------
// IDX container
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(EaeError::Format {
            path: path.display().to_string(),
            offset: offset as u64,
            reason: format!("file ends before the 4-byte field at {offset}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Read a paired image/label IDX container set: images scaled into [0,1],
/// labels restricted to digits 0 through 9.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(EaeError::Format {
            path: images_path.display().to_string(),
            offset: 0,
            reason: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let pixel_count = n * rows * cols;
    if img_bytes.len() != 16 + pixel_count {
        return Err(EaeError::Format {
            path: images_path.display().to_string(),
            offset: img_bytes.len().min(16 + pixel_count) as u64,
            reason: format!(
                "{} pixel bytes present, header implies {pixel_count}",
                img_bytes.len().saturating_sub(16)
            ),
        });
    }

    let lbl_magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(EaeError::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            reason: format!("magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(EaeError::Format {
            path: labels_path.display().to_string(),
            offset: lbl_bytes.len().min(8 + n_labels) as u64,
            reason: format!(
                "{} label bytes present, header implies {n_labels}",
                lbl_bytes.len().saturating_sub(8)
            ),
        });
    }
    if n_labels != n {
        return Err(EaeError::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            reason: format!("{n_labels} labels for {n} images"),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in lbl_bytes[8..].iter().enumerate() {
        if b > 9 {
            return Err(EaeError::Format {
                path: labels_path.display().to_string(),
                offset: (8 + i) as u64,
                reason: format!("label {b} outside 0..=9"),
            });
        }
        labels.push(b as usize);
    }
    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, rows * cols], data)?;
    let provenance = format!(
        "idx(images={:016x},labels={:016x},n={n},pixels={})",
        fnv1a(&img_bytes),
        fnv1a(&lbl_bytes),
        rows * cols
    );
    Dataset::new(inputs, Some(labels), None, None, None, provenance)
}

// ---------------------------------------------------------------------------
// Embedded planar oscillator
// ---------------------------------------------------------------------------

fn rotation_rhs(omega: f64, z: [f64; 2]) -> [f64; 2] {
    [omega * z[1], -omega * z[0]]
}

/// Generate a planar-rotation latent trajectory pushed through a caller
/// -supplied linear embedding (an `embed_dim x 2` matrix), along with
/// analytic time derivatives on both levels.
pub fn gen_oscillator_with_embedding(
    omega: f64,
    embedding: &Tensor,
    n: usize,
    dt: f64,
    provenance: String,
) -> Result<Dataset> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(EaeError::Config("oscillator frequency must be positive".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EaeError::Config("time step must be positive".into()));
    }
    if n == 0 {
        return Err(EaeError::Config("need at least one snapshot".into()));
    }
    if embedding.width() != 2 || embedding.rows() < 2 {
        return Err(EaeError::Shape(format!(
            "embedding must be (embed_dim >= 2) x 2, got {:?}",
            embedding.shape()
        )));
    }
    let embed_dim = embedding.rows();
    let mut z = [1.0, 0.0];
    let mut latents = Vec::with_capacity(n * 2);
    let mut latent_derivs = Vec::with_capacity(n * 2);
    for step in 0..n {
        let dz = rotation_rhs(omega, z);
        latents.extend_from_slice(&z);
        latent_derivs.extend_from_slice(&dz);
        if step + 1 < n {
            let k1 = dz;
            let k2 = rotation_rhs(omega, [z[0] + 0.5 * dt * k1[0], z[1] + 0.5 * dt * k1[1]]);
            let k3 = rotation_rhs(omega, [z[0] + 0.5 * dt * k2[0], z[1] + 0.5 * dt * k2[1]]);
            let k4 = rotation_rhs(omega, [z[0] + dt * k3[0], z[1] + dt * k3[1]]);
            z[0] += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
            z[1] += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
        }
    }
    let embed = |flat: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * embed_dim];
        for s in 0..n {
            for r in 0..embed_dim {
                let row = embedding.row(r);
                out[s * embed_dim + r] = row[0] * flat[s * 2] + row[1] * flat[s * 2 + 1];
            }
        }
        out
    };
    let inputs = Tensor::new(vec![n, embed_dim], embed(&latents))?;
    let derivs = Tensor::new(vec![n, embed_dim], embed(&latent_derivs))?;
    Dataset::new(
        inputs,
        None,
        Some(derivs),
        Some(Tensor::new(vec![n, 2], latents)?),
        Some(Tensor::new(vec![n, 2], latent_derivs)?),
        provenance,
    )
}

/// Planar rotation at angular frequency `omega`, embedded into `embed_dim`
/// coordinates by a seeded random linear map. Ground-truth latents and
/// their analytic derivatives ride along for oracle checks.
pub fn gen_oscillator(
    omega: f64,
    embed_dim: usize,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<Dataset> {
    if embed_dim < 2 {
        return Err(EaeError::Config(
            "the embedding needs at least two coordinates".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<f64> = (0..embed_dim * 2)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let embedding = Tensor::new(vec![embed_dim, 2], entries)?;
    let provenance = format!(
        "oscillator(omega={omega},embed_dim={embed_dim},n={n},dt={dt},seed={seed})"
    );
    gen_oscillator_with_embedding(omega, &embedding, n, dt, provenance)
}

// ---------------------------------------------------------------------------
// Reaction–diffusion spiral
// ---------------------------------------------------------------------------

struct RdGrid {
    n: usize,
    h: f64,
    d: f64,
}

impl RdGrid {
    /// Reaction plus diffusion right-hand side for both fields.
    fn rhs(&self, u: &[f64], v: &[f64], du: &mut [f64], dv: &mut [f64]) {
        let n = self.n;
        let inv_h2 = 1.0 / (self.h * self.h);
        for i in 0..n {
            let up = if i == 0 { n - 1 } else { i - 1 };
            let dn = if i == n - 1 { 0 } else { i + 1 };
            for j in 0..n {
                let lf = if j == 0 { n - 1 } else { j - 1 };
                let rt = if j == n - 1 { 0 } else { j + 1 };
                let c = i * n + j;
                let lap_u =
                    (u[up * n + j] + u[dn * n + j] + u[i * n + lf] + u[i * n + rt] - 4.0 * u[c])
                        * inv_h2;
                let lap_v =
                    (v[up * n + j] + v[dn * n + j] + v[i * n + lf] + v[i * n + rt] - 4.0 * v[c])
                        * inv_h2;
                let a2 = u[c] * u[c] + v[c] * v[c];
                let lambda = 1.0 - a2;
                let omega = -a2;
                du[c] = lambda * u[c] - omega * v[c] + self.d * lap_u;
                dv[c] = omega * u[c] + lambda * v[c] + self.d * lap_v;
            }
        }
    }
}

fn integrate_reaction_diffusion(
    grid_n: usize,
    steps: usize,
    dt: f64,
    d: f64,
    u0: Vec<f64>,
    v0: Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grid_n < 16 {
        return Err(EaeError::Config(format!(
            "grid must be at least 16x16, got {grid_n}"
        )));
    }
    if steps == 0 {
        return Err(EaeError::Config("need at least one snapshot".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EaeError::Config("time step must be positive".into()));
    }
    if !(d.is_finite() && d >= 0.0) {
        return Err(EaeError::Config("diffusion coefficient must be non-negative".into()));
    }
    let cells = grid_n * grid_n;
    assert_eq!(u0.len(), cells);
    assert_eq!(v0.len(), cells);
    let h = 20.0 / grid_n as f64;
    if dt * d / (h * h) > DIFFUSION_STABILITY_LIMIT {
        return Err(EaeError::Stability(format!(
            "dt {dt} exceeds the diffusive stability bound {} for a {grid_n}-cell axis",
            DIFFUSION_STABILITY_LIMIT * h * h / d
        )));
    }
    let grid = RdGrid { n: grid_n, h, d };
    let mut u = u0;
    let mut v = v0;
    let mut du = vec![0.0; cells];
    let mut dv = vec![0.0; cells];
    let mut snapshots = Vec::with_capacity(steps * cells);
    let mut snapshot_derivs = Vec::with_capacity(steps * cells);
    // Scratch for the integrator stages.
    let mut ku = vec![vec![0.0; cells]; 4];
    let mut kv = vec![vec![0.0; cells]; 4];
    let mut tu = vec![0.0; cells];
    let mut tv = vec![0.0; cells];
    for step in 0..steps {
        grid.rhs(&u, &v, &mut du, &mut dv);
        snapshots.extend_from_slice(&u);
        snapshot_derivs.extend_from_slice(&du);
        if !snapshots[step * cells..].iter().all(|x| x.is_finite()) {
            return Err(EaeError::NonFinite {
                context: "reaction-diffusion field".into(),
                step,
            });
        }
        if step + 1 == steps {
            break;
        }
        ku[0].copy_from_slice(&du);
        kv[0].copy_from_slice(&dv);
        for stage in 1..4 {
            let c = if stage < 3 { 0.5 } else { 1.0 };
            for i in 0..cells {
                tu[i] = u[i] + c * dt * ku[stage - 1][i];
                tv[i] = v[i] + c * dt * kv[stage - 1][i];
            }
            grid.rhs(&tu, &tv, &mut du, &mut dv);
            ku[stage].copy_from_slice(&du);
            kv[stage].copy_from_slice(&dv);
        }
        for i in 0..cells {
            u[i] += dt / 6.0 * (ku[0][i] + 2.0 * ku[1][i] + 2.0 * ku[2][i] + ku[3][i]);
            v[i] += dt / 6.0 * (kv[0][i] + 2.0 * kv[1][i] + 2.0 * kv[2][i] + kv[3][i]);
        }
    }
    Ok((snapshots, snapshot_derivs))
}

/// Spiral-wave reaction–diffusion snapshots on a periodic square: the first
/// field flattened row-major per snapshot, paired with its analytic time
/// derivative. The dynamics are deterministic; the seed only tags the
/// provenance.
pub fn gen_lambda_omega(
    grid_n: usize,
    steps: usize,
    dt: f64,
    d: f64,
    seed: u64,
) -> Result<Dataset> {
    let cells = grid_n * grid_n;
    let mut u0 = vec![0.0; cells];
    let mut v0 = vec![0.0; cells];
    let h = 20.0 / grid_n as f64;
    for i in 0..grid_n {
        let y = -10.0 + i as f64 * h;
        for j in 0..grid_n {
            let x = -10.0 + j as f64 * h;
            let r = (x * x + y * y).sqrt();
            let angle = y.atan2(x);
            u0[i * grid_n + j] = r.tanh() * (angle - r).cos();
            v0[i * grid_n + j] = r.tanh() * (angle - r).sin();
        }
    }
    let (snapshots, derivs) = integrate_reaction_diffusion(grid_n, steps, dt, d, u0, v0)?;
    let inputs = Tensor::new(vec![steps, cells], snapshots)?;
    let time_derivatives = Tensor::new(vec![steps, cells], derivs)?;
    let provenance =
        format!("lambda_omega(grid_n={grid_n},steps={steps},dt={dt},d={d},seed={seed})");
    Dataset::new(inputs, None, Some(time_derivatives), None, None, provenance)
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

/// `k` unit-variance Gaussian clusters with well-separated seeded means in
/// `dim` ambient coordinates; the component index is the label.
pub fn gen_gaussian_mixture(k: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || dim == 0 || n == 0 {
        return Err(EaeError::Config(
            "mixture needs positive component count, dimension, and size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Means on a sphere of radius 10: far apart relative to unit noise.
    let mut means = vec![0.0; k * dim];
    for mean in means.chunks_mut(dim) {
        let mut norm2 = 0.0;
        for slot in mean.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *slot = g;
            norm2 += g * g;
        }
        let scale = 10.0 / norm2.sqrt().max(1e-12);
        for slot in mean.iter_mut() {
            *slot *= scale;
        }
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = (rng.next_u64() % k as u64) as usize;
        labels.push(c);
        let mean = &means[c * dim..(c + 1) * dim];
        for &m in mean {
            let g: f64 = StandardNormal.sample(&mut rng);
            data.push(m + g);
        }
    }
    let inputs = Tensor::new(vec![n, dim], data)?;
    let provenance = format!("gaussian_mixture(k={k},dim={dim},n={n},seed={seed})");
    Dataset::new(inputs, Some(labels), None, None, None, provenance)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if n == 0 {
        return Err(EaeError::Config("cannot split an empty dataset".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(EaeError::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let a = (fractions[0] * n as f64).floor() as usize;
    let b = (fractions[1] * n as f64).floor() as usize;
    if a + b > n {
        return Err(EaeError::Config("split fractions overflow the dataset".into()));
    }
    let c = n - a - b;
    let sizes = [a, b, c];
    for (size, frac) in sizes.iter().zip(&fractions) {
        if *frac > 0.0 && *size == 0 {
            return Err(EaeError::Config(format!(
                "fraction {frac} of {n} rows yields an empty slice"
            )));
        }
    }
    Ok(sizes)
}

fn carve(ds: &Dataset, order: &[usize], sizes: [usize; 3]) -> Result<(Dataset, Dataset, Dataset)> {
    let train = ds.select(&order[..sizes[0]])?;
    let val = ds.select(&order[sizes[0]..sizes[0] + sizes[1]])?;
    let test = ds.select(&order[sizes[0] + sizes[1]..])?;
    Ok((train, val, test))
}

/// Random split: a seeded permutation cut into contiguous train/validation/
/// test slices. The first two sizes round down; leftover rows go to test.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sizes = split_sizes(ds.n_rows(), fractions)?;
    let mut order: Vec<usize> = (0..ds.n_rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    carve(ds, &order, sizes)
}

/// Order-preserving split for time-indexed data: earlier rows train, the
/// tail becomes the test span.
pub fn split_sequential(ds: &Dataset, fractions: [f64; 3]) -> Result<(Dataset, Dataset, Dataset)> {
    let sizes = split_sizes(ds.n_rows(), fractions)?;
    let order: Vec<usize> = (0..ds.n_rows()).collect();
    carve(ds, &order, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_idx_pair(
        dir: &Path,
        images: &[[u8; 4]],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        std::fs::File::create(&img_path)
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        std::fs::File::create(&lbl_path)
            .unwrap()
            .write_all(&lbl)
            .unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_reader_scales_pixels_and_keeps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(
            dir.path(),
            &[[0, 255, 51, 102], [0, 0, 0, 0]],
            &[3, 9],
        );
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.n_features(), 4);
        let row0 = ds.inputs.row(0);
        assert_eq!(row0[0], 0.0);
        assert_eq!(row0[1], 1.0);
        assert!((row0[2] - 0.2).abs() < 1e-12);
        assert!((row0[3] - 0.4).abs() < 1e-12);
        assert!(ds.inputs.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels.as_deref(), Some(&[3usize, 9][..]));
        assert!(ds.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_reader_rejects_bad_magic_truncation_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), &[[1, 2, 3, 4]], &[5]);

        // Corrupt the image magic.
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        let bad_magic = dir.path().join("badmagic.idx");
        std::fs::write(&bad_magic, &bytes).unwrap();
        match load_idx(&bad_magic, &lbl) {
            Err(EaeError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other:?}"),
        }

        // Truncate the pixel payload.
        let full = std::fs::read(&img).unwrap();
        let truncated = dir.path().join("short.idx");
        std::fs::write(&truncated, &full[..full.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&truncated, &lbl),
            Err(EaeError::Format { .. })
        ));

        // Label out of digit range.
        let (img2, lbl2) = write_idx_pair(dir.path(), &[[0, 0, 0, 0]], &[11]);
        match load_idx(&img2, &lbl2) {
            Err(EaeError::Format { offset, reason, .. }) => {
                assert_eq!(offset, 8);
                assert!(reason.contains("11"));
            }
            other => panic!("expected a label error, got {other:?}"),
        }

        // Image/label count mismatch (pairs written to separate directories
        // so the fixtures do not overwrite each other).
        let dir_b = tempfile::tempdir().unwrap();
        let (img3, _) = write_idx_pair(dir.path(), &[[0; 4], [0; 4]], &[1, 2]);
        let (_, lbl3) = write_idx_pair(dir_b.path(), &[[0; 4]], &[1]);
        assert!(matches!(
            load_idx(&img3, &lbl3),
            Err(EaeError::Format { .. })
        ));
    }

    #[test]
    fn oscillator_conserves_radius_and_satisfies_its_ode_exactly() {
        let ds = gen_oscillator(2.0, 10, 500, 0.005, 7).unwrap();
        assert_eq!(ds.n_rows(), 500);
        assert_eq!(ds.n_features(), 10);
        let z = ds.true_latents.as_ref().unwrap();
        let dz = ds.true_latent_derivatives.as_ref().unwrap();
        for s in 0..500 {
            let r = z.row(s);
            let radius = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!(
                (radius - 1.0).abs() < 1e-6,
                "step {s}: radius {radius}"
            );
            // The stored latent derivative is the exact vector field.
            let d = dz.row(s);
            assert_eq!(d[0], 2.0 * r[1]);
            assert_eq!(d[1], -2.0 * r[0]);
        }
    }

    #[test]
    fn identity_embedding_returns_the_latents_themselves() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ds =
            gen_oscillator_with_embedding(1.5, &eye, 50, 0.01, "test".into()).unwrap();
        let z = ds.true_latents.as_ref().unwrap();
        assert_eq!(ds.inputs.data(), z.data());
        let dz = ds.true_latent_derivatives.as_ref().unwrap();
        assert_eq!(ds.time_derivatives.as_ref().unwrap().data(), dz.data());
    }

    #[test]
    fn oscillator_derivatives_match_central_differences() {
        let dt = 0.005;
        let ds = gen_oscillator(2.0, 6, 200, dt, 3).unwrap();
        let x = &ds.inputs;
        let dx = ds.time_derivatives.as_ref().unwrap();
        let mut worst = 0.0f64;
        for s in 1..199 {
            for c in 0..6 {
                let fd = (x.row(s + 1)[c] - x.row(s - 1)[c]) / (2.0 * dt);
                worst = worst.max((fd - dx.row(s)[c]).abs());
            }
        }
        // Central differences of the trajectory agree to O(dt^2).
        assert!(worst < 1e-3, "worst derivative mismatch {worst}");
    }

    #[test]
    fn oscillator_is_seed_deterministic() {
        let a = gen_oscillator(2.0, 5, 40, 0.01, 11).unwrap();
        let b = gen_oscillator(2.0, 5, 40, 0.01, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_oscillator(2.0, 5, 40, 0.01, 12).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
        assert!(gen_oscillator(2.0, 1, 40, 0.01, 11).is_err());
        assert!(gen_oscillator(-1.0, 5, 40, 0.01, 11).is_err());
    }

    #[test]
    fn zero_field_is_a_fixed_point() {
        let cells = 16 * 16;
        let (snaps, derivs) =
            integrate_reaction_diffusion(16, 5, 0.05, 0.1, vec![0.0; cells], vec![0.0; cells])
                .unwrap();
        assert!(snaps.iter().all(|&v| v == 0.0));
        assert!(derivs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_time_step_is_rejected_before_integrating() {
        // h = 20/32 = 0.625, so the diffusive bound is 0.25 * h^2 / d ≈ 0.98.
        match gen_lambda_omega(32, 10, 1.5, 0.1, 0) {
            Err(EaeError::Stability(msg)) => assert!(msg.contains("1.5")),
            other => panic!("expected a stability error, got {other:?}"),
        }
    }

    #[test]
    fn spiral_wave_settles_onto_the_unit_limit_cycle() {
        // Integrate past the transient and check the late-time amplitude
        // stays within 10% of the limit-cycle radius.
        let ds = gen_lambda_omega(32, 400, 0.05, 0.1, 0).unwrap();
        assert_eq!(ds.n_features(), 1024);
        let late = &ds.inputs.data()[300 * 1024..];
        let max_amp = late.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(
            max_amp <= 1.1,
            "late-time amplitude {max_amp} exceeds the limit cycle + 10%"
        );
        assert!(max_amp > 0.5, "field should not have died out: {max_amp}");
    }

    #[test]
    fn difference_energy_is_periodic_with_the_limit_cycle() {
        let dt = 0.05;
        let ds = gen_lambda_omega(32, 1600, dt, 0.1, 0).unwrap();
        let cells = 1024;
        // Difference energy between consecutive snapshots, late window only.
        let first = 1100;
        let mut energy = Vec::new();
        for s in first..1599 {
            let a = ds.inputs.row(s);
            let b = ds.inputs.row(s + 1);
            energy.push(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / cells as f64,
            );
        }
        // Remove the residual transient drift (slow, monotone) so the
        // autocorrelation sees only the oscillatory part.
        let m = energy.len() as f64;
        let mean = energy.iter().sum::<f64>() / m;
        let t_mean = (m - 1.0) / 2.0;
        let mut cov_te = 0.0;
        let mut var_t = 0.0;
        for (t, e) in energy.iter().enumerate() {
            cov_te += (t as f64 - t_mean) * (e - mean);
            var_t += (t as f64 - t_mean) * (t as f64 - t_mean);
        }
        let slope = cov_te / var_t;
        let centered: Vec<f64> = energy
            .iter()
            .enumerate()
            .map(|(t, e)| e - mean - slope * (t as f64 - t_mean))
            .collect();
        let var: f64 = centered.iter().map(|c| c * c).sum();
        // Normalized autocorrelation; first prominent peak = period of the
        // energy signal, of which the rotation period is a multiple.
        let max_lag = 200;
        let mut best_lag = 0;
        let mut best = f64::NEG_INFINITY;
        let mut rho = vec![0.0; max_lag + 1];
        for (lag, r) in rho.iter_mut().enumerate().skip(20) {
            let mut s = 0.0;
            for t in 0..centered.len() - lag {
                s += centered[t] * centered[t + lag];
            }
            *r = s / var;
        }
        for lag in 21..max_lag {
            if rho[lag] > rho[lag - 1] && rho[lag] >= rho[lag + 1] && rho[lag] > best {
                best = rho[lag];
                best_lag = lag;
                break;
            }
        }
        assert!(best > 0.5, "no clear periodicity (peak {best})");
        let energy_period = best_lag as f64 * dt;

        // Independent period estimate: upward zero crossings of the wave at
        // off-center probe cells, linearly interpolated between snapshots.
        let mut crossings = Vec::new();
        for probe in [8 * 32 + 8, 16 * 32 + 22] {
            let mut prev_cross: Option<f64> = None;
            for s in first..1599 {
                let a = ds.inputs.row(s)[probe];
                let b = ds.inputs.row(s + 1)[probe];
                if a < 0.0 && b >= 0.0 {
                    let t_cross = (s as f64 + a / (a - b)) * dt;
                    if let Some(p) = prev_cross {
                        crossings.push(t_cross - p);
                    }
                    prev_cross = Some(t_cross);
                }
            }
        }
        assert!(crossings.len() >= 4, "too few oscillations at the probes");
        let cycle_period = crossings.iter().sum::<f64>() / crossings.len() as f64;
        // The attractor is a rotating wave whose frequency is amplitude-
        // selected, so its period sits near (not exactly at) the nominal
        // uniform-oscillation value 2*pi.
        let nominal = 2.0 * std::f64::consts::PI;
        assert!(
            (cycle_period - nominal).abs() / nominal < 0.25,
            "attractor period {cycle_period} is far from the nominal {nominal}"
        );
        // The difference energy repeats every half rotation (the field flips
        // sign after half a turn), so its period times 1 or 2 must match the
        // limit-cycle period.
        let rel = (1..=2)
            .map(|k| ((k as f64 * energy_period) - cycle_period).abs() / cycle_period)
            .fold(f64::INFINITY, f64::min);
        assert!(
            rel <= 0.05,
            "difference-energy period {energy_period} vs limit-cycle period {cycle_period} (rel {rel})"
        );
    }

    #[test]
    fn mixture_labels_mark_separated_clusters() {
        let ds = gen_gaussian_mixture(2, 8, 300, 5).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        assert!(labels.iter().all(|&l| l < 2));
        assert!(labels.contains(&0) && labels.contains(&1));
        // Nearest-class-mean classification is perfect on far clusters.
        let mut means = [vec![0.0; 8], vec![0.0; 8]];
        let mut counts = [0usize; 2];
        for (r, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (slot, v) in means[l].iter_mut().zip(ds.inputs.row(r)) {
                *slot += v;
            }
        }
        for (m, c) in means.iter_mut().zip(counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let dist2 = |row: &[f64], m: &[f64]| -> f64 {
            row.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        for (r, &l) in labels.iter().enumerate() {
            let row = ds.inputs.row(r);
            let own = dist2(row, &means[l]);
            let other = dist2(row, &means[1 - l]);
            assert!(own < other, "row {r} sits closer to the wrong mean");
        }
    }

    #[test]
    fn single_component_mixture_and_determinism() {
        let ds = gen_gaussian_mixture(1, 3, 50, 9).unwrap();
        assert!(ds.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        let again = gen_gaussian_mixture(1, 3, 50, 9).unwrap();
        assert_eq!(ds, again);
        let other = gen_gaussian_mixture(1, 3, 50, 10).unwrap();
        assert_ne!(ds.inputs.data(), other.inputs.data());
    }

    #[test]
    fn random_split_is_disjoint_exhaustive_and_sized_by_floor() {
        let ds = gen_gaussian_mixture(3, 4, 60, 21).unwrap();
        let (train, val, test) = split(&ds, [0.6, 0.2, 0.2], 77).unwrap();
        assert_eq!(train.n_rows(), 36);
        assert_eq!(val.n_rows(), 12);
        assert_eq!(test.n_rows(), 12);
        // Rows of a continuous mixture are distinct almost surely; sort the
        // concatenated first column to verify the union is exactly the
        // original multiset.
        let mut all: Vec<f64> = Vec::new();
        for part in [&train, &val, &test] {
            for r in 0..part.n_rows() {
                all.push(part.inputs.row(r)[0]);
            }
        }
        let mut orig: Vec<f64> = (0..60).map(|r| ds.inputs.row(r)[0]).collect();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);
        // Labels travel with their rows.
        let (t2, _, _) = split(&ds, [0.6, 0.2, 0.2], 77).unwrap();
        assert_eq!(t2.labels, train.labels);
    }

    #[test]
    fn split_sizes_follow_the_floor_remainder_rule() {
        let sizes = split_sizes(1965, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(sizes, [1572, 196, 197]);
        let all_train = split_sizes(10, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(all_train, [10, 0, 0]);
        assert!(split_sizes(5, [0.5, 0.1, 0.4]).is_err()); // 0.1 of 5 floors to zero
        assert!(split_sizes(0, [0.8, 0.1, 0.1]).is_err());
        assert!(split_sizes(10, [0.5, 0.2, 0.2]).is_err()); // sums to 0.9
    }

    #[test]
    fn sequential_split_keeps_time_order() {
        let ds = gen_oscillator(1.0, 3, 30, 0.01, 2).unwrap();
        let (train, val, test) = split_sequential(&ds, [0.5, 0.2, 0.3]).unwrap();
        assert_eq!(train.n_rows(), 15);
        assert_eq!(val.n_rows(), 6);
        assert_eq!(test.n_rows(), 9);
        assert_eq!(train.inputs.row(0), ds.inputs.row(0));
        assert_eq!(val.inputs.row(0), ds.inputs.row(15));
        assert_eq!(test.inputs.row(0), ds.inputs.row(21));
        // Derivative and latent fields slice alongside.
        assert_eq!(
            test.time_derivatives.as_ref().unwrap().row(0),
            ds.time_derivatives.as_ref().unwrap().row(21)
        );
        assert_eq!(
            test.true_latents.as_ref().unwrap().row(0),
            ds.true_latents.as_ref().unwrap().row(21)
        );
    }

    #[test]
    fn dataset_container_round_trips_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let ds = gen_oscillator(2.0, 4, 25, 0.01, 13).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);

        let labeled = gen_gaussian_mixture(3, 2, 40, 1).unwrap();
        let path2 = dir.path().join("labeled.bin");
        labeled.save(&path2).unwrap();
        assert_eq!(Dataset::load(&path2).unwrap(), labeled);
    }

    #[test]
    fn dataset_constructor_rejects_misaligned_fields() {
        let x = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        let bad_labels = Dataset::new(
            x.clone(),
            Some(vec![0, 1]),
            None,
            None,
            None,
            "t".into(),
        );
        assert!(bad_labels.is_err());
        let short = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(Dataset::new(
            x.clone(),
            None,
            Some(short.clone()),
            None,
            None,
            "t".into()
        )
        .is_err());
        assert!(Dataset::new(x.clone(), None, None, Some(short), None, "t".into()).is_err());
        // Non-finite values are stopped at tensor construction or here.
        if let Ok(t) = Tensor::new(vec![1, 1], vec![f64::NAN]) {
            assert!(Dataset::new(t, None, None, None, None, "t".into()).is_err());
        }
    }
}
