//! Two-loop entropic training and the deterministic baselines.
//!
//! The entropic trainer alternates between (outer loop) one Adam update of
//! the decoder and (inner loop) a fixed number of thermostatted sampler steps
//! over the encoder parameters, each on a fresh minibatch. Every inner step
//! first records the current encoder sample together with the decoder
//! gradient evaluated at that sample — the stored gradients are averaged into
//! the free-energy descent direction for the decoder — and only then moves
//! the encoder. Sampler state and optimizer moments persist across outer
//! iterations.
//!
//! The same configuration type drives the two baselines: a vanilla
//! autoencoder trained by joint minibatch Adam, and a variational
//! autoencoder trained on the negative evidence lower bound with one noise
//! draw per datum per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::{dynamics_loss, dynamics_loss_grads, BasisLibrary, DynamicsWeights};
use crate::error::EaeError;
use crate::networks::{
    elbo_loss_grads, recon_loss, recon_loss_grads, AutoencoderModel, LossKind, VaeModel,
};
use crate::sampler::{init_state, step, ThermostatConfig};
use crate::tensor::{init_params, ParamVector, Tensor};
use crate::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam optimizer state (first/second moment estimates with bias
/// correction).
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Adam {
        Adam {
            learning_rate,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One optimizer step in place.
    pub fn update(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Training inputs: a batch tensor plus, for the dynamics-aware objective,
/// the matching per-row time derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub inputs: &'a Tensor,
    pub time_derivatives: Option<&'a Tensor>,
}

impl<'a> TrainSet<'a> {
    pub fn inputs_only(inputs: &'a Tensor) -> TrainSet<'a> {
        TrainSet {
            inputs,
            time_derivatives: None,
        }
    }

    pub fn with_derivatives(inputs: &'a Tensor, derivs: &'a Tensor) -> Result<TrainSet<'a>> {
        if derivs.shape() != inputs.shape() {
            return Err(EaeError::Shape(format!(
                "time derivatives shape {:?} does not match inputs shape {:?}",
                derivs.shape(),
                inputs.shape()
            )));
        }
        Ok(TrainSet {
            inputs,
            time_derivatives: Some(derivs),
        })
    }
}

/// What the trainers minimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// Plain reconstruction error.
    Reconstruction(LossKind),
    /// Reconstruction plus velocity matching through a fitted latent field.
    Dynamics {
        library: BasisLibrary,
        weights: DynamicsWeights,
    },
}

impl ObjectiveSpec {
    fn requires_derivatives(&self) -> bool {
        matches!(self, ObjectiveSpec::Dynamics { .. })
    }

    fn loss(
        &self,
        model: &AutoencoderModel,
        enc: &ParamVector,
        dec: &ParamVector,
        x: &Tensor,
        dx: Option<&Tensor>,
    ) -> Result<f64> {
        match self {
            ObjectiveSpec::Reconstruction(kind) => recon_loss(model, enc, dec, x, *kind),
            ObjectiveSpec::Dynamics { library, weights } => {
                let dx = dx.ok_or_else(missing_derivatives)?;
                dynamics_loss(model, enc, dec, x, dx, library, weights)
            }
        }
    }

    fn loss_grads(
        &self,
        model: &AutoencoderModel,
        enc: &ParamVector,
        dec: &ParamVector,
        x: &Tensor,
        dx: Option<&Tensor>,
    ) -> Result<(f64, ParamVector, ParamVector)> {
        match self {
            ObjectiveSpec::Reconstruction(kind) => recon_loss_grads(model, enc, dec, x, *kind),
            ObjectiveSpec::Dynamics { library, weights } => {
                let dx = dx.ok_or_else(missing_derivatives)?;
                dynamics_loss_grads(model, enc, dec, x, dx, library, weights)
            }
        }
    }

    fn encoder_grad(
        &self,
        model: &AutoencoderModel,
        enc: &ParamVector,
        dec: &ParamVector,
        x: &Tensor,
        dx: Option<&Tensor>,
    ) -> Result<ParamVector> {
        self.loss_grads(model, enc, dec, x, dx).map(|(_, g, _)| g)
    }
}

fn missing_derivatives() -> EaeError {
    EaeError::Config(
        "the dynamics objective needs per-row time derivatives alongside the inputs".into(),
    )
}

/// Shared trainer configuration. `ensemble_size` and `max_outer_iterations`
/// drive the entropic trainer; `epochs` drives the baselines; everything
/// else is common.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner sampler steps per outer iteration (the ensemble size M).
    pub ensemble_size: usize,
    pub minibatch_size: usize,
    /// Outer loop stops early once the averaged decoder gradient norm falls
    /// to this value or below. The default of zero never triggers.
    #[serde(default)]
    pub grad_tolerance: f64,
    pub max_outer_iterations: usize,
    /// Epoch budget for the baseline trainers (unused by the entropic
    /// trainer).
    #[serde(default)]
    pub epochs: usize,
    pub learning_rate: f64,
    pub objective: ObjectiveSpec,
    pub thermostat: ThermostatConfig,
    /// Leading inner steps of every outer iteration whose samples and
    /// gradients are discarded rather than stored (an ablation knob; the
    /// default of zero stores every step).
    #[serde(default)]
    pub burn_in_discard: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    fn validate_common(&self, n_rows: usize) -> Result<()> {
        if n_rows == 0 {
            return Err(EaeError::InsufficientData("empty training set".into()));
        }
        if self.minibatch_size == 0 {
            return Err(EaeError::Config("minibatch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EaeError::Config("learning rate must be positive".into()));
        }
        if !(self.grad_tolerance.is_finite() && self.grad_tolerance >= 0.0) {
            return Err(EaeError::Config(
                "gradient tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn validate_entropic(&self, n_rows: usize) -> Result<()> {
        self.validate_common(n_rows)?;
        self.thermostat.validate()?;
        if self.ensemble_size == 0 {
            return Err(EaeError::Config("ensemble size must be positive".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(EaeError::Config(
                "outer iteration budget must be positive".into(),
            ));
        }
        if self.burn_in_discard >= self.ensemble_size {
            return Err(EaeError::Config(format!(
                "burn-in discard {} leaves no stored samples out of {}",
                self.burn_in_discard, self.ensemble_size
            )));
        }
        if let ObjectiveSpec::Dynamics { library, .. } = &self.objective {
            let p = library.len();
            let tail = n_rows % self.minibatch_size;
            if self.minibatch_size.min(n_rows) < p || (tail != 0 && tail < p) {
                return Err(EaeError::Config(format!(
                    "every minibatch must have at least {p} rows to fit the dynamics library \
                     (batch size {}, {} rows)",
                    self.minibatch_size, n_rows
                )));
            }
        }
        Ok(())
    }

    fn validate_baseline(&self, n_rows: usize) -> Result<()> {
        self.validate_common(n_rows)?;
        if self.epochs == 0 {
            return Err(EaeError::Config(
                "baseline training needs a positive epoch count".into(),
            ));
        }
        match &self.objective {
            ObjectiveSpec::Reconstruction(_) => Ok(()),
            ObjectiveSpec::Dynamics { .. } => Err(EaeError::Config(
                "baseline trainers only support the reconstruction objective".into(),
            )),
        }
    }

    fn reconstruction_kind(&self) -> Result<LossKind> {
        match &self.objective {
            ObjectiveSpec::Reconstruction(kind) => Ok(*kind),
            ObjectiveSpec::Dynamics { .. } => Err(EaeError::Config(
                "baseline trainers only support the reconstruction objective".into(),
            )),
        }
    }
}

/// Independent generator streams derived from the run seed. The trainers
/// use streams 1 through 4 internally; callers carving out their own
/// streams should start at 10.
pub fn derived_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_DECODER_INIT: u64 = 2;
const STREAM_MINIBATCH: u64 = 3;
const STREAM_VAE_NOISE: u64 = 4;

/// Epoch-shuffled minibatch index stream: a fresh seeded permutation per
/// epoch, consumed in contiguous slices; the final slice of an epoch may be
/// shorter.
struct MinibatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl MinibatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> MinibatchStream {
        let mut s = MinibatchStream {
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let slice = &self.order[self.cursor..end];
        self.cursor = end;
        slice
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.width();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), w], data).expect("gathered rows stay finite")
}

fn gather_batch(data: &TrainSet, idx: &[usize]) -> (Tensor, Option<Tensor>) {
    (
        gather_rows(data.inputs, idx),
        data.time_derivatives.map(|d| gather_rows(d, idx)),
    )
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

/// Encoder parameter samples from one outer iteration, stored in parallel
/// with the decoder gradient evaluated at each sample.
#[derive(Debug, Clone, Default)]
pub struct EncoderEnsemble {
    pub members: Vec<ParamVector>,
    pub decoder_gradients: Vec<ParamVector>,
}

impl EncoderEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != self.decoder_gradients.len() {
            return Err(EaeError::Shape(format!(
                "{} encoder samples but {} stored decoder gradients",
                self.members.len(),
                self.decoder_gradients.len()
            )));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.len() != self.members[0].len() || !m.is_finite() {
                return Err(EaeError::Shape(format!(
                    "ensemble member {i} is malformed"
                )));
            }
        }
        for (i, g) in self.decoder_gradients.iter().enumerate() {
            if g.len() != self.decoder_gradients[0].len() || !g.is_finite() {
                return Err(EaeError::Shape(format!(
                    "stored decoder gradient {i} is malformed"
                )));
            }
        }
        Ok(())
    }

    /// Persist to the shared container format.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let member_len = self.members.first().map_or(0, ParamVector::len);
        let grad_len = self.decoder_gradients.first().map_or(0, ParamVector::len);
        let header = serde_json::json!({
            "format": "encoder-ensemble",
            "version": 1,
            "members": self.members.len(),
            "member_len": member_len,
            "gradient_len": grad_len,
        });
        let mut payload = Vec::with_capacity(self.members.len() * (member_len + grad_len));
        for m in &self.members {
            payload.extend_from_slice(m.as_slice());
        }
        for g in &self.decoder_gradients {
            payload.extend_from_slice(g.as_slice());
        }
        crate::io::write_container(path, &header.to_string(), &payload)
    }

    pub fn load(path: &Path) -> Result<EncoderEnsemble> {
        let (header, payload) = crate::io::read_container(path)?;
        let h: serde_json::Value = serde_json::from_str(&header)?;
        let bad = |reason: &str| EaeError::Format {
            path: path.display().to_string(),
            offset: 4,
            reason: reason.into(),
        };
        if h["format"] != "encoder-ensemble" {
            return Err(bad("not an encoder-ensemble container"));
        }
        let n = h["members"].as_u64().ok_or_else(|| bad("missing member count"))? as usize;
        let member_len =
            h["member_len"].as_u64().ok_or_else(|| bad("missing member length"))? as usize;
        let grad_len =
            h["gradient_len"].as_u64().ok_or_else(|| bad("missing gradient length"))? as usize;
        if payload.len() != n * (member_len + grad_len) {
            return Err(bad("payload length does not match the header"));
        }
        let mut members = Vec::with_capacity(n);
        let mut gradients = Vec::with_capacity(n);
        for i in 0..n {
            members.push(ParamVector::new(
                payload[i * member_len..(i + 1) * member_len].to_vec(),
            ));
        }
        let base = n * member_len;
        for i in 0..n {
            gradients.push(ParamVector::new(
                payload[base + i * grad_len..base + (i + 1) * grad_len].to_vec(),
            ));
        }
        let ensemble = EncoderEnsemble {
            members,
            decoder_gradients: gradients,
        };
        ensemble.validate()?;
        Ok(ensemble)
    }
}

/// Ensemble average of the stored decoder gradients — the free-energy
/// descent direction.
pub fn decoder_grad_estimate(ensemble: &EncoderEnsemble) -> Result<ParamVector> {
    ensemble.validate()?;
    if ensemble.decoder_gradients.is_empty() {
        return Err(EaeError::InsufficientData(
            "cannot average an empty gradient ensemble".into(),
        ));
    }
    let mut mean = ParamVector::zeros(ensemble.decoder_gradients[0].len());
    let w = 1.0 / ensemble.decoder_gradients.len() as f64;
    for g in &ensemble.decoder_gradients {
        mean.add_scaled(g, w);
    }
    Ok(mean)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// How a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The averaged decoder gradient norm reached the tolerance.
    Converged,
    /// The iteration budget ran out (the default tolerance of zero always
    /// lands here; this is a flag, not an error).
    MaxIterations,
    /// A non-finite loss or state appeared; the run aborted and the returned
    /// parameters are the last values from before the failing iteration.
    NonFinite { outer: usize, inner: usize },
}

/// Per-outer-iteration record of the entropic trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterIterationRecord {
    /// Minibatch loss at each inner step, evaluated at the encoder sample
    /// before it moves.
    pub member_losses: Vec<f64>,
    /// Full-data loss after this iteration's decoder update.
    pub post_update_loss: f64,
    /// Norm of the averaged decoder gradient used for the update.
    pub grad_norm: f64,
}

/// Complete record of an entropic training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outer: Vec<OuterIterationRecord>,
    pub termination: Termination,
    pub rng_seed: u64,
    /// Elapsed time; informational only, never part of serialized artifacts.
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// One CSV row per inner step:
    /// `outer_iter,inner_iter,member_loss,post_update_loss,grad_norm`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "outer_iter,inner_iter,member_loss,post_update_loss,grad_norm")?;
        for (k, rec) in self.outer.iter().enumerate() {
            for (i, loss) in rec.member_losses.iter().enumerate() {
                writeln!(
                    w,
                    "{k},{i},{loss},{},{}",
                    rec.post_update_loss, rec.grad_norm
                )?;
            }
        }
        Ok(())
    }

    /// `true` unless the run converged, in which case the final averaged
    /// gradient norm is guaranteed to be at or below the tolerance.
    pub fn final_grad_norm(&self) -> Option<f64> {
        self.outer.last().map(|r| r.grad_norm)
    }
}

// ---------------------------------------------------------------------------
// Entropic trainer
// ---------------------------------------------------------------------------

/// Result of [`eae_train`]: the trained decoder, the final encoder position
/// of the sampler, the last completed outer iteration's ensemble, and the
/// training report.
#[derive(Debug, Clone)]
pub struct EaeOutput {
    pub decoder: ParamVector,
    pub encoder: ParamVector,
    pub ensemble: EncoderEnsemble,
    pub report: TrainReport,
}

/// Two-loop entropic training.
///
/// Outer iteration `k` holds the decoder fixed and runs `ensemble_size`
/// thermostatted sampler steps over the encoder parameters, each on a fresh
/// minibatch; before each step the current encoder sample and the decoder
/// gradient at that sample are stored. The decoder then takes one Adam step
/// along the average of the stored gradients. The loop ends when that
/// average's norm reaches `grad_tolerance` (flag `Converged`) or after
/// `max_outer_iterations` (flag `MaxIterations`). A non-finite loss aborts
/// the run, returning the parameters from before the failing iteration with
/// flag `NonFinite`.
pub fn eae_train(
    model: &AutoencoderModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<EaeOutput> {
    cfg.validate_entropic(data.inputs.rows())?;
    if cfg.objective.requires_derivatives() && data.time_derivatives.is_none() {
        return Err(missing_derivatives());
    }
    if data.inputs.width() != model.encoder.input_width() {
        return Err(EaeError::Shape(format!(
            "training rows have width {} but the encoder consumes {}",
            data.inputs.width(),
            model.encoder.input_width()
        )));
    }
    let started = std::time::Instant::now();
    let enc0 = init_params(&model.encoder, derived_seed(cfg.rng_seed, STREAM_ENCODER_INIT));
    let mut dec_params = init_params(&model.decoder, derived_seed(cfg.rng_seed, STREAM_DECODER_INIT));
    let mut stream = MinibatchStream::new(
        data.inputs.rows(),
        cfg.minibatch_size,
        derived_seed(cfg.rng_seed, STREAM_MINIBATCH),
    );
    let mut state = init_state(enc0, &cfg.thermostat)?;
    let mut adam = Adam::new(cfg.learning_rate, dec_params.len());
    let mut ensemble = EncoderEnsemble::default();
    let mut records: Vec<OuterIterationRecord> = Vec::new();
    let mut termination = Termination::MaxIterations;

    'outer: for k in 0..cfg.max_outer_iterations {
        let dec_before = dec_params.clone();
        let mut members = Vec::with_capacity(cfg.ensemble_size - cfg.burn_in_discard);
        let mut gradients = Vec::with_capacity(cfg.ensemble_size - cfg.burn_in_discard);
        let mut member_losses = Vec::with_capacity(cfg.ensemble_size);
        for i in 0..cfg.ensemble_size {
            let idx = stream.next_batch().to_vec();
            let (x, dx) = gather_batch(data, &idx);
            // Sample and gradient are taken before the encoder moves.
            let (loss, _, dec_grad) = match cfg.objective.loss_grads(
                model,
                &state.positions,
                &dec_params,
                &x,
                dx.as_ref(),
            ) {
                Ok(v) => v,
                Err(EaeError::NonFinite { .. }) => {
                    termination = Termination::NonFinite { outer: k, inner: i };
                    dec_params = dec_before;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            member_losses.push(loss);
            if i >= cfg.burn_in_discard {
                members.push(state.positions.clone());
                gradients.push(dec_grad);
            }
            let moved = step(
                &mut state,
                |phi| cfg.objective.encoder_grad(model, phi, &dec_params, &x, dx.as_ref()),
                &cfg.thermostat,
            );
            match moved {
                Ok(()) => {}
                Err(EaeError::NonFinite { .. }) => {
                    termination = Termination::NonFinite { outer: k, inner: i };
                    dec_params = dec_before;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let new_ensemble = EncoderEnsemble {
            members,
            decoder_gradients: gradients,
        };
        let grad_mean = decoder_grad_estimate(&new_ensemble)?;
        let grad_norm = grad_mean.norm();
        adam.update(&mut dec_params, &grad_mean);
        let post_update_loss = match cfg.objective.loss(
            model,
            &state.positions,
            &dec_params,
            data.inputs,
            data.time_derivatives,
        ) {
            Ok(v) => v,
            Err(EaeError::NonFinite { .. }) => {
                termination = Termination::NonFinite {
                    outer: k,
                    inner: cfg.ensemble_size,
                };
                dec_params = dec_before;
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        records.push(OuterIterationRecord {
            member_losses,
            post_update_loss,
            grad_norm,
        });
        ensemble = new_ensemble;
        if grad_norm <= cfg.grad_tolerance {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(EaeOutput {
        decoder: dec_params,
        encoder: state.positions.clone(),
        ensemble,
        report: TrainReport {
            outer: records,
            termination,
            rng_seed: cfg.rng_seed,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

// ---------------------------------------------------------------------------
// Latent sampling
// ---------------------------------------------------------------------------

/// Latent codes of a query batch under every ensemble member, indexed
/// `(member, query, latent dimension)`.
#[derive(Debug, Clone)]
pub struct LatentEnsemble {
    n_members: usize,
    n_queries: usize,
    n_z: usize,
    data: Vec<f64>,
}

impl LatentEnsemble {
    /// Assemble an ensemble from per-member latent tensors (each
    /// `n_queries x n_z`, all the same shape). Lets callers feed latents
    /// that came from a source other than the entropic trainer — for
    /// example a single deterministic or variational encoder — through the
    /// ensemble-based diagnostics.
    pub fn from_members(members: &[Tensor]) -> Result<LatentEnsemble> {
        let first = members.first().ok_or_else(|| {
            EaeError::InsufficientData("latent ensemble needs at least one member".into())
        })?;
        let mut data = Vec::with_capacity(members.len() * first.data().len());
        for m in members {
            if m.shape() != first.shape() {
                return Err(EaeError::Shape(
                    "latent ensemble members have mixed shapes".into(),
                ));
            }
            data.extend_from_slice(m.data());
        }
        Ok(LatentEnsemble {
            n_members: members.len(),
            n_queries: first.rows(),
            n_z: first.width(),
            data,
        })
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn latent(&self, member: usize, query: usize) -> &[f64] {
        let start = (member * self.n_queries + query) * self.n_z;
        &self.data[start..start + self.n_z]
    }

    /// All codes of one member as a `(n_queries, n_z)` tensor.
    pub fn member_rows(&self, member: usize) -> Tensor {
        let start = member * self.n_queries * self.n_z;
        Tensor::new(
            vec![self.n_queries, self.n_z],
            self.data[start..start + self.n_queries * self.n_z].to_vec(),
        )
        .expect("latent codes are finite")
    }

    /// Every `(member, query)` code as one flattened row-major tensor.
    pub fn flattened_rows(&self) -> Tensor {
        Tensor::new(
            vec![self.n_members * self.n_queries, self.n_z],
            self.data.clone(),
        )
        .expect("latent codes are finite")
    }

    /// CSV rows `member_index,query_index,z_1,...,z_n`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::from("member_index,query_index");
        for d in 1..=self.n_z {
            header.push_str(&format!(",z_{d}"));
        }
        writeln!(w, "{header}")?;
        for m in 0..self.n_members {
            for q in 0..self.n_queries {
                let mut row = format!("{m},{q}");
                for v in self.latent(m, q) {
                    row.push_str(&format!(",{v}"));
                }
                writeln!(w, "{row}")?;
            }
        }
        Ok(())
    }
}

/// Encode a query batch with every stored encoder sample.
pub fn eae_sample_latents(
    model: &AutoencoderModel,
    ensemble: &EncoderEnsemble,
    queries: &Tensor,
) -> Result<LatentEnsemble> {
    ensemble.validate()?;
    if ensemble.is_empty() {
        return Err(EaeError::InsufficientData(
            "cannot sample latents from an empty ensemble".into(),
        ));
    }
    let n_z = model.latent_dim;
    let n_queries = queries.rows();
    let mut data = Vec::with_capacity(ensemble.len() * n_queries * n_z);
    for member in &ensemble.members {
        let codes = model.encode(member, queries)?;
        data.extend_from_slice(codes.data());
    }
    Ok(LatentEnsemble {
        n_members: ensemble.len(),
        n_queries,
        n_z,
        data,
    })
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Result of a baseline run: trained parameters and the mean minibatch loss
/// of every epoch.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub encoder: ParamVector,
    pub decoder: ParamVector,
    pub epoch_losses: Vec<f64>,
    pub termination: Termination,
}

fn baseline_loop<F>(
    n_rows: usize,
    cfg: &TrainConfig,
    enc_params: &mut ParamVector,
    dec_params: &mut ParamVector,
    mut step_fn: F,
) -> Result<(Vec<f64>, Termination)>
where
    F: FnMut(&[usize], &ParamVector, &ParamVector) -> Result<(f64, ParamVector, ParamVector)>,
{
    let mut stream = MinibatchStream::new(
        n_rows,
        cfg.minibatch_size,
        derived_seed(cfg.rng_seed, STREAM_MINIBATCH),
    );
    let batches_per_epoch = n_rows.div_ceil(cfg.minibatch_size.min(n_rows));
    let mut adam_enc = Adam::new(cfg.learning_rate, enc_params.len());
    let mut adam_dec = Adam::new(cfg.learning_rate, dec_params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for b in 0..batches_per_epoch {
            let idx = stream.next_batch().to_vec();
            match step_fn(&idx, enc_params, dec_params) {
                Ok((loss, g_enc, g_dec)) => {
                    total += loss;
                    adam_enc.update(enc_params, &g_enc);
                    adam_dec.update(dec_params, &g_dec);
                }
                Err(EaeError::NonFinite { .. }) => {
                    return Ok((epoch_losses, Termination::NonFinite { outer: epoch, inner: b }));
                }
                Err(e) => return Err(e),
            }
        }
        epoch_losses.push(total / batches_per_epoch as f64);
    }
    Ok((epoch_losses, Termination::MaxIterations))
}

/// Vanilla autoencoder baseline: joint minibatch Adam on the reconstruction
/// loss for `epochs` passes over the data.
pub fn ae_train(
    model: &AutoencoderModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<BaselineOutput> {
    cfg.validate_baseline(data.inputs.rows())?;
    let kind = cfg.reconstruction_kind()?;
    let mut enc_params =
        init_params(&model.encoder, derived_seed(cfg.rng_seed, STREAM_ENCODER_INIT));
    let mut dec_params =
        init_params(&model.decoder, derived_seed(cfg.rng_seed, STREAM_DECODER_INIT));
    let inputs = data.inputs;
    let (epoch_losses, termination) = baseline_loop(
        inputs.rows(),
        cfg,
        &mut enc_params,
        &mut dec_params,
        |idx, enc, dec| {
            let x = gather_rows(inputs, idx);
            recon_loss_grads(model, enc, dec, &x, kind)
        },
    )?;
    Ok(BaselineOutput {
        encoder: enc_params,
        decoder: dec_params,
        epoch_losses,
        termination,
    })
}

/// Variational baseline: joint minibatch Adam on the negative evidence lower
/// bound, one standard-normal latent draw per datum per step.
pub fn vae_train(model: &VaeModel, data: &TrainSet, cfg: &TrainConfig) -> Result<BaselineOutput> {
    cfg.validate_baseline(data.inputs.rows())?;
    let kind = cfg.reconstruction_kind()?;
    let mut enc_params =
        init_params(&model.encoder, derived_seed(cfg.rng_seed, STREAM_ENCODER_INIT));
    let mut dec_params =
        init_params(&model.decoder, derived_seed(cfg.rng_seed, STREAM_DECODER_INIT));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.rng_seed, STREAM_VAE_NOISE));
    let inputs = data.inputs;
    let latent = model.latent_dim;
    let (epoch_losses, termination) = baseline_loop(
        inputs.rows(),
        cfg,
        &mut enc_params,
        &mut dec_params,
        |idx, enc, dec| {
            let x = gather_rows(inputs, idx);
            let noise_vals: Vec<f64> = (0..idx.len() * latent)
                .map(|_| {
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut noise_rng)
                })
                .collect();
            let noise = Tensor::new(vec![idx.len(), latent], noise_vals)?;
            elbo_loss_grads(model, enc, dec, &x, &noise, kind)
        },
    )?;
    Ok(BaselineOutput {
        encoder: enc_params,
        decoder: dec_params,
        epoch_losses,
        termination,
    })
}
