//! Autoencoder and variational-autoencoder models, their training losses
//! with fused gradients, evaluation metrics, and checkpoint serialization.

use crate::tensor::{forward, forward_trace, vjp_from_trace, NetworkSpec, ParamVector, Tensor};
use crate::{io, EaeError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Reconstruction-term flavor. `SquaredError` reads the decoder output
/// directly; `BernoulliCrossEntropyWithSigmoid` treats the decoder output as
/// pre-sigmoid logits and fuses the sigmoid into the loss for stability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    BernoulliCrossEntropyWithSigmoid,
}

/// Deterministic encoder/decoder pair. The latent dimension is pinned by
/// both the encoder output width and the decoder input width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub latent_dim: usize,
}

impl AutoencoderModel {
    pub fn new(encoder: NetworkSpec, decoder: NetworkSpec) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        let latent_dim = encoder.output_width();
        if decoder.input_width() != latent_dim {
            return Err(EaeError::InvalidNetwork(format!(
                "encoder emits {} latents but decoder consumes {}",
                latent_dim,
                decoder.input_width()
            )));
        }
        if encoder.input_width() != decoder.output_width() {
            return Err(EaeError::InvalidNetwork(format!(
                "encoder input width {} does not match decoder output width {}",
                encoder.input_width(),
                decoder.output_width()
            )));
        }
        Ok(AutoencoderModel {
            encoder,
            decoder,
            latent_dim,
        })
    }

    pub fn encode(&self, enc_params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        forward(&self.encoder, enc_params, x)
    }

    pub fn decode(&self, dec_params: &ParamVector, z: &Tensor) -> Result<Tensor> {
        forward(&self.decoder, dec_params, z)
    }
}

/// Gaussian-posterior encoder/decoder pair: the encoder emits a mean block
/// followed by a log-variance block, each `latent_dim` wide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub latent_dim: usize,
}

impl VaeModel {
    pub fn new(encoder: NetworkSpec, decoder: NetworkSpec) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        let latent_dim = decoder.input_width();
        if encoder.output_width() != 2 * latent_dim {
            return Err(EaeError::InvalidNetwork(format!(
                "encoder must emit 2 x {} values (mean and log-variance), emits {}",
                latent_dim,
                encoder.output_width()
            )));
        }
        if encoder.input_width() != decoder.output_width() {
            return Err(EaeError::InvalidNetwork(format!(
                "encoder input width {} does not match decoder output width {}",
                encoder.input_width(),
                decoder.output_width()
            )));
        }
        Ok(VaeModel {
            encoder,
            decoder,
            latent_dim,
        })
    }

    /// Posterior means for a batch (the deterministic encoding used by
    /// diagnostics and evaluation).
    pub fn encode_means(&self, enc_params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let out = forward(&self.encoder, enc_params, x)?;
        let n_z = self.latent_dim;
        let rows = out.rows();
        let mut means = Tensor::zeros(vec![rows, n_z]);
        for b in 0..rows {
            means.data_mut()[b * n_z..(b + 1) * n_z].copy_from_slice(&out.row(b)[..n_z]);
        }
        Ok(means)
    }
}

fn check_targets_in_unit_interval(batch: &Tensor) -> Result<()> {
    if batch.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(EaeError::Domain(
            "cross-entropy targets must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Numerically stable `log(1 + exp(-|l|)) + max(l, 0) - l*y`:
/// cross-entropy between target `y` and `sigmoid(l)`.
fn bce_with_logits(l: f64, y: f64) -> f64 {
    l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss between a batch and its reconstruction (already decoded).
/// Squared error averages over rows and pixels; cross-entropy sums over
/// pixels and averages over rows.
fn output_loss(batch: &Tensor, recon: &Tensor, kind: LossKind) -> Result<f64> {
    let rows = batch.rows() as f64;
    match kind {
        LossKind::SquaredError => {
            let n = batch.data().len() as f64;
            Ok(batch
                .data()
                .iter()
                .zip(recon.data())
                .map(|(y, r)| (y - r) * (y - r))
                .sum::<f64>()
                / n)
        }
        LossKind::BernoulliCrossEntropyWithSigmoid => {
            check_targets_in_unit_interval(batch)?;
            Ok(batch
                .data()
                .iter()
                .zip(recon.data())
                .map(|(&y, &l)| bce_with_logits(l, y))
                .sum::<f64>()
                / rows)
        }
    }
}

/// Cotangent of the decoder output for `output_loss`.
fn output_loss_cotangent(batch: &Tensor, recon: &Tensor, kind: LossKind) -> Tensor {
    let rows = batch.rows() as f64;
    let mut cot = recon.clone();
    match kind {
        LossKind::SquaredError => {
            let n = batch.data().len() as f64;
            for (c, y) in cot.data_mut().iter_mut().zip(batch.data()) {
                *c = 2.0 * (*c - y) / n;
            }
        }
        LossKind::BernoulliCrossEntropyWithSigmoid => {
            for (c, y) in cot.data_mut().iter_mut().zip(batch.data()) {
                *c = (sigmoid(*c) - y) / rows;
            }
        }
    }
    cot
}

/// Reconstruction loss of a deterministic autoencoder on a batch.
pub fn recon_loss(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    kind: LossKind,
) -> Result<f64> {
    let z = model.encode(enc_params, batch)?;
    let recon = model.decode(dec_params, &z)?;
    let loss = output_loss(batch, &recon, kind)?;
    if !loss.is_finite() {
        return Err(EaeError::NonFinite {
            context: "reconstruction loss".into(),
            step: 0,
        });
    }
    Ok(loss)
}

/// Reconstruction loss plus its gradients with respect to encoder and
/// decoder parameters, in one fused forward/backward pass.
pub fn recon_loss_grads(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    kind: LossKind,
) -> Result<(f64, ParamVector, ParamVector)> {
    let enc_trace = forward_trace(&model.encoder, enc_params, batch)?;
    let dec_trace = forward_trace(&model.decoder, dec_params, &enc_trace.output)?;
    let loss = output_loss(batch, &dec_trace.output, kind)?;
    if !loss.is_finite() {
        return Err(EaeError::NonFinite {
            context: "reconstruction loss".into(),
            step: 0,
        });
    }
    let cot = output_loss_cotangent(batch, &dec_trace.output, kind);
    let (dec_grad, z_cot) = vjp_from_trace(&model.decoder, dec_params, &dec_trace, &cot)?;
    let (enc_grad, _) = vjp_from_trace(&model.encoder, enc_params, &enc_trace, &z_cot)?;
    Ok((loss, enc_grad, dec_grad))
}

/// Per-pixel mean squared error on held-out data. Models trained with the
/// fused-sigmoid cross-entropy emit logits, so their outputs are passed
/// through the sigmoid before the residual is taken.
pub fn test_mse(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    data: &Tensor,
    kind: LossKind,
) -> Result<f64> {
    let z = model.encode(enc_params, data)?;
    let mut recon = model.decode(dec_params, &z)?;
    if kind == LossKind::BernoulliCrossEntropyWithSigmoid {
        for v in recon.data_mut() {
            *v = sigmoid(*v);
        }
    }
    let n = data.data().len() as f64;
    Ok(data
        .data()
        .iter()
        .zip(recon.data())
        .map(|(y, r)| (y - r) * (y - r))
        .sum::<f64>()
        / n)
}

/// `test_mse` for the variational model, reconstructing from posterior means.
pub fn vae_test_mse(
    model: &VaeModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    data: &Tensor,
    kind: LossKind,
) -> Result<f64> {
    let means = model.encode_means(enc_params, data)?;
    let mut recon = forward(&model.decoder, dec_params, &means)?;
    if kind == LossKind::BernoulliCrossEntropyWithSigmoid {
        for v in recon.data_mut() {
            *v = sigmoid(*v);
        }
    }
    let n = data.data().len() as f64;
    Ok(data
        .data()
        .iter()
        .zip(recon.data())
        .map(|(y, r)| (y - r) * (y - r))
        .sum::<f64>()
        / n)
}

/// Draw a latent sample from the diagonal-Gaussian posterior:
/// `z = mean + exp(logvar / 2) * noise`, elementwise.
pub fn reparameterize(mean: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mean.shape() != logvar.shape() || mean.shape() != noise.shape() {
        return Err(EaeError::Shape(
            "mean, log-variance, and noise must share a shape".into(),
        ));
    }
    let mut z = mean.clone();
    for ((zv, lv), nv) in z.data_mut().iter_mut().zip(logvar.data()).zip(noise.data()) {
        let sd = (lv * 0.5).exp();
        if !sd.is_finite() {
            return Err(EaeError::NonFinite {
                context: "reparameterization standard deviation".into(),
                step: 0,
            });
        }
        *zv += sd * nv;
    }
    Ok(z)
}

/// Negative evidence lower bound for one Monte-Carlo latent draw:
/// reconstruction term (per `kind`, same conventions as `recon_loss`) plus
/// the analytic Gaussian divergence `0.5 * sum(mu^2 + sigma^2 - 1 - log
/// sigma^2)` per row, batch-meaned.
pub fn elbo_loss(
    model: &VaeModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    noise: &Tensor,
    kind: LossKind,
) -> Result<f64> {
    elbo_loss_impl(model, enc_params, dec_params, batch, noise, kind, false)
        .map(|(loss, _, _)| loss)
}

/// `elbo_loss` plus gradients with respect to encoder and decoder
/// parameters.
pub fn elbo_loss_grads(
    model: &VaeModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    noise: &Tensor,
    kind: LossKind,
) -> Result<(f64, ParamVector, ParamVector)> {
    let (loss, enc, dec) =
        elbo_loss_impl(model, enc_params, dec_params, batch, noise, kind, true)?;
    Ok((loss, enc.unwrap(), dec.unwrap()))
}

fn elbo_loss_impl(
    model: &VaeModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    noise: &Tensor,
    kind: LossKind,
    with_grads: bool,
) -> Result<(f64, Option<ParamVector>, Option<ParamVector>)> {
    let n_z = model.latent_dim;
    let rows = batch.rows();
    if noise.rows() != rows || noise.width() != n_z {
        return Err(EaeError::Shape(format!(
            "noise must be {} x {}, got {:?}",
            rows,
            n_z,
            noise.shape()
        )));
    }
    let enc_trace = forward_trace(&model.encoder, enc_params, batch)?;
    let enc_out = &enc_trace.output;

    // Split encoder output into mean and log-variance blocks, sample z.
    let mut z = Tensor::zeros(vec![rows, n_z]);
    let mut kl = 0.0;
    for b in 0..rows {
        let row = enc_out.row(b);
        let (mu, logvar) = row.split_at(n_z);
        for d in 0..n_z {
            let var = logvar[d].exp();
            if !var.is_finite() {
                return Err(EaeError::NonFinite {
                    context: "posterior variance".into(),
                    step: 0,
                });
            }
            kl += 0.5 * (mu[d] * mu[d] + var - 1.0 - logvar[d]);
            z.data_mut()[b * n_z + d] = mu[d] + var.sqrt() * noise.row(b)[d];
        }
    }
    kl /= rows as f64;

    let dec_trace = forward_trace(&model.decoder, dec_params, &z)?;
    let recon_term = output_loss(batch, &dec_trace.output, kind)?;
    let loss = recon_term + kl;
    if !loss.is_finite() {
        return Err(EaeError::NonFinite {
            context: "evidence-bound loss".into(),
            step: 0,
        });
    }
    if !with_grads {
        return Ok((loss, None, None));
    }

    let cot = output_loss_cotangent(batch, &dec_trace.output, kind);
    let (dec_grad, z_cot) = vjp_from_trace(&model.decoder, dec_params, &dec_trace, &cot)?;

    // Cotangent of the encoder output: reconstruction path through the
    // sampled z plus the analytic divergence term.
    let inv_rows = 1.0 / rows as f64;
    let mut enc_cot = Tensor::zeros(vec![rows, 2 * n_z]);
    for b in 0..rows {
        let row = enc_out.row(b);
        let (mu, logvar) = row.split_at(n_z);
        for d in 0..n_z {
            let zc = z_cot.row(b)[d];
            let var = logvar[d].exp();
            let dmu = zc + mu[d] * inv_rows;
            let dlogvar = zc * 0.5 * var.sqrt() * noise.row(b)[d] + 0.5 * (var - 1.0) * inv_rows;
            enc_cot.data_mut()[b * 2 * n_z + d] = dmu;
            enc_cot.data_mut()[b * 2 * n_z + n_z + d] = dlogvar;
        }
    }
    let (enc_grad, _) = vjp_from_trace(&model.encoder, enc_params, &enc_trace, &enc_cot)?;
    Ok((loss, Some(enc_grad), Some(dec_grad)))
}

/// Which model family a checkpoint stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Autoencoder,
    Vae,
}

/// A trained model snapshot: architecture, loss flavor, seed, and both
/// parameter vectors. Serialized as a JSON header plus a raw
/// little-endian float payload; round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub latent_dim: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub encoder_params: ParamVector,
    pub decoder_params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    kind: ModelKind,
    encoder: NetworkSpec,
    decoder: NetworkSpec,
    latent_dim: usize,
    loss: LossKind,
    seed: u64,
    encoder_len: usize,
    decoder_len: usize,
}

const CHECKPOINT_FORMAT: &str = "model-checkpoint";

impl Checkpoint {
    pub fn autoencoder(
        model: &AutoencoderModel,
        loss: LossKind,
        seed: u64,
        enc_params: ParamVector,
        dec_params: ParamVector,
    ) -> Self {
        Checkpoint {
            kind: ModelKind::Autoencoder,
            encoder: model.encoder.clone(),
            decoder: model.decoder.clone(),
            latent_dim: model.latent_dim,
            loss,
            seed,
            encoder_params: enc_params,
            decoder_params: dec_params,
        }
    }

    pub fn vae(
        model: &VaeModel,
        loss: LossKind,
        seed: u64,
        enc_params: ParamVector,
        dec_params: ParamVector,
    ) -> Self {
        Checkpoint {
            kind: ModelKind::Vae,
            encoder: model.encoder.clone(),
            decoder: model.decoder.clone(),
            latent_dim: model.latent_dim,
            loss,
            seed,
            encoder_params: enc_params,
            decoder_params: dec_params,
        }
    }

    pub fn autoencoder_model(&self) -> Result<AutoencoderModel> {
        if self.kind != ModelKind::Autoencoder {
            return Err(EaeError::Config(
                "checkpoint does not hold a deterministic autoencoder".into(),
            ));
        }
        AutoencoderModel::new(self.encoder.clone(), self.decoder.clone())
    }

    pub fn vae_model(&self) -> Result<VaeModel> {
        if self.kind != ModelKind::Vae {
            return Err(EaeError::Config(
                "checkpoint does not hold a variational autoencoder".into(),
            ));
        }
        VaeModel::new(self.encoder.clone(), self.decoder.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            kind: self.kind,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            latent_dim: self.latent_dim,
            loss: self.loss,
            seed: self.seed,
            encoder_len: self.encoder_params.len(),
            decoder_len: self.decoder_params.len(),
        };
        let mut payload =
            Vec::with_capacity(self.encoder_params.len() + self.decoder_params.len());
        payload.extend_from_slice(self.encoder_params.as_slice());
        payload.extend_from_slice(self.decoder_params.as_slice());
        io::write_container(path, &serde_json::to_string(&header)?, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header_json, payload) = io::read_container(path)?;
        let header: CheckpointHeader = serde_json::from_str(&header_json)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(EaeError::Format {
                path: path.display().to_string(),
                offset: 4,
                reason: format!("expected {CHECKPOINT_FORMAT} header, got {}", header.format),
            });
        }
        if payload.len() != header.encoder_len + header.decoder_len {
            return Err(EaeError::Format {
                path: path.display().to_string(),
                offset: 4,
                reason: format!(
                    "payload holds {} floats, header promises {}",
                    payload.len(),
                    header.encoder_len + header.decoder_len
                ),
            });
        }
        let (enc, dec) = payload.split_at(header.encoder_len);
        Ok(Checkpoint {
            kind: header.kind,
            encoder: header.encoder,
            decoder: header.decoder,
            latent_dim: header.latent_dim,
            loss: header.loss,
            seed: header.seed,
            encoder_params: ParamVector::new(enc.to_vec()),
            decoder_params: ParamVector::new(dec.to_vec()),
        })
    }
}
