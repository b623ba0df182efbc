//! Recovery of interpretable latent-space dynamics.
//!
//! Given latent codes `z` and their time derivatives, the coefficient matrix
//! `Xi` of a sparse dynamical model `dz/dt = theta(z) * Xi` is fit by linear
//! least squares over a library of candidate basis functions (polynomials and
//! sines). The module provides:
//!
//! * the basis library and its design matrix [`eval_theta`],
//! * the least-squares fit [`estimate_xi`] with a condition-number gate,
//! * a training objective [`dynamics_loss`] that combines reconstruction
//!   error with the mismatch between the decoded latent velocity field and
//!   the observed data velocity — differentiable end to end, including
//!   through the least-squares solve ([`dynamics_loss_grads`]),
//! * ensemble summaries of fitted coefficients ([`coefficient_stats`],
//!   [`coefficient_correlation`]) and a Runge–Kutta integrator for rolling
//!   the recovered model forward ([`integrate_latent_ode`]).

use serde::{Deserialize, Serialize};

use crate::error::EaeError;
use crate::networks::AutoencoderModel;
use crate::stats;
use crate::tensor::{forward_dual, jvp, vjp_dual, DualTrace, ParamVector, Tensor};
use crate::Result;

/// Coefficients whose ensemble mean and density mode both exceed this
/// magnitude are reported as significant terms of the recovered model.
pub const SIGNIFICANCE_THRESHOLD: f64 = 0.1;

/// Largest acceptable ratio between the extreme diagonal entries of the
/// triangular factor in the least-squares solve; beyond this the design
/// matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Trajectories are declared divergent once any coordinate leaves this range.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One candidate term of the dynamics library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFn {
    /// Product of coordinate powers, one exponent per latent dimension.
    Monomial(Vec<u32>),
    /// Sine of a single coordinate.
    Sin(usize),
}

impl BasisFn {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            BasisFn::Monomial(exps) => exps
                .iter()
                .zip(z)
                .map(|(&e, &v)| v.powi(e as i32))
                .product(),
            BasisFn::Sin(d) => z[*d].sin(),
        }
    }

    /// Accumulate `weight * df/dz_d` into `out[d]` for every coordinate.
    pub fn add_grad(&self, z: &[f64], weight: f64, out: &mut [f64]) {
        match self {
            BasisFn::Monomial(exps) => {
                for (d, &e) in exps.iter().enumerate() {
                    if e == 0 {
                        continue;
                    }
                    let mut term = e as f64 * z[d].powi(e as i32 - 1);
                    for (d2, &e2) in exps.iter().enumerate() {
                        if d2 != d {
                            term *= z[d2].powi(e2 as i32);
                        }
                    }
                    out[d] += weight * term;
                }
            }
            BasisFn::Sin(d) => out[*d] += weight * z[*d].cos(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            BasisFn::Monomial(exps) => {
                let parts: Vec<String> = exps
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(d, &e)| {
                        if e == 1 {
                            format!("z{}", d + 1)
                        } else {
                            format!("z{}^{}", d + 1, e)
                        }
                    })
                    .collect();
                parts.join("*")
            }
            BasisFn::Sin(d) => format!("sin(z{})", d + 1),
        }
    }

    fn validate(&self, n_z: usize) -> Result<()> {
        match self {
            BasisFn::Monomial(exps) => {
                if exps.len() != n_z {
                    return Err(EaeError::Config(format!(
                        "monomial has {} exponents for {} latent dimensions",
                        exps.len(),
                        n_z
                    )));
                }
                if exps.iter().all(|&e| e == 0) {
                    return Err(EaeError::Config(
                        "constant basis function is not allowed in the dynamics library".into(),
                    ));
                }
                Ok(())
            }
            BasisFn::Sin(d) => {
                if *d >= n_z {
                    return Err(EaeError::Config(format!(
                        "sine term indexes coordinate {} of a {}-dimensional latent",
                        d + 1,
                        n_z
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Ordered collection of basis functions over an `n_z`-dimensional latent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisLibrary {
    n_z: usize,
    functions: Vec<BasisFn>,
}

impl BasisLibrary {
    pub fn new(n_z: usize, functions: Vec<BasisFn>) -> Result<Self> {
        if n_z == 0 {
            return Err(EaeError::Config("latent dimension must be positive".into()));
        }
        if functions.is_empty() {
            return Err(EaeError::Config("dynamics library is empty".into()));
        }
        for f in &functions {
            f.validate(n_z)?;
        }
        Ok(BasisLibrary { n_z, functions })
    }

    /// All monomials of total degree 1 through `max_degree` (ordered by
    /// degree, then by descending exponent of the leading coordinates),
    /// followed by one sine per coordinate. No constant term.
    pub fn polynomials_with_sines(n_z: usize, max_degree: u32) -> Result<Self> {
        if n_z == 0 || max_degree == 0 {
            return Err(EaeError::Config(
                "library generation needs a positive latent dimension and degree".into(),
            ));
        }
        let mut functions = Vec::new();
        for degree in 1..=max_degree {
            let mut prefix = Vec::new();
            push_exponent_vectors(degree, n_z, &mut prefix, &mut functions);
        }
        for d in 0..n_z {
            functions.push(BasisFn::Sin(d));
        }
        BasisLibrary::new(n_z, functions)
    }

    /// The default library for two latent dimensions: monomials up to cubic
    /// order plus `sin(z1)` and `sin(z2)` — eleven functions in all.
    pub fn default_2d() -> Self {
        BasisLibrary::polynomials_with_sines(2, 3).expect("static library construction")
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[BasisFn] {
        &self.functions
    }

    pub fn names(&self) -> Vec<String> {
        self.functions.iter().map(BasisFn::name).collect()
    }

    fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        for (f, slot) in self.functions.iter().zip(out.iter_mut()) {
            *slot = f.eval(z);
        }
    }
}

fn push_exponent_vectors(
    remaining: u32,
    dims: usize,
    prefix: &mut Vec<u32>,
    out: &mut Vec<BasisFn>,
) {
    if dims == 1 {
        prefix.push(remaining);
        out.push(BasisFn::Monomial(prefix.clone()));
        prefix.pop();
        return;
    }
    for e in (0..=remaining).rev() {
        prefix.push(e);
        push_exponent_vectors(remaining - e, dims - 1, prefix, out);
        prefix.pop();
    }
}

/// Design matrix: row `b` holds every library function evaluated at latent
/// row `b`.
pub fn eval_theta(lib: &BasisLibrary, latents: &Tensor) -> Result<Tensor> {
    if latents.width() != lib.n_z {
        return Err(EaeError::Shape(format!(
            "latents have width {} but the library expects {}",
            latents.width(),
            lib.n_z
        )));
    }
    let p = lib.len();
    let mut data = vec![0.0; latents.rows() * p];
    for (b, chunk) in data.chunks_mut(p).enumerate() {
        lib.eval_into(latents.row(b), chunk);
    }
    Tensor::new(vec![latents.rows(), p], data)
}

// ---------------------------------------------------------------------------
// Householder least squares
// ---------------------------------------------------------------------------

/// Packed Householder QR factorization of a tall matrix, retained so both the
/// solve and the gradient of the solve can reuse the triangular factor.
struct QrLeastSquares {
    m: usize,
    n: usize,
    /// Upper triangle holds R; below the diagonal, the Householder vectors
    /// (normalized to an implicit leading 1).
    a: Vec<f64>,
    taus: Vec<f64>,
}

impl QrLeastSquares {
    fn factor(matrix: &Tensor) -> QrLeastSquares {
        let m = matrix.rows();
        let n = matrix.width();
        let mut a = matrix.data().to_vec();
        let mut taus = vec![0.0; n];
        for k in 0..n {
            let mut nrm2 = 0.0;
            for i in k..m {
                nrm2 += a[i * n + k] * a[i * n + k];
            }
            if nrm2 == 0.0 {
                continue;
            }
            let nrm = nrm2.sqrt();
            let x0 = a[k * n + k];
            let alpha = if x0 >= 0.0 { -nrm } else { nrm };
            let v0 = x0 - alpha;
            let vtv = 2.0 * (nrm2 - x0 * alpha);
            let tau = 2.0 * v0 * v0 / vtv;
            for i in k + 1..m {
                a[i * n + k] /= v0;
            }
            a[k * n + k] = alpha;
            taus[k] = tau;
            for j in k + 1..n {
                let mut s = a[k * n + j];
                for i in k + 1..m {
                    s += a[i * n + k] * a[i * n + j];
                }
                s *= tau;
                a[k * n + j] -= s;
                for i in k + 1..m {
                    a[i * n + j] -= s * a[i * n + k];
                }
            }
        }
        QrLeastSquares { m, n, a, taus }
    }

    /// Ratio of the extreme diagonal magnitudes of R — a cheap estimate of
    /// the conditioning of the normal equations' Cholesky factor.
    fn condition(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for k in 0..self.n {
            let d = self.a[k * self.n + k].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Apply the orthogonal transpose to a length-`m` vector in place.
    fn apply_qt(&self, y: &mut [f64]) {
        for k in 0..self.n {
            if self.taus[k] == 0.0 {
                continue;
            }
            let mut s = y[k];
            for i in k + 1..self.m {
                s += self.a[i * self.n + k] * y[i];
            }
            s *= self.taus[k];
            y[k] -= s;
            for i in k + 1..self.m {
                y[i] -= s * self.a[i * self.n + k];
            }
        }
    }

    /// Back substitution with R on the first `n` entries of `b`.
    fn solve_upper(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for j in i + 1..self.n {
                s -= self.a[i * self.n + j] * b[j];
            }
            b[i] = s / self.a[i * self.n + i];
        }
    }

    /// Forward substitution with R-transpose.
    fn solve_upper_transpose(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.a[j * self.n + i] * b[j];
            }
            b[i] = s / self.a[i * self.n + i];
        }
    }
}

struct XiFit {
    xi: Tensor,
    theta: Tensor,
    qr: QrLeastSquares,
}

fn fit_xi(lib: &BasisLibrary, latents: &Tensor, latent_derivs: &Tensor) -> Result<XiFit> {
    if latent_derivs.shape() != latents.shape() {
        return Err(EaeError::Shape(format!(
            "latent derivatives shape {:?} does not match latents shape {:?}",
            latent_derivs.shape(),
            latents.shape()
        )));
    }
    let p = lib.len();
    if latents.rows() < p {
        return Err(EaeError::InsufficientData(format!(
            "least squares over {} basis functions needs at least that many rows, got {}",
            p,
            latents.rows()
        )));
    }
    let theta = eval_theta(lib, latents)?;
    let qr = QrLeastSquares::factor(&theta);
    let cond = qr.condition();
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(EaeError::Singular {
            context: "latent dynamics regression".into(),
            cond,
        });
    }
    let n_z = lib.n_z;
    let mut xi = vec![0.0; p * n_z];
    let mut col = vec![0.0; latents.rows()];
    for c in 0..n_z {
        for b in 0..latents.rows() {
            col[b] = latent_derivs.row(b)[c];
        }
        qr.apply_qt(&mut col);
        qr.solve_upper(&mut col);
        for j in 0..p {
            xi[j * n_z + c] = col[j];
        }
    }
    Ok(XiFit {
        xi: Tensor::new(vec![p, n_z], xi)?,
        theta,
        qr,
    })
}

/// Least-squares coefficients `Xi` (one column per latent dimension) of the
/// model `latent_derivs ≈ theta(latents) * Xi`. Requires at least as many
/// rows as basis functions and a well-conditioned design matrix.
pub fn estimate_xi(lib: &BasisLibrary, latents: &Tensor, latent_derivs: &Tensor) -> Result<Tensor> {
    Ok(fit_xi(lib, latents, latent_derivs)?.xi)
}

// ---------------------------------------------------------------------------
// Dense helpers (row-major)
// ---------------------------------------------------------------------------

/// `a (m×k) * b (k×n)`.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// `aᵀ (m×k from a k×m? no: a is k×m) — transpose(a) * b` where `a` is
/// `k×m` and `b` is `k×n`, producing `m×n`.
fn mm_at_b(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..k {
        for i in 0..m {
            let av = a[r * m + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[r * n + j];
            }
        }
    }
    out
}

/// `a (m×k) * transpose(b)` where `b` is `n×k`, producing `m×n`.
fn mm_a_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] = s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dynamics-aware training objective
// ---------------------------------------------------------------------------

/// Relative weights of the reconstruction and velocity-matching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl DynamicsWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(EaeError::Config("dynamics weights must be finite".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(EaeError::Config(
                "dynamics weights must be non-negative".into(),
            ));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(EaeError::Config(
                "at least one dynamics weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct DynamicsForward {
    loss: f64,
    enc_dual: DualTrace,
    dec_dual: DualTrace,
    fit: XiFit,
    /// Predicted latent velocities `theta * Xi`, row per batch element.
    v: Tensor,
}

fn dynamics_forward(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    batch_derivs: &Tensor,
    lib: &BasisLibrary,
    weights: &DynamicsWeights,
) -> Result<DynamicsForward> {
    weights.validate()?;
    if lib.n_z() != model.latent_dim {
        return Err(EaeError::Config(format!(
            "library covers {} latent dimensions but the model has {}",
            lib.n_z(),
            model.latent_dim
        )));
    }
    let enc_dual = forward_dual(&model.encoder, enc_params, batch, batch_derivs)?;
    let fit = fit_xi(lib, &enc_dual.primal_out, &enc_dual.tangent_out)?;
    let b = batch.rows();
    let v = Tensor::new(
        vec![b, lib.n_z()],
        mm(fit.theta.data(), b, lib.len(), fit.xi.data(), lib.n_z()),
    )?;
    let dec_dual = forward_dual(&model.decoder, dec_params, &enc_dual.primal_out, &v)?;
    let n_el = (b * batch.width()) as f64;
    let mut recon_term = 0.0;
    for (&xh, &x) in dec_dual.primal_out.data().iter().zip(batch.data()) {
        recon_term += (xh - x) * (xh - x);
    }
    let mut deriv_term = 0.0;
    for (&vh, &vx) in dec_dual.tangent_out.data().iter().zip(batch_derivs.data()) {
        deriv_term += (vh - vx) * (vh - vx);
    }
    let loss = weights.lambda1 * recon_term / n_el + weights.lambda2 * deriv_term / n_el;
    if !loss.is_finite() {
        return Err(EaeError::NonFinite {
            context: "dynamics loss".into(),
            step: 0,
        });
    }
    Ok(DynamicsForward {
        loss,
        enc_dual,
        dec_dual,
        fit,
        v,
    })
}

/// Dynamics-aware objective: `lambda1 * mean((x - x_hat)^2) + lambda2 *
/// mean((dx/dt - dx_hat/dt)^2)`, where the predicted data velocity pushes the
/// fitted latent velocity field through the decoder Jacobian. The coefficient
/// matrix is re-fit on every call from the batch itself.
pub fn dynamics_loss(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    batch_derivs: &Tensor,
    lib: &BasisLibrary,
    weights: &DynamicsWeights,
) -> Result<f64> {
    Ok(dynamics_forward(model, enc_params, dec_params, batch, batch_derivs, lib, weights)?.loss)
}

/// [`dynamics_loss`] together with its gradients with respect to encoder and
/// decoder parameters. Differentiation passes through the batchwise
/// least-squares fit of the coefficient matrix.
pub fn dynamics_loss_grads(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    batch_derivs: &Tensor,
    lib: &BasisLibrary,
    weights: &DynamicsWeights,
) -> Result<(f64, ParamVector, ParamVector)> {
    let fwd = dynamics_forward(model, enc_params, dec_params, batch, batch_derivs, lib, weights)?;
    let b = batch.rows();
    let p = lib.len();
    let n_z = lib.n_z();
    let n_el = (b * batch.width()) as f64;

    let mut u_dec = fwd.dec_dual.primal_out.clone();
    for (uh, &x) in u_dec.data_mut().iter_mut().zip(batch.data()) {
        *uh = 2.0 * weights.lambda1 * (*uh - x) / n_el;
    }
    let mut v_dec = fwd.dec_dual.tangent_out.clone();
    for (vh, &vx) in v_dec.data_mut().iter_mut().zip(batch_derivs.data()) {
        *vh = 2.0 * weights.lambda2 * (*vh - vx) / n_el;
    }
    let (dec_grad, z_cot_dec, v_cot) =
        vjp_dual(&model.decoder, dec_params, &fwd.dec_dual, &u_dec, &v_dec)?;

    // Product v = theta * xi.
    let mut theta_bar = mm_a_bt(v_cot.data(), b, n_z, fwd.fit.xi.data(), p);
    let xi_bar = mm_at_b(fwd.fit.theta.data(), b, p, v_cot.data(), n_z);

    // Least-squares fit xi = argmin |theta*xi - zdot|: propagate the
    // cotangent of xi back onto theta and the latent derivatives. With
    // K = (thetaᵀ theta)⁻¹ xi_bar (solved via the triangular factor), the
    // derivative cotangent is theta*K and theta receives
    // (residual)*Kᵀ - (theta*K)*xiᵀ.
    let mut k_mat = vec![0.0; p * n_z];
    let mut col = vec![0.0; p];
    for c in 0..n_z {
        for j in 0..p {
            col[j] = xi_bar[j * n_z + c];
        }
        fwd.fit.qr.solve_upper_transpose(&mut col);
        fwd.fit.qr.solve_upper(&mut col);
        for j in 0..p {
            k_mat[j * n_z + c] = col[j];
        }
    }
    let zdot_bar = mm(fwd.fit.theta.data(), b, p, &k_mat, n_z);
    let mut resid = fwd.enc_dual.tangent_out.data().to_vec();
    for (r, &vh) in resid.iter_mut().zip(fwd.v.data()) {
        *r -= vh;
    }
    let from_resid = mm_a_bt(&resid, b, n_z, &k_mat, p);
    let from_proj = mm_a_bt(&zdot_bar, b, n_z, fwd.fit.xi.data(), p);
    for i in 0..theta_bar.len() {
        theta_bar[i] += from_resid[i] - from_proj[i];
    }

    // Chain the design-matrix cotangent through the basis functions.
    let mut u_enc = z_cot_dec;
    for row in 0..b {
        let z = fwd.enc_dual.primal_out.row(row);
        let start = row * n_z;
        let out = &mut u_enc.data_mut()[start..start + n_z];
        for (j, f) in lib.functions().iter().enumerate() {
            let w = theta_bar[row * p + j];
            if w != 0.0 {
                f.add_grad(z, w, out);
            }
        }
    }
    let zdot_bar = Tensor::new(vec![b, n_z], zdot_bar)?;
    let (enc_grad, _, _) = vjp_dual(&model.encoder, enc_params, &fwd.enc_dual, &u_enc, &zdot_bar)?;
    Ok((fwd.loss, enc_grad, dec_grad))
}

/// Predicted data velocity for a batch: encode, evaluate the fitted latent
/// field `theta(z) * Xi`, and push it through the decoder Jacobian.
pub fn predicted_xdot(
    model: &AutoencoderModel,
    enc_params: &ParamVector,
    dec_params: &ParamVector,
    batch: &Tensor,
    lib: &BasisLibrary,
    xi: &Tensor,
) -> Result<Tensor> {
    check_xi_shape(lib, xi)?;
    let z = model.encode(enc_params, batch)?;
    let theta = eval_theta(lib, &z)?;
    let v = Tensor::new(
        vec![z.rows(), lib.n_z()],
        mm(theta.data(), z.rows(), lib.len(), xi.data(), lib.n_z()),
    )?;
    jvp(&model.decoder, dec_params, &z, &v)
}

fn check_xi_shape(lib: &BasisLibrary, xi: &Tensor) -> Result<()> {
    if xi.shape() != [lib.len(), lib.n_z()] {
        return Err(EaeError::Shape(format!(
            "coefficient matrix shape {:?} does not match library ({} functions, {} latents)",
            xi.shape(),
            lib.len(),
            lib.n_z()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ensemble summaries
// ---------------------------------------------------------------------------

/// Entrywise mean, kernel-density mode, and significance mask of an ensemble
/// of coefficient matrices.
#[derive(Debug, Clone)]
pub struct CoefficientStats {
    pub mean: Tensor,
    pub mode: Tensor,
    significant: Vec<bool>,
}

impl CoefficientStats {
    pub fn is_significant(&self, func: usize, latent: usize) -> bool {
        self.significant[func * self.mean.width() + latent]
    }

    pub fn n_significant(&self) -> usize {
        self.significant.iter().filter(|&&s| s).count()
    }
}

/// Summarize an ensemble of fitted coefficient matrices. A term is
/// significant when both the magnitude of its ensemble mean and of its
/// density mode exceed [`SIGNIFICANCE_THRESHOLD`].
pub fn coefficient_stats(samples: &[Tensor]) -> Result<CoefficientStats> {
    if samples.len() < 2 {
        return Err(EaeError::InsufficientData(
            "coefficient statistics need at least two ensemble members".into(),
        ));
    }
    let shape = samples[0].shape().to_vec();
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(EaeError::Shape(
                "coefficient matrices in the ensemble have mixed shapes".into(),
            ));
        }
    }
    let n_entries = samples[0].data().len();
    let mut mean = vec![0.0; n_entries];
    let mut mode = vec![0.0; n_entries];
    let mut significant = vec![false; n_entries];
    let mut values = vec![0.0; samples.len()];
    for e in 0..n_entries {
        for (s, v) in samples.iter().zip(values.iter_mut()) {
            *v = s.data()[e];
        }
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let md = stats::kde_mode(&values);
        mean[e] = m;
        mode[e] = md;
        significant[e] = m.abs() > SIGNIFICANCE_THRESHOLD && md.abs() > SIGNIFICANCE_THRESHOLD;
    }
    Ok(CoefficientStats {
        mean: Tensor::new(shape.clone(), mean)?,
        mode: Tensor::new(shape, mode)?,
        significant,
    })
}

/// Pairwise Pearson correlations between the significant coefficients of an
/// ensemble. Labels identify each coefficient as `dz{latent}/dt~{basis}`.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub labels: Vec<String>,
    /// Row-major square matrix, one row per label.
    pub values: Vec<f64>,
    /// True where a coefficient had zero variance across the ensemble (its
    /// off-diagonal correlations are reported as 0).
    pub zero_variance: Vec<bool>,
}

impl CorrelationReport {
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }
}

pub fn coefficient_correlation(
    samples: &[Tensor],
    lib: &BasisLibrary,
    stats_table: &CoefficientStats,
) -> Result<CorrelationReport> {
    if stats_table.mean.shape() != [lib.len(), lib.n_z()] {
        return Err(EaeError::Shape(
            "statistics table does not match the library shape".into(),
        ));
    }
    let n_z = lib.n_z();
    let names = lib.names();
    let mut labels = Vec::new();
    let mut series: Vec<Vec<f64>> = Vec::new();
    for j in 0..lib.len() {
        for c in 0..n_z {
            if stats_table.is_significant(j, c) {
                labels.push(format!("dz{}/dt~{}", c + 1, names[j]));
                series.push(samples.iter().map(|s| s.row(j)[c]).collect());
            }
        }
    }
    let s = labels.len();
    let mut values = vec![0.0; s * s];
    let mut zero_variance = vec![false; s];
    for (i, sv) in series.iter().enumerate() {
        let mean = sv.iter().sum::<f64>() / sv.len() as f64;
        zero_variance[i] = sv.iter().all(|&v| v == mean);
    }
    for i in 0..s {
        for j in 0..s {
            values[i * s + j] = if i == j {
                1.0
            } else {
                stats::pearson(&series[i], &series[j]).unwrap_or(0.0)
            };
        }
    }
    Ok(CorrelationReport {
        labels,
        values,
        zero_variance,
    })
}

/// Write the coefficient summary as CSV: one row per basis function, with
/// mean, mode, and significance for every latent dimension.
pub fn write_coefficient_table<W: std::io::Write>(
    w: &mut W,
    lib: &BasisLibrary,
    stats_table: &CoefficientStats,
) -> Result<()> {
    let n_z = lib.n_z();
    let mut header = String::from("basis");
    for c in 1..=n_z {
        header.push_str(&format!(",mean_dz{c},mode_dz{c},significant_dz{c}"));
    }
    writeln!(w, "{header}")?;
    for (j, name) in lib.names().iter().enumerate() {
        let mut row = name.clone();
        for c in 0..n_z {
            row.push_str(&format!(
                ",{},{},{}",
                stats_table.mean.row(j)[c],
                stats_table.mode.row(j)[c],
                stats_table.is_significant(j, c)
            ));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Write the correlation matrix as CSV with labeled rows and columns.
pub fn write_correlation_csv<W: std::io::Write>(
    w: &mut W,
    report: &CorrelationReport,
) -> Result<()> {
    let mut header = String::from("coefficient,zero_variance");
    for l in &report.labels {
        header.push(',');
        header.push_str(l);
    }
    writeln!(w, "{header}")?;
    let s = report.labels.len();
    for i in 0..s {
        let mut row = format!("{},{}", report.labels[i], report.zero_variance[i]);
        for j in 0..s {
            row.push_str(&format!(",{}", report.values[i * s + j]));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rolling the recovered model forward
// ---------------------------------------------------------------------------

/// Integrate `dz/dt = theta(z) * Xi` with classical fourth-order Runge–Kutta
/// from `z0`, returning `n_steps + 1` rows (the initial state included). The
/// integration aborts with a divergence error if any coordinate leaves
/// `[-DIVERGENCE_LIMIT, DIVERGENCE_LIMIT]` or turns non-finite.
pub fn integrate_latent_ode(
    lib: &BasisLibrary,
    xi: &Tensor,
    z0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Tensor> {
    check_xi_shape(lib, xi)?;
    if z0.len() != lib.n_z() {
        return Err(EaeError::Shape(format!(
            "initial state has {} coordinates, library expects {}",
            z0.len(),
            lib.n_z()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EaeError::Config("step size must be positive".into()));
    }
    let n_z = lib.n_z();
    let p = lib.len();
    let field = |z: &[f64], out: &mut [f64], theta_buf: &mut [f64]| {
        lib.eval_into(z, theta_buf);
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..p {
                s += theta_buf[j] * xi.data()[j * n_z + c];
            }
            *o = s;
        }
    };
    let mut traj = vec![0.0; (n_steps + 1) * n_z];
    traj[..n_z].copy_from_slice(z0);
    let mut z = z0.to_vec();
    let mut theta_buf = vec![0.0; p];
    let mut k1 = vec![0.0; n_z];
    let mut k2 = vec![0.0; n_z];
    let mut k3 = vec![0.0; n_z];
    let mut k4 = vec![0.0; n_z];
    let mut tmp = vec![0.0; n_z];
    for step in 1..=n_steps {
        field(&z, &mut k1, &mut theta_buf);
        for d in 0..n_z {
            tmp[d] = z[d] + 0.5 * dt * k1[d];
        }
        field(&tmp, &mut k2, &mut theta_buf);
        for d in 0..n_z {
            tmp[d] = z[d] + 0.5 * dt * k2[d];
        }
        field(&tmp, &mut k3, &mut theta_buf);
        for d in 0..n_z {
            tmp[d] = z[d] + dt * k3[d];
        }
        field(&tmp, &mut k4, &mut theta_buf);
        for d in 0..n_z {
            z[d] += dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        if z.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(EaeError::Divergence {
                context: "latent trajectory integration".into(),
                step,
            });
        }
        traj[step * n_z..(step + 1) * n_z].copy_from_slice(&z);
    }
    Tensor::new(vec![n_steps + 1, n_z], traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{recon_loss, LossKind};
    use crate::tensor::{init_params, Activation, NetworkSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn default_library_has_the_expected_terms_in_order() {
        let lib = BasisLibrary::default_2d();
        let names = lib.names();
        assert_eq!(
            names,
            vec![
                "z1", "z2", "z1^2", "z1*z2", "z2^2", "z1^3", "z1^2*z2", "z1*z2^2", "z2^3",
                "sin(z1)", "sin(z2)"
            ]
        );
        let z = [0.5, -1.0];
        let mut row = vec![0.0; lib.len()];
        lib.eval_into(&z, &mut row);
        assert_eq!(row[0], 0.5);
        assert_eq!(row[1], -1.0);
        assert_eq!(row[2], 0.25);
        assert_eq!(row[3], -0.5);
        assert_eq!(row[6], -0.25);
        assert!((row[9] - 0.5_f64.sin()).abs() < 1e-15);
        assert!((row[10] - (-1.0_f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn library_construction_rejects_bad_terms() {
        assert!(BasisLibrary::new(2, vec![]).is_err());
        assert!(BasisLibrary::new(2, vec![BasisFn::Monomial(vec![0, 0])]).is_err());
        assert!(BasisLibrary::new(2, vec![BasisFn::Monomial(vec![1])]).is_err());
        assert!(BasisLibrary::new(2, vec![BasisFn::Sin(2)]).is_err());
        assert!(BasisLibrary::new(2, vec![BasisFn::Sin(1)]).is_ok());
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        let lib = BasisLibrary::default_2d();
        let z = [0.7, -0.4];
        let h = 1e-6;
        for f in lib.functions() {
            let mut g = vec![0.0; 2];
            f.add_grad(&z, 1.0, &mut g);
            for d in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[d] += h;
                zm[d] -= h;
                let fd = (f.eval(&zp) - f.eval(&zm)) / (2.0 * h);
                assert!(
                    (g[d] - fd).abs() < 1e-8,
                    "{} coord {d}: {} vs {}",
                    f.name(),
                    g[d],
                    fd
                );
            }
        }
    }

    #[test]
    fn exact_sparse_model_is_recovered() {
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random_tensor(&mut rng, 60, 2, 1.5);
        // dz1/dt = 2 z2, dz2/dt = -2 z1 + 0.5 z1^3.
        let mut xi_true = vec![0.0; lib.len() * 2];
        xi_true[2] = 2.0; // row 1 (z2), column 1 (dz1/dt)
        xi_true[1] = -2.0;
        xi_true[5 * 2 + 1] = 0.5;
        let theta = eval_theta(&lib, &z).unwrap();
        let zdot = Tensor::new(
            vec![60, 2],
            mm(theta.data(), 60, lib.len(), &xi_true, 2),
        )
        .unwrap();
        let xi = estimate_xi(&lib, &z, &zdot).unwrap();
        for (a, b) in xi.data().iter().zip(&xi_true) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn rank_deficient_design_matrix_is_rejected_with_condition() {
        let lib = BasisLibrary::default_2d();
        // Every row identical: the design matrix has rank one.
        let z = Tensor::new(vec![20, 2], vec![0.3; 40]).unwrap();
        let zdot = Tensor::new(vec![20, 2], vec![0.1; 40]).unwrap();
        match estimate_xi(&lib, &z, &zdot) {
            Err(EaeError::Singular { cond, .. }) => assert!(cond > MAX_CONDITION),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_an_insufficient_data_error() {
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_tensor(&mut rng, 5, 2, 1.0);
        let zdot = random_tensor(&mut rng, 5, 2, 1.0);
        assert!(matches!(
            estimate_xi(&lib, &z, &zdot),
            Err(EaeError::InsufficientData(_))
        ));
    }

    #[test]
    fn duplicating_every_row_leaves_the_fit_unchanged() {
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_tensor(&mut rng, 30, 2, 1.2);
        let zdot = random_tensor(&mut rng, 30, 2, 1.2);
        let xi = estimate_xi(&lib, &z, &zdot).unwrap();
        let mut z2 = z.data().to_vec();
        z2.extend_from_slice(z.data());
        let mut zd2 = zdot.data().to_vec();
        zd2.extend_from_slice(zdot.data());
        let xi2 = estimate_xi(
            &lib,
            &Tensor::new(vec![60, 2], z2).unwrap(),
            &Tensor::new(vec![60, 2], zd2).unwrap(),
        )
        .unwrap();
        for (a, b) in xi.data().iter().zip(xi2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn orthonormal_design_reduces_to_a_projection() {
        // With a linear library and latents whose columns are orthonormal,
        // the least-squares solution is theta-transpose times the targets.
        let lib = BasisLibrary::new(
            2,
            vec![BasisFn::Monomial(vec![1, 0]), BasisFn::Monomial(vec![0, 1])],
        )
        .unwrap();
        let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let zdot = Tensor::new(vec![4, 2], vec![0.3, -0.7, 1.1, 0.2, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let xi = estimate_xi(&lib, &z, &zdot).unwrap();
        let theta = eval_theta(&lib, &z).unwrap();
        let proj = mm_at_b(theta.data(), 4, 2, zdot.data(), 2);
        for (a, b) in xi.data().iter().zip(&proj) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn toy_model() -> (AutoencoderModel, ParamVector, ParamVector) {
        let enc = NetworkSpec::new(vec![3, 4, 2], vec![Activation::Elu, Activation::Linear])
            .unwrap();
        let dec = NetworkSpec::new(vec![2, 4, 3], vec![Activation::Elu, Activation::Linear])
            .unwrap();
        let model = AutoencoderModel::new(enc, dec).unwrap();
        let phi = init_params(&model.encoder, 41);
        let theta = init_params(&model.decoder, 42);
        (model, phi, theta)
    }

    #[test]
    fn zero_derivative_weight_reduces_to_scaled_reconstruction() {
        let (model, phi, theta) = toy_model();
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 14, 3, 1.5);
        let xdot = random_tensor(&mut rng, 14, 3, 1.5);
        let w = DynamicsWeights {
            lambda1: 0.7,
            lambda2: 0.0,
        };
        let dl = dynamics_loss(&model, &phi, &theta, &x, &xdot, &lib, &w).unwrap();
        let rl = recon_loss(&model, &phi, &theta, &x, LossKind::SquaredError).unwrap();
        assert!((dl - 0.7 * rl).abs() < 1e-12, "{dl} vs {}", 0.7 * rl);
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let (model, phi, theta) = toy_model();
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_tensor(&mut rng, 14, 3, 1.5);
        let xdot = random_tensor(&mut rng, 14, 3, 1.5);
        let w = DynamicsWeights {
            lambda1: 1.0,
            lambda2: 20.0,
        };
        let (_, g_enc, g_dec) =
            dynamics_loss_grads(&model, &phi, &theta, &x, &xdot, &lib, &w).unwrap();
        let h = 1e-5;
        let fd = |params: &ParamVector, is_enc: bool| -> Vec<f64> {
            (0..params.len())
                .map(|i| {
                    let mut pp = params.clone();
                    let mut pm = params.clone();
                    pp.as_mut_slice()[i] += h;
                    pm.as_mut_slice()[i] -= h;
                    let (lp, lm) = if is_enc {
                        (
                            dynamics_loss(&model, &pp, &theta, &x, &xdot, &lib, &w).unwrap(),
                            dynamics_loss(&model, &pm, &theta, &x, &xdot, &lib, &w).unwrap(),
                        )
                    } else {
                        (
                            dynamics_loss(&model, &phi, &pp, &x, &xdot, &lib, &w).unwrap(),
                            dynamics_loss(&model, &phi, &pm, &x, &xdot, &lib, &w).unwrap(),
                        )
                    };
                    (lp - lm) / (2.0 * h)
                })
                .collect()
        };
        for (grad, params, is_enc) in [(&g_enc, &phi, true), (&g_dec, &theta, false)] {
            let numeric = fd(params, is_enc);
            let mut err = 0.0;
            let mut scale = 0.0;
            for (a, b) in grad.as_slice().iter().zip(&numeric) {
                err += (a - b) * (a - b);
                scale += b * b;
            }
            let rel = (err / scale.max(1e-30)).sqrt();
            assert!(rel < 1e-4, "relative gradient error {rel} (enc={is_enc})");
        }
    }

    #[test]
    fn predicted_velocity_matches_data_when_the_model_is_exact() {
        // Linear encoder/decoder that are exact inverses, latent field
        // fit from the data itself: predicted xdot should reproduce the
        // observed xdot for a linear system.
        let enc = NetworkSpec::new(vec![2, 2], vec![Activation::Linear]).unwrap();
        let dec = NetworkSpec::new(vec![2, 2], vec![Activation::Linear]).unwrap();
        let model = AutoencoderModel::new(enc, dec).unwrap();
        // Identity weights, zero biases.
        let phi = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let theta = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let lib = BasisLibrary::new(
            2,
            vec![BasisFn::Monomial(vec![1, 0]), BasisFn::Monomial(vec![0, 1])],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&mut rng, 12, 2, 1.0);
        // xdot = rotation applied to x.
        let mut xd = vec![0.0; 24];
        for b in 0..12 {
            xd[b * 2] = 2.0 * x.row(b)[1];
            xd[b * 2 + 1] = -2.0 * x.row(b)[0];
        }
        let xdot = Tensor::new(vec![12, 2], xd).unwrap();
        let xi = estimate_xi(&lib, &x, &xdot).unwrap();
        let pred = predicted_xdot(&model, &phi, &theta, &x, &lib, &xi).unwrap();
        for (a, b) in pred.data().iter().zip(xdot.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_latent_coordinates_permutes_the_coefficients() {
        let lib = BasisLibrary::default_2d();
        // Index of each basis function after the swap z1 <-> z2.
        let perm = [1, 0, 4, 3, 2, 8, 7, 6, 5, 10, 9];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = random_tensor(&mut rng, 40, 2, 1.3);
        let zdot = random_tensor(&mut rng, 40, 2, 1.3);
        let xi = estimate_xi(&lib, &z, &zdot).unwrap();
        let swap = |t: &Tensor| {
            let mut d = Vec::with_capacity(t.data().len());
            for b in 0..t.rows() {
                d.push(t.row(b)[1]);
                d.push(t.row(b)[0]);
            }
            Tensor::new(vec![t.rows(), 2], d).unwrap()
        };
        let xi_sw = estimate_xi(&lib, &swap(&z), &swap(&zdot)).unwrap();
        for j in 0..lib.len() {
            for c in 0..2 {
                let a = xi_sw.row(j)[c];
                let b = xi.row(perm[j])[1 - c];
                assert!((a - b).abs() < 1e-9, "entry ({j},{c}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn coefficient_stats_follow_mean_and_mode_gates() {
        // Entry 0: bimodal with mean 2 and mode near 3 -> significant.
        // Entry 1: mean 0.5 but mode near 0.05 -> not significant.
        let mut samples = Vec::new();
        for i in 0..400 {
            let a = if i < 100 { -1.0 } else { 3.0 };
            let b = if i < 300 { 0.05 } else { 1.85 };
            samples.push(Tensor::new(vec![2, 1], vec![a, b]).unwrap());
        }
        let st = coefficient_stats(&samples).unwrap();
        assert!((st.mean.data()[0] - 2.0).abs() < 1e-12);
        assert!((st.mode.data()[0] - 3.0).abs() < 0.05);
        assert!(st.is_significant(0, 0));
        assert!((st.mean.data()[1] - 0.5).abs() < 1e-12);
        assert!(st.mode.data()[1].abs() < 0.1);
        assert!(!st.is_significant(1, 0));
        assert_eq!(st.n_significant(), 1);
    }

    #[test]
    fn correlations_have_unit_diagonal_and_flag_degenerate_entries() {
        let lib = BasisLibrary::new(
            1,
            vec![BasisFn::Monomial(vec![1]), BasisFn::Monomial(vec![2]), BasisFn::Sin(0)],
        )
        .unwrap();
        // Three coefficients: two perfectly anti-correlated, one constant.
        let mut samples = Vec::new();
        for k in 0..50 {
            let t = 0.01 * k as f64;
            samples.push(Tensor::new(vec![3, 1], vec![1.0 + t, 1.0 - t, 0.5]).unwrap());
        }
        let st = coefficient_stats(&samples).unwrap();
        assert_eq!(st.n_significant(), 3);
        let rep = coefficient_correlation(&samples, &lib, &st).unwrap();
        assert_eq!(rep.labels.len(), 3);
        assert_eq!(rep.labels[0], "dz1/dt~z1");
        for i in 0..3 {
            assert_eq!(rep.correlation(i, i), 1.0);
        }
        assert!((rep.correlation(0, 1) + 1.0).abs() < 1e-12);
        assert!(rep.zero_variance[2]);
        assert!(!rep.zero_variance[0]);
        assert_eq!(rep.correlation(0, 2), 0.0);
        assert_eq!(rep.correlation(2, 1), 0.0);
    }

    #[test]
    fn csv_writers_emit_one_row_per_entry() {
        let lib = BasisLibrary::default_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Tensor> = (0..8)
            .map(|_| random_tensor(&mut rng, lib.len(), 2, 2.0))
            .collect();
        let st = coefficient_stats(&samples).unwrap();
        let mut buf = Vec::new();
        write_coefficient_table(&mut buf, &lib, &st).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + lib.len());
        assert!(text.starts_with(
            "basis,mean_dz1,mode_dz1,significant_dz1,mean_dz2,mode_dz2,significant_dz2"
        ));
        let rep = coefficient_correlation(&samples, &lib, &st).unwrap();
        let mut buf = Vec::new();
        write_correlation_csv(&mut buf, &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + rep.labels.len());
    }

    #[test]
    fn rotation_field_integrates_around_the_circle() {
        let lib = BasisLibrary::default_2d();
        // dz1/dt = 2 z2, dz2/dt = -2 z1: clockwise rotation, period pi.
        let mut xi = vec![0.0; lib.len() * 2];
        xi[2] = 2.0; // row 1 (z2), column 1 (dz1/dt)
        xi[1] = -2.0;
        let xi = Tensor::new(vec![lib.len(), 2], xi).unwrap();
        let half_period = std::f64::consts::PI / 2.0;
        let n = 200;
        let traj = integrate_latent_ode(&lib, &xi, &[1.0, 0.0], half_period / n as f64, n).unwrap();
        assert_eq!(traj.shape(), [n + 1, 2]);
        for b in 0..=n {
            let r = traj.row(b);
            let radius = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!((radius - 1.0).abs() < 1e-6, "step {b}: radius {radius}");
        }
        let end = traj.row(n);
        assert!((end[0] + 1.0).abs() < 1e-6 && end[1].abs() < 1e-6);
    }

    #[test]
    fn quadratic_growth_reports_divergence_step() {
        let lib = BasisLibrary::new(1, vec![BasisFn::Monomial(vec![2])]).unwrap();
        let xi = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        match integrate_latent_ode(&lib, &xi, &[1.0], 0.5, 100) {
            Err(EaeError::Divergence { step, .. }) => assert!(step > 0 && step < 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
