//! Numerical verification suite: every check re-derives its target with an
//! independent method (exact covariances, dense quadrature, finite
//! differences) and compares against the library's implementation under a
//! pinned tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eae_core::diagnostics::{
    cv_marginal_check, ensemble_mean_code, free_energy_check, free_energy_convergence_order,
    interpolate_codes, toy_cases, QuadratureGrid, ToyLoss,
};
use eae_core::sampler::fidelity::{self, FidelityRun, COVARIANCE_TOL, WINDOW_TEMP_TOL};
use eae_core::tensor::{
    forward, init_params, jvp, vjp, Activation, NetworkSpec, ParamVector, Tensor,
};
use eae_core::training::{decoder_grad_estimate, EncoderEnsemble, LatentEnsemble};
use eae_core::Result;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

/// An infrastructure error inside one check counts as that check failing;
/// the rest of the suite still runs.
fn guarded(name: &'static str, run: impl FnOnce() -> Result<CheckOutcome>) -> CheckOutcome {
    match run() {
        Ok(c) => c,
        Err(e) => outcome(name, false, format!("aborted: {e}")),
    }
}

pub fn run_all(flip_chain_force: bool) -> Vec<CheckOutcome> {
    let mut checks = Vec::new();
    checks.extend(sampler_checks(flip_chain_force));
    checks.extend(autodiff_checks());
    checks.push(guarded("free_energy_gradient_identity", gradient_identity));
    checks.push(guarded("free_energy_convergence_order", convergence_order));
    checks.push(guarded("cv_marginal_identity", cv_identity));
    checks.push(guarded("cv_marginal_nonlinear", cv_nonlinear));
    checks.push(guarded("cv_marginal_state_counting", cv_state_counting));
    checks.push(guarded("interpolation_endpoints", interpolation_endpoints));
    checks.push(guarded("ensemble_mean_consistency", mean_consistency));
    checks.push(guarded("gradient_estimate_antisymmetry", antisymmetry));
    checks
}

// ---------------------------------------------------------------------------
// Sampler fidelity
// ---------------------------------------------------------------------------

/// One long thermostatted trajectory on the exactly solvable quadratic
/// feeds both the covariance and the equipartition check. The flipped
/// chain-force sign is the suite's self-test: it must drag both below
/// their tolerances (or blow up outright).
fn sampler_checks(flip_chain_force: bool) -> Vec<CheckOutcome> {
    let run = FidelityRun {
        chain_force_sign: if flip_chain_force { -1.0 } else { 1.0 },
        ..FidelityRun::default()
    };
    match fidelity::check(&run) {
        Ok(report) => vec![
            outcome(
                "sampler_gibbs_covariance",
                report.covariance_ok,
                format!(
                    "max entrywise covariance error {:.4} vs tolerance {COVARIANCE_TOL}",
                    report.max_covariance_err
                ),
            ),
            outcome(
                "thermostat_equipartition",
                report.equipartition_ok,
                format!(
                    "worst window temperature error {:.4} vs tolerance {WINDOW_TEMP_TOL} over {} windows",
                    report.max_window_err,
                    report.window_temperatures.len()
                ),
            ),
        ],
        Err(e) => {
            let detail = format!("trajectory aborted: {e}");
            vec![
                outcome("sampler_gibbs_covariance", false, detail.clone()),
                outcome("thermostat_equipartition", false, detail),
            ]
        }
    }
}

// ---------------------------------------------------------------------------
// Automatic differentiation against finite differences
// ---------------------------------------------------------------------------

const N_PROBES: usize = 100;
const AD_REL_TOL: f64 = 1e-6;
/// Denominator floor for the relative error, so near-zero derivatives are
/// compared absolutely at a scale finite differences can resolve.
const AD_SCALE_FLOOR: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(AD_SCALE_FLOOR)
}

/// Five-point-stencil derivative of `s` at 0: fourth-order truncation, so
/// the comparison is limited by round-off, not by the step.
fn stencil_derivative(mut s: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    Ok((s(-2.0 * eps)? - 8.0 * s(-eps)? + 8.0 * s(eps)? - s(2.0 * eps)?) / (12.0 * eps))
}

struct Probe {
    spec: NetworkSpec,
    params: ParamVector,
    x: Tensor,
}

/// Small random networks cycling through every activation, one to three
/// layers deep.
fn build_probe(i: usize, salt: u64) -> Result<Probe> {
    let acts = [
        Activation::Linear,
        Activation::Relu,
        Activation::Elu,
        Activation::Sigmoid,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + i as u64 + salt * 7919);
    let depth = 1 + i % 3;
    let mut widths = vec![rng.random_range(2..5usize)];
    let mut layer_acts = Vec::with_capacity(depth);
    for l in 0..depth {
        widths.push(rng.random_range(2..5usize));
        layer_acts.push(acts[(i + l) % acts.len()]);
    }
    let spec = NetworkSpec::new(widths.clone(), layer_acts)?;
    let params = init_params(&spec, 0xA110_0000 + i as u64 + salt);
    let x = Tensor::from_rows(
        &(0..2)
            .map(|_| (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect::<Vec<_>>(),
    )?;
    Ok(Probe { spec, params, x })
}

/// Pre-activations this close to a ReLU/ELU joint disqualify a probe: a
/// finite difference straddling the joint does not estimate the one-sided
/// derivative the network actually uses, so it is not a valid reference
/// there. The margin is far above anything the probing steps can move a
/// pre-activation by.
const KINK_MARGIN: f64 = 1e-2;

/// Whether every kinked activation in the probe evaluates safely away from
/// its joint, checked by reading each such layer's pre-activations through
/// a prefix network whose last activation is replaced by the identity.
fn probe_is_fd_safe(probe: &Probe) -> Result<bool> {
    for layer in 0..probe.spec.n_layers() {
        if !matches!(
            probe.spec.activations[layer],
            Activation::Relu | Activation::Elu
        ) {
            continue;
        }
        let widths = probe.spec.layer_widths[..=layer + 1].to_vec();
        let mut acts = probe.spec.activations[..=layer].to_vec();
        *acts.last_mut().expect("at least one layer") = Activation::Linear;
        let sub = NetworkSpec::new(widths, acts)?;
        let sub_params = ParamVector::new(probe.params.as_slice()[..sub.n_params()].to_vec());
        let pre = forward(&sub, &sub_params, &probe.x)?;
        if pre.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Deterministically re-draw until the probe is smooth in the probing
/// window.
fn build_safe_probe(i: usize) -> Result<Probe> {
    for salt in 0..50 {
        let probe = build_probe(i, salt)?;
        if probe_is_fd_safe(&probe)? {
            return Ok(probe);
        }
    }
    Err(eae_core::error::EaeError::Domain(format!(
        "probe {i}: no kink-free draw in 50 attempts"
    )))
}

fn autodiff_checks() -> Vec<CheckOutcome> {
    match autodiff_probe_errors() {
        Ok((worst_vjp, worst_jvp)) => vec![
            outcome(
                "reverse_mode_gradients",
                worst_vjp <= AD_REL_TOL,
                format!(
                    "worst relative error {worst_vjp:.3e} vs tolerance {AD_REL_TOL:.0e} over {N_PROBES} probes"
                ),
            ),
            outcome(
                "forward_mode_derivatives",
                worst_jvp <= AD_REL_TOL,
                format!(
                    "worst relative error {worst_jvp:.3e} vs tolerance {AD_REL_TOL:.0e} over {N_PROBES} probes"
                ),
            ),
        ],
        Err(e) => {
            let detail = format!("aborted: {e}");
            vec![
                outcome("reverse_mode_gradients", false, detail.clone()),
                outcome("forward_mode_derivatives", false, detail),
            ]
        }
    }
}

fn autodiff_probe_errors() -> Result<(f64, f64)> {
    let mut worst_vjp = 0.0f64;
    let mut worst_jvp = 0.0f64;
    for i in 0..N_PROBES {
        let probe = build_safe_probe(i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xFD00_0000 + i as u64);
        let out_w = probe.spec.output_width();
        let u = Tensor::from_rows(
            &(0..2)
                .map(|_| (0..out_w).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )?;
        // Scalar objective s = <u, f(x)>; its exact gradients come from one
        // reverse sweep.
        let (param_grad, input_grad) = vjp(&probe.spec, &probe.params, &probe.x, &u)?;
        let scalar = |params: &ParamVector, x: &Tensor| -> Result<f64> {
            let y = forward(&probe.spec, params, x)?;
            Ok(y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
        };

        // Five random parameter coordinates per probe.
        for _ in 0..5 {
            let k = rng.random_range(0..probe.params.len());
            let p0 = probe.params.as_slice()[k];
            let eps = 1e-4 * p0.abs().max(1.0);
            let fd = stencil_derivative(
                |delta| {
                    let mut p = probe.params.clone();
                    p.as_mut_slice()[k] = p0 + delta;
                    scalar(&p, &probe.x)
                },
                eps,
            )?;
            worst_vjp = worst_vjp.max(rel_err(fd, param_grad.as_slice()[k]));
        }

        // Three random input coordinates per probe.
        for _ in 0..3 {
            let k = rng.random_range(0..probe.x.data().len());
            let x0 = probe.x.data()[k];
            let eps = 1e-4 * x0.abs().max(1.0);
            let fd = stencil_derivative(
                |delta| {
                    let mut d = probe.x.data().to_vec();
                    d[k] = x0 + delta;
                    scalar(&probe.params, &Tensor::new(probe.x.shape().to_vec(), d)?)
                },
                eps,
            )?;
            worst_vjp = worst_vjp.max(rel_err(fd, input_grad.data()[k]));
        }

        // Forward mode along a random direction, against a two-sided
        // directional difference of the full output.
        let tangent = Tensor::new(
            probe.x.shape().to_vec(),
            (0..probe.x.data().len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let j = jvp(&probe.spec, &probe.params, &probe.x, &tangent)?;
        let eps = 1e-5;
        let shift = |s: f64| -> Result<Tensor> {
            Tensor::new(
                probe.x.shape().to_vec(),
                probe
                    .x
                    .data()
                    .iter()
                    .zip(tangent.data())
                    .map(|(a, t)| a + s * t)
                    .collect(),
            )
        };
        let y_plus = forward(&probe.spec, &probe.params, &shift(eps)?)?;
        let y_minus = forward(&probe.spec, &probe.params, &shift(-eps)?)?;
        for ((jv, yp), ym) in j.data().iter().zip(y_plus.data()).zip(y_minus.data()) {
            let fd = (yp - ym) / (2.0 * eps);
            worst_jvp = worst_jvp.max(rel_err(fd, *jv));
        }
    }
    Ok((worst_vjp, worst_jvp))
}

// ---------------------------------------------------------------------------
// Free-energy quadrature checks
// ---------------------------------------------------------------------------

const IDENTITY_TOL: f64 = 1e-3;
const ORDER_FLOOR: f64 = 1.9;
const TV_TOL: f64 = 0.05;

/// The derivative of the heat-bath free energy over the fixed parameter
/// must equal the Gibbs expectation of the loss gradient on every shipped
/// toy loss.
fn gradient_identity() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for case in toy_cases() {
        let check = free_energy_check(&case.loss, case.theta, case.beta, &case.grid)?;
        if check.discrepancy > worst {
            worst = check.discrepancy;
            worst_name = case.loss.name;
        }
    }
    Ok(outcome(
        "free_energy_gradient_identity",
        worst <= IDENTITY_TOL,
        format!("worst discrepancy {worst:.3e} ({worst_name}) vs tolerance {IDENTITY_TOL:.0e}"),
    ))
}

/// Grid doubling must shrink the quadrature error at least quadratically,
/// measured against the closed-form gradient of the scaled gaussian.
fn convergence_order() -> Result<CheckOutcome> {
    let case = &toy_cases()[1];
    let exact_grad = 1.0 / (case.beta * case.theta);
    let coarse = QuadratureGrid::new(vec![-10.0], vec![10.0], vec![15])?;
    let order =
        free_energy_convergence_order(&case.loss, case.theta, case.beta, &coarse, exact_grad)?;
    Ok(outcome(
        "free_energy_convergence_order",
        order >= ORDER_FLOOR,
        format!("observed order {order:.2} vs floor {ORDER_FLOOR}"),
    ))
}

fn first_coord(phi: &[f64]) -> f64 {
    phi[0]
}

fn squared_coord(phi: &[f64]) -> f64 {
    phi[0] * phi[0]
}

/// Identity collective map: the pushforward histogram must match the
/// restricted integrals computed on an independently refined grid.
fn cv_identity() -> Result<CheckOutcome> {
    let case = &toy_cases()[0];
    let marginal = cv_marginal_check(
        &case.loss,
        first_coord,
        case.theta,
        case.beta,
        &case.grid,
        50,
        8,
    )?;
    Ok(outcome(
        "cv_marginal_identity",
        marginal.total_variation <= TV_TOL,
        format!(
            "total variation {:.3e} vs tolerance {TV_TOL}",
            marginal.total_variation
        ),
    ))
}

/// Folding collective map on the double well: both branches of the preimage
/// contribute to each bin.
fn cv_nonlinear() -> Result<CheckOutcome> {
    let case = &toy_cases()[2];
    let marginal = cv_marginal_check(
        &case.loss,
        squared_coord,
        case.theta,
        case.beta,
        &case.grid,
        200,
        8,
    )?;
    Ok(outcome(
        "cv_marginal_nonlinear",
        marginal.total_variation <= TV_TOL,
        format!(
            "total variation {:.3e} vs tolerance {TV_TOL}",
            marginal.total_variation
        ),
    ))
}

fn flat_loss(_phi: &[f64], _theta: f64) -> f64 {
    0.75
}

fn zero_grad(_phi: &[f64], _theta: f64) -> f64 {
    0.0
}

/// Constant energy: the marginal degenerates to pure state counting (the
/// density of states of the collective map), with no Boltzmann weighting
/// left to hide an error.
fn cv_state_counting() -> Result<CheckOutcome> {
    let flat = ToyLoss {
        name: "constant",
        n_params: 1,
        loss: flat_loss,
        grad_theta: zero_grad,
    };
    let grid = QuadratureGrid::new(vec![-2.0], vec![2.0], vec![2001])?;
    let marginal = cv_marginal_check(&flat, squared_coord, 0.0, 1.0, &grid, 40, 8)?;
    Ok(outcome(
        "cv_marginal_state_counting",
        marginal.total_variation <= TV_TOL,
        format!(
            "total variation {:.3e} vs tolerance {TV_TOL}",
            marginal.total_variation
        ),
    ))
}

// ---------------------------------------------------------------------------
// Latent-code algebra
// ---------------------------------------------------------------------------

/// The interpolation endpoints must reproduce the input codes bit for bit.
fn interpolation_endpoints() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1A7E);
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let at_one = interpolate_codes(&a, &b, 1.0)?;
    let at_zero = interpolate_codes(&a, &b, 0.0)?;
    let exact_a = at_one
        .iter()
        .zip(&a)
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let exact_b = at_zero
        .iter()
        .zip(&b)
        .all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(outcome(
        "interpolation_endpoints",
        exact_a && exact_b,
        format!("alpha=1 bitwise match {exact_a}, alpha=0 bitwise match {exact_b}"),
    ))
}

/// Averaging per query first and then over queries must agree with the flat
/// mean over every (member, query) code.
fn mean_consistency() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3EA9);
    let n_z = 3;
    let n_q = 7;
    let members: Vec<Tensor> = (0..4)
        .map(|_| {
            Tensor::new(
                vec![n_q, n_z],
                (0..n_q * n_z).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let latents = LatentEnsemble::from_members(&members)?;
    let two_stage = ensemble_mean_code(&latents, None)?;
    let mut flat = vec![0.0; n_z];
    for m in &members {
        for q in 0..n_q {
            for (slot, v) in flat.iter_mut().zip(m.row(q)) {
                *slot += v;
            }
        }
    }
    for v in flat.iter_mut() {
        *v /= (members.len() * n_q) as f64;
    }
    let max_diff = two_stage
        .iter()
        .zip(&flat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(outcome(
        "ensemble_mean_consistency",
        max_diff <= 1e-12,
        format!("max difference {max_diff:.3e} vs tolerance 1e-12"),
    ))
}

/// Gradients stored in mirrored pairs must average to exactly zero, so the
/// estimator introduces no drift of its own.
fn antisymmetry() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAB5);
    let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let member = ParamVector::zeros(5);
    let ensemble = EncoderEnsemble {
        members: vec![member.clone(), member],
        decoder_gradients: vec![ParamVector::new(g), ParamVector::new(neg)],
    };
    let mean = decoder_grad_estimate(&ensemble)?;
    let exact_zero = mean.as_slice().iter().all(|v| *v == 0.0);
    Ok(outcome(
        "gradient_estimate_antisymmetry",
        exact_zero,
        format!("all components exactly zero: {exact_zero}"),
    ))
}
