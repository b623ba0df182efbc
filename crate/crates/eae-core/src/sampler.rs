//! Simmering sampler: canonical-ensemble sampling of a parameter vector
//! whose potential energy is a training loss.
//!
//! Parameters are given fictitious momenta and evolved by velocity-Verlet
//! integration under the force `-grad(loss)`, while a Nose-Hoover chain
//! thermostat keeps the time-averaged kinetic temperature at the target.
//! Along a trajectory the positions then sample the Gibbs measure
//! `p(phi) ~ exp(-loss(phi) / T)`.

use crate::tensor::ParamVector;
use crate::{EaeError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Thermostat and integrator settings.
///
/// Temperature is measured in loss units per degree of freedom (the
/// Boltzmann constant is 1). `chain_mass = None` selects the default
/// `n_params * temperature * tau^2` with `tau = 100 * step_size`.
/// `velocity_resample_period = 0` disables periodic momentum redraws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermostatConfig {
    pub temperature: f64,
    pub particle_mass: f64,
    pub chain_length: usize,
    #[serde(default)]
    pub chain_mass: Option<f64>,
    pub step_size: f64,
    #[serde(default)]
    pub velocity_resample_period: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ThermostatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(EaeError::Config("temperature must be positive".into()));
        }
        if !(self.particle_mass.is_finite() && self.particle_mass > 0.0) {
            return Err(EaeError::Config("particle mass must be positive".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(EaeError::Config("step size must be positive".into()));
        }
        if self.chain_length == 0 {
            return Err(EaeError::Config("chain length must be at least 1".into()));
        }
        if let Some(q) = self.chain_mass {
            if !(q.is_finite() && q > 0.0) {
                return Err(EaeError::Config("chain mass must be positive".into()));
            }
        }
        Ok(())
    }

    /// Mass shared by every thermostat link.
    pub fn effective_chain_mass(&self, n_params: usize) -> f64 {
        self.chain_mass.unwrap_or_else(|| {
            let tau = 100.0 * self.step_size;
            n_params as f64 * self.temperature * tau * tau
        })
    }
}

/// Extended phase-space point: parameter positions and momenta plus the
/// thermostat chain, and the generator that drives momentum redraws.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub positions: ParamVector,
    pub momenta: Vec<f64>,
    pub chain_positions: Vec<f64>,
    pub chain_momenta: Vec<f64>,
    step_index: usize,
    rng: ChaCha8Rng,
}

impl SamplerState {
    pub fn step_index(&self) -> usize {
        self.step_index
    }
}

/// Build the initial extended state: momenta are drawn as `m * v` with
/// `v ~ N(0, T/m)` elementwise, the chain starts at rest.
pub fn init_state(positions: ParamVector, cfg: &ThermostatConfig) -> Result<SamplerState> {
    cfg.validate()?;
    if positions.is_empty() {
        return Err(EaeError::Config("cannot thermostat zero parameters".into()));
    }
    let mut state = SamplerState {
        momenta: vec![0.0; positions.len()],
        chain_positions: vec![0.0; cfg.chain_length],
        chain_momenta: vec![0.0; cfg.chain_length],
        positions,
        step_index: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
    };
    draw_momenta(&mut state, cfg);
    Ok(state)
}

fn draw_momenta(state: &mut SamplerState, cfg: &ThermostatConfig) {
    let sd = (cfg.temperature / cfg.particle_mass).sqrt();
    for r in &mut state.momenta {
        let v: f64 = StandardNormal.sample(&mut state.rng);
        *r = cfg.particle_mass * (sd * v);
    }
}

/// Redraw all momenta from the Maxwell distribution at the target
/// temperature. Distinct generator states yield distinct draws.
pub fn resample_velocities(state: &mut SamplerState, cfg: &ThermostatConfig) {
    draw_momenta(state, cfg);
}

/// Instantaneous kinetic temperature: `sum(r_i^2 / m) / n`.
pub fn kinetic_temperature(state: &SamplerState, cfg: &ThermostatConfig) -> f64 {
    let n = state.momenta.len() as f64;
    state
        .momenta
        .iter()
        .map(|r| r * r / cfg.particle_mass)
        .sum::<f64>()
        / n
}

/// One integrator step: thermostat half-update, velocity-Verlet half-kick
/// with the force `-grad_fn(positions)`, position drift, second half-kick at
/// the new positions, thermostat half-update. The gradient function is
/// evaluated twice, before and after the drift.
pub fn step<F>(state: &mut SamplerState, grad_fn: F, cfg: &ThermostatConfig) -> Result<()>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    step_with_chain_force_sign(state, grad_fn, cfg, 1.0)
}

/// `step` with the thermostat chain force multiplied by `sign`. The only
/// legitimate value in production is `+1.0`; the self-test suite injects
/// `-1.0` to confirm the Gibbs-fidelity check catches a broken thermostat.
pub fn step_with_chain_force_sign<F>(
    state: &mut SamplerState,
    mut grad_fn: F,
    cfg: &ThermostatConfig,
    sign: f64,
) -> Result<()>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let dt = cfg.step_size;
    if cfg.velocity_resample_period > 0
        && state.step_index > 0
        && state.step_index.is_multiple_of(cfg.velocity_resample_period)
    {
        draw_momenta(state, cfg);
    }

    nhc_half_update(state, cfg, dt * 0.5, sign);

    let grad = eval_grad(&mut grad_fn, &state.positions, state.step_index)?;
    for (r, g) in state.momenta.iter_mut().zip(grad.as_slice()) {
        *r -= 0.5 * dt * g;
    }
    let inv_m = 1.0 / cfg.particle_mass;
    for (phi, r) in state
        .positions
        .as_mut_slice()
        .iter_mut()
        .zip(&state.momenta)
    {
        *phi += dt * r * inv_m;
    }
    if !state.positions.is_finite() {
        return Err(EaeError::NonFinite {
            context: "sampler positions".into(),
            step: state.step_index,
        });
    }
    let grad = eval_grad(&mut grad_fn, &state.positions, state.step_index)?;
    for (r, g) in state.momenta.iter_mut().zip(grad.as_slice()) {
        *r -= 0.5 * dt * g;
    }

    nhc_half_update(state, cfg, dt * 0.5, sign);
    state.step_index += 1;
    Ok(())
}

fn eval_grad<F>(grad_fn: &mut F, positions: &ParamVector, step: usize) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let grad = grad_fn(positions)?;
    if grad.len() != positions.len() {
        return Err(EaeError::Shape(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            positions.len()
        )));
    }
    if !grad.is_finite() {
        return Err(EaeError::NonFinite {
            context: "loss gradient".into(),
            step,
        });
    }
    Ok(grad)
}

/// Symmetric thermostat-chain propagation over a half step `delta`.
///
/// The first link is forced by the departure of twice the kinetic energy
/// from `n * T`;每 subsequent link is forced by the one before it,
/// `p_prev^2 / Q - T`. Links are swept end-to-start, the particle momenta
/// are rescaled, chain positions advance, and the sweep runs back
/// start-to-end, which makes the update time-reversible.
fn nhc_half_update(state: &mut SamplerState, cfg: &ThermostatConfig, delta: f64, sign: f64) {
    let n = state.momenta.len();
    let c = cfg.chain_length;
    let q = cfg.effective_chain_mass(n);
    let t = cfg.temperature;
    let inv_m = 1.0 / cfg.particle_mass;

    let mut k2: f64 = state.momenta.iter().map(|r| r * r * inv_m).sum();
    let n_t = n as f64 * t;

    let force = |j: usize, k2: f64, chain: &[f64]| -> f64 {
        let raw = if j == 0 {
            k2 - n_t
        } else {
            chain[j - 1] * chain[j - 1] / q - t
        };
        sign * raw
    };

    // Inward sweep: last link first.
    let g_last = force(c - 1, k2, &state.chain_momenta);
    state.chain_momenta[c - 1] += 0.5 * delta * g_last;
    for j in (0..c - 1).rev() {
        let scale = (-0.25 * delta * state.chain_momenta[j + 1] / q).exp();
        let g = force(j, k2, &state.chain_momenta);
        state.chain_momenta[j] = state.chain_momenta[j] * scale * scale + 0.5 * delta * g * scale;
    }

    // Couple the first link to the particle momenta.
    let s = (-delta * state.chain_momenta[0] / q).exp();
    for r in &mut state.momenta {
        *r *= s;
    }
    k2 *= s * s;

    for j in 0..c {
        state.chain_positions[j] += delta * state.chain_momenta[j] / q;
    }

    // Outward sweep mirrors the inward one.
    for j in 0..c - 1 {
        let scale = (-0.25 * delta * state.chain_momenta[j + 1] / q).exp();
        let g = force(j, k2, &state.chain_momenta);
        state.chain_momenta[j] = state.chain_momenta[j] * scale * scale + 0.5 * delta * g * scale;
    }
    let g_last = force(c - 1, k2, &state.chain_momenta);
    state.chain_momenta[c - 1] += 0.5 * delta * g_last;
}

/// One record of a sampling trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    pub kinetic_temperature: f64,
}

/// Write trajectory points as CSV with a fixed header.
pub fn write_trajectory_csv<W: std::io::Write>(
    points: &[TrajectoryPoint],
    out: &mut W,
) -> Result<()> {
    writeln!(out, "step,loss,kinetic_temperature")?;
    for p in points {
        writeln!(out, "{},{},{}", p.step, p.loss, p.kinetic_temperature)?;
    }
    Ok(())
}

pub mod fidelity {
    //! Canonical-sampling verification on an exactly solvable potential.
    //!
    //! The loss `L(phi) = (phi_1^2 + 4 phi_2^2) / 2` has Gibbs covariance
    //! `diag(T, T/4)`; a long thermostatted trajectory must reproduce it,
    //! and the kinetic temperature must hold the target in every
    //! consecutive window.

    use super::*;

    /// Entrywise covariance tolerance, relative to the geometric mean of
    /// the corresponding diagonal entries.
    pub const COVARIANCE_TOL: f64 = 0.15;
    /// Tolerance on each windowed kinetic-temperature average, relative to
    /// the target temperature.
    pub const WINDOW_TEMP_TOL: f64 = 0.10;
    /// Steps per equipartition window.
    pub const WINDOW_LEN: usize = 10_000;

    /// Settings for the fidelity run. Defaults match the verification
    /// gate: 1e4 burn-in steps, 1e5 retained samples at stride 5.
    #[derive(Debug, Clone)]
    pub struct FidelityRun {
        pub burn_in: usize,
        pub n_samples: usize,
        pub thin: usize,
        pub seed: u64,
        /// +1 for the real thermostat; -1 flips the chain force to prove
        /// the check can fail.
        pub chain_force_sign: f64,
    }

    impl Default for FidelityRun {
        fn default() -> Self {
            FidelityRun {
                burn_in: 10_000,
                n_samples: 100_000,
                thin: 5,
                seed: 20_240_601,
                chain_force_sign: 1.0,
            }
        }
    }

    #[derive(Debug, Clone)]
    pub struct FidelityReport {
        /// Empirical covariance of the retained samples.
        pub covariance: [[f64; 2]; 2],
        /// Exact Gibbs covariance `diag(T, T/4)`.
        pub target: [[f64; 2]; 2],
        /// Worst entrywise covariance error relative to diagonal scale.
        pub max_covariance_err: f64,
        /// Windowed kinetic-temperature averages over the sampling phase.
        pub window_temperatures: Vec<f64>,
        /// Worst relative deviation of a window average from the target.
        pub max_window_err: f64,
        pub covariance_ok: bool,
        pub equipartition_ok: bool,
    }

    const TEMPERATURE: f64 = 0.1;
    const STIFFNESS: [f64; 2] = [1.0, 4.0];

    fn quadratic_grad(phi: &ParamVector) -> Result<ParamVector> {
        Ok(ParamVector::new(vec![
            STIFFNESS[0] * phi.as_slice()[0],
            STIFFNESS[1] * phi.as_slice()[1],
        ]))
    }

    /// Run the thermostatted trajectory and compare against the exact
    /// Gibbs covariance and the equipartition target.
    pub fn check(run: &FidelityRun) -> Result<FidelityReport> {
        let cfg = ThermostatConfig {
            temperature: TEMPERATURE,
            particle_mass: 1.0,
            chain_length: 3,
            chain_mass: Some(2.0 * TEMPERATURE), // n T tau^2 with tau = 1
            step_size: 0.05,
            velocity_resample_period: 0,
            rng_seed: run.seed,
        };
        let mut state = init_state(ParamVector::new(vec![0.4, 0.2]), &cfg)?;

        for _ in 0..run.burn_in {
            step_with_chain_force_sign(&mut state, quadratic_grad, &cfg, run.chain_force_sign)?;
        }

        let mut sums = [0.0f64; 2];
        let mut prods = [[0.0f64; 2]; 2];
        let mut window_temps = Vec::new();
        let mut window_acc = 0.0;
        let mut window_count = 0usize;
        let mut retained = 0usize;
        while retained < run.n_samples {
            for _ in 0..run.thin {
                step_with_chain_force_sign(
                    &mut state,
                    quadratic_grad,
                    &cfg,
                    run.chain_force_sign,
                )?;
                window_acc += kinetic_temperature(&state, &cfg);
                window_count += 1;
                if window_count == WINDOW_LEN {
                    window_temps.push(window_acc / WINDOW_LEN as f64);
                    window_acc = 0.0;
                    window_count = 0;
                }
            }
            let p = state.positions.as_slice();
            for i in 0..2 {
                sums[i] += p[i];
                for j in 0..2 {
                    prods[i][j] += p[i] * p[j];
                }
            }
            retained += 1;
        }

        let n = run.n_samples as f64;
        let mean = [sums[0] / n, sums[1] / n];
        let mut covariance = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                covariance[i][j] = prods[i][j] / n - mean[i] * mean[j];
            }
        }
        let target = [
            [TEMPERATURE / STIFFNESS[0], 0.0],
            [0.0, TEMPERATURE / STIFFNESS[1]],
        ];
        let mut max_cov = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let scale = (target[i][i] * target[j][j]).sqrt();
                max_cov = max_cov.max((covariance[i][j] - target[i][j]).abs() / scale);
            }
        }
        let max_window = window_temps
            .iter()
            .map(|t| (t - TEMPERATURE).abs() / TEMPERATURE)
            .fold(0.0f64, f64::max);

        Ok(FidelityReport {
            covariance,
            target,
            max_covariance_err: max_cov,
            window_temperatures: window_temps,
            max_window_err: max_window,
            covariance_ok: max_cov <= COVARIANCE_TOL,
            equipartition_ok: max_window <= WINDOW_TEMP_TOL,
        })
    }
}
