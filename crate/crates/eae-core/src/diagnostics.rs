//! Collapse metrics, latent-distribution exports, and quadrature
//! verification of the free-energy identities behind the trainer.
//!
//! The first half operates on latent codes: per-dimension activity
//! (variance above a threshold), two-stage ensemble means, affine
//! interpolation between codes, and per-class kernel-density exports.
//!
//! The second half checks the analytical backbone numerically on toy losses
//! with at most three parameters, where dense trapezoidal quadrature is
//! accurate enough to act as ground truth: the gradient of the heat-bath
//! free energy must equal the Gibbs-averaged loss gradient, and the
//! marginal of any scalar collective variable must match its
//! restricted-integral construction.

use crate::error::EaeError;
use crate::stats;
use crate::tensor::Tensor;
use crate::training::LatentEnsemble;
use crate::Result;

/// Default variance threshold separating active from collapsed dimensions.
pub const ACTIVITY_THRESHOLD: f64 = 0.01;

/// Number of points in exported kernel-density curves.
pub const KDE_CURVE_POINTS: usize = 256;

/// Step used for the central finite difference over the decoder-side
/// parameter in the free-energy identity check.
pub const FD_STEP: f64 = 1e-5;

/// Boundary mass above this fraction of the partition function means the
/// quadrature box is too small.
pub const TAIL_MASS_LIMIT: f64 = 1e-6;

/// Error floor for convergence-order estimates: below this the measured
/// error is dominated by round-off, not resolution.
pub const ORDER_ERROR_FLOOR: f64 = 1e-14;

// ---------------------------------------------------------------------------
// Latent activity
// ---------------------------------------------------------------------------

/// Per-dimension variance of a batch of latent codes with an active flag
/// per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityReport {
    pub variances: Vec<f64>,
    pub active: Vec<bool>,
    pub threshold: f64,
}

impl ActivityReport {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn total_dims(&self) -> usize {
        self.active.len()
    }

    /// CSV rows `dim,variance,active` (dimensions are 0-based).
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dim,variance,active")?;
        for (d, (v, a)) in self.variances.iter().zip(&self.active).enumerate() {
            writeln!(w, "{d},{v},{a}")?;
        }
        Ok(())
    }
}

/// Population variance (divisor N) of every latent column, flagged active
/// when the variance exceeds the threshold. Rows are code samples; for
/// variational models pass the encoded means.
pub fn latent_activity(latents: &Tensor, threshold: f64) -> Result<ActivityReport> {
    if latents.rows() < 2 {
        return Err(EaeError::InsufficientData(
            "activity needs at least two latent samples".into(),
        ));
    }
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(EaeError::Config(
            "activity threshold must be non-negative".into(),
        ));
    }
    let variances: Vec<f64> = (0..latents.width())
        .map(|col| stats::column_population_variance(latents.data(), latents.width(), col))
        .collect();
    let active = variances.iter().map(|&v| v > threshold).collect();
    Ok(ActivityReport {
        variances,
        active,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Ensemble means and interpolation
// ---------------------------------------------------------------------------

/// Two-stage mean code: first average over ensemble members per query, then
/// average those per-query codes over the selected queries. `None` selects
/// every query.
pub fn ensemble_mean_code(
    latents: &LatentEnsemble,
    query_filter: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..latents.n_queries()).collect();
    let selected: &[usize] = match query_filter {
        Some(sel) => sel,
        None => &all,
    };
    if selected.is_empty() {
        return Err(EaeError::InsufficientData(
            "mean code over an empty query selection".into(),
        ));
    }
    if let Some(&bad) = selected.iter().find(|&&q| q >= latents.n_queries()) {
        return Err(EaeError::Shape(format!(
            "query index {bad} out of range ({} queries)",
            latents.n_queries()
        )));
    }
    let n_z = latents.n_z();
    let mut mean = vec![0.0; n_z];
    let members = latents.n_members() as f64;
    for &q in selected {
        let mut per_query = vec![0.0; n_z];
        for m in 0..latents.n_members() {
            for (slot, v) in per_query.iter_mut().zip(latents.latent(m, q)) {
                *slot += v;
            }
        }
        for (acc, pq) in mean.iter_mut().zip(&per_query) {
            *acc += pq / members;
        }
    }
    let n_sel = selected.len() as f64;
    for v in &mut mean {
        *v /= n_sel;
    }
    Ok(mean)
}

/// Affine combination `alpha * a + (1 - alpha) * b`. The endpoints are
/// returned bitwise-exactly.
pub fn interpolate_codes(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(EaeError::Shape(format!(
            "cannot interpolate codes of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !alpha.is_finite() {
        return Err(EaeError::Domain("interpolation weight must be finite".into()));
    }
    if alpha == 1.0 {
        return Ok(a.to_vec());
    }
    if alpha == 0.0 {
        return Ok(b.to_vec());
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| alpha * x + (1.0 - alpha) * y)
        .collect())
}

// ---------------------------------------------------------------------------
// Class-conditional latent distributions
// ---------------------------------------------------------------------------

/// Latent samples and smoothed density of one class along one latent
/// dimension, together with that dimension's pooled variance.
#[derive(Debug, Clone)]
pub struct ClassLatentDistribution {
    pub class_label: usize,
    pub dim: usize,
    pub samples: Vec<f64>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Population variance of this dimension over all classes and members.
    pub pooled_variance: f64,
}

/// Split latent codes by query label and estimate a smoothed density per
/// (class, dimension) pair. Labels align with queries; every ensemble
/// member's code for a query contributes to that query's class.
pub fn class_conditional_latents(
    latents: &LatentEnsemble,
    labels: &[usize],
    dims: &[usize],
) -> Result<Vec<ClassLatentDistribution>> {
    if labels.len() != latents.n_queries() {
        return Err(EaeError::Shape(format!(
            "{} labels for {} queries",
            labels.len(),
            latents.n_queries()
        )));
    }
    if let Some(&bad) = dims.iter().find(|&&d| d >= latents.n_z()) {
        return Err(EaeError::Shape(format!(
            "latent dimension {bad} out of range ({}-dimensional codes)",
            latents.n_z()
        )));
    }
    let pooled = latents.flattened_rows();
    let pooled_var: Vec<f64> = (0..latents.n_z())
        .map(|col| stats::column_population_variance(pooled.data(), pooled.width(), col))
        .collect();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(classes.len() * dims.len());
    for &class in &classes {
        let queries: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(q, _)| q)
            .collect();
        for &dim in dims {
            let mut samples =
                Vec::with_capacity(queries.len() * latents.n_members());
            for m in 0..latents.n_members() {
                for &q in &queries {
                    samples.push(latents.latent(m, q)[dim]);
                }
            }
            let (grid, density) = stats::kde_curve(&samples, KDE_CURVE_POINTS);
            out.push(ClassLatentDistribution {
                class_label: class,
                dim,
                samples,
                grid,
                density,
                pooled_variance: pooled_var[dim],
            });
        }
    }
    Ok(out)
}

/// Two-column CSV `z,density` for one smoothed curve.
pub fn write_kde_csv<W: std::io::Write>(
    grid: &[f64],
    density: &[f64],
    w: &mut W,
) -> Result<()> {
    writeln!(w, "z,density")?;
    for (z, d) in grid.iter().zip(density) {
        writeln!(w, "{z},{d}")?;
    }
    Ok(())
}

/// Overlap coefficient of two sample sets: the integral of the pointwise
/// minimum of their normalized smoothed densities, between 0 (disjoint)
/// and 1 (identical).
pub fn overlap_coefficient(a: &[f64], b: &[f64], n_points: usize) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 || n_points < 2 {
        return Err(EaeError::InsufficientData(
            "overlap needs two samples per set and a grid of at least two points".into(),
        ));
    }
    let lo = a
        .iter()
        .chain(b)
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    let hi = a
        .iter()
        .chain(b)
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(EaeError::Domain("overlap samples must be finite".into()));
    }
    if lo == hi {
        return Ok(1.0);
    }
    let h_a = stats::silverman_bandwidth(a);
    let h_b = stats::silverman_bandwidth(b);
    if h_a == 0.0 || h_b == 0.0 {
        // One set is a point mass: overlap is the other's density mass at
        // that point, which the smoothed estimate cannot resolve better
        // than "none" unless the sets coincide entirely.
        return Ok(0.0);
    }
    // Pad by the larger bandwidth so both densities decay inside the box.
    let pad = 4.0 * h_a.max(h_b);
    let step = (hi - lo + 2.0 * pad) / (n_points - 1) as f64;
    let mut integral = 0.0;
    for i in 0..n_points {
        let x = lo - pad + i as f64 * step;
        let da = stats::kde_density(a, h_a, x);
        let db = stats::kde_density(b, h_b, x);
        let w = if i == 0 || i == n_points - 1 { 0.5 } else { 1.0 };
        integral += w * da.min(db) * step;
    }
    Ok(integral.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Quadrature grids
// ---------------------------------------------------------------------------

const MAX_GRID_NODES: usize = 1 << 24;

/// Axis-aligned box with a fixed number of nodes per axis, walked with
/// trapezoidal weights. At most three axes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    points: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, points: Vec<usize>) -> Result<QuadratureGrid> {
        let d = lo.len();
        if d == 0 || d > 3 || hi.len() != d || points.len() != d {
            return Err(EaeError::Grid(format!(
                "grid needs 1 to 3 matched axes, got lo {} / hi {} / points {}",
                lo.len(),
                hi.len(),
                points.len()
            )));
        }
        for a in 0..d {
            if !(lo[a].is_finite() && hi[a].is_finite() && lo[a] < hi[a]) {
                return Err(EaeError::Grid(format!(
                    "axis {a} bounds [{}, {}] are not an interval",
                    lo[a], hi[a]
                )));
            }
            if points[a] < 3 {
                return Err(EaeError::Grid(format!(
                    "axis {a} needs at least 3 nodes, got {}",
                    points[a]
                )));
            }
        }
        let total: usize = points.iter().product();
        if total > MAX_GRID_NODES {
            return Err(EaeError::Grid(format!(
                "{total} nodes exceed the {MAX_GRID_NODES}-node budget"
            )));
        }
        Ok(QuadratureGrid { lo, hi, points })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    /// Same box with `(n - 1) * factor + 1` nodes per axis, so the original
    /// nodes survive and every cell splits `factor`-fold.
    pub fn refined(&self, factor: usize) -> Result<QuadratureGrid> {
        if factor == 0 {
            return Err(EaeError::Grid("refinement factor must be positive".into()));
        }
        let points = self.points.iter().map(|&n| (n - 1) * factor + 1).collect();
        QuadratureGrid::new(self.lo.clone(), self.hi.clone(), points)
    }

    /// Visit every node with `(coordinates, trapezoid weight, on_boundary)`.
    fn visit<F: FnMut(&[f64], f64, bool)>(&self, mut f: F) {
        let d = self.dims();
        let steps: Vec<f64> = (0..d)
            .map(|a| (self.hi[a] - self.lo[a]) / (self.points[a] - 1) as f64)
            .collect();
        let base_weight: f64 = steps.iter().product();
        let total: usize = self.points.iter().product();
        let mut coords = vec![0.0; d];
        for flat in 0..total {
            let mut rest = flat;
            let mut weight = base_weight;
            let mut boundary = false;
            for a in (0..d).rev() {
                let idx = rest % self.points[a];
                rest /= self.points[a];
                coords[a] = self.lo[a] + idx as f64 * steps[a];
                if idx == 0 || idx == self.points[a] - 1 {
                    weight *= 0.5;
                    boundary = true;
                }
            }
            f(&coords, weight, boundary);
        }
    }
}

// ---------------------------------------------------------------------------
// Toy losses
// ---------------------------------------------------------------------------

/// A closed-form loss over at most three sampled parameters and one scalar
/// fixed parameter, used as quadrature ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ToyLoss {
    pub name: &'static str,
    pub n_params: usize,
    /// `L(phi, theta)`.
    pub loss: fn(&[f64], f64) -> f64,
    /// `dL/dtheta(phi, theta)`.
    pub grad_theta: fn(&[f64], f64) -> f64,
}

/// A toy loss bundled with settings under which its quadrature is
/// trustworthy.
#[derive(Debug, Clone)]
pub struct ToyCase {
    pub loss: ToyLoss,
    pub theta: f64,
    pub beta: f64,
    pub grid: QuadratureGrid,
}

/// The shipped verification suite: five loss families of one to three
/// sampled parameters, each with a box whose tails are fully decayed.
pub fn toy_cases() -> Vec<ToyCase> {
    let g1 = |lo: f64, hi: f64, n: usize| {
        QuadratureGrid::new(vec![lo], vec![hi], vec![n]).expect("static grid")
    };
    vec![
        ToyCase {
            loss: ToyLoss {
                name: "shifted quadratic",
                n_params: 1,
                loss: |p, t| 0.5 * (p[0] - t) * (p[0] - t),
                grad_theta: |p, t| t - p[0],
            },
            theta: 0.3,
            beta: 2.0,
            grid: g1(-12.0, 12.0, 2001),
        },
        ToyCase {
            loss: ToyLoss {
                name: "scaled gaussian",
                n_params: 1,
                loss: |p, t| 0.5 * t * t * p[0] * p[0],
                grad_theta: |p, t| t * p[0] * p[0],
            },
            theta: 1.2,
            beta: 1.0,
            grid: g1(-10.0, 10.0, 2001),
        },
        ToyCase {
            loss: ToyLoss {
                name: "tilted double well",
                n_params: 1,
                loss: |p, t| {
                    let s = p[0] * p[0] - 1.0;
                    s * s + t * p[0]
                },
                grad_theta: |p, _| p[0],
            },
            theta: 0.4,
            beta: 1.0,
            grid: g1(-4.0, 4.0, 2001),
        },
        ToyCase {
            loss: ToyLoss {
                name: "coupled pair",
                n_params: 2,
                loss: |p, t| 0.5 * (p[0] * p[0] + p[1] * p[1]) + t * p[0] * p[1],
                grad_theta: |p, _| p[0] * p[1],
            },
            theta: 0.5,
            beta: 1.0,
            grid: QuadratureGrid::new(vec![-8.0, -8.0], vec![8.0, 8.0], vec![401, 401])
                .expect("static grid"),
        },
        ToyCase {
            loss: ToyLoss {
                name: "skewed trio",
                n_params: 3,
                loss: |p, t| {
                    0.5 * (p[0] * p[0] + 2.0 * p[1] * p[1] + 3.0 * p[2] * p[2])
                        + 0.05 * p[2] * p[2] * p[2] * p[2]
                        + t * p[0] * p[1]
                },
                grad_theta: |p, _| p[0] * p[1],
            },
            theta: 0.4,
            beta: 1.0,
            grid: QuadratureGrid::new(
                vec![-7.0, -7.0, -7.0],
                vec![7.0, 7.0, 7.0],
                vec![101, 101, 101],
            )
            .expect("static grid"),
        },
    ]
}

// ---------------------------------------------------------------------------
// Free-energy identity check
// ---------------------------------------------------------------------------

/// Both sides of the free-energy gradient identity, evaluated by
/// quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyCheck {
    /// `-(1/beta) log Z` at the given fixed parameter.
    pub free_energy: f64,
    /// Central finite difference of the free energy over the fixed
    /// parameter.
    pub grad_finite_difference: f64,
    /// Heat-bath average of the loss gradient over the fixed parameter.
    pub grad_gibbs_expectation: f64,
    /// Absolute difference of the two gradient evaluations.
    pub discrepancy: f64,
    /// Fraction of the partition function carried by boundary nodes.
    pub boundary_fraction: f64,
}

/// Verify that the derivative of the heat-bath free energy with respect to
/// the fixed parameter equals the Gibbs expectation of the loss gradient,
/// using dense trapezoidal quadrature as the oracle on both sides.
pub fn free_energy_check(
    loss: &ToyLoss,
    theta: f64,
    beta: f64,
    grid: &QuadratureGrid,
) -> Result<FreeEnergyCheck> {
    if grid.dims() != loss.n_params {
        return Err(EaeError::Grid(format!(
            "{}-axis grid for a loss over {} parameters",
            grid.dims(),
            loss.n_params
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(EaeError::Domain("inverse temperature must be positive".into()));
    }
    let mut z = 0.0;
    let mut z_plus = 0.0;
    let mut z_minus = 0.0;
    let mut grad_num = 0.0;
    let mut boundary_mass = 0.0;
    grid.visit(|phi, w, on_boundary| {
        let b = (-beta * (loss.loss)(phi, theta)).exp() * w;
        z += b;
        z_plus += (-beta * (loss.loss)(phi, theta + FD_STEP)).exp() * w;
        z_minus += (-beta * (loss.loss)(phi, theta - FD_STEP)).exp() * w;
        grad_num += (loss.grad_theta)(phi, theta) * b;
        if on_boundary {
            boundary_mass += b;
        }
    });
    if !(z.is_finite() && z > 0.0 && z_plus.is_finite() && z_minus.is_finite()) {
        return Err(EaeError::Domain(format!(
            "partition function is not a positive finite number on '{}'",
            loss.name
        )));
    }
    let boundary_fraction = boundary_mass / z;
    if boundary_fraction > TAIL_MASS_LIMIT {
        return Err(EaeError::TailMass {
            fraction: boundary_fraction,
            limit: TAIL_MASS_LIMIT,
        });
    }
    let free_energy = -z.ln() / beta;
    let grad_finite_difference = (-z_plus.ln() / beta + z_minus.ln() / beta) / (2.0 * FD_STEP);
    let grad_gibbs_expectation = grad_num / z;
    Ok(FreeEnergyCheck {
        free_energy,
        grad_finite_difference,
        grad_gibbs_expectation,
        discrepancy: (grad_finite_difference - grad_gibbs_expectation).abs(),
        boundary_fraction,
    })
}

/// Observed convergence order of the quadrature side of the identity under
/// one grid doubling, measured against a reference gradient (a closed form
/// where available): `log2(err_coarse / err_fine)` with both errors floored
/// at round-off scale.
///
/// The discrepancy field itself cannot carry this study: the gradient
/// identity holds algebraically for the discrete sum at any resolution, so
/// the discrepancy measures only the finite-difference step, not the grid.
/// Convergence to the continuum is visible in the expectation side's error
/// against the exact value. Trapezoid sums are second-order on generic
/// integrands and much faster on smooth decayed ones, so healthy values are
/// at least 2.
pub fn free_energy_convergence_order(
    loss: &ToyLoss,
    theta: f64,
    beta: f64,
    coarse: &QuadratureGrid,
    reference_grad: f64,
) -> Result<f64> {
    if !reference_grad.is_finite() {
        return Err(EaeError::Domain("reference gradient must be finite".into()));
    }
    let fine = coarse.refined(2)?;
    let e_coarse = (free_energy_check(loss, theta, beta, coarse)?.grad_gibbs_expectation
        - reference_grad)
        .abs()
        .max(ORDER_ERROR_FLOOR);
    let e_fine = (free_energy_check(loss, theta, beta, &fine)?.grad_gibbs_expectation
        - reference_grad)
        .abs()
        .max(ORDER_ERROR_FLOOR);
    Ok((e_coarse / e_fine).log2())
}

// ---------------------------------------------------------------------------
// Collective-variable marginal check
// ---------------------------------------------------------------------------

/// Marginal distribution of a scalar collective variable computed two ways.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveMarginal {
    /// Bin edges, `n_bins + 1` ascending values.
    pub bin_edges: Vec<f64>,
    /// Route one: the heat-bath measure pushed through the collective map
    /// and binned, normalized to total mass 1.
    pub pushforward: Vec<f64>,
    /// Route two: the restricted integral of the Boltzmann factor over each
    /// bin's preimage, evaluated on an independently refined grid,
    /// normalized to total mass 1.
    pub restricted: Vec<f64>,
    /// Total-variation distance between the two normalized curves.
    pub total_variation: f64,
}

/// Compare the binned pushforward of the heat-bath measure under a scalar
/// collective map against the restricted-integral construction of the same
/// marginal. `refine` controls how much finer the restricted-integral grid
/// is; `refine = 1` reuses the same nodes and the two routes coincide.
pub fn cv_marginal_check(
    loss: &ToyLoss,
    collective: fn(&[f64]) -> f64,
    theta: f64,
    beta: f64,
    grid: &QuadratureGrid,
    n_bins: usize,
    refine: usize,
) -> Result<CollectiveMarginal> {
    if grid.dims() != loss.n_params {
        return Err(EaeError::Grid(format!(
            "{}-axis grid for a loss over {} parameters",
            grid.dims(),
            loss.n_params
        )));
    }
    if n_bins < 2 {
        return Err(EaeError::Grid("marginal needs at least 2 bins".into()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(EaeError::Domain("inverse temperature must be positive".into()));
    }
    // First pass: find the collective range and check the tails.
    let mut t_lo = f64::INFINITY;
    let mut t_hi = f64::NEG_INFINITY;
    let mut b_lo = f64::INFINITY;
    let mut b_hi = f64::NEG_INFINITY;
    let mut z = 0.0;
    let mut boundary_mass = 0.0;
    grid.visit(|phi, w, on_boundary| {
        let t = collective(phi);
        t_lo = t_lo.min(t);
        t_hi = t_hi.max(t);
        let b = (-beta * (loss.loss)(phi, theta)).exp();
        b_lo = b_lo.min(b);
        b_hi = b_hi.max(b);
        z += b * w;
        if on_boundary {
            boundary_mass += b * w;
        }
    });
    if !(z.is_finite() && z > 0.0 && t_lo.is_finite() && t_hi.is_finite()) {
        return Err(EaeError::Domain(format!(
            "collective-variable sweep is not finite on '{}'",
            loss.name
        )));
    }
    // A constant Boltzmann factor is the pure state-counting regime: there
    // are no tails to decay, so the truncation gate is vacuous. Otherwise
    // the box must capture the measure like the identity check demands.
    let uniform_factor = b_hi - b_lo <= 1e-12 * b_hi;
    let fraction = boundary_mass / z;
    if !uniform_factor && fraction > TAIL_MASS_LIMIT {
        return Err(EaeError::TailMass {
            fraction,
            limit: TAIL_MASS_LIMIT,
        });
    }
    if t_lo == t_hi {
        return Err(EaeError::Domain(
            "collective variable is constant on the grid".into(),
        ));
    }
    let width = (t_hi - t_lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|j| t_lo + j as f64 * width)
        .collect();
    let bin_of = |t: f64| -> usize {
        let raw = ((t - t_lo) / width).floor();
        (raw.max(0.0) as usize).min(n_bins - 1)
    };
    // Route one: pushforward histogram on the given grid.
    let mut pushforward = vec![0.0; n_bins];
    grid.visit(|phi, w, _| {
        let b = (-beta * (loss.loss)(phi, theta)).exp() * w;
        pushforward[bin_of(collective(phi))] += b;
    });
    // Route two: restricted integrals of the Boltzmann factor over the same
    // bins, evaluated on a refined grid.
    let fine = grid.refined(refine)?;
    let mut restricted = vec![0.0; n_bins];
    fine.visit(|phi, w, _| {
        let b = (-beta * (loss.loss)(phi, theta)).exp() * w;
        restricted[bin_of(collective(phi))] += b;
    });
    let sum_a: f64 = pushforward.iter().sum();
    let sum_b: f64 = restricted.iter().sum();
    for v in &mut pushforward {
        *v /= sum_a;
    }
    for v in &mut restricted {
        *v /= sum_b;
    }
    let total_variation = 0.5
        * pushforward
            .iter()
            .zip(&restricted)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok(CollectiveMarginal {
        bin_edges: edges,
        pushforward,
        restricted,
        total_variation,
    })
}
