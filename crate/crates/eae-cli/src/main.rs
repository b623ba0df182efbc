//! Batch experiment runner: seeded, config-driven training, latent
//! sampling, diagnostics, and latent-dynamics recovery with
//! machine-readable outputs.
//!
//! Exit codes: 0 success, 1 failed verification tolerance, 2 configuration
//! error, 3 numeric failure. Every command is deterministic given the
//! config and seed, and primary outputs are byte-identical across re-runs.

mod config;
mod verify;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use eae_core::datasets::Dataset;
use eae_core::diagnostics::{
    class_conditional_latents, ensemble_mean_code, interpolate_codes, latent_activity,
    write_kde_csv,
};
use eae_core::dynamics::{
    coefficient_correlation, coefficient_stats, estimate_xi, integrate_latent_ode,
    write_coefficient_table, write_correlation_csv, BasisLibrary, DynamicsWeights,
};
use eae_core::error::EaeError;
use eae_core::networks::{
    test_mse, vae_test_mse, AutoencoderModel, Checkpoint, ModelKind, VaeModel,
};
use eae_core::tensor::{forward, jvp, ParamVector, Tensor};
use eae_core::training::{
    ae_train, eae_sample_latents, eae_train, vae_train, EncoderEnsemble, LatentEnsemble,
    ObjectiveSpec, Termination, TrainConfig, TrainSet,
};
use eae_core::Result;

use config::{ExperimentConfig, ObjectiveKind, TrainerKind};

#[derive(Parser)]
#[command(
    name = "eae",
    about = "Entropic-autoencoder experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured model and write checkpoints plus reports.
    Train(RunArgs),
    /// Push the test split through every stored encoder sample.
    Sample(RunArgs),
    /// Reconstruction error, latent activity, class densities,
    /// interpolations.
    Diagnose(RunArgs),
    /// Fit latent vector-field coefficients per encoder sample and roll the
    /// recovered model forward.
    Dynamics(RunArgs),
    /// Run the numerical verification suite and write a summary.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Directory for the summary file (defaults to the working directory).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Self-test: flip the sign of the thermostat chain force, which must
    /// make the sampler-fidelity checks fail.
    #[arg(long)]
    flip_chain_force: bool,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Train(a) => run_or_report(cmd_train(&a)),
        Cmd::Sample(a) => run_or_report(cmd_sample(&a)),
        Cmd::Diagnose(a) => run_or_report(cmd_diagnose(&a)),
        Cmd::Dynamics(a) => run_or_report(cmd_dynamics(&a)),
        Cmd::Verify(a) => run_or_report(cmd_verify(&a)),
    };
    std::process::exit(code);
}

fn run_or_report(result: Result<i32>) -> i32 {
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// 2 for anything wrong with the configuration or artifacts on disk, 3 for
/// numerical failure during compute.
fn exit_code_for(err: &EaeError) -> i32 {
    match err {
        EaeError::Config(_)
        | EaeError::Shape(_)
        | EaeError::InvalidNetwork(_)
        | EaeError::DimensionMismatch { .. }
        | EaeError::Format { .. }
        | EaeError::Json(_)
        | EaeError::Io(_)
        | EaeError::InsufficientData(_) => 2,
        EaeError::NonFinite { .. }
        | EaeError::Singular { .. }
        | EaeError::Domain(_)
        | EaeError::Grid(_)
        | EaeError::TailMass { .. }
        | EaeError::Stability(_)
        | EaeError::Divergence { .. } => 3,
    }
}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.output {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    Ok((cfg, out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn build_train_config(cfg: &ExperimentConfig, latent_dim: usize) -> Result<TrainConfig> {
    let objective = match cfg.trainer.objective {
        ObjectiveKind::Reconstruction => ObjectiveSpec::Reconstruction(cfg.model.loss),
        ObjectiveKind::Dynamics => ObjectiveSpec::Dynamics {
            library: BasisLibrary::polynomials_with_sines(latent_dim, cfg.dynamics.poly_order)?,
            weights: DynamicsWeights {
                lambda1: cfg.dynamics.lambda1,
                lambda2: cfg.dynamics.lambda2,
            },
        },
    };
    // Baselines never read the thermostat; fill a valid placeholder when
    // the config has none.
    let thermostat = match &cfg.thermostat {
        Some(t) => t.to_config(cfg.seed),
        None => eae_core::sampler::ThermostatConfig {
            temperature: 1.0,
            particle_mass: 1.0,
            chain_length: 1,
            chain_mass: None,
            step_size: 0.01,
            velocity_resample_period: 0,
            rng_seed: 0,
        },
    };
    Ok(TrainConfig {
        ensemble_size: cfg.trainer.ensemble_size,
        minibatch_size: cfg.trainer.minibatch_size,
        grad_tolerance: cfg.trainer.grad_tolerance,
        max_outer_iterations: cfg.trainer.max_outer_iterations,
        epochs: cfg.trainer.epochs,
        learning_rate: cfg.trainer.learning_rate,
        objective,
        thermostat,
        burn_in_discard: cfg.trainer.burn_in_discard,
        rng_seed: cfg.seed,
    })
}

fn train_view<'a>(train: &'a Dataset, needs_derivatives: bool) -> Result<TrainSet<'a>> {
    if needs_derivatives {
        match &train.time_derivatives {
            Some(d) => TrainSet::with_derivatives(&train.inputs, d),
            None => Err(EaeError::Config(
                "the dynamics objective needs a dataset with time derivatives".into(),
            )),
        }
    } else {
        Ok(TrainSet::inputs_only(&train.inputs))
    }
}

fn cmd_train(args: &RunArgs) -> Result<i32> {
    let (cfg, out) = load_config(args)?;
    std::fs::create_dir_all(&out)?;
    write_text(&out.join("resolved_config.json"), &cfg.resolved_json()?)?;

    let (train, _, _) = cfg.build_splits()?;
    let needs_derivs = cfg.trainer.objective == ObjectiveKind::Dynamics;
    let data = train_view(&train, needs_derivs)?;

    let termination = match cfg.trainer.kind {
        TrainerKind::Eae => {
            let model =
                AutoencoderModel::new(cfg.model.encoder.spec()?, cfg.model.decoder.spec()?)?;
            let tc = build_train_config(&cfg, model.latent_dim)?;
            let output = eae_train(&model, &data, &tc)?;
            Checkpoint::autoencoder(
                &model,
                cfg.model.loss,
                cfg.seed,
                output.encoder.clone(),
                output.decoder.clone(),
            )
            .save(&out.join("checkpoint.bin"))?;
            output.ensemble.save(&out.join("ensemble.bin"))?;
            let mut report = Vec::new();
            output.report.write_csv(&mut report)?;
            std::fs::write(out.join("train_report.csv"), report)?;
            let final_loss = output
                .report
                .outer
                .last()
                .map(|r| r.post_update_loss)
                .unwrap_or(f64::NAN);
            let summary = serde_json::json!({
                "trainer": "eae",
                "termination": output.report.termination,
                "outer_iterations": output.report.outer.len(),
                "stored_members": output.ensemble.len(),
                "final_grad_norm": output.report.final_grad_norm(),
                "final_loss": final_loss,
            });
            write_text(&out.join("run_summary.json"), &format!("{summary:#}\n"))?;
            output.report.termination
        }
        TrainerKind::Ae | TrainerKind::Vae => {
            let tc = build_train_config(&cfg, cfg.model.decoder.spec()?.input_width())?;
            let output = if cfg.trainer.kind == TrainerKind::Ae {
                let model =
                    AutoencoderModel::new(cfg.model.encoder.spec()?, cfg.model.decoder.spec()?)?;
                let o = ae_train(&model, &data, &tc)?;
                Checkpoint::autoencoder(
                    &model,
                    cfg.model.loss,
                    cfg.seed,
                    o.encoder.clone(),
                    o.decoder.clone(),
                )
                .save(&out.join("checkpoint.bin"))?;
                o
            } else {
                let model = VaeModel::new(cfg.model.encoder.spec()?, cfg.model.decoder.spec()?)?;
                let o = vae_train(&model, &data, &tc)?;
                Checkpoint::vae(
                    &model,
                    cfg.model.loss,
                    cfg.seed,
                    o.encoder.clone(),
                    o.decoder.clone(),
                )
                .save(&out.join("checkpoint.bin"))?;
                o
            };
            let mut csv = String::from("epoch,loss\n");
            for (i, loss) in output.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{loss}\n"));
            }
            write_text(&out.join("epoch_losses.csv"), &csv)?;
            let summary = serde_json::json!({
                "trainer": cfg.trainer.kind.name(),
                "termination": output.termination,
                "epochs": output.epoch_losses.len(),
                "final_loss": output.epoch_losses.last().copied().unwrap_or(f64::NAN),
            });
            write_text(&out.join("run_summary.json"), &format!("{summary:#}\n"))?;
            output.termination
        }
    };

    if let Termination::NonFinite { .. } = termination {
        eprintln!("training aborted on a non-finite loss; last good state kept");
        return Ok(3);
    }
    println!("training complete: artifacts in {}", out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

fn load_checkpoint(out: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&out.join("checkpoint.bin"))
}

fn cmd_sample(args: &RunArgs) -> Result<i32> {
    let (cfg, out) = load_config(args)?;
    let ckpt = load_checkpoint(&out)?;
    let (_, _, test) = cfg.build_splits()?;
    let latents = test_latents(&cfg, &out, &ckpt, &test.inputs)?;
    let mut buf = Vec::new();
    latents.write_csv(&mut buf)?;
    std::fs::write(out.join("latents.csv"), buf)?;
    println!(
        "wrote {} member x {} query latents to {}",
        latents.n_members(),
        latents.n_queries(),
        out.join("latents.csv").display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

/// Latents of the test queries: every stored encoder sample for the
/// ensemble trainer, the single trained encoder for the baselines.
fn test_latents(
    cfg: &ExperimentConfig,
    out: &Path,
    ckpt: &Checkpoint,
    test_inputs: &Tensor,
) -> Result<LatentEnsemble> {
    match ckpt.kind {
        ModelKind::Autoencoder => {
            let model = ckpt.autoencoder_model()?;
            if cfg.trainer.kind == TrainerKind::Eae {
                let ensemble = EncoderEnsemble::load(&out.join("ensemble.bin"))?;
                eae_sample_latents(&model, &ensemble, test_inputs)
            } else {
                let single = EncoderEnsemble {
                    members: vec![ckpt.encoder_params.clone()],
                    decoder_gradients: vec![ParamVector::zeros(1)],
                };
                eae_sample_latents(&model, &single, test_inputs)
            }
        }
        ModelKind::Vae => {
            let model = ckpt.vae_model()?;
            let means = model.encode_means(&ckpt.encoder_params, test_inputs)?;
            LatentEnsemble::from_members(&[means])
        }
    }
}

/// Per-query code averaged over ensemble members.
fn mean_codes(latents: &LatentEnsemble) -> Tensor {
    let (m, q, n_z) = (latents.n_members(), latents.n_queries(), latents.n_z());
    let mut data = vec![0.0; q * n_z];
    for member in 0..m {
        for query in 0..q {
            let row = latents.latent(member, query);
            for (slot, v) in data[query * n_z..(query + 1) * n_z].iter_mut().zip(row) {
                *slot += v;
            }
        }
    }
    for v in data.iter_mut() {
        *v /= m as f64;
    }
    Tensor::new(vec![q, n_z], data).expect("mean codes keep the latent shape")
}

fn decode_code(ckpt: &Checkpoint, code: &[f64]) -> Result<Vec<f64>> {
    let z = Tensor::new(vec![1, code.len()], code.to_vec())?;
    let y = forward(&ckpt.decoder, &ckpt.decoder_params, &z)?;
    Ok(y.data().to_vec())
}

fn cmd_diagnose(args: &RunArgs) -> Result<i32> {
    let (cfg, out) = load_config(args)?;
    let ckpt = load_checkpoint(&out)?;
    let (_, _, test) = cfg.build_splits()?;
    let latents = test_latents(&cfg, &out, &ckpt, &test.inputs)?;

    let codes = mean_codes(&latents);
    let activity = latent_activity(&codes, cfg.diagnostics.activity_threshold)?;
    let mut buf = Vec::new();
    activity.write_csv(&mut buf)?;
    std::fs::write(out.join("activity.csv"), buf)?;

    let mse = match ckpt.kind {
        ModelKind::Autoencoder => {
            let model = ckpt.autoencoder_model()?;
            test_mse(
                &model,
                &ckpt.encoder_params,
                &ckpt.decoder_params,
                &test.inputs,
                ckpt.loss,
            )?
        }
        ModelKind::Vae => {
            let model = ckpt.vae_model()?;
            vae_test_mse(
                &model,
                &ckpt.encoder_params,
                &ckpt.decoder_params,
                &test.inputs,
                ckpt.loss,
            )?
        }
    };

    // Per-class latent densities, when the data is labeled.
    let mut kde_files = Vec::new();
    if let Some(labels) = &test.labels {
        let dists = class_conditional_latents(&latents, labels, &cfg.diagnostics.kde_dims)?;
        for dist in &dists {
            let name = format!("kde_class{}_dim{}.csv", dist.class_label, dist.dim);
            let mut buf = Vec::new();
            write_kde_csv(&dist.grid, &dist.density, &mut buf)?;
            std::fs::write(out.join(&name), buf)?;
            kde_files.push(name);
        }
    }

    // Interpolations between class-mean codes, decoded back to data space.
    let pairs = interpolation_pairs(&cfg, test.labels.as_deref());
    for [a, b] in &pairs {
        let idx_a = label_indices(test.labels.as_deref(), *a)?;
        let idx_b = label_indices(test.labels.as_deref(), *b)?;
        let code_a = ensemble_mean_code(&latents, Some(&idx_a))?;
        let code_b = ensemble_mean_code(&latents, Some(&idx_b))?;
        let mut csv = String::from("alpha");
        for i in 1..=ckpt.decoder.output_width() {
            csv.push_str(&format!(",y_{i}"));
        }
        csv.push('\n');
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            // alpha = 0 sits on class a, alpha = 1 on class b.
            let code = interpolate_codes(&code_b, &code_a, alpha)?;
            let decoded = decode_code(&ckpt, &code)?;
            csv.push_str(&format!("{alpha}"));
            for v in decoded {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        write_text(&out.join(format!("interpolation_{a}_{b}.csv")), &csv)?;
    }

    let report = serde_json::json!({
        "trainer": cfg.trainer.kind.name(),
        "test_rows": test.n_rows(),
        "test_mse": mse,
        "active_units": activity.active_count(),
        "latent_dims": activity.total_dims(),
        "kde_files": kde_files,
        "interpolation_pairs": pairs,
    });
    write_text(&out.join("diagnostics.json"), &format!("{report:#}\n"))?;
    println!(
        "test mse {mse}: {} of {} latent dimensions active",
        activity.active_count(),
        activity.total_dims()
    );
    Ok(0)
}

/// Configured pairs, or the two lowest class labels present.
fn interpolation_pairs(cfg: &ExperimentConfig, labels: Option<&[usize]>) -> Vec<[usize; 2]> {
    if !cfg.diagnostics.interpolation_pairs.is_empty() {
        return cfg.diagnostics.interpolation_pairs.clone();
    }
    let Some(labels) = labels else {
        return Vec::new();
    };
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() >= 2 {
        vec![[classes[0], classes[1]]]
    } else {
        Vec::new()
    }
}

fn label_indices(labels: Option<&[usize]>, class: usize) -> Result<Vec<usize>> {
    let labels = labels.ok_or_else(|| {
        EaeError::Config("interpolation pairs need a labeled dataset".into())
    })?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == class).then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(EaeError::Config(format!(
            "no test rows carry class label {class}"
        )));
    }
    Ok(idx)
}

// ---------------------------------------------------------------------------
// dynamics
// ---------------------------------------------------------------------------

fn cmd_dynamics(args: &RunArgs) -> Result<i32> {
    let (cfg, out) = load_config(args)?;
    let ckpt = load_checkpoint(&out)?;
    let model = ckpt.autoencoder_model()?;
    let (_, _, test) = cfg.build_splits()?;
    let lib = BasisLibrary::polynomials_with_sines(model.latent_dim, cfg.dynamics.poly_order)?;

    if cfg.dynamics.use_true_latents {
        // Oracle mode: fit on the generator's own latent trajectory.
        let z = test.true_latents.as_ref().ok_or_else(|| {
            EaeError::Config("oracle mode needs a dataset with ground-truth latents".into())
        })?;
        let dz = test
            .true_latent_derivatives
            .as_ref()
            .expect("latent trajectories come with derivatives");
        let xi = estimate_xi(&lib, z, dz)?;
        let mut csv = String::from("basis");
        for c in 1..=lib.n_z() {
            csv.push_str(&format!(",xi_dz{c}"));
        }
        csv.push('\n');
        for (j, name) in lib.names().iter().enumerate() {
            csv.push_str(name);
            for c in 0..lib.n_z() {
                csv.push_str(&format!(",{}", xi.row(j)[c]));
            }
            csv.push('\n');
        }
        write_text(&out.join("xi_oracle.csv"), &csv)?;
        let traj = integrate_latent_ode(
            &lib,
            &xi,
            z.row(0),
            cfg.dynamics.integrate_dt,
            cfg.dynamics.integrate_steps,
        )?;
        write_trajectory(&out.join("trajectory.csv"), &traj, cfg.dynamics.integrate_dt)?;
        println!("oracle fit written to {}", out.join("xi_oracle.csv").display());
        return Ok(0);
    }

    let derivs = test.time_derivatives.as_ref().ok_or_else(|| {
        EaeError::Config("dynamics recovery needs a dataset with time derivatives".into())
    })?;
    let ensemble = EncoderEnsemble::load(&out.join("ensemble.bin"))?;
    let n_use = cfg.dynamics.n_samples.min(ensemble.members.len());
    if n_use < 2 {
        return Err(EaeError::InsufficientData(
            "coefficient statistics need at least two stored encoder samples".into(),
        ));
    }
    // The most recent samples are the best equilibrated.
    let members = &ensemble.members[ensemble.members.len() - n_use..];
    let mut xis = Vec::with_capacity(n_use);
    for params in members {
        let z_hat = forward(&model.encoder, params, &test.inputs)?;
        let dz_hat = jvp(&model.encoder, params, &test.inputs, derivs)?;
        xis.push(estimate_xi(&lib, &z_hat, &dz_hat)?);
    }
    let stats = coefficient_stats(&xis)?;
    let mut buf = Vec::new();
    write_coefficient_table(&mut buf, &lib, &stats)?;
    std::fs::write(out.join("coefficients.csv"), buf)?;
    let corr = coefficient_correlation(&xis, &lib, &stats)?;
    let mut buf = Vec::new();
    write_correlation_csv(&mut buf, &corr)?;
    std::fs::write(out.join("correlations.csv"), buf)?;

    // Roll the significance-masked mean field forward from the earliest
    // test snapshot's (member-averaged) encoding.
    let mut xi_masked = stats.mean.clone();
    for j in 0..lib.len() {
        for c in 0..lib.n_z() {
            if !stats.is_significant(j, c) {
                xi_masked.data_mut()[j * lib.n_z() + c] = 0.0;
            }
        }
    }
    let first_row = Tensor::new(vec![1, test.n_features()], test.inputs.row(0).to_vec())?;
    let mut z0 = vec![0.0; model.latent_dim];
    for params in members {
        let z = forward(&model.encoder, params, &first_row)?;
        for (slot, v) in z0.iter_mut().zip(z.data()) {
            *slot += v;
        }
    }
    for v in z0.iter_mut() {
        *v /= n_use as f64;
    }
    let traj = integrate_latent_ode(
        &lib,
        &xi_masked,
        &z0,
        cfg.dynamics.integrate_dt,
        cfg.dynamics.integrate_steps,
    )?;
    write_trajectory(&out.join("trajectory.csv"), &traj, cfg.dynamics.integrate_dt)?;
    println!(
        "fitted {} coefficient matrices: {} significant terms",
        xis.len(),
        stats.n_significant()
    );
    Ok(0)
}

fn write_trajectory(path: &Path, traj: &Tensor, dt: f64) -> Result<()> {
    let mut csv = String::from("t");
    for c in 1..=traj.width() {
        csv.push_str(&format!(",z_{c}"));
    }
    csv.push('\n');
    for s in 0..traj.rows() {
        csv.push_str(&format!("{}", s as f64 * dt));
        for v in traj.row(s) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_text(path, &csv)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let outcomes = verify::run_all(args.flip_chain_force);
    let all_passed = outcomes.iter().all(|c| c.passed);
    for c in &outcomes {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("{mark} {} ({})", c.name, c.detail);
    }
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    let summary = serde_json::json!({
        "all_passed": all_passed,
        "checks": outcomes
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "passed": c.passed,
                    "detail": c.detail,
                })
            })
            .collect::<Vec<_>>(),
    });
    write_text(&out.join("verify_summary.json"), &format!("{summary:#}\n"))?;
    if all_passed {
        Ok(0)
    } else {
        let failed: Vec<&str> = outcomes
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(1)
    }
}
