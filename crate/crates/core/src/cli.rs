//! Command-line front end: `gen-data`, `fit`, `train`, `eval`,
//! `export-bases` and `check-grad`, all writing under one output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::evaluation::evaluate_network;
use crate::fitting::multi_image_fit;
use crate::geometry::{compose_shape, CoeffPair, MorphableModel, Shape};
use crate::io::{
    check_network_dims, create_dir, dataset_from_container, dataset_to_container, fit_to_container,
    model_from_container, model_to_container, network_from_container, network_to_container, read_text,
    write_atomic, write_obj, write_report_csv, write_table, Container, Field, RunConfig, Table,
};
use crate::network::{finite_diff_check, train_all_phases, Batch, FaceNet};
use crate::synthetic::{build_dataset, generate_model, Dataset, Split};

/// Largest finite-difference discrepancy `check-grad` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

/// Samples in the `check-grad` batch.
const GRAD_CHECK_BATCH: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "morphface", version, about = "Synthetic morphable-model fitting and identity disentangling")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable. Applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic model and dataset and write them to `<out>/data`.
    GenData,
    /// Fit one stored subject from its landmarks into `<out>/fit`.
    Fit,
    /// Run training Phases I to III on the stored dataset into `<out>/train`.
    Train,
    /// Evaluate the Phase II and Phase III networks on the test split into `<out>/eval`.
    Eval,
    /// Write decoder weight columns as OBJ point clouds into `<out>/bases`.
    ExportBases {
        /// Columns exported per decoder.
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Compare back-propagated gradients with central differences.
    CheckGrad {
        /// Network checkpoint to audit; a fresh random network when omitted.
        #[arg(long, value_name = "FILE")]
        network: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// runtime error (one `error: kind=... msg="..."` line on stderr), 2 on a
/// usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Single-line machine-readable form of an error.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error: kind={} msg=\"{msg}\"", e.kind())
}

/// Defaults, then the config file, then `--set`, then `--seed` and `--out`.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_text(&read_text(path)?)?;
    }
    for item in &cli.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}` is not KEY=VALUE")))?;
        config.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<()> {
    let config = effective_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&config),
        Command::Fit => fit(&config),
        Command::Train => train(&config),
        Command::Eval => eval(&config),
        Command::ExportBases { count } => export_bases(&config, *count),
        Command::CheckGrad { network } => check_grad(&config, network.as_deref()),
    }
}

/// Creates `<output_dir>/<stage>` and echoes the effective config into it.
fn stage_dir(config: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = config.output_dir.join(stage);
    create_dir(&dir)?;
    write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;
    Ok(dir)
}

fn load_data(config: &RunConfig) -> Result<(MorphableModel, Dataset)> {
    let dir = config.output_dir.join("data");
    let model = model_from_container(&Container::load(&dir.join("model.bin"))?)?;
    let data = dataset_from_container(&Container::load(&dir.join("dataset.bin"))?)?;
    Ok((model, data))
}

fn load_network(path: &Path, model: &MorphableModel, data: &Dataset) -> Result<FaceNet> {
    let net = network_from_container(&Container::load(path)?)?;
    let input_dim = data.samples.first().map_or(0, |s| s.depth.pixels.len());
    check_network_dims(&net, model, input_dim)?;
    Ok(net)
}

fn gen_data(config: &RunConfig) -> Result<()> {
    let dir = stage_dir(config, "data")?;
    let model = generate_model(&config.model)?;
    let data = build_dataset(&model, &config.data)?;
    let text = config.to_text();
    model_to_container(&model, &text).save(&dir.join("model.bin"))?;
    dataset_to_container(&data, &text).save(&dir.join("dataset.bin"))?;
    write_obj(&model.mean, &dir.join("mean.obj"))?;
    println!("gen-data: {} samples of {} subjects in {}", data.samples.len(), data.n_subjects, dir.display());
    Ok(())
}

fn identity_shape(model: &MorphableModel, alpha_id: &DVector<f64>) -> Result<Shape> {
    compose_shape(model, &CoeffPair::new(alpha_id.clone(), DVector::zeros(model.k_exp()))?)
}

fn fit(config: &RunConfig) -> Result<()> {
    let (model, data) = load_data(config)?;
    let subject: Vec<_> = data.samples.iter().filter(|s| s.subject_label == config.fit_subject).collect();
    if subject.len() < config.fit_images {
        return Err(Error::Config(format!(
            "subject {} has {} images, fit.images is {}",
            config.fit_subject,
            subject.len(),
            config.fit_images
        )));
    }
    let used = &subject[..config.fit_images];
    let landmarks: Vec<_> = used.iter().map(|s| s.landmarks.clone()).collect();
    let result = multi_image_fit(&model, &landmarks, &config.fit)?;

    let dir = stage_dir(config, "fit")?;
    fit_to_container(&result, &config.to_text()).save(&dir.join("fit.bin"))?;
    write_report_csv(&result, &dir.join("fit_trace.csv"))?;
    let fitted = identity_shape(&model, &result.alpha_id)?;
    let truth = identity_shape(&model, &used[0].coeffs.alpha_id)?;
    let error = fitted
        .points()
        .iter()
        .zip(truth.points())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    write_table(
        &Table {
            header: vec!["iterations_used", "converged", "identity_max_vertex_error"],
            rows: vec![vec![
                Field::U(result.iterations_used as u64),
                Field::U(result.converged as u64),
                Field::F(error),
            ]],
        },
        &dir.join("fit_summary.csv"),
    )?;
    write_obj(&fitted, &dir.join("identity.obj"))?;
    for (i, state) in result.per_image.iter().enumerate() {
        let shape = compose_shape(&model, &CoeffPair::new(result.alpha_id.clone(), state.alpha_exp.clone())?)?;
        write_obj(&shape, &dir.join(format!("full_{i}.obj")))?;
    }
    println!(
        "fit: iterations_used={} converged={} identity_max_vertex_error={error:e}",
        result.iterations_used, result.converged
    );
    Ok(())
}

fn train(config: &RunConfig) -> Result<()> {
    let (model, data) = load_data(config)?;
    let mut shape = config.network_shape(data.n_train_subjects);
    shape.input_dim = data.samples.first().map_or(0, |s| s.depth.pixels.len());
    shape.q_id = model.k_id();
    shape.q_res = model.k_exp();
    shape.output_dim = 3 * model.n_vertices();
    let run = train_all_phases(
        &model,
        &data,
        &shape,
        &config.phase1,
        config.decoder_extra_draws,
        &config.phase3,
        config.seed,
    )?;
    let dir = stage_dir(config, "train")?;
    let text = config.to_text();
    write_report_csv(run.phase1_trace.as_slice(), &dir.join("phase1_trace.csv"))?;
    network_to_container(&run.phase2, &text).save(&dir.join("network_phase2.bin"))?;
    network_to_container(&run.phase3.net, &text).save(&dir.join("network.bin"))?;
    write_report_csv(run.phase3.trace.as_slice(), &dir.join("phase3_trace.csv"))?;
    if let Some(reason) = &run.phase3.aborted {
        eprintln!("warning: phase III stopped early and kept the last finite network: {reason}");
    }
    let last = run.phase3.trace.last();
    println!(
        "train: {} parameters, phase III epochs {}, final train loss {}",
        run.phase2.n_parameters(),
        run.phase3.trace.len(),
        last.map_or(f64::NAN, |r| r.train.total)
    );
    Ok(())
}

fn eval(config: &RunConfig) -> Result<()> {
    let (model, data) = load_data(config)?;
    let test = data.subset(Split::Test);
    let train_dir = config.output_dir.join("train");
    let dir = stage_dir(config, "eval")?;
    for (tag, file) in [("phase2", "network_phase2.bin"), ("phase3", "network.bin")] {
        let net = load_network(&train_dir.join(file), &model, &data)?;
        let e = evaluate_network(&net, &model, &test, config.eval_crop_radius, config.eval_folds, config.seed)?;
        write_report_csv(&e.verification, &dir.join(format!("{tag}_verification.csv")))?;
        write_report_csv(&(e.reconstruction, config.eval_crop_radius), &dir.join(format!("{tag}_reconstruction.csv")))?;
        write_report_csv(&e.disentangling, &dir.join(format!("{tag}_disentangling.csv")))?;
        println!(
            "eval {tag}: auc={} rmse={} displacement_ratio={}",
            e.verification.auc,
            e.reconstruction.rmse,
            e.disentangling.displacement_ratio.map_or("undefined".into(), |r| r.to_string())
        );
    }
    Ok(())
}

fn export_bases(config: &RunConfig, count: usize) -> Result<()> {
    let (model, data) = load_data(config)?;
    let net = load_network(&config.output_dir.join("train").join("network.bin"), &model, &data)?;
    let dir = stage_dir(config, "bases")?;
    let d = &net.decoder;
    for (tag, weight) in [("id", &d.weight_id), ("res", &d.weight_res)] {
        for j in 0..count.min(weight.ncols()) {
            let coords: Vec<f64> = model.mean.coords().iter().zip(weight.column(j).iter()).map(|(m, w)| m + w).collect();
            write_obj(&Shape::new(coords)?, &dir.join(format!("{tag}_basis_{j:02}.obj")))?;
        }
    }
    println!("export-bases: wrote {} columns per decoder to {}", count, dir.display());
    Ok(())
}

fn check_grad(config: &RunConfig, network: Option<&Path>) -> Result<()> {
    let (model, data, net) = match network {
        Some(path) => {
            let (model, data) = load_data(config)?;
            let net = load_network(path, &model, &data)?;
            (model, data, net)
        }
        None => {
            let model = generate_model(&config.model)?;
            let data = build_dataset(&model, &config.data)?;
            let net = FaceNet::random(&config.network_shape(data.n_train_subjects), config.seed);
            (model, data, net)
        }
    };
    let train = data.subset(Split::Train);
    let batch = Batch::from_samples(&train[..GRAD_CHECK_BATCH.min(train.len())], &model.mean)?;
    let report = finite_diff_check(&net, &batch, 1.0, config.grad_check_step, config.grad_check_params, config.seed)?;
    println!("check-grad: max_rel_error={:e} n_checked={}", report.max_rel_error, report.n_checked);
    if report.max_rel_error < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!(
            "max relative gradient error {:e} exceeds {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}
