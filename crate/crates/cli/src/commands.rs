//! The pipeline stages. Each reads its inputs from the run directory,
//! checks their hashes against what upstream stages recorded, writes its
//! outputs and finally its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use brainsbi_core::diagnostics::{
    calibration_report, cycle_report, export_recovery_plot_data, max_off_diagonal, recovery_report,
    CalibrationReport, RecoveryReport,
};
use brainsbi_core::emulator::{simulate_dataset, Dataset, Simulation, SyntheticEmulator};
use brainsbi_core::flow::PosteriorDraws;
use brainsbi_core::model::Amortizer;
use brainsbi_core::params::{balanced_assignment, Dimension, ScoreVector, Topic, NUM_DIMS};
use brainsbi_core::rng::{stream, Stream};
use brainsbi_core::stimulus::{
    build_forward_prompt, check_uniqueness, generate_external, generate_mock, invert_external, invert_mock,
    ChatEndpoint, ForwardOptions, HttpTransport, StimulusSet,
};
use brainsbi_core::summary::Preprocessor;
use brainsbi_core::trainer::{run_schedule, split_dataset, FlowTrainer, TrainReport};
use brainsbi_core::workflow::{build_examples, fit_preprocessor, sample_all};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::config::{GeneratorKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{fresh_dir, hash_dir, Layout, Stage, StageManifest};

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path, hint: Stage) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency(format!(
            "{} is missing; run `brainsbi {}` first",
            path.display(),
            hint.name()
        )))
    }
}

fn expect_hash(what: &str, recorded: Option<&str>, current: &str) -> CliResult<()> {
    match recorded {
        Some(r) if r == current => Ok(()),
        Some(r) => Err(CliError::Stale(format!(
            "{what} changed since it was consumed (recorded {}, found {}); rerun the downstream stages",
            &r[..r.len().min(12)],
            &current[..current.len().min(12)]
        ))),
        None => Err(CliError::Stale(format!("no recorded hash for {what}"))),
    }
}

fn upstream(layout: &Layout, stage: Stage) -> CliResult<StageManifest> {
    let path = layout.manifest(stage);
    require(&path, stage)?;
    StageManifest::read(&path)
}

fn load_dataset(dir: &Path) -> CliResult<(Dataset, String)> {
    require(&dir.join("manifest.json"), Stage::Simulate)?;
    let hash = hash_dir(dir)?;
    Ok((Dataset::load(dir)?, hash))
}

fn truths(sims: &[Simulation]) -> Array2<f64> {
    Array2::from_shape_fn((sims.len(), NUM_DIMS), |(i, j)| sims[i].theta.values()[j])
}

/// Runs `job` with at most `limit` worker threads.
fn bounded<T: Send>(limit: usize, job: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(job))
}

fn endpoint(config: &RunConfig) -> CliResult<&ChatEndpoint> {
    config
        .generator
        .external
        .as_ref()
        .ok_or_else(|| CliError::Config("generator: missing [generator.external] table".into()))
}

fn simulate_split(
    config: &RunConfig,
    emulator: &SyntheticEmulator,
    per_topic: usize,
    assignment_seed: u64,
    simulation_seed: u64,
) -> CliResult<Vec<Simulation>> {
    let assignment = balanced_assignment(per_topic, &mut stream(assignment_seed))?;
    let sims = match config.generator.kind {
        GeneratorKind::None => simulate_dataset(&assignment, emulator, None, simulation_seed)?,
        GeneratorKind::Mock => {
            let generator = |theta: &ScoreVector, topic: Topic, rng: &mut Stream| Ok(generate_mock(theta, topic, rng));
            simulate_dataset(&assignment, emulator, Some(&generator), simulation_seed)?
        }
        GeneratorKind::External => {
            let ep = endpoint(config)?;
            let transport = HttpTransport::from_env(ep)?;
            let opts = ForwardOptions::default();
            let generator = |theta: &ScoreVector, topic: Topic, _: &mut Stream| {
                generate_external(&build_forward_prompt(theta, topic, opts), topic, opts, ep, &transport)
            };
            bounded(config.generator.max_concurrency, || {
                simulate_dataset(&assignment, emulator, Some(&generator), simulation_seed)
            })??
        }
    };
    Ok(sims)
}

pub fn simulate(config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    let seeds = config.seeds();
    let emulator = SyntheticEmulator::new(config.emulator.clone())?;
    let mut manifest = StageManifest::new(Stage::Simulate, config);
    let splits = [
        (
            "train_dataset",
            layout.train_data(),
            config.prior.per_topic_train,
            seeds.train_assignment,
            seeds.train_simulation,
        ),
        (
            "validation_dataset",
            layout.validation_data(),
            config.prior.per_topic_validation,
            seeds.validation_assignment,
            seeds.validation_simulation,
        ),
    ];
    for (name, dir, per_topic, a_seed, s_seed) in splits {
        let sims = simulate_split(config, &emulator, per_topic, a_seed, s_seed)?;
        fresh_dir(&dir)?;
        let count = sims.len();
        Dataset::new(sims, s_seed, config.emulator.clone()).save(&dir)?;
        manifest.outputs.insert(name.into(), hash_dir(&dir)?);
        println!("simulate: {count} {} sequences -> {}", name.trim_end_matches("_dataset"), dir.display());
    }
    manifest.write(layout)?;
    Ok(manifest)
}

pub fn fit_summary(config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    let (train, data_hash) = load_dataset(&layout.train_data())?;
    let pre = fit_preprocessor(&train.simulations, config.summary.t_max, config.summary.components, &data_hash)?;
    let dir = layout.preprocessor();
    fresh_dir(&dir)?;
    pre.save(&dir)?;
    let mut manifest = StageManifest::new(Stage::FitSummary, config);
    manifest.inputs.insert("train_dataset".into(), data_hash);
    manifest.outputs.insert("preprocessor".into(), hash_dir(&dir)?);
    manifest.write(layout)?;
    println!(
        "fit-summary: k = {} ({:?}) over {} vertices -> {}",
        pre.k(),
        pre.pca.method,
        pre.standardizer.vertices(),
        dir.display()
    );
    Ok(manifest)
}

pub fn train(config: &RunConfig, layout: &Layout) -> CliResult<(StageManifest, TrainReport)> {
    let (data, data_hash) = load_dataset(&layout.train_data())?;
    require(&layout.preprocessor().join("manifest.json"), Stage::FitSummary)?;
    let pre = Preprocessor::load(&layout.preprocessor())?;
    let pre_hash = hash_dir(&layout.preprocessor())?;
    expect_hash("the training dataset", Some(&pre.dataset_hash), &data_hash)?;
    if pre.k() != config.summary.components {
        return Err(CliError::Stale(format!(
            "preprocessor has k = {} but the config asks for {}; rerun fit-summary",
            pre.k(),
            config.summary.components
        )));
    }

    let examples = build_examples(&data.simulations, &pre, config.summary.t_max)?;
    let topics: Vec<Topic> = data.simulations.iter().map(|s| s.topic).collect();
    let seeds = config.seeds();
    let (train_idx, val_idx) = split_dataset(&topics, config.train.val_fraction, &mut stream(seeds.split))?;
    let train_set: Vec<_> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val_set: Vec<_> = val_idx.iter().map(|&i| examples[i].clone()).collect();

    let train_config = config.train_config();
    let (model, store) = Amortizer::init::<f32>(config.model_config(), seeds.training)?;
    let mut trainer = FlowTrainer::new(model, store, &train_set, &val_set, &train_config)?;
    trainer.checkpoint_metadata = json!({
        "train_dataset": data_hash,
        "preprocessor": pre_hash,
        "train_examples": train_set.len(),
        "validation_examples": val_set.len(),
    });
    let ckpt = layout.checkpoint();
    fresh_dir(&ckpt)?;
    pre.save(&layout.checkpoint_preprocessor())?;
    let report = run_schedule(&mut trainer, &train_config, Some(&ckpt))?;
    let report_dir = layout.training();
    fresh_dir(&report_dir)?;
    report.save(&report_dir)?;

    let mut manifest = StageManifest::new(Stage::Train, config);
    manifest.inputs.insert("train_dataset".into(), data_hash);
    manifest.inputs.insert("preprocessor".into(), pre_hash);
    manifest.outputs.insert("checkpoint".into(), hash_dir(&ckpt)?);
    manifest.outputs.insert("train_report".into(), hash_dir(&report_dir)?);
    manifest.write(layout)?;
    println!(
        "train: {} epochs ({:?}), best epoch {} with validation loss {:.4} -> {}",
        report.epochs.len(),
        report.stop_reason,
        report.best_epoch,
        report.best_val_loss,
        ckpt.display()
    );
    Ok((manifest, report))
}

/// Loads the trained model and its preprocessor, checking that both still
/// match the data they were built from.
fn load_trained(layout: &Layout) -> CliResult<(Amortizer, brainsbi_core::nn::ParamStore<f32>, Preprocessor, String)> {
    require(&layout.checkpoint().join("manifest.json"), Stage::Train)?;
    let (model, store, _, ckpt_manifest) = Amortizer::load::<f32>(&layout.checkpoint())?;
    let pre = Preprocessor::load(&layout.checkpoint_preprocessor())?;
    let extra = &ckpt_manifest.metadata["extra"];
    expect_hash(
        "the checkpoint preprocessor",
        extra["preprocessor"].as_str(),
        &hash_dir(&layout.checkpoint_preprocessor())?,
    )?;
    if layout.train_data().exists() {
        expect_hash("the training dataset", extra["train_dataset"].as_str(), &hash_dir(&layout.train_data())?)?;
    }
    Ok((model, store, pre, hash_dir(&layout.checkpoint())?))
}

fn draw_file(index: usize) -> String {
    format!("sample_{index:06}.json")
}

pub fn sample(config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    let (model, store, pre, ckpt_hash) = load_trained(layout)?;
    let (validation, val_hash) = load_dataset(&layout.validation_data())?;
    let examples = build_examples(&validation.simulations, &pre, config.summary.t_max)?;
    let draws = sample_all(
        &model,
        &store,
        &examples,
        config.diagnostics.samples,
        config.flow.solver,
        config.seeds().sampling,
    )?;
    let dir = layout.posterior();
    fresh_dir(&dir)?;
    for (i, d) in draws.iter().enumerate() {
        write_json(&dir.join(draw_file(i)), d)?;
    }
    let mut manifest = StageManifest::new(Stage::Sample, config);
    manifest.inputs.insert("checkpoint".into(), ckpt_hash);
    manifest.inputs.insert("validation_dataset".into(), val_hash);
    manifest.outputs.insert("posterior".into(), hash_dir(&dir)?);
    manifest.write(layout)?;
    println!(
        "sample: {} observations x {} draws ({:?}, {} steps) -> {}",
        draws.len(),
        config.diagnostics.samples,
        config.flow.solver.scheme,
        config.flow.solver.steps,
        dir.display()
    );
    Ok(manifest)
}

pub fn load_draws(dir: &Path, count: usize) -> CliResult<Vec<PosteriorDraws>> {
    (0..count)
        .map(|i| {
            let path = dir.join(draw_file(i));
            require(&path, Stage::Sample)?;
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::Core(e.into()))
        })
        .collect()
}

/// Headline numbers of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub min_pearson: f64,
    pub max_off_diagonal: f64,
    pub failing_dimensions: usize,
    pub max_fraction_outside: f64,
    /// Bayes RMSE ≥ posterior-mean RMSE in every dimension.
    pub rmse_ordering_holds: bool,
}

pub fn evaluate(
    config: &RunConfig,
    layout: &Layout,
) -> CliResult<(StageManifest, RecoveryReport, CalibrationReport)> {
    let sampled = upstream(layout, Stage::Sample)?;
    let (validation, val_hash) = load_dataset(&layout.validation_data())?;
    expect_hash("the validation dataset", sampled.inputs.get("validation_dataset").map(String::as_str), &val_hash)?;
    expect_hash(
        "the checkpoint",
        sampled.inputs.get("checkpoint").map(String::as_str),
        &hash_dir(&layout.checkpoint())?,
    )?;
    let posterior_hash = hash_dir(&layout.posterior())?;
    expect_hash("the posterior draws", sampled.outputs.get("posterior").map(String::as_str), &posterior_hash)?;

    let draws = load_draws(&layout.posterior(), validation.len())?;
    let truth = truths(&validation.simulations);
    let recovery = recovery_report(truth.view(), &draws)?;
    let calibration = calibration_report(
        truth.view(),
        &draws,
        config.diagnostics.alpha,
        config.diagnostics.replications,
        config.seeds().calibration,
    )?;
    let labels: Vec<&str> = Dimension::ALL.iter().map(|d| d.key()).collect();

    let dir = layout.evaluation();
    fresh_dir(&dir)?;
    write_json(&dir.join("recovery.json"), &recovery)?;
    write_json(&dir.join("calibration.json"), &calibration)?;
    write_text(&dir.join("recovery_plot.csv"), &export_recovery_plot_data(truth.view(), &draws, &labels)?)?;
    write_text(&dir.join("ecdf.csv"), &ecdf_csv(&calibration, &labels))?;
    let summary = EvaluationSummary {
        min_pearson: recovery.pearson.iter().copied().fold(f64::INFINITY, f64::min),
        max_off_diagonal: max_off_diagonal(&recovery.cross_correlation),
        failing_dimensions: calibration.failing_dimensions(),
        max_fraction_outside: calibration.fraction_outside.iter().copied().fold(0.0, f64::max),
        rmse_ordering_holds: recovery.bayes_rmse.iter().zip(&recovery.mean_rmse).all(|(b, m)| b >= m),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    let mut manifest = StageManifest::new(Stage::Evaluate, config);
    manifest.inputs.insert("validation_dataset".into(), val_hash);
    manifest.inputs.insert("posterior".into(), posterior_hash);
    manifest.outputs.insert("evaluation".into(), hash_dir(&dir)?);
    manifest.write(layout)?;
    println!(
        "evaluate: min pearson {:.3}, max |off-diagonal| {:.3}, {} dimension(s) outside the {:.0}% band -> {}",
        summary.min_pearson,
        summary.max_off_diagonal,
        summary.failing_dimensions,
        100.0 * (1.0 - config.diagnostics.alpha),
        dir.display()
    );
    Ok((manifest, recovery, calibration))
}

fn ecdf_csv(report: &CalibrationReport, labels: &[&str]) -> String {
    let mut out = format!("grid,half_width,{}\n", labels.join(","));
    for (g, z) in report.band.grid.iter().enumerate() {
        let row: Vec<String> = report.ecdf_difference.iter().map(|c| c[g].to_string()).collect();
        out.push_str(&format!("{z},{},{}\n", report.band.half_width[g], row.join(",")));
    }
    out
}

pub fn cycle_check(config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    let (validation, val_hash) = load_dataset(&layout.validation_data())?;
    let stimuli: Vec<&StimulusSet> = validation
        .simulations
        .iter()
        .map(|s| s.stimuli.as_ref())
        .collect::<Option<_>>()
        .ok_or_else(|| {
            CliError::Dependency("validation dataset has no stimuli; simulate with a generator first".into())
        })?;
    let recovered: Vec<ScoreVector> = match config.generator.kind {
        GeneratorKind::None => {
            return Err(CliError::Config("cycle-check needs generator.kind = mock or external".into()))
        }
        GeneratorKind::Mock => stimuli.iter().map(|s| invert_mock(s).values).collect(),
        GeneratorKind::External => {
            use rayon::prelude::*;
            let ep = endpoint(config)?;
            let transport = HttpTransport::from_env(ep)?;
            bounded(config.generator.max_concurrency, || {
                stimuli
                    .par_iter()
                    .map(|s| invert_external(s, ep, &transport).map(|r| r.values))
                    .collect::<Result<Vec<_>, _>>()
            })??
        }
    };
    let truth = truths(&validation.simulations);
    let rec = Array2::from_shape_fn((recovered.len(), NUM_DIMS), |(i, j)| recovered[i].values()[j]);
    let report = cycle_report(truth.view(), rec.view())?;
    let owned: Vec<StimulusSet> = stimuli.into_iter().cloned().collect();
    let uniqueness = check_uniqueness(&owned);

    let dir = layout.cycle();
    fresh_dir(&dir)?;
    write_json(&dir.join("cycle_report.json"), &report)?;
    write_json(&dir.join("uniqueness.json"), &uniqueness)?;
    let labels: Vec<&str> = Dimension::ALL.iter().map(|d| d.key()).collect();
    let mut csv = String::from("observation,dimension,truth,recovered\n");
    for i in 0..truth.nrows() {
        for (j, label) in labels.iter().enumerate() {
            csv.push_str(&format!("{i},{label},{},{}\n", truth[[i, j]], rec[[i, j]]));
        }
    }
    write_text(&dir.join("recovered.csv"), &csv)?;

    let mut manifest = StageManifest::new(Stage::CycleCheck, config);
    manifest.inputs.insert("validation_dataset".into(), val_hash);
    manifest.outputs.insert("cycle".into(), hash_dir(&dir)?);
    manifest.write(layout)?;
    let min_r = report.pearson.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "cycle-check: {} sets, min pearson {min_r:.3}, max |off-diagonal| {:.3}, {} duplicate headline(s) -> {}",
        report.observations,
        max_off_diagonal(&report.cross_correlation),
        uniqueness.duplicates.len(),
        dir.display()
    );
    Ok(manifest)
}

/// Every stage in dependency order.
pub fn pipeline(config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    let mut outputs = BTreeMap::new();
    let mut record = |m: StageManifest| {
        for (k, v) in m.outputs {
            outputs.insert(k, v);
        }
    };
    record(simulate(config, layout)?);
    record(fit_summary(config, layout)?);
    record(train(config, layout)?.0);
    record(sample(config, layout)?);
    record(evaluate(config, layout)?.0);
    if config.generator.kind != GeneratorKind::None {
        record(cycle_check(config, layout)?);
    }
    let mut manifest = StageManifest::new(Stage::Pipeline, config);
    manifest.outputs = outputs;
    manifest.write(layout)?;
    Ok(manifest)
}

pub fn run_stage(stage: Stage, config: &RunConfig, layout: &Layout) -> CliResult<StageManifest> {
    match stage {
        Stage::Simulate => simulate(config, layout),
        Stage::FitSummary => fit_summary(config, layout),
        Stage::Train => train(config, layout).map(|r| r.0),
        Stage::Sample => sample(config, layout),
        Stage::Evaluate => evaluate(config, layout).map(|r| r.0),
        Stage::CycleCheck => cycle_check(config, layout),
        Stage::Pipeline => pipeline(config, layout),
    }
}

/// Re-executes the stage recorded in a manifest with its recorded config.
pub fn replay(manifest_path: &Path, layout: &Layout) -> CliResult<StageManifest> {
    let recorded = StageManifest::read(manifest_path)?;
    recorded.config.validate()?;
    run_stage(recorded.command, &recorded.config, layout)
}
