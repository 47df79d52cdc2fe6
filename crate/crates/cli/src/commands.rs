use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dualalign::checkpoint::Checkpoint;
use dualalign::config::RunConfig;
use dualalign::error::{Error, Result};
use dualalign::eval::evaluate;
use dualalign::experiment::{sweep_row, Variant};
use dualalign::gradcheck::{self, Family, GradcheckOptions};
use dualalign::synthgen::{generate, Dataset};
use dualalign::trainer::Trainer;

use crate::metrics::{self, MetricsWriter};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EVAL_FILE: &str = "eval.json";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoint-{iteration:06}.ckpt")
}

/// Prefixes I/O errors with the path involved.
fn at<T>(path: &Path, result: Result<T>) -> Result<T> {
    result.map_err(|err| match err {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        other => other,
    })
}

pub fn datagen(config: &Path, out: &str) -> Result<ExitCode> {
    let config = at(config, RunConfig::load(config))?;
    let dataset = generate(&config.dataset_spec())?;
    if out == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(dataset.to_text().as_bytes())?;
        stdout.flush()?;
    } else {
        at(Path::new(out), dataset.export(Path::new(out)))?;
        log::info!("wrote {} samples to {out}", dataset.samples.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn check_dataset(dataset: &Dataset, config: &RunConfig) -> Result<()> {
    if dataset.num_classes != config.num_classes || dataset.d_in != config.d_in {
        return Err(Error::InvalidArgument(format!(
            "dataset has C={} d_in={}, config expects C={} d_in={}",
            dataset.num_classes, dataset.d_in, config.num_classes, config.d_in
        )));
    }
    Ok(())
}

fn dump_batch(path: &Path, iteration: u64, batch: &dualalign::objective::Batch) -> Result<()> {
    let value = serde_json::json!({ "iteration": iteration, "batch": batch });
    std::fs::write(path, value.to_string())?;
    Ok(())
}

pub fn train(
    config_path: &Path,
    data: &Path,
    out_dir: &Path,
    checkpoint_every: u64,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let config = at(config_path, RunConfig::load(config_path))?;
    let dataset = at(data, Dataset::import(data))?;
    check_dataset(&dataset, &config)?;
    at(out_dir, std::fs::create_dir_all(out_dir).map_err(Error::from))?;
    let metrics_path = out_dir.join(metrics::FILE_NAME);

    let (mut trainer, mut writer) = match resume {
        Some(path) => {
            let ckpt = at(path, Checkpoint::load(path))?;
            if ckpt.config != config {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let trainer = ckpt.restore()?;
            log::info!("resuming at iteration {}", trainer.iteration);
            let writer = MetricsWriter::resume(&metrics_path, trainer.iteration)?;
            (trainer, writer)
        }
        None => (Trainer::new(config.train_config())?, MetricsWriter::create(&metrics_path)?),
    };

    let training = dataset.training_data();
    let log_every = (trainer.config.total_iters / 10).max(1);
    while !trainer.is_done() {
        let batch = trainer.sample_batch(&training)?;
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(err @ Error::NonFinite { iteration, .. }) => {
                writer.flush()?;
                let dump: PathBuf = out_dir.join(NONFINITE_DUMP);
                dump_batch(&dump, iteration, &batch)?;
                log::error!("offending batch written to {}", dump.display());
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        writer.write_line(&metrics::iteration_line(&report))?;
        if (report.iteration + 1) % log_every == 0 {
            log::info!(
                "iter {} total {:.4} supervised {:.4} lambda {:.4} accepted {}/{}",
                report.iteration,
                report.loss_total,
                report.loss_supervised,
                report.lambda,
                report.accepted_pseudo_labels,
                report.unlabeled_in_batch
            );
        }
        if checkpoint_every > 0 && trainer.iteration % checkpoint_every == 0 && !trainer.is_done() {
            writer.flush()?;
            Checkpoint::capture(&config, &trainer).save(&out_dir.join(checkpoint_name(trainer.iteration)))?;
        }
    }
    writer.flush()?;
    drop(writer);

    Checkpoint::capture(&config, &trainer).save(&out_dir.join(FINAL_CHECKPOINT))?;
    let report = evaluate(&trainer.model, config.tau, &dataset)?;
    let line = metrics::eval_line(&report);
    std::fs::write(out_dir.join(EVAL_FILE), format!("{line}\n"))?;
    metrics::append_line(&metrics_path, &line)?;
    log::info!(
        "macro accuracy {:.4} (scorer {:.4})",
        report.macro_accuracy,
        report.scorer_macro_accuracy
    );
    if trainer.audit != Default::default() {
        log::error!("audit counters are non-zero: {:?}", trainer.audit);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint: &Path, data: &Path) -> Result<ExitCode> {
    let ckpt = at(checkpoint, Checkpoint::load(checkpoint))?;
    let tau = ckpt.config.tau;
    let config = ckpt.config.clone();
    let trainer = ckpt.restore()?;
    let dataset = at(data, Dataset::import(data))?;
    check_dataset(&dataset, &config)?;
    let report = evaluate(&trainer.model, tau, &dataset)?;
    println!("{}", metrics::eval_line(&report));
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: Option<&Path>, trials: usize, tolerance: f64, inject_fault: Option<&str>) -> Result<ExitCode> {
    let mut opts = GradcheckOptions {
        trials,
        tolerance,
        ..Default::default()
    };
    if let Some(path) = config {
        let c = at(path, RunConfig::load(path))?;
        opts.seed = c.seed;
        opts.margin = c.margin;
        opts.form = c.proxy_loss_form;
    }
    opts.inject_fault = inject_fault.map(str::parse::<Family>).transpose()?;
    let report = gradcheck::run(&opts)?;
    for f in &report.families {
        println!(
            "{:<16} trials={:<4} redrawn={:<4} coords={:<6} max_rel={:.3e} max_abs={:.3e} {}",
            f.family.name(),
            f.trials,
            f.redrawn,
            f.coordinates,
            f.max_relative_error,
            f.max_absolute_error,
            if f.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn sweep(config: &Path, seeds: u64, fractions: &[f64], variants: &[String]) -> Result<ExitCode> {
    let base = at(config, RunConfig::load(config))?;
    let variants = variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
    for &fraction in fractions {
        for &variant in &variants {
            let row = sweep_row(&base, variant, fraction, &seeds)?;
            println!("{}", serde_json::to_string(&row).expect("sweep rows serialize"));
        }
    }
    Ok(ExitCode::SUCCESS)
}
