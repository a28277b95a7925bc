//! One function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tpo_core::gradsuite::run_suite;
use tpo_core::hsi::{make_split, SplitSpec};
use tpo_core::models::{ModelSpec, TpoNet};
use tpo_core::nn::{read_checkpoint, write_checkpoint};
use tpo_core::sampler::{build_dataset, TpoExtractor, ViewMode};
use tpo_core::tensor::ParamStore;
use tpo_core::train::{
    classify_scene, evaluate, run_experiment, run_experiment_with_split, sub_seed, ConfusionMatrix, PreparedData,
    RepeatSummary, RunReport,
};

use crate::config::{LoadedConfig, RunConfig, SweepAxis};
use crate::ppm::{write_ppm, Palette};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.tpow";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SPLIT_FILE: &str = "split.txt";
pub const EVAL_CONFUSION_FILE: &str = "eval_confusion.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Metadata stored in checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    spec: ModelSpec,
}

fn hash_comment(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn output_dir(cfg: &LoadedConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn split_for(cfg: &LoadedConfig, data: &PreparedData) -> Result<SplitSpec, CliError> {
    match cfg.fixed_split()? {
        Some(s) => {
            s.validate(&data.labels)?;
            Ok(s)
        }
        None => Ok(make_split(
            &data.labels,
            cfg.config.samples_per_class,
            sub_seed(cfg.config.seed, 1),
        )?),
    }
}

fn spec_for(config: &RunConfig, data: &PreparedData) -> ModelSpec {
    config.model.spec(data.cube.bands(), data.classes(), &config.sampler)
}

/// Builds the configured network and fills it from `weights`.
fn load_model(spec: &ModelSpec, weights: &Path) -> Result<(TpoNet, ParamStore<f32>, String), CliError> {
    let (net, mut store) = TpoNet::build::<f32>(spec.clone(), 0)?;
    let file =
        fs::File::open(weights).map_err(|e| CliError::config(format!("cannot open {}: {e}", weights.display())))?;
    let ckpt = read_checkpoint(file).map_err(|e| CliError::from(e.context(weights.display())))?;
    let meta: CheckpointMeta = toml::from_str(&ckpt.meta)
        .map_err(|e| CliError::config(format!("{}: unreadable checkpoint metadata: {e}", weights.display())))?;
    if meta.spec != *spec {
        return Err(CliError::config(format!(
            "checkpoint {} does not match the configured model:\n  checkpoint: {:?}\n  config:     {:?}",
            weights.display(),
            meta.spec,
            spec
        )));
    }
    store.load_values(ckpt.tensors)?;
    Ok((net, store, meta.config_hash))
}

pub fn train(path: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(path)?;
    let data = cfg.prepared()?;
    let exp = cfg.config.experiment(threads);
    let out = match cfg.fixed_split()? {
        Some(split) => run_experiment_with_split(&data, &exp, split, cfg.config.seed, &cfg.hash)?,
        None => run_experiment(&data, &exp, cfg.config.seed, &cfg.hash)?,
    };
    let dir = output_dir(&cfg)?;
    let meta = CheckpointMeta {
        config_hash: cfg.hash.clone(),
        spec: out.net.spec.clone(),
    };
    let mut ckpt = Vec::new();
    write_checkpoint(
        &out.store,
        &toml::to_string(&meta).expect("metadata serialises"),
        &mut ckpt,
    )?;
    write_file(&dir.join(CHECKPOINT_FILE), ckpt)?;
    write_file(&dir.join(REPORT_FILE), out.report.to_text())?;
    write_file(&dir.join(TIMING_FILE), out.report.timing_text())?;
    write_file(&dir.join(LOSS_FILE), hash_comment(&cfg.hash) + &out.report.loss_csv())?;
    write_file(
        &dir.join(CONFUSION_FILE),
        hash_comment(&cfg.hash) + &out.confusion.to_csv(),
    )?;
    write_file(&dir.join(SPLIT_FILE), out.split.to_text())?;
    let r = &out.report;
    println!(
        "{} on {}: OA {:.2}  AA {:.2}  kappa {:.4}  (train OA {:.2}, {} steps, {:.1}s)",
        r.variant,
        r.dataset,
        r.overall_accuracy,
        r.average_accuracy,
        r.kappa,
        r.train_accuracy,
        r.steps,
        r.wall_clock_secs
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// `key=value` metrics in the same layout as the run report.
pub fn metrics_text(
    cm: &ConfusionMatrix,
    class_names: &[String],
    config_hash: &str,
    checkpoint_hash: &str,
) -> Result<String, CliError> {
    let mut s = String::new();
    writeln!(s, "config_hash={config_hash}").unwrap();
    writeln!(s, "checkpoint_config_hash={checkpoint_hash}").unwrap();
    writeln!(s, "test_samples={}", cm.total()).unwrap();
    writeln!(s, "oa={}", cm.overall_accuracy()?).unwrap();
    writeln!(s, "aa={}", cm.average_accuracy()?).unwrap();
    writeln!(s, "kappa={}", cm.kappa()?).unwrap();
    for (i, acc) in cm.per_class_accuracy().iter().enumerate() {
        let acc = acc.map_or_else(|| "nan".to_string(), |a| a.to_string());
        writeln!(
            s,
            "class.{}={acc}\t{}",
            i + 1,
            class_names.get(i).map_or("", String::as_str)
        )
        .unwrap();
    }
    Ok(s)
}

pub fn eval(path: &Path, weights: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(path)?;
    let data = cfg.prepared()?;
    let split = split_for(&cfg, &data)?;
    let spec = spec_for(&cfg.config, &data);
    let (net, store, ckpt_hash) = load_model(&spec, weights)?;
    if ckpt_hash != cfg.hash {
        eprintln!(
            "warning: checkpoint was trained with config {ckpt_hash}, evaluating under {}",
            cfg.hash
        );
    }
    let ex = Arc::new(TpoExtractor::new(&data.cube, cfg.config.sampler)?);
    let test = build_dataset(ex, &data.labels, &split.test)?;
    let cm = evaluate(&net, &store, &test, cfg.config.eval_batch, threads)?;
    let metrics = metrics_text(&cm, &data.class_names, &cfg.hash, &ckpt_hash)?;
    let dir = output_dir(&cfg)?;
    write_file(&dir.join(EVAL_CONFUSION_FILE), hash_comment(&cfg.hash) + &cm.to_csv())?;
    write_file(&dir.join(EVAL_METRICS_FILE), &metrics)?;
    println!(
        "OA {:.2}  AA {:.2}  kappa {:.4} on {} test pixels",
        cm.overall_accuracy()?,
        cm.average_accuracy()?,
        cm.kappa()?,
        cm.total()
    );
    Ok(())
}

pub fn map(path: &Path, weights: &Path, output: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(path)?;
    let data = cfg.prepared()?;
    let spec = spec_for(&cfg.config, &data);
    let palette = match &cfg.config.palette {
        Some(colors) if colors.len() < data.classes() => {
            return Err(CliError::config(format!(
                "palette has {} colours for {} classes",
                colors.len(),
                data.classes()
            )))
        }
        Some(colors) => Palette::custom(colors),
        None => Palette::spaced(data.classes()),
    };
    let (net, store, _) = load_model(&spec, weights)?;
    let ex = TpoExtractor::new(&data.cube, cfg.config.sampler)?;
    let classes: Vec<usize> = classify_scene(&net, &store, &ex, cfg.config.eval_batch, threads)?
        .into_iter()
        .map(|p| p + 1)
        .collect();
    let file =
        fs::File::create(output).map_err(|e| CliError::config(format!("cannot create {}: {e}", output.display())))?;
    write_ppm(
        BufWriter::new(file),
        data.cube.width(),
        data.cube.height(),
        &classes,
        &palette,
        &format!("config_hash={}", cfg.hash),
    )?;
    println!(
        "wrote {}×{} map to {}",
        data.cube.width(),
        data.cube.height(),
        output.display()
    );
    Ok(())
}

fn apply_axis(config: &mut RunConfig, axis: SweepAxis, value: usize) -> Result<(), CliError> {
    match axis {
        SweepAxis::PatchSize => config.sampler.patch_size = value,
        SweepAxis::RValue => config.model.r = value,
        SweepAxis::SamplesPerClass => config.samples_per_class = value,
        SweepAxis::Views => config.sampler.views = ViewMode::from_count(value)?,
    }
    config.sampler.validate()?;
    Ok(())
}

fn sweep_cell(
    config: &RunConfig,
    data: &PreparedData,
    split: Option<&SplitSpec>,
    runs: usize,
    hash: &str,
    threads: usize,
) -> Result<RepeatSummary, CliError> {
    let exp = config.experiment(threads);
    let mut reports: Vec<RunReport> = Vec::with_capacity(runs);
    for i in 0..runs as u64 {
        let seed = config.seed + i;
        let out = match split {
            Some(s) => run_experiment_with_split(data, &exp, s.clone(), seed, hash)?,
            None => run_experiment(data, &exp, seed, hash)?,
        };
        reports.push(out.report);
    }
    Ok(RepeatSummary::from_reports(reports))
}

pub fn sweep(path: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(path)?;
    let sweep = cfg
        .config
        .sweep
        .clone()
        .ok_or_else(|| CliError::config(format!("{} has no [sweep] section", path.display())))?;
    let split = cfg.fixed_split()?;
    if split.is_some() && sweep.axis == SweepAxis::SamplesPerClass {
        return Err(CliError::config(
            "a samples_per_class sweep cannot use a fixed split file",
        ));
    }
    let data = cfg.prepared()?;
    let dir = output_dir(&cfg)?;
    let out_path = dir.join(SWEEP_FILE);
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        sweep.axis.name(),
        "runs",
        "oa",
        "aa",
        "kappa",
        "oa_std",
        "aa_std",
        "kappa_std",
        "status",
    ])
    .map_err(|e| CliError::config(e.to_string()))?;
    let mut failures = 0;
    for &value in &sweep.values {
        let mut config = cfg.config.clone();
        let result = apply_axis(&mut config, sweep.axis, value)
            .and_then(|()| sweep_cell(&config, &data, split.as_ref(), sweep.runs, &cfg.hash, threads));
        let row = match result {
            Ok(s) => {
                println!("{}={value}: OA {:.2} ± {:.2}", sweep.axis, s.oa.0, s.oa.1);
                let f = |x: f64| x.to_string();
                vec![
                    value.to_string(),
                    sweep.runs.to_string(),
                    f(s.oa.0),
                    f(s.aa.0),
                    f(s.kappa.0),
                    f(s.oa.1),
                    f(s.aa.1),
                    f(s.kappa.1),
                    "ok".to_string(),
                ]
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}={value}: failed: {e}", sweep.axis);
                let mut row = vec![value.to_string(), sweep.runs.to_string()];
                row.extend(std::iter::repeat_n("nan".to_string(), 6));
                row.push(format!("error (exit {}): {}", e.code, e.message));
                row
            }
        };
        csv.write_record(&row).map_err(|e| CliError::config(e.to_string()))?;
    }
    let body = csv.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&out_path, [hash_comment(&cfg.hash).into_bytes(), body].concat())?;
    println!(
        "wrote {} ({} of {} cells failed)",
        out_path.display(),
        failures,
        sweep.values.len()
    );
    Ok(())
}

pub fn extract(path: &Path, output: &Path) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(path)?;
    let data = cfg.prepared()?;
    let split = split_for(&cfg, &data)?;
    let ex = Arc::new(TpoExtractor::new(&data.cube, cfg.config.sampler)?);
    let ds = build_dataset(ex, &data.labels, &split.train)?;
    let file =
        fs::File::create(output).map_err(|e| CliError::config(format!("cannot create {}: {e}", output.display())))?;
    ds.write_samples(&format!("config_hash={}", cfg.hash), BufWriter::new(file))?;
    println!(
        "wrote {} samples of shape {:?} to {}",
        ds.len(),
        ds.sample_shape(),
        output.display()
    );
    Ok(())
}

pub fn gradcheck(seeds: usize) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be at least 1"));
    }
    let results = run_suite(seeds)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<8} {:<20} {:?} worst {:.2e} (tol {:.0e}, {} seeds)",
            if r.passed { "PASS" } else { "FAIL" },
            r.group,
            r.name,
            r.precision,
            r.worst_error,
            r.tol,
            r.seeds
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::numerical(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
