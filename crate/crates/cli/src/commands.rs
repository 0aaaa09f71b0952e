use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use tat_core::data::{
    generate_synthetic, load_dataset, normalize, split_by_time, write_dataset, Dataset, DatasetSchema,
    GeneratorConfig,
};
use tat_core::evaluation::{
    config_digest, emit_report, evaluate as score, run_ablation, AblationConfig, Denominator, EventSpec,
    MetricReport,
};
use tat_core::model::{count_parameters, init_model, ModelConfig, Variant};
use tat_core::training::{check_gradients, gradient_probe, load_checkpoint, save_checkpoint, train_from, TrainConfig};

use crate::{AblateArgs, CliError, EvaluateArgs, GenerateArgs, GradcheckArgs, TrainArgs};

/// Environment variable that turns on per-step gradient finiteness checks.
pub const CHECK_FINITE_VAR: &str = "TAT_CHECK_FINITE";

pub const MANIFEST_FORMAT: &str = "tat-dataset";

#[derive(Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub samples: usize,
    pub sha256: String,
}

/// Written next to generated data; `evaluate` and `ablate` read the events from it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config_digest: String,
    pub test_origin: i64,
    pub events: Vec<EventSpec>,
    pub files: Vec<FileEntry>,
    pub config: GeneratorConfig,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Missing {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::BadConfig {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn sibling(data: &Path, name: &str) -> PathBuf {
    data.parent().unwrap_or(Path::new(".")).join(name)
}

fn load(data: &Path, schema: Option<&Path>) -> Result<Dataset, CliError> {
    let schema_path = schema.map_or_else(|| sibling(data, "schema.json"), Path::to_path_buf);
    let schema: DatasetSchema = read_json(&schema_path)?;
    if !data.exists() {
        return Err(CliError::Missing {
            path: data.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    Ok(load_dataset(data, &schema)?)
}

fn model_config(path: Option<&Path>, schema: &DatasetSchema) -> Result<ModelConfig, CliError> {
    let config = match path {
        Some(p) => read_json(p)?,
        None => ModelConfig::desk(schema),
    };
    config.validate()?;
    Ok(config)
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut config: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::desk(),
    };
    config.validate()?;
    config.check_finite = std::env::var_os(CHECK_FINITE_VAR).is_some();
    Ok(config)
}

fn parse_denominator(s: &str) -> Result<Denominator, CliError> {
    serde_json::from_value(json!(s))
        .map_err(|_| CliError::Usage(format!("unknown denominator `{s}` (expected selected or full_horizon)")))
}

pub fn generate(args: &GenerateArgs, verbose: u8) -> Result<(), CliError> {
    let mut config: GeneratorConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::BadConfig {
        path: args.config.clone(),
        message: e.to_string(),
    })?;
    let dataset = generate_synthetic(&config)?;
    let (train_set, test_set) = split_by_time(&dataset, config.test_origin)?;
    create_dir(&args.out)?;
    let mut files = Vec::new();
    for (stem, part) in [("train", &train_set), ("test", &test_set)] {
        for ext in ["jsonl", "csv"] {
            let name = format!("{stem}.{ext}");
            let path = args.out.join(&name);
            write_dataset(part, &path)?;
            let bytes = fs::read(&path).map_err(|source| CliError::Missing { path, source })?;
            files.push(FileEntry {
                name,
                samples: part.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    write(&args.out.join("schema.json"), pretty(&dataset.schema))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: config.seed,
        config_digest: config_digest(&config),
        test_origin: config.test_origin,
        events: config
            .test_event_weeks()
            .into_iter()
            .map(|(name, week)| EventSpec { name, week })
            .collect(),
        files,
        config,
    };
    write(&args.out.join("manifest.json"), pretty(&manifest))?;
    if verbose > 0 {
        eprintln!(
            "wrote {} train and {} test samples to {}",
            train_set.len(),
            test_set.len(),
            args.out.display()
        );
    }
    println!(
        "{}",
        json!({"train_samples": train_set.len(), "test_samples": test_set.len(), "config_digest": manifest.config_digest})
    );
    Ok(())
}

pub fn train(args: &TrainArgs, verbose: u8) -> Result<(), CliError> {
    let dataset = load(&args.data, args.schema.as_deref())?;
    let mut mc = model_config(args.config.as_deref(), &dataset.schema)?;
    let mut tc = train_config(args.train_config.as_deref())?;
    if let Some(seed) = args.seed {
        mc.seed = seed;
        tc.seed = seed;
    }
    mc.check_schema(&dataset.schema)?;
    let (scaled, _) = normalize(&dataset);
    let params = init_model(&mc)?;
    if verbose > 0 {
        eprintln!("{} parameters, {} samples", count_parameters(&params), scaled.len());
    }
    let (params, history) = train_from(params, &tc, &scaled, |e| {
        if verbose > 0 {
            eprintln!("epoch {:>3}  loss {:.6}  {:.1}s", e.epoch, e.mean_loss, e.seconds);
        }
    })?;
    create_dir(&args.out)?;
    save_checkpoint(&params, &history, &args.out.join("checkpoint.json"))?;
    write(&args.out.join("history.csv"), history.to_csv())?;
    write(&args.out.join("timings.csv"), history.timings_csv())?;
    let last = history.epochs.last().map(|e| e.mean_loss);
    println!(
        "{}",
        json!({"epochs": history.epochs.len(), "final_loss": last, "parameters": count_parameters(&params)})
    );
    Ok(())
}

fn parse_event(s: &str) -> Result<EventSpec, CliError> {
    let (name, week) = match s.split_once('=') {
        Some((n, w)) => (n.to_string(), w),
        None => (format!("week{s}"), s),
    };
    let week = week
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad event `{s}` (expected NAME=WEEK or WEEK)")))?;
    Ok(EventSpec { name, week })
}

fn manifest_events(data_dir: &Path) -> Result<Vec<EventSpec>, CliError> {
    let path = data_dir.join("manifest.json");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let manifest: Manifest = read_json(&path)?;
    Ok(manifest.events)
}

fn report_csv(r: &MetricReport) -> String {
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("overall_p50,{}\noverall_p90,{}\n", r.overall_p50, r.overall_p90));
    if let (Some(a), Some(b)) = (r.event_p50, r.event_p90) {
        s.push_str(&format!("event_p50,{a}\nevent_p90,{b}\n"));
    }
    for e in &r.events {
        s.push_str(&format!("{}_p50,{}\n{}_p90,{}\n", e.name, e.p50, e.name, e.p90));
    }
    s
}

fn report_curves(r: &MetricReport) -> String {
    let mut s = String::from("horizon,p50,p90\n");
    for c in &r.curves {
        s.push_str(&format!("{},{},{}\n", c.horizon, c.p50, c.p90));
    }
    s
}

pub fn evaluate(args: &EvaluateArgs, verbose: u8) -> Result<(), CliError> {
    let (params, _) = if args.checkpoint.exists() {
        load_checkpoint(&args.checkpoint)?
    } else {
        return Err(CliError::Missing {
            path: args.checkpoint.clone(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    };
    let dataset = load(&args.data, args.schema.as_deref())?;
    let events = if args.events.is_empty() {
        manifest_events(args.data.parent().unwrap_or(Path::new(".")))?
    } else {
        args.events.iter().map(|s| parse_event(s)).collect::<Result<_, _>>()?
    };
    let denominator = parse_denominator(&args.denominator)?;
    let report = score(&params, &dataset, &events, denominator, args.batch_size.max(1))?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.json"), pretty(&report))?;
    write(&args.out.join("metrics.csv"), report_csv(&report))?;
    write(&args.out.join("curves.csv"), report_curves(&report))?;
    if verbose > 0 {
        eprintln!("scored {} samples in {:.1}s", report.n_samples, report.wall_clock_seconds);
    }
    print!("{}", report_csv(&report));
    Ok(())
}

pub fn ablate(args: &AblateArgs, verbose: u8) -> Result<(), CliError> {
    let train_set = load(&args.data.join("train.jsonl"), None)?;
    let test_set = load(&args.data.join("test.jsonl"), None)?;
    let mut mc = model_config(args.config.as_deref(), &train_set.schema)?;
    let mut tc = train_config(args.train_config.as_deref())?;
    if let Some(seed) = args.seed {
        mc.seed = seed;
        tc.seed = seed;
    }
    mc.check_schema(&train_set.schema)?;
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|v| Variant::parse(v.trim()).ok_or_else(|| CliError::Usage(format!("unknown variant `{v}`"))))
            .collect::<Result<_, _>>()?
    };
    let ablation = AblationConfig {
        variants,
        n_seeds: args.seeds,
        events: manifest_events(&args.data)?,
        denominator: parse_denominator(&args.denominator)?,
        jobs: args.jobs,
    };
    if ablation.n_seeds == 0 || ablation.jobs == 0 {
        return Err(CliError::Usage("--seeds and --jobs must be at least 1".into()));
    }
    let start = Instant::now();
    let report = run_ablation(&train_set, &test_set, &mc, &tc, &ablation)?;
    emit_report(&report, &args.out)?;
    if verbose > 0 {
        for r in &report.runs {
            eprintln!("{} seed {}: {:.1}s", r.variant, r.seed, r.wall_clock_seconds);
        }
        eprintln!("ablation finished in {:.1}s", start.elapsed().as_secs_f64());
    }
    print!("{}", tat_core::evaluation::metrics_csv(&report));
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, verbose: u8) -> Result<(), CliError> {
    if args.training {
        return Err(CliError::Usage(
            "gradient check refuses training mode: dropout makes the objective random, so finite differences are meaningless"
                .into(),
        ));
    }
    let mut config = match &args.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::micro(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    if args.batch == 0 || !(args.eps > 0.0) {
        return Err(CliError::Usage("--batch and --eps must be positive".into()));
    }
    let start = Instant::now();
    let (params, batch) = gradient_probe(&config, args.batch)?;
    let (report, worst) = check_gradients(&params, &batch, args.eps)?;
    let seconds = start.elapsed().as_secs_f64();
    if verbose > 0 {
        eprintln!(
            "{} coordinates, analytic {:.6e} vs numeric {:.6e} at the worst one",
            report.coordinates, report.analytic, report.numeric
        );
    }
    let passed = report.max_rel_error < args.tolerance;
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "worst_parameter": worst,
            "coordinates": report.coordinates,
            "seconds": seconds,
            "passed": passed,
        })
    );
    if passed {
        Ok(())
    } else {
        Err(CliError::Gradcheck {
            param: worst.unwrap_or_default(),
            error: report.max_rel_error,
            tolerance: args.tolerance,
        })
    }
}
