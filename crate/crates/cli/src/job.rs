use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cednet_core::analyzer::emit_report;
use cednet_core::build::build_model;
use cednet_core::checkpoint::{decode_manifest, load_checkpoint, save_checkpoint};
use cednet_core::config::{model_from_value, model_to_value, parse_model, ConfigError, ModelSpec};
use cednet_core::executor::ParamStore;
use cednet_core::gradcheck::{gradcheck, GradcheckConfig};
use cednet_core::graph::ArchGraph;
use cednet_core::lab::saliency::{area_curve, gradient_map, linear_thresholds};
use cednet_core::lab::{
    build_seg_model, constant_background, evaluate, generate_scene, train, DataSpec, SaliencyResult, Split,
    TrainConfig, NUM_CLASSES,
};
use cednet_core::sweep::{family, run_sweep, sweep_csv, SweepAxis, SweepTraining};
use cednet_core::Error;
use cednet_tensor::dump::write_tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{Axis, Cli, Command, Format};

pub const TOOL: &str = "cednet-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Why a run stopped; each kind has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            return Failure::Numerical(msg);
        }
        match e {
            Error::Io(_) | Error::Checkpoint(_) | Error::Checksum { .. } => Failure::Io(msg),
            _ => Failure::Config(msg),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Outcome {
    write_file(path, serde_json::to_string_pretty(v).expect("serializes") + "\n")
}

/// Reads an optional JSON settings file; missing fields take defaults.
fn read_settings<T: DeserializeOwned + Default>(path: Option<&Path>, what: &str) -> Outcome<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = read_text(path)?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        Failure::Config(format!("{what} {}: field {field}: {}", path.display(), e.into_inner()))
    })
}

fn read_model(path: &Path) -> Outcome<ModelSpec> {
    let text = read_text(path)?;
    parse_model(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// A checkpoint pinned by the checksum it had when the run was set up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub payload_sha256: String,
}

impl CheckpointRef {
    fn resolve(path: &Path) -> Outcome<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let (manifest, _) = decode_manifest(&bytes)?;
        let path = fs::canonicalize(path).map_err(io_err(path))?;
        Ok(Self { path, payload_sha256: manifest.payload_sha256 })
    }

    fn load(&self) -> Outcome<(ArchGraph, ParamStore<f32>, Value)> {
        let (store, manifest) = load_checkpoint::<f32>(&self.path)?;
        if manifest.payload_sha256 != self.payload_sha256 {
            return Err(Failure::Io(format!(
                "{} changed since the run was recorded (sha256 {} != {})",
                self.path.display(),
                manifest.payload_sha256,
                self.payload_sha256
            )));
        }
        let model = manifest.meta.get("model").cloned().ok_or_else(|| missing_meta(&self.path, "model"))?;
        let head_width = manifest
            .meta
            .get("head_width")
            .and_then(Value::as_u64)
            .ok_or_else(|| missing_meta(&self.path, "head_width"))? as usize;
        let g = seg_graph(&model, head_width)?;
        store.check(&g)?;
        Ok((g, store, model))
    }
}

fn missing_meta(path: &Path, key: &str) -> Failure {
    Failure::Io(format!("{}: checkpoint metadata lacks {key}", path.display()))
}

fn seg_graph(model: &Value, head_width: usize) -> Outcome<ArchGraph> {
    match model_from_value(model.clone())? {
        ModelSpec::CedNet(arch) => Ok(build_seg_model(&arch, head_width)?),
        ModelSpec::ConvNext(_) => Err(Failure::Config("model must be a cednet config for segmentation".into())),
    }
}

/// A fully resolved invocation: everything needed to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Analyze { model: Value, input_size: (usize, usize), format: Format },
    Gradcheck { model: Value, gradcheck: GradcheckConfig },
    Train { model: Value, data: DataSpec, train: TrainConfig },
    Eval { checkpoint: CheckpointRef, data: DataSpec },
    Saliency { checkpoint: CheckpointRef, scene_seed: u64, data: DataSpec, thresholds: Thresholds },
    Sweep { axis: SweepAxis, input_size: (usize, usize), training: Option<SweepTraining> },
    Export { model: Option<Value>, checkpoint: Option<CheckpointRef> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Thresholds {
    Explicit(Vec<f64>),
    /// Evenly spaced from 0 to the map maximum.
    Linear(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub job: Job,
}

impl Job {
    fn seed(&self) -> u64 {
        match self {
            Job::Gradcheck { gradcheck, .. } => gradcheck.seed,
            Job::Train { train, .. } => train.seed,
            Job::Sweep { training: Some(t), .. } => t.train.seed,
            Job::Saliency { scene_seed, .. } => *scene_seed,
            _ => 0,
        }
    }
}

fn canonical(spec: &ModelSpec) -> Value {
    model_to_value(spec)
}

/// Turns command-line arguments into a job, reading every referenced
/// settings file.
pub fn resolve(cli: &Cli) -> Outcome<Job> {
    let seed = cli.seed;
    Ok(match &cli.command {
        Command::Analyze { config, input_size, format } => {
            Job::Analyze { model: canonical(&read_model(config)?), input_size: *input_size, format: *format }
        }
        Command::Gradcheck { config, eps, tolerance, input_size, two_point } => {
            let mut gc = GradcheckConfig::default();
            gc.eps = eps.unwrap_or(gc.eps);
            gc.tolerance = tolerance.unwrap_or(gc.tolerance);
            gc.input_size = input_size.unwrap_or(gc.input_size);
            gc.five_point = !two_point;
            gc.seed = seed.unwrap_or(gc.seed);
            if !(gc.eps > 0.0) || !(gc.tolerance > 0.0) {
                return Err(Failure::Config("eps and tolerance must be positive".into()));
            }
            Job::Gradcheck { model: canonical(&read_model(config)?), gradcheck: gc }
        }
        Command::Train { config, data, train_config } => {
            let model = read_model(config)?;
            if !matches!(model, ModelSpec::CedNet(_)) {
                return Err(Failure::Config("model must be a cednet config for segmentation".into()));
            }
            let data: DataSpec = read_settings(data.as_deref(), "data spec")?;
            let mut train: TrainConfig = read_settings(train_config.as_deref(), "train config")?;
            train.seed = seed.unwrap_or(train.seed);
            train.validate()?;
            Job::Train { model: canonical(&model), data, train }
        }
        Command::Eval { checkpoint, data } => Job::Eval {
            checkpoint: CheckpointRef::resolve(checkpoint)?,
            data: read_settings(data.as_deref(), "data spec")?,
        },
        Command::Saliency { checkpoint, scene_seed, thresholds, num_thresholds, data } => {
            let thresholds = match thresholds {
                Some(t) => Thresholds::Explicit(t.clone()),
                None => Thresholds::Linear(*num_thresholds),
            };
            Job::Saliency {
                checkpoint: CheckpointRef::resolve(checkpoint)?,
                scene_seed: seed.unwrap_or(*scene_seed),
                data: read_settings(data.as_deref(), "data spec")?,
                thresholds,
            }
        }
        Command::Sweep { axis, train_steps, input_size, data, train_config } => {
            let axis = match axis {
                Axis::Stages => SweepAxis::Stages,
                Axis::Allocation => SweepAxis::Allocation,
                Axis::LrBlock => SweepAxis::LrBlock,
            };
            let training = if *train_steps == 0 {
                None
            } else {
                let mut t = SweepTraining {
                    data: read_settings(data.as_deref(), "data spec")?,
                    train: read_settings(train_config.as_deref(), "train config")?,
                    ..Default::default()
                };
                t.train.steps = *train_steps;
                t.train.seed = seed.unwrap_or(t.train.seed);
                t.train.validate()?;
                Some(t)
            };
            Job::Sweep { axis, input_size: *input_size, training }
        }
        Command::Export { config, checkpoint } => Job::Export {
            model: config.as_deref().map(read_model).transpose()?.as_ref().map(canonical),
            checkpoint: checkpoint.as_deref().map(CheckpointRef::resolve).transpose()?,
        },
        Command::Rerun { manifest } => {
            if seed.is_some() {
                return Err(Failure::Config("--seed cannot be combined with rerun; the manifest fixes it".into()));
            }
            read_manifest(manifest)?.job
        }
    })
}

pub fn read_manifest(path: &Path) -> Outcome<RunManifest> {
    let text = read_text(path)?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: not a run manifest: {e}", path.display())))?;
    if m.tool != TOOL {
        return Err(Failure::Config(format!("{}: written by {:?}, not {TOOL}", path.display(), m.tool)));
    }
    if m.version != VERSION {
        eprintln!("warning: manifest was written by version {}, this is {VERSION}", m.version);
    }
    Ok(m)
}

/// Writes the manifest and then performs the job under `out`.
pub fn run(job: &Job, out: &Path) -> Outcome {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = RunManifest { tool: TOOL.into(), version: VERSION.into(), seed: job.seed(), job: job.clone() };
    write_json(&out.join("manifest.json"), &manifest)?;
    match job {
        Job::Analyze { model, input_size, format } => analyze(model, *input_size, *format, out),
        Job::Gradcheck { model, gradcheck } => run_gradcheck(model, gradcheck, out),
        Job::Train { model, data, train } => run_train(model, data, train, out),
        Job::Eval { checkpoint, data } => run_eval(checkpoint, data, out),
        Job::Saliency { checkpoint, scene_seed, data, thresholds } => {
            run_saliency(checkpoint, *scene_seed, data, thresholds, out)
        }
        Job::Sweep { axis, input_size, training } => run_sweep_job(*axis, *input_size, training.as_ref(), out),
        Job::Export { model, checkpoint } => export(model.as_ref(), checkpoint.as_ref(), out),
    }
}

fn analyze(model: &Value, input: (usize, usize), format: Format, out: &Path) -> Outcome {
    let g = build_model(&model_from_value(model.clone())?)?;
    let report = emit_report(&g, input)?;
    write_file(&out.join("report.json"), report.to_json())?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    match format {
        Format::Json => println!("{}", report.to_json()),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn run_gradcheck(model: &Value, cfg: &GradcheckConfig, out: &Path) -> Outcome {
    let g = build_model(&model_from_value(model.clone())?)?;
    let report = gradcheck(&g, cfg)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    println!(
        "checked {} gradients: max error {:.3e} at {} (tolerance {:.1e})",
        report.checked, report.max_error, report.worst, report.tolerance
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check failed: max error {:.3e} at {} exceeds {:.1e}",
            report.max_error, report.worst, report.tolerance
        )))
    }
}

fn run_train(model: &Value, data: &DataSpec, cfg: &TrainConfig, out: &Path) -> Outcome {
    let g = seg_graph(model, cfg.head_width)?;
    let (run, store) = train(&g, data, cfg)?;
    let meta = json!({ "model": model, "head_width": cfg.head_width, "num_classes": NUM_CLASSES });
    save_checkpoint(&store, meta, &out.join("checkpoint.ckpt"))?;
    write_file(&out.join("metrics.csv"), run.metrics_csv())?;
    let val = data.scenes(Split::Val)?;
    let final_val = if val.is_empty() { None } else { Some(evaluate(&g, &store, &val)?) };
    write_json(&out.join("run.json"), &json!({ "run": run, "final_val": final_val }))?;
    println!(
        "loss {:.4} -> {:.4}{}",
        run.initial_loss,
        run.final_loss,
        final_val.map(|m| format!(", final val mIoU {:.4}", m.miou)).unwrap_or_default()
    );
    Ok(())
}

fn run_eval(ckpt: &CheckpointRef, data: &DataSpec, out: &Path) -> Outcome {
    let (g, store, _) = ckpt.load()?;
    let val = data.scenes(Split::Val)?;
    let metrics = evaluate(&g, &store, &val)?;
    let gt: Vec<usize> = val.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let baseline = constant_background(&gt, NUM_CLASSES);
    write_json(&out.join("eval.json"), &json!({ "scenes": val.len(), "metrics": metrics, "constant_background": baseline }))?;
    println!(
        "mIoU {:.4}, pixel accuracy {:.4} (constant background: {:.4}, {:.4})",
        metrics.miou, metrics.pixel_acc, baseline.miou, baseline.pixel_acc
    );
    Ok(())
}

fn run_saliency(ckpt: &CheckpointRef, scene_seed: u64, data: &DataSpec, t: &Thresholds, out: &Path) -> Outcome {
    let (g, store, _) = ckpt.load()?;
    let scene = generate_scene(scene_seed, data.height, data.width, &data.scene)?;
    let map = gradient_map(&g, &store, &scene)?;
    let max_value = map.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let thresholds = match t {
        Thresholds::Explicit(v) => v.clone(),
        Thresholds::Linear(n) => linear_thresholds(max_value, *n),
    };
    let areas = area_curve(&map, &thresholds)?;
    let dump = |name: &str, t: &cednet_tensor::Tensor<f32>| -> Outcome {
        let path = out.join(name);
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        write_tensor(BufWriter::new(f), t).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    };
    dump("saliency.tensor", &map)?;
    dump("scene.tensor", &scene.image)?;
    let result = SaliencyResult { map: None, thresholds, areas, max_value };
    write_file(&out.join("areas.csv"), result.area_csv())?;
    write_json(&out.join("saliency.json"), &json!({ "scene_seed": scene_seed, "result": result }))?;
    println!("max gradient {max_value:.3e}; {} thresholds", result.thresholds.len());
    Ok(())
}

fn run_sweep_job(axis: SweepAxis, input: (usize, usize), training: Option<&SweepTraining>, out: &Path) -> Outcome {
    let points = family(axis);
    let rows = run_sweep(&points, input, training);
    write_file(&out.join("sweep.csv"), sweep_csv(&rows))?;
    write_json(&out.join("sweep.json"), &rows)?;
    print!("{}", sweep_csv(&rows));
    let failed: Vec<String> =
        rows.iter().filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.label))).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("{} of {} configurations failed; {}", failed.len(), rows.len(), failed.join("; "))))
    }
}

fn export(model: Option<&Value>, ckpt: Option<&CheckpointRef>, out: &Path) -> Outcome {
    let (g, model) = match (ckpt, model) {
        (Some(c), _) => {
            let (g, store, model) = c.load()?;
            let dir = out.join("params");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut index = Vec::new();
            for (name, t) in store.iter() {
                let file = format!("{name}.tensor");
                let path = dir.join(&file);
                let f = fs::File::create(&path).map_err(io_err(&path))?;
                write_tensor(BufWriter::new(f), t).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                index.push(json!({ "name": name, "shape": t.shape(), "file": file }));
            }
            write_json(&dir.join("index.json"), &index)?;
            (g, model)
        }
        (None, Some(m)) => (build_model(&model_from_value(m.clone())?)?, m.clone()),
        (None, None) => return Err(Failure::Config("export needs --config or --checkpoint".into())),
    };
    write_json(&out.join("config.json"), &model)?;
    write_json(&out.join("graph.json"), &g)?;
    println!("{} nodes exported", g.len());
    Ok(())
}
