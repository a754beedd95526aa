use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use walkdir::WalkDir;

use biasprobe::ablation::{apply_keep_size, sweep_levels, AblationKind, AblationSpec};
use biasprobe::fcr::{
    ablate_targets, canonical_order, compare_tasks, parse_report_csv, plot_csv, plot_points, report_csv, report_json,
    run_sweep_observed, sweep_network, ExperimentSpec, FcrRecord, PlotValue,
};
use biasprobe::imagecore::{load_image, save_image};
use biasprobe::tasks::{
    build_task_from_dirs, count_images, discover_categories, generate_synthetic_task, write_task, AugmentSpec,
    SyntheticMode, SyntheticTaskSpec, TaskSpec,
};
use biasprobe::tinynn::train::metrics_csv;
use biasprobe::tinynn::{train_observed, Checkpoint, ModelConfig, ModelFamily, OptimizerKind, Profile, TrainConfig};
use biasprobe::Error;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{AblateArgs, CompareArgs, DataArgs, GenerateArgs, ModelArgs, SweepArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    /// A sweep finished but some records have an undefined baseline.
    ErrorRecords(usize),
}

impl CliError {
    /// 1 other, 2 usage/parameters, 3 dataset/image, 4 divergence,
    /// 5 error records, 6 report mismatch/parse.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::ErrorRecords(_) => 5,
            CliError::Core(e) => match e {
                Error::InvalidParameter(_) | Error::UndefinedBaseline(_) => 2,
                Error::Dataset(_) | Error::Decode { .. } | Error::InvalidImage(_) => 3,
                Error::Divergence { .. } | Error::NonFinite(_) => 4,
                Error::SweepMismatch(_) | Error::Parse { .. } => 6,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
            CliError::ErrorRecords(n) => write!(f, "{n} sweep records have an undefined baseline (acc_o = 0)"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn relative(paths: impl IntoIterator<Item = PathBuf>, root: &Path) -> Vec<PathBuf> {
    paths.into_iter().map(|p| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p)).collect()
}

fn finish(command: &str, out: &Path, params: &impl Serialize, seed: Option<u64>, artifacts: Vec<PathBuf>) -> CliResult<()> {
    let manifest = RunManifest::new(command, params, seed, relative(artifacts, out))?;
    let path = manifest.write(out)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct GenerateParams {
    spec: SyntheticTaskSpec,
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mode: SyntheticMode = args.mode.parse()?;
    let spec = SyntheticTaskSpec {
        mode,
        classes: args.classes,
        per_class_train: args.train_per_class,
        per_class_val: args.val_per_class,
        image_size: args.size,
        seed: args.seed,
    };
    spec.validate()?;
    prepare_out(&args.out, args.force)?;
    let task = generate_synthetic_task(&spec)?;
    let written = write_task(&task, &args.out)?;
    finish("generate", &args.out, &GenerateParams { spec }, Some(args.seed), written)
}

#[derive(Serialize)]
struct AblateParams {
    spec: AblationSpec,
    category: Option<String>,
}

fn ablation_kind(s: &str) -> CliResult<AblationKind> {
    Ok(s.parse::<AblationKind>()?)
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let kind = ablation_kind(&args.kind)?;
    let window = match kind {
        AblationKind::ColorRemoval => args.window.unwrap_or(1),
        AblationKind::TopologyShuffle => args
            .grid
            .or(args.window)
            .ok_or_else(|| CliError::Usage("topology needs --grid".into()))?,
        AblationKind::TextureWeaken | AblationKind::ShapeWeaken => {
            args.window.ok_or_else(|| CliError::Usage(format!("{kind} needs --window")))?
        }
    };
    let spec = AblationSpec {
        kind,
        window,
        range_radius: args.range_radius,
        edge_threshold: args.edge_threshold,
        seed: args.seed,
    };
    spec.validate()?;
    if !args.input.is_dir() {
        return Err(Error::Dataset(format!("input directory {} does not exist", args.input.display())).into());
    }
    prepare_out(&args.out, args.force)?;

    let mut files = Vec::new();
    for entry in WalkDir::new(&args.input).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Core(Error::Dataset(e.to_string())))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(&args.input).expect("walk stays under its root").to_path_buf();
            if rel.as_os_str() == MANIFEST_FILE {
                continue;
            }
            files.push(rel);
        }
    }
    let written = files
        .par_iter()
        .map(|rel| -> CliResult<PathBuf> {
            let src = args.input.join(rel);
            let dst = args.out.join(rel);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            let is_png = rel.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let category = rel.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str());
            let targeted = args.category.as_deref().is_none_or(|c| Some(c) == category);
            if is_png && targeted && !spec.is_identity() {
                let img = load_image(&src)?;
                save_image(&apply_keep_size(&spec, &img)?, &dst)?;
            } else {
                fs::copy(&src, &dst).map_err(|e| io_err(&src, e))?;
            }
            Ok(dst)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let seed = (kind == AblationKind::TopologyShuffle).then_some(args.seed);
    finish("ablate", &args.out, &AblateParams { spec, category: args.category.clone() }, seed, written)
}

#[derive(Serialize)]
struct ResolvedData {
    categories: Vec<String>,
    train_n: usize,
    val_n: usize,
    input_size: usize,
}

fn load_task(data: &DataArgs, input_size: usize, target: Option<&str>) -> CliResult<(TaskSpec, ResolvedData)> {
    let categories = match &data.categories {
        Some(c) if !c.is_empty() => c.clone(),
        _ => discover_categories(&data.data)?,
    };
    let smallest = |split: &str| -> CliResult<usize> {
        Ok(count_images(&data.data, split, &categories)?.into_iter().min().unwrap_or(0))
    };
    let train_n = match data.train_n {
        Some(n) => n,
        None => smallest("train")?,
    };
    let val_n = match data.val_n {
        Some(n) => n,
        None => smallest("val")?,
    };
    let target = target.unwrap_or(&categories[0]).to_string();
    let task = build_task_from_dirs(&data.data, &categories, &target, train_n, val_n, input_size)?;
    Ok((task, ResolvedData { categories, train_n, val_n, input_size }))
}

fn resolve_model(m: &ModelArgs, num_classes: usize) -> CliResult<(ModelConfig, TrainConfig)> {
    let family: ModelFamily = m.model.parse()?;
    let profile: Profile = m.profile.parse()?;
    let config = family.build(num_classes, profile)?;
    let mut tc = TrainConfig::recipe(family, m.seed);
    if let Some(opt) = &m.opt {
        tc.optimizer = opt.parse::<OptimizerKind>()?;
        if m.lr.is_none() {
            tc.learning_rate = match tc.optimizer {
                OptimizerKind::Adam => 1e-3,
                OptimizerKind::SgdMomentum => 0.1,
            };
        }
    }
    if let Some(lr) = m.lr {
        tc.learning_rate = lr;
    }
    tc.weight_decay = m.wd;
    tc.batch_size = m.batch;
    tc.epochs = m.epochs;
    tc.augment = (!m.no_augment).then(|| AugmentSpec { seed: m.seed, ..AugmentSpec::default() });
    tc.validate()?;
    Ok((config, tc))
}

#[derive(Serialize)]
struct TrainParams {
    data: ResolvedData,
    model: ModelConfig,
    train: TrainConfig,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let family: ModelFamily = args.model.model.parse()?;
    let profile: Profile = args.model.profile.parse()?;
    let input_size = family.build(2, profile)?.input_size;
    let (task, data) = load_task(&args.data, input_size, None)?;
    let (config, tc) = resolve_model(&args.model, task.categories.len())?;
    prepare_out(&args.out, args.force)?;
    let outcome = train_observed(&config, &task, &tc, |m| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}  lr {}",
            m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy, m.learning_rate
        );
    })?;
    let ck_path = args.out.join("model.bpck");
    outcome.checkpoint.save(&ck_path)?;
    let metrics_path = args.out.join("metrics.csv");
    write_text(&metrics_path, &metrics_csv(&outcome.metrics))?;
    let seed = tc.seed;
    finish("train", &args.out, &TrainParams { data, model: config, train: tc }, Some(seed), vec![ck_path, metrics_path])
}

#[derive(Serialize)]
struct SweepParams {
    data: ResolvedData,
    target: String,
    ablations: Vec<AblationSpec>,
    source: SweepSource,
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum SweepSource {
    Checkpoint { path: PathBuf, model: ModelConfig, seed: u64, epoch: usize },
    TrainInline { model: ModelConfig, train: TrainConfig, repeats: usize },
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    if args.checkpoint.is_none() && !args.train_inline {
        return Err(CliError::Usage("sweep needs --checkpoint or --train-inline".into()));
    }
    let kind = ablation_kind(&args.ablation)?;
    let base = AblationSpec {
        kind,
        window: 1,
        range_radius: args.range_radius,
        edge_threshold: args.edge_threshold,
        seed: args.shuffle_seed,
    };
    let ablations = sweep_levels(kind, &args.windows, &base)?;

    let (records, data, source, seed, mut artifacts, json) = if let Some(path) = &args.checkpoint {
        let ck = Checkpoint::load(path)?;
        let net = ck.to_network()?;
        let (task, data) = load_task(&args.data, ck.config.input_size, Some(&args.target))?;
        if task.categories.len() != ck.config.num_classes {
            return Err(Error::Dataset(format!(
                "checkpoint has {} outputs but the dataset has {} categories",
                ck.config.num_classes,
                task.categories.len()
            ))
            .into());
        }
        prepare_out(&args.out, args.force)?;
        let ablated = ablate_targets(&task, task.target_category, &ablations)?;
        let mut records = sweep_network(&net, &task, task.target_category, &ablations, &ablated, ck.rng_seed)?;
        canonical_order(&mut records);
        let source = SweepSource::Checkpoint {
            path: path.clone(),
            model: ck.config.clone(),
            seed: ck.rng_seed,
            epoch: ck.epoch,
        };
        let json = checkpoint_report_json(&task, &ablations, &source, &records)?;
        (records, data, source, ck.rng_seed, Vec::new(), json)
    } else {
        let family: ModelFamily = args.model.model.parse()?;
        let profile: Profile = args.model.profile.parse()?;
        let input_size = family.build(2, profile)?.input_size;
        let (task, data) = load_task(&args.data, input_size, Some(&args.target))?;
        let (config, tc) = resolve_model(&args.model, task.categories.len())?;
        prepare_out(&args.out, args.force)?;
        let spec = ExperimentSpec {
            target_category: task.target_category,
            task,
            model: config.clone(),
            train: tc.clone(),
            ablations: ablations.clone(),
            repeats: args.repeats,
        };
        let mut saved = Vec::new();
        let mut save_err = None;
        let records = run_sweep_observed(&spec, |seed, net| {
            let path = args.out.join(format!("model_seed{seed}.bpck"));
            let ck = Checkpoint::from_network(net, None, 0, seed);
            match ck.save(&path) {
                Ok(()) => saved.push(path),
                Err(e) => save_err = Some(e),
            }
            eprintln!("trained seed {seed}");
        })?;
        if let Some(e) = save_err {
            return Err(e.into());
        }
        let json = report_json(&spec.summary(), &records)?;
        let source = SweepSource::TrainInline { model: config, train: tc.clone(), repeats: args.repeats };
        (records, data, source, tc.seed, saved, json)
    };

    let csv_path = args.out.join("report.csv");
    write_text(&csv_path, &report_csv(&records)?)?;
    let json_path = args.out.join("report.json");
    write_text(&json_path, &json)?;
    artifacts.push(csv_path);
    artifacts.push(json_path);
    let stem = format!("{}_{}", sanitize(&records[0].task), kind.as_str());
    for (value, suffix) in [(PlotValue::Fcr, "fcr"), (PlotValue::AccRm, "acc_rm")] {
        let path = args.out.join(format!("plot_{stem}_{suffix}.csv"));
        write_text(&path, &plot_csv(&plot_points(&records, value), value))?;
        artifacts.push(path);
    }
    for r in &records {
        let fcr = r.fcr.map_or("NaN".to_string(), |v| format!("{v:.4}"));
        println!("seed {} window {:>3}  acc_o {:.3}  acc_rm {:.3}  fcr {fcr}", r.seed, r.window, r.acc_o, r.acc_rm);
    }
    let params = SweepParams { data, target: args.target.clone(), ablations, source };
    finish("sweep", &args.out, &params, Some(seed), artifacts)?;
    let errors = records.iter().filter(|r| r.is_error()).count();
    if errors > 0 {
        return Err(CliError::ErrorRecords(errors));
    }
    Ok(())
}

/// Report layout for a sweep over an existing checkpoint, where no training
/// configuration is known.
fn checkpoint_report_json(
    task: &TaskSpec,
    ablations: &[AblationSpec],
    source: &SweepSource,
    records: &[FcrRecord],
) -> CliResult<String> {
    let value = serde_json::json!({
        "experiment": {
            "task": task.name,
            "categories": task.categories,
            "train_images": task.train.len(),
            "val_images": task.val.len(),
            "target_category": task.target_category,
            "ablations": ablations,
            "source": source,
        },
        "records": records,
    });
    serde_json::to_string_pretty(&value).map_err(|e| CliError::Core(Error::InvalidParameter(format!("json: {e}"))))
}

#[derive(Serialize)]
struct CompareParams {
    a: PathBuf,
    b: PathBuf,
}

fn read_report(path: &Path) -> CliResult<Vec<FcrRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_report_csv(&text).map_err(|e| match e {
        Error::Parse { line, reason } => Error::Parse { line, reason: format!("{}: {reason}", path.display()) }.into(),
        other => other.into(),
    })
}

pub fn compare(args: &CompareArgs) -> CliResult<()> {
    let a = read_report(&args.a)?;
    let b = read_report(&args.b)?;
    let cmp = compare_tasks(&a, &b)?;
    prepare_out(&args.out, args.force)?;
    println!("ablation {} on category '{}': {} vs {}", cmp.ablation, cmp.category, cmp.task_a, cmp.task_b);
    println!("window,mean_fcr_a,mean_fcr_b,difference");
    for w in &cmp.windows {
        println!("{},{},{},{}", w.window, w.mean_a, w.mean_b, w.difference);
    }
    println!("verdict: {}", cmp.verdict);
    let path = args.out.join("comparison.json");
    let text = serde_json::to_string_pretty(&cmp).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    write_text(&path, &text)?;
    let params = CompareParams { a: args.a.clone(), b: args.b.clone() };
    let manifest = RunManifest::new("compare", &params, None, relative(vec![path], &args.out))?;
    manifest.write(&args.out)?;
    Ok(())
}
