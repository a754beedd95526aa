//! Feature contribution rate and the train / ablate / re-test loop.
//!
//! `FCR = 1 - (acc_o - acc_rm) / acc_o`, where `acc_o` is the target
//! category's validation accuracy on original images and `acc_rm` the same
//! accuracy after one cue has been ablated. Lower means the cue mattered more.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{apply_keep_size, AblationKind, AblationSpec};
use crate::error::{Error, Result};
use crate::imagecore::LabeledImage;
use crate::tasks::TaskSpec;
use crate::tinynn::train::{evaluate, train, TrainConfig};
use crate::tinynn::{ModelConfig, Network};

pub const REPORT_HEADER: [&str; 11] = [
    "task",
    "model",
    "category",
    "ablation",
    "window",
    "seed",
    "acc_o",
    "acc_rm",
    "fcr",
    "overall_acc_o",
    "overall_acc_rm",
];

pub fn compute_fcr(acc_o: f64, acc_rm: f64) -> Result<f64> {
    if !(acc_o > 0.0) {
        return Err(Error::UndefinedBaseline(acc_o));
    }
    if !(0.0..=1.0).contains(&acc_o) || !(0.0..=1.0).contains(&acc_rm) {
        return Err(Error::InvalidParameter(format!(
            "accuracies must lie in [0, 1], got acc_o = {acc_o}, acc_rm = {acc_rm}"
        )));
    }
    Ok(1.0 - (acc_o - acc_rm) / acc_o)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcrRecord {
    pub task: String,
    pub model: String,
    pub category: String,
    pub ablation: AblationKind,
    pub window: usize,
    pub seed: u64,
    pub acc_o: f64,
    pub acc_rm: f64,
    /// `None` marks an error record (undefined baseline).
    pub fcr: Option<f64>,
    pub overall_acc_o: f64,
    pub overall_acc_rm: f64,
}

impl FcrRecord {
    pub fn is_error(&self) -> bool {
        self.fcr.is_none()
    }
}

/// Everything that determines a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablations: Vec<AblationSpec>,
    pub target_category: usize,
    pub repeats: usize,
}

/// The serialisable part of an [`ExperimentSpec`]: the task is described by
/// its name, categories and split sizes rather than its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub task: String,
    pub categories: Vec<String>,
    pub train_images: usize,
    pub val_images: usize,
    pub target_category: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablations: Vec<AblationSpec>,
    pub repeats: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ablations.is_empty() {
            return Err(Error::InvalidParameter("a sweep needs at least one ablation".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be >= 1".into()));
        }
        if self.target_category >= self.task.categories.len() {
            return Err(Error::InvalidParameter(format!(
                "target category {} out of range for {} categories",
                self.target_category,
                self.task.categories.len()
            )));
        }
        for a in &self.ablations {
            a.validate()?;
        }
        self.train.validate()
    }

    /// Training seeds: consecutive values starting at the configured seed.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.train.seed.wrapping_add(r)).collect()
    }

    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary {
            task: self.task.name.clone(),
            categories: self.task.categories.clone(),
            train_images: self.task.train.len(),
            val_images: self.task.val.len(),
            target_category: self.target_category,
            model: self.model.clone(),
            train: self.train.clone(),
            ablations: self.ablations.clone(),
            repeats: self.repeats,
            seeds: self.seeds(),
        }
    }
}

/// Target-category validation images after each ablation, in `ablations`
/// order. Independent of the model, so it can be shared across repeats.
pub fn ablate_targets(task: &TaskSpec, target: usize, ablations: &[AblationSpec]) -> Result<Vec<Vec<LabeledImage>>> {
    let targets: Vec<&LabeledImage> = task.val.iter().filter(|s| s.label == target).collect();
    ablations
        .iter()
        .map(|spec| {
            targets
                .par_iter()
                .map(|s| Ok(LabeledImage { image: apply_keep_size(spec, &s.image)?, ..(*s).clone() }))
                .collect()
        })
        .collect()
}

/// Evaluate one trained network against pre-ablated target images.
pub fn sweep_network(
    net: &Network<f32>,
    task: &TaskSpec,
    target: usize,
    ablations: &[AblationSpec],
    ablated: &[Vec<LabeledImage>],
    seed: u64,
) -> Result<Vec<FcrRecord>> {
    if ablations.len() != ablated.len() {
        return Err(Error::SweepMismatch("one ablated image set per ablation is required".into()));
    }
    let originals: Vec<&LabeledImage> = task.val.iter().filter(|s| s.label == target).collect();
    if originals.is_empty() {
        return Err(Error::Dataset(format!("no validation images for category '{}'", task.categories[target])));
    }
    let others: Vec<&LabeledImage> = task.val.iter().filter(|s| s.label != target).collect();
    let all: Vec<&LabeledImage> = task.val.iter().collect();
    let base = evaluate(net, &all)?;
    let acc_o = base.category(target).expect("target has images");
    let others_correct = if others.is_empty() { 0 } else { evaluate(net, &others)?.correct };

    let mut records = Vec::with_capacity(ablations.len());
    for (spec, images) in ablations.iter().zip(ablated) {
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let rm = evaluate(net, &refs)?;
        let acc_rm = rm.overall();
        let fcr = match compute_fcr(acc_o, acc_rm) {
            Ok(v) => Some(v),
            Err(Error::UndefinedBaseline(_)) => None,
            Err(e) => return Err(e),
        };
        records.push(FcrRecord {
            task: task.name.clone(),
            model: net.config().name.clone(),
            category: task.categories[target].clone(),
            ablation: spec.kind,
            window: spec.window,
            seed,
            acc_o,
            acc_rm,
            fcr,
            overall_acc_o: base.overall(),
            overall_acc_rm: (others_correct + rm.correct) as f64 / (others.len() + refs.len()) as f64,
        });
    }
    Ok(records)
}

/// Sort by seed, then window, keeping the sweep order otherwise.
pub fn canonical_order(records: &mut [FcrRecord]) {
    records.sort_by_key(|r| (r.seed, r.window));
}

/// Train once per repeat seed on the unablated task, then measure the
/// target category under every ablation.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<FcrRecord>> {
    run_sweep_observed(spec, |_, _| {})
}

/// As [`run_sweep`], calling `on_trained(seed, network)` after each training run.
pub fn run_sweep_observed(spec: &ExperimentSpec, mut on_trained: impl FnMut(u64, &Network<f32>)) -> Result<Vec<FcrRecord>> {
    spec.validate()?;
    let mut task = spec.task.clone();
    task.target_category = spec.target_category;
    let ablated = ablate_targets(&task, spec.target_category, &spec.ablations)?;
    let mut records = Vec::new();
    for seed in spec.seeds() {
        let mut tc = spec.train.clone();
        tc.seed = seed;
        if let Some(a) = tc.augment.as_mut() {
            a.seed = seed;
        }
        let outcome = train(&spec.model, &task, &tc)?;
        on_trained(seed, &outcome.network);
        records.extend(sweep_network(&outcome.network, &task, spec.target_category, &spec.ablations, &ablated, seed)?);
    }
    canonical_order(&mut records);
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

pub fn report_csv(records: &[FcrRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
    w.write_record(REPORT_HEADER).map_err(to_err)?;
    for r in records {
        w.write_record([
            r.task.clone(),
            r.model.clone(),
            r.category.clone(),
            r.ablation.as_str().to_string(),
            r.window.to_string(),
            r.seed.to_string(),
            r.acc_o.to_string(),
            r.acc_rm.to_string(),
            fmt_opt(r.fcr),
            r.overall_acc_o.to_string(),
            r.overall_acc_rm.to_string(),
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parse a report written by [`report_csv`]. Line numbers in errors are 1-based.
pub fn parse_report_csv(text: &str) -> Result<Vec<FcrRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut saw_header = false;
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let parse_err = |reason: String| Error::Parse { line, reason };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if i == 0 {
            if row.iter().ne(REPORT_HEADER) {
                return Err(parse_err(format!("expected header {}", REPORT_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if row.len() != REPORT_HEADER.len() {
            return Err(parse_err(format!("expected {} fields, found {}", REPORT_HEADER.len(), row.len())));
        }
        let num = |idx: usize| -> Result<f64> {
            row[idx].parse::<f64>().map_err(|_| parse_err(format!("{}: '{}' is not a number", REPORT_HEADER[idx], &row[idx])))
        };
        let int = |idx: usize| -> Result<u64> {
            row[idx].parse::<u64>().map_err(|_| parse_err(format!("{}: '{}' is not an integer", REPORT_HEADER[idx], &row[idx])))
        };
        let fcr = num(8)?;
        records.push(FcrRecord {
            task: row[0].to_string(),
            model: row[1].to_string(),
            category: row[2].to_string(),
            ablation: row[3].parse().map_err(|_| parse_err(format!("unknown ablation '{}'", &row[3])))?,
            window: int(4)? as usize,
            seed: int(5)?,
            acc_o: num(6)?,
            acc_rm: num(7)?,
            fcr: fcr.is_finite().then_some(fcr),
            overall_acc_o: num(9)?,
            overall_acc_rm: num(10)?,
        });
    }
    if !saw_header {
        return Err(Error::Parse { line: 1, reason: "empty report".into() });
    }
    Ok(records)
}

#[derive(Serialize)]
struct JsonReport<'a> {
    experiment: &'a ExperimentSummary,
    records: &'a [FcrRecord],
}

pub fn report_json(summary: &ExperimentSummary, records: &[FcrRecord]) -> Result<String> {
    serde_json::to_string_pretty(&JsonReport { experiment: summary, records })
        .map_err(|e| Error::InvalidParameter(format!("json: {e}")))
}

/// Which per-record value a plot curve shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotValue {
    Fcr,
    AccRm,
}

/// `(window, mean over seeds)` for one task/ablation curve, windows ascending.
/// Error records are skipped.
pub fn plot_points(records: &[FcrRecord], value: PlotValue) -> Vec<(usize, f64)> {
    let mut by_window: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        let v = match value {
            PlotValue::Fcr => r.fcr,
            PlotValue::AccRm => r.fcr.map(|_| r.acc_rm),
        };
        if let Some(v) = v {
            by_window.entry(r.window).or_default().push(v);
        }
    }
    by_window.into_iter().map(|(w, vs)| (w, vs.iter().sum::<f64>() / vs.len() as f64)).collect()
}

pub fn plot_csv(points: &[(usize, f64)], value: PlotValue) -> String {
    let name = match value {
        PlotValue::Fcr => "mean_fcr",
        PlotValue::AccRm => "mean_acc_rm",
    };
    let mut out = format!("window,{name}\n");
    for (w, v) in points {
        out.push_str(&format!("{w},{v}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowComparison {
    pub window: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b`.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// The named task has the lower mean FCR at the largest window.
    MoreImportantIn(String),
    Indistinguishable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::MoreImportantIn(t) => write!(f, "feature more important in {t}"),
            Verdict::Indistinguishable => f.write_str("indistinguishable"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task_a: String,
    pub task_b: String,
    pub category: String,
    pub ablation: AblationKind,
    pub windows: Vec<WindowComparison>,
    pub verdict: Verdict,
}

impl Comparison {
    pub fn at_max_window(&self) -> &WindowComparison {
        self.windows.last().expect("comparisons are never empty")
    }
}

fn single<'a, T: Ord + Clone + fmt::Debug + 'a>(what: &str, items: impl Iterator<Item = &'a T>) -> Result<T> {
    let set: BTreeSet<&T> = items.collect();
    match set.len() {
        1 => Ok((*set.iter().next().expect("one element")).clone()),
        0 => Err(Error::SweepMismatch(format!("no records to take the {what} from"))),
        _ => Err(Error::SweepMismatch(format!("records mix several {what} values: {set:?}"))),
    }
}

/// Compare the same ablation sweep on the same target category across two tasks.
pub fn compare_tasks(a: &[FcrRecord], b: &[FcrRecord]) -> Result<Comparison> {
    let task_a = single("task", a.iter().map(|r| &r.task))?;
    let task_b = single("task", b.iter().map(|r| &r.task))?;
    let kind_a = single("ablation", a.iter().map(|r| &r.ablation))?;
    let kind_b = single("ablation", b.iter().map(|r| &r.ablation))?;
    if kind_a != kind_b {
        return Err(Error::SweepMismatch(format!("ablations differ: {kind_a} vs {kind_b}")));
    }
    let cat_a = single("category", a.iter().map(|r| &r.category))?;
    let cat_b = single("category", b.iter().map(|r| &r.category))?;
    if cat_a != cat_b {
        return Err(Error::SweepMismatch(format!("target categories differ: '{cat_a}' vs '{cat_b}'")));
    }
    let pa = plot_points(a, PlotValue::Fcr);
    let pb = plot_points(b, PlotValue::Fcr);
    let wa: BTreeSet<usize> = a.iter().map(|r| r.window).collect();
    let wb: BTreeSet<usize> = b.iter().map(|r| r.window).collect();
    if wa != wb {
        return Err(Error::SweepMismatch(format!("windows differ: {wa:?} vs {wb:?}")));
    }
    let mean_at = |points: &[(usize, f64)], w: usize| points.iter().find(|(x, _)| *x == w).map_or(f64::NAN, |p| p.1);
    let windows: Vec<WindowComparison> = wa
        .iter()
        .map(|&w| {
            let (ma, mb) = (mean_at(&pa, w), mean_at(&pb, w));
            WindowComparison { window: w, mean_a: ma, mean_b: mb, difference: ma - mb }
        })
        .collect();
    let last = windows.last().expect("window sets are non-empty");
    let verdict = if last.mean_a < last.mean_b {
        Verdict::MoreImportantIn(task_a.clone())
    } else if last.mean_b < last.mean_a {
        Verdict::MoreImportantIn(task_b.clone())
    } else {
        Verdict::Indistinguishable
    };
    Ok(Comparison { task_a, task_b, category: cat_a, ablation: kind_a, windows, verdict })
}
