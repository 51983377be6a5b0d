//! K-fold learning-curve experiments comparing closest-to-hyperplane
//! selection against random sampling, evaluated at percentage checkpoints and
//! at the automatic stopping point.

use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{run_with_observer, AlSettings, RunTrace, SimulatedOracle, Strategy};
use crate::dataset::{
    build_vocabulary, fold_indices, vectorize_corpus, Dataset, Document, Label, LabeledInstance,
};
use crate::error::{arg, Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::stopping::StopConfig;
use crate::svm::SvmModel;

pub const DEFAULT_CHECKPOINTS: [f64; 4] = [20.0, 30.0, 40.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub al: AlSettings,
    pub stop: StopConfig,
    /// Percentages of each fold's training pool.
    pub checkpoints: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            al: AlSettings::default(),
            stop: StopConfig::default(),
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            folds: 10,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if let Some(c) = self
            .checkpoints
            .iter()
            .find(|&&c| !(c > 0.0 && c <= 100.0))
        {
            return arg(format!("checkpoint {c} outside (0, 100]"));
        }
        self.stop.validate()
    }
}

/// Row key of a learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Percent(f64),
    AutoStop,
}

impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Checkpoint::Percent(p) => write!(f, "{p}"),
            Checkpoint::AutoStop => f.write_str("auto"),
        }
    }
}

/// A model evaluated on the held-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPoint {
    pub checkpoint: Checkpoint,
    pub iteration: usize,
    pub labels_used: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    /// Percentage checkpoints in the configured order (unreached ones absent).
    pub points: Vec<FoldPoint>,
    pub auto_stop: Option<FoldPoint>,
    pub trace: RunTrace,
}

impl StrategyRun {
    pub fn at(&self, percent: f64) -> Option<&FoldPoint> {
        self.points
            .iter()
            .find(|p| p.checkpoint == Checkpoint::Percent(percent))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub pool_size: usize,
    pub test_size: usize,
    pub al: StrategyRun,
    pub random: StrategyRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub fold: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub checkpoint: Checkpoint,
    /// Mean labels consumed across folds, rounded.
    pub labels_used: usize,
    pub percent_of_pool: f64,
    pub strategy: Strategy,
    /// Confusion counts summed over folds; precision, recall and F1 averaged
    /// over folds.
    pub metrics: Metrics,
    pub auto_stop: bool,
    /// Folds contributing to this row.
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub strategy: Strategy,
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    pub fn row(&self, checkpoint: Checkpoint) -> Option<&CurveRow> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub al: LearningCurve,
    pub random: LearningCurve,
    pub folds: Vec<FoldResult>,
    pub skipped: Vec<SkippedFold>,
}

impl ExperimentReport {
    pub fn curves(&self) -> [&LearningCurve; 2] {
        [&self.al, &self.random]
    }
}

fn reached(labeled: usize, percent: f64, pool: usize) -> bool {
    labeled as f64 * 100.0 >= percent * pool as f64
}

fn run_strategy(
    pool: &Dataset,
    test: &[LabeledInstance],
    config: &ExperimentConfig,
    seed: u64,
    strategy: Strategy,
) -> Result<StrategyRun> {
    let mut al = config.al.resolve(pool.len());
    al.seed = seed;
    al.halt_on_stop = false;
    let stop = StopConfig { seed, ..config.stop };
    let mut points: Vec<Option<FoldPoint>> = vec![None; config.checkpoints.len()];
    let mut auto_stop = None;
    let mut eval_error = None;
    let mut observer = |rec: &crate::active::IterationRecord, model: &SvmModel| {
        let mut eval = |checkpoint| match evaluate(model, test) {
            Ok(metrics) => Some(FoldPoint {
                checkpoint,
                iteration: rec.iteration,
                labels_used: rec.labeled_count,
                metrics,
            }),
            Err(e) => {
                eval_error.get_or_insert(e);
                None
            }
        };
        for (slot, &pct) in points.iter_mut().zip(&config.checkpoints) {
            if slot.is_none() && reached(rec.labeled_count, pct, pool.len()) {
                *slot = eval(Checkpoint::Percent(pct));
            }
        }
        if rec.stopped_at == Some(rec.iteration) {
            auto_stop = eval(Checkpoint::AutoStop);
        }
    };
    let mut oracle = SimulatedOracle::new(pool);
    let trace = run_with_observer(pool, &al, &stop, &mut oracle, strategy, &mut observer)
        .map_err(|f| f.error)?;
    if let Some(e) = eval_error {
        return Err(e);
    }
    Ok(StrategyRun {
        strategy,
        points: points.into_iter().flatten().collect(),
        auto_stop,
        trace,
    })
}

fn run_fold(
    fold: usize,
    pool: &Dataset,
    test: &Dataset,
    config: &ExperimentConfig,
) -> std::result::Result<FoldResult, SkippedFold> {
    let skip = |reason: String| SkippedFold { fold, reason };
    let positives = pool.labels().filter(|l| l.is_positive()).count();
    if positives == 0 || positives == pool.len() {
        return Err(skip("training pool holds a single class".into()));
    }
    if test.is_empty() {
        return Err(skip("empty test fold".into()));
    }
    // matched seeds: both strategies share the initial set and stop set
    let seed = config.seed.wrapping_add(fold as u64);
    let run = |s| run_strategy(pool, test.instances(), config, seed, s);
    let al = run(Strategy::ClosestInitPa).map_err(|e| skip(e.to_string()))?;
    let random = run(Strategy::Random).map_err(|e| skip(e.to_string()))?;
    Ok(FoldResult {
        fold,
        pool_size: pool.len(),
        test_size: test.len(),
        al,
        random,
    })
}

fn aggregate(points: &[(&FoldPoint, usize)], strategy: Strategy) -> CurveRow {
    let k = points.len() as f64;
    let mean = |f: &dyn Fn(&FoldPoint) -> f64| points.iter().map(|(p, _)| f(p)).sum::<f64>() / k;
    let labels = mean(&|p| p.labels_used as f64);
    let percent = points
        .iter()
        .map(|(p, pool)| 100.0 * p.labels_used as f64 / *pool as f64)
        .sum::<f64>()
        / k;
    let sum = |f: &dyn Fn(&Metrics) -> usize| points.iter().map(|(p, _)| f(&p.metrics)).sum();
    let checkpoint = points[0].0.checkpoint;
    CurveRow {
        checkpoint,
        labels_used: labels.round() as usize,
        percent_of_pool: percent,
        strategy,
        metrics: Metrics {
            tp: sum(&|m| m.tp),
            fp: sum(&|m| m.fp),
            fn_: sum(&|m| m.fn_),
            tn: sum(&|m| m.tn),
            precision: mean(&|p| p.metrics.precision),
            recall: mean(&|p| p.metrics.recall),
            f1: mean(&|p| p.metrics.f1),
        },
        auto_stop: checkpoint == Checkpoint::AutoStop,
        folds: points.len(),
    }
}

fn learning_curve(
    folds: &[FoldResult],
    checkpoints: &[f64],
    strategy: Strategy,
) -> LearningCurve {
    fn pick(f: &FoldResult, strategy: Strategy) -> &StrategyRun {
        match strategy {
            Strategy::ClosestInitPa => &f.al,
            Strategy::Random => &f.random,
        }
    }
    let mut rows = Vec::new();
    for &pct in checkpoints {
        let pts: Vec<_> = folds
            .iter()
            .filter_map(|f| pick(f, strategy).at(pct).map(|p| (p, f.pool_size)))
            .collect();
        if !pts.is_empty() {
            rows.push(aggregate(&pts, strategy));
        }
    }
    let stops: Vec<_> = folds
        .iter()
        .filter_map(|f| pick(f, strategy).auto_stop.as_ref().map(|p| (p, f.pool_size)))
        .collect();
    if !stops.is_empty() {
        rows.push(aggregate(&stops, strategy));
    }
    rows.sort_by(|a, b| {
        a.labels_used
            .cmp(&b.labels_used)
            .then(a.auto_stop.cmp(&b.auto_stop))
    });
    LearningCurve { strategy, rows }
}

fn assemble(
    outcomes: Vec<std::result::Result<FoldResult, SkippedFold>>,
    config: &ExperimentConfig,
) -> ExperimentReport {
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(f) => folds.push(f),
            Err(s) => {
                log::warn!("fold {} skipped: {}", s.fold, s.reason);
                skipped.push(s);
            }
        }
    }
    ExperimentReport {
        al: learning_curve(&folds, &config.checkpoints, Strategy::ClosestInitPa),
        random: learning_curve(&folds, &config.checkpoints, Strategy::Random),
        folds,
        skipped,
    }
}

/// Cross-validated learning curves for both strategies. Folds run in parallel
/// and are merged in fold order.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let folds = fold_indices(dataset.len(), config.folds, config.seed)?;
    let outcomes: Vec<_> = (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..folds.len())
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().copied())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            run_fold(f, &dataset.subset(&train), &dataset.subset(&folds[f]), config)
        })
        .collect();
    Ok(assemble(outcomes, config))
}

/// Like [`run_experiment`] on a tokenized corpus, fitting the binary
/// bag-of-words vocabulary on each fold's training part only.
pub fn run_text_experiment(
    docs: &[Document],
    min_count: usize,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    if min_count == 0 {
        return arg("min_count must be at least 1");
    }
    let folds = fold_indices(docs.len(), config.folds, config.seed)?;
    let outcomes: Vec<_> = (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let train_docs: Vec<Document> = (0..docs.len())
                .filter(|i| folds[f].binary_search(i).is_err())
                .map(|i| docs[i].clone())
                .collect();
            let test_docs: Vec<Document> = folds[f].iter().map(|&i| docs[i].clone()).collect();
            let tokens: Vec<&[String]> = train_docs.iter().map(|d| d.tokens.as_slice()).collect();
            let vocab = build_vocabulary(&tokens, min_count).expect("min_count checked");
            run_fold(
                f,
                &vectorize_corpus(&train_docs, &vocab),
                &vectorize_corpus(&test_docs, &vocab),
                config,
            )
        })
        .collect();
    Ok(assemble(outcomes, config))
}

/// Binary relabeling of a categorical problem: `category` against the rest.
pub fn one_vs_rest_labels(categories: &[usize], category: usize) -> Vec<Label> {
    categories
        .iter()
        .map(|&c| {
            if c == category {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    pub checkpoint: Checkpoint,
    pub strategy: Strategy,
    pub f1: f64,
    pub categories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsRestReport {
    pub per_category: Vec<(usize, ExperimentReport)>,
    /// F averaged over categories, per checkpoint and strategy.
    pub macro_f1: Vec<MacroRow>,
}

/// One binary experiment per category (`categories[i] < num_categories`);
/// the features of `dataset` are used and its labels ignored.
pub fn one_vs_rest(
    dataset: &Dataset,
    categories: &[usize],
    num_categories: usize,
    config: &ExperimentConfig,
) -> Result<OneVsRestReport> {
    if num_categories < 2 {
        return arg("one-vs-rest needs at least two categories");
    }
    if categories.len() != dataset.len() {
        return arg(format!(
            "{} categories for {} instances",
            categories.len(),
            dataset.len()
        ));
    }
    let mut counts = vec![0usize; num_categories];
    for &c in categories {
        if c >= num_categories {
            return arg(format!("category {c} out of range"));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return arg(format!("category {c} has no instances"));
    }
    let per_category = (0..num_categories)
        .map(|c| {
            let binary = dataset.relabeled(one_vs_rest_labels(categories, c));
            Ok((c, run_experiment(&binary, config)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut macro_f1 = Vec::new();
    let keys = config
        .checkpoints
        .iter()
        .map(|&p| Checkpoint::Percent(p))
        .chain(std::iter::once(Checkpoint::AutoStop));
    for checkpoint in keys {
        for strategy in [Strategy::ClosestInitPa, Strategy::Random] {
            let fs: Vec<f64> = per_category
                .iter()
                .filter_map(|(_, r)| {
                    let curve = match strategy {
                        Strategy::ClosestInitPa => &r.al,
                        Strategy::Random => &r.random,
                    };
                    curve.row(checkpoint).map(|row| row.metrics.f1)
                })
                .collect();
            if !fs.is_empty() {
                macro_f1.push(MacroRow {
                    checkpoint,
                    strategy,
                    f1: fs.iter().sum::<f64>() / fs.len() as f64,
                    categories: fs.len(),
                });
            }
        }
    }
    Ok(OneVsRestReport {
        per_category,
        macro_f1,
    })
}

pub const CSV_HEADER: &str = "checkpoint,labels_used,strategy,precision,recall,f1,auto_stop";

/// Curve CSV: one row per checkpoint per strategy, reals with 4 decimals.
pub fn write_curves<W: Write>(out: &mut W, curves: &[&LearningCurve]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for curve in curves {
        for r in &curve.rows {
            writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4},{}",
                r.checkpoint,
                r.labels_used,
                r.strategy,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.auto_stop
            )?;
        }
    }
    Ok(())
}

/// One parsed line of the curve CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub checkpoint: Checkpoint,
    pub labels_used: usize,
    pub strategy: Strategy,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auto_stop: bool,
}

pub fn read_curves<R: BufRead>(reader: R) -> Result<Vec<CsvRow>> {
    let mut lines = reader.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing curve CSV header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line?;
        let perr = |message: String| Error::Parse {
            line: no + 2,
            message,
        };
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 7 {
            return Err(perr(format!("expected 7 columns, got {}", cols.len())));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|_| perr(format!("bad number `{s}`")));
        rows.push(CsvRow {
            checkpoint: match cols[0] {
                "auto" => Checkpoint::AutoStop,
                p => Checkpoint::Percent(real(p)?),
            },
            labels_used: cols[1]
                .parse()
                .map_err(|_| perr(format!("bad count `{}`", cols[1])))?,
            strategy: match cols[2] {
                "AL" => Strategy::ClosestInitPa,
                "Random" => Strategy::Random,
                s => return Err(perr(format!("unknown strategy `{s}`"))),
            },
            precision: real(cols[3])?,
            recall: real(cols[4])?,
            f1: real(cols[5])?,
            auto_stop: cols[6]
                .parse()
                .map_err(|_| perr(format!("bad flag `{}`", cols[6])))?,
        });
    }
    Ok(rows)
}
