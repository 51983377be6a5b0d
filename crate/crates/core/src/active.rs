//! Pool-based active learning with closest-to-hyperplane batch selection.
//!
//! Loop order:
//!
//! 1. draw and label a small random initial set (topped up one instance at a
//!    time until both classes are present);
//! 2. estimate the positive amplification `PA = C₊/C₋` once, by
//!    cross-validation on that initial set;
//! 3. repeat: train with `C₊ = PA·C₋`, feed the stopping rule, select the
//!    next batch, acquire its labels.
//!
//! [`ActiveLearner`] exposes the loop as a state machine driven by label
//! submissions so that a human-facing service and a simulated oracle walk
//! exactly the same path; [`run`] drives it with an [`Oracle`].

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{arg, Error, Result};
use crate::metrics::f_measure;
use crate::rng::seeded;
use crate::stopping::{init_stop_set, StopConfig, StopDecision, StoppingState};
use crate::svm::{train_set, SvmModel, TrainConfig, TrainingSet};

const INIT_STREAM: u64 = 0x1417;
const CV_STREAM: u64 = 0xCF;
const RANDOM_STREAM: u64 = 1 << 32;

/// Upper bound on the initial set, as a multiple of `init_size`, when topping
/// it up to find both classes.
pub const INIT_BUDGET_FACTOR: usize = 5;

/// A candidate value in the PA grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PaCandidate {
    Value(f64),
    /// `#negatives / #positives` of the initial set.
    ClassRatio(ClassRatioTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRatioTag {
    Ratio,
}

impl PaCandidate {
    pub const RATIO: PaCandidate = PaCandidate::ClassRatio(ClassRatioTag::Ratio);

    pub fn default_grid() -> Vec<PaCandidate> {
        let mut grid: Vec<_> = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0]
            .into_iter()
            .map(PaCandidate::Value)
            .collect();
        grid.push(PaCandidate::RATIO);
        grid
    }

    fn resolve(self, ratio: f64) -> f64 {
        match self {
            PaCandidate::Value(v) => v,
            PaCandidate::ClassRatio(_) => ratio,
        }
    }
}

impl std::str::FromStr for PaCandidate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("ratio") {
            return Ok(PaCandidate::RATIO);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(PaCandidate::Value(v)),
            _ => Err(format!("PA candidate must be a positive number or `ratio`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlConfig {
    pub init_size: usize,
    pub batch_size: usize,
    pub pa_grid: Vec<PaCandidate>,
    pub pa_cv_folds: usize,
    pub c_minus: f64,
    pub seed: u64,
    /// Query iterations after the initial model.
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_passes: usize,
    /// End the run when the stopping rule fires instead of only recording it.
    pub halt_on_stop: bool,
}

impl AlConfig {
    /// Defaults scaled to a pool of `n` instances: initial set of
    /// `max(50, 1%)`, batches of `max(10, 1%)`.
    pub fn for_pool(n: usize) -> Self {
        let train = TrainConfig::default();
        Self {
            init_size: (n / 100).max(50),
            batch_size: (n / 100).max(10),
            pa_grid: PaCandidate::default_grid(),
            pa_cv_folds: 5,
            c_minus: train.c_minus,
            seed: 0,
            max_iterations: usize::MAX,
            tolerance: train.tolerance,
            max_passes: train.max_passes,
            halt_on_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_size < 2 {
            return arg("init_size must be at least 2");
        }
        if self.batch_size == 0 {
            return arg("batch_size must be at least 1");
        }
        if self.pa_grid.is_empty() {
            return arg("pa_grid must not be empty");
        }
        if let Some(PaCandidate::Value(v)) = self
            .pa_grid
            .iter()
            .find(|c| matches!(c, PaCandidate::Value(v) if !(v.is_finite() && *v > 0.0)))
        {
            return arg(format!("PA candidates must be positive, got {v}"));
        }
        if self.pa_cv_folds < 2 {
            return arg("pa_cv_folds must be at least 2");
        }
        self.train_config(1.0).validate()
    }

    pub fn train_config(&self, pa: f64) -> TrainConfig {
        TrainConfig {
            c_minus: self.c_minus,
            pa,
            tolerance: self.tolerance,
            max_passes: self.max_passes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ClosestInitPa,
    Random,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::ClosestInitPa => "AL",
            Strategy::Random => "Random",
        })
    }
}

/// Label provider for pool indices.
pub trait Oracle {
    fn label(&mut self, indices: &[usize]) -> Result<Vec<Label>>;
}

/// Answers from the pool's own (gold) labels. Refuses to label an index twice.
#[derive(Debug)]
pub struct SimulatedOracle<'a> {
    pool: &'a Dataset,
    asked: BTreeSet<usize>,
}

impl<'a> SimulatedOracle<'a> {
    pub fn new(pool: &'a Dataset) -> Self {
        Self {
            pool,
            asked: BTreeSet::new(),
        }
    }

    pub fn queries(&self) -> usize {
        self.asked.len()
    }
}

impl Oracle for SimulatedOracle<'_> {
    fn label(&mut self, indices: &[usize]) -> Result<Vec<Label>> {
        indices
            .iter()
            .map(|&i| {
                if i >= self.pool.len() {
                    return Err(Error::Oracle(format!("index {i} outside the pool")));
                }
                if !self.asked.insert(i) {
                    return Err(Error::Oracle(format!("index {i} requested twice")));
                }
                Ok(self.pool.get(i).label)
            })
            .collect()
    }
}

/// Oracle whose answers come from another thread (e.g. an annotation
/// front end). Each request blocks until the matching answer arrives.
#[derive(Debug)]
pub struct ExternalOracle {
    requests: mpsc::Sender<Vec<usize>>,
    answers: mpsc::Receiver<Vec<Label>>,
}

/// The answering side of an [`ExternalOracle`].
#[derive(Debug)]
pub struct AnnotatorHandle {
    pub requests: mpsc::Receiver<Vec<usize>>,
    pub answers: mpsc::Sender<Vec<Label>>,
}

impl ExternalOracle {
    pub fn channel() -> (ExternalOracle, AnnotatorHandle) {
        let (req_tx, req_rx) = mpsc::channel();
        let (ans_tx, ans_rx) = mpsc::channel();
        (
            ExternalOracle {
                requests: req_tx,
                answers: ans_rx,
            },
            AnnotatorHandle {
                requests: req_rx,
                answers: ans_tx,
            },
        )
    }
}

impl Oracle for ExternalOracle {
    fn label(&mut self, indices: &[usize]) -> Result<Vec<Label>> {
        self.requests
            .send(indices.to_vec())
            .map_err(|_| Error::Oracle("annotator disconnected".into()))?;
        let labels = self
            .answers
            .recv()
            .map_err(|_| Error::Oracle("annotator disconnected".into()))?;
        if labels.len() != indices.len() {
            return Err(Error::Oracle(format!(
                "asked for {} labels, received {}",
                indices.len(),
                labels.len()
            )));
        }
        Ok(labels)
    }
}

fn init_order(pool_len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut seeded(seed, INIT_STREAM));
    order
}

fn init_budget(pool_len: usize, init_size: usize) -> usize {
    init_size.saturating_mul(INIT_BUDGET_FACTOR).min(pool_len)
}

fn has_both_classes<'l>(labels: impl IntoIterator<Item = &'l Label>) -> bool {
    let (mut pos, mut neg) = (false, false);
    for l in labels {
        match l {
            Label::Positive => pos = true,
            Label::Negative => neg = true,
        }
    }
    pos && neg
}

/// Random initial set, labeled by `oracle`. If it holds a single class,
/// further random instances are labeled one at a time (up to
/// `INIT_BUDGET_FACTOR × init_size`) until both classes appear.
pub fn draw_init_set(
    pool: &Dataset,
    init_size: usize,
    seed: u64,
    oracle: &mut dyn Oracle,
) -> Result<Vec<(usize, Label)>> {
    if init_size == 0 || init_size > pool.len() {
        return arg(format!(
            "init_size {init_size} must be in 1..={}",
            pool.len()
        ));
    }
    let order = init_order(pool.len(), seed);
    let budget = init_budget(pool.len(), init_size);
    let first = &order[..init_size];
    let mut set: Vec<(usize, Label)> = first.iter().copied().zip(oracle.label(first)?).collect();
    while !has_both_classes(set.iter().map(|(_, l)| l)) {
        if set.len() >= budget {
            return Err(Error::Init(format!(
                "no instance of the other class among {} labeled instances; enlarge init_size",
                set.len()
            )));
        }
        let next = order[set.len()];
        let l = oracle.label(&[next])?[0];
        set.push((next, l));
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaEstimate {
    pub pa: f64,
    /// `(candidate, mean held-out F)` in ascending candidate order; empty on fallback.
    pub scores: Vec<(f64, f64)>,
    /// True when the class-ratio heuristic was used because some fold was degenerate.
    pub fallback: bool,
}

/// Class-stratified fold assignment: each class is shuffled and dealt round
/// robin, continuing the deal across classes.
fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeded(seed, CV_STREAM);
    let mut folds = vec![Vec::new(); k];
    let mut dealt = 0;
    for class in [Label::Positive, Label::Negative] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[dealt % k].push(i);
            dealt += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Picks PA for the rest of the run by `pa_cv_folds`-fold cross-validation on
/// the initial set, maximizing mean held-out F (ties go to the smaller PA).
/// Falls back to `#negatives / #positives` when a fold has no positive test
/// instance or a single-class training part.
pub fn estimate_pa(init: &TrainingSet<'_>, config: &AlConfig) -> Result<PaEstimate> {
    let positives = init.labels.iter().filter(|l| l.is_positive()).count();
    let negatives = init.len() - positives;
    if positives == 0 || negatives == 0 {
        return arg("PA estimation needs both classes in the initial set");
    }
    let ratio = negatives as f64 / positives as f64;
    let fallback = PaEstimate {
        pa: ratio,
        scores: Vec::new(),
        fallback: true,
    };
    let k = config.pa_cv_folds;
    if k > init.len() {
        return Ok(fallback);
    }
    let folds = stratified_folds(&init.labels, k, config.seed);
    let mut splits = Vec::with_capacity(k);
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let test_has_pos = test.iter().any(|&i| init.labels[i].is_positive());
        let train_ok = has_both_classes(train.iter().map(|&i| &init.labels[i]));
        if !test_has_pos || !train_ok {
            return Ok(fallback);
        }
        splits.push((train, test));
    }

    let mut candidates: Vec<f64> = config.pa_grid.iter().map(|c| c.resolve(ratio)).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut scores = Vec::with_capacity(candidates.len());
    for &pa in &candidates {
        let cfg = config.train_config(pa);
        let mut total = 0.0;
        for (train, test) in &splits {
            let set = TrainingSet {
                features: train.iter().map(|&i| init.features[i]).collect(),
                labels: train.iter().map(|&i| init.labels[i]).collect(),
                dimension: init.dimension,
            };
            let model = train_set(&set, &cfg)?;
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for &i in test.iter() {
                let pred = model.predict(init.features[i])?;
                match (pred, init.labels[i]) {
                    (Label::Positive, Label::Positive) => tp += 1,
                    (Label::Positive, Label::Negative) => fp += 1,
                    (Label::Negative, Label::Positive) => fn_ += 1,
                    _ => {}
                }
            }
            total += f_measure(tp, fp, fn_).f1;
        }
        scores.push((pa, total / k as f64));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(PaEstimate {
        pa: best.0,
        scores,
        fallback: false,
    })
}

/// The `min(batch_size, |unlabeled|)` indices with the smallest
/// `|w·x + b|`, ascending, ties by index.
pub fn select_batch(
    model: &SvmModel,
    pool: &Dataset,
    unlabeled: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>> {
    Ok(rank_by_margin(model, pool, unlabeled, batch_size)?
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

/// Like [`select_batch`] but also returns each index's `|decision value|`.
pub fn rank_by_margin(
    model: &SvmModel,
    pool: &Dataset,
    unlabeled: &[usize],
    batch_size: usize,
) -> Result<Vec<(usize, f64)>> {
    if unlabeled.is_empty() {
        return arg("no unlabeled instances to select from");
    }
    let mut scored = unlabeled
        .iter()
        .map(|&i| Ok((i, model.decision_value(&pool.get(i).features)?.abs())))
        .collect::<Result<Vec<_>>>()?;
    let by_margin = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    let k = batch_size.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_margin);
        scored.truncate(k);
    }
    scored.sort_by(by_margin);
    Ok(scored)
}

/// Uniform sample without replacement, determined by `(seed, iteration)`.
pub fn select_random(
    unlabeled: &[usize],
    batch_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<Vec<usize>> {
    if unlabeled.is_empty() {
        return arg("no unlabeled instances to select from");
    }
    let mut sorted = unlabeled.to_vec();
    sorted.sort_unstable();
    let mut rng = seeded(seed, RANDOM_STREAM + iteration as u64);
    let k = batch_size.min(sorted.len());
    let (picked, _) = sorted.partial_shuffle(&mut rng, k);
    Ok(picked.to_vec())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Iteration whose model is the first to be trained with these labels.
    pub iteration: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeMap<usize, Label>,
    pub unlabeled: BTreeSet<usize>,
    pub query_log: Vec<QueryRecord>,
}

impl PoolState {
    fn new(n: usize) -> Self {
        Self {
            labeled: BTreeMap::new(),
            unlabeled: (0..n).collect(),
            query_log: Vec::new(),
        }
    }

    pub fn unlabeled_vec(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// The labeled set in pool order.
    pub fn training_set<'p>(&self, pool: &'p Dataset) -> TrainingSet<'p> {
        TrainingSet {
            features: self.labeled.keys().map(|&i| &pool.get(i).features).collect(),
            labels: self.labeled.values().copied().collect(),
            dimension: pool.dimension(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub bias: f64,
    pub weight_norm: f64,
    pub support_vectors: usize,
    pub smo_updates: usize,
    pub converged: bool,
}

impl ModelSummary {
    pub fn of(model: &SvmModel) -> Self {
        Self {
            bias: model.bias,
            weight_norm: model.norm_squared().sqrt(),
            support_vectors: model.alphas.iter().filter(|&&a| a > 0.0).count(),
            smo_updates: model.iterations,
            converged: model.converged,
        }
    }
}

/// One line of the run-trace stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    pub pa: f64,
    pub model: ModelSummary,
    /// Batch chosen by this iteration's model (empty when the run ends here).
    pub selected: Vec<usize>,
    /// Kappa against the previous model's stop-set predictions.
    pub agreement: Option<f64>,
    pub stop: StopDecision,
    pub stopped_at: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    PoolExhausted,
    MaxIterations,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub strategy: Strategy,
    pub pa: Option<PaEstimate>,
    pub init_indices: Vec<usize>,
    pub records: Vec<IterationRecord>,
    pub stopped_at: Option<usize>,
    pub end: Option<EndReason>,
}

impl RunTrace {
    /// Line-delimited JSON, one record per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Waiting for labels of the (possibly topped-up) initial set.
    Init,
    /// Waiting for labels of a query batch.
    Querying,
    /// All pending labels are in; a model must be trained.
    ReadyToTrain,
    Finished(EndReason),
    /// The initial set could not be completed; nothing more can happen.
    Failed,
}

/// Work needed to produce the next model; independent of the learner so it
/// can run without holding any lock on it.
#[derive(Clone, Debug)]
pub struct TrainJob {
    indices: Vec<usize>,
    labels: Vec<Label>,
    config: AlConfig,
    pa: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pa: Option<PaEstimate>,
    pub train_config: TrainConfig,
    pub model: SvmModel,
}

impl TrainJob {
    pub fn run(&self, pool: &Dataset) -> Result<TrainOutcome> {
        let set = TrainingSet {
            features: self.indices.iter().map(|&i| &pool.get(i).features).collect(),
            labels: self.labels.clone(),
            dimension: pool.dimension(),
        };
        let (estimate, pa) = match self.pa {
            Some(pa) => (None, pa),
            None => {
                let est = estimate_pa(&set, &self.config)?;
                let pa = est.pa;
                (Some(est), pa)
            }
        };
        let train_config = self.config.train_config(pa);
        let model = train_set(&set, &train_config)?;
        Ok(TrainOutcome {
            pa: estimate,
            train_config,
            model,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ActiveLearner<P: Borrow<Dataset>> {
    pool: P,
    config: AlConfig,
    stop_config: StopConfig,
    strategy: Strategy,
    phase: Phase,
    state: PoolState,
    init_order: Vec<usize>,
    batch: Vec<usize>,
    received: BTreeMap<usize, Label>,
    pa: Option<f64>,
    stopping: Option<StoppingState>,
    iteration: usize,
    trace: RunTrace,
    last_model: Option<SvmModel>,
}

impl<P: Borrow<Dataset>> ActiveLearner<P> {
    pub fn new(
        pool: P,
        config: AlConfig,
        stop_config: StopConfig,
        strategy: Strategy,
    ) -> Result<Self> {
        config.validate()?;
        stop_config.validate()?;
        let n = pool.borrow().len();
        if config.init_size > n {
            return arg(format!("init_size {} exceeds pool size {n}", config.init_size));
        }
        let init_order = init_order(n, config.seed);
        let mut state = PoolState::new(n);
        let batch = init_order[..config.init_size].to_vec();
        for i in &batch {
            state.unlabeled.remove(i);
        }
        Ok(Self {
            pool,
            config,
            stop_config,
            strategy,
            phase: Phase::Init,
            state,
            init_order,
            batch,
            received: BTreeMap::new(),
            pa: None,
            stopping: None,
            iteration: 0,
            trace: RunTrace {
                strategy,
                pa: None,
                init_indices: Vec::new(),
                records: Vec::new(),
                stopped_at: None,
                end: None,
            },
            last_model: None,
        })
    }

    pub fn pool(&self) -> &Dataset {
        self.pool.borrow()
    }

    pub fn config(&self) -> &AlConfig {
        &self.config
    }

    pub fn stop_config(&self) -> &StopConfig {
        &self.stop_config
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Finished(_) | Phase::Failed)
    }

    pub fn state(&self) -> &PoolState {
        &self.state
    }

    pub fn pa(&self) -> Option<f64> {
        self.pa
    }

    pub fn stopping(&self) -> Option<&StoppingState> {
        self.stopping.as_ref()
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }

    pub fn last_model(&self) -> Option<&SvmModel> {
        self.last_model.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The whole current batch (labeled or not yet).
    pub fn batch(&self) -> &[usize] {
        match self.phase {
            Phase::Init | Phase::Querying => &self.batch,
            _ => &[],
        }
    }

    /// Indices of the current batch still missing a label, in batch order.
    pub fn outstanding(&self) -> Vec<usize> {
        self.batch()
            .iter()
            .copied()
            .filter(|i| !self.received.contains_key(i))
            .collect()
    }

    /// Labels already received for the current, still incomplete batch.
    pub fn partial_labels(&self) -> &BTreeMap<usize, Label> {
        &self.received
    }

    pub fn is_outstanding(&self, index: usize) -> bool {
        matches!(self.phase, Phase::Init | Phase::Querying)
            && self.batch.contains(&index)
            && !self.received.contains_key(&index)
    }

    /// Records the label of one outstanding index. When the batch becomes
    /// complete the learner either asks for one more initial instance or moves
    /// to [`Phase::ReadyToTrain`].
    pub fn submit(&mut self, index: usize, label: Label) -> Result<()> {
        if !self.is_outstanding(index) {
            return arg(format!("index {index} is not awaiting a label"));
        }
        self.received.insert(index, label);
        if self.received.len() == self.batch.len() {
            self.close_batch()?;
        }
        Ok(())
    }

    fn close_batch(&mut self) -> Result<()> {
        for (&i, &l) in &self.received {
            self.state.labeled.insert(i, l);
        }
        let indices = std::mem::take(&mut self.batch);
        self.received.clear();
        self.log_query(self.iteration, indices);
        if self.phase == Phase::Init {
            let drawn = self.state.labeled.len();
            if !has_both_classes(self.state.labeled.values()) {
                if drawn >= init_budget(self.pool().len(), self.config.init_size) {
                    self.phase = Phase::Failed;
                    return Err(Error::Init(format!(
                        "no instance of the other class among {drawn} labeled instances; enlarge init_size"
                    )));
                }
                let next = self.init_order[drawn];
                self.state.unlabeled.remove(&next);
                self.batch = vec![next];
                return Ok(());
            }
            self.trace.init_indices = self.state.labeled.keys().copied().collect();
        }
        self.phase = Phase::ReadyToTrain;
        Ok(())
    }

    fn log_query(&mut self, iteration: usize, indices: Vec<usize>) {
        self.state.query_log.push(QueryRecord { iteration, indices });
    }

    /// The training work for the next model, if one is due.
    pub fn train_job(&self) -> Option<TrainJob> {
        if self.phase != Phase::ReadyToTrain {
            return None;
        }
        Some(TrainJob {
            indices: self.state.labeled.keys().copied().collect(),
            labels: self.state.labeled.values().copied().collect(),
            config: self.config.clone(),
            pa: self.pa,
        })
    }

    /// Installs a freshly trained model: fixes PA on the first call, updates
    /// the stopping rule, records the iteration and selects the next batch.
    pub fn complete(&mut self, outcome: TrainOutcome) -> Result<&IterationRecord> {
        if self.phase != Phase::ReadyToTrain {
            return arg("no training was due");
        }
        if self.pa.is_none() {
            let est = outcome
                .pa
                .ok_or_else(|| Error::Argument("first model must carry a PA estimate".into()))?;
            self.pa = Some(est.pa);
            self.trace.pa = Some(est);
            if !self.state.unlabeled.is_empty() {
                self.stopping = Some(init_stop_set(
                    self.pool.borrow(),
                    &self.state.unlabeled_vec(),
                    &self.stop_config,
                )?);
            }
        }
        let pa = self.pa.expect("set above");
        let model = outcome.model;

        let (agreement, decision) = match self.stopping.as_mut() {
            Some(s) => {
                let seen = s.models_seen();
                let d = s.update(&model, self.pool.borrow(), self.iteration);
                let kappa = if seen > 0 {
                    s.recent_agreements().last()
                } else {
                    None
                };
                (kappa, d)
            }
            None => (None, StopDecision::Continue),
        };
        let stopped_at = self.stopping.as_ref().and_then(StoppingState::stopped_at);
        if self.trace.stopped_at.is_none() {
            self.trace.stopped_at = stopped_at;
        }

        let end = if self.state.unlabeled.is_empty() {
            Some(EndReason::PoolExhausted)
        } else if self.config.halt_on_stop && decision == StopDecision::Stop {
            Some(EndReason::Stopped)
        } else if self.iteration >= self.config.max_iterations {
            Some(EndReason::MaxIterations)
        } else {
            None
        };

        let selected = match end {
            Some(_) => Vec::new(),
            None => {
                let unlabeled = self.state.unlabeled_vec();
                match self.strategy {
                    Strategy::ClosestInitPa => {
                        select_batch(&model, self.pool.borrow(), &unlabeled, self.config.batch_size)?
                    }
                    Strategy::Random => select_random(
                        &unlabeled,
                        self.config.batch_size,
                        self.config.seed,
                        self.iteration,
                    )?,
                }
            }
        };

        self.trace.records.push(IterationRecord {
            iteration: self.iteration,
            labeled_count: self.state.labeled.len(),
            pa,
            model: ModelSummary::of(&model),
            selected: selected.clone(),
            agreement,
            stop: decision,
            stopped_at,
        });
        self.last_model = Some(model);

        match end {
            Some(reason) => {
                self.phase = Phase::Finished(reason);
                self.trace.end = Some(reason);
            }
            None => {
                for i in &selected {
                    self.state.unlabeled.remove(i);
                }
                self.batch = selected;
                self.iteration += 1;
                self.phase = Phase::Querying;
            }
        }
        Ok(self.trace.records.last().expect("just pushed"))
    }

    /// Trains synchronously if a model is due.
    pub fn advance(&mut self) -> Result<Option<&IterationRecord>> {
        let Some(job) = self.train_job() else {
            return Ok(None);
        };
        let outcome = job.run(self.pool.borrow())?;
        self.complete(outcome).map(Some)
    }
}

/// A run that ended with an error, with everything recorded up to that point.
#[derive(Debug)]
pub struct RunFailure {
    pub trace: RunTrace,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} iterations: {}",
            self.trace.records.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {}

pub fn run(
    pool: &Dataset,
    config: &AlConfig,
    stop_config: &StopConfig,
    oracle: &mut dyn Oracle,
    strategy: Strategy,
) -> std::result::Result<RunTrace, RunFailure> {
    run_with_observer(pool, config, stop_config, oracle, strategy, &mut |_, _| {})
}

/// Runs the loop to its end, calling `observer` with every iteration's record
/// and model.
pub fn run_with_observer(
    pool: &Dataset,
    config: &AlConfig,
    stop_config: &StopConfig,
    oracle: &mut dyn Oracle,
    strategy: Strategy,
    observer: &mut dyn FnMut(&IterationRecord, &SvmModel),
) -> std::result::Result<RunTrace, RunFailure> {
    let mut learner = match ActiveLearner::new(pool, config.clone(), *stop_config, strategy) {
        Ok(l) => l,
        Err(error) => {
            return Err(RunFailure {
                trace: RunTrace {
                    strategy,
                    pa: None,
                    init_indices: Vec::new(),
                    records: Vec::new(),
                    stopped_at: None,
                    end: None,
                },
                error,
            })
        }
    };
    let step = |learner: &mut ActiveLearner<&Dataset>,
                oracle: &mut dyn Oracle,
                observer: &mut dyn FnMut(&IterationRecord, &SvmModel)|
     -> Result<()> {
        let ask = learner.outstanding();
        if !ask.is_empty() {
            let labels = oracle.label(&ask)?;
            if labels.len() != ask.len() {
                return Err(Error::Oracle(format!(
                    "asked for {} labels, received {}",
                    ask.len(),
                    labels.len()
                )));
            }
            for (i, l) in ask.into_iter().zip(labels) {
                learner.submit(i, l)?;
            }
        }
        if learner.phase() == Phase::ReadyToTrain {
            learner.advance()?;
            let rec = learner.trace().records.last().expect("advanced");
            observer(rec, learner.last_model().expect("advanced"));
        }
        Ok(())
    };
    while !learner.is_finished() {
        if let Err(error) = step(&mut learner, oracle, observer) {
            return Err(RunFailure {
                trace: learner.into_trace(),
                error,
            });
        }
    }
    Ok(learner.into_trace())
}

/// Partial [`AlConfig`]: unset fields take the pool-size-dependent defaults of
/// [`AlConfig::for_pool`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlSettings {
    pub init_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub pa_grid: Option<Vec<PaCandidate>>,
    pub pa_cv_folds: Option<usize>,
    pub c_minus: Option<f64>,
    pub seed: Option<u64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub max_passes: Option<usize>,
    pub halt_on_stop: Option<bool>,
}

impl AlSettings {
    pub fn resolve(&self, pool_size: usize) -> AlConfig {
        let d = AlConfig::for_pool(pool_size);
        AlConfig {
            init_size: self.init_size.unwrap_or(d.init_size),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            pa_grid: self.pa_grid.clone().unwrap_or(d.pa_grid),
            pa_cv_folds: self.pa_cv_folds.unwrap_or(d.pa_cv_folds),
            c_minus: self.c_minus.unwrap_or(d.c_minus),
            seed: self.seed.unwrap_or(d.seed),
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            max_passes: self.max_passes.unwrap_or(d.max_passes),
            halt_on_stop: self.halt_on_stop.unwrap_or(d.halt_on_stop),
        }
    }
}
