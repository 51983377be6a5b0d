//! Linear soft-margin SVM with separate cost factors for the two classes,
//! trained by maximal-violating-pair SMO on the dual.
//!
//! The dual solved here is
//!
//! ```text
//! min_α  ½ αᵀQα − Σ α_k    s.t.  Σ α_k y_k = 0,  0 ≤ α_k ≤ C(y_k)
//! ```
//!
//! with `Q_ij = y_i y_j ⟨x_i, x_j⟩`, `C(+1) = pa · c_minus` and
//! `C(−1) = c_minus`. The bias is left unregularized.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabeledInstance, SparseVector};
use crate::error::{arg, Error, Result};

/// Curvature floor for pairs of (near) identical points.
const TAU: f64 = 1e-12;
/// Memory budget for cached kernel columns.
const CACHE_BYTES: usize = 128 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Cost factor for negative examples.
    pub c_minus: f64,
    /// Positive amplification: the positive cost factor is `pa * c_minus`.
    pub pa: f64,
    /// Bound on the maximal KKT violation at convergence.
    pub tolerance: f64,
    /// Pair-update budget per 100 training points.
    pub max_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c_minus: 1.0,
            pa: 1.0,
            tolerance: 1e-3,
            max_passes: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn with_costs(c_minus: f64, pa: f64) -> Self {
        Self {
            c_minus,
            pa,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.c_minus) {
            return arg(format!("c_minus must be positive, got {}", self.c_minus));
        }
        if !positive(self.pa) {
            return arg(format!("pa must be positive, got {}", self.pa));
        }
        if !positive(self.tolerance) {
            return arg(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_passes == 0 {
            return arg("max_passes must be at least 1");
        }
        Ok(())
    }

    pub fn c_plus(&self) -> f64 {
        self.pa * self.c_minus
    }

    pub fn cost(&self, label: Label) -> f64 {
        match label {
            Label::Positive => self.c_plus(),
            Label::Negative => self.c_minus,
        }
    }

    fn update_budget(&self, n: usize) -> usize {
        self.max_passes.saturating_mul(n.div_ceil(100).max(1))
    }
}

/// Borrowed view of a training set: features, labels and the feature-space
/// dimension the model should cover.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub features: Vec<&'a SparseVector>,
    pub labels: Vec<Label>,
    pub dimension: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn from_instances(data: &'a [LabeledInstance]) -> Self {
        Self {
            features: data.iter().map(|x| &x.features).collect(),
            labels: data.iter().map(|x| x.label).collect(),
            dimension: data
                .iter()
                .map(|x| x.features.required_dimension())
                .max()
                .unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Dual coefficients, one per training instance; empty for a model
    /// reloaded from disk.
    pub alphas: Vec<f64>,
    pub config: TrainConfig,
    pub converged: bool,
    /// Pair updates performed.
    pub iterations: usize,
}

impl SvmModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    /// `w·x + b`.
    pub fn decision_value(&self, x: &SparseVector) -> Result<f64> {
        Ok(x.dot(&self.weights)? + self.bias)
    }

    /// `+1` iff the decision value is strictly positive.
    pub fn predict(&self, x: &SparseVector) -> Result<Label> {
        Ok(label_for(self.decision_value(x)?))
    }

    pub fn norm_squared(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Sign rule with ties going to the negative class.
pub fn label_for(decision_value: f64) -> Label {
    if decision_value > 0.0 {
        Label::Positive
    } else {
        Label::Negative
    }
}

pub fn decision_value(model: &SvmModel, x: &SparseVector) -> Result<f64> {
    model.decision_value(x)
}

pub fn predict(model: &SvmModel, x: &SparseVector) -> Result<Label> {
    model.predict(x)
}

pub fn train(data: &[LabeledInstance], config: &TrainConfig) -> Result<SvmModel> {
    train_set(&TrainingSet::from_instances(data), config)
}

pub fn train_set(set: &TrainingSet<'_>, config: &TrainConfig) -> Result<SvmModel> {
    Smo::new(set, config)?.solve(None)
}

/// Like [`train_set`], calling `observer(update, dual_objective)` after every
/// pair update. The dual objective is in maximization form
/// `Σα − ½‖w‖²`.
pub fn train_set_observed(
    set: &TrainingSet<'_>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<SvmModel> {
    Smo::new(set, config)?.solve(Some(observer))
}

struct ColumnCache {
    slots: Vec<Option<Box<[f64]>>>,
    last_used: Vec<u64>,
    clock: u64,
    live: usize,
    capacity: usize,
}

impl ColumnCache {
    fn new(n: usize) -> Self {
        let capacity = (CACHE_BYTES / (8 * n.max(1))).clamp(2, n.max(2));
        Self {
            slots: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            live: 0,
            capacity,
        }
    }

    fn touch(&mut self, i: usize) {
        self.clock += 1;
        self.last_used[i] = self.clock;
    }

    fn ensure(&mut self, i: usize, pin: usize, compute: impl FnOnce() -> Box<[f64]>) {
        if self.slots[i].is_none() {
            if self.live == self.capacity {
                let victim = (0..self.slots.len())
                    .filter(|&k| k != pin && self.slots[k].is_some())
                    .min_by_key(|&k| self.last_used[k])
                    .expect("cache holds at least two columns");
                self.slots[victim] = None;
                self.live -= 1;
            }
            self.slots[i] = Some(compute());
            self.live += 1;
        }
        self.touch(i);
    }
}

struct Smo<'s, 'a> {
    set: &'s TrainingSet<'a>,
    config: TrainConfig,
    y: Vec<f64>,
    upper: Vec<f64>,
    diag: Vec<f64>,
    alpha: Vec<f64>,
    /// `y_k − w·x_k`: the bias that would put instance `k` on its margin.
    /// Equals `−y_k` times the dual gradient.
    shift: Vec<f64>,
    /// 0 where α_k can move so that `shift_k` counts toward the upper end of
    /// the KKT bias interval, −∞ elsewhere.
    up_mask: Vec<f64>,
    /// 0 where `shift_k` counts toward the lower end, +∞ elsewhere.
    low_mask: Vec<f64>,
    cache: ColumnCache,
    /// Feature-major copy of the data: `postings[f]` lists `(instance, value)`.
    postings: Vec<Vec<(usize, f64)>>,
}

impl<'s, 'a> Smo<'s, 'a> {
    fn new(set: &'s TrainingSet<'a>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if set.is_empty() {
            return arg("training data is empty");
        }
        if set.features.len() != set.labels.len() {
            return arg("features and labels differ in length");
        }
        if let Some(x) = set
            .features
            .iter()
            .find(|x| x.required_dimension() > set.dimension)
        {
            return arg(format!(
                "feature index {} exceeds training dimension {}",
                x.required_dimension() - 1,
                set.dimension
            ));
        }
        let positives = set.labels.iter().filter(|l| l.is_positive()).count();
        if positives == 0 || positives == set.len() {
            return Err(Error::Training(
                "training data must contain both classes".into(),
            ));
        }
        let n = set.len();
        let y: Vec<f64> = set.labels.iter().map(|l| l.sign()).collect();
        let mut smo = Self {
            set,
            config: *config,
            shift: y.clone(),
            y,
            upper: set.labels.iter().map(|&l| config.cost(l)).collect(),
            diag: set.features.iter().map(|x| x.squared_norm()).collect(),
            alpha: vec![0.0; n],
            up_mask: vec![0.0; n],
            low_mask: vec![0.0; n],
            cache: ColumnCache::new(n),
            postings: feature_postings(set),
        };
        for t in 0..n {
            smo.refresh_masks(t);
        }
        Ok(smo)
    }

    fn refresh_masks(&mut self, t: usize) {
        let (a, c) = (self.alpha[t], self.upper[t]);
        let (up, low) = if self.y[t] > 0.0 {
            (a < c, a > 0.0)
        } else {
            (a > 0.0, a < c)
        };
        self.up_mask[t] = if up { 0.0 } else { f64::NEG_INFINITY };
        self.low_mask[t] = if low { 0.0 } else { f64::INFINITY };
    }

    fn load_column(&mut self, i: usize, pin: usize) {
        let Self {
            set,
            cache,
            postings,
            ..
        } = self;
        cache.ensure(i, pin, || {
            let mut col = vec![0.0; set.len()].into_boxed_slice();
            for &(f, v) in set.features[i].entries() {
                for &(k, u) in &postings[f] {
                    col[k] += v * u;
                }
            }
            col
        });
    }

    /// Maximal violating pair `(i, j, m − M)`: `i` maximizes the shift over
    /// the "up" set, `j` minimizes it over the "low" set.
    fn select_pair(&self) -> Option<(usize, usize, f64)> {
        let mut best = PairSearch::new();
        for (t, ((&v, &um), &lm)) in self
            .shift
            .iter()
            .zip(&self.up_mask)
            .zip(&self.low_mask)
            .enumerate()
        {
            best.offer(t, v + um, v + lm);
        }
        best.finish()
    }

    fn dual_objective(&self) -> f64 {
        0.5 * self
            .alpha
            .iter()
            .zip(&self.y)
            .zip(&self.shift)
            .map(|((a, y), v)| a * (y * v + 1.0))
            .sum::<f64>()
    }

    fn solve(mut self, mut observer: Option<&mut dyn FnMut(usize, f64)>) -> Result<SvmModel> {
        let n = self.alpha.len();
        let budget = self.config.update_budget(n);
        let tol = self.config.tolerance;
        let mut iterations = 0;
        let mut next = self.select_pair();
        let converged = loop {
            let Some((i, j, gap)) = next else {
                break true;
            };
            if gap <= tol {
                break true;
            }
            if iterations == budget {
                break false;
            }
            self.load_column(i, j);
            self.load_column(j, i);
            let (yi, yj) = (self.y[i], self.y[j]);
            let kij = self.cache.slots[i].as_ref().expect("loaded")[j];
            let curvature = (self.diag[i] + self.diag[j] - 2.0 * kij).max(TAU);

            // Move along α_i += y_i t, α_j −= y_j t, which keeps Σ α y fixed.
            let room_i = if yi > 0.0 {
                self.upper[i] - self.alpha[i]
            } else {
                self.alpha[i]
            };
            let room_j = if yj > 0.0 {
                self.alpha[j]
            } else {
                self.upper[j] - self.alpha[j]
            };
            let t = (gap / curvature).min(room_i).min(room_j);

            let old_i = self.alpha[i];
            let old_j = self.alpha[j];
            self.alpha[i] = if t == room_i {
                if yi > 0.0 {
                    self.upper[i]
                } else {
                    0.0
                }
            } else {
                (old_i + yi * t).clamp(0.0, self.upper[i])
            };
            self.alpha[j] = if t == room_j {
                if yj > 0.0 {
                    0.0
                } else {
                    self.upper[j]
                }
            } else {
                (old_j - yj * t).clamp(0.0, self.upper[j])
            };
            self.refresh_masks(i);
            self.refresh_masks(j);
            let di = (self.alpha[i] - old_i) * yi;
            let dj = (self.alpha[j] - old_j) * yj;

            // w moves by di·x_i + dj·x_j; update shifts and search the next
            // pair in the same pass
            let col_i = self.cache.slots[i].as_ref().expect("loaded");
            let col_j = self.cache.slots[j].as_ref().expect("loaded");
            let mut best = PairSearch::new();
            let rows = self
                .shift
                .iter_mut()
                .zip(col_i.iter().zip(col_j.iter()))
                .zip(self.up_mask.iter().zip(&self.low_mask));
            for (t, ((v, (&ki, &kj)), (&um, &lm))) in rows.enumerate() {
                *v -= ki * di + kj * dj;
                best.offer(t, *v + um, *v + lm);
            }
            next = best.finish();
            iterations += 1;
            if let Some(obs) = observer.as_mut() {
                obs(iterations, self.dual_objective());
            }
        };
        Ok(self.finish(converged, iterations))
    }

    fn finish(self, converged: bool, iterations: usize) -> SvmModel {
        let weights = weights_from_alphas(
            self.set.features.iter().copied(),
            &self.set.labels,
            &self.alpha,
            self.set.dimension,
        );
        let bias = recover_bias(self.set, &self.alpha, &self.upper, &weights);
        SvmModel {
            weights,
            bias,
            alphas: self.alpha,
            config: self.config,
            converged,
            iterations,
        }
    }
}

struct PairSearch {
    i: usize,
    m: f64,
    j: usize,
    lo: f64,
}

impl PairSearch {
    fn new() -> Self {
        Self {
            i: usize::MAX,
            m: f64::NEG_INFINITY,
            j: usize::MAX,
            lo: f64::INFINITY,
        }
    }

    #[inline(always)]
    fn offer(&mut self, t: usize, up: f64, low: f64) {
        if up > self.m {
            self.i = t;
            self.m = up;
        }
        if low < self.lo {
            self.j = t;
            self.lo = low;
        }
    }

    fn finish(self) -> Option<(usize, usize, f64)> {
        (self.i != usize::MAX && self.j != usize::MAX).then_some((self.i, self.j, self.m - self.lo))
    }
}

fn feature_postings(set: &TrainingSet<'_>) -> Vec<Vec<(usize, f64)>> {
    let mut postings = vec![Vec::new(); set.dimension];
    for (k, x) in set.features.iter().enumerate() {
        for &(f, v) in x.entries() {
            postings[f].push((k, v));
        }
    }
    postings
}

/// `w = Σ α_k y_k x_k`.
pub fn weights_from_alphas<'x>(
    features: impl IntoIterator<Item = &'x SparseVector>,
    labels: &[Label],
    alphas: &[f64],
    dimension: usize,
) -> Vec<f64> {
    let mut w = vec![0.0; dimension];
    for ((x, &l), &a) in features.into_iter().zip(labels).zip(alphas) {
        if a == 0.0 {
            continue;
        }
        let coef = a * l.sign();
        for &(k, v) in x.entries() {
            w[k] += coef * v;
        }
    }
    w
}

/// Mean of `y − w·x` over free support vectors; without free vectors, the
/// midpoint of the interval of biases consistent with the KKT conditions.
fn recover_bias(set: &TrainingSet<'_>, alpha: &[f64], upper: &[f64], w: &[f64]) -> f64 {
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lower_bound = f64::NEG_INFINITY;
    let mut upper_bound = f64::INFINITY;
    for k in 0..alpha.len() {
        let y = set.labels[k].sign();
        let r = y - set.features[k].dot_unchecked(w);
        if alpha[k] > 0.0 && alpha[k] < upper[k] {
            free_sum += r;
            free_count += 1;
            continue;
        }
        // y f ≥ 1 needed at α = 0, y f ≤ 1 at α = C
        let wants_at_least = (alpha[k] == 0.0) == (y > 0.0);
        if wants_at_least {
            lower_bound = lower_bound.max(r);
        } else {
            upper_bound = upper_bound.min(r);
        }
    }
    if free_count > 0 {
        return free_sum / free_count as f64;
    }
    match (lower_bound.is_finite(), upper_bound.is_finite()) {
        (true, true) => 0.5 * (lower_bound + upper_bound),
        (true, false) => lower_bound,
        (false, true) => upper_bound,
        (false, false) => 0.0,
    }
}

/// Slack, primal and dual objective of a trained model on its training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub slacks: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
}

impl SlackReport {
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

fn check_training_match(model: &SvmModel, set: &TrainingSet<'_>) -> Result<()> {
    if model.alphas.len() != set.len() {
        return arg(format!(
            "model has {} dual coefficients but the data has {} instances",
            model.alphas.len(),
            set.len()
        ));
    }
    Ok(())
}

pub fn diagnostics(model: &SvmModel, data: &[LabeledInstance]) -> Result<SlackReport> {
    diagnostics_set(model, &TrainingSet::from_instances(data))
}

pub fn diagnostics_set(model: &SvmModel, set: &TrainingSet<'_>) -> Result<SlackReport> {
    check_training_match(model, set)?;
    let mut slacks = Vec::with_capacity(set.len());
    let mut loss = 0.0;
    for (x, &l) in set.features.iter().zip(&set.labels) {
        let xi = (1.0 - l.sign() * model.decision_value(x)?).max(0.0);
        loss += model.config.cost(l) * xi;
        slacks.push(xi);
    }
    let half_norm = 0.5 * model.norm_squared();
    // the dual is evaluated at the weights implied by the alphas
    let implied = weights_from_alphas(
        set.features.iter().copied(),
        &set.labels,
        &model.alphas,
        model.dimension(),
    );
    let implied_half_norm = 0.5 * implied.iter().map(|w| w * w).sum::<f64>();
    let dual = model.alphas.iter().sum::<f64>() - implied_half_norm;
    Ok(SlackReport {
        slacks,
        primal: half_norm + loss,
        dual,
    })
}

pub fn kkt_violation(model: &SvmModel, data: &[LabeledInstance]) -> Result<f64> {
    kkt_violation_set(model, &TrainingSet::from_instances(data))
}

/// Largest KKT residual over the training set, where `f` is the decision value:
/// `max(0, 1 − y f)` at α = 0, `max(0, y f − 1)` at α = C, `|y f − 1|` otherwise.
pub fn kkt_violation_set(model: &SvmModel, set: &TrainingSet<'_>) -> Result<f64> {
    check_training_match(model, set)?;
    let mut worst: f64 = 0.0;
    for ((x, &l), &a) in set.features.iter().zip(&set.labels).zip(&model.alphas) {
        let margin = l.sign() * model.decision_value(x)?;
        let c = model.config.cost(l);
        let r = if a <= 0.0 {
            (1.0 - margin).max(0.0)
        } else if a >= c {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Plain-text model record: a header of `key value` lines, then one
/// `index:weight` line per non-zero weight (1-based indices).
pub fn model_to_string(model: &SvmModel) -> String {
    let mut s = String::new();
    let c = &model.config;
    writeln!(s, "linear_svm").unwrap();
    writeln!(s, "dim {}", model.dimension()).unwrap();
    writeln!(s, "bias {}", model.bias).unwrap();
    writeln!(s, "c_minus {}", c.c_minus).unwrap();
    writeln!(s, "pa {}", c.pa).unwrap();
    writeln!(s, "tolerance {}", c.tolerance).unwrap();
    writeln!(s, "max_passes {}", c.max_passes).unwrap();
    writeln!(s, "converged {}", model.converged).unwrap();
    writeln!(s, "iterations {}", model.iterations).unwrap();
    writeln!(s, "weights").unwrap();
    for (i, &w) in model.weights.iter().enumerate() {
        if w != 0.0 {
            writeln!(s, "{}:{}", i + 1, w).unwrap();
        }
    }
    s
}

pub fn parse_model<R: BufRead>(reader: R) -> Result<SvmModel> {
    let mut lines = reader.lines().enumerate();
    let perr = |line: usize, message: String| Error::Parse {
        line: line + 1,
        message,
    };
    let mut next = |want: &str| -> Result<(usize, String)> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| perr(0, format!("missing `{want}`")))?;
        let line = line?;
        Ok((no, line))
    };
    let (no, magic) = next("linear_svm")?;
    if magic.trim() != "linear_svm" {
        return Err(perr(no, "not a linear_svm model".into()));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (no, line) = next(key)?;
        match line.trim().split_once(' ') {
            Some((k, v)) if k == key => Ok((no, v.trim().to_owned())),
            _ => Err(perr(no, format!("expected `{key} <value>`"))),
        }
    };
    fn num<T: std::str::FromStr>(no: usize, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            line: no + 1,
            message: format!("bad value `{v}`"),
        })
    }
    let (no, v) = field("dim")?;
    let dim: usize = num(no, &v)?;
    let (no, v) = field("bias")?;
    let bias: f64 = num(no, &v)?;
    let (no, v) = field("c_minus")?;
    let c_minus = num(no, &v)?;
    let (no, v) = field("pa")?;
    let pa = num(no, &v)?;
    let (no, v) = field("tolerance")?;
    let tolerance = num(no, &v)?;
    let (no, v) = field("max_passes")?;
    let max_passes = num(no, &v)?;
    let (no, v) = field("converged")?;
    let converged = num(no, &v)?;
    let (no, v) = field("iterations")?;
    let iterations = num(no, &v)?;
    let (no, line) = next("weights")?;
    if line.trim() != "weights" {
        return Err(perr(no, "expected `weights`".into()));
    }
    let mut weights = vec![0.0; dim];
    for (no, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (i, w) = line
            .split_once(':')
            .ok_or_else(|| perr(no, format!("expected <index>:<weight>, got `{line}`")))?;
        let i: usize = num(no, i)?;
        if i == 0 || i > dim {
            return Err(perr(no, format!("weight index {i} outside 1..={dim}")));
        }
        weights[i - 1] = num(no, w)?;
    }
    Ok(SvmModel {
        weights,
        bias,
        alphas: Vec::new(),
        config: TrainConfig {
            c_minus,
            pa,
            tolerance,
            max_passes,
        },
        converged,
        iterations,
    })
}
