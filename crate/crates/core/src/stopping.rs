//! Stabilizing-predictions stopping rule: a fixed random sample of the
//! unlabeled pool is re-predicted by every new model, and the run stops once
//! Cohen's kappa between consecutive models' predictions stays at or above a
//! threshold for a whole window of iterations.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{arg, Result};
use crate::rng::seeded;
use crate::svm::SvmModel;

const STOP_SET_STREAM: u64 = 0x5707;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    pub stop_set_size: usize,
    pub agreement_threshold: f64,
    pub window: usize,
    pub seed: u64,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            stop_set_size: 2000,
            agreement_threshold: 0.99,
            window: 3,
            seed: 0,
        }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stop_set_size == 0 {
            return arg("stop_set_size must be at least 1");
        }
        if !(self.agreement_threshold > 0.0 && self.agreement_threshold <= 1.0) {
            return arg(format!(
                "agreement_threshold must be in (0, 1], got {}",
                self.agreement_threshold
            ));
        }
        if self.window == 0 {
            return arg("window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingState {
    config: StopConfig,
    stop_set: Vec<usize>,
    previous_predictions: Option<Vec<Label>>,
    recent_agreements: VecDeque<f64>,
    stopped_at: Option<usize>,
    models_seen: usize,
}

/// Samples the stop set from `unlabeled`. Stop-set members stay in the pool.
pub fn init_stop_set(
    pool: &Dataset,
    unlabeled: &[usize],
    config: &StopConfig,
) -> Result<StoppingState> {
    config.validate()?;
    if unlabeled.is_empty() {
        return arg("cannot draw a stop set from an empty unlabeled set");
    }
    if let Some(&i) = unlabeled.iter().find(|&&i| i >= pool.len()) {
        return arg(format!("index {i} outside pool of {}", pool.len()));
    }
    let mut candidates = unlabeled.to_vec();
    candidates.sort_unstable();
    candidates.shuffle(&mut seeded(config.seed, STOP_SET_STREAM));
    candidates.truncate(config.stop_set_size.min(unlabeled.len()));
    candidates.sort_unstable();
    Ok(StoppingState {
        config: *config,
        stop_set: candidates,
        previous_predictions: None,
        recent_agreements: VecDeque::with_capacity(config.window),
        stopped_at: None,
        models_seen: 0,
    })
}

/// Cohen's kappa between two label vectors.
///
/// When chance agreement is 1 (both vectors constant) the result is 1 for
/// identical vectors and 0 otherwise.
pub fn agreement(prev: &[Label], curr: &[Label]) -> Result<f64> {
    if prev.len() != curr.len() {
        return arg(format!(
            "prediction vectors differ in length ({} vs {})",
            prev.len(),
            curr.len()
        ));
    }
    if prev.is_empty() {
        return arg("agreement of empty prediction vectors");
    }
    let n = prev.len() as f64;
    let agree = prev.iter().zip(curr).filter(|(a, b)| a == b).count() as f64 / n;
    let p1 = prev.iter().filter(|l| l.is_positive()).count() as f64 / n;
    let p2 = curr.iter().filter(|l| l.is_positive()).count() as f64 / n;
    let chance = p1 * p2 + (1.0 - p1) * (1.0 - p2);
    if chance >= 1.0 {
        return Ok(if prev == curr { 1.0 } else { 0.0 });
    }
    Ok((agree - chance) / (1.0 - chance))
}

impl StoppingState {
    pub fn config(&self) -> &StopConfig {
        &self.config
    }

    pub fn stop_set(&self) -> &[usize] {
        &self.stop_set
    }

    pub fn recent_agreements(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.recent_agreements.iter().copied()
    }

    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    pub fn models_seen(&self) -> usize {
        self.models_seen
    }

    /// Feeds the model trained at `iteration`. Once a stop is returned the
    /// state stays stopped.
    pub fn update(&mut self, model: &SvmModel, pool: &Dataset, iteration: usize) -> StopDecision {
        let predictions: Vec<Label> = self
            .stop_set
            .iter()
            .map(|&i| {
                model
                    .predict(&pool.get(i).features)
                    .expect("model dimension covers the pool")
            })
            .collect();
        self.observe(predictions, iteration)
    }

    /// Same as [`update`](Self::update) with the stop-set predictions given directly.
    pub fn observe(&mut self, predictions: Vec<Label>, iteration: usize) -> StopDecision {
        assert_eq!(predictions.len(), self.stop_set.len());
        self.models_seen += 1;
        if let Some(prev) = &self.previous_predictions {
            let kappa = agreement(prev, &predictions).expect("equal non-empty lengths");
            self.push_agreement(kappa);
        }
        self.previous_predictions = Some(predictions);
        self.decide(iteration)
    }

    fn push_agreement(&mut self, kappa: f64) {
        if self.recent_agreements.len() == self.config.window {
            self.recent_agreements.pop_front();
        }
        self.recent_agreements.push_back(kappa);
    }

    fn decide(&mut self, iteration: usize) -> StopDecision {
        if self.stopped_at.is_some() {
            return StopDecision::Stop;
        }
        let stable = self.recent_agreements.len() == self.config.window
            && self
                .recent_agreements
                .iter()
                .all(|&k| k >= self.config.agreement_threshold);
        if stable {
            self.stopped_at = Some(iteration);
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabeledInstance, SparseVector};
    use proptest::prelude::*;
    use Label::{Negative as N, Positive as P};

    fn pool(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|_| LabeledInstance::new(SparseVector::empty(), N))
                .collect(),
        )
    }

    fn state(window: usize, threshold: f64) -> StoppingState {
        let cfg = StopConfig {
            stop_set_size: 4,
            agreement_threshold: threshold,
            window,
            seed: 1,
        };
        init_stop_set(&pool(4), &[0, 1, 2, 3], &cfg).unwrap()
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(agreement(&[P, P, N, N], &[P, P, N, N]).unwrap(), 1.0);
        assert_eq!(agreement(&[P, P, P, P], &[P, P, N, N]).unwrap(), 0.0);
        assert_eq!(agreement(&[P, N], &[N, P]).unwrap(), -1.0);
        assert_eq!(agreement(&[N, N], &[N, N]).unwrap(), 1.0);
        assert!(agreement(&[P], &[P, N]).is_err());
        assert!(agreement(&[], &[]).is_err());
    }

    #[test]
    fn stop_set_sampling() {
        let cfg = StopConfig {
            stop_set_size: 2000,
            ..StopConfig::default()
        };
        let p = pool(6000);
        let unlabeled: Vec<usize> = (1000..6000).collect();
        let a = init_stop_set(&p, &unlabeled, &cfg).unwrap();
        let b = init_stop_set(&p, &unlabeled, &cfg).unwrap();
        assert_eq!(a.stop_set().len(), 2000);
        assert_eq!(a.stop_set(), b.stop_set());
        assert!(a.stop_set().windows(2).all(|w| w[0] < w[1]));
        assert!(a.stop_set().iter().all(|&i| i >= 1000));

        let small = init_stop_set(&p, &[3, 1, 2], &cfg).unwrap();
        assert_eq!(small.stop_set(), &[1, 2, 3]);
        assert_eq!(small.recent_agreements().len(), 0);

        assert!(init_stop_set(&p, &[], &cfg).is_err());
    }

    /// Drives the ring with chosen kappas through a two-element stop set.
    fn feed(state: &mut StoppingState, kappas: &[f64]) -> Vec<StopDecision> {
        let mut out = vec![state.observe(vec![P, P, N, N], 0)];
        for (it, &k) in kappas.iter().enumerate() {
            state.previous_predictions = Some(vec![P, P, N, N]);
            state.models_seen += 1;
            state.push_agreement(k);
            out.push(state.decide(it + 1));
        }
        out
    }

    #[test]
    fn window_rule() {
        let mut s = state(3, 0.99);
        let d = feed(&mut s, &[0.995, 0.992, 0.999]);
        assert_eq!(d, vec![StopDecision::Continue, StopDecision::Continue, StopDecision::Continue, StopDecision::Stop]);
        assert_eq!(s.stopped_at(), Some(3));

        let mut s = state(3, 0.99);
        let d = feed(&mut s, &[0.995, 0.98, 0.995]);
        assert!(d.iter().all(|&x| x == StopDecision::Continue));
        assert_eq!(s.stopped_at(), None);
    }

    #[test]
    fn first_model_continues() {
        let mut s = state(1, 0.5);
        assert_eq!(s.observe(vec![P, P, N, N], 0), StopDecision::Continue);
        assert_eq!(s.observe(vec![P, P, N, N], 1), StopDecision::Stop);
    }

    #[test]
    fn stop_latches() {
        let mut s = state(1, 0.9);
        s.observe(vec![P, P, N, N], 0);
        assert_eq!(s.observe(vec![P, P, N, N], 1), StopDecision::Stop);
        let set = s.stop_set().to_vec();
        assert_eq!(s.observe(vec![N, N, P, P], 2), StopDecision::Stop);
        assert_eq!(s.observe(vec![P, N, P, N], 3), StopDecision::Stop);
        assert_eq!(s.stopped_at(), Some(1));
        assert_eq!(s.stop_set(), set.as_slice());
    }

    fn labels(n: usize) -> impl Strategy<Value = Vec<Label>> {
        proptest::collection::vec(any::<bool>().prop_map(|b| if b { P } else { N }), n)
    }

    proptest! {
        #[test]
        fn kappa_bounded_and_one_iff_identical(
            (a, b) in (1usize..40).prop_flat_map(|n| (labels(n), labels(n)))
        ) {
            let k = agreement(&a, &b).unwrap();
            prop_assert!(k <= 1.0 + 1e-12);
            let degenerate = a.iter().all(|&l| l == a[0]) && b.iter().all(|&l| l == b[0]);
            if !degenerate {
                prop_assert_eq!((k - 1.0).abs() < 1e-12, a == b);
            }
        }

        #[test]
        fn stop_needs_window_plus_one_models(
            window in 1usize..5,
            seq in proptest::collection::vec(labels(4), 1..12),
        ) {
            let mut s = state(window, 0.5);
            for (it, p) in seq.into_iter().enumerate() {
                let d = s.observe(p, it);
                if d == StopDecision::Stop {
                    prop_assert!(s.models_seen() > window);
                }
            }
        }
    }
}
