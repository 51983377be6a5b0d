//! One annotation session: an [`ActiveLearner`] fed by a human, with an
//! append-only event log from which it can be rebuilt.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use alsvm_core::active::{
    ActiveLearner, AlConfig, AlSettings, EndReason, Phase, Strategy, TrainOutcome,
};
use alsvm_core::dataset::{libsvm_string, parse_libsvm_str, Dataset, Label};
use alsvm_core::stopping::StopConfig;
use alsvm_core::svm::model_to_string;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::api::{
    BatchResponse, ExportResponse, Item, LabelEntry, Lifecycle, StatusResponse, SubmitResponse,
};
use crate::error::ApiError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        dataset: String,
        texts: Option<Vec<String>>,
        al: AlConfig,
        stop: StopConfig,
    },
    LabelsReceived {
        labels: Vec<LabelEntry>,
    },
    ModelTrained {
        iteration: usize,
        labeled_count: usize,
        pa: f64,
    },
    BatchIssued {
        iteration: usize,
        indices: Vec<usize>,
    },
    Stopped {
        iteration: usize,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    fn create(path: PathBuf) -> std::io::Result<Self> {
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    fn reopen(path: PathBuf) -> std::io::Result<Self> {
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Returns once the event is on disk.
    fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

#[derive(Debug)]
pub(crate) struct Inner {
    learner: ActiveLearner<Arc<Dataset>>,
    training: bool,
    failure: Option<String>,
    last_submission: Option<Vec<LabelEntry>>,
    log: Option<EventLog>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pool: Arc<Dataset>,
    pub(crate) inner: Mutex<Inner>,
}

fn canonical(labels: &[LabelEntry]) -> Vec<LabelEntry> {
    let mut v = labels.to_vec();
    v.sort_by_key(|e| e.index);
    v
}

impl Inner {
    fn lifecycle(&self) -> Lifecycle {
        if self.failure.is_some() {
            return Lifecycle::Failed;
        }
        match self.learner.phase() {
            Phase::Init | Phase::Querying => Lifecycle::AwaitingLabels,
            Phase::ReadyToTrain => Lifecycle::Training,
            Phase::Finished(EndReason::Stopped) => Lifecycle::Stopped,
            Phase::Finished(_) => Lifecycle::Completed,
            Phase::Failed => Lifecycle::Failed,
        }
    }

    fn labeled_count(&self) -> usize {
        self.learner.state().labeled.len() + self.learner.partial_labels().len()
    }

    fn log(&mut self, event: &Event) -> std::io::Result<()> {
        match self.log.as_mut() {
            Some(log) => log.append(event),
            None => Ok(()),
        }
    }

    fn apply(&mut self, labels: &[LabelEntry]) {
        for e in labels {
            if let Err(err) = self.learner.submit(e.index, e.label) {
                self.failure = Some(err.to_string());
                return;
            }
        }
        self.last_submission = Some(canonical(labels));
    }

    fn train_now(&mut self) {
        while let Some(job) = self.learner.train_job() {
            let outcome = job.run(self.learner.pool());
            self.finish_training(outcome, false);
        }
    }

    fn finish_training(&mut self, outcome: alsvm_core::Result<TrainOutcome>, log: bool) {
        self.training = false;
        let record = match outcome.and_then(|o| self.learner.complete(o).cloned()) {
            Ok(r) => r,
            Err(e) => {
                self.failure = Some(e.to_string());
                return;
            }
        };
        if !log {
            return;
        }
        let mut events = vec![Event::ModelTrained {
            iteration: record.iteration,
            labeled_count: record.labeled_count,
            pa: record.pa,
        }];
        if !record.selected.is_empty() {
            events.push(Event::BatchIssued {
                iteration: record.iteration + 1,
                indices: record.selected.clone(),
            });
        }
        if self.learner.phase() == Phase::Finished(EndReason::Stopped) {
            events.push(Event::Stopped {
                iteration: record.iteration,
            });
        }
        for e in &events {
            if let Err(err) = self.log(e) {
                log::error!("event log write failed: {err}");
            }
        }
    }
}

impl Session {
    fn parse_pool(dataset: &str, texts: Option<Vec<String>>) -> Result<Arc<Dataset>, ApiError> {
        let mut pool = parse_libsvm_str(dataset).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if pool.is_empty() {
            return Err(ApiError::unprocessable("dataset has no instances"));
        }
        if let Some(t) = texts {
            pool = pool
                .with_texts(t)
                .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        }
        Ok(Arc::new(pool))
    }

    fn learner(
        pool: &Arc<Dataset>,
        al: AlConfig,
        stop: StopConfig,
    ) -> Result<ActiveLearner<Arc<Dataset>>, ApiError> {
        ActiveLearner::new(pool.clone(), al, stop, Strategy::ClosestInitPa)
            .map_err(|e| ApiError::unprocessable(e.to_string()))
    }

    /// A fresh session; with a state directory its log is created there
    /// before the session becomes visible. Unset `settings` take the defaults
    /// for the pool size, and `halt_on_stop` falls back to `halt_default`.
    pub fn create(
        dataset: String,
        texts: Option<Vec<String>>,
        settings: &AlSettings,
        halt_default: bool,
        stop: StopConfig,
        state_dir: Option<&Path>,
    ) -> Result<Session, ApiError> {
        let id = uuid::Uuid::new_v4().to_string();
        let pool = Self::parse_pool(&dataset, texts.clone())?;
        let mut al = settings.resolve(pool.len());
        al.halt_on_stop = settings.halt_on_stop.unwrap_or(halt_default);
        let learner = Self::learner(&pool, al.clone(), stop)?;
        let log = match state_dir {
            Some(dir) => {
                let mut log = EventLog::create(dir.join(format!("{id}.jsonl")))?;
                log.append(&Event::Created {
                    session_id: id.clone(),
                    dataset,
                    texts,
                    al,
                    stop,
                })?;
                log.append(&Event::BatchIssued {
                    iteration: 0,
                    indices: learner.batch().to_vec(),
                })?;
                Some(log)
            }
            None => None,
        };
        Ok(Session {
            id,
            pool,
            inner: Mutex::new(Inner {
                learner,
                training: false,
                failure: None,
                last_submission: None,
                log,
            }),
        })
    }

    /// Rebuilds a session from its event log, retraining every model on the
    /// way. Informational events are ignored; labels are the only input.
    pub fn replay(path: &Path) -> Result<Session, String> {
        let file = File::open(path).map_err(|e| e.to_string())?;
        let mut lines = BufReader::new(file).lines();
        let parse = |line: std::io::Result<String>| -> Result<Event, String> {
            let line = line.map_err(|e| e.to_string())?;
            serde_json::from_str(&line).map_err(|e| e.to_string())
        };
        let first = lines.next().ok_or("empty event log")?;
        let Event::Created {
            session_id,
            dataset,
            texts,
            al,
            stop,
        } = parse(first)?
        else {
            return Err("event log does not start with `created`".into());
        };
        let pool = Self::parse_pool(&dataset, texts).map_err(|e| e.detail)?;
        let learner = Self::learner(&pool, al, stop).map_err(|e| e.detail)?;
        let mut inner = Inner {
            learner,
            training: false,
            failure: None,
            last_submission: None,
            log: None,
        };
        for (n, line) in lines.enumerate() {
            let event = match parse(line) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("{}: line {} ignored: {e}", path.display(), n + 2);
                    break;
                }
            };
            if let Event::LabelsReceived { labels } = event {
                inner.apply(&labels);
                inner.train_now();
            }
        }
        inner.train_now();
        inner.log = Some(EventLog::reopen(path.to_path_buf()).map_err(|e| e.to_string())?);
        Ok(Session {
            id: session_id,
            pool,
            inner: Mutex::new(inner),
        })
    }

    fn item(&self, inner: &Inner, index: usize) -> Item {
        let x = self.pool.get(index);
        let text = match self.pool.text(index) {
            Some(t) => t.to_string(),
            None => x
                .features
                .entries()
                .iter()
                .map(|(i, v)| format!("{}:{v}", i + 1))
                .collect::<Vec<_>>()
                .join(" "),
        };
        let abs_decision_value = inner
            .learner
            .last_model()
            .and_then(|m| m.decision_value(&x.features).ok())
            .map(f64::abs);
        Item {
            index,
            text,
            abs_decision_value,
        }
    }

    pub async fn batch(&self) -> BatchResponse {
        let inner = self.inner.lock().await;
        let lifecycle = inner.lifecycle();
        let pending = if lifecycle == Lifecycle::AwaitingLabels {
            inner.learner.outstanding()
        } else {
            Vec::new()
        };
        BatchResponse {
            session_id: self.id.clone(),
            lifecycle,
            stopped: lifecycle == Lifecycle::Stopped,
            items: pending.iter().map(|&i| self.item(&inner, i)).collect(),
            pending,
        }
    }

    /// Validates and durably logs a submission, then applies it. Returns
    /// whether a model is now due.
    pub async fn submit(&self, labels: Vec<LabelEntry>) -> Result<(SubmitResponse, bool), ApiError> {
        let mut inner = self.inner.lock().await;
        if labels.is_empty() {
            return Err(ApiError::unprocessable("no labels submitted"));
        }
        let canon = canonical(&labels);
        if canon.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(ApiError::unprocessable("an index appears twice in the submission"));
        }
        let respond = |inner: &Inner, accepted, duplicate| SubmitResponse {
            session_id: self.id.clone(),
            accepted,
            duplicate,
            pending: inner.learner.outstanding(),
            lifecycle: inner.lifecycle(),
            labeled_count: inner.labeled_count(),
        };
        if inner.last_submission.as_ref() == Some(&canon) {
            return Ok((respond(&inner, 0, true), false));
        }
        if let Some(f) = &inner.failure {
            return Err(ApiError::conflict(format!("session failed: {f}")));
        }
        if let Some(e) = canon.iter().find(|e| e.index >= self.pool.len()) {
            return Err(ApiError::unprocessable(format!(
                "index {} outside the pool of {}",
                e.index,
                self.pool.len()
            )));
        }
        let not_pending: Vec<usize> = canon
            .iter()
            .filter(|e| !inner.learner.is_outstanding(e.index))
            .map(|e| e.index)
            .collect();
        if !not_pending.is_empty() {
            return Err(ApiError::conflict(format!(
                "indices not awaiting a label: {not_pending:?}"
            )));
        }
        inner.log(&Event::LabelsReceived {
            labels: labels.clone(),
        })?;
        inner.apply(&labels);
        let due = inner.learner.phase() == Phase::ReadyToTrain && !inner.training;
        if due {
            inner.training = true;
        }
        Ok((respond(&inner, labels.len(), false), due))
    }

    /// Trains the pending model off the async runtime and installs it.
    pub async fn train(self: Arc<Self>) {
        let job = {
            let inner = self.inner.lock().await;
            inner.learner.train_job()
        };
        let Some(job) = job else {
            self.inner.lock().await.training = false;
            return;
        };
        let pool = self.pool.clone();
        let outcome = tokio::task::spawn_blocking(move || job.run(&pool)).await;
        let mut inner = self.inner.lock().await;
        match outcome {
            Ok(outcome) => inner.finish_training(outcome, true),
            Err(e) => {
                inner.training = false;
                inner.failure = Some(format!("training task failed: {e}"));
            }
        }
    }

    pub async fn status(&self) -> StatusResponse {
        let inner = self.inner.lock().await;
        let labeled = inner.labeled_count();
        let stopping = inner.learner.stopping();
        StatusResponse {
            session_id: self.id.clone(),
            lifecycle: inner.lifecycle(),
            labeled_count: labeled,
            pool_size: self.pool.len(),
            percent_labeled: 100.0 * labeled as f64 / self.pool.len() as f64,
            pa: inner.learner.pa(),
            agreements: stopping.map(|s| s.recent_agreements().collect()).unwrap_or_default(),
            agreement_threshold: inner.learner.stop_config().agreement_threshold,
            stopped_at: inner.learner.trace().stopped_at,
            models: inner.learner.trace().records.len(),
            failure: inner.failure.clone(),
        }
    }

    pub async fn export(&self) -> ExportResponse {
        let inner = self.inner.lock().await;
        let mut labels: Vec<(usize, Label)> = inner
            .learner
            .state()
            .labeled
            .iter()
            .chain(inner.learner.partial_labels())
            .map(|(&i, &l)| (i, l))
            .collect();
        labels.sort_by_key(|p| p.0);
        let indices: Vec<usize> = labels.iter().map(|p| p.0).collect();
        let labeled = self
            .pool
            .subset(&indices)
            .relabeled(labels.iter().map(|p| p.1));
        ExportResponse {
            session_id: self.id.clone(),
            libsvm: libsvm_string(&labeled),
            model: inner.learner.last_model().map(model_to_string),
            trace: inner.learner.trace().to_jsonl(),
        }
    }

    pub async fn log_path(&self) -> Option<PathBuf> {
        self.inner.lock().await.log.as_ref().map(|l| l.path().to_path_buf())
    }
}
