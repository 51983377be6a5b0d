//! Request and response bodies of the JSON API.

use alsvm_core::active::AlSettings;
use alsvm_core::dataset::Label;
use alsvm_core::stopping::StopConfig;
use serde::{Deserialize, Serialize};

/// `POST /sessions`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// LIBSVM text of the pool. Labels in it are placeholders and never shown
    /// to the learner; every label comes from the annotator.
    pub dataset: String,
    /// Display text per pool line.
    #[serde(default)]
    pub texts: Option<Vec<String>>,
    #[serde(default)]
    pub al: AlSettings,
    #[serde(default)]
    pub stop: Option<StopConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    AwaitingLabels,
    Training,
    Stopped,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub index: usize,
    pub text: String,
    /// `|w·x + b|` under the model that selected the item; absent for the
    /// initial batch.
    pub abs_decision_value: Option<f64>,
}

/// `GET /sessions/{id}/batch`, also returned by `POST /sessions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub session_id: String,
    pub lifecycle: Lifecycle,
    pub stopped: bool,
    /// Indices still waiting for a label, in selection order.
    pub pending: Vec<usize>,
    pub items: Vec<Item>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: usize,
    pub label: Label,
}

/// `POST /sessions/{id}/labels`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitLabels {
    pub labels: Vec<LabelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub session_id: String,
    pub accepted: usize,
    /// The request repeated the previous accepted submission and changed nothing.
    pub duplicate: bool,
    pub pending: Vec<usize>,
    pub lifecycle: Lifecycle,
    pub labeled_count: usize,
}

/// `GET /sessions/{id}/status`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub session_id: String,
    pub lifecycle: Lifecycle,
    pub labeled_count: usize,
    pub pool_size: usize,
    pub percent_labeled: f64,
    pub pa: Option<f64>,
    /// Most recent kappa values, oldest first (at most the stop window).
    pub agreements: Vec<f64>,
    pub agreement_threshold: f64,
    pub stopped_at: Option<usize>,
    /// Models trained so far.
    pub models: usize,
    pub failure: Option<String>,
}

/// `GET /sessions/{id}/export`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub session_id: String,
    /// Every annotator label, in pool order.
    pub libsvm: String,
    pub model: Option<String>,
    /// Run trace, one JSON record per line.
    pub trace: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}
