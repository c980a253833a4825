use cdti_core::dataset::Roles;
use cdti_core::matching::{StrategyConfig, StrategyKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetUpload {
    pub csv: String,
    pub roles: Roles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub n: usize,
    pub n_treated: usize,
    pub covariates: Vec<String>,
    /// Oracle hidden columns are present, so reports include success statistics.
    pub has_oracle: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset_id: String,
    pub strategy: StrategyKind,
    pub budget: usize,
    /// Optional overrides; `kind` is taken from `strategy`.
    #[serde(default)]
    pub config: Option<StrategyConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Exhausted,
    Closed,
}

/// Persisted once at creation; status and cursor are derived from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub dataset_id: String,
    pub config: StrategyConfig,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub dataset_id: String,
    pub strategy: StrategyKind,
    pub budget: usize,
    pub proposals: usize,
    pub cursor: usize,
    pub status: SessionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ObservedColumn,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub name: String,
    pub origin: Origin,
}

/// Body of `POST /sessions/{id}/annotations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub pair_id: usize,
    #[serde(default)]
    pub explanations: Vec<Explanation>,
    #[serde(default)]
    pub skipped: bool,
    pub annotator_id: String,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub pair_id: usize,
    pub explanations: Vec<Explanation>,
    pub skipped: bool,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub annotator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub pair_id: usize,
    pub cursor: usize,
    pub remaining: usize,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Larger {
    Treated,
    Untreated,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub name: String,
    pub treated: f64,
    pub untreated: f64,
    pub larger: Larger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProposal {
    pub session_id: String,
    pub pair_id: usize,
    pub treated_unit: usize,
    pub untreated_unit: usize,
    pub covariates: Vec<CovariateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treated_notes: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub untreated_notes: Option<String>,
    /// Pairs left including this one.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Count {
    pub name: String,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStats {
    /// Share of cited explanations, averaged per pair, that name a hidden
    /// column on which the treated unit is strictly larger. Skips count as 0.
    pub success_rate: f64,
    /// Mean λ over the annotated pairs.
    pub mean_lambda_annotated: f64,
    /// Mean λ over every proposal in the session.
    pub mean_lambda_proposals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: SessionInfo,
    pub annotated: usize,
    pub skipped: usize,
    pub total_explanations: usize,
    /// Normalized concepts ranked by count, ties by first appearance.
    pub concepts: Vec<Count>,
    /// Explanations that cite an observed covariate.
    pub observed_citations: Vec<Count>,
    /// Expected counts when each annotated pair keeps one explanation chosen uniformly.
    pub single_selection: Vec<Count>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleStats>,
}
