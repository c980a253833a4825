//! Session state, persistence and log replay.
//!
//! Layout under the data directory:
//! `datasets/<id>/data.csv`, `datasets/<id>/data.roles.json`,
//! `sessions/<id>/manifest.json`, `sessions/<id>/proposals.json`,
//! `sessions/<id>/log.jsonl` and, once closed, `sessions/<id>/closed`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use cdti_core::elicitation::evaluate_pairs;
use cdti_core::experiments::{cv_propensity, DEFAULT_CV_FOLDS};
use cdti_core::matching::{propose, RankedPairs};
use cdti_core::Dataset;
use parking_lot::{Mutex, RwLock};

use crate::error::{ErrorCode, Result, ServiceError};
use crate::model::*;

pub const DATA_DIR_ENV: &str = "CDTI_DATA_DIR";

#[derive(Debug, Clone, Default)]
struct SessionState {
    records: Vec<AnnotationRecord>,
    closed: bool,
}

struct SessionSlot {
    manifest: SessionManifest,
    dataset: Arc<Dataset>,
    proposals: Arc<RankedPairs>,
    dir: PathBuf,
    /// Held for the whole append-and-publish step; one writer per session.
    writer: Mutex<File>,
    snapshot: RwLock<Arc<SessionState>>,
}

impl SessionSlot {
    fn state(&self) -> Arc<SessionState> {
        self.snapshot.read().clone()
    }

    fn info(&self, st: &SessionState) -> SessionInfo {
        let proposals = self.proposals.pairs.len();
        let cursor = st.records.len();
        let status = if st.closed {
            SessionStatus::Closed
        } else if cursor >= proposals {
            SessionStatus::Exhausted
        } else {
            SessionStatus::Active
        };
        let short = self.manifest.budget.saturating_sub(proposals);
        SessionInfo {
            session_id: self.manifest.session_id.clone(),
            dataset_id: self.manifest.dataset_id.clone(),
            strategy: self.manifest.config.kind,
            budget: self.manifest.budget,
            proposals,
            cursor,
            status,
            note: (short > 0).then(|| format!("budget {} exceeds the candidate pool; {short} proposals short", self.manifest.budget)),
        }
    }
}

pub struct Service {
    root: PathBuf,
    datasets: RwLock<HashMap<String, Arc<Dataset>>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn normalize_concept(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Reads the log, dropping a torn final line left by an interrupted append.
fn replay_log(path: &Path) -> Result<(Vec<AnnotationRecord>, File)> {
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(&file);
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        if read == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<AnnotationRecord>(line.trim_end()) {
            Ok(r) => records.push(r),
            Err(e) => return Err(ServiceError::new(ErrorCode::Internal, format!("corrupt log {}: {e}", path.display()))),
        }
        good_len += read as u64;
    }
    drop(reader);
    if file.metadata()?.len() != good_len {
        file.set_len(good_len)?;
        file.sync_all()?;
    }
    file.seek(SeekFrom::End(0))?;
    Ok((records, file))
}

fn rank_counts(order: Vec<String>, counts: HashMap<String, f64>) -> Vec<Count> {
    let mut out: Vec<(usize, Count)> = order.into_iter().enumerate().map(|(k, name)| (k, Count { count: counts[&name], name })).collect();
    out.sort_by(|a, b| b.1.count.total_cmp(&a.1.count).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, c)| c).collect()
}

#[derive(Default)]
struct Tally {
    order: Vec<String>,
    counts: HashMap<String, f64>,
}

impl Tally {
    fn add(&mut self, key: String, w: f64) {
        if !self.counts.contains_key(&key) {
            self.order.push(key.clone());
        }
        *self.counts.entry(key).or_insert(0.0) += w;
    }

    fn ranked(self) -> Vec<Count> {
        rank_counts(self.order, self.counts)
    }
}

impl Service {
    /// Opens a data directory and replays every session found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        fs::create_dir_all(root.join("sessions"))?;
        let svc = Self { root, datasets: RwLock::new(HashMap::new()), sessions: RwLock::new(HashMap::new()) };
        let mut ids: Vec<String> = fs::read_dir(svc.root.join("sessions"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("manifest.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        for id in ids {
            let slot = svc.load_session(&id)?;
            svc.sessions.write().insert(id, Arc::new(slot));
        }
        Ok(svc)
    }

    /// Opens the directory named by `CDTI_DATA_DIR`, defaulting to `./cdti-data`.
    pub fn from_env() -> Result<Self> {
        Self::open(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cdti-data")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_dir(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(id)
    }

    pub fn add_dataset(&self, upload: &DatasetUpload) -> Result<DatasetInfo> {
        let ds = Dataset::from_csv_bytes(upload.csv.as_bytes(), &upload.roles, None)?;
        let id = ds.content_hash()[..16].to_string();
        let dir = self.dataset_dir(&id);
        if !dir.join("data.csv").exists() {
            ds.write(&dir, "data")?;
        }
        let info = Self::dataset_info(&id, &ds);
        self.datasets.write().entry(id).or_insert_with(|| Arc::new(ds));
        Ok(info)
    }

    fn dataset_info(id: &str, ds: &Dataset) -> DatasetInfo {
        DatasetInfo { dataset_id: id.into(), n: ds.n(), n_treated: ds.treated().len(), covariates: ds.z_names.clone(), has_oracle: ds.u.is_some() }
    }

    pub fn dataset(&self, id: &str) -> Result<Arc<Dataset>> {
        if let Some(d) = self.datasets.read().get(id) {
            return Ok(d.clone());
        }
        let dir = self.dataset_dir(id);
        if id.contains(['/', '\\', '.']) || !dir.join("data.csv").exists() {
            return Err(ServiceError::not_found("dataset", id));
        }
        let ds = Arc::new(Dataset::read(&dir.join("data.csv"), &dir.join("data.roles.json"))?);
        Ok(self.datasets.write().entry(id.into()).or_insert(ds).clone())
    }

    fn load_session(&self, id: &str) -> Result<SessionSlot> {
        let dir = self.root.join("sessions").join(id);
        let manifest: SessionManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let proposals: RankedPairs = serde_json::from_slice(&fs::read(dir.join("proposals.json"))?)?;
        let dataset = self.dataset(&manifest.dataset_id)?;
        let (records, file) = replay_log(&dir.join("log.jsonl"))?;
        let closed = dir.join("closed").exists();
        Ok(SessionSlot {
            manifest,
            dataset,
            proposals: Arc::new(proposals),
            dir,
            writer: Mutex::new(file),
            snapshot: RwLock::new(Arc::new(SessionState { records, closed })),
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ServiceError::not_found("session", id))
    }

    /// Freezes the selected proposals and persists the session before returning its id.
    pub fn create_session(&self, req: &CreateSession) -> Result<SessionInfo> {
        if req.budget == 0 {
            return Err(ServiceError::validation("budget must be positive"));
        }
        let dataset = self.dataset(&req.dataset_id)?;
        let mut config = req.config.clone().unwrap_or_default();
        config.kind = req.strategy;
        config.validate()?;
        let pi = if config.kind.needs_propensity() { Some(cv_propensity(&dataset, DEFAULT_CV_FOLDS, config.seed)?) } else { None };
        let proposals = propose(&dataset, pi.as_deref(), &config, req.budget)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join("sessions").join(&id);
        fs::create_dir_all(&dir)?;
        let manifest = SessionManifest { session_id: id.clone(), dataset_id: req.dataset_id.clone(), config, budget: req.budget };
        write_atomic(&dir.join("proposals.json"), &serde_json::to_vec(&proposals)?)?;
        let (_, file) = replay_log(&dir.join("log.jsonl"))?;
        // The manifest goes last: a directory without one is ignored on restart.
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        let slot = SessionSlot {
            manifest,
            dataset,
            proposals: Arc::new(proposals),
            dir,
            writer: Mutex::new(file),
            snapshot: RwLock::new(Arc::new(SessionState::default())),
        };
        let info = slot.info(&SessionState::default());
        self.sessions.write().insert(id, Arc::new(slot));
        Ok(info)
    }

    pub fn session(&self, id: &str) -> Result<SessionInfo> {
        let s = self.slot(id)?;
        let st = s.state();
        Ok(s.info(&st))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// The pair at the cursor. Repeated calls return the same proposal until it is annotated.
    pub fn next_pair(&self, id: &str) -> Result<PairProposal> {
        let s = self.slot(id)?;
        let st = s.state();
        let info = s.info(&st);
        match info.status {
            SessionStatus::Closed => return Err(ServiceError::new(ErrorCode::Exhausted, "session is closed")),
            SessionStatus::Exhausted => return Err(ServiceError::new(ErrorCode::Exhausted, format!("all {} proposals annotated", info.proposals))),
            SessionStatus::Active => {}
        }
        let k = info.cursor;
        let pair = s.proposals.pairs[k];
        let ds = &s.dataset;
        let covariates = ds
            .z_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let (a, b) = (ds.z[(pair.i, c)], ds.z[(pair.j, c)]);
                let larger = if a > b {
                    Larger::Treated
                } else if b > a {
                    Larger::Untreated
                } else {
                    Larger::Equal
                };
                CovariateRow { name: name.clone(), treated: a, untreated: b, larger }
            })
            .collect();
        let note = |u: usize| ds.notes.as_ref().map(|n| n[u].clone());
        Ok(PairProposal {
            session_id: id.into(),
            pair_id: k,
            treated_unit: pair.i,
            untreated_unit: pair.j,
            covariates,
            treated_notes: note(pair.i),
            untreated_notes: note(pair.j),
            remaining: info.proposals - k,
        })
    }

    fn validate(&self, s: &SessionSlot, a: &AnnotationInput) -> Result<()> {
        if a.annotator_id.trim().is_empty() {
            return Err(ServiceError::validation("annotator_id is required"));
        }
        if a.skipped && !a.explanations.is_empty() {
            return Err(ServiceError::validation("a skipped pair carries no explanations"));
        }
        if !a.skipped && a.explanations.is_empty() {
            return Err(ServiceError::validation("at least one explanation is required unless the pair is skipped"));
        }
        for e in &a.explanations {
            if e.name.trim().is_empty() {
                return Err(ServiceError::validation("explanation names must be non-empty"));
            }
            if e.origin == Origin::ObservedColumn && !s.dataset.z_names.contains(&e.name) {
                return Err(ServiceError::validation(format!("'{}' is not an observed column", e.name)));
            }
        }
        Ok(())
    }

    /// Appends the record durably, then advances the cursor.
    pub fn submit(&self, id: &str, a: &AnnotationInput) -> Result<Ack> {
        let s = self.slot(id)?;
        let mut file = s.writer.lock();
        let st = s.state();
        let info = s.info(&st);
        if a.pair_id < info.cursor {
            return Err(ServiceError::new(ErrorCode::StalePair, format!("pair {} is already annotated", a.pair_id)));
        }
        match info.status {
            SessionStatus::Closed => return Err(ServiceError::new(ErrorCode::Exhausted, "session is closed")),
            SessionStatus::Exhausted => return Err(ServiceError::new(ErrorCode::Exhausted, format!("all {} proposals annotated", info.proposals))),
            SessionStatus::Active => {}
        }
        if a.pair_id != info.cursor {
            return Err(ServiceError::validation(format!("pair {} is not the current pair {}", a.pair_id, info.cursor)));
        }
        self.validate(&s, a)?;
        let record = AnnotationRecord {
            session_id: id.into(),
            pair_id: a.pair_id,
            explanations: a.explanations.clone(),
            skipped: a.skipped,
            timestamp: now_ms(),
            annotator_id: a.annotator_id.clone(),
        };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.sync_data()?;
        let mut next = (*st).clone();
        next.records.push(record);
        let info = s.info(&next);
        *s.snapshot.write() = Arc::new(next);
        Ok(Ack { session_id: id.into(), pair_id: a.pair_id, cursor: info.cursor, remaining: info.proposals - info.cursor, status: info.status })
    }

    pub fn close(&self, id: &str) -> Result<SessionInfo> {
        let s = self.slot(id)?;
        let _w = s.writer.lock();
        write_atomic(&s.dir.join("closed"), b"")?;
        let mut next = (*s.state()).clone();
        next.closed = true;
        let info = s.info(&next);
        *s.snapshot.write() = Arc::new(next);
        Ok(info)
    }

    /// Deterministic aggregation of the log.
    pub fn report(&self, id: &str) -> Result<SessionReport> {
        let s = self.slot(id)?;
        let st = s.state();
        let mut concepts = Tally::default();
        let mut observed = Tally::default();
        let mut single = Tally::default();
        let mut total = 0;
        let mut skipped = 0;
        for r in &st.records {
            if r.skipped {
                skipped += 1;
                continue;
            }
            let w = 1.0 / r.explanations.len() as f64;
            for e in &r.explanations {
                total += 1;
                let key = normalize_concept(&e.name);
                concepts.add(key.clone(), 1.0);
                single.add(key, w);
                if e.origin == Origin::ObservedColumn {
                    observed.add(e.name.clone(), 1.0);
                }
            }
        }
        let oracle = match &s.dataset.u {
            Some(_) => Some(self.oracle_stats(&s, &st)?),
            None => None,
        };
        Ok(SessionReport {
            session: s.info(&st),
            annotated: st.records.len(),
            skipped,
            total_explanations: total,
            concepts: concepts.ranked(),
            observed_citations: observed.ranked(),
            single_selection: single.ranked(),
            oracle,
        })
    }

    fn oracle_stats(&self, s: &SessionSlot, st: &SessionState) -> Result<OracleStats> {
        let ds = &s.dataset;
        let u = ds.u.as_ref().expect("checked by caller");
        let hidden: HashMap<String, usize> = ds.u_names.iter().enumerate().map(|(k, n)| (normalize_concept(n), k)).collect();
        let mut success = 0.0;
        for r in &st.records {
            if r.skipped {
                continue;
            }
            let p = s.proposals.pairs[r.pair_id];
            let hits = r
                .explanations
                .iter()
                .filter(|e| e.origin == Origin::FreeText)
                .filter_map(|e| hidden.get(&normalize_concept(&e.name)))
                .filter(|&&k| u[(p.i, k)] > u[(p.j, k)])
                .count();
            success += hits as f64 / r.explanations.len() as f64;
        }
        let n = st.records.len();
        let all = evaluate_pairs(ds, &s.proposals.pairs)?;
        let mean = |xs: &[cdti_core::elicitation::ElicitationOutcome]| if xs.is_empty() { 0.0 } else { xs.iter().map(|o| o.lambda).sum::<f64>() / xs.len() as f64 };
        Ok(OracleStats {
            success_rate: if n == 0 { 0.0 } else { success / n as f64 },
            mean_lambda_annotated: mean(&all[..n]),
            mean_lambda_proposals: mean(&all),
        })
    }
}
