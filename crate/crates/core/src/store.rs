//! Append-only JSONL persistence and the verification queue.
//!
//! Each stream is one file `<root>/<stream>.jsonl`. Every appended line gets
//! a monotone `seq` and the current `schema_version`; records keep their own
//! `id` when they have one, otherwise `<stream>-<seq>` is assigned. Appending
//! a record whose id already exists records a new version, and loads return
//! the latest version of each id in order of first appearance.
//!
//! A trailing line without a newline (an interrupted write) is moved to
//! `<stream>.jsonl.quarantine` when the store is opened.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::refinery::{ReasoningTask, TaskKind};

pub const SCHEMA_VERSION: u64 = 1;

pub const PERSONAS: &str = "personas";
pub const ACTIONS: &str = "actions";
pub const DIALOGUES: &str = "dialogues";
pub const DATASET: &str = "dataset";
pub const KB: &str = "kb";
pub const QUEUE: &str = "queue";
pub const RUNS: &str = "runs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid stream name {0:?}")]
    InvalidStream(String),
    #[error("schema violation in {stream}: {path} {reason}")]
    Schema {
        stream: String,
        path: String,
        reason: String,
    },
    #[error("{stream} line {line}: {reason}")]
    Corrupt {
        stream: String,
        line: usize,
        reason: String,
    },
    #[error("{0} not found")]
    NotFound(String),
    #[error("item {id} already has verdict {status:?}")]
    Conflict { id: String, status: VerificationStatus },
    #[error("invalid verdict: {0}")]
    InvalidVerdict(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationStatus {
    Pending,
    Accepted,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Edit,
    Reject,
}

/// A regenerated task with its automatic label, awaiting a human verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub id: String,
    /// Dataset record the task would replace.
    pub record_id: String,
    pub dialogue_id: String,
    pub proposed_task: ReasoningTask,
    pub status: VerificationStatus,
    #[serde(default)]
    pub verdict_label: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    /// Set once the refinery has acted on the verdict.
    #[serde(default)]
    pub applied: bool,
}

impl VerificationItem {
    pub fn new(id: String, record_id: String, dialogue_id: String, proposed_task: ReasoningTask) -> Self {
        Self {
            id,
            record_id,
            dialogue_id,
            proposed_task,
            status: VerificationStatus::Pending,
            verdict_label: None,
            note: None,
            applied: false,
        }
    }

    /// The label that would enter the dataset, if any.
    pub fn final_label(&self) -> Option<&str> {
        match self.status {
            VerificationStatus::Accepted => self.proposed_task.label.as_deref(),
            VerificationStatus::Edited => self.verdict_label.as_deref(),
            _ => None,
        }
    }

    /// Moves a pending item to its verdict state.
    pub fn decide(&mut self, decision: Decision, label: Option<String>, note: Option<String>) -> Result<(), StoreError> {
        if self.status != VerificationStatus::Pending {
            return Err(StoreError::Conflict {
                id: self.id.clone(),
                status: self.status,
            });
        }
        match decision {
            Decision::Accept => self.status = VerificationStatus::Accepted,
            Decision::Reject => self.status = VerificationStatus::Rejected,
            Decision::Edit => {
                let label = label
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| StoreError::InvalidVerdict("edit requires a label".into()))?;
                let check = ReasoningTask {
                    label: Some(label.clone()),
                    ..self.proposed_task.clone()
                };
                check
                    .validate()
                    .map_err(|e| StoreError::InvalidVerdict(e.to_string()))?;
                let label = match self.proposed_task.kind {
                    TaskKind::CommonSense => label.to_lowercase(),
                    TaskKind::MathWord => label,
                };
                self.status = VerificationStatus::Edited;
                self.verdict_label = Some(label);
            }
        }
        self.note = note.or(self.note.take());
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    Num,
    Arr,
    Obj,
}

fn required_fields(stream: &str) -> &'static [(&'static str, Kind)] {
    use Kind::*;
    match stream {
        PERSONAS => &[("identity", Str), ("reason", Str), ("questions", Arr)],
        ACTIONS => &[("id", Str), ("persona", Obj), ("actions", Arr), ("final_memory", Obj)],
        DIALOGUES => &[
            ("id", Str),
            ("scenario", Str),
            ("persona_id", Str),
            ("action_seq_id", Str),
            ("turns", Arr),
            ("dia_len", Num),
            ("seed", Num),
        ],
        DATASET => &[("id", Str), ("dialogue_id", Str), ("question", Str), ("kind", Str)],
        KB => &[("question", Str), ("kind", Str), ("source_dialogue_id", Str), ("embedding", Arr)],
        QUEUE => &[
            ("id", Str),
            ("record_id", Str),
            ("dialogue_id", Str),
            ("proposed_task", Obj),
            ("status", Str),
        ],
        _ => &[],
    }
}

fn kind_matches(v: &Value, k: Kind) -> bool {
    match k {
        Kind::Str => v.is_string(),
        Kind::Num => v.is_number(),
        Kind::Arr => v.is_array(),
        Kind::Obj => v.is_object(),
    }
}

fn schema_error(stream: &str, path: impl Into<String>, reason: &str) -> StoreError {
    StoreError::Schema {
        stream: stream.to_string(),
        path: path.into(),
        reason: reason.to_string(),
    }
}

/// Checks `record` against the stream's required fields.
pub fn validate_record(stream: &str, record: &Map<String, Value>) -> Result<(), StoreError> {
    for (field, kind) in required_fields(stream) {
        match record.get(*field) {
            None | Some(Value::Null) => return Err(schema_error(stream, *field, "is missing")),
            Some(v) if !kind_matches(v, *kind) => return Err(schema_error(stream, *field, "has the wrong type")),
            _ => {}
        }
    }
    if stream == DIALOGUES {
        for (i, t) in record["turns"].as_array().into_iter().flatten().enumerate() {
            for field in ["speaker", "text"] {
                if !t.get(field).is_some_and(Value::is_string) {
                    return Err(schema_error(stream, format!("turns[{i}].{field}"), "is missing or not a string"));
                }
            }
        }
    }
    Ok(())
}

fn valid_stream(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    /// Next sequence number per stream, filled lazily. Holding this lock
    /// serializes all writes.
    seqs: Mutex<HashMap<String, u64>>,
    quarantined: Vec<PathBuf>,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root` and quarantines
    /// interrupted trailing lines.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut quarantined = Vec::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") && quarantine_tail(&path)? {
                log::warn!("quarantined partial trailing line of {}", path.display());
                quarantined.push(path);
            }
        }
        quarantined.sort();
        Ok(Self {
            root,
            seqs: Mutex::new(HashMap::new()),
            quarantined,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stream files whose partial last line was moved aside on open.
    pub fn quarantined(&self) -> &[PathBuf] {
        &self.quarantined
    }

    fn path(&self, stream: &str) -> Result<PathBuf, StoreError> {
        if !valid_stream(stream) {
            return Err(StoreError::InvalidStream(stream.to_string()));
        }
        Ok(self.root.join(format!("{stream}.jsonl")))
    }

    pub fn append<T: Serialize>(&self, stream: &str, record: &T) -> Result<String, StoreError> {
        self.append_value(stream, serde_json::to_value(record)?)
    }

    /// Validates, stamps and appends one record; returns its id.
    pub fn append_value(&self, stream: &str, record: Value) -> Result<String, StoreError> {
        let path = self.path(stream)?;
        let Value::Object(map) = record else {
            return Err(schema_error(stream, "$", "must be a JSON object"));
        };
        validate_record(stream, &map)?;
        let mut seqs = self.seqs.lock().unwrap_or_else(|p| p.into_inner());
        self.write_locked(&mut seqs, stream, &path, map)
    }

    fn write_locked(
        &self,
        seqs: &mut HashMap<String, u64>,
        stream: &str,
        path: &Path,
        mut map: Map<String, Value>,
    ) -> Result<String, StoreError> {
        let next = match seqs.get(stream) {
            Some(n) => *n,
            None => self.scan_last_seq(path)? + 1,
        };
        let id = match map.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => format!("{stream}-{next}"),
        };
        map.insert("id".into(), Value::String(id.clone()));
        map.insert("seq".into(), Value::from(next));
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        let mut line = serde_json::to_vec(&Value::Object(map))?;
        line.push(b'\n');
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        file.write_all(&line)?;
        file.sync_data()?;
        seqs.insert(stream.to_string(), next + 1);
        Ok(id)
    }

    fn scan_last_seq(&self, path: &Path) -> Result<u64, StoreError> {
        if !path.exists() {
            return Ok(0);
        }
        let mut last = 0;
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if let Ok(v) = serde_json::from_str::<Value>(&line) {
                last = last.max(v.get("seq").and_then(Value::as_u64).unwrap_or(0));
            }
        }
        Ok(last)
    }

    /// Every stored line, in file order.
    pub fn history(&self, stream: &str) -> Result<Vec<Value>, StoreError> {
        let path = self.path(stream)?;
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                stream: stream.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.push(v);
        }
        Ok(out)
    }

    /// Latest version of each record, ordered by first appearance.
    pub fn load_values(&self, stream: &str) -> Result<Vec<Value>, StoreError> {
        let mut order: Vec<String> = Vec::new();
        let mut latest: HashMap<String, Value> = HashMap::new();
        for v in self.history(stream)? {
            let id = v.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
            if latest.insert(id.clone(), v).is_none() {
                order.push(id);
            }
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }

    pub fn load<T: DeserializeOwned>(&self, stream: &str) -> Result<Vec<T>, StoreError> {
        self.load_values(stream)?
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(StoreError::from))
            .collect()
    }

    pub fn get<T: DeserializeOwned>(&self, stream: &str, id: &str) -> Result<Option<T>, StoreError> {
        let found = self
            .history(stream)?
            .into_iter()
            .rev()
            .find(|v| v.get("id").and_then(Value::as_str) == Some(id));
        found.map(serde_json::from_value).transpose().map_err(StoreError::from)
    }

    /// Records a verdict on a pending queue item. The read-check-write runs
    /// under the store's write lock, so of two racing verdicts on one item
    /// exactly one succeeds and the other gets [`StoreError::Conflict`].
    pub fn verdict(
        &self,
        item_id: &str,
        decision: Decision,
        label: Option<String>,
        note: Option<String>,
    ) -> Result<VerificationItem, StoreError> {
        let mut seqs = self.seqs.lock().unwrap_or_else(|p| p.into_inner());
        let mut item: VerificationItem = self
            .get(QUEUE, item_id)?
            .ok_or_else(|| StoreError::NotFound(format!("queue item {item_id}")))?;
        item.decide(decision, label, note)?;
        let Value::Object(map) = serde_json::to_value(&item)? else {
            unreachable!("struct serializes to an object")
        };
        self.write_locked(&mut seqs, QUEUE, &self.path(QUEUE)?, map)?;
        Ok(item)
    }

    pub fn queue(&self, status: Option<VerificationStatus>) -> Result<Vec<VerificationItem>, StoreError> {
        Ok(self
            .load::<VerificationItem>(QUEUE)?
            .into_iter()
            .filter(|i| status.is_none_or(|s| i.status == s))
            .collect())
    }
}

/// Reads a standalone JSONL file (not a store stream). Blank lines are
/// skipped; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            stream: name.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Moves a trailing partial line to `<file>.quarantine`. Returns whether
/// anything was moved.
fn quarantine_tail(path: &Path) -> Result<bool, StoreError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(false);
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let mut q = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path.with_extension("jsonl.quarantine"))?;
    q.write_all(&bytes[keep..])?;
    q.write_all(b"\n")?;
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(keep as u64)?;
    f.sync_all()?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str) -> VerificationItem {
        VerificationItem::new(
            id.into(),
            "r1".into(),
            "d1".into(),
            ReasoningTask {
                question: "Is it covered?".into(),
                label: Some("yes".into()),
                kind: TaskKind::CommonSense,
            },
        )
    }

    #[test]
    fn verdict_transitions() {
        let mut i = item("a");
        i.decide(Decision::Accept, None, None).unwrap();
        assert_eq!(i.final_label(), Some("yes"));
        assert!(matches!(i.decide(Decision::Reject, None, None), Err(StoreError::Conflict { .. })));

        let mut i = item("b");
        assert!(i.decide(Decision::Edit, None, None).is_err());
        assert!(i.decide(Decision::Edit, Some("maybe".into()), None).is_err());
        i.decide(Decision::Edit, Some("No".into()), Some("misread".into())).unwrap();
        assert_eq!((i.status, i.final_label()), (VerificationStatus::Edited, Some("no")));

        let mut i = item("c");
        i.decide(Decision::Reject, None, None).unwrap();
        assert_eq!(i.final_label(), None);
    }

    #[test]
    fn append_assigns_ids_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.append_value(RUNS, serde_json::json!({"x": 1})).unwrap();
        let b = store.append_value(RUNS, serde_json::json!({"x": 2})).unwrap();
        assert_eq!((a.as_str(), b.as_str()), ("runs-1", "runs-2"));
        store.append_value(RUNS, serde_json::json!({"id": "runs-1", "x": 3})).unwrap();
        let vals = store.load_values(RUNS).unwrap();
        assert_eq!(vals.len(), 2);
        assert_eq!(vals[0]["x"], 3);
        assert_eq!(vals[0]["seq"], 3);
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.append_value(RUNS, serde_json::json!({})).unwrap(), "runs-4");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let err = store
            .append_value(DATASET, serde_json::json!({"id": "r", "dialogue_id": "d", "kind": "math-word"}))
            .unwrap_err();
        assert!(matches!(&err, StoreError::Schema { path, .. } if path == "question"), "{err}");
        let err = store
            .append_value(
                DIALOGUES,
                serde_json::json!({"id": "d", "scenario": "s", "persona_id": "p", "action_seq_id": "a",
                                   "dia_len": 1, "seed": 0, "turns": [{"speaker": "user"}]}),
            )
            .unwrap_err();
        assert!(matches!(&err, StoreError::Schema { path, .. } if path == "turns[0].text"), "{err}");
        assert!(matches!(store.append_value("../x", serde_json::json!({})), Err(StoreError::InvalidStream(_))));
    }

    #[test]
    fn partial_line_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"seq\":1}\n{\"id\":\"b\",\"se").unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.quarantined().len(), 1);
        assert_eq!(store.load_values(RUNS).unwrap().len(), 1);
        let q = fs::read_to_string(dir.path().join("runs.jsonl.quarantine")).unwrap();
        assert_eq!(q, "{\"id\":\"b\",\"se\n");
        assert!(Store::open(dir.path()).unwrap().quarantined().is_empty());
    }

    #[test]
    fn store_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.append(QUEUE, &item("v1")).unwrap();
        assert_eq!(store.queue(Some(VerificationStatus::Pending)).unwrap().len(), 1);
        let v = store.verdict("v1", Decision::Accept, None, None).unwrap();
        assert_eq!(v.status, VerificationStatus::Accepted);
        assert!(matches!(store.verdict("v1", Decision::Reject, None, None), Err(StoreError::Conflict { .. })));
        assert!(matches!(store.verdict("nope", Decision::Accept, None, None), Err(StoreError::NotFound(_))));
        assert!(store.queue(Some(VerificationStatus::Pending)).unwrap().is_empty());
        assert_eq!(store.history(QUEUE).unwrap().len(), 2);
    }
}
