//! Session persistence: one directory per session holding `session.json`
//! (written once, atomically) and `events.jsonl` (append-only, one fsync'd
//! line per acknowledged submission). The in-memory index is rebuilt from
//! disk on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::report::{build_report, Report};
use super::{
    create_session, validate_responses, CreateSession, EvalError, EvalSession, Responses,
    ServedItem,
};

const SESSION_FILE: &str = "session.json";
const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionEvent {
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
    pub session: String,
    pub annotator: String,
    pub item: String,
    pub responses: Responses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    pub completed: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ServedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub ok: bool,
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub pending: usize,
    pub total: usize,
}

struct SessionState {
    session: EvalSession,
    submissions: BTreeMap<(String, String), SubmissionEvent>,
    log: File,
    log_path: PathBuf,
}

impl SessionState {
    fn completed_by(&self, annotator: &str) -> usize {
        self.submissions
            .keys()
            .filter(|(a, _)| a == annotator)
            .count()
    }
}

pub struct EvalStore {
    root: PathBuf,
    sessions: Mutex<HashMap<String, SessionState>>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn open_log(path: &Path) -> Result<File, EvalError> {
    OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))
}

/// Replays a log. A final line without its newline is a write that was
/// never acknowledged; it is cut off. Any other bad line is corruption.
fn replay(
    path: &Path,
    log: &mut File,
    session: &EvalSession,
) -> Result<BTreeMap<(String, String), SubmissionEvent>, EvalError> {
    log.seek(SeekFrom::Start(0)).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(&*log);
    let mut out = BTreeMap::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
        if read == 0 {
            break;
        }
        n += 1;
        if !line.ends_with('\n') {
            log::warn!("{}: dropping torn final line {n}", path.display());
            break;
        }
        if line.trim().is_empty() {
            good_len += read as u64;
            continue;
        }
        let ev: SubmissionEvent = serde_json::from_str(&line).map_err(|e| EvalError::Corrupt {
            path: path.display().to_string(),
            line: n,
            message: e.to_string(),
        })?;
        if ev.session != session.session_id || session.item_index(&ev.item).is_none() {
            return Err(EvalError::Corrupt {
                path: path.display().to_string(),
                line: n,
                message: format!("event for {}/{} does not belong here", ev.session, ev.item),
            });
        }
        good_len += read as u64;
        out.entry((ev.annotator.clone(), ev.item.clone()))
            .or_insert(ev);
    }
    drop(reader);
    let len = log.metadata().map_err(|e| io_err(path, e))?.len();
    if len != good_len {
        log.set_len(good_len).map_err(|e| io_err(path, e))?;
        log.sync_all().map_err(|e| io_err(path, e))?;
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("json.tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

impl EvalStore {
    /// Opens (or creates) a store and rebuilds every session from disk.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let mut sessions = HashMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| io_err(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SESSION_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let sp = dir.join(SESSION_FILE);
            let raw = fs::read(&sp).map_err(|e| io_err(&sp, e))?;
            let session: EvalSession = serde_json::from_slice(&raw).map_err(|e| io_err(&sp, e))?;
            let log_path = dir.join(EVENTS_FILE);
            let mut log = open_log(&log_path)?;
            let submissions = replay(&log_path, &mut log, &session)?;
            sessions.insert(
                session.session_id.clone(),
                SessionState {
                    session,
                    submissions,
                    log,
                    log_path,
                },
            );
        }
        Ok(EvalStore {
            root,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, SessionState>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Creates and persists a session. Creating the same session twice
    /// returns the existing one.
    pub fn create(&self, req: &CreateSession) -> Result<SessionSummary, EvalError> {
        let session = create_session(req)?;
        let mut sessions = self.lock();
        if let Some(existing) = sessions.get(&session.session_id) {
            return Ok(summary(existing));
        }
        let dir = self.root.join(&session.session_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let bytes = serde_json::to_vec_pretty(&session).expect("session serializes");
        write_atomic(&dir.join(SESSION_FILE), &bytes)?;
        let log_path = dir.join(EVENTS_FILE);
        let log = open_log(&log_path)?;
        let state = SessionState {
            session,
            submissions: BTreeMap::new(),
            log,
            log_path,
        };
        let out = summary(&state);
        sessions.insert(state.session.session_id.clone(), state);
        Ok(out)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.lock().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Full session including hidden assignments; for server-side use.
    pub fn session(&self, id: &str) -> Result<EvalSession, EvalError> {
        self.lock()
            .get(id)
            .map(|s| s.session.clone())
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))
    }

    pub fn submissions(&self, id: &str) -> Result<Vec<SubmissionEvent>, EvalError> {
        self.lock()
            .get(id)
            .map(|s| s.submissions.values().cloned().collect())
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))
    }

    pub fn next(&self, id: &str, annotator: &str) -> Result<NextResponse, EvalError> {
        let sessions = self.lock();
        let st = sessions
            .get(id)
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))?;
        let order =
            st.session
                .orders
                .get(annotator)
                .ok_or_else(|| EvalError::UnknownAnnotator {
                    session: id.to_string(),
                    annotator: annotator.to_string(),
                })?;
        let completed = st.completed_by(annotator);
        let total = order.len();
        let pending = order.iter().enumerate().find(|(_, &i)| {
            let key = (annotator.to_string(), st.session.items[i].item_id.clone());
            !st.submissions.contains_key(&key)
        });
        Ok(NextResponse {
            done: pending.is_none(),
            completed,
            total,
            item: pending.map(|(pos, &i)| ServedItem::new(&st.session, i, pos + 1)),
        })
    }

    /// Validates, appends and fsyncs one submission before acknowledging it.
    pub fn submit(
        &self,
        id: &str,
        annotator: &str,
        item: &str,
        responses: &Value,
    ) -> Result<SubmitAck, EvalError> {
        let mut sessions = self.lock();
        let st = sessions
            .get_mut(id)
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))?;
        if !st.session.orders.contains_key(annotator) {
            return Err(EvalError::UnknownAnnotator {
                session: id.to_string(),
                annotator: annotator.to_string(),
            });
        }
        if st.session.item_index(item).is_none() {
            return Err(EvalError::UnknownItem {
                session: id.to_string(),
                item: item.to_string(),
            });
        }
        let key = (annotator.to_string(), item.to_string());
        if st.submissions.contains_key(&key) {
            return Err(EvalError::Duplicate {
                annotator: annotator.to_string(),
                item: item.to_string(),
            });
        }
        let responses = validate_responses(st.session.protocol, responses)?;
        let ev = SubmissionEvent {
            ts: now_ms(),
            session: id.to_string(),
            annotator: annotator.to_string(),
            item: item.to_string(),
            responses,
        };
        let mut line = serde_json::to_vec(&ev).expect("event serializes");
        line.push(b'\n');
        st.log
            .write_all(&line)
            .map_err(|e| io_err(&st.log_path, e))?;
        st.log.sync_data().map_err(|e| io_err(&st.log_path, e))?;
        st.submissions.insert(key, ev);
        Ok(SubmitAck {
            ok: true,
            completed: st.completed_by(annotator),
            total: st.session.items.len(),
        })
    }

    pub fn report(&self, id: &str, partial: bool) -> Result<Report, EvalError> {
        let sessions = self.lock();
        let st = sessions
            .get(id)
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))?;
        let events: Vec<&SubmissionEvent> = st.submissions.values().collect();
        build_report(&st.session, &events, partial)
    }
}

fn summary(st: &SessionState) -> SessionSummary {
    let total = st.session.total_assignments();
    SessionSummary {
        session_id: st.session.session_id.clone(),
        pending: total - st.submissions.len(),
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsvc::tests::records;
    use crate::evalsvc::{default_annotators, SessionInput};
    use crate::explain::Method;
    use serde_json::json;

    fn req() -> CreateSession {
        CreateSession {
            input: SessionInput::HeadToHead {
                records_a: records(Method::NeonIcl, "A", 6),
                records_b: records(Method::Original, "B", 6),
            },
            n_items: 6,
            annotators: default_annotators(),
            seed: 1,
        }
    }

    fn vote() -> Value {
        json!({"preferred": "left", "conflict_point": "tie"})
    }

    #[test]
    fn serve_submit_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvalStore::open(dir.path()).unwrap();
        let s = store.create(&req()).unwrap();
        assert_eq!((s.pending, s.total), (18, 18));
        let session = store.session(&s.session_id).unwrap();
        let first = store.next(&s.session_id, "annotator_1").unwrap();
        let item = first.item.unwrap();
        assert_eq!(
            item.item_id,
            session.items[session.orders["annotator_1"][0]].item_id
        );
        store
            .submit(&s.session_id, "annotator_1", &item.item_id, &vote())
            .unwrap();
        let dup = store.submit(&s.session_id, "annotator_1", &item.item_id, &vote());
        assert!(matches!(dup, Err(EvalError::Duplicate { .. })));
        assert!(matches!(
            store.next(&s.session_id, "nobody"),
            Err(EvalError::UnknownAnnotator { .. })
        ));
        assert!(matches!(
            store.submit(&s.session_id, "annotator_1", "item-999", &vote()),
            Err(EvalError::UnknownItem { .. })
        ));
    }

    #[test]
    fn restart_keeps_acknowledged_and_drops_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let store = EvalStore::open(dir.path()).unwrap();
            let id = store.create(&req()).unwrap().session_id;
            for _ in 0..3 {
                let it = store.next(&id, "annotator_2").unwrap().item.unwrap();
                store
                    .submit(&id, "annotator_2", &it.item_id, &vote())
                    .unwrap();
            }
            id
        };
        let log = dir.path().join(&id).join(EVENTS_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"ts\":1,\"sess").unwrap();
        drop(f);
        let store = EvalStore::open(dir.path()).unwrap();
        assert_eq!(store.submissions(&id).unwrap().len(), 3);
        assert_eq!(store.next(&id, "annotator_2").unwrap().completed, 3);
        let it = store.next(&id, "annotator_2").unwrap().item.unwrap();
        store
            .submit(&id, "annotator_2", &it.item_id, &vote())
            .unwrap();
        drop(store);
        let store = EvalStore::open(dir.path()).unwrap();
        assert_eq!(store.submissions(&id).unwrap().len(), 4);
    }

    #[test]
    fn create_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvalStore::open(dir.path()).unwrap();
        let a = store.create(&req()).unwrap();
        let b = store.create(&req()).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.session_ids().len(), 1);
    }
}
