//! Append-only JSON-lines store of submissions and session closures.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use drrpose::WorldPose;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::scoring::ViewScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub annotator: String,
    pub attempt: u32,
    pub pose: WorldPose,
    pub started_at_ms: Option<u64>,
    pub submitted_at_ms: u64,
    pub views: Vec<ViewScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Record(AnnotationRecord),
    Close { annotator: String, closed_at_ms: u64 },
}

#[derive(Debug, Default)]
struct State {
    records: Vec<AnnotationRecord>,
    closed: BTreeSet<String>,
}

impl State {
    fn apply(&mut self, e: Entry) {
        match e {
            Entry::Record(r) => self.records.push(r),
            Entry::Close { annotator, .. } => {
                self.closed.insert(annotator);
            }
        }
    }
}

/// Readers share the in-memory copy; every write goes through one appender
/// that holds both the lock and an exclusive lock on the file.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    state: RwLock<State>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> drrpose::Error + '_ {
    move |e| drrpose::Error::io(path, e)
}

impl Store {
    /// Opens or creates the store and replays existing entries.
    pub fn open(path: &Path) -> drrpose::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut state = State::default();
        if path.exists() {
            let file = File::open(path).map_err(io_err(path))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: Entry = serde_json::from_str(&line)
                    .map_err(|e| drrpose::Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
                state.apply(e);
            }
        }
        Ok(Store {
            path: path.to_path_buf(),
            state: RwLock::new(state),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append_line(&self, e: &Entry) -> drrpose::Result<()> {
        let mut line = serde_json::to_string(e).expect("entries serialize");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        f.lock().map_err(io_err(&self.path))?;
        let res = f.write_all(line.as_bytes()).and_then(|_| f.sync_data());
        let _ = f.unlock();
        res.map_err(io_err(&self.path))
    }

    /// Appends a record unless `(task, annotator, attempt)` already exists.
    /// With `attempt = None` the next free attempt number is used.
    pub async fn insert(
        &self,
        build: impl FnOnce(u32) -> AnnotationRecord,
        task_id: &str,
        annotator: &str,
        attempt: Option<u32>,
    ) -> drrpose::Result<Option<AnnotationRecord>> {
        let mut st = self.state.write().await;
        let mine = st
            .records
            .iter()
            .filter(|r| r.task_id == task_id && r.annotator == annotator);
        let attempt = match attempt {
            Some(a) if mine.clone().any(|r| r.attempt == a) => return Ok(None),
            Some(a) => a,
            None => mine.map(|r| r.attempt + 1).max().unwrap_or(1),
        };
        let rec = build(attempt);
        let e = Entry::Record(rec.clone());
        self.append_line(&e)?;
        st.apply(e);
        Ok(Some(rec))
    }

    /// Marks the annotator's session closed; closing twice is a no-op.
    pub async fn close(&self, annotator: &str, now_ms: u64) -> drrpose::Result<()> {
        let mut st = self.state.write().await;
        if st.closed.contains(annotator) {
            return Ok(());
        }
        let e = Entry::Close {
            annotator: annotator.to_string(),
            closed_at_ms: now_ms,
        };
        self.append_line(&e)?;
        st.apply(e);
        Ok(())
    }

    pub async fn is_closed(&self, annotator: &str) -> bool {
        self.state.read().await.closed.contains(annotator)
    }

    pub async fn records(&self) -> Vec<AnnotationRecord> {
        self.state.read().await.records.clone()
    }

    pub async fn closed(&self) -> BTreeSet<String> {
        self.state.read().await.closed.clone()
    }
}
