//! On-disk repository handle, write locking and file helpers.
//!
//! Layout under the repository root (conventionally `.ca/`):
//!
//! ```text
//! objects/<hh>/<62 hex>   artifact blobs, exact bytes
//! index.jsonl             artifact records, append-only
//! runs/<run-id>.json      run records
//! counters.json           tuple-hash prefix -> last run sequence
//! events.jsonl            ingested change events
//! plans.jsonl             validation plans, one per distinct event
//! pins.json               branch -> pins
//! promotions.jsonl        approval decisions
//! lineage.jsonl           provenance edges
//! work/                   scratch directories for step execution
//! locks/                  branch-scoped lock files
//! lock                    repository write lock
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::store::Store;

pub const DEFAULT_REPO_DIR: &str = ".ca";
pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(10);

pub(crate) const OBJECTS_DIR: &str = "objects";
pub(crate) const INDEX_FILE: &str = "index.jsonl";
pub(crate) const RUNS_DIR: &str = "runs";
pub(crate) const COUNTERS_FILE: &str = "counters.json";
pub(crate) const EVENTS_FILE: &str = "events.jsonl";
pub(crate) const PLANS_FILE: &str = "plans.jsonl";
pub(crate) const PINS_FILE: &str = "pins.json";
pub(crate) const PROMOTIONS_FILE: &str = "promotions.jsonl";
pub(crate) const LINEAGE_FILE: &str = "lineage.jsonl";
pub(crate) const WORK_DIR: &str = "work";
pub(crate) const LOCKS_DIR: &str = "locks";
const LOCK_FILE: &str = "lock";

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

/// Handle to an initialized repository directory.
///
/// The handle is `Sync`: reads may happen from any number of threads, and
/// every mutation goes through [`Repository::write_lock`].
pub struct Repository {
    root: PathBuf,
    store: Store,
    writer: Mutex<()>,
    lock_timeout: Duration,
}

impl std::fmt::Debug for Repository {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Repository").field("root", &self.root).finish()
    }
}

impl Repository {
    /// Creates the repository skeleton if needed and opens it. Calling this
    /// on an existing repository changes nothing.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [OBJECTS_DIR, RUNS_DIR, WORK_DIR, LOCKS_DIR] {
            fs::create_dir_all(root.join(dir))?;
        }
        for file in [INDEX_FILE, EVENTS_FILE, PLANS_FILE, PROMOTIONS_FILE, LINEAGE_FILE] {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join(file))?;
        }
        if !root.join(COUNTERS_FILE).exists() {
            write_atomic(&root.join(COUNTERS_FILE), b"{}\n")?;
        }
        if !root.join(PINS_FILE).exists() {
            write_atomic(&root.join(PINS_FILE), b"{}\n")?;
        }
        Self::open(root)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join(OBJECTS_DIR).is_dir() || !root.join(INDEX_FILE).is_file() {
            return Err(Error::NotInitialized(root.display().to_string()));
        }
        let store = Store::new(root.join(OBJECTS_DIR), root.join(INDEX_FILE));
        Ok(Self {
            root,
            store,
            writer: Mutex::new(()),
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
        })
    }

    /// How long a writer waits for another process to release the lock
    /// before failing with [`Error::LockHeld`]. Zero means fail fast.
    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Acquires the repository-wide write lock: an in-process mutex plus an
    /// advisory lock on `<root>/lock` shared with other processes.
    pub fn write_lock(&self) -> Result<WriteGuard<'_>> {
        let local = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let file = FileLock::acquire(&self.root.join(LOCK_FILE), self.lock_timeout)?;
        Ok(WriteGuard {
            _file: file,
            _local: local,
        })
    }

    /// Acquires the lock scoping pipeline runs to one branch at a time.
    pub fn branch_lock(&self, branch: &str) -> Result<FileLock> {
        let name: String = branch
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '~' })
            .collect();
        FileLock::acquire(
            &self.root.join(LOCKS_DIR).join(format!("branch-{name}.lock")),
            self.lock_timeout,
        )
    }
}

pub struct WriteGuard<'a> {
    _file: FileLock,
    _local: MutexGuard<'a, ()>,
}

/// Exclusive advisory lock on a file, released on drop.
#[derive(Debug)]
pub struct FileLock {
    file: File,
}

impl FileLock {
    pub fn acquire(path: &Path, timeout: Duration) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)?;
        let deadline = Instant::now() + timeout;
        loop {
            match file.try_lock() {
                Ok(()) => return Ok(Self { file }),
                Err(fs::TryLockError::WouldBlock) => {
                    if Instant::now() >= deadline {
                        return Err(Error::LockHeld(path.display().to_string()));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(fs::TryLockError::Error(e)) => return Err(e.into()),
            }
        }
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers see either the old or the new content.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e))
}

pub(crate) fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("serializable value");
    line.push(b'\n');
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

/// Reads every complete line of a JSON-lines file. A trailing line without
/// a newline is an interrupted append and is ignored.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::corrupt(path, e))?);
    }
    Ok(out)
}
