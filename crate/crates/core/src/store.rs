//! Schemaless document persistence.
//!
//! Every exam instance writes into its own namespace. A namespace holds
//! versioned documents (grouped in collections and addressed by key) and an
//! append-only event stream. Bodies are opaque strings and come back exactly
//! as they were written.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid namespace `{0}`")]
    InvalidNamespace(String),
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record in namespace `{namespace}` line {line}: {message}")]
    Corrupt {
        namespace: String,
        line: usize,
        message: String,
    },
}

/// One persisted record. Documents are versioned by appending; the newest
/// record for a (collection, key) pair is the current one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Document {
        collection: String,
        key: String,
        body: String,
    },
    Event {
        body: String,
    },
}

pub trait DocumentStore: Send + Sync {
    fn put(&self, namespace: &str, collection: &str, key: &str, body: &str) -> Result<(), StoreError>;
    fn get_latest(&self, namespace: &str, collection: &str, key: &str) -> Result<Option<String>, StoreError>;
    fn append_event(&self, namespace: &str, body: &str) -> Result<(), StoreError>;
    fn events(&self, namespace: &str) -> Result<Vec<String>, StoreError>;
    /// Latest version of every document in `collection`, by key.
    fn scan(&self, namespace: &str, collection: &str) -> Result<BTreeMap<String, String>, StoreError>;
    /// Every record of the namespace in write order.
    fn dump(&self, namespace: &str) -> Result<Vec<Record>, StoreError>;
    fn erase(&self, namespace: &str) -> Result<(), StoreError>;
    fn namespaces(&self) -> Result<Vec<String>, StoreError>;
    /// All bytes currently held by the backend, across namespaces. Used to
    /// verify erasure.
    fn raw_contents(&self) -> Result<String, StoreError>;
}

fn check_namespace(ns: &str) -> Result<(), StoreError> {
    if crate::config::is_safe_token(ns) {
        Ok(())
    } else {
        Err(StoreError::InvalidNamespace(ns.to_owned()))
    }
}

fn latest(records: &[Record], collection: &str, key: &str) -> Option<String> {
    records.iter().rev().find_map(|r| match r {
        Record::Document {
            collection: c,
            key: k,
            body,
        } if c == collection && k == key => Some(body.clone()),
        _ => None,
    })
}

fn scan_records(records: &[Record], collection: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Record::Document {
            collection: c,
            key,
            body,
        } = r
        {
            if c == collection {
                out.insert(key.clone(), body.clone());
            }
        }
    }
    out
}

fn event_bodies(records: &[Record]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Event { body } => Some(body.clone()),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    data: Mutex<BTreeMap<String, Vec<Record>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, ns: &str, record: Record) -> Result<(), StoreError> {
        check_namespace(ns)?;
        self.data.lock().unwrap().entry(ns.to_owned()).or_default().push(record);
        Ok(())
    }

    fn with<T>(&self, ns: &str, f: impl FnOnce(&[Record]) -> T) -> Result<T, StoreError> {
        check_namespace(ns)?;
        let data = self.data.lock().unwrap();
        Ok(f(data.get(ns).map(Vec::as_slice).unwrap_or_default()))
    }
}

impl DocumentStore for MemoryStore {
    fn put(&self, ns: &str, collection: &str, key: &str, body: &str) -> Result<(), StoreError> {
        self.push(
            ns,
            Record::Document {
                collection: collection.into(),
                key: key.into(),
                body: body.into(),
            },
        )
    }

    fn get_latest(&self, ns: &str, collection: &str, key: &str) -> Result<Option<String>, StoreError> {
        self.with(ns, |r| latest(r, collection, key))
    }

    fn append_event(&self, ns: &str, body: &str) -> Result<(), StoreError> {
        self.push(ns, Record::Event { body: body.into() })
    }

    fn events(&self, ns: &str) -> Result<Vec<String>, StoreError> {
        self.with(ns, event_bodies)
    }

    fn scan(&self, ns: &str, collection: &str) -> Result<BTreeMap<String, String>, StoreError> {
        self.with(ns, |r| scan_records(r, collection))
    }

    fn dump(&self, ns: &str) -> Result<Vec<Record>, StoreError> {
        self.with(ns, <[Record]>::to_vec)
    }

    fn erase(&self, ns: &str) -> Result<(), StoreError> {
        check_namespace(ns)?;
        self.data.lock().unwrap().remove(ns);
        Ok(())
    }

    fn namespaces(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.data.lock().unwrap().keys().cloned().collect())
    }

    fn raw_contents(&self) -> Result<String, StoreError> {
        let data = self.data.lock().unwrap();
        let mut out = String::new();
        for (ns, records) in data.iter() {
            out.push_str(ns);
            out.push('\n');
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("records serialize"));
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// Single-directory embedded store: one JSON-lines file per namespace,
/// appended to and flushed on every write. Contents are cached in memory and
/// reloaded on open.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    cache: Mutex<BTreeMap<String, Vec<Record>>>,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut cache = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(ns) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".jsonl"))
            else {
                continue;
            };
            let ns = ns.to_owned();
            let records = Self::load(&path, &ns)?;
            cache.insert(ns, records);
        }
        Ok(FileStore {
            dir,
            cache: Mutex::new(cache),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn load(path: &Path, ns: &str) -> Result<Vec<Record>, StoreError> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                namespace: ns.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(records)
    }

    fn path(&self, ns: &str) -> PathBuf {
        self.dir.join(format!("{ns}.jsonl"))
    }

    fn push(&self, ns: &str, record: Record) -> Result<(), StoreError> {
        check_namespace(ns)?;
        let mut cache = self.cache.lock().unwrap();
        let mut line = serde_json::to_string(&record).expect("records serialize");
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(self.path(ns))?;
        file.write_all(line.as_bytes())?;
        file.flush()?;
        cache.entry(ns.to_owned()).or_default().push(record);
        Ok(())
    }

    fn with<T>(&self, ns: &str, f: impl FnOnce(&[Record]) -> T) -> Result<T, StoreError> {
        check_namespace(ns)?;
        let cache = self.cache.lock().unwrap();
        Ok(f(cache.get(ns).map(Vec::as_slice).unwrap_or_default()))
    }
}

impl DocumentStore for FileStore {
    fn put(&self, ns: &str, collection: &str, key: &str, body: &str) -> Result<(), StoreError> {
        self.push(
            ns,
            Record::Document {
                collection: collection.into(),
                key: key.into(),
                body: body.into(),
            },
        )
    }

    fn get_latest(&self, ns: &str, collection: &str, key: &str) -> Result<Option<String>, StoreError> {
        self.with(ns, |r| latest(r, collection, key))
    }

    fn append_event(&self, ns: &str, body: &str) -> Result<(), StoreError> {
        self.push(ns, Record::Event { body: body.into() })
    }

    fn events(&self, ns: &str) -> Result<Vec<String>, StoreError> {
        self.with(ns, event_bodies)
    }

    fn scan(&self, ns: &str, collection: &str) -> Result<BTreeMap<String, String>, StoreError> {
        self.with(ns, |r| scan_records(r, collection))
    }

    fn dump(&self, ns: &str) -> Result<Vec<Record>, StoreError> {
        self.with(ns, <[Record]>::to_vec)
    }

    fn erase(&self, ns: &str) -> Result<(), StoreError> {
        check_namespace(ns)?;
        let mut cache = self.cache.lock().unwrap();
        match fs::remove_file(self.path(ns)) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        cache.remove(ns);
        Ok(())
    }

    fn namespaces(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.cache.lock().unwrap().keys().cloned().collect())
    }

    /// Reads the directory from disk rather than the cache, so leftovers from
    /// earlier processes are included.
    fn raw_contents(&self) -> Result<String, StoreError> {
        let _guard = self.cache.lock().unwrap();
        let mut out = String::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.sort();
        for path in paths {
            if path.is_file() {
                out.push_str(&String::from_utf8_lossy(&fs::read(&path)?));
            }
        }
        Ok(out)
    }
}
