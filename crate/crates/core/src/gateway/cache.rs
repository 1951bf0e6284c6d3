//! Append-only JSONL cache of generations, keyed by request.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::GenerationRequest;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: GenerationRequest,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Shared by every backend of a run; safe for concurrent use.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache { path: None, entries: RwLock::new(HashMap::new()), writer: Mutex::new(None) }
    }

    /// Load `path` (if it exists) and append new entries to it.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            needs_newline = fs::read(path)?.last().is_some_and(|b| *b != b'\n');
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key, e.response);
                    }
                    // An interrupted append can leave one torn last line.
                    Err(err) => log::warn!("{}:{}: skipping unreadable cache line: {err}", path.display(), i + 1),
                }
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Record a response. The first response stored under a key wins.
    pub fn put(&self, key: &str, request: &GenerationRequest, response: &str) -> io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(key) {
                return Ok(());
            }
            entries.insert(key.to_string(), response.to_string());
        }
        if let Some(file) = writer.as_mut() {
            let entry = CacheEntry {
                key: key.to_string(),
                request: request.clone(),
                response: response.to_string(),
                timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            };
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        Ok(())
    }
}
