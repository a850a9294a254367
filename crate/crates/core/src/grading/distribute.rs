use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::session::DistributionMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub file_name: String,
    pub content: String,
}

/// Delivers one message with one attachment. Errors are per recipient and
/// never abort a distribution run.
pub trait MailTransport: Send + Sync {
    fn send(&self, recipient: &str, subject: &str, attachment: &Attachment) -> Result<(), String>;
}

/// Writes each message as a file into a directory instead of sending it.
#[derive(Debug)]
pub struct FileOutbox {
    dir: PathBuf,
    counter: AtomicUsize,
}

impl FileOutbox {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let existing = fs::read_dir(&dir)?.count();
        Ok(FileOutbox {
            dir,
            counter: AtomicUsize::new(existing),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Message files in the order they were written.
    pub fn messages(&self) -> std::io::Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.sort();
        Ok(files)
    }
}

impl MailTransport for FileOutbox {
    fn send(&self, recipient: &str, subject: &str, attachment: &Attachment) -> Result<(), String> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let safe: String = recipient
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let message = format!(
            "To: {recipient}\nSubject: {subject}\nAttachment: {}\n\n{}",
            attachment.file_name, attachment.content
        );
        fs::write(self.dir.join(format!("{n:05}-{safe}.eml")), message).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryFailure {
    pub participant_id: String,
    pub reason: String,
}

/// Outcome of one distribution run. Participants delivered by earlier runs
/// are skipped and appear in neither list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionLog {
    pub mode: DistributionMode,
    pub delivered: Vec<String>,
    pub failed: Vec<DeliveryFailure>,
}
