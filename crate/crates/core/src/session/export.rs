//! Export archive: everything an exam produced, as plain files.
//!
//! ```text
//! manifest.json        exam id, mode, source ref, last event covered
//! config.toml          the exam configuration including the roster
//! events.log           one JSON event per line
//! answers/<participant>/<exercise>/<revision>.json
//! results.csv          spreadsheet summary (when graded)
//! gradebook.json       full gradebook (when graded)
//! reports/<participant>.txt
//! store.jsonl          raw dump of the instance's storage namespace
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ExamState, InteractionEvent, SessionError, SessionStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.log";
pub const RESULTS_FILE: &str = "results.csv";

/// Content contributed by layers above the session store.
#[derive(Debug, Clone, Default)]
pub struct ExportExtras {
    /// `preview`, `trial` or `live`.
    pub mode: String,
    pub source_ref: String,
    pub results_csv: Option<String>,
    pub gradebook_json: Option<String>,
    /// participant → rendered report.
    pub reports: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub exam_id: String,
    pub title: String,
    pub mode: String,
    /// Set for anything that is not a live exam, so rehearsal data is never
    /// mistaken for real results.
    pub trial: bool,
    pub source_ref: String,
    pub exported_at: DateTime<Utc>,
    pub last_seq: u64,
    pub participants: usize,
    pub answer_revisions: usize,
}

#[derive(Debug, Clone)]
pub struct ExportArchive {
    pub dir: PathBuf,
    pub manifest: ExportManifest,
}

impl ExportArchive {
    pub fn open(dir: &Path) -> Result<Self, SessionError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest = serde_json::from_str(&text).map_err(|e| SessionError::InvalidBody(e.to_string()))?;
        Ok(ExportArchive {
            dir: dir.to_owned(),
            manifest,
        })
    }

    pub fn events(&self) -> Result<Vec<InteractionEvent>, SessionError> {
        let text = fs::read_to_string(self.dir.join(EVENTS_FILE))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| SessionError::InvalidBody(e.to_string())))
            .collect()
    }

    pub fn config_text(&self) -> Result<String, SessionError> {
        Ok(fs::read_to_string(self.dir.join("config.toml"))?)
    }

    pub fn store_dump(&self) -> Result<Vec<crate::store::Record>, SessionError> {
        let text = fs::read_to_string(self.dir.join("store.jsonl"))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| SessionError::InvalidBody(e.to_string())))
            .collect()
    }
}

pub(super) fn write_archive(
    dir: &Path,
    session: &SessionStore,
    state: &ExamState,
    events: &[InteractionEvent],
    extras: &ExportExtras,
) -> Result<ExportArchive, SessionError> {
    let config = session.config();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;

    let mut log = String::new();
    for event in events {
        log.push_str(&serde_json::to_string(event).expect("events serialize"));
        log.push('\n');
    }
    fs::write(dir.join(EVENTS_FILE), log)?;

    let mut revisions = 0;
    for (participant, exercises) in &state.answers {
        for (exercise, docs) in exercises {
            let target = dir.join("answers").join(participant).join(exercise);
            fs::create_dir_all(&target)?;
            for doc in docs {
                fs::write(target.join(format!("{}.json", doc.revision)), &doc.body)?;
                revisions += 1;
            }
        }
    }

    if let Some(csv) = &extras.results_csv {
        fs::write(dir.join(RESULTS_FILE), csv)?;
    }
    if let Some(json) = &extras.gradebook_json {
        fs::write(dir.join("gradebook.json"), json)?;
    }
    if !extras.reports.is_empty() {
        let reports = dir.join("reports");
        fs::create_dir_all(&reports)?;
        for (participant, text) in &extras.reports {
            fs::write(reports.join(format!("{participant}.txt")), text)?;
        }
    }

    let mut dump = String::new();
    for record in session.document_store().dump(session.namespace())? {
        dump.push_str(&serde_json::to_string(&record).expect("records serialize"));
        dump.push('\n');
    }
    fs::write(dir.join("store.jsonl"), dump)?;

    let manifest = ExportManifest {
        exam_id: config.exam_id.clone(),
        title: config.title.clone(),
        mode: extras.mode.clone(),
        trial: extras.mode != "live",
        source_ref: extras.source_ref.clone(),
        exported_at: session.now(),
        last_seq: state.last_seq,
        participants: config.roster.len(),
        answer_revisions: revisions,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    tracing::info!(dir = %dir.display(), last_seq = state.last_seq, "export written");
    Ok(ExportArchive {
        dir: dir.to_owned(),
        manifest,
    })
}
