use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::exercise::{SuiteRequest, TestRunner};
use crate::sandbox::{JobResult, JobStatus};
use crate::store::DocumentStore;

pub const TRANSCRIPTS_COLLECTION: &str = "transcripts";

/// Records every sandbox verdict in the exam's storage namespace, keyed by a
/// hash of the full request, and answers repeated requests from the record.
///
/// Without a live runner it only replays, so re-evaluating an export never
/// executes participant code. Infrastructure failures are not recorded; a
/// later run retries them.
pub struct TranscriptRunner {
    store: Arc<dyn DocumentStore>,
    namespace: String,
    live: Option<Arc<dyn TestRunner>>,
    executed: AtomicUsize,
    replayed: AtomicUsize,
}

impl std::fmt::Debug for TranscriptRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TranscriptRunner")
            .field("namespace", &self.namespace)
            .field("live", &self.live.is_some())
            .finish()
    }
}

pub fn transcript_key(request: &SuiteRequest) -> String {
    let canonical = serde_json::to_string(request).expect("requests serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl TranscriptRunner {
    pub fn new(store: Arc<dyn DocumentStore>, namespace: impl Into<String>, live: Option<Arc<dyn TestRunner>>) -> Self {
        TranscriptRunner {
            store,
            namespace: namespace.into(),
            live,
            executed: AtomicUsize::new(0),
            replayed: AtomicUsize::new(0),
        }
    }

    /// Suites actually sent to the live runner.
    pub fn executed(&self) -> usize {
        self.executed.load(Ordering::Relaxed)
    }

    /// Suites answered from a recorded transcript.
    pub fn replayed(&self) -> usize {
        self.replayed.load(Ordering::Relaxed)
    }
}

impl TestRunner for TranscriptRunner {
    fn run_suite(&self, request: &SuiteRequest) -> Result<JobResult, String> {
        let key = transcript_key(request);
        let recorded = self
            .store
            .get_latest(&self.namespace, TRANSCRIPTS_COLLECTION, &key)
            .map_err(|e| e.to_string())?;
        if let Some(body) = recorded {
            self.replayed.fetch_add(1, Ordering::Relaxed);
            return serde_json::from_str(&body).map_err(|e| format!("transcript {key} is corrupt: {e}"));
        }
        let Some(live) = &self.live else {
            return Err(format!(
                "no recorded transcript for {}/{}",
                request.participant_id, request.exercise_id
            ));
        };
        self.executed.fetch_add(1, Ordering::Relaxed);
        let result = live.run_suite(request)?;
        if result.status != JobStatus::InfraError {
            let body = serde_json::to_string(&result).expect("results serialize");
            self.store
                .put(&self.namespace, TRANSCRIPTS_COLLECTION, &key, &body)
                .map_err(|e| e.to_string())?;
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::sandbox::{ResourceUsage, TestSuite};
    use crate::store::MemoryStore;

    struct Counting(AtomicUsize, JobStatus);
    impl TestRunner for Counting {
        fn run_suite(&self, _: &SuiteRequest) -> Result<JobResult, String> {
            self.0.fetch_add(1, Ordering::Relaxed);
            Ok(JobResult {
                status: self.1,
                compiler_output: String::new(),
                program_output: String::new(),
                test_outcomes: Some(vec![]),
                usage: ResourceUsage::default(),
            })
        }
    }

    fn request(source: &str) -> SuiteRequest {
        SuiteRequest {
            exercise_id: "e5".into(),
            participant_id: "p01".into(),
            toolchain: "c".into(),
            files: BTreeMap::from([("main.c".into(), source.into())]),
            suite: TestSuite {
                suite_ref: "e5".into(),
                tests: vec![],
            },
        }
    }

    #[test]
    fn second_run_replays_instead_of_executing() {
        let store: Arc<dyn DocumentStore> = Arc::new(MemoryStore::new());
        let live = Arc::new(Counting(AtomicUsize::new(0), JobStatus::Ok));
        let runner = TranscriptRunner::new(store.clone(), "ns", Some(live.clone()));
        let a = runner.run_suite(&request("x")).unwrap();
        let b = runner.run_suite(&request("x")).unwrap();
        assert_eq!(a, b);
        assert_eq!(live.0.load(Ordering::Relaxed), 1);
        assert_eq!((runner.executed(), runner.replayed()), (1, 1));

        let offline = TranscriptRunner::new(store, "ns", None);
        assert_eq!(offline.run_suite(&request("x")).unwrap(), a);
        assert!(offline.run_suite(&request("y")).is_err());
    }

    #[test]
    fn infrastructure_failures_are_not_recorded() {
        let store: Arc<dyn DocumentStore> = Arc::new(MemoryStore::new());
        let live = Arc::new(Counting(AtomicUsize::new(0), JobStatus::InfraError));
        let runner = TranscriptRunner::new(store.clone(), "ns", Some(live.clone()));
        runner.run_suite(&request("x")).unwrap();
        runner.run_suite(&request("x")).unwrap();
        assert_eq!(live.0.load(Ordering::Relaxed), 2);
        assert!(store.scan("ns", TRANSCRIPTS_COLLECTION).unwrap().is_empty());
    }

    #[test]
    fn key_depends_on_every_file_byte() {
        assert_ne!(transcript_key(&request("x")), transcript_key(&request("x ")));
        assert_eq!(transcript_key(&request("x")), transcript_key(&request("x")));
    }
}
