//! Background jobs. A job mutates a clone of its session and swaps the
//! result back in on success, so readers never wait on it.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use flim_core::train::EpochLog;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    LearnLayer1,
    Score,
    TrainEncoderRest,
    TrainDecoder,
    Evaluate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSnapshot {
    pub id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    /// Per-epoch losses of a decoder job, appended as training runs.
    pub epochs: Vec<EpochLog>,
    pub result: Option<Value>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct Job {
    snapshot: Mutex<JobSnapshot>,
    cancel: AtomicBool,
}

impl Job {
    pub fn new(id: String, session_id: String, kind: JobKind) -> Self {
        Job {
            snapshot: Mutex::new(JobSnapshot {
                id,
                session_id,
                kind,
                state: JobState::Queued,
                progress: 0.0,
                epochs: Vec::new(),
                result: None,
                error: None,
            }),
            cancel: AtomicBool::new(false),
        }
    }

    pub fn snapshot(&self) -> JobSnapshot {
        self.snapshot.lock().expect("job lock").clone()
    }

    /// Applies `f` unless the job already reached a terminal state.
    fn update(&self, f: impl FnOnce(&mut JobSnapshot)) {
        let mut s = self.snapshot.lock().expect("job lock");
        if !s.state.is_terminal() {
            f(&mut s);
        }
    }

    pub fn start(&self) {
        self.update(|s| s.state = JobState::Running);
    }

    pub fn record_epoch(&self, e: EpochLog, total: usize) {
        self.update(|s| {
            s.epochs.push(e);
            s.progress = (e.epoch + 1) as f64 / total.max(1) as f64;
        });
    }

    pub fn finish(&self, result: Value) {
        self.update(|s| {
            s.state = JobState::Done;
            s.progress = 1.0;
            s.result = Some(result);
        });
    }

    pub fn fail(&self, error: String) {
        self.update(|s| {
            s.state = JobState::Failed;
            s.error = Some(error);
        });
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

pub type JobHandle = Arc<Job>;
