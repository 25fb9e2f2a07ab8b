//! Job records. Abduction jobs mirror their session manifest; edit jobs are
//! persisted next to the session they write to.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use dac_core::abduction::{AbductionConfig, Stage};
use dac_core::editor::DEFAULT_STEPS;
use dac_core::session::{eta_key, Manifest, SessionStatus};
use dac_core::tensor_util::{atomic_write, sha256_hex};
use dac_core::{DacError, Result};

pub const JOBS_DIR: &str = "jobs";

/// Points kept in a job's loss history.
const HISTORY_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Abduct,
    Edit,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

/// Progress over the whole job: `iteration` counts across every stage, so it
/// never decreases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub iteration: usize,
    pub total: usize,
    pub stage: Option<Stage>,
    pub stage_iteration: usize,
    pub loss: Option<f64>,
    pub smoothed_loss: Option<f64>,
    /// `(iteration, smoothed_loss)` samples for plotting the descent.
    pub loss_history: Vec<(usize, f64)>,
}

/// Body of `POST /sessions/{id}/edits`, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditBody {
    pub beta: f64,
    pub seed: u64,
    pub steps: usize,
    pub n_seeds: usize,
    pub sweep_betas: Option<Vec<f64>>,
    pub eta: Option<f64>,
    pub use_t_aux: bool,
    pub anneal: bool,
}

impl Default for EditBody {
    fn default() -> Self {
        Self {
            beta: 1.0,
            seed: 0,
            steps: DEFAULT_STEPS,
            n_seeds: 1,
            sweep_betas: None,
            eta: None,
            use_t_aux: true,
            anneal: true,
        }
    }
}

impl EditBody {
    pub fn kind(&self) -> JobKind {
        if self.sweep_betas.is_some() {
            JobKind::Sweep
        } else {
            JobKind::Edit
        }
    }

    /// Number of images the request produces.
    pub fn len(&self) -> usize {
        match &self.sweep_betas {
            Some(b) => b.len(),
            None => self.n_seeds,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One produced image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutput {
    pub hash: String,
    pub url: String,
    pub beta: f64,
    pub eta: f64,
    pub seed: u64,
    pub image_alignment: Option<f64>,
    pub text_alignment: Option<f64>,
    /// Whether the image was already stored for the same request echo.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub session_id: String,
    pub status: JobStatus,
    pub progress: JobProgress,
    pub created_unix: u64,
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
    pub error: Option<String>,
    pub request: Option<EditBody>,
    pub outputs: Vec<JobOutput>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn abduct_job_id(session_id: &str) -> String {
    format!("abduct-{session_id}")
}

/// Identical requests against one session share a job id.
pub fn edit_job_id(session_id: &str, body: &EditBody) -> Result<String> {
    let mut bytes = session_id.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend(serde_json::to_vec(body)?);
    let kind = match body.kind() {
        JobKind::Sweep => "sweep",
        _ => "edit",
    };
    Ok(format!("{kind}-{}", &sha256_hex(&bytes)[..16]))
}

/// Iterations of every trainer stage a configuration runs.
pub fn abduction_total(cfg: &AbductionConfig) -> usize {
    let stages = if cfg.with_t_aux { 2 * cfg.t_aux_rounds + 1 } else { 2 };
    stages * cfg.iterations
}

impl Job {
    pub fn new(id: String, kind: JobKind, session_id: String, total: usize, request: Option<EditBody>) -> Self {
        Self {
            id,
            kind,
            session_id,
            status: JobStatus::Queued,
            progress: JobProgress {
                total,
                ..Default::default()
            },
            created_unix: now_unix(),
            started_unix: None,
            finished_unix: None,
            error: None,
            request,
            outputs: Vec::new(),
        }
    }

    /// The abduction job a session manifest implies.
    pub fn from_manifest(m: &Manifest) -> Self {
        let mut job = Job::new(
            abduct_job_id(&m.id),
            JobKind::Abduct,
            m.id.clone(),
            abduction_total(&m.config),
            None,
        );
        job.created_unix = m.created_unix;
        let status = match m.status {
            SessionStatus::Created => JobStatus::Queued,
            SessionStatus::Running => JobStatus::Running,
            SessionStatus::Done => JobStatus::Done,
            SessionStatus::Failed => JobStatus::Failed,
        };
        job.status = status;
        if status != JobStatus::Queued {
            job.started_unix = Some(m.created_unix);
        }
        if status.is_finished() {
            job.finished_unix = Some(m.updated_unix);
            job.error = m.error.clone();
        }
        // Extra text adapters abducted later for other floors are not part of the job.
        let session_eta = eta_key(m.config.eta);
        let done_iters: usize = m
            .stages
            .iter()
            .filter(|s| s.stage != Stage::Delta || s.eta.map(eta_key).as_deref() == Some(session_eta.as_str()))
            .map(|s| s.iterations)
            .sum();
        if let Some(p) = &m.progress {
            job.progress.stage = Some(p.stage);
            job.progress.stage_iteration = p.iteration;
            job.progress.loss = Some(p.loss);
            job.progress.smoothed_loss = Some(p.smoothed_loss);
        }
        job.progress.iteration = if status == JobStatus::Done {
            job.progress.total
        } else {
            done_iters.min(job.progress.total)
        };
        job
    }

    /// Applies a status change; only queued -> running -> {done, failed} is
    /// allowed (queued may also fail directly).
    pub fn transition(&mut self, to: JobStatus) -> Result<()> {
        let ok = matches!(
            (self.status, to),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Queued, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        );
        if !ok {
            return Err(DacError::State(format!(
                "job {} cannot move from {:?} to {:?}",
                self.id, self.status, to
            )));
        }
        self.status = to;
        match to {
            JobStatus::Running => self.started_unix = Some(now_unix()),
            JobStatus::Done | JobStatus::Failed => self.finished_unix = Some(now_unix()),
            JobStatus::Queued => {}
        }
        Ok(())
    }

    /// Records one trainer iteration.
    pub fn record_iteration(&mut self, stage: Stage, stage_iteration: usize, loss: f64, smoothed: f64) {
        let p = &mut self.progress;
        p.iteration += 1;
        if p.total > 0 {
            p.iteration = p.iteration.min(p.total);
        }
        p.stage = Some(stage);
        p.stage_iteration = stage_iteration;
        p.loss = Some(loss);
        p.smoothed_loss = Some(smoothed);
        let every = (p.total / HISTORY_POINTS).max(1);
        if p.iteration.is_multiple_of(every) {
            p.loss_history.push((p.iteration, smoothed));
        }
    }

    pub fn path(sessions_root: &Path, session_id: &str, job_id: &str) -> PathBuf {
        sessions_root.join(session_id).join(JOBS_DIR).join(format!("{job_id}.json"))
    }

    /// Writes an edit job to its session directory (abduction jobs live in
    /// the manifest).
    pub fn persist(&self, sessions_root: &Path) -> Result<()> {
        if self.kind == JobKind::Abduct {
            return Ok(());
        }
        let path = Self::path(sessions_root, &self.session_id, &self.id);
        std::fs::create_dir_all(path.parent().expect("job path has a parent"))?;
        atomic_write(&path, &serde_json::to_vec_pretty(self)?)
    }

    /// Edit jobs stored under a session directory.
    pub fn load_all(session_dir: &Path) -> Result<Vec<Job>> {
        let dir = session_dir.join(JOBS_DIR);
        let mut out = Vec::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            match serde_json::from_slice::<Job>(&bytes) {
                Ok(j) => out.push(j),
                Err(e) => log::warn!("skipping job file {}: {e}", path.display()),
            }
        }
        Ok(out)
    }
}
