//! Edit sessions on disk: the source image, prompts, abducted adapters,
//! checkpoints, loss traces and a JSON manifest recording every seed.
//!
//! ```text
//! <root>/<id>/manifest.json
//!            source.png
//!            u.adapter, delta.adapter, t_aux.adapter
//!            checkpoints/u_<iter>.adapter
//!            deltas/delta_eta_<eta>.adapter
//!            losses.csv
//!            edits/<hash>.png, edits/<hash>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abduction::{
    abduct_all, abduct_delta, smoothed, AbductionConfig, AbductionObserver, Stage, StageOutcome, StageSeeds,
};
use crate::error::{DacError, Result};
use crate::generator::{BackendDescriptor, GeneratorBackend};
use crate::imaging::Image;
use crate::lora::{load_adapter, save_adapter, LoraAdapter};
use crate::schedule::ScheduleConfig;
use crate::tensor_util::atomic_write;

pub const SESSION_FORMAT: &str = "dac-session";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SOURCE_FILE: &str = "source.png";
pub const U_FILE: &str = "u.adapter";
pub const DELTA_FILE: &str = "delta.adapter";
pub const T_AUX_FILE: &str = "t_aux.adapter";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DELTA_CACHE_DIR: &str = "deltas";
pub const EDITS_DIR: &str = "edits";
const LOCK_FILE: &str = "abduction.lock";

/// Smoothing window of the progress loss.
pub const PROGRESS_WINDOW: usize = 100;
/// Iterations between manifest progress writes.
const PROGRESS_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Created,
    Running,
    Done,
    Failed,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Created => "created",
            SessionStatus::Running => "running",
            SessionStatus::Done => "done",
            SessionStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub iteration: usize,
    pub total: usize,
    pub loss: f64,
    pub smoothed_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub round: usize,
    /// Annealing floor the stage ran with (Abduction-2 only).
    pub eta: Option<f64>,
    pub seeds: StageSeeds,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_smoothed_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub id: String,
    pub prompt: String,
    pub prompt_prime: String,
    pub config: AbductionConfig,
    pub backend: BackendDescriptor,
    pub schedule: ScheduleConfig,
    pub status: SessionStatus,
    pub error: Option<String>,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub source: String,
    pub source_hash: String,
    pub u: Option<String>,
    pub delta: Option<String>,
    pub t_aux: Option<String>,
    /// Stored Generator-adapter checkpoints by iteration.
    pub checkpoints: BTreeMap<usize, String>,
    /// Text-encoder adapters abducted for annealing floors other than
    /// `config.eta`, keyed by the formatted floor.
    pub delta_cache: BTreeMap<String, String>,
    pub losses: String,
    pub stages: Vec<StageRecord>,
    pub progress: Option<Progress>,
}

impl Manifest {
    /// Command line that reproduces this session's abduction.
    pub fn invocation(&self) -> String {
        let c = &self.config;
        let mut line = format!(
            "dac abduct --image {} --p {:?} --p-prime {:?} --eta {} --iters {} --lr {} --rank-u {} --rank-delta {} --batch-size {} --placement {} --seed {}",
            SOURCE_FILE,
            self.prompt,
            self.prompt_prime,
            c.eta,
            c.iterations,
            c.learning_rate,
            c.rank_u,
            c.rank_delta,
            c.batch_size,
            c.placement.as_str(),
            c.seed
        );
        let ckpts: Vec<String> = c.checkpoint_iters.iter().map(|i| i.to_string()).collect();
        line.push_str(&format!(" --checkpoints {}", if ckpts.is_empty() { "none".into() } else { ckpts.join(",") }));
        if c.with_t_aux {
            line.push_str(&format!(
                " --with-t-aux --rank-t-aux {} --t-aux-rounds {}",
                c.rank_t_aux, c.t_aux_rounds
            ));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: Stage,
    pub round: usize,
    pub iteration: usize,
    pub loss: f64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn fresh_id(prompt: &str, prompt_prime: &str, source_hash: &str) -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut h = Sha256::new();
    for part in [prompt, prompt_prime, source_hash] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    h.update(nanos.to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    h.update(COUNTER.fetch_add(1, Ordering::Relaxed).to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn eta_key(eta: f64) -> String {
    format!("{eta:.4}")
}

/// Directory of sessions.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Validates the inputs against `backend` and writes a new session in the
    /// `created` state. The image is resized to the backend's resolution.
    pub fn create(
        &self,
        backend: &dyn GeneratorBackend,
        source: &Image,
        prompt: &str,
        prompt_prime: &str,
        config: AbductionConfig,
    ) -> Result<EditSession> {
        config.validate()?;
        for (name, p) in [("p", prompt), ("p_prime", prompt_prime)] {
            if p.trim().is_empty() {
                return Err(DacError::Validation(format!("prompt `{name}` is empty")));
            }
            backend.tokenizer().encode(p)?;
        }
        let size = backend.image_size();
        let source = if source.width() == size && source.height() == size {
            source.quantized()
        } else {
            Image::from_encoded(&source.to_png()?, Some(size))?
        };
        let png = source.to_png()?;
        let source_hash = source.content_hash()?;
        let id = fresh_id(prompt, prompt_prime, &source_hash);
        let dir = self.root.join(&id);
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        fs::create_dir_all(dir.join(EDITS_DIR))?;
        atomic_write(&dir.join(SOURCE_FILE), &png)?;
        let now = now_unix();
        let manifest = Manifest {
            format: SESSION_FORMAT.into(),
            id,
            prompt: prompt.to_string(),
            prompt_prime: prompt_prime.to_string(),
            config,
            backend: backend.descriptor()?,
            schedule: backend.schedule().config().clone(),
            status: SessionStatus::Created,
            error: None,
            created_unix: now,
            updated_unix: now,
            source: SOURCE_FILE.into(),
            source_hash,
            u: None,
            delta: None,
            t_aux: None,
            checkpoints: BTreeMap::new(),
            delta_cache: BTreeMap::new(),
            losses: LOSSES_FILE.into(),
            stages: Vec::new(),
            progress: None,
        };
        let session = EditSession { dir, manifest, source };
        session.save_manifest()?;
        Ok(session)
    }

    pub fn open(&self, id: &str) -> Result<EditSession> {
        if !valid_id(id) {
            return Err(DacError::NotFound(format!("session `{id}`")));
        }
        let dir = self.root.join(id);
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(DacError::NotFound(format!("session `{id}`")));
        }
        EditSession::open(&dir)
    }

    /// Manifests of every readable session, oldest first.
    pub fn list(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            let file = path.join(MANIFEST_FILE);
            if file.is_file() {
                match read_manifest(&file) {
                    Ok(m) => out.push(m),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
        out.sort_by(|a, b| (a.created_unix, &a.id).cmp(&(b.created_unix, &b.id)));
        Ok(out)
    }

    /// Marks sessions left `running` by a dead process as failed and clears
    /// their locks. Only call when no other process uses the store.
    pub fn recover(&self) -> Result<Vec<String>> {
        let mut recovered = Vec::new();
        for m in self.list()? {
            if m.status == SessionStatus::Running {
                let mut s = self.open(&m.id)?;
                let _ = fs::remove_file(s.dir.join(LOCK_FILE));
                s.manifest.status = SessionStatus::Failed;
                s.manifest.error = Some("interrupted before completion".into());
                s.save_manifest()?;
                recovered.push(m.id);
            }
        }
        Ok(recovered)
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| DacError::load(path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| DacError::load(path, e))?;
    if m.format != SESSION_FORMAT {
        return Err(DacError::load(path, format!("unexpected format `{}`", m.format)));
    }
    Ok(m)
}

/// Exclusive claim on a session's training; released on drop.
struct SessionLock(PathBuf);

impl SessionLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DacError::State(
                "another abduction holds this session".into(),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone)]
pub struct EditSession {
    dir: PathBuf,
    manifest: Manifest,
    source: Image,
}

impl EditSession {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let source = Image::load(&dir.join(&manifest.source), None)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            source,
        })
    }

    /// Re-reads the manifest from disk.
    pub fn reload(&mut self) -> Result<()> {
        self.manifest = read_manifest(&self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn source(&self) -> &Image {
        &self.source
    }

    pub fn status(&self) -> SessionStatus {
        self.manifest.status
    }

    pub fn save_manifest(&self) -> Result<()> {
        atomic_write(
            &self.dir.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&self.manifest)?,
        )
    }

    fn load_file(&self, file: Option<&String>, what: &str, device: &Device) -> Result<LoraAdapter> {
        match file {
            Some(f) => load_adapter(&self.dir.join(f), device),
            None => Err(DacError::State(format!("session {} has no {what} adapter", self.id()))),
        }
    }

    pub fn load_u(&self, device: &Device) -> Result<LoraAdapter> {
        self.load_file(self.manifest.u.as_ref(), "generator", device)
    }

    pub fn load_delta(&self, device: &Device) -> Result<LoraAdapter> {
        self.load_file(self.manifest.delta.as_ref(), "text-encoder", device)
    }

    pub fn load_t_aux(&self, device: &Device) -> Result<Option<LoraAdapter>> {
        match &self.manifest.t_aux {
            Some(f) => Ok(Some(load_adapter(&self.dir.join(f), device)?)),
            None => Ok(None),
        }
    }

    pub fn checkpoint_iters(&self) -> Vec<usize> {
        self.manifest.checkpoints.keys().copied().collect()
    }

    pub fn load_checkpoint(&self, iteration: usize, device: &Device) -> Result<LoraAdapter> {
        match self.manifest.checkpoints.get(&iteration) {
            Some(f) => load_adapter(&self.dir.join(f), device),
            None => Err(DacError::State(format!("no checkpoint at iteration {iteration}"))),
        }
    }

    pub fn losses(&self) -> Result<Vec<LossRow>> {
        let path = self.dir.join(&self.manifest.losses);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut rows = Vec::new();
        for r in csv::Reader::from_path(&path)?.deserialize() {
            rows.push(r?);
        }
        Ok(rows)
    }

    /// The backend must be the one the session was created against.
    pub fn check_backend(&self, backend: &dyn GeneratorBackend) -> Result<()> {
        let d = backend.descriptor()?;
        if d.host_checksum != self.manifest.backend.host_checksum {
            return Err(DacError::State(format!(
                "session {} was created against a different backend ({} vs {})",
                self.id(),
                &self.manifest.backend.host_checksum[..12.min(self.manifest.backend.host_checksum.len())],
                &d.host_checksum[..12.min(d.host_checksum.len())]
            )));
        }
        Ok(())
    }

    /// Runs Abduction-1 (with the auxiliary adapter if configured) and
    /// Abduction-2, persisting each adapter as soon as its stage completes.
    /// On failure the session is marked `failed`; checkpoints written so far
    /// are kept.
    pub fn abduct(&mut self, backend: &dyn GeneratorBackend, observer: &mut dyn AbductionObserver) -> Result<()> {
        match self.manifest.status {
            SessionStatus::Done => return Err(DacError::State(format!("session {} is already complete", self.id()))),
            SessionStatus::Running => {
                return Err(DacError::State(format!("session {} is already running", self.id())))
            }
            SessionStatus::Created | SessionStatus::Failed => {}
        }
        self.check_backend(backend)?;
        let _lock = SessionLock::acquire(&self.dir)?;
        self.manifest.status = SessionStatus::Running;
        self.manifest.error = None;
        self.manifest.stages.clear();
        self.manifest.checkpoints.clear();
        self.manifest.progress = None;
        self.manifest.u = None;
        self.manifest.delta = None;
        self.manifest.t_aux = None;
        self.touch_and_save()?;

        let result = (|| -> Result<()> {
            let x0 = backend.encode_image(&self.source)?;
            let cfg = self.manifest.config.clone();
            let (prompt, prompt_prime) = (self.manifest.prompt.clone(), self.manifest.prompt_prime.clone());
            let mut recorder = Recorder {
                session: self,
                inner: observer,
                rows: Vec::new(),
                current: Vec::new(),
            };
            let outcome = abduct_all(
                backend,
                &x0,
                &prompt,
                &prompt_prime,
                &cfg,
                &mut recorder,
            );
            recorder.flush_losses()?;
            outcome.map(|_| ())
        })();

        match result {
            Ok(()) => {
                self.manifest.status = SessionStatus::Done;
                self.touch_and_save()
            }
            Err(e) => {
                self.manifest.status = SessionStatus::Failed;
                self.manifest.error = Some(e.to_string());
                self.touch_and_save()?;
                Err(e)
            }
        }
    }

    fn touch_and_save(&mut self) -> Result<()> {
        self.manifest.updated_unix = now_unix();
        self.save_manifest()
    }

    /// The text-encoder adapter abducted under annealing floor `eta`: the
    /// session's own for its configured floor, otherwise a cached or freshly
    /// abducted one (same seeds, only the floor differs).
    pub fn delta_for_eta(&mut self, backend: &dyn GeneratorBackend, eta: f64) -> Result<LoraAdapter> {
        self.require_done()?;
        let device = backend.device().clone();
        if eta_key(eta) == eta_key(self.manifest.config.eta) {
            return self.load_delta(&device);
        }
        let key = eta_key(eta);
        if let Some(f) = self.manifest.delta_cache.get(&key) {
            return load_adapter(&self.dir.join(f), &device);
        }
        self.check_backend(backend)?;
        let _lock = SessionLock::acquire(&self.dir)?;
        let mut cfg = self.manifest.config.clone();
        cfg.eta = eta;
        let u = self.load_u(&device)?;
        let t_aux = self.load_t_aux(&device)?;
        let x0 = backend.encode_image(&self.source)?;
        let outcome = abduct_delta(
            backend,
            &x0,
            &self.manifest.prompt_prime,
            &u,
            t_aux.as_ref(),
            &cfg,
            &mut (),
        )?;
        let adapter = outcome.adapter.clone().with_session(self.id());
        let rel = format!("{DELTA_CACHE_DIR}/delta_eta_{key}.adapter");
        fs::create_dir_all(self.dir.join(DELTA_CACHE_DIR))?;
        save_adapter(&adapter, &self.dir.join(&rel))?;
        self.manifest.delta_cache.insert(key, rel);
        self.manifest.stages.push(stage_record(&outcome, 0, Some(eta)));
        self.touch_and_save()?;
        Ok(adapter)
    }

    pub fn require_done(&self) -> Result<()> {
        if self.manifest.status != SessionStatus::Done {
            return Err(DacError::State(format!(
                "session {} is {}, not done",
                self.id(),
                self.manifest.status.as_str()
            )));
        }
        Ok(())
    }
}

fn stage_record(outcome: &StageOutcome, round: usize, eta: Option<f64>) -> StageRecord {
    let sm = smoothed(&outcome.losses, PROGRESS_WINDOW);
    StageRecord {
        stage: outcome.stage,
        round,
        eta,
        seeds: outcome.seeds,
        iterations: outcome.losses.len(),
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        final_smoothed_loss: sm.last().copied().unwrap_or(f64::NAN),
    }
}

/// Persists trainer events into the session directory, then forwards them.
struct Recorder<'s, 'o> {
    session: &'s mut EditSession,
    inner: &'o mut dyn AbductionObserver,
    rows: Vec<LossRow>,
    /// Losses of the running stage, for the smoothed progress value.
    current: Vec<f64>,
}

impl Recorder<'_, '_> {
    fn flush_losses(&self) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| DacError::Io(e.into_error()))?;
        atomic_write(&self.session.dir.join(&self.session.manifest.losses), &bytes)
    }

    fn round_of(&self, stage: Stage) -> usize {
        self.session.manifest.stages.iter().filter(|s| s.stage == stage).count()
    }
}

impl AbductionObserver for Recorder<'_, '_> {
    fn on_iteration(&mut self, stage: Stage, iteration: usize, total: usize, loss: f64) -> Result<()> {
        if iteration == 1 {
            self.current.clear();
        }
        self.current.push(loss);
        let round = self.round_of(stage);
        self.rows.push(LossRow {
            stage,
            round,
            iteration,
            loss,
        });
        if iteration.is_multiple_of(PROGRESS_EVERY) || iteration == total {
            let w = PROGRESS_WINDOW.min(self.current.len());
            let tail = &self.current[self.current.len() - w..];
            self.session.manifest.progress = Some(Progress {
                stage,
                iteration,
                total,
                loss,
                smoothed_loss: tail.iter().sum::<f64>() / w as f64,
            });
            self.session.touch_and_save()?;
        }
        self.inner.on_iteration(stage, iteration, total, loss)
    }

    fn on_checkpoint(&mut self, stage: Stage, iteration: usize, adapter: &LoraAdapter) -> Result<()> {
        if stage == Stage::U && self.round_of(Stage::U) == 0 {
            let rel = format!("{CHECKPOINT_DIR}/u_{iteration}.adapter");
            let adapter = adapter.clone().with_session(self.session.id());
            save_adapter(&adapter, &self.session.dir.join(&rel))?;
            self.session.manifest.checkpoints.insert(iteration, rel);
            self.session.touch_and_save()?;
        }
        self.inner.on_checkpoint(stage, iteration, adapter)
    }

    fn on_stage_complete(&mut self, outcome: &StageOutcome, round: usize) -> Result<()> {
        let file = match outcome.stage {
            Stage::U => U_FILE,
            Stage::Delta => DELTA_FILE,
            Stage::TAux => T_AUX_FILE,
        };
        let adapter = outcome.adapter.clone().with_session(self.session.id());
        save_adapter(&adapter, &self.session.dir.join(file))?;
        let eta = (outcome.stage == Stage::Delta).then_some(self.session.manifest.config.eta);
        let m = &mut self.session.manifest;
        match outcome.stage {
            Stage::U => m.u = Some(file.into()),
            Stage::Delta => m.delta = Some(file.into()),
            Stage::TAux => m.t_aux = Some(file.into()),
        }
        m.stages.push(stage_record(outcome, round, eta));
        self.flush_losses()?;
        self.session.touch_and_save()?;
        self.inner.on_stage_complete(outcome, round)
    }
}

/// Stacks the per-row loss values of one stage and round.
pub fn stage_losses(rows: &[LossRow], stage: Stage, round: usize) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.stage == stage && r.round == round)
        .map(|r| r.loss)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abduction::Stage;
    use crate::testing::{disc_image, tiny_backend};
    use candle_core::DType;

    fn quick() -> AbductionConfig {
        AbductionConfig {
            iterations: 4,
            learning_rate: 1e-3,
            rank_u: 4,
            rank_delta: 2,
            checkpoint_iters: [2, 4, 8].into_iter().collect(),
            ..AbductionConfig::default()
        }
    }

    #[test]
    fn create_validates_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let img = disc_image(8);
        assert!(matches!(
            store.create(&b, &img, "a red circle", " ", quick()),
            Err(DacError::Validation(_))
        ));
        assert!(store.create(&b, &img, "a red zebra", "a blue circle", quick()).is_err());
        let bad = AbductionConfig { eta: 1.5, ..quick() };
        assert!(store.create(&b, &img, "a red circle", "a blue circle", bad).is_err());
        assert!(store.list().unwrap().is_empty());
    }

    #[test]
    fn abduction_persists_adapters_checkpoints_and_losses() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        assert_eq!(s.status(), SessionStatus::Created);
        assert!(s.load_u(b.device()).is_err());
        s.abduct(&b, &mut ()).unwrap();
        let s = store.open(s.id()).unwrap();
        assert_eq!(s.status(), SessionStatus::Done);
        assert_eq!(s.checkpoint_iters(), vec![2, 4]);
        assert!(s.dir().join("checkpoints/u_2.adapter").is_file());
        assert!(s.load_u(b.device()).is_ok() && s.load_delta(b.device()).is_ok());
        assert!(s.load_t_aux(b.device()).unwrap().is_none());
        let rows = s.losses().unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(crate::session::stage_losses(&rows, Stage::Delta, 0).len(), 4);
        let m = s.manifest();
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.stages[1].eta, Some(0.6));
        assert_eq!(m.progress.as_ref().unwrap().iteration, 4);
        assert!(m.invocation().contains("--iters 4"));
        assert_eq!(
            s.load_delta(b.device()).unwrap().meta().created_from_session.as_deref(),
            Some(s.id())
        );
        let mut again = store.open(s.id()).unwrap();
        assert!(matches!(again.abduct(&b, &mut ()), Err(DacError::State(_))));
    }

    #[test]
    fn failures_are_recorded_and_retryable() {
        struct Boom;
        impl AbductionObserver for Boom {
            fn on_iteration(&mut self, stage: Stage, it: usize, _: usize, _: f64) -> Result<()> {
                if stage == Stage::Delta && it == 2 {
                    return Err(DacError::State("stop".into()));
                }
                Ok(())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        assert!(s.abduct(&b, &mut Boom).is_err());
        let failed = store.open(s.id()).unwrap();
        assert_eq!(failed.status(), SessionStatus::Failed);
        assert!(failed.manifest().u.is_some() && failed.manifest().delta.is_none());
        assert_eq!(failed.checkpoint_iters(), vec![2, 4]);
        assert!(!failed.dir().join(LOCK_FILE).exists());
        s.abduct(&b, &mut ()).unwrap();
        assert_eq!(s.status(), SessionStatus::Done);
    }

    #[test]
    fn concurrent_abduction_is_rejected_by_the_lock() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        let _held = SessionLock::acquire(s.dir()).unwrap();
        assert!(matches!(s.abduct(&b, &mut ()), Err(DacError::State(_))));
    }

    #[test]
    fn recover_marks_interrupted_sessions_failed() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        s.manifest.status = SessionStatus::Running;
        s.save_manifest().unwrap();
        std::fs::write(s.dir().join(LOCK_FILE), b"").unwrap();
        assert_eq!(store.recover().unwrap(), vec![s.id().to_string()]);
        let s = store.open(s.id()).unwrap();
        assert_eq!(s.status(), SessionStatus::Failed);
        assert!(!s.dir().join(LOCK_FILE).exists());
    }

    #[test]
    fn ids_are_unique_and_paths_are_guarded() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let img = disc_image(8);
        let a = store.create(&b, &img, "a red circle", "a blue circle", quick()).unwrap();
        let c = store.create(&b, &img, "a red circle", "a blue circle", quick()).unwrap();
        assert_ne!(a.id(), c.id());
        assert_eq!(store.list().unwrap().len(), 2);
        assert!(matches!(store.open("../etc"), Err(DacError::NotFound(_))));
        assert!(matches!(store.open("missing"), Err(DacError::NotFound(_))));
    }

    #[test]
    fn sessions_reject_a_different_backend() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let other = crate::generator::ToyBackend::random(
            &crate::generator::ToyArchitecture::tiny(),
            b.schedule().clone(),
            1,
            DType::F32,
            b.device(),
        )
        .unwrap();
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        assert!(matches!(s.abduct(&other, &mut ()), Err(DacError::State(_))));
    }

    #[test]
    fn other_etas_get_cached_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store.create(&b, &disc_image(8), "a red circle", "a blue circle", quick()).unwrap();
        assert!(matches!(s.delta_for_eta(&b, 0.4), Err(DacError::State(_))));
        s.abduct(&b, &mut ()).unwrap();
        let own = s.delta_for_eta(&b, 0.6).unwrap();
        assert_eq!(own.checksum().unwrap(), s.load_delta(b.device()).unwrap().checksum().unwrap());
        let fresh = s.delta_for_eta(&b, 0.4).unwrap();
        assert_eq!(s.manifest().delta_cache.len(), 1);
        let cached = store.open(s.id()).unwrap().delta_for_eta(&b, 0.4).unwrap();
        assert_eq!(fresh.checksum().unwrap(), cached.checksum().unwrap());
        assert_ne!(fresh.checksum().unwrap(), own.checksum().unwrap());
    }
}
