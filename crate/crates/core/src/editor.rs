//! Action and prediction: the text-encoder adapter is applied at `-β`, the
//! generator adapter is annealed along the sampling trajectory, and DDIM
//! sampling from a seeded `x_T` under `P'` yields the edit.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DacError, Result};
use crate::eval::{AlignmentScores, Metrics};
use crate::generator::{initial_noise, sample, GammaMode, GeneratorBackend};
use crate::imaging::Image;
use crate::lora::{check_beta, check_eta, AdapterStack, LoraAdapter};
use crate::session::{EditSession, DELTA_FILE, EDITS_DIR};
use crate::tensor_util::atomic_write;

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_SEEDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditRequest {
    pub beta: f64,
    /// Annealing floor; defaults to the session's. Other floors need their
    /// own text-encoder adapter, abducted on first use.
    pub eta_override: Option<f64>,
    pub seed: u64,
    pub steps: usize,
    /// Apply the auxiliary text adapter when the session has one.
    pub use_t_aux: bool,
    /// Scale the generator adapter by the annealing schedule while sampling
    /// (the schedule it saw during Abduction-2); otherwise at full weight.
    pub anneal: bool,
}

impl Default for EditRequest {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eta_override: None,
            seed: 0,
            steps: DEFAULT_STEPS,
            use_t_aux: true,
            anneal: true,
        }
    }
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if let Some(eta) = self.eta_override {
            check_eta(eta)?;
        }
        if self.steps == 0 {
            return Err(DacError::range("steps", "at least one sampling step is required"));
        }
        Ok(())
    }
}

/// The coordinates that reproduce an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEcho {
    pub session_id: String,
    pub prompt_prime: String,
    pub beta: f64,
    pub eta: f64,
    pub seed: u64,
    pub steps: usize,
    /// Whether the auxiliary text adapter was applied.
    pub use_t_aux: bool,
    pub anneal: bool,
    /// Session file of the text-encoder adapter used.
    pub delta: String,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub image: Image,
    pub echo: EditEcho,
    pub scores: Option<AlignmentScores>,
    /// Content hash of the PNG encoding.
    pub hash: String,
}

/// Everything prediction reads from a finished session, loaded once.
#[derive(Debug, Clone)]
pub struct EditContext {
    pub session_id: String,
    pub prompt_prime: String,
    pub u: LoraAdapter,
    pub delta: LoraAdapter,
    pub t_aux: Option<LoraAdapter>,
    pub eta: f64,
    pub delta_source: String,
}

impl EditContext {
    /// Loads the adapters of a finished session; with `eta` other than the
    /// session's, the matching text adapter is fetched or abducted.
    pub fn load(session: &mut EditSession, backend: &dyn GeneratorBackend, eta: Option<f64>) -> Result<Self> {
        session.require_done()?;
        session.check_backend(backend)?;
        let dev = backend.device().clone();
        let session_eta = session.manifest().config.eta;
        let eta = eta.unwrap_or(session_eta);
        check_eta(eta)?;
        let delta = session.delta_for_eta(backend, eta)?;
        let delta_source = session
            .manifest()
            .delta_cache
            .get(&crate::session::eta_key(eta))
            .cloned()
            .unwrap_or_else(|| session.manifest().delta.clone().unwrap_or_else(|| DELTA_FILE.into()));
        Ok(Self {
            session_id: session.id().to_string(),
            prompt_prime: session.manifest().prompt_prime.clone(),
            u: session.load_u(&dev)?,
            delta,
            t_aux: session.load_t_aux(&dev)?,
            eta,
            delta_source,
        })
    }

    fn text_stack(&self, delta_scale: f64, use_t_aux: bool) -> AdapterStack<'_> {
        let mut stack = AdapterStack::empty();
        if use_t_aux {
            if let Some(t) = &self.t_aux {
                stack.push(t, 1.0);
            }
        }
        stack.push(&self.delta, delta_scale);
        stack
    }

    fn gamma(&self, anneal: bool) -> GammaMode {
        if anneal {
            GammaMode::Annealed(self.eta)
        } else {
            GammaMode::Constant(1.0)
        }
    }
}

/// `P'` features with the text adapter at `-β` (and the auxiliary adapter at
/// unit weight). Evaluated once per request; independent of the timestep.
pub fn edit_text_features(
    backend: &dyn GeneratorBackend,
    ctx: &EditContext,
    beta: f64,
    use_t_aux: bool,
) -> Result<Tensor> {
    check_beta(beta)?;
    backend.encode_text_with(&ctx.prompt_prime, &ctx.text_stack(-beta, use_t_aux))
}

fn finish(image: Image, echo: EditEcho) -> Result<EditResult> {
    let hash = image.content_hash()?;
    Ok(EditResult {
        image,
        echo,
        scores: None,
        hash,
    })
}

fn sample_one(
    backend: &dyn GeneratorBackend,
    text: &Tensor,
    u: Option<&LoraAdapter>,
    gamma: GammaMode,
    seed: u64,
    steps: usize,
) -> Result<Image> {
    let x_t = initial_noise(backend, 1, seed)?;
    let x0 = sample(backend, text, &x_t, steps, u, gamma)?;
    let mut imgs = backend.decode_image(&x0)?;
    Ok(imgs.remove(0))
}

pub fn predict_edit(backend: &dyn GeneratorBackend, ctx: &EditContext, req: &EditRequest) -> Result<EditResult> {
    req.validate()?;
    if let Some(eta) = req.eta_override {
        if crate::session::eta_key(eta) != crate::session::eta_key(ctx.eta) {
            return Err(DacError::State(format!(
                "context was loaded for eta {}, request asks for {eta}",
                ctx.eta
            )));
        }
    }
    let echo = echo_for(ctx, req);
    let text = edit_text_features(backend, ctx, req.beta, echo.use_t_aux)?;
    let image = sample_one(backend, &text, Some(&ctx.u), ctx.gamma(req.anneal), req.seed, req.steps)?;
    finish(image, echo)
}

/// The Abduction-2 reconstruction `G(P', U annealed, +Δ)` from `seed`.
pub fn reconstruct(
    backend: &dyn GeneratorBackend,
    ctx: &EditContext,
    seed: u64,
    steps: usize,
    use_t_aux: bool,
) -> Result<Image> {
    let stack = ctx.text_stack(1.0, use_t_aux && ctx.t_aux.is_some());
    let text = backend.encode_text_with(&ctx.prompt_prime, &stack)?;
    sample_one(backend, &text, Some(&ctx.u), ctx.gamma(true), seed, steps)
}

/// Editing by prompt alone: `G(prompt, U)` with the unmodified text encoder.
pub fn prompt_swap(
    backend: &dyn GeneratorBackend,
    prompt: &str,
    u: Option<&LoraAdapter>,
    gamma: GammaMode,
    seed: u64,
    steps: usize,
) -> Result<Image> {
    let text = backend.encode_text_with(prompt, &AdapterStack::empty())?;
    sample_one(backend, &text, u, gamma, seed, steps)
}

/// Reconstruction of the source prompt `G(P, U, T_aux)` from `seed`, the
/// fidelity target of Abduction-1.
pub fn reconstruct_source(
    backend: &dyn GeneratorBackend,
    prompt: &str,
    u: &LoraAdapter,
    t_aux: Option<&LoraAdapter>,
    seed: u64,
    steps: usize,
) -> Result<Image> {
    let mut stack = AdapterStack::empty();
    if let Some(t) = t_aux {
        stack.push(t, 1.0);
    }
    let text = backend.encode_text_with(prompt, &stack)?;
    sample_one(backend, &text, Some(u), GammaMode::Constant(1.0), seed, steps)
}

/// One edit per β from a shared `x_T`, ordered by β (stable for duplicates).
pub fn sweep_beta(
    backend: &dyn GeneratorBackend,
    ctx: &EditContext,
    betas: &[f64],
    base: &EditRequest,
) -> Result<Vec<EditResult>> {
    for &b in betas {
        check_beta(b)?;
    }
    let mut order: Vec<f64> = betas.to_vec();
    order.sort_by(|a, b| a.total_cmp(b));
    order
        .into_iter()
        .map(|beta| predict_edit(backend, ctx, &EditRequest { beta, ..base.clone() }))
        .collect()
}

/// `n` edits from seeds `seed, seed + 1, ...`.
#[allow(clippy::too_many_arguments)]
pub fn multi_seed(
    backend: &dyn GeneratorBackend,
    ctx: &EditContext,
    beta: f64,
    seed: u64,
    n: usize,
    steps: usize,
    use_t_aux: bool,
    anneal: bool,
) -> Result<Vec<EditResult>> {
    if n == 0 {
        return Err(DacError::range("n_seeds", "at least one seed is required"));
    }
    (0..n as u64)
        .map(|i| {
            predict_edit(
                backend,
                ctx,
                &EditRequest {
                    beta,
                    eta_override: None,
                    seed: seed.wrapping_add(i),
                    steps,
                    use_t_aux,
                    anneal,
                },
            )
        })
        .collect()
}

/// One edit per annealing floor, each with its own text adapter (cached in
/// the session after the first abduction).
pub fn sweep_eta(
    backend: &dyn GeneratorBackend,
    session: &mut EditSession,
    etas: &[f64],
    base: &EditRequest,
) -> Result<Vec<EditResult>> {
    for &e in etas {
        check_eta(e)?;
    }
    let mut out = Vec::with_capacity(etas.len());
    for &eta in etas {
        let ctx = EditContext::load(session, backend, Some(eta))?;
        out.push(predict_edit(
            backend,
            &ctx,
            &EditRequest {
                eta_override: Some(eta),
                ..base.clone()
            },
        )?);
    }
    Ok(out)
}

/// Fills in alignment scores against the session source and `P'`.
pub fn score_result(result: &mut EditResult, source: &Image, metrics: &Metrics) -> Result<()> {
    result.scores = Some(metrics.score(source, &result.image, &result.echo.prompt_prime)?);
    Ok(())
}

/// `edits/<hash>.json`: every request echo that produced the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub hash: String,
    pub echoes: Vec<EditEcho>,
    pub scores: Option<AlignmentScores>,
}

fn edits_dir(session_dir: &Path) -> PathBuf {
    session_dir.join(EDITS_DIR)
}

pub fn valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.chars().all(|c| c.is_ascii_hexdigit())
}

/// Writes `edits/<hash>.png` and adds the echo to `edits/<hash>.json`.
pub fn save_result(session_dir: &Path, result: &EditResult) -> Result<(PathBuf, PathBuf)> {
    let dir = edits_dir(session_dir);
    fs::create_dir_all(&dir)?;
    let png = dir.join(format!("{}.png", result.hash));
    let json = dir.join(format!("{}.json", result.hash));
    if !png.exists() {
        atomic_write(&png, &result.image.to_png()?)?;
    }
    let mut record = match fs::read(&json) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| DacError::load(&json, e))?,
        Err(_) => EditRecord {
            hash: result.hash.clone(),
            echoes: Vec::new(),
            scores: None,
        },
    };
    if !record.echoes.contains(&result.echo) {
        record.echoes.push(result.echo.clone());
    }
    if record.scores.is_none() {
        record.scores = result.scores.clone();
    }
    atomic_write(&json, &serde_json::to_vec_pretty(&record)?)?;
    Ok((png, json))
}

pub fn list_edits(session_dir: &Path) -> Result<Vec<EditRecord>> {
    let dir = edits_dir(session_dir);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let bytes = fs::read(&path)?;
            out.push(serde_json::from_slice::<EditRecord>(&bytes).map_err(|e| DacError::load(&path, e))?);
        }
    }
    out.sort_by(|a, b| a.hash.cmp(&b.hash));
    Ok(out)
}

/// A stored edit produced by exactly this echo, if any.
pub fn find_cached(session_dir: &Path, echo: &EditEcho) -> Result<Option<EditRecord>> {
    Ok(list_edits(session_dir)?.into_iter().find(|r| r.echoes.contains(echo)))
}

/// Hash identifying a request echo (for idempotent request handling).
pub fn echo_key(echo: &EditEcho) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(echo)?)))
}

/// The echo a request would produce against `ctx`, without sampling.
pub fn echo_for(ctx: &EditContext, req: &EditRequest) -> EditEcho {
    EditEcho {
        session_id: ctx.session_id.clone(),
        prompt_prime: ctx.prompt_prime.clone(),
        beta: req.beta,
        eta: ctx.eta,
        seed: req.seed,
        steps: req.steps,
        use_t_aux: req.use_t_aux && ctx.t_aux.is_some(),
        anneal: req.anneal,
        delta: ctx.delta_source.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::SessionStore;
    use crate::testing::{done_session, quick_config, tiny_backend};
    use crate::tensor_util::tensor_bytes;
    use candle_core::DType;

    fn setup(cfg: crate::abduction::AbductionConfig) -> (tempfile::TempDir, crate::generator::ToyBackend, EditSession) {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let s = done_session(&store, &b, cfg);
        (dir, b, s)
    }

    fn steps(n: usize) -> EditRequest {
        EditRequest {
            steps: n,
            ..EditRequest::default()
        }
    }

    #[test]
    fn request_defaults_and_validation() {
        let r = EditRequest::default();
        assert_eq!((r.beta, r.steps, r.anneal), (1.0, 30, true));
        assert!(EditRequest { beta: 1.5, ..r.clone() }.validate().is_err());
        assert!(EditRequest { eta_override: Some(0.0), ..r.clone() }.validate().is_err());
        assert!(EditRequest { steps: 0, ..r.clone() }.validate().is_err());
        let parsed: EditRequest = serde_json::from_str(r#"{"beta": -0.5}"#).unwrap();
        assert_eq!(parsed, EditRequest { beta: -0.5, ..r });
    }

    #[test]
    fn incomplete_sessions_have_no_context() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let b = tiny_backend(DType::F32);
        let mut s = store
            .create(&b, &crate::testing::disc_image(8), "a red circle", "a blue circle", quick_config())
            .unwrap();
        assert!(matches!(EditContext::load(&mut s, &b, None), Err(DacError::State(_))));
    }

    #[test]
    fn beta_endpoints() {
        let (_d, b, mut s) = setup(quick_config());
        let ctx = EditContext::load(&mut s, &b, None).unwrap();
        let rec = reconstruct(&b, &ctx, 3, 5, true).unwrap();
        let minus = predict_edit(&b, &ctx, &EditRequest { beta: -1.0, seed: 3, ..steps(5) }).unwrap();
        assert_eq!(minus.image, rec);
        assert_eq!(minus.image.mse(&rec).unwrap(), 0.0);
        let zero = predict_edit(&b, &ctx, &EditRequest { beta: 0.0, seed: 3, ..steps(5) }).unwrap();
        let swap = prompt_swap(&b, "a blue circle", Some(&ctx.u), GammaMode::Annealed(ctx.eta), 3, 5).unwrap();
        assert_eq!(zero.image, swap);
        // Full edit through the negated adapter at -1 equals beta = +1.
        let plus = edit_text_features(&b, &ctx, 1.0, false).unwrap();
        let neg = EditContext {
            delta: crate::lora::negate(&ctx.delta).unwrap(),
            ..ctx.clone()
        };
        let via_neg = edit_text_features(&b, &neg, -1.0, false).unwrap();
        assert_eq!(tensor_bytes(&plus).unwrap(), tensor_bytes(&via_neg).unwrap());
    }

    #[test]
    fn edits_are_deterministic_and_echo_their_request() {
        let (_d, b, mut s) = setup(quick_config());
        let ctx = EditContext::load(&mut s, &b, None).unwrap();
        let req = EditRequest { beta: 0.5, seed: 11, ..steps(4) };
        let (r1, r2) = (predict_edit(&b, &ctx, &req).unwrap(), predict_edit(&b, &ctx, &req).unwrap());
        assert_eq!(r1.hash, r2.hash);
        assert_eq!(r1.image.to_png().unwrap(), r2.image.to_png().unwrap());
        assert_eq!((r1.echo.beta, r1.echo.seed, r1.echo.steps, r1.echo.eta), (0.5, 11, 4, 0.6));
        assert!(!r1.echo.use_t_aux);
        assert_eq!(r1.echo, echo_for(&ctx, &req));
    }

    #[test]
    fn text_features_do_not_change_along_the_trajectory() {
        struct Recording<'a> {
            inner: &'a crate::generator::ToyBackend,
            seen: std::sync::Mutex<Vec<Vec<u8>>>,
        }
        // Only the methods sampling touches are forwarded; the rest are unused.
        impl GeneratorBackend for Recording<'_> {
            fn kind(&self) -> &str { self.inner.kind() }
            fn schedule(&self) -> &crate::schedule::NoiseSchedule { self.inner.schedule() }
            fn device(&self) -> &candle_core::Device { self.inner.device() }
            fn dtype(&self) -> DType { self.inner.dtype() }
            fn image_size(&self) -> usize { self.inner.image_size() }
            fn latent_shape(&self) -> (usize, usize, usize) { self.inner.latent_shape() }
            fn host_layers(&self, t: crate::lora::AdapterTarget) -> Vec<crate::lora::HostLayer> { self.inner.host_layers(t) }
            fn tokenizer(&self) -> &crate::generator::Tokenizer { self.inner.tokenizer() }
            fn encode_text_with(&self, p: &str, a: &AdapterStack) -> Result<Tensor> { self.inner.encode_text_with(p, a) }
            fn encode_unconditional(&self, a: &AdapterStack) -> Result<Tensor> { self.inner.encode_unconditional(a) }
            fn predict_noise_with(&self, x: &Tensor, ts: &[usize], text: &Tensor, a: &AdapterStack) -> Result<Tensor> {
                self.seen.lock().unwrap().push(tensor_bytes(text)?);
                self.inner.predict_noise_with(x, ts, text, a)
            }
            fn encode_image(&self, i: &Image) -> Result<Tensor> { self.inner.encode_image(i) }
            fn decode_image(&self, x: &Tensor) -> Result<Vec<Image>> { self.inner.decode_image(x) }
            fn image_features(&self, i: &Image) -> Result<Tensor> { self.inner.image_features(i) }
            fn host_checksum(&self) -> Result<String> { self.inner.host_checksum() }
        }
        let (_d, b, mut s) = setup(quick_config());
        let ctx = EditContext::load(&mut s, &b, None).unwrap();
        let rec = Recording { inner: &b, seen: Default::default() };
        predict_edit(&rec, &ctx, &steps(6)).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        assert_eq!(seen.len(), 6);
        assert!(seen.iter().all(|t| *t == seen[0]));
    }

    #[test]
    fn sweeps_and_seeds() {
        let (_d, b, mut s) = setup(quick_config());
        let ctx = EditContext::load(&mut s, &b, None).unwrap();
        let base = EditRequest { seed: 2, ..steps(3) };
        let sweep = sweep_beta(&b, &ctx, &[1.0, -1.0, 0.0, 0.0], &base).unwrap();
        let betas: Vec<f64> = sweep.iter().map(|r| r.echo.beta).collect();
        assert_eq!(betas, vec![-1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sweep[1].hash, sweep[2].hash);
        assert_eq!(sweep[0].image, reconstruct(&b, &ctx, 2, 3, true).unwrap());
        assert!(sweep_beta(&b, &ctx, &[2.0], &base).is_err());

        let one = multi_seed(&b, &ctx, 1.0, 2, 1, 3, true, true).unwrap();
        assert_eq!(one[0].hash, predict_edit(&b, &ctx, &base).unwrap().hash);
        let many = multi_seed(&b, &ctx, 1.0, 5, 8, 2, true, true).unwrap();
        let seeds: Vec<u64> = many.iter().map(|r| r.echo.seed).collect();
        assert_eq!(seeds, (5..13).collect::<Vec<_>>());
        assert!(multi_seed(&b, &ctx, 1.0, 0, 0, 2, true, true).is_err());
    }

    #[test]
    fn eta_sweep_records_per_eta_adapters() {
        let (_d, b, mut s) = setup(quick_config());
        let base = steps(2);
        let out = sweep_eta(&b, &mut s, &[0.4, 1.0, 0.6], &base).unwrap();
        let etas: Vec<f64> = out.iter().map(|r| r.echo.eta).collect();
        assert_eq!(etas, vec![0.4, 1.0, 0.6]);
        assert!(out[0].echo.delta.starts_with("deltas/"));
        assert_eq!(out[2].echo.delta, "delta.adapter");
        let again = sweep_eta(&b, &mut s, &[0.4], &base).unwrap();
        assert_eq!(again[0].hash, out[0].hash);
        assert!(sweep_eta(&b, &mut s, &[1.2], &base).is_err());
    }

    #[test]
    fn stored_edits_are_content_addressed() {
        let (_d, b, mut s) = setup(quick_config());
        let ctx = EditContext::load(&mut s, &b, None).unwrap();
        let r = predict_edit(&b, &ctx, &steps(2)).unwrap();
        let (png, json) = save_result(s.dir(), &r).unwrap();
        assert!(png.ends_with(format!("{}.png", r.hash)) && json.is_file());
        assert_eq!(Image::from_encoded(&std::fs::read(&png).unwrap(), None).unwrap(), r.image.quantized());
        save_result(s.dir(), &r).unwrap();
        let list = list_edits(s.dir()).unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].echoes, vec![r.echo.clone()]);
        assert_eq!(find_cached(s.dir(), &r.echo).unwrap().unwrap().hash, r.hash);
        let other = EditEcho { seed: 99, ..r.echo.clone() };
        assert!(find_cached(s.dir(), &other).unwrap().is_none());
        assert!(valid_hash(&r.hash) && !valid_hash("../x"));
        assert_ne!(echo_key(&r.echo).unwrap(), echo_key(&other).unwrap());
    }
}
