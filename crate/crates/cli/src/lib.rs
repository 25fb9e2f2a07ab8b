//! Command-line front end: trains the toy backend, runs abductions, samples
//! edits and drives the evaluation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dac_core::abduction::{smoothed, AbductionConfig, AbductionObserver, Stage};
use dac_core::editor::{
    multi_seed, predict_edit, save_result, score_result, sweep_beta, EditContext, EditRequest, EditResult,
    DEFAULT_SEEDS, DEFAULT_STEPS,
};
use dac_core::eval::{fidelity_curve, line_chart, run_batch, write_csv, BatchConfig, EvalBatch, Metrics};
use dac_core::generator::corpus::ToyCorpusSpec;
use dac_core::generator::{
    open_backend, save_toy_backend, train_toy_backend, BackendKind, LoadedBackend, ToyArchitecture, ToyTrainConfig,
};
use dac_core::imaging::Image;
use dac_core::lora::Placement;
use dac_core::session::{stage_losses, SessionStore, PROGRESS_WINDOW};
use dac_core::tensor_util::sha256_hex;
use dac_core::{DacError, Device, Result};
use dac_service::ServiceConfig;

#[derive(Parser, Debug)]
#[command(name = "dac", version, about = "Text-based real image editing by counterfactual abduction")]
pub struct Cli {
    /// Generator backend kind.
    #[arg(long, global = true, value_enum, default_value = "toy")]
    pub backend: BackendArg,

    /// Directory of the backend checkpoint.
    #[arg(long, global = true, env = "DAC_MODEL", default_value = "models/toy")]
    pub model: PathBuf,

    /// Root directory of the session store.
    #[arg(long, global = true, env = "DAC_SESSIONS", default_value = "sessions")]
    pub sessions: PathBuf,

    #[arg(long, global = true, value_enum, default_value = "cpu")]
    pub device: DeviceArg,

    /// Seed for the command (training, abduction or sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log filter, e.g. `info` or `dac_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Toy,
    External,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Toy => BackendKind::Toy,
            BackendArg::External => BackendKind::External,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeviceArg {
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Default,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    #[value(name = "attention_only")]
    AttentionOnly,
    #[value(name = "attention_conv_ffn")]
    AttentionConvFfn,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::AttentionOnly => Placement::AttentionOnly,
            PlacementArg::AttentionConvFfn => Placement::AttentionConvFfn,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the toy generator on the synthetic shapes corpus.
    TrainToy(TrainArgs),
    /// Abduct the exogenous adapters of a source image.
    Abduct(AbductArgs),
    /// Sample counterfactual edits from a finished session.
    Edit(EditArgs),
    /// Run the full pipeline over a batch of (image, P, P', type) pairs.
    Eval(EvalArgs),
    /// Score the prompt-swap edit at every stored generator checkpoint.
    Curve(CurveArgs),
    /// Run the HTTP job service over the session store.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Origin allowed by CORS (any origin when unset).
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Largest accepted upload, in MiB.
    #[arg(long, default_value_t = 8)]
    pub max_upload_mb: usize,
    /// Concurrent edit jobs (abductions always run one at a time).
    #[arg(long, default_value_t = 2)]
    pub edit_workers: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory; defaults to `--model`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Image side length; a positive multiple of 4.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Fraction of two-object scenes in the corpus.
    #[arg(long)]
    pub pair_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "default")]
    pub arch: ArchArg,
}

/// Abduction settings; unset flags keep the backend's defaults.
#[derive(Args, Debug, Default)]
pub struct AbductionArgs {
    /// Annealing floor of the generator adapter during Abduction-2.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Iterations per abduction stage.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rank_u: Option<usize>,
    #[arg(long)]
    pub rank_delta: Option<usize>,
    #[arg(long)]
    pub rank_t_aux: Option<usize>,
    /// Noise draws per iteration.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
    /// Generator checkpoint iterations, comma separated, or `none`.
    #[arg(long)]
    pub checkpoints: Option<String>,
    /// Also abduct an auxiliary text-encoder adapter alongside U.
    #[arg(long)]
    pub with_t_aux: bool,
    #[arg(long)]
    pub t_aux_rounds: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AbductArgs {
    /// Source image (any size; resized to the backend resolution).
    #[arg(long)]
    pub image: PathBuf,
    /// Prompt describing the source image.
    #[arg(long)]
    pub p: String,
    /// Prompt describing the desired edit.
    #[arg(long)]
    pub p_prime: String,
    #[command(flatten)]
    pub abduction: AbductionArgs,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub session: String,
    /// Text-adapter scale: 1 for the edit, -1 reconstructs the source.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// DDIM sampling steps.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Sample each of these betas (comma separated) from one shared noise.
    #[arg(long, allow_hyphen_values = true)]
    pub sweep_beta: Option<String>,
    /// Sample this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub n_seeds: usize,
    /// Annealing floor other than the session's; abducts a new text adapter on first use.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Leave out the auxiliary text adapter.
    #[arg(long)]
    pub no_t_aux: bool,
    /// Apply the generator adapter at full weight instead of annealed.
    #[arg(long)]
    pub no_anneal: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV (`image,p,p_prime,type`) or JSONL batch file.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, default_value = "reports/eval")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub n_seeds: usize,
    #[command(flatten)]
    pub abduction: AbductionArgs,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[arg(long)]
    pub session: String,
    /// Output directory; defaults to `reports/<session>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
}

/// Process exit status for an error: 2 for bad input or state, 1 otherwise.
pub fn exit_code(err: &DacError) -> u8 {
    match err {
        DacError::Validation(_)
        | DacError::Config(_)
        | DacError::Range { .. }
        | DacError::NotFound(_)
        | DacError::State(_)
        | DacError::Load { .. } => 2,
        _ => 1,
    }
}

pub fn init_logging(filter: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Runs a parsed command, writing the report to `out`. Returns the exit
/// status for outcomes that are not errors but still unsuccessful.
pub fn run(cli: &Cli, out: &mut String) -> Result<u8> {
    let device = match cli.device {
        DeviceArg::Cpu => Device::Cpu,
    };
    match &cli.command {
        Command::TrainToy(a) => train_toy(cli, a, &device, out).map(|_| 0),
        Command::Abduct(a) => abduct(cli, a, &device, out).map(|_| 0),
        Command::Edit(a) => edit(cli, a, &device, out).map(|_| 0),
        Command::Eval(a) => eval(cli, a, &device, out),
        Command::Curve(a) => curve(cli, a, &device, out).map(|_| 0),
        Command::Serve(a) => serve(cli, a).map(|_| 0),
    }
}

fn train_toy(cli: &Cli, a: &TrainArgs, device: &Device, out: &mut String) -> Result<()> {
    if cli.backend != BackendArg::Toy {
        return Err(DacError::Validation("train-toy only produces toy backends".into()));
    }
    let mut cfg = ToyTrainConfig::default();
    if a.arch == ArchArg::Tiny {
        cfg.architecture = ToyArchitecture::tiny();
    }
    let resolution = a.resolution.unwrap_or(cfg.architecture.image_size);
    cfg.architecture.image_size = resolution;
    let mut corpus = ToyCorpusSpec::at_resolution(resolution);
    if let Some(f) = a.pair_fraction {
        corpus.pair_fraction = f;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cfg.steps == 0 {
        log::warn!("--steps 0 saves the untrained initialization");
    }
    let dir = a.out.clone().unwrap_or_else(|| cli.model.clone());
    log::info!("training {} steps at {resolution}x{resolution}", cfg.steps);
    let (backend, report) = train_toy_backend(&corpus, &cfg, device)?;
    save_toy_backend(&backend, &corpus, &cfg, &report, &dir)?;
    let weights = std::fs::read(dir.join(dac_core::generator::TOY_WEIGHTS))?;
    writeln!(out, "checkpoint: {}", dir.display()).unwrap();
    writeln!(out, "held-out loss: {:.5} (untrained {:.5})", report.heldout_loss, report.baseline_loss).unwrap();
    writeln!(out, "weights sha256: {}", sha256_hex(&weights)).unwrap();
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &'static str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| DacError::Validation(format!("{what}: `{p}` is not a number")))
        })
        .collect()
}

fn parse_checkpoints(s: &str) -> Result<BTreeSet<usize>> {
    if s.trim() == "none" {
        return Ok(BTreeSet::new());
    }
    Ok(parse_list::<usize>("--checkpoints", s)?.into_iter().collect())
}

impl AbductionArgs {
    pub fn apply(&self, mut cfg: AbductionConfig) -> Result<AbductionConfig> {
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.iters {
            cfg.iterations = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.rank_u {
            cfg.rank_u = v;
        }
        if let Some(v) = self.rank_delta {
            cfg.rank_delta = v;
        }
        if let Some(v) = self.rank_t_aux {
            cfg.rank_t_aux = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(p) = self.placement {
            cfg.placement = p.into();
        }
        if let Some(c) = &self.checkpoints {
            cfg.checkpoint_iters = parse_checkpoints(c)?;
        }
        if self.with_t_aux {
            cfg.with_t_aux = true;
        }
        if let Some(v) = self.t_aux_rounds {
            cfg.t_aux_rounds = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(cli: &Cli, device: &Device) -> Result<LoadedBackend> {
    open_backend(cli.backend.into(), &cli.model, device)
}

/// Logs trainer progress at a fixed cadence.
struct ProgressLog {
    every: usize,
    recent: Vec<f64>,
}

impl AbductionObserver for ProgressLog {
    fn on_iteration(&mut self, stage: Stage, iteration: usize, total: usize, loss: f64) -> Result<()> {
        if iteration == 1 {
            self.recent.clear();
        }
        self.recent.push(loss);
        if self.recent.len() > PROGRESS_WINDOW {
            self.recent.remove(0);
        }
        if iteration.is_multiple_of(self.every) || iteration == total {
            let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
            log::info!("{} {iteration}/{total} loss {loss:.5} (smoothed {mean:.5})", stage.as_str());
        }
        Ok(())
    }
}

fn abduct(cli: &Cli, a: &AbductArgs, device: &Device, out: &mut String) -> Result<()> {
    let loaded = load(cli, device)?;
    let mut cfg = a.abduction.apply(loaded.kind.abduction_defaults())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let image = Image::load(&a.image, None)?;
    let store = SessionStore::new(&cli.sessions)?;
    let backend = loaded.backend.as_ref();
    let mut session = store.create(backend, &image, &a.p, &a.p_prime, cfg)?;
    log::info!("session {} created", session.id());
    let mut observer = ProgressLog {
        every: (session.manifest().config.iterations / 10).max(1),
        recent: Vec::new(),
    };
    session.abduct(backend, &mut observer)?;
    let rows = session.losses()?;
    writeln!(out, "session: {}", session.id()).unwrap();
    for rec in &session.manifest().stages {
        let losses = stage_losses(&rows, rec.stage, rec.round);
        let first = smoothed(&losses, PROGRESS_WINDOW).first().copied().unwrap_or(f64::NAN);
        writeln!(
            out,
            "{:<6} round {} iterations {:>5}  smoothed loss {:.5} -> {:.5}",
            rec.stage.as_str(),
            rec.round,
            rec.iterations,
            first,
            rec.final_smoothed_loss
        )
        .unwrap();
    }
    writeln!(out, "checkpoints: {:?}", session.checkpoint_iters()).unwrap();
    writeln!(out, "reproduce: {}", session.manifest().invocation()).unwrap();
    Ok(())
}

fn edit(cli: &Cli, a: &EditArgs, device: &Device, out: &mut String) -> Result<()> {
    let loaded = load(cli, device)?;
    let backend = loaded.backend.as_ref();
    let store = SessionStore::new(&cli.sessions)?;
    let mut session = store.open(&a.session)?;
    let base = EditRequest {
        beta: a.beta,
        eta_override: a.eta,
        seed: cli.seed.unwrap_or(0),
        steps: a.steps,
        use_t_aux: !a.no_t_aux,
        anneal: !a.no_anneal,
    };
    base.validate()?;
    let ctx = EditContext::load(&mut session, backend, a.eta)?;
    let mut results: Vec<EditResult> = match &a.sweep_beta {
        Some(list) => sweep_beta(backend, &ctx, &parse_list("--sweep-beta", list)?, &base)?,
        None if a.n_seeds > 1 => multi_seed(
            backend,
            &ctx,
            base.beta,
            base.seed,
            a.n_seeds,
            base.steps,
            base.use_t_aux,
            base.anneal,
        )?,
        None => vec![predict_edit(backend, &ctx, &base)?],
    };
    let metrics = Metrics::toy(backend, loaded.corpus.clone());
    writeln!(out, "session: {}  P': {:?}  eta: {}", ctx.session_id, ctx.prompt_prime, ctx.eta).unwrap();
    writeln!(out, "{:>6} {:>6} {:>9} {:>9}  image", "beta", "seed", "img_align", "txt_align").unwrap();
    for r in &mut results {
        score_result(r, session.source(), &metrics)?;
        let (png, _) = save_result(session.dir(), r)?;
        let s = r.scores.as_ref().expect("scored above");
        writeln!(
            out,
            "{:>6} {:>6} {:>9.4} {:>9.4}  {}",
            r.echo.beta,
            r.echo.seed,
            s.image_alignment,
            s.text_alignment,
            png.display()
        )
        .unwrap();
    }
    for r in &results {
        writeln!(out, "reproduce: {}", edit_invocation(r, a)).unwrap();
    }
    Ok(())
}

fn edit_invocation(r: &EditResult, a: &EditArgs) -> String {
    let e = &r.echo;
    let mut line = format!(
        "dac edit --session {} --beta {} --seed {} --steps {}",
        e.session_id, e.beta, e.seed, e.steps
    );
    if a.eta.is_some() {
        line.push_str(&format!(" --eta {}", e.eta));
    }
    if a.no_t_aux {
        line.push_str(" --no-t-aux");
    }
    if a.no_anneal {
        line.push_str(" --no-anneal");
    }
    line
}

/// Fails (status 1) only when every pair failed.
fn eval(cli: &Cli, a: &EvalArgs, device: &Device, out: &mut String) -> Result<u8> {
    let batch = EvalBatch::load(&a.batch)?;
    let loaded = load(cli, device)?;
    let backend = loaded.backend.as_ref();
    let cfg = BatchConfig {
        abduction: a.abduction.apply(loaded.kind.abduction_defaults())?,
        beta: a.beta,
        seed: cli.seed.unwrap_or(0),
        steps: a.steps,
        n_seeds: a.n_seeds,
    };
    let store = SessionStore::new(&cli.sessions)?;
    let metrics = Metrics::toy(backend, loaded.corpus.clone());
    let report = run_batch(backend, &store, &batch, &cfg, &metrics, &a.out)?;
    let series: Vec<Vec<(f64, f64)>> = ["first_seed", "best_of_n"]
        .iter()
        .flat_map(|sel| {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.selection == *sel).collect();
            [
                rows.iter().enumerate().map(|(i, r)| (i as f64, r.image_alignment)).collect(),
                rows.iter().enumerate().map(|(i, r)| (i as f64, r.text_alignment)).collect(),
            ]
        })
        .collect::<Vec<Vec<_>>>();
    line_chart(&series, 160, 96)?.save(&a.out.join("scores.png"))?;
    writeln!(
        out,
        "pairs: {}  resumed: {}  failed: {}",
        batch.pairs.len(),
        report.resumed,
        report.failures.len()
    )
    .unwrap();
    writeln!(out, "{:<14} {:<10} {:>5} {:>9} {:>9}", "type", "selection", "pairs", "img_align", "txt_align").unwrap();
    for m in &report.per_type {
        writeln!(
            out,
            "{:<14} {:<10} {:>5} {:>9.4} {:>9.4}",
            m.edit_type.as_str(),
            m.selection,
            m.pairs,
            m.image_alignment,
            m.text_alignment
        )
        .unwrap();
    }
    for (id, e) in &report.failures {
        writeln!(out, "failed {id}: {e}").unwrap();
    }
    writeln!(out, "reports: {}", a.out.display()).unwrap();
    let total = batch.pairs.len();
    Ok(if total > 0 && report.failures.len() == total { 1 } else { 0 })
}

fn curve(cli: &Cli, a: &CurveArgs, device: &Device, out: &mut String) -> Result<()> {
    let loaded = load(cli, device)?;
    let backend = loaded.backend.as_ref();
    let store = SessionStore::new(&cli.sessions)?;
    let session = store.open(&a.session)?;
    session.require_done()?;
    let metrics = Metrics::toy(backend, loaded.corpus.clone());
    let rows = fidelity_curve(backend, &session, &metrics, cli.seed.unwrap_or(0), a.steps)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| Path::new("reports").join(session.id()));
    std::fs::create_dir_all(&dir)?;
    write_csv(&dir.join("curve.csv"), &rows)?;
    let series = vec![
        rows.iter().map(|r| (r.iterations as f64, r.image_alignment)).collect(),
        rows.iter().map(|r| (r.iterations as f64, r.text_alignment)).collect(),
    ];
    line_chart(&series, 128, 96)?.save(&dir.join("curve.png"))?;
    writeln!(out, "{:>10} {:>9} {:>9}", "iterations", "img_align", "txt_align").unwrap();
    for r in &rows {
        writeln!(out, "{:>10} {:>9.4} {:>9.4}", r.iterations, r.image_alignment, r.text_alignment).unwrap();
    }
    writeln!(out, "curve: {}", dir.display()).unwrap();
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        backend: cli.backend.into(),
        model: cli.model.clone(),
        sessions: cli.sessions.clone(),
        max_upload_bytes: a.max_upload_mb << 20,
        edit_workers: a.edit_workers,
        cors_origin: a.cors_origin.clone(),
        ..Default::default()
    };
    dac_service::serve(cfg, a.addr)
}
