//! Image- and text-alignment scoring, trend statistics, the
//! fidelity-vs-iterations curve, and batch evaluation over pair files.
//!
//! Every score carries the identity of the metric that produced it, and
//! tables refuse to mix identities. The desk-scale metrics are stand-ins
//! computed from the toy backend and corpus probe; perceptual or
//! contrastive full-scale scorers plug in through [`ImageMetric`] and
//! [`TextMetric`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abduction::AbductionConfig;
use crate::editor::{multi_seed, prompt_swap, EditContext};
use crate::error::{DacError, Result};
use crate::generator::corpus::{agreement, color_affinity, dilate_mask, parse_caption, probe, ToyCorpusSpec};
use crate::generator::{GammaMode, GeneratorBackend};
use crate::imaging::Image;
use crate::session::{EditSession, SessionStore};
use crate::tensor_util::{atomic_write, to_vec_f64};

pub const TOY_IMAGE_METRIC: &str = "toy-pixel-trunk";
pub const TOY_TEXT_METRIC: &str = "toy-probe";

/// A value together with the identity of the metric that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub metric_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    /// Negated distance to the source; larger is more faithful.
    pub image_alignment: f64,
    /// Prompt compliance; larger is better.
    pub text_alignment: f64,
    pub image_metric: String,
    pub text_metric: String,
}

pub trait ImageMetric: Send + Sync {
    fn id(&self) -> &str;
    /// Non-negative distance, zero for identical images.
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

pub trait TextMetric: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, image: &Image, prompt: &str) -> Result<f64>;
}

/// Pixel MSE plus mean squared distance between frozen trunk features of
/// the backend.
pub struct ToyImageMetric<'a> {
    backend: &'a dyn GeneratorBackend,
}

impl<'a> ToyImageMetric<'a> {
    pub fn new(backend: &'a dyn GeneratorBackend) -> Self {
        Self { backend }
    }
}

impl ImageMetric for ToyImageMetric<'_> {
    fn id(&self) -> &str {
        TOY_IMAGE_METRIC
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        check_same_resolution(a, b)?;
        let pixel = a.mse(b)?;
        let fa = to_vec_f64(&self.backend.image_features(a)?)?;
        let fb = to_vec_f64(&self.backend.image_features(b)?)?;
        let feature = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len().max(1) as f64;
        Ok(pixel + feature)
    }
}

/// Fraction of caption slots (color and shape per object) the corpus probe
/// reads back from the image.
pub struct ToyProbeMetric {
    corpus: ToyCorpusSpec,
}

impl ToyProbeMetric {
    pub fn new(corpus: ToyCorpusSpec) -> Self {
        Self { corpus }
    }
}

impl TextMetric for ToyProbeMetric {
    fn id(&self) -> &str {
        TOY_TEXT_METRIC
    }

    fn score(&self, image: &Image, prompt: &str) -> Result<f64> {
        let slots = parse_caption(prompt, &self.corpus)?;
        if image.width() != self.corpus.resolution || image.height() != self.corpus.resolution {
            return Err(DacError::Validation(format!(
                "probe expects {r}x{r} images, got {}x{}",
                image.width(),
                image.height(),
                r = self.corpus.resolution
            )));
        }
        Ok(agreement(&probe(image.data(), &self.corpus)?, &slots).score())
    }
}

fn check_same_resolution(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(DacError::Validation(format!(
            "resolution mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Metric registry addressed by identity.
#[derive(Default)]
pub struct Metrics<'a> {
    image: Vec<Box<dyn ImageMetric + 'a>>,
    text: Vec<Box<dyn TextMetric + 'a>>,
}

impl<'a> Metrics<'a> {
    /// The desk-scale pair: [`TOY_IMAGE_METRIC`] and [`TOY_TEXT_METRIC`].
    pub fn toy(backend: &'a dyn GeneratorBackend, corpus: ToyCorpusSpec) -> Self {
        let mut m = Self::default();
        m.register_image(Box::new(ToyImageMetric::new(backend)));
        m.register_text(Box::new(ToyProbeMetric::new(corpus)));
        m
    }

    pub fn register_image(&mut self, metric: Box<dyn ImageMetric + 'a>) {
        self.image.retain(|m| m.id() != metric.id());
        self.image.push(metric);
    }

    pub fn register_text(&mut self, metric: Box<dyn TextMetric + 'a>) {
        self.text.retain(|m| m.id() != metric.id());
        self.text.push(metric);
    }

    pub fn default_image_id(&self) -> Result<&str> {
        self.image
            .first()
            .map(|m| m.id())
            .ok_or_else(|| DacError::Config("no image metric registered".into()))
    }

    pub fn default_text_id(&self) -> Result<&str> {
        self.text
            .first()
            .map(|m| m.id())
            .ok_or_else(|| DacError::Config("no text metric registered".into()))
    }

    /// Negated distance between the source and the edit under `metric_id`.
    pub fn image_alignment(&self, source: &Image, edited: &Image, metric_id: &str) -> Result<Score> {
        let m = self
            .image
            .iter()
            .find(|m| m.id() == metric_id)
            .ok_or_else(|| DacError::Config(format!("unknown image metric `{metric_id}`")))?;
        let value = -m.distance(source, edited)?;
        Ok(Score {
            value,
            metric_id: metric_id.to_string(),
        })
    }

    pub fn text_alignment(&self, edited: &Image, prompt: &str, metric_id: &str) -> Result<Score> {
        let m = self
            .text
            .iter()
            .find(|m| m.id() == metric_id)
            .ok_or_else(|| DacError::Config(format!("unknown text metric `{metric_id}`")))?;
        Ok(Score {
            value: m.score(edited, prompt)?,
            metric_id: metric_id.to_string(),
        })
    }

    /// Both alignments under the default (first registered) metrics.
    pub fn score(&self, source: &Image, edited: &Image, prompt_prime: &str) -> Result<AlignmentScores> {
        let (iid, tid) = (self.default_image_id()?, self.default_text_id()?);
        let image = self.image_alignment(source, edited, iid)?;
        let text = self.text_alignment(edited, prompt_prime, tid)?;
        let scores = AlignmentScores {
            image_alignment: image.value,
            text_alignment: text.value,
            image_metric: image.metric_id,
            text_metric: text.metric_id,
        };
        if !scores.image_alignment.is_finite() || !scores.text_alignment.is_finite() {
            return Err(DacError::Numeric { layer: "alignment score".into() });
        }
        Ok(scores)
    }
}

/// Ranks with ties sharing their mean rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Zero when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DacError::Validation(format!(
            "rank correlation needs two equal-length series of at least 2 values ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Adjacent pairs that step against the requested direction.
pub fn inversions(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

/// Pixels away from the objects the probe finds in `source`.
pub fn off_object_mask(source: &Image, corpus: &ToyCorpusSpec, dilate: usize) -> Result<Vec<bool>> {
    let report = probe(source.data(), corpus)?;
    let grown = dilate_mask(&report.foreground, corpus.resolution, dilate);
    Ok(grown.into_iter().map(|m| !m).collect())
}

/// Pixel MSE between the source and the edit outside the source objects.
pub fn off_object_mse(source: &Image, edited: &Image, corpus: &ToyCorpusSpec, dilate: usize) -> Result<f64> {
    let mask = off_object_mask(source, corpus, dilate)?;
    source.masked_mse(edited, Some(&mask))
}

/// Soft membership of the source object's pixels in `target_color`.
pub fn target_color_score(source: &Image, edited: &Image, corpus: &ToyCorpusSpec, target_color: &str) -> Result<f64> {
    let report = probe(source.data(), corpus)?;
    color_affinity(edited.data(), corpus, &report.foreground, target_color)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iterations: usize,
    pub image_alignment: f64,
    pub text_alignment: f64,
    pub image_metric: String,
    pub text_metric: String,
    pub seed: u64,
}

/// For every stored generator checkpoint: samples the prompt-swap edit
/// `G(P', U_ckpt)` (no text adapter, `U` at full weight) from `seed` and
/// scores it against the source and `P'`.
pub fn fidelity_curve(
    backend: &dyn GeneratorBackend,
    session: &EditSession,
    metrics: &Metrics,
    seed: u64,
    steps: usize,
) -> Result<Vec<CurveRow>> {
    let iters = session.checkpoint_iters();
    if iters.is_empty() {
        return Err(DacError::State(format!("session {} has no checkpoints", session.id())));
    }
    session.check_backend(backend)?;
    let m = session.manifest();
    let mut rows = Vec::with_capacity(iters.len());
    for it in iters {
        let u = session.load_checkpoint(it, backend.device())?;
        let img = prompt_swap(backend, &m.prompt_prime, Some(&u), GammaMode::Constant(1.0), seed, steps)?;
        let s = metrics.score(session.source(), &img, &m.prompt_prime)?;
        rows.push(CurveRow {
            iterations: it,
            image_alignment: s.image_alignment,
            text_alignment: s.text_alignment,
            image_metric: s.image_metric,
            text_metric: s.text_metric,
            seed,
        });
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| DacError::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// Edit categories of the comparison protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    Addition,
    Removal,
    Manipulation,
    Replacement,
    StyleTransfer,
    FaceManipulation,
}

impl EditType {
    pub const ALL: [EditType; 6] = [
        EditType::Addition,
        EditType::Removal,
        EditType::Manipulation,
        EditType::Replacement,
        EditType::StyleTransfer,
        EditType::FaceManipulation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditType::Addition => "addition",
            EditType::Removal => "removal",
            EditType::Manipulation => "manipulation",
            EditType::Replacement => "replacement",
            EditType::StyleTransfer => "style_transfer",
            EditType::FaceManipulation => "face_manipulation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        let t = match norm.as_str() {
            "addition" => EditType::Addition,
            "removal" => EditType::Removal,
            "manipulation" => EditType::Manipulation,
            "replacement" => EditType::Replacement,
            "style_transfer" => EditType::StyleTransfer,
            "face_manipulation" | "facial_change" => EditType::FaceManipulation,
            _ => return Err(DacError::Validation(format!("unknown edit type `{s}`"))),
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub image: PathBuf,
    pub p: String,
    pub p_prime: String,
    pub edit_type: EditType,
}

#[derive(Debug, Deserialize)]
struct RawPair {
    image: String,
    p: String,
    p_prime: String,
    #[serde(rename = "type")]
    edit_type: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalBatch {
    pub pairs: Vec<EvalPair>,
}

impl EvalBatch {
    /// Reads a CSV (header `image,p,p_prime,type`) or, for `.jsonl`/`.json`
    /// files, one JSON object per line. Relative image paths resolve against
    /// the batch file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DacError::load(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"));
        let raw: Vec<RawPair> = if jsonl {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| DacError::load(path, e)))
                .collect::<Result<_>>()?
        } else {
            csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes())
                .deserialize()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DacError::load(path, e))?
        };
        let pairs = raw
            .into_iter()
            .map(|r| {
                let image = PathBuf::from(&r.image);
                Ok(EvalPair {
                    image: if image.is_absolute() { image } else { base.join(image) },
                    p: r.p,
                    p_prime: r.p_prime,
                    edit_type: EditType::parse(&r.edit_type)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in &self.pairs {
            if !p.image.is_file() {
                return Err(DacError::NotFound(format!("image {}", p.image.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub abduction: AbductionConfig,
    pub beta: f64,
    pub seed: u64,
    pub steps: usize,
    /// Seeds sampled per pair; the first is reported as `first_seed`, the
    /// best by text alignment as `best_of_n`.
    pub n_seeds: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            abduction: AbductionConfig::default(),
            beta: 1.0,
            seed: 0,
            steps: 30,
            n_seeds: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pair_id: String,
    #[serde(rename = "type")]
    pub edit_type: EditType,
    pub image_alignment: f64,
    pub text_alignment: f64,
    pub metric_id: String,
    pub seed: u64,
    /// `first_seed` or `best_of_n`.
    pub selection: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMean {
    #[serde(rename = "type")]
    pub edit_type: EditType,
    pub selection: String,
    pub pairs: usize,
    pub image_alignment: f64,
    pub text_alignment: f64,
    pub metric_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchReport {
    pub rows: Vec<ScoreRow>,
    pub per_type: Vec<TypeMean>,
    /// Pairs already present in the output and skipped.
    pub resumed: usize,
    pub failures: Vec<(String, String)>,
}

pub const SCORES_FILE: &str = "scores.csv";
pub const PER_TYPE_FILE: &str = "per_type.csv";

/// Stable identity of a pair under a pipeline configuration.
pub fn pair_id(pair: &EvalPair, cfg: &BatchConfig) -> Result<String> {
    let bytes = fs::read(&pair.image).map_err(|e| DacError::load(&pair.image, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    for part in [pair.p.as_str(), pair.p_prime.as_str(), pair.edit_type.as_str()] {
        h.update([0]);
        h.update(part.as_bytes());
    }
    h.update([0]);
    h.update(serde_json::to_vec(cfg)?);
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Metric identity shared by a row set; mixing identities is an error.
fn combined_metric_id(a: &AlignmentScores) -> String {
    format!("{}+{}", a.image_metric, a.text_metric)
}

fn per_type_means(rows: &[ScoreRow]) -> Result<Vec<TypeMean>> {
    let ids: BTreeSet<&str> = rows.iter().map(|r| r.metric_id.as_str()).collect();
    if ids.len() > 1 {
        return Err(DacError::Validation(format!("score table mixes metric identities {ids:?}")));
    }
    let mut groups: BTreeMap<(EditType, String), Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.edit_type, r.selection.clone())).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((edit_type, selection), rs)| {
            let n = rs.len() as f64;
            TypeMean {
                edit_type,
                selection,
                pairs: rs.len(),
                image_alignment: rs.iter().map(|r| r.image_alignment).sum::<f64>() / n,
                text_alignment: rs.iter().map(|r| r.text_alignment).sum::<f64>() / n,
                metric_id: rs[0].metric_id.clone(),
            }
        })
        .collect())
}

fn run_pair(
    backend: &dyn GeneratorBackend,
    store: &SessionStore,
    pair: &EvalPair,
    id: &str,
    cfg: &BatchConfig,
    metrics: &Metrics,
) -> Result<Vec<ScoreRow>> {
    let source = Image::load(&pair.image, Some(backend.image_size()))?;
    let mut session = store.create(backend, &source, &pair.p, &pair.p_prime, cfg.abduction.clone())?;
    session.abduct(backend, &mut ())?;
    let ctx = EditContext::load(&mut session, backend, None)?;
    let results = multi_seed(backend, &ctx, cfg.beta, cfg.seed, cfg.n_seeds, cfg.steps, true, true)?;
    let mut scored = Vec::with_capacity(results.len());
    for r in &results {
        scored.push((r.echo.seed, metrics.score(session.source(), &r.image, &pair.p_prime)?));
    }
    let row = |(seed, s): &(u64, AlignmentScores), selection: &str| ScoreRow {
        pair_id: id.to_string(),
        edit_type: pair.edit_type,
        image_alignment: s.image_alignment,
        text_alignment: s.text_alignment,
        metric_id: combined_metric_id(s),
        seed: *seed,
        selection: selection.to_string(),
        session_id: session.id().to_string(),
    };
    let first = &scored[0];
    // Ties keep the earliest seed.
    let best = scored
        .iter()
        .fold(first, |b, c| if c.1.text_alignment > b.1.text_alignment { c } else { b });
    Ok(vec![row(first, "first_seed"), row(best, "best_of_n")])
}

/// Runs the full pipeline per pair and writes `scores.csv` and
/// `per_type.csv` under `out_dir`. Pairs whose id already appears in an
/// existing `scores.csv` are not recomputed; failing pairs are logged and
/// skipped.
pub fn run_batch(
    backend: &dyn GeneratorBackend,
    store: &SessionStore,
    batch: &EvalBatch,
    cfg: &BatchConfig,
    metrics: &Metrics,
    out_dir: &Path,
) -> Result<BatchReport> {
    if cfg.n_seeds == 0 {
        return Err(DacError::Config("n_seeds must be positive".into()));
    }
    cfg.abduction.validate()?;
    fs::create_dir_all(out_dir)?;
    let scores_path = out_dir.join(SCORES_FILE);
    let mut rows: Vec<ScoreRow> = Vec::new();
    if scores_path.exists() {
        for r in csv::Reader::from_path(&scores_path)?.deserialize() {
            rows.push(r?);
        }
    }
    let done: BTreeSet<String> = rows.iter().map(|r| r.pair_id.clone()).collect();
    let mut report = BatchReport::default();
    for pair in &batch.pairs {
        let id = match pair_id(pair, cfg) {
            Ok(id) => id,
            Err(e) => {
                log::warn!("pair {}: {e}", pair.image.display());
                report.failures.push((pair.image.display().to_string(), e.to_string()));
                continue;
            }
        };
        if done.contains(&id) {
            report.resumed += 1;
            continue;
        }
        match run_pair(backend, store, pair, &id, cfg, metrics) {
            Ok(new_rows) => {
                rows.extend(new_rows);
                // Persist after every pair so an interruption loses at most one.
                write_csv(&scores_path, &rows)?;
            }
            Err(e) => {
                log::warn!("pair {id} ({}): {e}", pair.image.display());
                report.failures.push((id, e.to_string()));
            }
        }
    }
    write_csv(&scores_path, &rows)?;
    report.per_type = per_type_means(&rows)?;
    write_csv(&out_dir.join(PER_TYPE_FILE), &report.per_type)?;
    report.rows = rows;
    Ok(report)
}

/// Renders line series as a small PNG chart: one color per series, each
/// series scaled independently to the plot height, x shared.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> Result<Image> {
    const PALETTE: [[f32; 3]; 4] = [[0.85, 0.2, 0.2], [0.2, 0.4, 0.85], [0.2, 0.7, 0.3], [0.9, 0.6, 0.1]];
    if width < 16 || height < 16 {
        return Err(DacError::Validation("chart must be at least 16x16".into()));
    }
    let mut data = vec![1.0f32; 3 * width * height];
    let margin = 6usize;
    let (pw, ph) = (width - 2 * margin, height - 2 * margin);
    let mut put = |x: usize, y: usize, c: [f32; 3]| {
        if x < width && y < height {
            for (ch, v) in c.iter().enumerate() {
                data[ch * width * height + y * width + x] = *v;
            }
        }
    };
    for x in margin..=margin + pw {
        put(x, margin + ph, [0.0; 3]);
    }
    for y in margin..=margin + ph {
        put(margin, y, [0.0; 3]);
    }
    let xs: Vec<f64> = series.iter().flatten().map(|p| p.0).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let (y0, y1) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let yspan = if y1 > y0 { y1 - y0 } else { 1.0 };
        let to_px = |p: &(f64, f64)| {
            let x = margin as f64 + (p.0 - x0) / xspan * pw as f64;
            let y = margin as f64 + ph as f64 - (p.1 - y0) / yspan * ph as f64;
            (x, y)
        };
        for w in s.windows(2) {
            let ((ax, ay), (bx, by)) = (to_px(&w[0]), to_px(&w[1]));
            let n = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for k in 0..=n {
                let f = k as f64 / n as f64;
                put((ax + f * (bx - ax)).round() as usize, (ay + f * (by - ay)).round() as usize, color);
            }
        }
        for p in s {
            let (x, y) = to_px(p);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    put((x.round() as i64 + dx).max(0) as usize, (y.round() as i64 + dy).max(0) as usize, color);
                }
            }
        }
    }
    Image::new(width, height, data)
}
