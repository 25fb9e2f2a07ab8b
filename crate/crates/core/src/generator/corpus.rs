//! Seeded synthetic corpus of flat-colored shapes on plain backgrounds, with
//! template captions, plus a deterministic pixel-statistics probe that reads
//! the color and shape back out of an image.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::tensor_util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        match word {
            "circle" => Some(ShapeKind::Circle),
            "square" => Some(ShapeKind::Square),
            "triangle" => Some(ShapeKind::Triangle),
            _ => None,
        }
    }

    /// Whether the continuous point `(px, py)` lies inside the shape.
    fn contains(self, px: f32, py: f32, cx: f32, cy: f32, s: f32) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            // apex up, base of width 2s at the bottom
            ShapeKind::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

impl NamedColor {
    fn new(name: &str, rgb: [f32; 3]) -> Self {
        Self {
            name: name.into(),
            rgb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub resolution: usize,
    pub colors: Vec<NamedColor>,
    pub shapes: Vec<ShapeKind>,
    pub backgrounds: Vec<[f32; 3]>,
    /// Half-extent range of a single object, in pixels.
    pub size_range: (f32, f32),
    /// Fraction of scenes using the two-object template.
    pub pair_fraction: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            resolution: 16,
            colors: vec![
                NamedColor::new("red", [0.90, 0.12, 0.12]),
                NamedColor::new("green", [0.12, 0.75, 0.20]),
                NamedColor::new("blue", [0.12, 0.25, 0.92]),
                NamedColor::new("yellow", [0.95, 0.85, 0.10]),
            ],
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            backgrounds: vec![
                [0.80, 0.80, 0.80],
                [0.35, 0.35, 0.38],
                [0.82, 0.74, 0.60],
                [0.55, 0.62, 0.58],
            ],
            size_range: (3.5, 5.5),
            pair_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: usize,
    pub objects: Vec<SceneObject>,
}

impl ToyCorpusSpec {
    /// The default vocabulary at another resolution, object sizes scaled
    /// in proportion.
    pub fn at_resolution(resolution: usize) -> Self {
        let base = Self::default();
        let k = resolution as f32 / base.resolution as f32;
        Self {
            resolution,
            size_range: (base.size_range.0 * k, base.size_range.1 * k),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(DacError::Config("corpus resolution must be >= 8".into()));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.backgrounds.is_empty() {
            return Err(DacError::Config("corpus vocabulary is empty".into()));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && 2.0 * hi + 2.0 < self.resolution as f32) {
            return Err(DacError::Config(format!("bad size range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(DacError::Config("pair_fraction not in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("corpus spec serializes"))
    }

    pub fn color_index(&self, name: &str) -> Option<usize> {
        self.colors.iter().position(|c| c.name == name)
    }

    pub fn sample_scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        let background = rng.random_range(0..self.backgrounds.len());
        let res = self.resolution as f32;
        let (lo, hi) = self.size_range;
        let object = |rng: &mut ChaCha8Rng, x_lo: f32, x_hi: f32, shrink: f32| {
            let size = rng.random_range(lo..=hi) * shrink;
            let margin = size + 1.0;
            let x_lo = x_lo.max(margin);
            let x_hi = x_hi.min(res - margin).max(x_lo);
            SceneObject {
                shape: self.shapes[rng.random_range(0..self.shapes.len())],
                color: rng.random_range(0..self.colors.len()),
                cx: rng.random_range(x_lo..=x_hi),
                cy: rng.random_range(margin..=res - margin),
                size,
            }
        };
        let objects = if rng.random_bool(self.pair_fraction) {
            let left = object(rng, 0.0, res / 2.0 - 1.0, 0.6);
            let right = object(rng, res / 2.0 + 1.0, res, 0.6);
            vec![left, right]
        } else {
            vec![object(rng, 0.0, res, 1.0)]
        };
        Scene {
            background,
            objects,
        }
    }

    /// Scene with one object, handy for fixtures.
    pub fn single(
        &self,
        shape: ShapeKind,
        color: &str,
        background: usize,
        cx: f32,
        cy: f32,
        size: f32,
    ) -> Result<Scene> {
        let color = self
            .color_index(color)
            .ok_or_else(|| DacError::Validation(format!("unknown color `{color}`")))?;
        if background >= self.backgrounds.len() {
            return Err(DacError::Validation(format!("no background {background}")));
        }
        Ok(Scene {
            background,
            objects: vec![SceneObject {
                shape,
                color,
                cx,
                cy,
                size,
            }],
        })
    }
}

const SUPERSAMPLE: usize = 4;

impl Scene {
    pub fn caption(&self, spec: &ToyCorpusSpec) -> String {
        let phrase = |o: &SceneObject| format!("a {} {}", spec.colors[o.color].name, o.shape.name());
        match self.objects.as_slice() {
            [one] => phrase(one),
            [left, right] => format!("{} left of {}", phrase(left), phrase(right)),
            _ => String::new(),
        }
    }

    /// Per-pixel object coverage in `[0, 1]`, row-major `res x res`, for each object.
    fn coverage(&self, res: usize) -> Vec<Vec<f32>> {
        let step = 1.0 / SUPERSAMPLE as f32;
        let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        self.objects
            .iter()
            .map(|o| {
                let mut cov = vec![0.0f32; res * res];
                for y in 0..res {
                    for x in 0..res {
                        let mut hits = 0;
                        for sy in 0..SUPERSAMPLE {
                            for sx in 0..SUPERSAMPLE {
                                let px = x as f32 + (sx as f32 + 0.5) * step;
                                let py = y as f32 + (sy as f32 + 0.5) * step;
                                if o.shape.contains(px, py, o.cx, o.cy, o.size) {
                                    hits += 1;
                                }
                            }
                        }
                        cov[y * res + x] = hits as f32 * norm;
                    }
                }
                cov
            })
            .collect()
    }

    /// Anti-aliased RGB image in `[0, 1]`, channel-major `3 x res x res`.
    pub fn render(&self, spec: &ToyCorpusSpec) -> Vec<f32> {
        let res = spec.resolution;
        let bg = spec.backgrounds[self.background];
        let mut img = vec![0.0f32; 3 * res * res];
        for c in 0..3 {
            img[c * res * res..(c + 1) * res * res].fill(bg[c]);
        }
        for (o, cov) in self.objects.iter().zip(self.coverage(res)) {
            let rgb = spec.colors[o.color].rgb;
            for (i, a) in cov.iter().enumerate() {
                for c in 0..3 {
                    let px = &mut img[c * res * res + i];
                    *px = *px * (1.0 - a) + rgb[c] * a;
                }
            }
        }
        img
    }

    /// Pixels touched by any object, grown by `dilate` pixels.
    pub fn object_mask(&self, spec: &ToyCorpusSpec, dilate: usize) -> Vec<bool> {
        let res = spec.resolution;
        let mut mask = vec![false; res * res];
        for cov in self.coverage(res) {
            for (m, a) in mask.iter_mut().zip(&cov) {
                *m |= *a > 0.0;
            }
        }
        dilate_mask(&mask, res, dilate)
    }
}

pub fn dilate_mask(mask: &[bool], res: usize, radius: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for _ in 0..radius {
        let prev = out.clone();
        for y in 0..res {
            for x in 0..res {
                if prev[y * res + x] {
                    continue;
                }
                let near = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny >= 0
                        && nx >= 0
                        && (ny as usize) < res
                        && (nx as usize) < res
                        && prev[ny as usize * res + nx as usize]
                });
                out[y * res + x] = near;
            }
        }
    }
    out
}

/// A caption parsed against the template grammar: one or two
/// `(color, shape)` slots, left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSlots {
    pub objects: Vec<(String, ShapeKind)>,
}

pub fn parse_caption(caption: &str, spec: &ToyCorpusSpec) -> Result<CaptionSlots> {
    let words: Vec<String> = caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let phrase = |ws: &[String]| -> Option<(String, ShapeKind)> {
        match ws {
            [article, color, shape] if article == "a" || article == "an" => {
                spec.color_index(color)?;
                Some((color.clone(), ShapeKind::parse(shape)?))
            }
            _ => None,
        }
    };
    let objects = match words.len() {
        3 => phrase(&words).map(|p| vec![p]),
        8 if words[3] == "left" && words[4] == "of" => {
            phrase(&words[..3]).zip(phrase(&words[5..])).map(|(l, r)| vec![l, r])
        }
        _ => None,
    };
    objects
        .map(|objects| CaptionSlots { objects })
        .ok_or_else(|| DacError::Validation(format!("caption `{caption}` does not fit the toy templates")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    pub color: String,
    pub color_distance: f32,
    pub shape: ShapeKind,
    pub area: usize,
    pub centroid: (f32, f32),
    pub mean_rgb: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub background: [f32; 3],
    /// Detected objects ordered left to right.
    pub objects: Vec<DetectedObject>,
    pub foreground: Vec<bool>,
}

/// Minimum RGB distance from the estimated background for a foreground pixel.
const FOREGROUND_THRESHOLD: f32 = 0.22;
const MIN_COMPONENT: usize = 4;

fn pixel(img: &[f32], res: usize, i: usize) -> [f32; 3] {
    [img[i], img[res * res + i], img[2 * res * res + i]]
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Reads objects out of a channel-major RGB image using only pixel statistics.
pub fn probe(img: &[f32], spec: &ToyCorpusSpec) -> Result<ProbeReport> {
    let res = spec.resolution;
    if img.len() != 3 * res * res {
        return Err(DacError::Shape(format!(
            "probe expects 3x{res}x{res}, got {} values",
            img.len()
        )));
    }
    let border: Vec<usize> = (0..res * res)
        .filter(|i| {
            let (y, x) = (i / res, i % res);
            y == 0 || x == 0 || y == res - 1 || x == res - 1
        })
        .collect();
    let background = std::array::from_fn(|c| {
        median(border.iter().map(|&i| img[c * res * res + i]).collect())
    });
    let foreground: Vec<bool> = (0..res * res)
        .map(|i| dist(pixel(img, res, i), background) > FOREGROUND_THRESHOLD)
        .collect();

    let mut label = vec![usize::MAX; res * res];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..res * res {
        if !foreground[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / res, i % res);
            let mut visit = |j: usize| {
                if foreground[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - res);
            }
            if y + 1 < res {
                visit(i + res);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < res {
                visit(i + 1);
            }
        }
        components.push(members);
    }
    components.retain(|c| c.len() >= MIN_COMPONENT);
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));
    if let Some(largest) = components.first().map(Vec::len) {
        components.retain(|c| c.len() * 4 >= largest);
    }
    components.truncate(2);

    let mut objects: Vec<DetectedObject> = components
        .iter()
        .map(|members| describe(img, res, members, spec))
        .collect();
    objects.sort_by(|a, b| a.centroid.0.total_cmp(&b.centroid.0));
    Ok(ProbeReport {
        background,
        objects,
        foreground,
    })
}

fn describe(img: &[f32], res: usize, members: &[usize], spec: &ToyCorpusSpec) -> DetectedObject {
    let n = members.len() as f32;
    let mut mean = [0.0f32; 3];
    let (mut sx, mut sy) = (0.0f32, 0.0f32);
    let (mut x0, mut x1, mut y0, mut y1) = (res, 0, res, 0);
    for &i in members {
        let p = pixel(img, res, i);
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
        let (y, x) = (i / res, i % res);
        sx += x as f32;
        sy += y as f32;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (color, color_distance) = spec
        .colors
        .iter()
        .map(|c| (c.name.clone(), dist(mean, c.rgb)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty palette");

    let bbox_area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f32;
    let fill = n / bbox_area;
    let mid = (y0 + y1) as f32 / 2.0;
    let top = members.iter().filter(|&&i| ((i / res) as f32) < mid).count() as f32;
    let bottom = members.iter().filter(|&&i| ((i / res) as f32) > mid).count() as f32;
    let shape = if top < 0.6 * bottom {
        ShapeKind::Triangle
    } else if fill > 0.9 {
        ShapeKind::Square
    } else {
        ShapeKind::Circle
    };
    DetectedObject {
        color,
        color_distance,
        shape,
        area: members.len(),
        centroid: (sx / n, sy / n),
        mean_rgb: mean,
    }
}

/// Per-slot agreement between a probe report and a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotAgreement {
    pub color: Vec<bool>,
    pub shape: Vec<bool>,
}

impl SlotAgreement {
    /// Mean over slots of the color and shape matches, in `[0, 1]`.
    pub fn score(&self) -> f64 {
        let n = self.color.len() + self.shape.len();
        if n == 0 {
            return 0.0;
        }
        let hits = self.color.iter().chain(&self.shape).filter(|b| **b).count();
        hits as f64 / n as f64
    }

    pub fn all(&self) -> bool {
        self.color.iter().chain(&self.shape).all(|b| *b)
    }
}

pub fn agreement(report: &ProbeReport, slots: &CaptionSlots) -> SlotAgreement {
    let matched = report.objects.len() == slots.objects.len();
    let color = slots
        .objects
        .iter()
        .enumerate()
        .map(|(i, (c, _))| matched && report.objects[i].color == *c)
        .collect();
    let shape = slots
        .objects
        .iter()
        .enumerate()
        .map(|(i, (_, s))| matched && report.objects[i].shape == *s)
        .collect();
    SlotAgreement { color, shape }
}

/// Soft membership of the `region` pixels in palette color `target`, in `[0, 1]`.
/// Each pixel is softly assigned among the palette and the image background.
pub fn color_affinity(img: &[f32], spec: &ToyCorpusSpec, region: &[bool], target: &str) -> Result<f64> {
    let res = spec.resolution;
    let target = spec
        .color_index(target)
        .ok_or_else(|| DacError::Validation(format!("unknown color `{target}`")))?;
    let report = probe(img, spec)?;
    let temperature = 0.05f32;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in (0..res * res).filter(|&i| region[i]) {
        let p = pixel(img, res, i);
        let mut weights: Vec<f32> = spec
            .colors
            .iter()
            .map(|c| (-dist(p, c.rgb).powi(2) / temperature).exp())
            .collect();
        weights.push((-dist(p, report.background).powi(2) / temperature).exp());
        let z: f32 = weights.iter().sum::<f32>().max(1e-30);
        total += (weights[target] / z) as f64;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
