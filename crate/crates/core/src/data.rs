//! Patch records, manifests, slide-level splits, tiling and the procedural toy corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_caption, class_label, parse_caption_levels, ClassLabel};
use crate::error::{Error, Result};
use crate::summarizer::SummaryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Field order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub image_path: String,
    pub tumor_prob: f64,
    pub til_prob: f64,
    pub class_id: ClassLabel,
    pub caption: String,
    pub split: Split,
    /// Every summary variant rendered as a caption, for multi-summary training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub caption_variants: Vec<String>,
}

impl PatchRecord {
    /// A record whose caption carries no summary yet.
    pub fn new(
        patch_id: String,
        slide_id: String,
        image_path: String,
        tumor_prob: f64,
        til_prob: f64,
        split: Split,
    ) -> Result<Self> {
        Ok(Self {
            caption: build_caption(tumor_prob, til_prob, "")?.rendered,
            class_id: class_label(tumor_prob, til_prob)?,
            patch_id,
            slide_id,
            image_path,
            tumor_prob,
            til_prob,
            split,
            caption_variants: Vec::new(),
        })
    }

    /// Checks caption and class against the stored probabilities.
    pub fn validate(&self) -> Result<()> {
        let class = class_label(self.tumor_prob, self.til_prob)?;
        if class != self.class_id {
            return Err(Error::invalid(format!("{}: class {:?} but probabilities give {:?}", self.patch_id, self.class_id, class)));
        }
        for caption in std::iter::once(&self.caption).chain(&self.caption_variants) {
            match parse_caption_levels(caption) {
                Some((a, b)) if ClassLabel::from_levels(a, b) == class => {}
                _ => return Err(Error::invalid(format!("{}: caption {caption:?} disagrees with class", self.patch_id))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub image_path: String,
    pub report_path: String,
    /// `slide_id#variant` references into the summary log.
    pub summaries: Vec<String>,
}

/// A tile and its top-left corner.
#[derive(Debug, Clone)]
pub struct Tile {
    pub y: usize,
    pub x: usize,
    pub image: Tensor,
}

/// Top-left corners of the row-major tiles that fit entirely inside the image.
pub fn tile_grid(height: usize, width: usize, tile: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || stride == 0 {
        return Err(Error::invalid("tile size and stride must be positive"));
    }
    if tile > height || tile > width {
        return Err(Error::invalid(format!("tile {tile} larger than image {height}x{width}")));
    }
    let ys = (0..=height - tile).step_by(stride);
    Ok(ys.flat_map(|y| (0..=width - tile).step_by(stride).map(move |x| (y, x))).collect())
}

/// Cuts an `(H, W, C)` image into tiles; partial border tiles are dropped.
pub fn tile_image(image: &Tensor, tile: usize, stride: usize) -> Result<Vec<Tile>> {
    let (h, w, _) = image.dims3()?;
    tile_grid(h, w, tile, stride)?
        .into_iter()
        .map(|(y, x)| Ok(Tile { y, x, image: image.narrow(0, y, tile)?.narrow(1, x, tile)? }))
        .collect()
}

/// Seeded slide-level split: `round(n * train_fraction)` slides go to train.
pub fn split_by_slide(slide_ids: &[String], train_fraction: f64, seed: u64) -> Result<BTreeMap<String, Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let unique: BTreeSet<&String> = slide_ids.iter().collect();
    if unique.len() < 2 {
        return Err(Error::invalid("splitting needs at least two slides"));
    }
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((order.len() as f64 * train_fraction).round() as usize).clamp(1, order.len() - 1);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub image_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self { n_slides: 50, patches_per_slide: 200, image_size: 32, train_fraction: 0.8, seed: 0 }
    }
}

/// Background hues; each slide uses one.
pub const HUES: [(&str, [f32; 3]); 6] = [
    ("pink", [0.93, 0.74, 0.82]),
    ("lavender", [0.80, 0.75, 0.94]),
    ("peach", [0.97, 0.82, 0.66]),
    ("teal", [0.66, 0.88, 0.85]),
    ("ochre", [0.88, 0.82, 0.55]),
    ("grey", [0.80, 0.80, 0.80]),
];

/// Largest blob count, reached at tumor probability 1.
pub const MAX_BLOBS: usize = 6;
/// Largest lymphocyte dot count, reached at TIL probability 1.
pub const MAX_DOTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlideStyle {
    pub hue: usize,
    pub elongated: bool,
    pub dark_stain: bool,
}

impl SlideStyle {
    pub const COUNT: usize = HUES.len() * 4;

    /// Dense id in `0..COUNT`.
    pub fn id(&self) -> usize {
        self.hue * 4 + 2 * self.elongated as usize + self.dark_stain as usize
    }
}

/// Generation parameters of one toy patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTruth {
    pub patch_id: String,
    pub tumor_prob: f64,
    pub til_prob: f64,
    pub blob_count: usize,
    pub dot_count: usize,
    pub style: SlideStyle,
}

pub struct ToyCorpus {
    pub config: ToyCorpusConfig,
    pub slides: Vec<SlideRecord>,
    pub reports: Vec<String>,
    pub styles: Vec<SlideStyle>,
    /// Records carry captions without summaries until [`build_manifests`] runs.
    pub patches: Vec<PatchRecord>,
    pub truth: Vec<PatchTruth>,
    /// `(N, S, S, 3)` in `[0, 1]`, row `i` belongs to `patches[i]`.
    pub images: Tensor,
}

/// Bimodal probability: low `U(0, 0.4)` or high `U(0.6, 1)`.
fn bimodal(rng: &mut impl Rng, p_high: f64) -> f64 {
    if rng.random_bool(p_high) {
        rng.random_range(0.6..1.0)
    } else {
        rng.random_range(0.0..0.4)
    }
}

fn report_text(rng: &mut impl Rng, style: &SlideStyle, til_rate: f64) -> String {
    let site = ["left", "right"][rng.random_range(0..2)];
    let procedure = ["core biopsy", "excision", "mastectomy"][rng.random_range(0..3)];
    let shape = if style.elongated { "elongated" } else { "round" };
    let stain = if style.dark_stain { "dark" } else { "light" };
    let lymph = match til_rate {
        r if r < 0.35 => "sparse",
        r if r < 0.65 => "patchy",
        _ => "dense",
    };
    let grade = rng.random_range(1..4);
    let margins = ["clear", "close", "involved"][rng.random_range(0..3)];
    format!(
        "Specimen: {site} breast, {procedure}. Received in formalin, labelled with the patient name. \
         The background stain is {}. Tumor nests are {shape} with {stain} nuclear staining. \
         Lymphocytes are {lymph} in the stroma. Histologic grade {grade}. Margins are {margins}. \
         Dictated and signed by the reporting pathologist.",
        HUES[style.hue].0
    )
}

fn paint_ellipse(px: &mut [f32], size: usize, c: (f32, f32), r: (f32, f32), angle: f32, color: [f32; 3]) {
    let (sin, cos) = angle.sin_cos();
    let reach = r.0.max(r.1).ceil() as i32 + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (y, x) = (c.0.round() as i32 + dy, c.1.round() as i32 + dx);
            if y < 0 || x < 0 || y >= size as i32 || x >= size as i32 {
                continue;
            }
            let (fy, fx) = (y as f32 + 0.5 - c.0, x as f32 + 0.5 - c.1);
            let (u, v) = (fx * cos + fy * sin, -fx * sin + fy * cos);
            let d = (u / r.0).powi(2) + (v / r.1).powi(2);
            // Soft one-pixel rim.
            let a = (1.0 - (d.sqrt() - 1.0) * r.0.min(r.1)).clamp(0.0, 1.0);
            if a > 0.0 {
                let o = (y as usize * size + x as usize) * 3;
                for k in 0..3 {
                    px[o + k] = px[o + k] * (1.0 - a) + color[k] * a;
                }
            }
        }
    }
}

fn render_patch(rng: &mut impl Rng, size: usize, style: &SlideStyle, blobs: usize, dots: usize) -> Vec<f32> {
    let base = HUES[style.hue].1;
    let shade: f32 = rng.random_range(-0.03..0.03);
    let mut px = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        let grain: f32 = rng.random_range(-0.025..0.025);
        px.extend(base.iter().map(|&b| (b + shade + grain).clamp(0.0, 1.0)));
    }
    let s = size as f32 / 32.0;
    let blob_color = if style.dark_stain { [0.36, 0.14, 0.42] } else { [0.66, 0.40, 0.72] };
    for _ in 0..blobs {
        let c = (rng.random_range(4.0 * s..size as f32 - 4.0 * s), rng.random_range(4.0 * s..size as f32 - 4.0 * s));
        let r = if style.elongated { (4.8 * s, 2.2 * s) } else { (3.3 * s, 3.3 * s) };
        paint_ellipse(&mut px, size, c, r, rng.random_range(0.0..std::f32::consts::PI), blob_color);
    }
    for _ in 0..dots {
        let c = (rng.random_range(1.0..size as f32 - 1.0), rng.random_range(1.0..size as f32 - 1.0));
        paint_ellipse(&mut px, size, c, (1.1 * s, 1.1 * s), 0.0, [0.10, 0.10, 0.28]);
    }
    px
}

/// Procedural slides whose patches show large blobs at a density set by the
/// tumor probability and small dots at a density set by the TIL probability.
/// Slide style (hue, blob shape, stain) is written into each slide's report.
pub fn make_toy_corpus(config: &ToyCorpusConfig) -> Result<ToyCorpus> {
    if ![32, 64].contains(&config.image_size) {
        return Err(Error::invalid(format!("toy image size {} not in {{32, 64}}", config.image_size)));
    }
    if config.n_slides < 2 || config.patches_per_slide == 0 {
        return Err(Error::invalid("toy corpus needs >= 2 slides and >= 1 patch per slide"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let slide_ids: Vec<String> = (0..config.n_slides).map(|i| format!("slide-{i:03}")).collect();
    let splits = split_by_slide(&slide_ids, config.train_fraction, config.seed)?;
    let size = config.image_size;
    let (mut slides, mut reports, mut styles) = (Vec::new(), Vec::new(), Vec::new());
    let (mut patches, mut truth) = (Vec::new(), Vec::new());
    let mut pixels = Vec::with_capacity(config.n_slides * config.patches_per_slide * size * size * 3);
    for slide_id in &slide_ids {
        let style = SlideStyle {
            hue: rng.random_range(0..HUES.len()),
            elongated: rng.random_bool(0.5),
            dark_stain: rng.random_bool(0.5),
        };
        let tumor_rate = rng.random_range(0.2..0.8);
        let til_rate = rng.random_range(0.15..0.85);
        reports.push(report_text(&mut rng, &style, til_rate));
        slides.push(SlideRecord {
            slide_id: slide_id.clone(),
            image_path: format!("slides/{slide_id}.png"),
            report_path: format!("reports/{slide_id}.txt"),
            summaries: Vec::new(),
        });
        for p in 0..config.patches_per_slide {
            let patch_id = format!("{slide_id}-p{p:04}");
            let tumor = bimodal(&mut rng, tumor_rate);
            let til = bimodal(&mut rng, til_rate);
            let blob_count = (MAX_BLOBS as f64 * tumor).round() as usize;
            let dot_count = (MAX_DOTS as f64 * til).round() as usize;
            pixels.extend(render_patch(&mut rng, size, &style, blob_count, dot_count));
            let image_path = format!("images/{patch_id}.png");
            patches.push(PatchRecord::new(patch_id.clone(), slide_id.clone(), image_path, tumor, til, splits[slide_id])?);
            truth.push(PatchTruth { patch_id, tumor_prob: tumor, til_prob: til, blob_count, dot_count, style });
        }
        styles.push(style);
    }
    let n = patches.len();
    let images = Tensor::from_vec(pixels, (n, size, size, 3), &Device::Cpu)?;
    Ok(ToyCorpus { config: config.clone(), slides, reports, styles, patches, truth, images })
}

impl ToyCorpus {
    pub fn style_of(&self, slide_id: &str) -> Option<SlideStyle> {
        self.slides.iter().position(|s| s.slide_id == slide_id).map(|i| self.styles[i])
    }

    /// Row indices of patches in `split`.
    pub fn indices(&self, split: Split) -> Vec<u32> {
        (0..self.patches.len() as u32).filter(|&i| self.patches[i as usize].split == split).collect()
    }

    pub fn select_images(&self, rows: &[u32]) -> Result<Tensor> {
        Ok(self.images.index_select(&Tensor::from_slice(rows, rows.len(), &Device::Cpu)?, 0)?)
    }

    /// Writes patch PNGs, reports, a slide mosaic per slide, and the
    /// slide/ground-truth logs under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for dir in ["images", "reports", "slides"] {
            std::fs::create_dir_all(root.join(dir))?;
        }
        for (i, rec) in self.patches.iter().enumerate() {
            save_png(&self.images.get(i)?, &root.join(&rec.image_path))?;
        }
        let per = self.config.patches_per_slide;
        let cols = (per as f64).sqrt().ceil() as usize;
        for (s, slide) in self.slides.iter().enumerate() {
            std::fs::write(root.join(&slide.report_path), &self.reports[s])?;
            let rows: Vec<u32> = (s * per..(s + 1) * per).map(|i| i as u32).collect();
            crate::metrics::save_image_grid(&self.select_images(&rows)?, cols, &root.join(&slide.image_path))?;
        }
        write_jsonl(&root.join("slides.jsonl"), &self.slides)?;
        write_jsonl(&root.join("truth.jsonl"), &self.truth)?;
        write_manifest(&root.join("patches.jsonl"), &self.patches)
    }
}

/// Caption wiring for [`build_manifests`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestPolicy {
    /// Each patch gets its own slide's first summary.
    Matched,
    /// Each patch gets a summary of a different, randomly chosen slide.
    Shuffled,
    /// Own slide, with every summary variant kept as an alternative caption.
    Multi,
}

/// Renders captions for every patch from its probabilities and a slide summary.
pub fn build_manifests(
    patches: &[PatchRecord],
    summaries: &BTreeMap<String, Vec<SummaryRecord>>,
    policy: ManifestPolicy,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    let mut by_slide: BTreeMap<&str, Vec<&SummaryRecord>> = BTreeMap::new();
    for (slide, records) in summaries {
        let mut v: Vec<&SummaryRecord> = records.iter().collect();
        v.sort_by_key(|r| r.variant_index);
        if !v.is_empty() {
            by_slide.insert(slide.as_str(), v);
        }
    }
    let slide_ids: Vec<&str> = by_slide.keys().copied().collect();
    if policy == ManifestPolicy::Shuffled && slide_ids.len() < 2 {
        return Err(Error::invalid("shuffled captions need summaries for at least two slides"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patches
        .iter()
        .map(|p| {
            let own = by_slide
                .get(p.slide_id.as_str())
                .ok_or_else(|| Error::invalid(format!("no summary for slide {}", p.slide_id)))?;
            let render = |s: &str| build_caption(p.tumor_prob, p.til_prob, s).map(|c| c.rendered);
            let mut rec = p.clone();
            rec.class_id = class_label(p.tumor_prob, p.til_prob)?;
            rec.caption_variants.clear();
            match policy {
                ManifestPolicy::Matched => rec.caption = render(&own[0].summary)?,
                ManifestPolicy::Shuffled => {
                    let others: Vec<&str> = slide_ids.iter().copied().filter(|s| *s != p.slide_id).collect();
                    let other = others[rng.random_range(0..others.len())];
                    rec.caption = render(&by_slide[other][0].summary)?;
                }
                ManifestPolicy::Multi => {
                    rec.caption_variants = own.iter().map(|r| render(&r.summary)).collect::<Result<_>>()?;
                    rec.caption = rec.caption_variants[0].clone();
                }
            }
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Parses and validates a manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: PatchRecord = serde_json::from_str(l)?;
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Reads a two-column `patch_id, probability` table (comma, tab or space
/// separated; a non-numeric first row is taken as a header).
pub fn read_probability_table(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split([',', '\t', ' ']).filter(|c| !c.is_empty());
        let (Some(id), Some(value), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::invalid(format!("{}:{}: expected two columns", path.display(), n + 1)));
        };
        let Ok(p) = value.parse::<f64>() else {
            if n == 0 {
                continue;
            }
            return Err(Error::invalid(format!("{}:{}: bad probability {value:?}", path.display(), n + 1)));
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{}:{}: probability {p} outside [0, 1]", path.display(), n + 1)));
        }
        out.insert(id.to_string(), p);
    }
    Ok(out)
}

/// Replaces tumor and TIL probabilities from ingested tables, re-deriving class and caption levels.
pub fn attach_probabilities(
    patches: &mut [PatchRecord],
    tumor: &HashMap<String, f64>,
    til: &HashMap<String, f64>,
) -> Result<()> {
    for p in patches.iter_mut() {
        let missing = |what: &str| Error::invalid(format!("no {what} probability for {}", p.patch_id));
        let a = *tumor.get(&p.patch_id).ok_or_else(|| missing("tumor"))?;
        let b = *til.get(&p.patch_id).ok_or_else(|| missing("TIL"))?;
        let summary = p.caption.splitn(3, "; ").nth(2).unwrap_or("").to_string();
        p.tumor_prob = a;
        p.til_prob = b;
        p.class_id = class_label(a, b)?;
        p.caption = build_caption(a, b, &summary)?.rendered;
        p.caption_variants.clear();
    }
    Ok(())
}

/// Writes an `(H, W, 3)` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("(H, W, 3)", image.dims()));
    }
    let data = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::invalid("image buffer size"))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.pixels().flat_map(|Rgb(p)| p.map(|v| v as f32 / 255.0)).collect();
    Ok(Tensor::from_vec(data, (h as usize, w as usize, 3), &Device::Cpu)?)
}

/// Loads the images a manifest points to, relative to `root`.
pub fn load_images(records: &[PatchRecord], root: &Path) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let images = records
        .iter()
        .map(|r| load_png(&root.join(&r.image_path)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&images, 0)?)
}
