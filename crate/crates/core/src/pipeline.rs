//! End-to-end drivers shared by the command-line tool and the acceptance
//! suite: corpus, summaries, manifests, autoencoders, denoisers, sampling and
//! evaluation, plus the ablation ladder and the guidance sweep.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Level, TextContext, Tokenizer, NULL_CLASS};
use crate::config::RunConfig;
use crate::data::{
    build_manifests, load_png, make_toy_corpus, read_manifest, save_png, write_manifest, ManifestPolicy, PatchRecord,
    PatchTruth, SlideRecord, Split, ToyCorpus, ToyCorpusConfig,
};
use crate::denoiser::{
    load_init, ConditioningKind, Condition, Denoiser, LdmDataset, LossRecord, TrainConditions, TrainConfig, train_ldm,
};
use crate::error::{Error, Result};
use crate::metrics::{
    append_jsonl, cas, fid, save_image_grid, save_line_plot, train_classifier, CasReport, FidResult, ToyClassifier,
};
use crate::schedule::{make_schedule, sample, NoiseSchedule, SamplerConfig};
use crate::summarizer::{load_summaries, patch_key, save_summaries, Summarizer, SummaryPolicy, SummaryRecord, Transport};
use crate::vae::{reconstruction_report, train_vae, ReconstructionReport, VaeLossRecord, VqVae};

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.bpe")
    }

    pub fn summaries(&self) -> PathBuf {
        self.root.join("summaries.jsonl")
    }

    pub fn manifest(&self, policy: ManifestPolicy) -> PathBuf {
        self.root.join("manifests").join(format!("{}.jsonl", policy_name(policy)))
    }

    pub fn vae(&self, factor: usize) -> PathBuf {
        self.root.join(format!("vae_f{factor}.safetensors"))
    }

    pub fn ldm(&self, name: &str) -> PathBuf {
        self.root.join("ldm").join(format!("{name}.safetensors"))
    }

    pub fn loss_curve(&self, name: &str) -> PathBuf {
        self.root.join("ldm").join(format!("{name}.loss.jsonl"))
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.root.join("samples").join(name)
    }

    pub fn extractor(&self) -> PathBuf {
        self.root.join("extractor.safetensors")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
}

pub fn policy_name(policy: ManifestPolicy) -> &'static str {
    match policy {
        ManifestPolicy::Matched => "matched",
        ManifestPolicy::Shuffled => "shuffled",
        ManifestPolicy::Multi => "multi",
    }
}

/// Patches, images and reports held in memory. Row `i` of `images` belongs to `records[i]`.
pub struct CorpusData {
    pub records: Vec<PatchRecord>,
    pub images: Tensor,
    /// Dense slide-style id of each patch, used as the extractor's auxiliary label.
    pub styles: Vec<u32>,
    /// Report text by slide id.
    pub reports: BTreeMap<String, String>,
}

impl CorpusData {
    pub fn from_toy(corpus: &ToyCorpus) -> Self {
        Self {
            records: corpus.patches.clone(),
            images: corpus.images.clone(),
            styles: corpus.truth.iter().map(|t| t.style.id() as u32).collect(),
            reports: corpus.slides.iter().map(|s| s.slide_id.clone()).zip(corpus.reports.iter().cloned()).collect(),
        }
    }

    /// Reads a directory written by [`ToyCorpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join("patches.jsonl"))?;
        let truth: Vec<PatchTruth> = read_jsonl(&dir.join("truth.jsonl"))?;
        let style_of: HashMap<&str, u32> = truth.iter().map(|t| (t.patch_id.as_str(), t.style.id() as u32)).collect();
        let styles = records
            .iter()
            .map(|r| style_of.get(r.patch_id.as_str()).copied().ok_or_else(|| Error::invalid(format!("no truth for {}", r.patch_id))))
            .collect::<Result<Vec<_>>>()?;
        let slides: Vec<SlideRecord> = read_jsonl(&dir.join("slides.jsonl"))?;
        let reports = slides
            .iter()
            .map(|s| Ok((s.slide_id.clone(), std::fs::read_to_string(dir.join(&s.report_path))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let images = crate::data::load_images(&records, dir)?;
        Ok(Self { records, images, styles, reports })
    }

    pub fn rows(&self, split: Split) -> Vec<u32> {
        (0..self.records.len() as u32).filter(|&i| self.records[i as usize].split == split).collect()
    }

    pub fn images_at(&self, rows: &[u32]) -> Result<Tensor> {
        Ok(self.images.index_select(&Tensor::from_slice(rows, rows.len(), &Device::Cpu)?, 0)?)
    }

    /// Swaps in manifest records for the same patches (captions change, order must not).
    pub fn with_records(&self, records: Vec<PatchRecord>) -> Result<Vec<PatchRecord>> {
        if records.len() != self.records.len()
            || records.iter().zip(&self.records).any(|(a, b)| a.patch_id != b.patch_id)
        {
            return Err(Error::invalid("manifest does not list the corpus patches in order"));
        }
        Ok(records)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn stamp_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("stamp.json")
}

/// True when `artifact` exists and was written under the same settings.
fn is_fresh(artifact: &Path, settings: &impl Serialize) -> Result<bool> {
    let stamp = stamp_path(artifact);
    if !artifact.exists() || !stamp.exists() {
        return Ok(false);
    }
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stamp)?)?;
    Ok(stored == serde_json::to_value(settings)?)
}

fn write_stamp(artifact: &Path, settings: &impl Serialize) -> Result<()> {
    std::fs::write(stamp_path(artifact), serde_json::to_string_pretty(settings)?)?;
    Ok(())
}

/// Texts the tokenizer learns merges from: the reports plus every caption prefix.
pub fn train_tokenizer(reports: &BTreeMap<String, String>, vocab_size: usize) -> Result<Tokenizer> {
    let mut texts: Vec<String> = reports.values().cloned().collect();
    for tumor in ["High", "Low"] {
        for til in ["high", "low"] {
            texts.push(format!("{tumor} tumor; {til} til; "));
        }
    }
    Tokenizer::train(&texts, vocab_size)
}

#[derive(Debug, Default)]
pub struct SummaryRun {
    pub summaries: BTreeMap<String, Vec<SummaryRecord>>,
    /// `(slide_id, variant, error)` for every variant that failed.
    pub failures: Vec<(String, usize, String)>,
}

impl SummaryRun {
    pub fn records(&self) -> Vec<SummaryRecord> {
        self.summaries.values().flatten().cloned().collect()
    }

    pub fn from_records(records: Vec<SummaryRecord>) -> Self {
        let mut summaries: BTreeMap<String, Vec<SummaryRecord>> = BTreeMap::new();
        for r in records {
            summaries.entry(r.slide_id.clone()).or_default().push(r);
        }
        Self { summaries, failures: Vec::new() }
    }
}

/// `variants` summaries per report; failures are collected, not fatal.
pub fn summarize_reports<T: Transport + ?Sized>(
    transport: &T,
    tokenizer: &Tokenizer,
    config: &crate::summarizer::SummarizerConfig,
    reports: &BTreeMap<String, String>,
    variants: usize,
) -> Result<SummaryRun> {
    let summarizer = Summarizer::new(transport, tokenizer, config.clone())?;
    let mut run = SummaryRun::default();
    for (slide, report) in reports {
        let multi = summarizer.summarize_multi(slide, report, variants)?;
        run.failures.extend(multi.failures.into_iter().map(|(i, e)| (slide.clone(), i, e.to_string())));
        if !multi.records.is_empty() {
            run.summaries.insert(slide.clone(), multi.records);
        }
    }
    Ok(run)
}

/// Trains an autoencoder on `images` and calibrates its latent scale on them.
pub fn fit_vae(
    images: &Tensor,
    config: &RunConfig,
    mut on_step: impl FnMut(&VaeLossRecord),
) -> Result<(VqVae, Vec<VaeLossRecord>)> {
    let (mut vae, curve) = train_vae(images, &config.vae, &config.vae_train, |_, r| {
        on_step(r);
        Ok(())
    })?;
    vae.calibrate_scale(images)?;
    Ok((vae, curve))
}

/// Diffusion-space latents for `rows` of the corpus.
pub fn encode_latents(vae: &VqVae, data: &CorpusData, rows: &[u32]) -> Result<Tensor> {
    vae.encode_for_diffusion(&data.images_at(rows)?)
}

/// Training set for one conditioning kind. `latents` row `j` belongs to `records[rows[j]]`.
pub fn ldm_dataset(
    records: &[PatchRecord],
    rows: &[u32],
    latents: Tensor,
    tokenizer: &Tokenizer,
    kind: ConditioningKind,
) -> Result<LdmDataset> {
    let conditions = match kind {
        ConditioningKind::Class => {
            TrainConditions::Class(rows.iter().map(|&r| records[r as usize].class_id.id() as u32).collect())
        }
        ConditioningKind::Text => {
            let mut index: HashMap<&str, u32> = HashMap::new();
            let mut captions = Vec::new();
            let mut choices = Vec::with_capacity(rows.len());
            for &r in rows {
                let rec = &records[r as usize];
                let options: Vec<&String> =
                    if rec.caption_variants.is_empty() { vec![&rec.caption] } else { rec.caption_variants.iter().collect() };
                choices.push(
                    options
                        .into_iter()
                        .map(|c| {
                            *index.entry(c.as_str()).or_insert_with(|| {
                                captions.push(tokenizer.tokenize(c));
                                captions.len() as u32 - 1
                            })
                        })
                        .collect(),
                );
            }
            TrainConditions::Text { captions, choices }
        }
    };
    Ok(LdmDataset { latents, conditions })
}

/// Condition for generating one image per record.
pub fn condition_for(kind: ConditioningKind, records: &[&PatchRecord], tokenizer: &Tokenizer) -> Condition {
    match kind {
        ConditioningKind::Class => Condition::Class(records.iter().map(|r| r.class_id.id() as u32).collect()),
        ConditioningKind::Text => Condition::Tokens(records.iter().map(|r| tokenizer.tokenize(&r.caption)).collect()),
    }
}

fn slice_condition(cond: &Condition, start: usize, len: usize) -> Condition {
    match cond {
        Condition::Class(ids) => Condition::Class(ids[start..start + len].to_vec()),
        Condition::Tokens(t) => Condition::Tokens(t[start..start + len].to_vec()),
        Condition::Text(ctx) => {
            let rows: Vec<u32> = (start as u32..(start + len) as u32).collect();
            Condition::Text(ctx.select(&rows).expect("rows within batch"))
        }
        Condition::Null(_) => Condition::Null(len),
    }
}

/// Samples one image per condition item in chunks of `chunk`; chunk `k` uses
/// sampler seed `seed + k`. Prompts are encoded once per chunk.
pub fn generate(
    model: &Denoiser,
    vae: &VqVae,
    cond: &Condition,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    chunk: usize,
) -> Result<Tensor> {
    let n = cond.batch();
    if n == 0 {
        return Err(Error::Empty("generation conditions"));
    }
    let mut out = Vec::new();
    for (k, start) in (0..n).step_by(chunk.max(1)).enumerate() {
        let len = chunk.min(n - start);
        let part = match slice_condition(cond, start, len) {
            Condition::Tokens(t) => {
                let ctx = model.encode_prompts(&t)?;
                Condition::Text(TextContext { hidden: ctx.hidden.detach(), ..ctx })
            }
            other => other,
        };
        let cfg = SamplerConfig { seed: sampler.seed.wrapping_add(k as u64), ..sampler.clone() };
        out.push(sample(model, vae, &part, &Condition::Null(len), &cfg, schedule)?.detach());
    }
    Ok(Tensor::cat(&out, 0)?.to_dtype(DType::F32)?)
}

/// `n` rows of `split`: a seeded permutation, cycled when `n` exceeds the split.
pub fn pick_rows(data: &CorpusData, split: Split, n: usize, seed: u64) -> Result<Vec<u32>> {
    let mut rows = data.rows(split);
    if rows.is_empty() {
        return Err(Error::Empty("split rows"));
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..n).map(|i| rows[i % rows.len()]).collect())
}

/// Binary tumor label used by the CAS experiment.
pub fn tumor_label(rec: &PatchRecord) -> Result<u32> {
    Ok((Level::from_prob(rec.tumor_prob)? == Level::High) as u32)
}

/// Writes images as numbered PNGs plus `labels.jsonl`, and a grid of the
/// first 64 next to the directory.
pub fn save_samples(dir: &Path, images: &Tensor, records: &[&PatchRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = images.dim(0)?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let file = format!("{i:05}.png");
        save_png(&images.get(i)?, &dir.join(&file))?;
        if let Some(rec) = records.get(i) {
            labels.push(SampleLabel {
                file,
                patch_id: rec.patch_id.clone(),
                caption: rec.caption.clone(),
                class_id: rec.class_id.id() as u32,
                tumor_label: tumor_label(rec)?,
            });
        }
    }
    write_jsonl(&dir.join("labels.jsonl"), &labels)?;
    let grid = images.narrow(0, 0, n.min(64))?;
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("samples");
    save_image_grid(&grid, 8, &dir.with_file_name(format!("{name}.grid.png")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub file: String,
    pub patch_id: String,
    pub caption: String,
    pub class_id: u32,
    pub tumor_label: u32,
}

pub fn read_sample_labels(dir: &Path) -> Result<Vec<SampleLabel>> {
    read_jsonl(&dir.join("labels.jsonl"))
}

/// Every `*.png` in `dir`, in file-name order, stacked to `(N, H, W, 3)`.
pub fn load_png_dir(dir: &Path) -> Result<Tensor> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty("png directory"));
    }
    let images = files.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&images, 0)?)
}

/// Extractor for toy FID: a classifier on the training split with an
/// auxiliary slide-style head, so its features see both content and style.
pub fn train_extractor(data: &CorpusData, config: &RunConfig) -> Result<ToyClassifier> {
    let rows = data.rows(Split::Train);
    let images = data.images_at(&rows)?;
    let labels: Vec<u32> = rows.iter().map(|&r| data.records[r as usize].class_id.id() as u32).collect();
    let styles: Vec<u32> = rows.iter().map(|&r| data.styles[r as usize]).collect();
    let (clf, _) = train_classifier(&images, &labels, Some(&styles), &config.eval.extractor, &config.eval.extractor_train)?;
    Ok(clf)
}

/// One ablation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub downsample_factor: usize,
    pub conditioning: ConditioningKind,
    pub manifest: ManifestPolicy,
    pub summary_policy: SummaryPolicy,
    /// Start from a denoiser pretrained without conditions on a different toy corpus.
    pub finetune: bool,
}

impl VariantSpec {
    fn new(name: &str, f: usize, kind: ConditioningKind, manifest: ManifestPolicy, finetune: bool) -> Self {
        Self {
            name: name.into(),
            downsample_factor: f,
            conditioning: kind,
            manifest,
            summary_policy: if manifest == ManifestPolicy::Multi { SummaryPolicy::RandomPerEpoch } else { SummaryPolicy::Fixed },
            finetune,
        }
    }

    /// Identity of the trained model; variants with equal keys share it.
    fn model_key(&self) -> String {
        format!(
            "f{}-{:?}-{}-{:?}-{}",
            self.downsample_factor,
            self.conditioning,
            policy_name(self.manifest),
            self.summary_policy,
            if self.finetune { "finetune" } else { "scratch" }
        )
        .to_lowercase()
    }
}

/// What `ablate --variants` accepts.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Model(VariantSpec),
    /// Guidance sweep over `eval.guidance_sweep` using the matched text model.
    Guidance,
}

/// Ladder rungs in order, weakest first.
pub const LADDER: [&str; 4] = ["f8-scratch-class", "f4-scratch-class", "f4-finetune-class", "f4-text"];

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use ConditioningKind::{Class, Text};
        use ManifestPolicy::{Matched, Multi, Shuffled};
        let spec = match s {
            "f8-scratch-class" => VariantSpec::new(s, 8, Class, Matched, false),
            "f4-scratch-class" => VariantSpec::new(s, 4, Class, Matched, false),
            "f4-finetune-class" => VariantSpec::new(s, 4, Class, Matched, true),
            "f4-text" | "matched" => VariantSpec::new(s, 4, Text, Matched, false),
            "shuffled" => VariantSpec::new(s, 4, Text, Shuffled, false),
            "random-summary" => VariantSpec::new(s, 4, Text, Multi, false),
            "guidance" => return Ok(Variant::Guidance),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected ladder, {}, matched, shuffled, random-summary, guidance)",
                    LADDER.join(", ")
                )))
            }
        };
        Ok(Variant::Model(spec))
    }
}

/// Expands `ladder` and parses a comma-separated list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "ladder" {
            for rung in LADDER {
                out.push(rung.parse()?);
            }
        } else {
            out.push(item.parse()?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub variant: String,
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub guidance: f64,
    pub sampling_steps: usize,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
    pub init: String,
    pub extractor: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub guidance: f64,
    pub fid: f64,
    pub n_fake: usize,
}

/// Fixed-width text rendering of a row table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = vec![line(header.to_vec()), widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")];
    out.extend(rows.iter().map(|r| line(r.iter().map(String::as_str).collect())));
    out.join("\n") + "\n"
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.variant.clone(),
                format!("{:.3}", r.fid),
                r.n_fake.to_string(),
                format!("{}", r.guidance),
                r.train_steps.to_string(),
                r.final_loss.map_or("-".into(), |l| format!("{l:.4}")),
            ]
        })
        .collect();
    render_table(&["#", "variant", "toy-FID", "samples", "guidance", "steps", "final-loss"], &body)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> =
        rows.iter().map(|r| vec![r.index.to_string(), format!("{}", r.guidance), format!("{:.3}", r.fid)]).collect();
    render_table(&["#", "guidance", "toy-FID"], &body)
}

/// Everything an experiment needs, built once and cached across variants.
pub struct Workbench {
    pub config: RunConfig,
    pub paths: RunPaths,
    pub data: CorpusData,
    pub tokenizer: Tokenizer,
    pub summaries: SummaryRun,
    pub schedule: NoiseSchedule,
    manifests: HashMap<&'static str, Vec<PatchRecord>>,
    vaes: HashMap<usize, VqVae>,
    models: HashMap<String, (Denoiser, Vec<LossRecord>)>,
    extractor: Option<ToyClassifier>,
    pub verbose: bool,
}

impl Workbench {
    /// Generates the corpus and trains the tokenizer, writing both and the
    /// resolved config under the run directory.
    pub fn create(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let paths = RunPaths::new(config.run_dir());
        config.write_resolved(paths.root())?;
        let corpus = make_toy_corpus(&config.corpus)?;
        corpus.save(&paths.corpus())?;
        let data = CorpusData::from_toy(&corpus);
        let tokenizer = train_tokenizer(&data.reports, config.tokenizer.vocab_size)?;
        tokenizer.save(&paths.tokenizer())?;
        Self::assemble(config, paths, data, tokenizer, SummaryRun::default())
    }

    /// [`Self::create`], then summaries and all manifests.
    pub fn prepare<T: Transport + ?Sized>(config: RunConfig, transport: &T) -> Result<Self> {
        let mut bench = Self::create(config)?;
        bench.summarize(transport)?;
        bench.write_manifests()?;
        Ok(bench)
    }

    /// Reopens a run directory written by earlier commands. Summaries may be
    /// missing; the tokenizer is retrained if absent.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let paths = RunPaths::new(config.run_dir());
        if !paths.corpus().join("patches.jsonl").exists() {
            return Err(Error::Config(format!("no corpus under {}; run gen-corpus first", paths.root().display())));
        }
        let data = CorpusData::load(&paths.corpus())?;
        let tokenizer = if paths.tokenizer().exists() {
            Tokenizer::load(&paths.tokenizer())?
        } else {
            let tok = train_tokenizer(&data.reports, config.tokenizer.vocab_size)?;
            tok.save(&paths.tokenizer())?;
            tok
        };
        let summaries = if paths.summaries().exists() {
            SummaryRun::from_records(load_summaries(&paths.summaries())?)
        } else {
            SummaryRun::default()
        };
        config.write_resolved(paths.root())?;
        Self::assemble(config, paths, data, tokenizer, summaries)
    }

    /// Summarizes every report and replaces `summaries.jsonl`.
    pub fn summarize<T: Transport + ?Sized>(&mut self, transport: &T) -> Result<&SummaryRun> {
        let cfg = &self.config;
        self.summaries =
            summarize_reports(transport, &self.tokenizer, &cfg.summarizer, &self.data.reports, cfg.eval.summary_variants)?;
        save_summaries(&self.paths.summaries(), &self.summaries.records())?;
        self.manifests.clear();
        Ok(&self.summaries)
    }

    /// Builds and writes the matched, shuffled and multi-summary manifests.
    pub fn write_manifests(&mut self) -> Result<()> {
        if self.summaries.summaries.is_empty() {
            return Err(Error::Config("no summaries in this run; run summarize first".into()));
        }
        for policy in [ManifestPolicy::Matched, ManifestPolicy::Shuffled, ManifestPolicy::Multi] {
            let records = build_manifests(&self.data.records, &self.summaries.summaries, policy, self.config.seed)?;
            write_manifest(&self.paths.manifest(policy), &records)?;
            self.manifests.insert(policy_name(policy), records);
        }
        Ok(())
    }

    fn assemble(
        config: RunConfig,
        paths: RunPaths,
        data: CorpusData,
        tokenizer: Tokenizer,
        summaries: SummaryRun,
    ) -> Result<Self> {
        let schedule = make_schedule(&config.schedule.kind, config.schedule.steps)?;
        Ok(Self {
            config,
            paths,
            data,
            tokenizer,
            summaries,
            schedule,
            manifests: HashMap::new(),
            vaes: HashMap::new(),
            models: HashMap::new(),
            extractor: None,
            verbose: false,
        })
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("[{}] {msg}", self.config.run_id);
        }
    }

    /// Manifest records for `policy`, built on first use (or read from disk if present).
    pub fn manifest(&mut self, policy: ManifestPolicy) -> Result<&[PatchRecord]> {
        let key = policy_name(policy);
        if !self.manifests.contains_key(key) {
            let path = self.paths.manifest(policy);
            let records = if path.exists() {
                self.data.with_records(read_manifest(&path)?)?
            } else if self.summaries.summaries.is_empty() {
                return Err(Error::Config(format!("no {key} manifest and no summaries; run summarize first")));
            } else {
                build_manifests(&self.data.records, &self.summaries.summaries, policy, self.config.seed)?
            };
            self.manifests.insert(key, records);
        }
        Ok(&self.manifests[key])
    }

    /// Config adjusted to the geometry of `factor`.
    pub fn config_for(&self, factor: usize) -> Result<RunConfig> {
        if factor == self.config.vae.downsample_factor {
            Ok(self.config.clone())
        } else {
            self.config.with_downsample(factor)
        }
    }

    /// Autoencoder for `factor`: its checkpoint if current, else trained on the training split.
    pub fn vae(&mut self, factor: usize) -> Result<&VqVae> {
        if !self.vaes.contains_key(&factor) {
            let cfg = self.config_for(factor)?;
            let path = self.paths.vae(factor);
            let settings = (&cfg.corpus, &cfg.vae, &cfg.vae_train);
            let vae = if is_fresh(&path, &settings)? {
                VqVae::load(&path)?
            } else {
                let t0 = Instant::now();
                let images = self.data.images_at(&self.data.rows(Split::Train))?;
                let (vae, curve) = fit_vae(&images, &cfg, |_| {})?;
                vae.save(&path)?;
                write_jsonl(&path.with_extension("loss.jsonl"), &curve)?;
                write_stamp(&path, &settings)?;
                self.log(&format!("vae f={factor} trained in {:.0}s", t0.elapsed().as_secs_f64()));
                vae
            };
            self.vaes.insert(factor, vae);
        }
        Ok(&self.vaes[&factor])
    }

    /// Autoencoder for `factor` from its checkpoint only.
    pub fn load_vae(&mut self, factor: usize) -> Result<&VqVae> {
        if !self.vaes.contains_key(&factor) {
            let path = self.paths.vae(factor);
            if !path.exists() {
                return Err(Error::Config(format!("no f={factor} autoencoder at {}; run train-vae first", path.display())));
            }
            self.vaes.insert(factor, VqVae::load(&path)?);
        }
        Ok(&self.vaes[&factor])
    }

    /// Held-out reconstruction quality of the `factor` autoencoder.
    pub fn reconstruction(&mut self, factor: usize) -> Result<ReconstructionReport> {
        let images = self.data.images_at(&self.data.rows(Split::Test))?;
        reconstruction_report(self.vae(factor)?, &images)
    }

    /// FID feature extractor: its checkpoint if current, else trained.
    pub fn extractor(&mut self) -> Result<&ToyClassifier> {
        if self.extractor.is_none() {
            let path = self.paths.extractor();
            let eval = &self.config.eval;
            let settings = (&self.config.corpus, &eval.extractor, &eval.extractor_train);
            let clf = if is_fresh(&path, &settings)? {
                ToyClassifier::load(&path)?
            } else {
                let t0 = Instant::now();
                let clf = train_extractor(&self.data, &self.config)?;
                clf.save(&path)?;
                write_stamp(&path, &settings)?;
                self.log(&format!("extractor trained in {:.0}s", t0.elapsed().as_secs_f64()));
                clf
            };
            self.extractor = Some(clf);
        }
        Ok(self.extractor.as_ref().expect("set above"))
    }

    /// Unconditional denoiser trained on a differently seeded toy corpus;
    /// the starting point of `finetune` variants.
    fn pretrained_init(&mut self, factor: usize) -> Result<PathBuf> {
        let path = self.paths.ldm(&format!("pretrain-f{factor}"));
        let cfg = self.config_for(factor)?;
        let settings = (&cfg.corpus, &cfg.vae, &cfg.vae_train, &cfg.denoiser, &cfg.train, cfg.eval.pretrain_steps);
        if is_fresh(&path, &settings)? {
            return Ok(path);
        }
        let generic = make_toy_corpus(&ToyCorpusConfig { seed: cfg.seed ^ 0x9e37_79b9, ..cfg.corpus.clone() })?;
        let latents = self.vae(factor)?.encode_for_diffusion(&generic.images)?;
        let n = latents.dim(0)?;
        let data = LdmDataset { latents, conditions: TrainConditions::Class(vec![NULL_CLASS; n]) };
        let mut denoiser = cfg.denoiser.clone();
        denoiser.conditioning = ConditioningKind::Class;
        let model = Denoiser::new(denoiser, cfg.train.seed ^ 0x5a5a)?;
        let train = TrainConfig { max_steps: cfg.eval.pretrain_steps, p_uncond: 0.0, ..cfg.train.clone() };
        let t0 = Instant::now();
        let (model, _) = train_ldm(model, &data, &self.schedule, train, |_| {})?;
        model.save(&path)?;
        write_stamp(&path, &settings)?;
        self.log(&format!("generic pretraining f={factor} took {:.0}s", t0.elapsed().as_secs_f64()));
        Ok(path)
    }

    /// Denoiser of a variant with its loss curve: the checkpoint if current, else trained.
    pub fn model(&mut self, spec: &VariantSpec) -> Result<&(Denoiser, Vec<LossRecord>)> {
        let key = spec.model_key();
        if !self.models.contains_key(&key) {
            let cfg = self.config_for(spec.downsample_factor)?;
            let path = self.paths.ldm(&spec.name);
            let records = self.manifest(spec.manifest)?.to_vec();
            let digest = patch_key(&serde_json::to_string(&records)?);
            let settings = (&key, digest, &cfg.corpus, &cfg.vae, &cfg.vae_train, &cfg.denoiser, &cfg.train, cfg.eval.pretrain_steps);
            if is_fresh(&path, &settings)? {
                let model = Denoiser::load(&path)?;
                let curve_path = self.paths.loss_curve(&spec.name);
                let curve = if curve_path.exists() { read_jsonl(&curve_path)? } else { Vec::new() };
                self.models.insert(key.clone(), (model, curve));
                return Ok(&self.models[&key]);
            }
            let init = if spec.finetune { self.pretrained_init(spec.downsample_factor)?.display().to_string() } else { "scratch".into() };
            let rows = self.data.rows(Split::Train);
            self.vae(spec.downsample_factor)?;
            let latents = encode_latents(&self.vaes[&spec.downsample_factor], &self.data, &rows)?;
            let dataset = ldm_dataset(&records, &rows, latents, &self.tokenizer, spec.conditioning)?;
            let mut denoiser = cfg.denoiser.clone();
            denoiser.conditioning = spec.conditioning;
            let model = load_init(denoiser, cfg.train.seed, &init)?;
            let train = TrainConfig { summary_policy: spec.summary_policy, ..cfg.train.clone() };
            let t0 = Instant::now();
            let verbose = self.verbose;
            let name = spec.name.clone();
            let (model, curve) = train_ldm(model, &dataset, &self.schedule, train, |r| {
                if verbose && (r.step + 1) % 250 == 0 {
                    eprintln!("  [{name}] step {} loss {:.4}", r.step + 1, r.loss);
                }
            })?;
            self.log(&format!("{} trained in {:.0}s", spec.name, t0.elapsed().as_secs_f64()));
            model.save(&path)?;
            write_jsonl(&self.paths.loss_curve(&spec.name), &curve)?;
            write_stamp(&path, &settings)?;
            let points: Vec<(f64, f64)> = curve.iter().map(|r| (r.step as f64, r.loss)).collect();
            save_line_plot(&points, &self.paths.loss_curve(&spec.name).with_extension("png"))?;
            self.models.insert(key.clone(), (model, curve));
        }
        Ok(&self.models[&key])
    }

    /// Generates `n` images conditioned on `split` records of the variant's manifest.
    pub fn generate_for(
        &mut self,
        spec: &VariantSpec,
        split: Split,
        n: usize,
        sampler: &SamplerConfig,
    ) -> Result<(Tensor, Vec<PatchRecord>)> {
        self.model(spec)?;
        self.vae(spec.downsample_factor)?;
        let rows = pick_rows(&self.data, split, n, sampler.seed)?;
        let records: Vec<PatchRecord> = {
            let manifest = self.manifest(spec.manifest)?;
            rows.iter().map(|&r| manifest[r as usize].clone()).collect()
        };
        let refs: Vec<&PatchRecord> = records.iter().collect();
        let cond = condition_for(spec.conditioning, &refs, &self.tokenizer);
        let (model, _) = &self.models[&spec.model_key()];
        let t0 = Instant::now();
        let images =
            generate(model, &self.vaes[&spec.downsample_factor], &cond, sampler, &self.schedule, self.config.eval.sample_chunk)?;
        self.log(&format!("{}: {n} samples in {:.0}s", spec.name, t0.elapsed().as_secs_f64()));
        Ok((images, records))
    }

    /// FID of generated images against the real test split.
    pub fn fid_vs_test(&mut self, fake: &Tensor) -> Result<FidResult> {
        let real = self.data.images_at(&self.data.rows(Split::Test))?;
        fid(&real, fake, self.extractor()?)
    }

    /// Trains, samples (test captions) and scores one variant.
    pub fn evaluate_variant(&mut self, index: usize, spec: &VariantSpec) -> Result<AblationRow> {
        let t0 = Instant::now();
        let sampler = self.config.sampler.clone();
        let n = self.config.eval.n_samples;
        let (images, records) = self.generate_for(spec, Split::Test, n, &sampler)?;
        let refs: Vec<&PatchRecord> = records.iter().collect();
        save_samples(&self.paths.samples(&spec.name), &images, &refs)?;
        let result = self.fid_vs_test(&images)?;
        let (model, curve) = self.model(spec)?;
        let tail = curve.len().saturating_sub(50);
        let final_loss = (!curve.is_empty()).then(|| curve[tail..].iter().map(|r| r.loss).sum::<f64>() / (curve.len() - tail) as f64);
        Ok(AblationRow {
            index,
            variant: spec.name.clone(),
            fid: result.fid,
            n_real: result.n_real,
            n_fake: result.n_fake,
            guidance: sampler.guidance_scale,
            sampling_steps: sampler.num_steps,
            train_steps: curve.len(),
            final_loss,
            init: model.init_provenance().to_string(),
            extractor: result.extractor,
            seconds: t0.elapsed().as_secs_f64(),
        })
    }

    /// FID of the matched text model at each guidance scale in `scales`.
    pub fn guidance_sweep(&mut self, scales: &[f64], n: usize) -> Result<Vec<SweepRow>> {
        let Variant::Model(spec) = "matched".parse()? else { unreachable!() };
        let mut rows = Vec::new();
        for (index, &g) in scales.iter().enumerate() {
            let sampler = SamplerConfig { guidance_scale: g, ..self.config.sampler.clone() };
            let (images, _) = self.generate_for(&spec, Split::Test, n, &sampler)?;
            let r = self.fid_vs_test(&images)?;
            rows.push(SweepRow { index, guidance: g, fid: r.fid, n_fake: r.n_fake });
        }
        Ok(rows)
    }

    /// Runs `variants`, writing `ablation.jsonl`/`.txt` (and `guidance.jsonl`/`.txt` for the sweep).
    pub fn ablate(&mut self, variants: &[Variant]) -> Result<(Vec<AblationRow>, Vec<SweepRow>)> {
        let mut rows = Vec::new();
        let mut sweep = Vec::new();
        for v in variants {
            match v {
                Variant::Model(spec) => {
                    let row = self.evaluate_variant(rows.len(), spec)?;
                    self.log(&format!("{} toy-FID {:.3}", row.variant, row.fid));
                    rows.push(row);
                }
                Variant::Guidance => {
                    let scales = self.config.eval.guidance_sweep.clone();
                    sweep = self.guidance_sweep(&scales, self.config.eval.n_samples)?;
                }
            }
        }
        let root = self.paths.root().to_path_buf();
        if !rows.is_empty() {
            write_jsonl(&root.join("ablation.jsonl"), &rows)?;
            std::fs::write(root.join("ablation.txt"), ablation_table(&rows))?;
        }
        if !sweep.is_empty() {
            write_jsonl(&root.join("guidance.jsonl"), &sweep)?;
            std::fs::write(root.join("guidance.txt"), sweep_table(&sweep))?;
        }
        Ok((rows, sweep))
    }

    /// Classifier trained on `n` synthetic patches (training-split captions)
    /// versus one trained on `n` real training patches, both scored on the
    /// real test split with binary tumor labels.
    pub fn cas_experiment(&mut self, spec: &VariantSpec, n: usize) -> Result<CasOutcome> {
        let sampler = SamplerConfig { seed: self.config.sampler.seed.wrapping_add(0x00ca_5000), ..self.config.sampler.clone() };
        let (synthetic, records) = self.generate_for(spec, Split::Train, n, &sampler)?;
        let synth_labels = records.iter().map(tumor_label).collect::<Result<Vec<_>>>()?;
        let real_rows = pick_rows(&self.data, Split::Train, n, self.config.seed ^ 0x00ca_5001)?;
        let real = self.data.images_at(&real_rows)?;
        let real_labels = real_rows.iter().map(|&r| tumor_label(&self.data.records[r as usize])).collect::<Result<Vec<_>>>()?;
        let val_rows = self.data.rows(Split::Test);
        let val = self.data.images_at(&val_rows)?;
        let val_labels = val_rows.iter().map(|&r| tumor_label(&self.data.records[r as usize])).collect::<Result<Vec<_>>>()?;
        let (clf, train) = (&self.config.eval.cas_classifier, &self.config.eval.cas_train);
        let synthetic = cas(&synthetic, &synth_labels, &val, &val_labels, clf, train)?;
        let real = cas(&real, &real_labels, &val, &val_labels, clf, train)?;
        let chance = crate::metrics::majority_prior(&val_labels);
        Ok(CasOutcome { synthetic, real, chance })
    }

    pub fn record(&self, record: &impl Serialize) -> Result<()> {
        append_jsonl(&self.paths.results(), record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasOutcome {
    pub synthetic: CasReport,
    pub real: CasReport,
    /// Accuracy of always predicting the majority validation label.
    pub chance: f64,
}
