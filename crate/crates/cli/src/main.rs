use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use histodiff::config::RunConfig;
use histodiff::data::{PatchRecord, Split};
use histodiff::metrics::{fid, ToyClassifier};
use histodiff::pipeline::{
    ablation_table, load_png_dir, parse_variants, render_table, save_samples, sweep_table, Variant, VariantSpec,
    Workbench,
};
use histodiff::summarizer::{HttpTransport, MockTransport, RuleTransport, Transport};
use histodiff::Error;

#[derive(Parser, Debug)]
#[command(name = "histodiff", version, about = "Toy-scale text-conditioned latent diffusion for histology-like patches")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, propagated to every module.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; the run lives in `<out>/<run_id>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy corpus and train the tokenizer.
    GenCorpus,
    /// Summarize every report with a chat model.
    Summarize {
        /// `rule` (offline), `http` (endpoint from the environment) or `mock:DIR`.
        #[arg(long, default_value = "rule")]
        transport: String,
    },
    /// Write the matched, shuffled and multi-summary manifests.
    BuildManifests,
    /// Train the autoencoder for one downsampling factor.
    TrainVae {
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Held-out reconstruction SSIM and MSE.
    EvalRecon {
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Train the denoiser of one variant.
    TrainLdm {
        #[arg(long, default_value = "matched")]
        variant: String,
    },
    /// Generate images from a trained variant.
    Sample {
        #[arg(long, default_value = "matched")]
        variant: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Split whose captions condition the samples.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// FID between two image directories.
    EvalFid {
        /// Real images; the corpus test split when omitted.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        fake: PathBuf,
        /// Extractor checkpoint; the run's extractor when omitted.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Classification accuracy score of a variant against real training data.
    EvalCas {
        #[arg(long, default_value = "matched")]
        variant: String,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Run ablation variants and the guidance sweep, emitting comparison tables.
    Ablate {
        /// Comma-separated: ladder, f8-scratch-class, f4-scratch-class,
        /// f4-finetune-class, f4-text, matched, shuffled, random-summary, guidance.
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct SamplingArgs {
    #[arg(long)]
    guidance: Option<f64>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
}

impl SamplingArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(g) = self.guidance {
            cfg.sampler.guidance_scale = g;
        }
        if let Some(s) = self.steps {
            cfg.sampler.num_steps = s;
        }
        if let Some(e) = self.eta {
            cfg.sampler.eta = e;
        }
        if let Some(n) = self.n_samples {
            cfg.eval.n_samples = n;
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Summarize { .. } => "summarize",
            Command::BuildManifests => "build-manifests",
            Command::TrainVae { .. } => "train-vae",
            Command::EvalRecon { .. } => "eval-recon",
            Command::TrainLdm { .. } => "train-ldm",
            Command::Sample { .. } => "sample",
            Command::EvalFid { .. } => "eval-fid",
            Command::EvalCas { .. } => "eval-cas",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn sampling(&self) -> Option<&SamplingArgs> {
        match self {
            Command::Sample { sampling, .. } | Command::EvalCas { sampling, .. } | Command::Ablate { sampling, .. } => {
                Some(sampling)
            }
            _ => None,
        }
    }
}

/// One line of `results.jsonl`.
#[derive(Serialize)]
struct Record<'a, T: Serialize> {
    command: &'a str,
    run_id: &'a str,
    seed: u64,
    #[serde(flatten)]
    result: T,
}

fn resolve_config(cli: &Cli) -> histodiff::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(sampling) = cli.command.sampling() {
        sampling.apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_spec(name: &str) -> histodiff::Result<VariantSpec> {
    match name.parse::<Variant>()? {
        Variant::Model(spec) => Ok(spec),
        Variant::Guidance => Err(Error::Config("`guidance` is not a trainable variant".into())),
    }
}

fn transport(kind: &str) -> histodiff::Result<Box<dyn Transport>> {
    Ok(match kind {
        "rule" => Box::new(RuleTransport::new()),
        "http" => Box::new(HttpTransport::from_env()?),
        other => match other.strip_prefix("mock:") {
            Some(dir) => Box::new(MockTransport::from_dir(Path::new(dir))?),
            None => return Err(Error::Config(format!("unknown transport `{other}` (rule, http, mock:DIR)"))),
        },
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn record<T: Serialize>(wb: &Workbench, command: &str, result: T) -> histodiff::Result<()> {
    wb.record(&Record { command, run_id: &wb.config.run_id, seed: wb.config.seed, result })
}

fn open(cfg: RunConfig, verbose: bool) -> histodiff::Result<Workbench> {
    let mut wb = Workbench::open(cfg)?;
    wb.verbose = verbose;
    Ok(wb)
}

fn run(cli: &Cli, cfg: RunConfig) -> histodiff::Result<()> {
    let name = cli.command.name();
    match &cli.command {
        Command::GenCorpus => {
            let wb = Workbench::create(cfg)?;
            let train = wb.data.rows(Split::Train).len();
            let test = wb.data.rows(Split::Test).len();
            println!(
                "{}",
                render_table(
                    &["slides", "patches", "train", "test", "vocab"],
                    &[vec![
                        wb.data.reports.len().to_string(),
                        wb.data.records.len().to_string(),
                        train.to_string(),
                        test.to_string(),
                        wb.tokenizer.vocab_size().to_string(),
                    ]],
                )
            );
            record(&wb, name, serde_json::json!({ "patches": wb.data.records.len(), "train": train, "test": test }))
        }
        Command::Summarize { transport: kind } => {
            let mut wb = open(cfg, cli.verbose)?;
            let transport = transport(kind)?;
            let run = wb.summarize(transport.as_ref())?;
            let records = run.records();
            let truncated = records.iter().filter(|r| r.truncated).count();
            let failures = run.failures.len();
            for (slide, variant, err) in &run.failures {
                eprintln!("summary {slide}#{variant} failed: {err}");
            }
            println!(
                "{}",
                render_table(
                    &["reports", "summaries", "truncated", "failed"],
                    &[vec![
                        run.summaries.len().to_string(),
                        records.len().to_string(),
                        truncated.to_string(),
                        failures.to_string()
                    ]],
                )
            );
            let result = serde_json::json!({ "summaries": records.len(), "truncated": truncated, "failed": failures, "transport": kind });
            record(&wb, name, result)
        }
        Command::BuildManifests => {
            let mut wb = open(cfg, cli.verbose)?;
            wb.write_manifests()?;
            let rows: Vec<Vec<String>> = ["matched", "shuffled", "multi"]
                .iter()
                .map(|p| vec![p.to_string(), wb.paths.root().join("manifests").join(format!("{p}.jsonl")).display().to_string()])
                .collect();
            println!("{}", render_table(&["policy", "manifest"], &rows));
            record(&wb, name, serde_json::json!({ "manifests": 3 }))
        }
        Command::TrainVae { factor } => {
            let mut wb = open(cfg, cli.verbose)?;
            let f = factor.unwrap_or(wb.config.vae.downsample_factor);
            let latent = wb.vae(f)?.config().latent_shape();
            let path = wb.paths.vae(f);
            println!(
                "{}",
                render_table(&["factor", "latent", "checkpoint"], &[vec![
                    f.to_string(),
                    format!("{}x{}x{}", latent.0, latent.1, latent.2),
                    path.display().to_string()
                ]])
            );
            record(&wb, name, serde_json::json!({ "factor": f, "checkpoint": path }))
        }
        Command::EvalRecon { factor } => {
            let mut wb = open(cfg, cli.verbose)?;
            let f = factor.unwrap_or(wb.config.vae.downsample_factor);
            wb.load_vae(f)?;
            let report = wb.reconstruction(f)?;
            println!(
                "{}",
                render_table(&["factor", "ssim", "mse", "images"], &[vec![
                    f.to_string(),
                    fmt(report.ssim),
                    format!("{:.6}", report.mse),
                    report.n_images.to_string()
                ]])
            );
            record(&wb, name, &report)
        }
        Command::TrainLdm { variant } => {
            let spec = model_spec(variant)?;
            let mut wb = open(cfg, cli.verbose)?;
            wb.load_vae(spec.downsample_factor)?;
            let (model, curve) = wb.model(&spec)?;
            let final_loss = curve.last().map(|r| r.loss);
            let params = model.num_parameters();
            println!(
                "{}",
                render_table(&["variant", "params", "steps", "final loss"], &[vec![
                    spec.name.clone(),
                    params.to_string(),
                    curve.len().to_string(),
                    final_loss.map_or("-".into(), fmt)
                ]])
            );
            let result = serde_json::json!({ "variant": spec.name, "params": params, "steps": curve.len(), "final_loss": final_loss });
            record(&wb, name, result)
        }
        Command::Sample { variant, split, .. } => {
            let spec = model_spec(variant)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split `{other}` (train, test)"))),
            };
            let mut wb = open(cfg, cli.verbose)?;
            wb.load_vae(spec.downsample_factor)?;
            let sampler = wb.config.sampler.clone();
            let n = wb.config.eval.n_samples;
            let (images, records) = wb.generate_for(&spec, split, n, &sampler)?;
            let dir = wb.paths.samples(&spec.name);
            let refs: Vec<&PatchRecord> = records.iter().collect();
            save_samples(&dir, &images, &refs)?;
            println!(
                "{}",
                render_table(&["variant", "samples", "guidance", "steps", "eta", "dir"], &[vec![
                    spec.name.clone(),
                    n.to_string(),
                    sampler.guidance_scale.to_string(),
                    sampler.num_steps.to_string(),
                    sampler.eta.to_string(),
                    dir.display().to_string()
                ]])
            );
            let result = serde_json::json!({ "variant": spec.name, "samples": n, "sampler": sampler, "dir": dir });
            record(&wb, name, result)
        }
        Command::EvalFid { real, fake, extractor } => {
            let fake_images = load_png_dir(fake)?;
            let standalone = real.is_some() && extractor.is_some();
            let mut wb = if standalone { None } else { Some(open(cfg, cli.verbose)?) };
            let real_images = match (real, &wb) {
                (Some(dir), _) => load_png_dir(dir)?,
                (None, Some(wb)) => wb.data.images_at(&wb.data.rows(Split::Test))?,
                (None, None) => unreachable!("workbench opened when --real is absent"),
            };
            let result = match (extractor, wb.as_mut()) {
                (Some(path), _) => fid(&real_images, &fake_images, &ToyClassifier::load(path)?)?,
                (None, Some(wb)) => fid(&real_images, &fake_images, wb.extractor()?)?,
                (None, None) => unreachable!("workbench opened when --extractor is absent"),
            };
            println!(
                "{}",
                render_table(&["fid", "real", "fake", "extractor"], &[vec![
                    format!("{:.6}", result.fid),
                    result.n_real.to_string(),
                    result.n_fake.to_string(),
                    result.extractor.clone()
                ]])
            );
            let json = serde_json::json!({
                "command": name,
                "fid": result.fid,
                "n_real": result.n_real,
                "n_fake": result.n_fake,
                "extractor": result.extractor,
                "real": real,
                "fake": fake,
            });
            match &wb {
                Some(wb) => wb.record(&json),
                None => {
                    println!("{json}");
                    Ok(())
                }
            }
        }
        Command::EvalCas { variant, .. } => {
            let spec = model_spec(variant)?;
            let mut wb = open(cfg, cli.verbose)?;
            wb.load_vae(spec.downsample_factor)?;
            let n = wb.config.eval.n_samples;
            let out = wb.cas_experiment(&spec, n)?;
            println!(
                "{}",
                render_table(&["variant", "synthetic", "real", "chance", "n"], &[vec![
                    spec.name.clone(),
                    fmt(out.synthetic.accuracy),
                    fmt(out.real.accuracy),
                    fmt(out.chance),
                    n.to_string()
                ]])
            );
            record(&wb, name, &out)
        }
        Command::Ablate { variants, .. } => {
            let mut wb = open(cfg, cli.verbose)?;
            let list = variants.clone().unwrap_or_else(|| wb.config.eval.variants.join(","));
            let variants = parse_variants(&list)?;
            let (rows, sweep) = wb.ablate(&variants)?;
            if !rows.is_empty() {
                println!("{}", ablation_table(&rows));
            }
            if !sweep.is_empty() {
                println!("{}", sweep_table(&sweep));
            }
            record(&wb, name, serde_json::json!({ "variants": list, "rows": rows, "sweep": sweep }))
        }
    }
}

/// Marks a failed command in the run directory so partial artifacts are recognisable.
fn flag_failure(cfg: &RunConfig, command: &str, err: &Error) {
    let dir = cfg.run_dir();
    if std::fs::create_dir_all(&dir).is_ok() {
        let _ = std::fs::write(dir.join(format!("{command}.failed")), format!("{err}\n"));
    }
}

fn clear_failure(cfg: &RunConfig, command: &str) {
    let _ = std::fs::remove_file(cfg.run_dir().join(format!("{command}.failed")));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let command = cli.command.name();
    match run(&cli, cfg.clone()) {
        Ok(()) => {
            clear_failure(&cfg, command);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {command}: {e}");
            flag_failure(&cfg, command, &e);
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
