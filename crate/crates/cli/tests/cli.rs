use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histodiff::config::{RunConfig, RESOLVED_CONFIG_FILE};

const TINY: &str = r#"
run_id = "tiny"
seed = 3

[corpus]
n_slides = 4
patches_per_slide = 8
train_fraction = 0.5

[tokenizer]
vocab_size = 300

[vae_train]
steps = 3
batch_size = 4

[denoiser]
base_width = 8
channel_mult = [1, 1, 1]
context_dim = 16
time_embed_dim = 16
heads = 2
groups = 4
conditioning = "text"

[denoiser.text_encoder]
vocab_size = 300
d_model = 16
layers = 1
heads = 2
frozen = true

[train]
max_steps = 2
batch_size = 4
lr = 1e-3
warmup_steps = 1

[sampler]
num_steps = 2

[eval]
n_samples = 6
sample_chunk = 4
summary_variants = 2
guidance_sweep = [0.1, 1.0, 3.0]
pretrain_steps = 2

[eval.extractor_train]
epochs = 1
batch_size = 16
lr_milestones = []
"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("tiny")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_histodiff"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn results(root: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(root.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_through_the_cli() {
    let run = Run::new();
    let root = run.root();
    run.ok(&["gen-corpus"]);
    let resolved = RunConfig::load(&root.join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(resolved.seed, 3);
    assert_eq!(resolved.corpus.seed, 3);

    // Prerequisites are reported as usage errors and flagged.
    let early = run.cmd(&["train-ldm"]);
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("train-vae"));
    assert!(root.join("train-ldm.failed").exists());

    run.ok(&["summarize", "--transport", "rule"]);
    run.ok(&["build-manifests"]);
    for p in ["matched", "shuffled", "multi"] {
        assert!(root.join("manifests").join(format!("{p}.jsonl")).exists());
    }
    run.ok(&["train-vae", "--factor", "4"]);
    let recon = run.ok(&["eval-recon", "--factor", "4"]);
    assert!(recon.contains("ssim"));
    run.ok(&["train-ldm", "--variant", "matched"]);
    assert!(!root.join("train-ldm.failed").exists());

    let table = run.ok(&["sample", "--variant", "matched", "--guidance", "1.75", "--steps", "2", "--n-samples", "6"]);
    assert!(table.contains("1.75"));
    let samples = root.join("samples").join("matched");
    let first = read_dir_bytes(&samples);
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".png")).count(), 6);
    assert!(root.join("samples").join("matched.grid.png").exists());

    // Same config, same inputs: identical artifacts.
    run.ok(&["sample", "--variant", "matched", "--guidance", "1.75", "--steps", "2", "--n-samples", "6"]);
    assert_eq!(read_dir_bytes(&samples), first);

    let dir = samples.to_str().unwrap();
    run.ok(&["eval-fid", "--real", dir, "--fake", dir]);
    let last = results(&root).pop().unwrap();
    assert_eq!(last["command"], "eval-fid");
    assert!(last["fid"].as_f64().unwrap() <= 1e-6);

    let extractor = root.join("extractor.safetensors");
    let out = run.cmd(&["eval-fid", "--real", dir, "--fake", dir, "--extractor", extractor.to_str().unwrap()]);
    assert!(out.status.success());

    let sweep = run.ok(&["ablate", "--variants", "guidance"]);
    let indices: Vec<usize> = sweep.lines().skip(2).filter_map(|l| l.split_whitespace().next()?.parse().ok()).collect();
    assert_eq!(indices, vec![0, 1, 2]);
    let rows = std::fs::read_to_string(root.join("guidance.jsonl")).unwrap();
    let guidance: Vec<f64> = rows
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["guidance"].as_f64().unwrap())
        .collect();
    assert_eq!(guidance, vec![0.1, 1.0, 3.0]);

    let records = results(&root);
    let commands: Vec<&str> = records.iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert!(commands.contains(&"train-ldm") && commands.contains(&"ablate"));
}

#[test]
fn mock_transport_summaries() {
    let run = Run::new();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/summarizer/responses");
    run.ok(&["gen-corpus"]);
    let transport = format!("mock:{}", fixtures.display());
    let table = run.ok(&["summarize", "--transport", &transport]);
    assert!(table.contains("summaries"));
    let text = std::fs::read_to_string(run.root().join("summaries.jsonl")).unwrap();
    // Four reports, two variants each.
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let run = Run::new();
    assert_eq!(run.cmd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["sample", "--steps", "many"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["--set", "train.no_such_key=1", "gen-corpus"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["summarize", "--transport", "pigeon"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["ablate", "--variants", "bogus"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["--help"]).status.code(), Some(0));

    let missing = Command::new(env!("CARGO_BIN_EXE_histodiff"))
        .args(["--config", "/nonexistent/run.toml", "gen-corpus"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let run = Run::new();
    run.ok(&["gen-corpus"]);
    let out = run.cmd(&["eval-fid", "--fake", run.dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(run.root().join("eval-fid.failed").exists());
}

#[test]
fn overrides_and_seed_reach_the_resolved_config() {
    let run = Run::new();
    run.ok(&["--seed", "11", "--set", "train.lr=0.25", "--set", "run_id=\"other\"", "gen-corpus"]);
    let resolved = RunConfig::load(&run.dir.path().join("other").join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(resolved.train.lr, 0.25);
    assert_eq!(resolved.seed, 11);
    assert_eq!(resolved.train.seed, 13);
}
