//! Command-line front end. Every subcommand that writes files puts them
//! under `--out` together with a manifest of SHA-256 hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::{all_pairs, cross_domain_scores, AttackReport};
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{
    generate_public_corpus, generate_synthetic_corpus, split_train_test, split_train_test_counts, Corpus, PublicSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prediction_diff, render_ansi, render_html, EvalReport, Marker};
use crate::model::ModelConfig;
use crate::privacy::calibrate;
use crate::seed::sha256_hex;
use crate::trainer::{ablate, pretrain_backbone, run_variant, PretrainOptions, RunConfig, Surgery};

/// Crate version plus the checkpoint format version written by this build.
pub const VERSION_TEXT: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1)");

#[derive(Debug, Parser)]
#[command(name = "noesis", version = VERSION_TEXT, about = "Private multi-domain fine-tuning toolkit")]
pub struct Cli {
    /// Base seed; every random draw of the command derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch-parallel work (falls back to NOE_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-domain corpus and a public corpus.
    GenCorpus(GenCorpusArgs),
    /// Pretrain and freeze a backbone on the public corpus.
    Pretrain(PretrainArgs),
    /// Print the noise multiplier for a privacy target.
    Calibrate(CalibrateArgs),
    /// Train one variant on top of a pretrained backbone.
    Train(TrainArgs),
    /// Per-domain next-token accuracy on the test split.
    Eval(EvalArgs),
    /// Cross-domain membership inference.
    Attack(AttackArgs),
    /// Remove shared prompts or domain experts from a checkpoint.
    Ablate(AblateArgs),
    /// Merge one domain's adapters into a deployable checkpoint.
    Export(ExportArgs),
    /// Per-token prediction comparison of two checkpoints on one document.
    Diff(DiffArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Documents per domain, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2500,500,400")]
    pub docs: Vec<usize>,
    /// Test documents per domain, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "test_fraction")]
    pub test_counts: Option<Vec<usize>>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Full generator parameters as JSON; overrides `--docs`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub public_docs: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub public: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model configuration JSON; built-in defaults when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub eta: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub batch: usize,
    #[arg(long)]
    pub dataset_size: usize,
    #[arg(long)]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, required_unless_present = "all")]
    pub attacker: Option<usize>,
    #[arg(long, required_unless_present = "all")]
    pub target: Option<usize>,
    /// Every ordered pair of distinct domains.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub surgery: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub domain: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Model A (e.g. the private run).
    #[arg(long)]
    pub a: PathBuf,
    /// Model B (e.g. share-nothing).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub doc_id: u64,
    #[arg(long)]
    pub html: Option<PathBuf>,
}

/// Parses `argv`, runs the command, and maps the outcome to an exit status:
/// 0 success, 1 validation error, 2 runtime failure.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("NOE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid("NOE_THREADS", format!("not a thread count: {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::invalid("threads", "must be >= 1"));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, seed.unwrap_or(0)),
        Command::Pretrain(a) => pretrain(a, seed.unwrap_or(0)),
        Command::Calibrate(a) => {
            let rec = calibrate(a.epsilon, a.delta, a.batch, a.dataset_size, a.steps)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
            Ok(())
        }
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a),
        Command::Attack(a) => attack(a),
        Command::Ablate(a) => {
            let ckpt = checkpoint::load(&a.checkpoint)?;
            let out = ablate(&ckpt, a.surgery.parse::<Surgery>()?)?;
            write_checkpoint_file(&a.out, &out)
        }
        Command::Export(a) => {
            let ckpt = checkpoint::load(&a.checkpoint)?;
            write_checkpoint_file(&a.out, &ckpt.deploy(a.domain)?)
        }
        Command::Diff(a) => diff(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let p = e.path().to_string();
        Error::invalid(if p == "." { path.display().to_string() } else { p }, e.inner().to_string())
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::write_atomic(path, bytes)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Writes `files` (relative names) under `dir` plus `manifest.json`.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = BTreeMap::new();
    for (name, bytes) in files {
        write_file(&dir.join(name), bytes)?;
        manifest.insert(name.to_string(), sha256_hex(bytes));
    }
    write_file(&dir.join("manifest.json"), &to_json(&manifest)?)
}

/// Single-file output with a sibling `<file>.manifest.json`.
fn write_checkpoint_file(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint::encode(&ckpt.meta, &ckpt.model)?;
    write_file(path, &bytes)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest: BTreeMap<String, String> = [(name.clone(), sha256_hex(&bytes))].into();
    let mpath = path.with_file_name(format!("{name}.manifest.json"));
    write_file(&mpath, &to_json(&manifest)?)
}

fn gen_corpus(a: GenCorpusArgs, seed: u64) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec::new(a.docs.clone(), seed),
    };
    let full = generate_synthetic_corpus(&spec)?;
    let split_seed = crate::seed::derive_seed(seed, "split");
    let corpus = match (&a.test_counts, a.test_fraction) {
        (Some(c), _) => split_train_test_counts(&full, c, split_seed)?,
        (None, Some(f)) => split_train_test(&full, f, split_seed)?,
        (None, None) => split_train_test(&full, 0.2, split_seed)?,
    };
    let public = generate_public_corpus(&PublicSpec::new(a.public_docs, crate::seed::derive_seed(seed, "public")))?;
    let files = [
        ("corpus.jsonl", corpus_bytes(&corpus)?),
        ("corpus.manifest.json", to_json(&corpus.manifest())?),
        ("public.jsonl", corpus_bytes(&public)?),
        ("public.manifest.json", to_json(&public.manifest())?),
    ];
    write_outputs(&a.out, &files)
}

fn corpus_bytes(c: &Corpus) -> Result<Vec<u8>> {
    Ok(c.to_jsonl()?.into_bytes())
}

fn pretrain(a: PretrainArgs, seed: u64) -> Result<()> {
    let public = Corpus::read_jsonl(&a.public)?;
    let config: ModelConfig = match &a.model {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    let opts = PretrainOptions {
        steps: a.steps,
        batch: a.batch,
        eta: a.eta,
        warmup_steps: a.steps / 10,
        seed,
    };
    let (model, report) = pretrain_backbone(&public, &config, &opts)?;
    let meta = checkpoint::CheckpointMeta::new(config, "pretrain", seed, report.steps);
    let bytes = checkpoint::encode(&meta, &model)?;
    eprintln!(
        "pretrained {} steps: held-out loss {:.4} -> {:.4}",
        report.steps, report.heldout_loss_init, report.heldout_loss_final
    );
    write_outputs(&a.out, &[("backbone.noe", bytes), ("pretrain.json", to_json(&report)?)])
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(s) = seed.or(cfg.seed) {
        cfg.plan.seed = s;
    }
    let corpus_path = a
        .corpus
        .clone()
        .or_else(|| cfg.corpus_path.clone())
        .ok_or_else(|| Error::invalid("corpus_path", "pass --corpus or set corpus_path"))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::invalid("out_dir", "pass --out or set out_dir"))?;
    let corpus = Corpus::read_jsonl(&corpus_path)?;
    let backbone = checkpoint::load(&a.backbone)?;
    let mut model = backbone.model;
    if !same_backbone_shape(&model.config, &cfg.model) {
        return Err(Error::invalid(
            "model",
            "configuration does not match the backbone checkpoint dimensions",
        ));
    }
    // Adapter and prompt sizes come from the run configuration.
    model.config = cfg.model.clone();
    let outcome = run_variant(&cfg.plan, cfg.privacy.as_ref(), &corpus, &model)?;
    if let Some(p) = &cfg.privacy {
        if let Some(w) = p.delta_warning(outcome.record.privacy_dataset_size.unwrap_or(corpus.num_train())) {
            eprintln!("warning: {w}");
        }
    }
    let mut record = outcome.record;
    record.checkpoints = vec!["model.noe".into()];
    let bytes = checkpoint::encode(&outcome.meta, &outcome.model)?;
    eprintln!(
        "trained {} in {:.1}s; test accuracy {:?}",
        record.variant, record.wall_clock_secs, record.final_eval.per_domain_accuracy
    );
    write_outputs(
        &out,
        &[
            ("model.noe", bytes),
            ("metrics.jsonl", record.metrics_jsonl().into_bytes()),
            ("summary.json", to_json(&record)?),
        ],
    )
}

fn same_backbone_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.d_model == b.d_model
        && a.d_ff == b.d_ff
        && a.n_layers == b.n_layers
        && a.n_heads == b.n_heads
        && a.vocab_size == b.vocab_size
        && a.context_length == b.context_length
        && a.n_pt == b.n_pt
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::read_jsonl(&a.corpus)?;
    let only = ckpt.meta.deployed_domain.map(|k| vec![k]);
    let (acc, pos) = evaluate(&ckpt.model, &corpus, ckpt.model.config.context_length, only.as_deref())?;
    let report = EvalReport::new(
        ckpt.meta.variant.clone().unwrap_or_else(|| ckpt.meta.stage.clone()),
        ckpt.meta.seed,
        0,
        acc,
        pos,
    );
    let bytes = to_json(&report)?;
    match &a.out {
        Some(p) => write_file(p, &bytes),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn attack(a: AttackArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::read_jsonl(&a.corpus)?;
    let pairs = if a.all {
        all_pairs(corpus.num_domains)
    } else {
        vec![(a.attacker.unwrap_or(0), a.target.unwrap_or(0))]
    };
    let len = ckpt.model.config.context_length;
    let tag = ckpt.meta.variant.clone().unwrap_or_default();
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (j, k) in pairs {
        let (scores, skipped) = cross_domain_scores(&ckpt.model, j, k, &corpus, len, &tag)?;
        let mut report = AttackReport::from_scores(&scores)?;
        report.skipped = skipped;
        eprintln!("attack {j} -> {k}: auc {:.4}, tpr@1% {:.4}", report.auc, report.tpr_at_1);
        files.push((format!("roc_{j}_{k}.csv"), report.roc_csv().into_bytes()));
        files.push((format!("scores_{j}_{k}.json"), to_json(&scores)?));
        let mut brief = report.clone();
        brief.curve = None;
        summary.push(brief);
    }
    files.push(("attack.json".into(), to_json(&summary)?));
    let refs: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    write_outputs(&a.out, &refs)
}

fn diff(a: DiffArgs) -> Result<()> {
    let ca = checkpoint::load(&a.a)?;
    let cb = checkpoint::load(&a.b)?;
    let corpus = Corpus::read_jsonl(&a.corpus)?;
    let doc = corpus
        .get(a.doc_id)
        .ok_or_else(|| Error::invalid("doc_id", format!("no document {}", a.doc_id)))?;
    let route_a = ca.meta.deployed_domain.unwrap_or(doc.domain);
    let route_b = cb.meta.deployed_domain.unwrap_or(doc.domain);
    let len = ca.model.config.context_length.min(cb.model.config.context_length);
    let d = prediction_diff((&ca.model, route_a), (&cb.model, route_b), doc, len)?;
    println!("{}", render_ansi(&d));
    println!(
        "both correct {}, both wrong {}, only A {}, only B {}",
        d.count(Marker::BothCorrect),
        d.count(Marker::BothWrong),
        d.count(Marker::OnlyACorrect),
        d.count(Marker::OnlyBCorrect)
    );
    if let Some(p) = &a.html {
        write_file(p, render_html(&d, &format!("document {}", a.doc_id)).as_bytes())?;
    }
    Ok(())
}
