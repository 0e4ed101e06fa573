//! Backbone pretraining, the two-stage private recipe, the baseline
//! variants, and ablation surgery.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{backbone_hash, prompts_hash, Checkpoint, CheckpointMeta};
use crate::corpus::{sample_epoch_blocks, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{ExpertSet, Model, ModelConfig, ParamSubset};
use crate::optim::{lr_at, Optimizer, OptimizerKind};
use crate::privacy::{dp_sgd_step, sgd_step, CalibrationRecord, DpStepConfig, PrivacySpec, StepStats};
use crate::seed::derive_seed;

/// Loss above which a step is treated as divergence.
const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// DP shared prompts, then non-private per-domain experts.
    NoesisPt,
    /// DP shared common adapter, then non-private per-domain experts.
    NoesisRc,
    ShareNothing,
    /// DP full fine-tuning on one domain only.
    Solo(usize),
    /// DP full fine-tuning on all domains pooled.
    Monolithic,
    /// A single DP low-rank adapter shared by all domains.
    CommonLora,
    /// Stage one of the recipe alone.
    PromptOnly,
    /// The recipe with clipping and noise disabled.
    NonPrivateNoesis,
}

impl Variant {
    pub const ALL_NAMES: [&'static str; 8] = [
        "noesis_pt",
        "noesis_rc",
        "share_nothing",
        "solo:<k>",
        "monolithic",
        "common_lora",
        "prompt_only",
        "non_private_noesis",
    ];

    /// Whether the variant trains something under DP.
    pub fn is_private(self) -> bool {
        !matches!(self, Self::ShareNothing | Self::NonPrivateNoesis)
    }

    pub fn has_stage1(self) -> bool {
        !matches!(self, Self::ShareNothing)
    }

    pub fn has_stage2(self) -> bool {
        matches!(
            self,
            Self::NoesisPt | Self::NoesisRc | Self::ShareNothing | Self::NonPrivateNoesis
        )
    }

    fn uses_prompts(self) -> bool {
        matches!(self, Self::NoesisPt | Self::PromptOnly | Self::NonPrivateNoesis)
    }

    fn uses_common(self) -> bool {
        matches!(self, Self::NoesisRc | Self::CommonLora)
    }

    fn trains_backbone(self) -> bool {
        matches!(self, Self::Solo(_) | Self::Monolithic)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoesisPt => f.write_str("noesis_pt"),
            Self::NoesisRc => f.write_str("noesis_rc"),
            Self::ShareNothing => f.write_str("share_nothing"),
            Self::Solo(k) => write!(f, "solo:{k}"),
            Self::Monolithic => f.write_str("monolithic"),
            Self::CommonLora => f.write_str("common_lora"),
            Self::PromptOnly => f.write_str("prompt_only"),
            Self::NonPrivateNoesis => f.write_str("non_private_noesis"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noesis_pt" | "noesis" => Self::NoesisPt,
            "noesis_rc" => Self::NoesisRc,
            "share_nothing" => Self::ShareNothing,
            "monolithic" => Self::Monolithic,
            "common_lora" => Self::CommonLora,
            "prompt_only" => Self::PromptOnly,
            "non_private_noesis" => Self::NonPrivateNoesis,
            _ => match s.strip_prefix("solo:").map(str::parse::<usize>) {
                Some(Ok(k)) => Self::Solo(k),
                _ => {
                    return Err(Error::invalid(
                        "plan.variant",
                        format!("unknown variant {s:?}; expected one of {}", Self::ALL_NAMES.join(", ")),
                    ))
                }
            },
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

fn default_eta() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    50
}
fn default_epochs() -> usize {
    12
}
fn default_batch1() -> usize {
    24
}
fn default_batch2() -> usize {
    16
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub variant: Variant,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Stage-two peak learning rate; `eta` when absent.
    #[serde(default)]
    pub eta_stage2: Option<f64>,
    /// Linear warmup length of each stage, in optimizer steps.
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    /// Defaults to 12 when the variant has the stage, 0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_stage1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_stage2: Option<usize>,
    #[serde(default = "default_batch1")]
    pub batch_stage1: usize,
    #[serde(default = "default_batch2")]
    pub batch_stage2: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Record per-domain test accuracy after every epoch.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
}

impl TrainPlan {
    pub fn new(variant: Variant, epochs_stage1: usize, epochs_stage2: usize, seed: u64) -> Self {
        Self {
            variant,
            eta: default_eta(),
            eta_stage2: None,
            warmup_steps: default_warmup(),
            epochs_stage1: Some(epochs_stage1),
            epochs_stage2: Some(epochs_stage2),
            batch_stage1: default_batch1(),
            batch_stage2: default_batch2(),
            optimizer: OptimizerKind::default(),
            seed,
            eval_each_epoch: true,
        }
    }

    pub fn stage1_epochs(&self) -> usize {
        self.epochs_stage1
            .unwrap_or(if self.variant.has_stage1() { default_epochs() } else { 0 })
    }

    pub fn stage2_epochs(&self) -> usize {
        self.epochs_stage2
            .unwrap_or(if self.variant.has_stage2() { default_epochs() } else { 0 })
    }

    /// Structural checks against the model configuration and privacy target.
    pub fn validate(&self, model: &ModelConfig, privacy: Option<&PrivacySpec>) -> Result<()> {
        let v = self.variant;
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("plan.eta", format!("must be > 0, got {}", self.eta)));
        }
        if let Some(e) = self.eta_stage2 {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::invalid("plan.eta_stage2", format!("must be > 0, got {e}")));
            }
        }
        if self.batch_stage1 == 0 {
            return Err(Error::invalid("plan.batch_stage1", "must be >= 1"));
        }
        if self.batch_stage2 == 0 {
            return Err(Error::invalid("plan.batch_stage2", "must be >= 1"));
        }
        match (v.has_stage1(), self.stage1_epochs()) {
            (true, 0) => return Err(Error::invalid("plan.epochs_stage1", format!("{v} needs >= 1 epoch"))),
            (false, n) if n > 0 => {
                return Err(Error::invalid("plan.epochs_stage1", format!("{v} has no first stage")))
            }
            _ => {}
        }
        // Zero stage-two epochs leave the freshly initialized, inert experts.
        match (v.has_stage2(), self.stage2_epochs()) {
            (false, n) if n > 0 => {
                return Err(Error::invalid("plan.epochs_stage2", format!("{v} has no second stage")))
            }
            _ => {}
        }
        match (v.is_private(), privacy) {
            (true, None) => {
                return Err(Error::invalid("privacy", format!("{v} trains under DP and needs a privacy target")))
            }
            (false, Some(_)) => {
                return Err(Error::invalid("privacy", format!("{v} is non-private; remove the privacy target")))
            }
            (_, Some(p)) => p.validate()?,
            _ => {}
        }
        if v.uses_prompts() && model.n_pt == 0 {
            return Err(Error::invalid("model.n_pt", format!("{v} needs at least one prompt token")));
        }
        if v.uses_common() && model.common_rank == 0 {
            return Err(Error::invalid("model.common_rank", format!("{v} needs a common adapter")));
        }
        if let Variant::Solo(k) = v {
            if k >= model.num_domains {
                return Err(Error::Domain {
                    domain: k,
                    k: model.num_domains,
                });
            }
        }
        Ok(())
    }
}

/// Top-level training configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    #[serde(default)]
    pub privacy: Option<PrivacySpec>,
    /// Defaults for the `--corpus` and `--out` flags.
    #[serde(default)]
    pub corpus_path: Option<std::path::PathBuf>,
    #[serde(default)]
    pub out_dir: Option<std::path::PathBuf>,
    /// Overrides `plan.seed`; the `--seed` flag overrides both.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Strict parse; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::invalid(if path == "." { "config".into() } else { path }, e.inner().to_string())
        })?;
        cfg.model.validate()?;
        cfg.plan.validate(&cfg.model, cfg.privacy.as_ref())?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub stage: String,
    pub epoch: usize,
    pub accuracy: Vec<f64>,
}

/// Everything needed to reproduce a run's reported numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub privacy: Option<CalibrationRecord>,
    /// `N` used by the accountant.
    pub privacy_dataset_size: Option<usize>,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub final_loss_stage1: Option<f64>,
    pub final_loss_stage2: Option<f64>,
    pub epoch_evals: Vec<EpochEval>,
    pub final_eval: EvalReport,
    pub backbone_hash: String,
    pub prompts_hash: Option<String>,
    /// Relative to the run's output directory.
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(skip)]
    pub metrics: Vec<StepRecord>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One JSON object per optimizer step.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("step record serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub record: RunRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub eta: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl PretrainOptions {
    pub fn new(steps: u64, seed: u64) -> Self {
        Self {
            steps,
            batch: 32,
            eta: 1e-3,
            warmup_steps: steps / 10,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    /// Mean loss over the held-out public documents before and after.
    pub heldout_loss_init: f64,
    pub heldout_loss_final: f64,
    pub train_losses: Vec<f64>,
    pub backbone_hash: String,
}

fn check_loss(step: u64, stats: &StepStats) -> Result<()> {
    if !stats.loss.is_finite() || stats.loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged {
            step: step as usize,
            loss: stats.loss,
        });
    }
    Ok(())
}

/// Every tenth public document is held out from pretraining.
fn is_heldout(doc: &crate::corpus::Document) -> bool {
    doc.id % 10 == 0
}

fn heldout_loss(model: &Model<f32>, docs: &[&crate::corpus::Document]) -> Result<f64> {
    use rayon::prelude::*;
    let len = model.config.context_length;
    let losses: Vec<Result<Option<f64>>> = docs
        .par_iter()
        .map(|d| {
            let mut b = crate::corpus::first_window(d, len);
            b.domain = 0;
            if b.real_len() < 2 {
                return Ok(None);
            }
            crate::model::loss_from_logits(&model.forward(0, &b)?, &b).map(Some)
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0;
    for l in losses {
        if let Some(v) = l? {
            sum += v;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Trains a fresh backbone on the public corpus with the plain objective,
/// then freezes it. Zero steps yields the frozen random initialization.
pub fn pretrain_backbone(
    public: &Corpus,
    config: &ModelConfig,
    opts: &PretrainOptions,
) -> Result<(Model<f32>, PretrainReport)> {
    config.validate()?;
    if opts.batch == 0 {
        return Err(Error::invalid("pretrain.batch", "must be >= 1"));
    }
    if public.vocab_size > config.vocab_size {
        return Err(Error::invalid(
            "vocab_size",
            format!("corpus vocabulary {} exceeds model vocabulary {}", public.vocab_size, config.vocab_size),
        ));
    }
    let mut train = public.clone();
    train.documents.retain(|d| !is_heldout(d));
    let heldout: Vec<&crate::corpus::Document> = public.documents.iter().filter(|d| is_heldout(d)).collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "pretrain/init"));
    let mut model = Model::<f32>::init(config.clone(), &mut init_rng)?;
    let heldout_loss_init = heldout_loss(&model, &heldout)?;
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment);
    let batch_seed = derive_seed(opts.seed, "pretrain/batches");
    let mut losses = Vec::with_capacity(opts.steps as usize);
    let mut step = 0u64;
    let mut epoch = 0;
    // Public documents all route through domain 0; no adapters exist yet.
    while step < opts.steps {
        let mut blocks = sample_epoch_blocks(&train, config.context_length, batch_seed, epoch)?;
        for b in &mut blocks {
            b.domain = 0;
        }
        for chunk in blocks.chunks(opts.batch) {
            step += 1;
            let lr = lr_at(opts.eta, step, opts.warmup_steps, opts.steps);
            let stats = sgd_step(&mut model, &ParamSubset::BACKBONE, chunk, &mut opt, lr)?;
            check_loss(step, &stats)?;
            losses.push(stats.loss);
            if step >= opts.steps {
                break;
            }
        }
        epoch += 1;
    }
    model.freeze_backbone();
    let report = PretrainReport {
        steps: step,
        heldout_loss_init,
        heldout_loss_final: heldout_loss(&model, &heldout)?,
        train_losses: losses,
        backbone_hash: backbone_hash(&model),
    };
    Ok((model, report))
}

struct Stage<'a> {
    name: &'static str,
    train: &'a Corpus,
    subset: ParamSubset,
    epochs: usize,
    batch: usize,
    eta: f64,
    dp: Option<DpStepConfig>,
    eval_domains: Option<Vec<usize>>,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn run_stage(
    model: &mut Model<f32>,
    stage: &Stage<'_>,
    plan: &TrainPlan,
    eval_corpus: &Corpus,
    record: &mut RunRecord,
) -> Result<(u64, Option<f64>)> {
    let n = stage.train.num_train();
    let total = stage.epochs as u64 * steps_per_epoch(n, stage.batch);
    let warmup = plan.warmup_steps;
    let batch_seed = derive_seed(plan.seed, &format!("{}/batches", stage.name));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &format!("{}/noise", stage.name)));
    let mut opt = Optimizer::new(plan.optimizer);
    let len = model.config.context_length;
    let mut step = 0u64;
    let mut last = None;
    for epoch in 0..stage.epochs {
        let blocks = sample_epoch_blocks(stage.train, len, batch_seed, epoch)?;
        for chunk in blocks.chunks(stage.batch) {
            step += 1;
            let lr = lr_at(stage.eta, step, warmup, total);
            let stats = match &stage.dp {
                Some(dp) => dp_sgd_step(model, &stage.subset, chunk, dp, &mut opt, lr, &mut noise_rng)?,
                None => sgd_step(model, &stage.subset, chunk, &mut opt, lr)?,
            };
            check_loss(step, &stats)?;
            last = Some(stats.loss);
            record.metrics.push(StepRecord {
                stage: stage.name.to_string(),
                step,
                epoch,
                loss: stats.loss,
                grad_norm_preclip: stats.grad_norm_preclip,
                lr,
            });
        }
        if plan.eval_each_epoch {
            let (accuracy, _) = evaluate(model, eval_corpus, len, stage.eval_domains.as_deref())?;
            record.epoch_evals.push(EpochEval {
                stage: stage.name.to_string(),
                epoch,
                accuracy,
            });
        }
    }
    Ok((step, last))
}

/// Trains `plan.variant` on top of a pretrained `backbone`.
pub fn run_variant(
    plan: &TrainPlan,
    privacy: Option<&PrivacySpec>,
    corpus: &Corpus,
    backbone: &Model<f32>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let cfg = backbone.config.clone();
    plan.validate(&cfg, privacy)?;
    if corpus.num_domains != cfg.num_domains {
        return Err(Error::invalid(
            "model.num_domains",
            format!("corpus has {} domains, model {}", corpus.num_domains, cfg.num_domains),
        ));
    }
    if corpus.vocab_size > cfg.vocab_size {
        return Err(Error::invalid("model.vocab_size", "smaller than the corpus vocabulary"));
    }
    let v = plan.variant;
    let mut model = backbone.clone();
    model.prompts = None;
    model.experts = None;
    model.backbone_frozen = !v.trains_backbone();
    let bb_before = backbone_hash(&model);

    let restricted;
    let (stage1_corpus, eval_domains) = match v {
        Variant::Solo(k) => {
            restricted = corpus.restrict_to_domain(k);
            (&restricted, Some(vec![k]))
        }
        _ => (corpus, None),
    };

    let mut record = RunRecord {
        variant: v.to_string(),
        seed: plan.seed,
        model: cfg.clone(),
        plan: plan.clone(),
        privacy: None,
        privacy_dataset_size: None,
        steps_stage1: 0,
        steps_stage2: 0,
        final_loss_stage1: None,
        final_loss_stage2: None,
        epoch_evals: Vec::new(),
        final_eval: EvalReport::new(v.to_string(), plan.seed, 0, Vec::new(), Vec::new()),
        backbone_hash: String::new(),
        prompts_hash: None,
        checkpoints: Vec::new(),
        metrics: Vec::new(),
        wall_clock_secs: 0.0,
    };

    if v.uses_prompts() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "prompts/init"));
        model.init_prompts(&mut rng);
    }
    if v.uses_common() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "common/init"));
        let mut e = ExpertSet::empty(&cfg);
        e.common = Some(ExpertSet::init_common(&cfg, &mut rng)?);
        model.experts = Some(e);
    }

    if v.has_stage1() {
        let n = stage1_corpus.num_train();
        let steps = plan.stage1_epochs() as u64 * steps_per_epoch(n, plan.batch_stage1);
        let dp = match privacy {
            Some(p) => {
                let cal = p.resolve(plan.batch_stage1, n, steps)?;
                let dp = DpStepConfig {
                    sigma: cal.sigma,
                    clip_norm: p.clip_norm,
                    batch_size: plan.batch_stage1,
                };
                record.privacy = Some(cal);
                record.privacy_dataset_size = Some(n);
                Some(dp)
            }
            None => None,
        };
        let subset = if v.uses_prompts() {
            ParamSubset::PROMPTS
        } else if v.uses_common() {
            ParamSubset::COMMON
        } else {
            ParamSubset::BACKBONE
        };
        let stage = Stage {
            name: "stage1",
            train: stage1_corpus,
            subset,
            epochs: plan.stage1_epochs(),
            batch: plan.batch_stage1,
            eta: plan.eta,
            dp,
            eval_domains: eval_domains.clone(),
        };
        let (s, l) = run_stage(&mut model, &stage, plan, corpus, &mut record)?;
        record.steps_stage1 = s;
        record.final_loss_stage1 = l;
    }

    if v.has_stage2() {
        let shared_before = prompts_hash(&model);
        let common_before = model.experts.as_ref().and_then(|e| e.common.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "experts/init"));
        let fresh = ExpertSet::<f32>::init_experts(&cfg, &mut rng);
        match &mut model.experts {
            Some(e) => e.domains = fresh.domains,
            None => model.experts = Some(fresh),
        }
        let stage = Stage {
            name: "stage2",
            train: corpus,
            subset: ParamSubset::EXPERTS,
            epochs: plan.stage2_epochs(),
            batch: plan.batch_stage2,
            eta: plan.eta_stage2.unwrap_or(plan.eta),
            dp: None,
            eval_domains: None,
        };
        let (s, l) = run_stage(&mut model, &stage, plan, corpus, &mut record)?;
        record.steps_stage2 = s;
        record.final_loss_stage2 = l;
        if prompts_hash(&model) != shared_before
            || model.experts.as_ref().and_then(|e| e.common.clone()) != common_before
        {
            return Err(Error::invalid("stage2", "shared parameters changed during expert training"));
        }
    }

    if model.backbone_frozen && backbone_hash(&model) != bb_before {
        return Err(Error::invalid("backbone", "frozen backbone changed during training"));
    }

    let len = cfg.context_length;
    let (acc, pos) = evaluate(&model, corpus, len, eval_domains.as_deref())?;
    let epochs = plan.stage1_epochs() + plan.stage2_epochs();
    record.final_eval = EvalReport::new(v.to_string(), plan.seed, epochs, acc, pos);
    record.backbone_hash = backbone_hash(&model);
    record.prompts_hash = model.prompts.is_some().then(|| prompts_hash(&model));
    record.wall_clock_secs = started.elapsed().as_secs_f64();

    let mut meta = CheckpointMeta::new(
        cfg,
        if v.has_stage2() { "stage2" } else { "stage1" },
        plan.seed,
        record.steps_stage1 + record.steps_stage2,
    );
    meta.backbone_frozen = model.backbone_frozen;
    meta.variant = Some(v.to_string());
    meta.privacy = record.privacy.clone();
    Ok(TrainOutcome { model, meta, record })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surgery {
    RemoveSharedPrompts,
    RemoveDomainExperts,
}

impl fmt::Display for Surgery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RemoveSharedPrompts => "remove_shared_prompts",
            Self::RemoveDomainExperts => "remove_domain_experts",
        })
    }
}

impl FromStr for Surgery {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove_shared_prompts" => Ok(Self::RemoveSharedPrompts),
            "remove_domain_experts" => Ok(Self::RemoveDomainExperts),
            _ => Err(Error::invalid(
                "surgery",
                format!("unknown surgery {s:?}; expected remove_shared_prompts or remove_domain_experts"),
            )),
        }
    }
}

/// Removes one component from a trained checkpoint. The prompt block is
/// dropped without reindexing positions, so real tokens keep the positional
/// rows they were trained with. A checkpoint is operated on at most once.
pub fn ablate(ckpt: &Checkpoint, surgery: Surgery) -> Result<Checkpoint> {
    if let Some(prev) = &ckpt.meta.surgery {
        return Err(Error::invalid(
            "surgery",
            format!("checkpoint already ablated ({prev}); surgeries do not compose"),
        ));
    }
    let mut model = ckpt.model.clone();
    match surgery {
        Surgery::RemoveSharedPrompts => {
            if model.prompts.is_none() {
                return Err(Error::invalid("surgery", "checkpoint has no shared prompts"));
            }
            model.prompts = None;
        }
        Surgery::RemoveDomainExperts => {
            let Some(e) = &mut model.experts else {
                return Err(Error::invalid("surgery", "checkpoint has no domain experts"));
            };
            if !e.has_experts() {
                return Err(Error::invalid("surgery", "checkpoint has no domain experts"));
            }
            e.domains.clear();
            if e.common.is_none() {
                model.experts = None;
            }
        }
    }
    let mut meta = ckpt.meta.clone();
    meta.surgery = Some(surgery.to_string());
    Ok(Checkpoint { meta, model })
}
