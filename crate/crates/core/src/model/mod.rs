//! Tiny decoder-only transformer with a frozen backbone, a prepended block of
//! shared prompt embeddings, and domain-routed low-rank adapters on both FFN
//! matrices of every layer.
//!
//! Sequence layout: `[P; X]`. Prompt rows occupy positional-embedding rows
//! `0..n_pt`; real tokens always use rows `n_pt..n_pt + L`, whether or not a
//! prompt block is attached, so detaching the prompts leaves every real
//! token's position unchanged.

mod forward;
mod merge;

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Mat};

pub use forward::{loss_from_logits, PerSampleGrads};
pub use merge::{lora_effective_weight, DeployedModel};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Number of shared prompt tokens.
    pub n_pt: usize,
    pub num_domains: usize,
    /// Expert adapter rank.
    pub rank: usize,
    /// Common adapter rank, 0 disables it.
    pub common_rank: usize,
    /// Adapter scaling; `1 / rank` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 128,
            context_length: 64,
            n_pt: 8,
            num_domains: 3,
            rank: 8,
            common_rank: 2,
            alpha: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("num_domains", self.num_domains),
            ("rank", self.rank),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name}"), "must be >= 1"));
            }
        }
        if self.context_length < 2 {
            return Err(Error::invalid("model.context_length", "must be >= 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(
                "model.n_heads",
                format!("d_model {} not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::invalid("model.alpha", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0 / self.rank as f64)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Trainable shared-parameter count of the prompt block.
    pub fn prompt_param_count(&self) -> usize {
        self.n_pt * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Float> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Mat::filled(1, d, T::one()),
            bias: Mat::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2: LayerNorm<T>,
    /// `d_model × d_ff`
    pub w_in: Mat<T>,
    /// `d_ff × d_model`
    pub w_out: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub layers: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    /// `d_model × V`
    pub lm_head: Mat<T>,
}

impl<T: Float> Backbone<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: Mat::randn(d, d, INIT_STD, rng),
                wk: Mat::randn(d, d, INIT_STD, rng),
                wv: Mat::randn(d, d, INIT_STD, rng),
                wo: Mat::randn(d, d, INIT_STD, rng),
                ln2: LayerNorm::new(d),
                w_in: Mat::randn(d, cfg.d_ff, INIT_STD, rng),
                w_out: Mat::randn(cfg.d_ff, d, INIT_STD, rng),
            })
            .collect();
        Self {
            tok_emb: Mat::randn(cfg.vocab_size, d, INIT_STD, rng),
            pos_emb: Mat::randn(cfg.n_pt + cfg.context_length, d, INIT_STD, rng),
            layers,
            ln_f: LayerNorm::new(d),
            lm_head: Mat::randn(d, cfg.vocab_size, INIT_STD, rng),
        }
    }
}

/// Low-rank pair for a `p × q` matrix: `B` is `p × r`, `A` is `r × q`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Float> LoraPair<T> {
    /// `A` Gaussian, `B` zero: the product starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(p: usize, q: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            a: Mat::randn(rank, q, INIT_STD, rng),
            b: Mat::zeros(p, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// Adapters for the two FFN matrices of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter<T> {
    pub w_in: LoraPair<T>,
    pub w_out: LoraPair<T>,
}

impl<T: Float> LayerAdapter<T> {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rank: usize, rng: &mut R) -> Self {
        Self {
            w_in: LoraPair::init(cfg.d_model, cfg.d_ff, rank, rng),
            w_out: LoraPair::init(cfg.d_ff, cfg.d_model, rank, rng),
        }
    }

    pub fn pair(&self, m: FfnMat) -> &LoraPair<T> {
        match m {
            FfnMat::Wi => &self.w_in,
            FfnMat::Wo => &self.w_out,
        }
    }
}

/// Per-domain experts plus the optional common adapter.
///
/// Routing is one-hot by domain label: an input of domain `k` sees
/// `W + α·B⁽ᵏ⁾A⁽ᵏ⁾ (+ α·B⁽ᶜ⁾A⁽ᶜ⁾)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet<T> {
    pub alpha: f64,
    /// `domains[k][layer]`; empty when only the common adapter is used.
    pub domains: Vec<Vec<LayerAdapter<T>>>,
    pub common: Option<Vec<LayerAdapter<T>>>,
}

impl<T: Float> ExpertSet<T> {
    pub fn init_experts<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            alpha: cfg.alpha(),
            domains: (0..cfg.num_domains)
                .map(|_| {
                    (0..cfg.n_layers)
                        .map(|_| LayerAdapter::init(cfg, cfg.rank, rng))
                        .collect()
                })
                .collect(),
            common: None,
        }
    }

    pub fn init_common<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Vec<LayerAdapter<T>>> {
        if cfg.common_rank == 0 {
            return Err(Error::invalid("model.common_rank", "common adapter disabled (rank 0)"));
        }
        Ok((0..cfg.n_layers)
            .map(|_| LayerAdapter::init(cfg, cfg.common_rank, rng))
            .collect())
    }

    pub fn empty(cfg: &ModelConfig) -> Self {
        Self {
            alpha: cfg.alpha(),
            domains: Vec::new(),
            common: None,
        }
    }

    pub fn has_experts(&self) -> bool {
        !self.domains.is_empty()
    }

    /// `W + α·B⁽ᵏ⁾A⁽ᵏ⁾ (+ α·B⁽ᶜ⁾A⁽ᶜ⁾)` for the given FFN matrix of `layer`.
    pub fn effective_weight(
        &self,
        w: &Mat<T>,
        domain: usize,
        layer: usize,
        which: FfnMat,
    ) -> Result<Mat<T>> {
        let expert = if self.has_experts() {
            let per_domain = self.domains.get(domain).ok_or(Error::Domain {
                domain,
                k: self.domains.len(),
            })?;
            Some(per_domain[layer].pair(which))
        } else {
            None
        };
        let common = self.common.as_ref().map(|c| c[layer].pair(which));
        lora_effective_weight(w, expert, common, self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FfnMat {
    Wi,
    Wo,
}

impl FfnMat {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wi => "Wi",
            Self::Wo => "Wo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnMat {
    Q,
    K,
    V,
    O,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LnSlot {
    Ln1,
    Ln2,
}

/// Identity of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    TokEmb,
    PosEmb,
    LnGain(usize, LnSlot),
    LnBias(usize, LnSlot),
    Attn(usize, AttnMat),
    Ffn(usize, FfnMat),
    FinalLnGain,
    FinalLnBias,
    LmHead,
    Prompts,
    Expert {
        domain: usize,
        layer: usize,
        mat: FfnMat,
        factor: Factor,
    },
    Common {
        layer: usize,
        mat: FfnMat,
        factor: Factor,
    },
}

impl ParamId {
    pub fn is_backbone(&self) -> bool {
        !matches!(self, Self::Prompts | Self::Expert { .. } | Self::Common { .. })
    }
}

impl fmt::Display for ParamId {
    /// Checkpoint section name.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ln = |s: &LnSlot| match s {
            LnSlot::Ln1 => "ln1",
            LnSlot::Ln2 => "ln2",
        };
        let fac = |x: &Factor| match x {
            Factor::A => "A",
            Factor::B => "B",
        };
        match self {
            Self::TokEmb => write!(f, "backbone/tok_emb"),
            Self::PosEmb => write!(f, "backbone/pos_emb"),
            Self::LnGain(l, s) => write!(f, "backbone/{l}/{}/gain", ln(s)),
            Self::LnBias(l, s) => write!(f, "backbone/{l}/{}/bias", ln(s)),
            Self::Attn(l, m) => {
                let n = match m {
                    AttnMat::Q => "wq",
                    AttnMat::K => "wk",
                    AttnMat::V => "wv",
                    AttnMat::O => "wo",
                };
                write!(f, "backbone/{l}/attn/{n}")
            }
            Self::Ffn(l, m) => write!(f, "backbone/{l}/ffn/{}", m.name()),
            Self::FinalLnGain => write!(f, "backbone/ln_f/gain"),
            Self::FinalLnBias => write!(f, "backbone/ln_f/bias"),
            Self::LmHead => write!(f, "backbone/lm_head"),
            Self::Prompts => write!(f, "prompts/P"),
            Self::Expert {
                domain,
                layer,
                mat,
                factor,
            } => write!(f, "expert/{domain}/{layer}/{}/{}", mat.name(), fac(factor)),
            Self::Common { layer, mat, factor } => {
                write!(f, "common/{layer}/{}/{}", mat.name(), fac(factor))
            }
        }
    }
}

/// Which experts a gradient request covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertSel {
    None,
    Domain(usize),
    All,
}

/// Trainable subset for a gradient request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSubset {
    pub backbone: bool,
    pub prompts: bool,
    pub common: bool,
    pub experts: ExpertSel,
}

impl ParamSubset {
    pub const PROMPTS: Self = Self {
        backbone: false,
        prompts: true,
        common: false,
        experts: ExpertSel::None,
    };
    pub const COMMON: Self = Self {
        backbone: false,
        prompts: false,
        common: true,
        experts: ExpertSel::None,
    };
    pub const EXPERTS: Self = Self {
        backbone: false,
        prompts: false,
        common: false,
        experts: ExpertSel::All,
    };
    pub const BACKBONE: Self = Self {
        backbone: true,
        prompts: false,
        common: false,
        experts: ExpertSel::None,
    };

    pub fn expert_domain(k: usize) -> Self {
        Self {
            experts: ExpertSel::Domain(k),
            ..Self::EXPERTS
        }
    }

    fn includes(&self, id: &ParamId) -> bool {
        match id {
            ParamId::Prompts => self.prompts,
            ParamId::Common { .. } => self.common,
            ParamId::Expert { domain, .. } => match self.experts {
                ExpertSel::None => false,
                ExpertSel::Domain(k) => *domain == k,
                ExpertSel::All => true,
            },
            _ => self.backbone,
        }
    }
}

/// Full parameter store of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    /// `n_pt × d_model`; `None` runs without a prompt prefix.
    pub prompts: Option<Mat<T>>,
    pub experts: Option<ExpertSet<T>>,
    /// Once set, gradient requests touching the backbone are rejected.
    pub backbone_frozen: bool,
}

impl<T: Float> Model<T> {
    /// Randomly initialized backbone, no prompts, no adapters, not frozen.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone: Backbone::init(&config, rng),
            config,
            prompts: None,
            experts: None,
            backbone_frozen: false,
        })
    }

    pub fn freeze_backbone(&mut self) {
        self.backbone_frozen = true;
    }

    /// Prompts initialised from the embeddings of randomly chosen tokens.
    pub fn init_prompts<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let cfg = &self.config;
        let mut p = Mat::zeros(cfg.n_pt, cfg.d_model);
        for i in 0..cfg.n_pt {
            let t = rng.random_range(0..cfg.vocab_size);
            p.row_mut(i).copy_from_slice(self.backbone.tok_emb.row(t));
        }
        self.prompts = Some(p);
    }

    pub fn n_prompt_rows(&self) -> usize {
        self.prompts.as_ref().map_or(0, |p| p.rows())
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gain: l.gain.cast(),
            bias: l.bias.cast(),
        };
        let pair = |p: &LoraPair<T>| LoraPair {
            a: p.a.cast(),
            b: p.b.cast(),
        };
        let adapter = |a: &LayerAdapter<T>| LayerAdapter {
            w_in: pair(&a.w_in),
            w_out: pair(&a.w_out),
        };
        let bb = &self.backbone;
        Model {
            config: self.config.clone(),
            backbone: Backbone {
                tok_emb: bb.tok_emb.cast(),
                pos_emb: bb.pos_emb.cast(),
                layers: bb
                    .layers
                    .iter()
                    .map(|b| Block {
                        ln1: ln(&b.ln1),
                        wq: b.wq.cast(),
                        wk: b.wk.cast(),
                        wv: b.wv.cast(),
                        wo: b.wo.cast(),
                        ln2: ln(&b.ln2),
                        w_in: b.w_in.cast(),
                        w_out: b.w_out.cast(),
                    })
                    .collect(),
                ln_f: ln(&bb.ln_f),
                lm_head: bb.lm_head.cast(),
            },
            prompts: self.prompts.as_ref().map(|p| p.cast()),
            experts: self.experts.as_ref().map(|e| ExpertSet {
                alpha: e.alpha,
                domains: e
                    .domains
                    .iter()
                    .map(|d| d.iter().map(adapter).collect())
                    .collect(),
                common: e.common.as_ref().map(|c| c.iter().map(adapter).collect()),
            }),
            backbone_frozen: self.backbone_frozen,
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn params(&self) -> Vec<(ParamId, &Mat<T>)> {
        let mut out = Vec::new();
        let bb = &self.backbone;
        out.push((ParamId::TokEmb, &bb.tok_emb));
        out.push((ParamId::PosEmb, &bb.pos_emb));
        for (l, b) in bb.layers.iter().enumerate() {
            out.push((ParamId::LnGain(l, LnSlot::Ln1), &b.ln1.gain));
            out.push((ParamId::LnBias(l, LnSlot::Ln1), &b.ln1.bias));
            out.push((ParamId::Attn(l, AttnMat::Q), &b.wq));
            out.push((ParamId::Attn(l, AttnMat::K), &b.wk));
            out.push((ParamId::Attn(l, AttnMat::V), &b.wv));
            out.push((ParamId::Attn(l, AttnMat::O), &b.wo));
            out.push((ParamId::LnGain(l, LnSlot::Ln2), &b.ln2.gain));
            out.push((ParamId::LnBias(l, LnSlot::Ln2), &b.ln2.bias));
            out.push((ParamId::Ffn(l, FfnMat::Wi), &b.w_in));
            out.push((ParamId::Ffn(l, FfnMat::Wo), &b.w_out));
        }
        out.push((ParamId::FinalLnGain, &bb.ln_f.gain));
        out.push((ParamId::FinalLnBias, &bb.ln_f.bias));
        out.push((ParamId::LmHead, &bb.lm_head));
        if let Some(p) = &self.prompts {
            out.push((ParamId::Prompts, p));
        }
        if let Some(e) = &self.experts {
            for (domain, layers) in e.domains.iter().enumerate() {
                for (layer, a) in layers.iter().enumerate() {
                    for mat in [FfnMat::Wi, FfnMat::Wo] {
                        let pair = a.pair(mat);
                        out.push((ParamId::Expert { domain, layer, mat, factor: Factor::A }, &pair.a));
                        out.push((ParamId::Expert { domain, layer, mat, factor: Factor::B }, &pair.b));
                    }
                }
            }
            if let Some(c) = &e.common {
                for (layer, a) in c.iter().enumerate() {
                    for mat in [FfnMat::Wi, FfnMat::Wo] {
                        let pair = a.pair(mat);
                        out.push((ParamId::Common { layer, mat, factor: Factor::A }, &pair.a));
                        out.push((ParamId::Common { layer, mat, factor: Factor::B }, &pair.b));
                    }
                }
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        let bb = &self.backbone;
        let ln = |l: usize, s: LnSlot| {
            bb.layers.get(l).map(|b| match s {
                LnSlot::Ln1 => &b.ln1,
                LnSlot::Ln2 => &b.ln2,
            })
        };
        match id {
            ParamId::TokEmb => Some(&bb.tok_emb),
            ParamId::PosEmb => Some(&bb.pos_emb),
            ParamId::LnGain(l, s) => ln(l, s).map(|n| &n.gain),
            ParamId::LnBias(l, s) => ln(l, s).map(|n| &n.bias),
            ParamId::Attn(l, m) => bb.layers.get(l).map(|b| match m {
                AttnMat::Q => &b.wq,
                AttnMat::K => &b.wk,
                AttnMat::V => &b.wv,
                AttnMat::O => &b.wo,
            }),
            ParamId::Ffn(l, m) => bb.layers.get(l).map(|b| match m {
                FfnMat::Wi => &b.w_in,
                FfnMat::Wo => &b.w_out,
            }),
            ParamId::FinalLnGain => Some(&bb.ln_f.gain),
            ParamId::FinalLnBias => Some(&bb.ln_f.bias),
            ParamId::LmHead => Some(&bb.lm_head),
            ParamId::Prompts => self.prompts.as_ref(),
            ParamId::Expert {
                domain,
                layer,
                mat,
                factor,
            } => self
                .experts
                .as_ref()
                .and_then(|e| e.domains.get(domain))
                .and_then(|d| d.get(layer))
                .map(|a| select(a.pair(mat), factor)),
            ParamId::Common { layer, mat, factor } => self
                .experts
                .as_ref()
                .and_then(|e| e.common.as_ref())
                .and_then(|c| c.get(layer))
                .map(|a| select(a.pair(mat), factor)),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Mat<T>> {
        let bb = &mut self.backbone;
        match id {
            ParamId::TokEmb => Some(&mut bb.tok_emb),
            ParamId::PosEmb => Some(&mut bb.pos_emb),
            ParamId::LnGain(l, s) | ParamId::LnBias(l, s) => {
                let b = bb.layers.get_mut(l)?;
                let n = match s {
                    LnSlot::Ln1 => &mut b.ln1,
                    LnSlot::Ln2 => &mut b.ln2,
                };
                Some(if matches!(id, ParamId::LnGain(..)) {
                    &mut n.gain
                } else {
                    &mut n.bias
                })
            }
            ParamId::Attn(l, m) => bb.layers.get_mut(l).map(|b| match m {
                AttnMat::Q => &mut b.wq,
                AttnMat::K => &mut b.wk,
                AttnMat::V => &mut b.wv,
                AttnMat::O => &mut b.wo,
            }),
            ParamId::Ffn(l, m) => bb.layers.get_mut(l).map(|b| match m {
                FfnMat::Wi => &mut b.w_in,
                FfnMat::Wo => &mut b.w_out,
            }),
            ParamId::FinalLnGain => Some(&mut bb.ln_f.gain),
            ParamId::FinalLnBias => Some(&mut bb.ln_f.bias),
            ParamId::LmHead => Some(&mut bb.lm_head),
            ParamId::Prompts => self.prompts.as_mut(),
            ParamId::Expert {
                domain,
                layer,
                mat,
                factor,
            } => self
                .experts
                .as_mut()
                .and_then(|e| e.domains.get_mut(domain))
                .and_then(|d| d.get_mut(layer))
                .map(|a| select_mut(a, mat, factor)),
            ParamId::Common { layer, mat, factor } => self
                .experts
                .as_mut()
                .and_then(|e| e.common.as_mut())
                .and_then(|c| c.get_mut(layer))
                .map(|a| select_mut(a, mat, factor)),
        }
    }

    /// Layout of the flat gradient vector for `subset`.
    pub fn layout(&self, subset: &ParamSubset) -> Result<GradLayout> {
        if subset.backbone && self.backbone_frozen {
            return Err(Error::Frozen("backbone".into()));
        }
        if subset.prompts && self.prompts.is_none() {
            return Err(Error::invalid("subset.prompts", "model has no prompt block"));
        }
        let experts = self.experts.as_ref();
        if subset.common && experts.and_then(|e| e.common.as_ref()).is_none() {
            return Err(Error::invalid("subset.common", "model has no common adapter"));
        }
        match subset.experts {
            ExpertSel::None => {}
            ExpertSel::All => {
                if !experts.is_some_and(|e| e.has_experts()) {
                    return Err(Error::invalid("subset.experts", "model has no experts"));
                }
            }
            ExpertSel::Domain(k) => {
                let n = experts.map_or(0, |e| e.domains.len());
                if k >= n {
                    return Err(Error::Domain { domain: k, k: n });
                }
            }
        }
        let mut entries = Vec::new();
        let mut offset = 0;
        for (id, m) in self.params() {
            if subset.includes(&id) {
                entries.push(Slot {
                    id,
                    offset,
                    rows: m.rows(),
                    cols: m.cols(),
                });
                offset += m.len();
            }
        }
        Ok(GradLayout::new(entries, offset))
    }

    /// Copy of the parameters covered by `layout`, flattened.
    pub fn gather(&self, layout: &GradLayout) -> Vec<T> {
        let mut out = vec![T::zero(); layout.total()];
        for s in layout.slots() {
            let m = self.param(s.id).expect("layout built from this model");
            out[s.range()].copy_from_slice(m.as_slice());
        }
        out
    }

    /// Inverse of [`Model::gather`].
    pub fn scatter(&mut self, layout: &GradLayout, flat: &[T]) {
        assert_eq!(flat.len(), layout.total(), "scatter length");
        for s in layout.slots() {
            let m = self.param_mut(s.id).expect("layout built from this model");
            m.as_mut_slice().copy_from_slice(&flat[s.range()]);
        }
    }

    /// Total scalar count over the whole store.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.config.num_domains {
            return Err(Error::Domain {
                domain,
                k: self.config.num_domains,
            });
        }
        Ok(())
    }
}

fn select<T>(p: &LoraPair<T>, f: Factor) -> &Mat<T> {
    match f {
        Factor::A => &p.a,
        Factor::B => &p.b,
    }
}

fn select_mut<T>(a: &mut LayerAdapter<T>, m: FfnMat, f: Factor) -> &mut Mat<T> {
    let p = match m {
        FfnMat::Wi => &mut a.w_in,
        FfnMat::Wo => &mut a.w_out,
    };
    match f {
        Factor::A => &mut p.a,
        Factor::B => &mut p.b,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub id: ParamId,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

/// Positions of each trainable tensor inside a flat gradient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradLayout {
    slots: Vec<Slot>,
    index: HashMap<ParamId, usize>,
    total: usize,
}

impl GradLayout {
    fn new(slots: Vec<Slot>, total: usize) -> Self {
        let index = slots.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        Self { slots, index, total }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slot(&self, id: ParamId) -> Option<&Slot> {
        self.index.get(&id).map(|&i| &self.slots[i])
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.id)
    }
}
