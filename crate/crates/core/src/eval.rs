//! Next-token accuracy, knowledge transfer, bridge fraction, and per-token
//! prediction diffs.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{first_window, Corpus, Document, Split, BOS, CLOSE, EOS, OPEN};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Float;

/// Correct and scored position counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Teacher-forced argmax tally over the first-`len` window of each document.
/// Documents with fewer than two tokens contribute nothing.
pub fn next_token_tally<T: Float>(
    model: &Model<T>,
    route: usize,
    docs: &[&Document],
    len: usize,
) -> Result<Tally> {
    let per_doc: Vec<Result<Tally>> = docs
        .par_iter()
        .map(|doc| {
            let block = first_window(doc, len);
            let tokens = block.real_tokens();
            if tokens.len() < 2 {
                return Ok(Tally::default());
            }
            let pred = model.predictions(route, tokens)?;
            let correct = pred.iter().zip(&tokens[1..]).filter(|(p, t)| p == t).count();
            Ok(Tally {
                correct,
                total: pred.len(),
            })
        })
        .collect();
    let mut out = Tally::default();
    for t in per_doc {
        let t = t?;
        out.correct += t.correct;
        out.total += t.total;
    }
    Ok(out)
}

/// Micro-averaged next-token accuracy.
pub fn next_token_accuracy<T: Float>(
    model: &Model<T>,
    route: usize,
    docs: &[&Document],
    len: usize,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::invalid("documents", "empty evaluation set"));
    }
    let t = next_token_tally(model, route, docs, len)?;
    if t.total == 0 {
        return Err(Error::invalid("documents", "no document has two or more tokens"));
    }
    Ok(t.accuracy())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    /// Indexed by domain; micro-averaged over token positions. Domains that
    /// were not evaluated hold NaN, written as `null`.
    #[serde(with = "nullable::vec")]
    pub per_domain_accuracy: Vec<f64>,
    pub per_domain_positions: Vec<usize>,
    /// Unweighted mean across evaluated domains.
    #[serde(with = "nullable::scalar")]
    pub macro_accuracy: f64,
}

/// Test-split accuracy of every domain, each routed to its own expert.
/// `domains` restricts evaluation (e.g. a single-domain model); other
/// entries are reported as NaN.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    corpus: &Corpus,
    len: usize,
    domains: Option<&[usize]>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut acc = vec![f64::NAN; corpus.num_domains];
    let mut pos = vec![0; corpus.num_domains];
    for k in 0..corpus.num_domains {
        if domains.is_some_and(|d| !d.contains(&k)) {
            continue;
        }
        let docs: Vec<&Document> = corpus.docs(k, Split::Test).collect();
        if docs.is_empty() {
            continue;
        }
        let t = next_token_tally(model, k, &docs, len)?;
        acc[k] = t.accuracy();
        pos[k] = t.total;
    }
    Ok((acc, pos))
}

impl EvalReport {
    pub fn new(variant: impl Into<String>, seed: u64, epochs: usize, acc: Vec<f64>, positions: Vec<usize>) -> Self {
        let finite: Vec<f64> = acc.iter().copied().filter(|v| v.is_finite()).collect();
        let macro_accuracy = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            variant: variant.into(),
            seed,
            epochs,
            per_domain_accuracy: acc,
            per_domain_positions: positions,
            macro_accuracy,
        }
    }
}

/// Per-domain accuracy of `variant` minus that of `baseline`.
pub fn knowledge_transfer(variant: &EvalReport, baseline: &EvalReport) -> Result<Vec<f64>> {
    if variant.per_domain_accuracy.len() != baseline.per_domain_accuracy.len() {
        return Err(Error::invalid(
            "reports",
            format!(
                "domain count mismatch: {} vs {}",
                variant.per_domain_accuracy.len(),
                baseline.per_domain_accuracy.len()
            ),
        ));
    }
    Ok(variant
        .per_domain_accuracy
        .iter()
        .zip(&baseline.per_domain_accuracy)
        .map(|(a, b)| a - b)
        .collect())
}

/// `(noesis − share_nothing) / (non_private − share_nothing)`; `None` when
/// the non-private accuracy does not exceed the share-nothing accuracy.
pub fn bridge_fraction(noesis: f64, share_nothing: f64, non_private: f64) -> Option<f64> {
    let denom = non_private - share_nothing;
    (denom > 0.0 && denom.is_finite()).then(|| (noesis - share_nothing) / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub per_domain: Vec<Option<f64>>,
    /// Mean over domains with a defined fraction.
    pub average: Option<f64>,
}

pub fn bridge_report(noesis: &[f64], share_nothing: &[f64], non_private: &[f64]) -> Result<BridgeReport> {
    if noesis.len() != share_nothing.len() || noesis.len() != non_private.len() {
        return Err(Error::invalid("reports", "domain count mismatch"));
    }
    let per_domain: Vec<Option<f64>> = (0..noesis.len())
        .map(|k| bridge_fraction(noesis[k], share_nothing[k], non_private[k]))
        .collect();
    let defined: Vec<f64> = per_domain.iter().flatten().copied().collect();
    let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(BridgeReport { per_domain, average })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    BothCorrect,
    BothWrong,
    OnlyACorrect,
    OnlyBCorrect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDiff {
    /// Scored window; `markers[i]` describes the prediction of `tokens[i + 1]`.
    pub tokens: Vec<u32>,
    pub markers: Vec<Marker>,
}

impl PredictionDiff {
    pub fn count(&self, m: Marker) -> usize {
        self.markers.iter().filter(|x| **x == m).count()
    }
}

/// Four-way per-position argmax comparison of two models on one document.
pub fn prediction_diff<T: Float>(
    a: (&Model<T>, usize),
    b: (&Model<T>, usize),
    doc: &Document,
    len: usize,
) -> Result<PredictionDiff> {
    if a.0.config.vocab_size != b.0.config.vocab_size {
        return Err(Error::invalid(
            "vocab_size",
            format!("{} vs {}", a.0.config.vocab_size, b.0.config.vocab_size),
        ));
    }
    let block = first_window(doc, len);
    let tokens = block.real_tokens().to_vec();
    let pa = a.0.predictions(a.1, &tokens)?;
    let pb = b.0.predictions(b.1, &tokens)?;
    let markers = tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, t)| match (pa[i] == *t, pb[i] == *t) {
            (true, true) => Marker::BothCorrect,
            (false, false) => Marker::BothWrong,
            (true, false) => Marker::OnlyACorrect,
            (false, true) => Marker::OnlyBCorrect,
        })
        .collect();
    Ok(PredictionDiff { tokens, markers })
}

fn token_text(t: u32) -> String {
    match t {
        BOS => "<s>".into(),
        EOS => "</s>".into(),
        OPEN => "(".into(),
        CLOSE => ")".into(),
        _ => format!("k{t}"),
    }
}

/// ANSI rendering: red both wrong, blue only B correct, green only A correct.
pub fn render_ansi(diff: &PredictionDiff) -> String {
    let mut out = token_text(diff.tokens[0]);
    for (t, m) in diff.tokens[1..].iter().zip(&diff.markers) {
        let code = match m {
            Marker::BothCorrect => "0",
            Marker::BothWrong => "31",
            Marker::OnlyBCorrect => "34",
            Marker::OnlyACorrect => "32",
        };
        let _ = write!(out, " \x1b[{code}m{}\x1b[0m", token_text(*t));
    }
    out
}

pub fn render_html(diff: &PredictionDiff, title: &str) -> String {
    let mut body = format!("<span>{}</span>", token_text(diff.tokens[0]));
    for (t, m) in diff.tokens[1..].iter().zip(&diff.markers) {
        let color = match m {
            Marker::BothCorrect => "inherit",
            Marker::BothWrong => "#d62728",
            Marker::OnlyBCorrect => "#1f77b4",
            Marker::OnlyACorrect => "#2ca02c",
        };
        let _ = write!(body, " <span style=\"color:{color}\">{}</span>", token_text(*t));
    }
    let title = title.replace('&', "&amp;").replace('<', "&lt;");
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title}</title></head>\n\
         <body style=\"font-family:monospace\">\n<h3>{title}</h3>\n<p>{body}</p>\n</body></html>\n"
    )
}

/// NaN travels through JSON as `null`.
mod nullable {
    pub mod scalar {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            if v.is_nan() {
                s.serialize_none()
            } else {
                s.serialize_some(v)
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
        }
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| (!x.is_nan()).then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw = Vec::<Option<f64>>::deserialize(d)?;
            Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}
