//! Cross-domain membership inference by thresholding the average token
//! log-likelihood.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{first_window, Corpus, Document, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    /// Documents with fewer than two tokens.
    pub skipped: usize,
}

/// Average log-likelihood of the first-`len` window of each document.
pub fn score_set<T: Float>(
    model: &Model<T>,
    route: usize,
    docs: &[&Document],
    len: usize,
) -> Result<ScoreSet> {
    if docs.is_empty() {
        return Err(Error::invalid("documents", "empty scoring set"));
    }
    let per_doc: Vec<Result<Option<f64>>> = docs
        .par_iter()
        .map(|doc| {
            let block = first_window(doc, len);
            let tokens = block.real_tokens();
            if tokens.len() < 2 {
                return Ok(None);
            }
            model.sequence_log_likelihood(route, tokens).map(Some)
        })
        .collect();
    let mut scores = Vec::with_capacity(docs.len());
    let mut skipped = 0;
    for s in per_doc {
        match s? {
            Some(v) => scores.push(v),
            None => skipped += 1,
        }
    }
    Ok(ScoreSet { scores, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub attacking_domain: usize,
    pub target_domain: usize,
    pub model_tag: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Member predicted iff `S > threshold`.
    #[serde(with = "extended_float")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points ordered by decreasing threshold, from `(0, 0)` at `+∞` to `(1, 1)`
/// at `−∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_scores(members: &[f64], nonmembers: &[f64]) -> Result<()> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("scores", "member and non-member sets must be non-empty"));
    }
    if members.iter().chain(nonmembers).any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores", "non-finite score"));
    }
    Ok(())
}

/// Threshold sweep over every distinct score. Each threshold sits midway
/// between adjacent distinct values, so tied scores always switch together.
pub fn roc_curve(members: &[f64], nonmembers: &[f64]) -> Result<RocCurve> {
    check_scores(members, nonmembers)?;
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, n) = (members.len() as f64, nonmembers.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() {
            let next = all[i].0;
            next + 0.5 * (v - next)
        } else {
            f64::NEG_INFINITY
        };
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / m,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

/// TPR where the FPR equals `target`; between bracketing points the TPR is
/// interpolated linearly in FPR.
pub fn tpr_at_fpr(curve: &RocCurve, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid("target_fpr", format!("must be in (0, 1), got {target}")));
    }
    let exact = curve
        .points
        .iter()
        .filter(|p| p.fpr == target)
        .map(|p| p.tpr)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
    if let Some(t) = exact {
        return Ok(t);
    }
    let lo = curve
        .points
        .iter()
        .filter(|p| p.fpr < target)
        .max_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)))
        .ok_or_else(|| Error::invalid("curve", "no point below the target FPR"))?;
    let hi = curve
        .points
        .iter()
        .filter(|p| p.fpr > target)
        .min_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)))
        .ok_or_else(|| Error::invalid("curve", "no point above the target FPR"))?;
    let w = (target - lo.fpr) / (hi.fpr - lo.fpr);
    Ok(lo.tpr + w * (hi.tpr - lo.tpr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attacker: usize,
    pub target: usize,
    pub auc: f64,
    pub tpr_at_1: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    #[serde(default)]
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<RocCurve>,
}

impl AttackReport {
    pub fn from_scores(scores: &AttackScores) -> Result<Self> {
        let curve = roc_curve(&scores.member_scores, &scores.nonmember_scores)?;
        Ok(Self {
            attacker: scores.attacking_domain,
            target: scores.target_domain,
            auc: auc(&curve),
            tpr_at_1: tpr_at_fpr(&curve, 0.01)?,
            n_members: scores.member_scores.len(),
            n_nonmembers: scores.nonmember_scores.len(),
            skipped: 0,
            curve: Some(curve),
        })
    }

    /// `threshold,fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        if let Some(c) = &self.curve {
            for p in &c.points {
                let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
            }
        }
        out
    }
}

/// Membership scores for domain `target` under the deployed model of
/// domain `attacker`: train documents are members, test documents are not.
pub fn cross_domain_scores(
    model: &Model<f32>,
    attacker: usize,
    target: usize,
    corpus: &Corpus,
    len: usize,
    tag: &str,
) -> Result<(AttackScores, usize)> {
    if attacker == target {
        return Err(Error::invalid(
            "target",
            "attacker and target domain must differ for a cross-domain attack",
        ));
    }
    model.check_domain(target)?;
    let deployed = model.merge_for_deployment(attacker)?;
    let members: Vec<&Document> = corpus.docs(target, Split::Train).collect();
    let nonmembers: Vec<&Document> = corpus.docs(target, Split::Test).collect();
    let m = score_set(&deployed.model, attacker, &members, len)?;
    let n = score_set(&deployed.model, attacker, &nonmembers, len)?;
    Ok((
        AttackScores {
            member_scores: m.scores,
            nonmember_scores: n.scores,
            attacking_domain: attacker,
            target_domain: target,
            model_tag: tag.to_string(),
        },
        m.skipped + n.skipped,
    ))
}

pub fn cross_domain_attack(
    model: &Model<f32>,
    attacker: usize,
    target: usize,
    corpus: &Corpus,
    len: usize,
) -> Result<AttackReport> {
    let (scores, skipped) = cross_domain_scores(model, attacker, target, corpus, len, "")?;
    let mut r = AttackReport::from_scores(&scores)?;
    r.skipped = skipped;
    Ok(r)
}

/// Every ordered pair `(j, k)` with `j ≠ k`.
pub fn all_pairs(num_domains: usize) -> Vec<(usize, usize)> {
    (0..num_domains)
        .flat_map(|j| (0..num_domains).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSweep {
    pub pairs: Vec<AttackReport>,
}

/// JSON has no infinities; the two sentinel thresholds travel as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
            },
        }
    }
}
