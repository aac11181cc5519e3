//! Detectors: KGW z-score, SynthID mean g-value, log-space p-values, and
//! grouped-median reporting.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::schemes::{SchemeKind, WatermarkSpec, Watermarker};

const LN_10: f64 = std::f64::consts::LN_10;

/// Above this `z` the upper tail comes from the asymptotic series.
pub const ASYMPTOTIC_CUTOFF: f64 = 8.0;

/// `ln Q(z)` for `z > 0` by the asymptotic expansion of the Mills ratio.
fn ln_upper_tail_asymptotic(z: f64) -> f64 {
    let r = 1.0 / (z * z);
    let series = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * 105.0)));
    -0.5 * z * z - (z * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
}

/// `log10(1 - Phi(z))`, finite for any finite `z`.
pub fn normal_log10_sf(z: f64) -> f64 {
    if z >= 0.0 {
        return ln_upper_tail(z) / LN_10;
    }
    // 1 - Q(|z|): keep Q's precision through ln_1p
    let q = ln_upper_tail(-z).exp();
    (-q).ln_1p() / LN_10
}

/// `ln Q(z)` for `z >= 0`.
fn ln_upper_tail(z: f64) -> f64 {
    if z > ASYMPTOTIC_CUTOFF {
        ln_upper_tail_asymptotic(z)
    } else {
        (0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln()
    }
}

/// `z = (greens - gamma T) / sqrt(gamma (1 - gamma) T)`.
pub fn kgw_z_from_counts(greens: u64, t: u64, gamma: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::Empty("scored token stream"));
    }
    let t = t as f64;
    Ok((greens as f64 - gamma * t) / (gamma * (1.0 - gamma) * t).sqrt())
}

/// `log10 p` for a SynthID mean g-value over `m * t` draws.
pub fn synthid_log10_p(gbar: f64, m: u32, t: u64) -> Result<f64> {
    if m == 0 || t == 0 {
        return Err(Error::param("m*T", "must be positive"));
    }
    let z = (gbar - 0.5) * (4.0 * m as f64 * t as f64).sqrt();
    Ok(normal_log10_sf(z))
}

/// Re-derives per-token watermark scores from context alone: 1/0 green for
/// KGW, the number of `g = 1` layers for SynthID.
pub struct Detector {
    wm: Watermarker,
}

impl Detector {
    pub fn new(spec: WatermarkSpec, vocab: Vocab) -> Result<Self> {
        Ok(Self {
            wm: Watermarker::new(spec, vocab)?,
        })
    }

    pub fn spec(&self) -> &WatermarkSpec {
        self.wm.spec()
    }

    pub fn watermarker(&self) -> &Watermarker {
        &self.wm
    }

    fn max_score(&self) -> u32 {
        match self.spec().kind {
            SchemeKind::Kgw => 1,
            SchemeKind::SynthId => self.spec().layers,
        }
    }

    /// Scores of the continuation tokens of one sequence, in order.
    pub fn sequence_scores(&self, seq: &TokenSeq) -> Result<Vec<u32>> {
        let need = self.spec().n - 1;
        let start = seq.prompt_len;
        if start < need && start < seq.len() {
            return Err(Error::InsufficientContext {
                position: start,
                available: start,
                needed: need,
            });
        }
        (start..seq.len())
            .map(|i| {
                let h = self.wm.rule_hash(&seq.tokens[..i])?;
                let tok = seq.tokens[i];
                self.wm.vocab().check(tok)?;
                Ok(match self.spec().kind {
                    SchemeKind::Kgw => self.wm.is_green(h, tok) as u32,
                    SchemeKind::SynthId => self.wm.g_count(h, tok),
                })
            })
            .collect()
    }

    /// Concatenated per-token scores over all sequences, in corpus order.
    pub fn token_scores(&self, seqs: &[TokenSeq]) -> Result<Vec<u32>> {
        let per: Vec<Vec<u32>> = seqs
            .par_iter()
            .map(|s| self.sequence_scores(s))
            .collect::<Result<_>>()?;
        Ok(per.concat())
    }

    /// Statistic and `log10 p` for one block of scores.
    pub fn block_stat(&self, scores: &[u32]) -> Result<GroupResult> {
        let t = scores.len() as u64;
        let total: u64 = scores.iter().map(|&s| s as u64).sum();
        match self.spec().kind {
            SchemeKind::Kgw => {
                let gamma = self.spec().effective_gamma(self.wm.vocab());
                let z = kgw_z_from_counts(total, t, gamma)?;
                Ok(GroupResult {
                    statistic: z,
                    log10_p: normal_log10_sf(z),
                })
            }
            SchemeKind::SynthId => {
                let m = self.spec().layers;
                if t == 0 || m == 0 {
                    return Err(Error::Empty("scored token stream"));
                }
                let gbar = total as f64 / (m as u64 * t) as f64;
                Ok(GroupResult {
                    statistic: gbar,
                    log10_p: synthid_log10_p(gbar, m, t)?,
                })
            }
        }
    }

    /// z-score of a whole score stream (for SynthID, of its mean g-value).
    pub fn stream_z(&self, scores: &[u32]) -> Result<f64> {
        let r = self.block_stat(scores)?;
        Ok(match self.spec().kind {
            SchemeKind::Kgw => r.statistic,
            SchemeKind::SynthId => {
                (r.statistic - 0.5) * (4.0 * self.spec().layers as f64 * scores.len() as f64).sqrt()
            }
        })
    }

    pub fn report(&self, seqs: &[TokenSeq], group_size: usize) -> Result<DetectionReport> {
        group_and_report(&self.token_scores(seqs)?, group_size, self)
    }

    /// Checks a score is in range for this detector.
    fn check_scores(&self, scores: &[u32]) -> Result<()> {
        let max = self.max_score();
        match scores.iter().position(|&s| s > max) {
            Some(i) => Err(Error::param(
                "scores",
                format!("score {} at {i} exceeds {max}", scores[i]),
            )),
            None => Ok(()),
        }
    }
}

/// KGW z-score over the continuation tokens of `seqs`.
pub fn kgw_z(seqs: &[TokenSeq], spec: &WatermarkSpec, vocab: Vocab) -> Result<(f64, u64, u64)> {
    if spec.kind != SchemeKind::Kgw {
        return Err(Error::param(
            "watermark.scheme",
            "kgw_z requires a KGW spec",
        ));
    }
    let det = Detector::new(spec.clone(), vocab)?;
    let scores = det.token_scores(seqs)?;
    let greens: u64 = scores.iter().map(|&s| s as u64).sum();
    let t = scores.len() as u64;
    let z = kgw_z_from_counts(greens, t, spec.effective_gamma(vocab))?;
    Ok((z, greens, t))
}

/// Mean g-value over all layers and continuation tokens, and `m * T`.
pub fn synthid_stat(seqs: &[TokenSeq], spec: &WatermarkSpec, vocab: Vocab) -> Result<(f64, u64)> {
    if spec.kind != SchemeKind::SynthId {
        return Err(Error::param(
            "watermark.scheme",
            "synthid_stat requires a SynthID spec",
        ));
    }
    let det = Detector::new(spec.clone(), vocab)?;
    let scores = det.token_scores(seqs)?;
    let mt = spec.layers as u64 * scores.len() as u64;
    if mt == 0 {
        return Err(Error::Empty("scored token stream"));
    }
    let total: u64 = scores.iter().map(|&s| s as u64).sum();
    Ok((total as f64 / mt as f64, mt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub statistic: f64,
    pub log10_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scheme: WatermarkSpec,
    pub group_size: usize,
    pub per_group: Vec<GroupResult>,
    pub median_log10_p: f64,
}

impl DetectionReport {
    pub fn mean_neg_log10_p(&self) -> f64 {
        self.per_group.iter().map(|g| -g.log10_p).sum::<f64>() / self.per_group.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_index,statistic,log10_p\n");
        for (i, g) in self.per_group.iter().enumerate() {
            writeln!(out, "{i},{},{}", g.statistic, g.log10_p).unwrap();
        }
        writeln!(out, "median,,{}", self.median_log10_p).unwrap();
        out
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Splits the score stream into disjoint consecutive groups of exactly
/// `group_size` tokens (dropping the remainder) and reports the median.
pub fn group_and_report(
    scores: &[u32],
    group_size: usize,
    detector: &Detector,
) -> Result<DetectionReport> {
    if group_size == 0 {
        return Err(Error::param("detect.group_size", "must be positive"));
    }
    if scores.len() < group_size {
        return Err(Error::param(
            "detect.group_size",
            format!(
                "stream of {} tokens is shorter than one group of {group_size}",
                scores.len()
            ),
        ));
    }
    detector.check_scores(scores)?;
    let per_group: Vec<GroupResult> = scores
        .par_chunks_exact(group_size)
        .map(|g| detector.block_stat(g))
        .collect::<Result<_>>()?;
    let logs: Vec<f64> = per_group.iter().map(|g| g.log10_p).collect();
    Ok(DetectionReport {
        scheme: detector.spec().clone(),
        group_size,
        median_log10_p: median(&logs).expect("at least one group"),
        per_group,
    })
}
